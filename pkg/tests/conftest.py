"""Shared fixtures and reference implementations used across the test suite.

The reference implementations here are deliberately independent of the
package internals: association marginals come from brute-force enumeration
over consistent assignment vectors, and Gaussian quantities come from scipy.
"""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from nebptrack import ModelParams, PotentialObject
from nebptrack.bp import DaMessages


def enum_association_marginals(
    beta: np.ndarray, xi: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact association marginals by enumerating consistent assignments.

    An assignment maps each object i to a measurement index in 1..J or to 0,
    injectively on the nonzero part. Its weight is the product of the chosen
    beta entries times xi[j] for every measurement left unclaimed.
    """
    n_i = beta.shape[0]
    n_j = beta.shape[1] - 1
    p_a = np.zeros((n_i, n_j + 1))
    p_b = np.zeros((n_j, n_i + 1))
    total = 0.0
    for assignment in itertools.product(range(n_j + 1), repeat=n_i):
        claimed = [a for a in assignment if a > 0]
        if len(claimed) != len(set(claimed)):
            continue
        weight = 1.0
        for i, a in enumerate(assignment):
            weight *= beta[i, a]
        for j in range(1, n_j + 1):
            if j not in claimed:
                weight *= xi[j - 1]
        total += weight
        for i, a in enumerate(assignment):
            p_a[i, a] += weight
        for j in range(1, n_j + 1):
            if j in claimed:
                p_b[j - 1, assignment.index(j) + 1] += weight
            else:
                p_b[j - 1, 0] += weight
    return p_a / total, p_b / total


def marginals_from_messages(
    beta: np.ndarray, xi: np.ndarray, msgs: DaMessages
) -> tuple[np.ndarray, np.ndarray]:
    """Normalized beliefs implied by converged ratio messages."""
    pair = beta[:, 1:] * msgs.nu
    p_a = np.concatenate([beta[:, :1], pair], axis=1)
    p_a /= p_a.sum(axis=1, keepdims=True)
    p_b = np.concatenate([xi[:, None], msgs.phi.T], axis=1)
    p_b /= p_b.sum(axis=1, keepdims=True)
    return p_a, p_b


def max_row_tv(p: np.ndarray, q: np.ndarray) -> float:
    """Largest total-variation distance across matching rows."""
    if p.size == 0:
        return 0.0
    return float(0.5 * np.abs(p - q).sum(axis=1).max())


def random_da_instance(
    rng: np.random.Generator, n_i: int, n_j: int
) -> tuple[np.ndarray, np.ndarray]:
    """Association masses with a moderate spread around 1.

    Loopy marginals degrade gracefully as the masses of competing pairings
    are pushed decades apart, so accuracy bounds are stated for this
    operating regime rather than for adversarially frustrated inputs.
    """
    beta = np.exp(rng.normal(scale=0.6, size=(n_i, n_j + 1)))
    xi = 1.0 + np.exp(rng.normal(scale=1.0, size=n_j))
    return beta, xi


def random_potential_object(
    rng: np.random.Generator,
    track_id: int,
    n_particles: int = 40,
    d_shape: int = 0,
    kind: str = "legacy",
) -> PotentialObject:
    particles = np.empty((n_particles, 4))
    particles[:, :2] = rng.uniform(-40.0, 40.0, size=2) + rng.normal(
        scale=0.8, size=(n_particles, 2)
    )
    particles[:, 2:] = rng.normal(scale=1.5, size=(n_particles, 2))
    weights = rng.random(n_particles) + 0.1
    weights /= weights.sum()
    descriptor = None
    if d_shape:
        descriptor = rng.normal(size=d_shape)
        descriptor /= np.linalg.norm(descriptor)
    return PotentialObject(
        particles=particles,
        weights=weights,
        existence=float(rng.uniform(0.2, 0.95)),
        track_id=track_id,
        kind=kind,
        descriptor=descriptor,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_params() -> ModelParams:
    return ModelParams(n_particles=60, da_tolerance=1e-12)
