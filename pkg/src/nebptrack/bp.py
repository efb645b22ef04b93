"""Particle-based belief propagation tracker.

One tracking step factorizes into: time propagation of every potential
object (PO), evaluation of detection likelihood ratios against the current
frame, iterative data association on the bipartite object/measurement
graph, a belief update that produces posterior existence, particle weights
and association marginals, and finally pruning and track declaration.

Data association works on ratio messages. For legacy object i and
measurement j,

    beta[i, 0]  = (1 - e_i) + e_i (1 - p_d)
    beta[i, j]  = e_i p_d sum_p w_p f(z_j | x_p) / (mu_fa f_fa(z_j))
    xi[j]       = 1 + p_d (mu_u / mu_fa) m_roi(z_j)

where m_roi is the likelihood mass the measurement leaves inside the
region of interest. The fixed-point iteration exchanges

    nu[j, i]  = 1 / (xi[j] + sum_{i' != i} phi[i', j])
    phi[i, j] = beta[i, j] / (beta[i, 0] + sum_{j' != j} beta[i, j'] nu[j', i])

until the largest relative change falls below tolerance. All likelihood
ratios are floored at 1e-300 and messages capped at 1e150 so degenerate
configurations (hard gates, zero-probability branches) stay finite.

The belief update accepts an optional enhancement (per-measurement
acceptance weights and additive pairwise masses) produced by the learned
refinement layer; with weights of one and zero additive mass it reduces
exactly to the plain update.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from numba import njit
from scipy.stats import multivariate_normal, norm

from .model import (
    STATE_DIM,
    MeasurementFrame,
    ModelParams,
    PotentialObject,
    Rect,
    cv_transition,
)

BETA_FLOOR = 1e-300
MESSAGE_CAP = 1e150
DESCRIPTOR_EMA = 0.9  # retained fraction of a legacy object's shape estimate


@dataclass(frozen=True)
class DaInputs:
    """Inputs to data association: branch masses in ratio form.

    beta has shape (I, J+1); column 0 holds the missed/nonexistent mass and
    column j the mass for pairing object i with measurement j. xi has shape
    (J,) and holds the mass ratio for measurement j not originating from any
    legacy object (new object or false alarm, relative to a unit pairing
    entry).
    """

    beta: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        beta = np.ascontiguousarray(self.beta, dtype=float)
        xi = np.ascontiguousarray(self.xi, dtype=float)
        if beta.ndim != 2 or beta.shape[1] != len(xi) + 1:
            raise ValueError("beta must be (I, J+1) with xi of length J")
        if beta.size and beta.min() < 0.0:
            raise ValueError("beta entries must be nonnegative")
        if xi.size and xi.min() <= 0.0:
            raise ValueError("xi entries must be positive")
        if not (np.all(np.isfinite(beta)) and np.all(np.isfinite(xi))):
            raise ValueError("non-finite association inputs")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "xi", xi)

    @property
    def n_objects(self) -> int:
        return self.beta.shape[0]

    @property
    def n_measurements(self) -> int:
        return len(self.xi)


@dataclass(frozen=True)
class DaMessages:
    """Converged ratio messages. phi[i, j] flows object -> measurement,
    nu[i, j] measurement -> object (both stored I x J)."""

    phi: np.ndarray
    nu: np.ndarray
    iterations: int
    converged: bool


@njit(cache=True)
def _da_kernel(beta, xi, max_iters, tol):  # pragma: no cover - compiled
    n_i = beta.shape[0]
    n_j = beta.shape[1] - 1
    phi = np.ones((n_i, n_j))
    nu = np.ones((n_i, n_j))
    iters = 0
    converged = n_i == 0 or n_j == 0
    for it in range(max_iters):
        max_rel = 0.0
        for j in range(n_j):
            total = xi[j]
            for i in range(n_i):
                total += phi[i, j]
            for i in range(n_i):
                den = total - phi[i, j]
                if den < 1e-300:
                    den = 1e-300
                new = 1.0 / den
                if new > 1e150:
                    new = 1e150
                old = nu[i, j]
                scale = abs(old)
                if abs(new) > scale:
                    scale = abs(new)
                if scale < 1e-30:
                    scale = 1e-30
                rel = abs(new - old) / scale
                if rel > max_rel:
                    max_rel = rel
                nu[i, j] = new
        for i in range(n_i):
            total = beta[i, 0]
            for j in range(n_j):
                total += beta[i, j + 1] * nu[i, j]
            for j in range(n_j):
                den = total - beta[i, j + 1] * nu[i, j]
                if den < 1e-300:
                    den = 1e-300
                new = beta[i, j + 1] / den
                if new > 1e150:
                    new = 1e150
                old = phi[i, j]
                scale = abs(old)
                if abs(new) > scale:
                    scale = abs(new)
                if scale < 1e-30:
                    scale = 1e-30
                rel = abs(new - old) / scale
                if rel > max_rel:
                    max_rel = rel
                phi[i, j] = new
        iters = it + 1
        if max_rel <= tol:
            converged = True
            break
    return phi, nu, iters, converged


def iterate_da(inputs: DaInputs, max_iters: int, tol: float) -> DaMessages:
    """Run the ratio-message fixed-point iteration to convergence."""
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    phi, nu, iters, converged = _da_kernel(
        inputs.beta, inputs.xi, max_iters, float(tol)
    )
    return DaMessages(phi=phi, nu=nu, iterations=int(iters), converged=bool(converged))


def da_residual(inputs: DaInputs, msgs: DaMessages) -> float:
    """Largest relative violation of the fixed-point equations by msgs."""
    beta, xi = inputs.beta, inputs.xi
    phi, nu = msgs.phi, msgs.nu
    if phi.size == 0:
        return 0.0
    sum_phi = phi.sum(axis=0)[None, :]
    nu_next = 1.0 / np.maximum(xi[None, :] + sum_phi - phi, 1e-300)
    prod = beta[:, 1:] * nu_next
    total = beta[:, :1] + prod.sum(axis=1, keepdims=True)
    phi_next = beta[:, 1:] / np.maximum(total - prod, 1e-300)
    rel_nu = np.abs(nu_next - nu) / np.maximum(np.maximum(np.abs(nu), np.abs(nu_next)), 1e-30)
    rel_phi = np.abs(phi_next - phi) / np.maximum(np.maximum(np.abs(phi), np.abs(phi_next)), 1e-30)
    return float(max(rel_nu.max(), rel_phi.max()))


# ---------------------------------------------------------------------------
# likelihood machinery


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """Matrix A with A A^T = cov, valid for positive semidefinite cov."""
    eigvals, eigvecs = np.linalg.eigh(np.asarray(cov, dtype=float))
    return eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))


def _position_cov(params: ModelParams) -> np.ndarray:
    return np.asarray(params.meas_cov, dtype=float)[:2, :2]


def _velocity_cov(params: ModelParams) -> np.ndarray:
    r = np.asarray(params.meas_cov, dtype=float)
    if r.shape[0] == STATE_DIM:
        return r[2:, 2:]
    return np.eye(2)  # position-only observation: fall back to unit prior


def _obs_vectors(frame: MeasurementFrame, params: ModelParams) -> np.ndarray:
    return frame.z if params.obs_dim == STATE_DIM else frame.z[:, :2]


@dataclass(frozen=True)
class _DetectionCache:
    """Per (object, measurement, particle) detection likelihood ratios.

    lik_ratio[i, j, p] = p_d f(z_j | x_p) / (mu_fa f_fa), zeroed where the
    position gate excludes the pair.
    """

    lik_ratio: np.ndarray  # (I, J, n)
    gate: np.ndarray  # (I, J) bool


def _detection_cache(
    pred: Sequence[PotentialObject], frame: MeasurementFrame, params: ModelParams
) -> _DetectionCache:
    n_i = len(pred)
    n_j = len(frame)
    if n_i == 0 or n_j == 0:
        n = pred[0].particles.shape[0] if n_i else 0
        return _DetectionCache(
            lik_ratio=np.zeros((n_i, n_j, n)), gate=np.ones((n_i, n_j), dtype=bool)
        )
    h = np.asarray(params.meas_matrix, dtype=float)
    r = np.asarray(params.meas_cov, dtype=float)
    d = h.shape[0]
    r_inv = np.linalg.inv(r)
    log_norm = -0.5 * (d * np.log(2.0 * np.pi) + np.log(np.linalg.det(r)))
    z_obs = _obs_vectors(frame, params)
    ratio_scale = params.detection_prob / (
        params.mean_false_alarms * params.false_alarm_density()
    )
    r_pos = _position_cov(params)

    lik = np.empty((n_i, n_j, pred[0].particles.shape[0]))
    gate = np.ones((n_i, n_j), dtype=bool)
    for i, po in enumerate(pred):
        hx = po.particles @ h.T  # (n, d)
        diff = z_obs[:, None, :] - hx[None, :, :]  # (J, n, d)
        maha = np.einsum("jnd,de,jne->jn", diff, r_inv, diff)
        lik[i] = np.exp(log_norm - 0.5 * maha)
        if params.gate_chi2 is not None:
            mean_pos = po.weights @ po.particles[:, :2]
            centered = po.particles[:, :2] - mean_pos
            cov_pos = (po.weights[:, None] * centered).T @ centered + r_pos
            innov = frame.z[:, :2] - mean_pos
            d2 = np.einsum("jd,de,je->j", innov, np.linalg.inv(cov_pos), innov)
            gate[i] = d2 <= params.gate_chi2
    lik *= ratio_scale
    lik *= gate[:, :, None]
    return _DetectionCache(lik_ratio=lik, gate=gate)


def predict(
    po: PotentialObject, params: ModelParams, rng: np.random.Generator
) -> PotentialObject:
    """Propagate one potential object through the motion model.

    Existence decays by the survival probability; particles move through the
    constant-velocity map plus process noise. Weights are unchanged.
    """
    f = cv_transition(params.dt)
    noise = rng.standard_normal(po.particles.shape) @ _sqrt_factor(params.proc_cov).T
    particles = po.particles @ f.T + noise
    return replace(
        po,
        particles=particles,
        existence=min(po.existence * params.survival_prob, 1.0),
    )


def compute_beta(
    pred: Sequence[PotentialObject],
    frame: MeasurementFrame,
    params: ModelParams,
    _cache: _DetectionCache | None = None,
) -> np.ndarray:
    """Association masses for legacy objects, shape (I, J+1).

    Entries are floored at 1e-300; a gated pair therefore carries the floor
    rather than an exact zero, which keeps downstream ratios finite.
    """
    cache = _cache if _cache is not None else _detection_cache(pred, frame, params)
    n_i, n_j = len(pred), len(frame)
    beta = np.empty((n_i, n_j + 1))
    for i, po in enumerate(pred):
        e = po.existence
        beta[i, 0] = (1.0 - e) + e * (1.0 - params.detection_prob)
        beta[i, 1:] = e * (cache.lik_ratio[i] @ po.weights)
    return np.maximum(beta, BETA_FLOOR)


def _gaussian_rect_mass(centers: np.ndarray, cov: np.ndarray, roi: Rect) -> np.ndarray:
    """Probability mass of N(center, cov) inside the rectangle, per center."""
    if abs(cov[0, 1]) < 1e-12:
        sx, sy = np.sqrt(cov[0, 0]), np.sqrt(cov[1, 1])
        mx = norm.cdf((roi.x_max - centers[:, 0]) / sx) - norm.cdf(
            (roi.x_min - centers[:, 0]) / sx
        )
        my = norm.cdf((roi.y_max - centers[:, 1]) / sy) - norm.cdf(
            (roi.y_min - centers[:, 1]) / sy
        )
        return mx * my
    lo = np.array([roi.x_min, roi.y_min])
    hi = np.array([roi.x_max, roi.y_max])
    out = np.empty(len(centers))
    for k, c in enumerate(centers):
        mvn = multivariate_normal(mean=c, cov=cov)
        out[k] = (
            mvn.cdf(hi)
            - mvn.cdf([lo[0], hi[1]])
            - mvn.cdf([hi[0], lo[1]])
            + mvn.cdf(lo)
        )
    return np.clip(out, 0.0, 1.0)


def compute_xi(frame: MeasurementFrame, params: ModelParams) -> np.ndarray:
    """Non-legacy association mass per measurement, shape (J,).

    With uniform birth and false-alarm densities over the region the state
    integral collapses to the Gaussian position mass left inside it.
    """
    if len(frame) == 0:
        return np.zeros(0)
    mass = _gaussian_rect_mass(frame.z[:, :2], _position_cov(params), params.roi)
    return 1.0 + params.detection_prob * (
        params.mean_undetected / params.mean_false_alarms
    ) * mass


# ---------------------------------------------------------------------------
# belief update


@dataclass(frozen=True)
class Enhancement:
    """Learned refinement of the association masses.

    omega scales each measurement's legacy detection branches and its
    new-object share, mu adds pairwise mass informed by shape similarity,
    and cq holds the per-object normalizer sum_a beta[i, a] the scaled
    branches divide by.
    """

    omega: np.ndarray  # (J,)
    mu: np.ndarray  # (I, J)
    cq: np.ndarray  # (I,)


def enhanced_inputs(beta: np.ndarray, xi: np.ndarray, enh: Enhancement) -> DaInputs:
    """Combine plain masses with a refinement into new association inputs.

    Only the existing-object slices are refined: omega scales the legacy
    detection branches and the new-object share xi - 1, while the unit
    false-alarm share and the unit pairing entries stay untouched. Omega
    below one therefore reads as a locally raised false-alarm density.
    """
    beta_t = np.empty_like(beta)
    beta_t[:, 0] = beta[:, 0] / enh.cq
    beta_t[:, 1:] = enh.omega[None, :] * beta[:, 1:] / enh.cq[:, None] + enh.mu
    xi_t = np.maximum(1.0 + enh.omega * (xi - 1.0), BETA_FLOOR)
    return DaInputs(beta=np.maximum(beta_t, BETA_FLOOR), xi=xi_t)


def beta_normalizers(beta: np.ndarray) -> np.ndarray:
    """Per-object mass totals sum_a beta[i, a], shape (I,)."""
    return beta.sum(axis=1)


def xi_normalizers(xi: np.ndarray, n_objects: int) -> np.ndarray:
    """Per-measurement mass totals xi[j] + I, shape (J,)."""
    return xi + float(n_objects)


def systematic_resample(
    weights: np.ndarray, n: int, rng: np.random.Generator
) -> np.ndarray:
    """Indices of a systematic resample of size n."""
    positions = (rng.random() + np.arange(n)) / n
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions)


def _effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float(np.sum(weights**2))


def _sample_new_particles(
    z: np.ndarray, params: ModelParams, rng: np.random.Generator
) -> np.ndarray:
    """Particles for a newly detected object, inverted around measurement z."""
    n = params.n_particles
    pos_factor = _sqrt_factor(_position_cov(params))
    vel_factor = _sqrt_factor(_velocity_cov(params))
    pos = z[:2] + rng.standard_normal((n, 2)) @ pos_factor.T
    # resample the stragglers outside the region; clip whatever survives
    for _ in range(50):
        outside = ~params.roi.contains(pos)
        n_out = int(outside.sum())
        if n_out == 0:
            break
        pos[outside] = z[:2] + rng.standard_normal((n_out, 2)) @ pos_factor.T
    pos[:, 0] = np.clip(pos[:, 0], params.roi.x_min, params.roi.x_max)
    pos[:, 1] = np.clip(pos[:, 1], params.roi.y_min, params.roi.y_max)
    vel = z[2:4] + rng.standard_normal((n, 2)) @ vel_factor.T
    return np.hstack([pos, vel])


def _normalized(vec: np.ndarray) -> np.ndarray:
    norm_ = float(np.linalg.norm(vec))
    return vec / norm_ if norm_ > 0.0 else vec


@dataclass(frozen=True)
class BeliefResult:
    legacy: tuple[PotentialObject, ...]
    new: tuple[PotentialObject, ...]
    assoc_legacy: np.ndarray  # (I, J+1), row i is p(a_i = 0), p(a_i = 1), ...
    assoc_new: np.ndarray  # (J, I+1), row j is p(b_j = 0), p(b_j = 1), ...


def compute_beliefs(
    pred: Sequence[PotentialObject],
    frame: MeasurementFrame,
    inputs: DaInputs,
    msgs: DaMessages,
    params: ModelParams,
    rng: np.random.Generator,
    enhancement: Enhancement | None = None,
    next_track_id: int = 0,
    _cache: _DetectionCache | None = None,
) -> BeliefResult:
    """Posterior beliefs and association marginals after data association.

    inputs must be the association masses the messages were computed from
    (enhanced when an enhancement is given); either way xi - 1 is the
    new-object share of a measurement and 1 its false-alarm share.
    """
    n_i, n_j = len(pred), len(frame)
    cache = _cache if _cache is not None else _detection_cache(pred, frame, params)
    p_d = params.detection_prob

    legacy: list[PotentialObject] = []
    assoc_legacy = np.zeros((n_i, n_j + 1))
    for i, po in enumerate(pred):
        e = po.existence
        scale0 = 1.0 / enhancement.cq[i] if enhancement is not None else 1.0
        m_miss = e * (1.0 - p_d) * scale0
        m_gone = (1.0 - e) * scale0
        pair = inputs.beta[i, 1:] * msgs.nu[i] if n_j else np.zeros(0)
        total = max(m_gone + m_miss + pair.sum(), BETA_FLOOR)
        assoc_legacy[i, 0] = (m_gone + m_miss) / total
        if n_j:
            assoc_legacy[i, 1:] = pair / total
        existence = min(max((m_miss + pair.sum()) / total, 0.0), 1.0)

        if n_j:
            det_coeff = e * scale0 * (
                enhancement.omega if enhancement is not None else 1.0
            )
            extra = enhancement.mu[i] if enhancement is not None else np.zeros(n_j)
            factors = m_miss + (msgs.nu[i] * det_coeff) @ cache.lik_ratio[i] + float(
                msgs.nu[i] @ extra
            )
        else:
            factors = np.full(po.particles.shape[0], m_miss)
        weights = po.weights * factors
        w_sum = weights.sum()
        weights = weights / w_sum if w_sum > 0.0 else po.weights.copy()

        particles = po.particles
        if _effective_sample_size(weights) < 0.5 * len(weights):
            idx = systematic_resample(weights, len(weights), rng)
            particles = particles[idx]
            weights = np.full(len(weights), 1.0 / len(weights))

        descriptor = po.descriptor
        if descriptor is not None and n_j and frame.shapes.shape[1]:
            blend = assoc_legacy[i, 1:] @ frame.shapes
            descriptor = _normalized(
                DESCRIPTOR_EMA * descriptor + (1.0 - DESCRIPTOR_EMA) * blend
            )
        score = existence + float(assoc_legacy[i, 1:] @ frame.scores) if n_j else existence
        legacy.append(
            replace(
                po,
                particles=particles,
                weights=weights,
                existence=existence,
                descriptor=descriptor,
                score=score,
            )
        )

    new: list[PotentialObject] = []
    assoc_new = np.zeros((n_j, n_i + 1))
    for j in range(n_j):
        xi0 = inputs.xi[j]
        col = msgs.phi[:, j] if n_i else np.zeros(0)
        denom = max(xi0 + col.sum(), BETA_FLOOR)
        assoc_new[j, 0] = xi0 / denom
        if n_i:
            assoc_new[j, 1:] = col / denom
        existence = min(max((xi0 - 1.0) / denom, 0.0), 1.0)
        particles = _sample_new_particles(frame.z[j], params, rng)
        shape = frame.shapes[j] if frame.shapes.shape[1] else None
        new.append(
            PotentialObject(
                particles=particles,
                weights=np.full(params.n_particles, 1.0 / params.n_particles),
                existence=existence,
                track_id=next_track_id + j,
                kind="new",
                descriptor=_normalized(shape) if shape is not None else None,
                score=existence + float(frame.scores[j]),
                new_b0=float(assoc_new[j, 0]),
            )
        )
    return BeliefResult(
        legacy=tuple(legacy),
        new=tuple(new),
        assoc_legacy=assoc_legacy,
        assoc_new=assoc_new,
    )


def prune(pos: Sequence[PotentialObject], params: ModelParams) -> tuple[PotentialObject, ...]:
    """Drop negligible objects and new objects that mirror a legacy one."""
    kept = []
    for po in pos:
        if po.existence < params.prune_threshold:
            continue
        if po.kind == "new" and (
            po.new_b0 is None or po.new_b0 < params.new_po_keep_threshold
        ):
            continue
        kept.append(po)
    return tuple(kept)


@dataclass(frozen=True)
class Estimate:
    track_id: int
    state: np.ndarray  # (4,)
    existence: float
    score: float

    def __post_init__(self):
        state = np.asarray(self.state, dtype=float).reshape(STATE_DIM)
        state.setflags(write=False)
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "track_id", int(self.track_id))
        object.__setattr__(self, "existence", float(self.existence))
        object.__setattr__(self, "score", float(self.score))


def declare_and_estimate(
    pos: Sequence[PotentialObject], params: ModelParams
) -> list[Estimate]:
    """Weighted-mean state for every object above the declaration threshold."""
    return [
        Estimate(po.track_id, po.mean(), po.existence, po.score)
        for po in pos
        if po.existence > params.declare_threshold
    ]


# ---------------------------------------------------------------------------
# step orchestration


@dataclass(frozen=True)
class StepDiagnostics:
    """Intermediate quantities of one step, kept for training and analysis."""

    frame: MeasurementFrame
    kept_measurements: np.ndarray
    beta: np.ndarray
    xi: np.ndarray
    messages: DaMessages
    assoc_legacy: np.ndarray
    assoc_new: np.ndarray
    estimates: tuple[Estimate, ...]
    legacy_track_ids: tuple[int, ...]
    new_track_ids: tuple[int, ...]
    enhancement: Enhancement | None = None
    enhanced_messages: DaMessages | None = None


@dataclass(frozen=True)
class TrackerState:
    pos: tuple[PotentialObject, ...]
    frame_index: int
    next_track_id: int
    rng: np.random.Generator
    last: StepDiagnostics | None = None


def init_tracker(seed: int | np.random.Generator = 0) -> TrackerState:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return TrackerState(pos=(), frame_index=0, next_track_id=0, rng=rng)


# An enhancer maps (previous POs, predicted POs, frame, beta, xi, messages)
# to an Enhancement; bp_step uses none, the learned tracker injects one.
Enhancer = Callable[
    [
        tuple[PotentialObject, ...],
        tuple[PotentialObject, ...],
        MeasurementFrame,
        np.ndarray,
        np.ndarray,
        DaMessages,
    ],
    Enhancement,
]


def run_step(
    state: TrackerState,
    frame: MeasurementFrame,
    params: ModelParams,
    enhancer: Enhancer | None = None,
) -> TrackerState:
    frame_r, kept = frame.restrict_to(params.roi)
    prev_pos = state.pos
    pred = tuple(predict(po, params, state.rng) for po in prev_pos)
    cache = _detection_cache(pred, frame_r, params)
    beta = compute_beta(pred, frame_r, params, _cache=cache)
    xi = compute_xi(frame_r, params)
    inputs = DaInputs(beta=beta, xi=xi)
    msgs = iterate_da(inputs, params.da_max_iterations, params.da_tolerance)

    enhancement = None
    enhanced_msgs = None
    if enhancer is not None and len(frame_r):
        enhancement = enhancer(prev_pos, pred, frame_r, beta, xi, msgs)
        inputs = enhanced_inputs(beta, xi, enhancement)
        enhanced_msgs = iterate_da(inputs, params.da_max_iterations, params.da_tolerance)
        msgs_used = enhanced_msgs
    else:
        msgs_used = msgs

    result = compute_beliefs(
        pred,
        frame_r,
        inputs,
        msgs_used,
        params,
        state.rng,
        enhancement=enhancement,
        next_track_id=state.next_track_id,
        _cache=cache,
    )
    pos = prune(result.legacy + result.new, params)
    estimates = tuple(declare_and_estimate(pos, params))
    diag = StepDiagnostics(
        frame=frame_r,
        kept_measurements=kept,
        beta=beta,
        xi=xi,
        messages=msgs,
        assoc_legacy=result.assoc_legacy,
        assoc_new=result.assoc_new,
        estimates=estimates,
        legacy_track_ids=tuple(po.track_id for po in prev_pos),
        new_track_ids=tuple(po.track_id for po in result.new),
        enhancement=enhancement,
        enhanced_messages=enhanced_msgs,
    )
    return TrackerState(
        pos=tuple(po.with_kind("legacy") for po in pos),
        frame_index=state.frame_index + 1,
        next_track_id=state.next_track_id + len(frame_r),
        rng=state.rng,
        last=diag,
    )


def bp_step(
    state: TrackerState, frame: MeasurementFrame, params: ModelParams
) -> TrackerState:
    """One plain belief-propagation tracking step."""
    return run_step(state, frame, params, enhancer=None)


# ---------------------------------------------------------------------------
# serialization


def state_to_json(state: TrackerState) -> str:
    def po_dict(po: PotentialObject) -> dict:
        return {
            "particles": po.particles.tolist(),
            "weights": po.weights.tolist(),
            "existence": po.existence,
            "track_id": po.track_id,
            "kind": po.kind,
            "descriptor": None if po.descriptor is None else po.descriptor.tolist(),
            "score": po.score,
            "new_b0": po.new_b0,
        }

    data = {
        "version": 1,
        "frame_index": state.frame_index,
        "next_track_id": state.next_track_id,
        "pos": [po_dict(po) for po in state.pos],
        "rng_state": _encode_rng_state(state.rng.bit_generator.state),
    }
    return json.dumps(data)


def state_from_json(text: str) -> TrackerState:
    data = json.loads(text)
    if data.get("version") != 1:
        raise ValueError("unsupported tracker state version")
    pos = tuple(
        PotentialObject(
            particles=np.array(d["particles"], dtype=float).reshape(-1, STATE_DIM),
            weights=np.array(d["weights"], dtype=float),
            existence=d["existence"],
            track_id=d["track_id"],
            kind=d["kind"],
            descriptor=None if d["descriptor"] is None else np.array(d["descriptor"]),
            score=d["score"],
            new_b0=d["new_b0"],
        )
        for d in data["pos"]
    )
    rng = np.random.default_rng()
    rng.bit_generator.state = _decode_rng_state(data["rng_state"])
    return TrackerState(
        pos=pos,
        frame_index=data["frame_index"],
        next_track_id=data["next_track_id"],
        rng=rng,
    )


def _encode_rng_state(state: dict) -> dict:
    # bit-generator state contains numpy integers; make it JSON-clean
    def convert(value):
        if isinstance(value, dict):
            return {k: convert(v) for k, v in value.items()}
        if isinstance(value, np.ndarray):
            return {"__ndarray__": value.tolist(), "dtype": str(value.dtype)}
        if isinstance(value, (np.integer,)):
            return int(value)
        return value

    return convert(state)


def _decode_rng_state(state: dict) -> dict:
    def convert(value):
        if isinstance(value, dict):
            if "__ndarray__" in value:
                return np.array(value["__ndarray__"], dtype=value["dtype"])
            return {k: convert(v) for k, v in value.items()}
        return value

    return convert(state)


def format_estimates_csv(frames: Sequence[Sequence[Estimate]]) -> str:
    """CSV text with one row per declared track per frame."""
    lines = ["frame,track_id,px,py,vx,vy,existence,score"]
    for k, ests in enumerate(frames):
        for est in ests:
            fields = [float(v) for v in est.state] + [est.existence, est.score]
            lines.append(f"{k},{est.track_id}," + ",".join(repr(v) for v in fields))
    return "\n".join(lines) + "\n"


def parse_estimates_csv(text: str) -> list[list[Estimate]]:
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != "frame,track_id,px,py,vx,vy,existence,score":
        raise ValueError("unrecognized estimates CSV header")
    frames: dict[int, list[Estimate]] = {}
    max_frame = -1
    for ln in lines[1:]:
        parts = ln.split(",")
        k = int(parts[0])
        max_frame = max(max_frame, k)
        frames.setdefault(k, []).append(
            Estimate(
                track_id=int(parts[1]),
                state=np.array([float(v) for v in parts[2:6]]),
                existence=float(parts[6]),
                score=float(parts[7]),
            )
        )
    return [frames.get(k, []) for k in range(max_frame + 1)]
