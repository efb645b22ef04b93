"""Domain types and model parameters for the tracking toolkit.

All value types validate on construction and are immutable afterwards;
ndarray fields are copied and marked read-only so instances can be shared
across threads and reused between steps without defensive copies.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

STATE_DIM = 4  # [px, py, vx, vy]


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _set(obj, name, value) -> None:
    # frozen dataclasses need object.__setattr__ in __post_init__
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned region of interest in the ground plane."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError("roi must have positive extent on both axes")

    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains(self, xy: np.ndarray) -> np.ndarray:
        """Vectorized membership test for an (..., 2) array of positions."""
        xy = np.asarray(xy, dtype=float)
        return (
            (xy[..., 0] >= self.x_min)
            & (xy[..., 0] <= self.x_max)
            & (xy[..., 1] >= self.y_min)
            & (xy[..., 1] <= self.y_max)
        )

    def as_list(self) -> list[float]:
        return [self.x_min, self.x_max, self.y_min, self.y_max]

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Rect":
        if len(values) != 4:
            raise ValueError("roi expects [x_min, x_max, y_min, y_max]")
        return cls(*[float(v) for v in values])


@dataclass(frozen=True)
class KinematicState:
    """Planar constant-velocity state."""

    px: float
    py: float
    vx: float
    vy: float

    def __post_init__(self):
        for name in ("px", "py", "vx", "vy"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"non-finite state component {name}")

    def as_array(self) -> np.ndarray:
        return np.array([self.px, self.py, self.vx, self.vy], dtype=float)

    @classmethod
    def from_array(cls, arr: Iterable[float]) -> "KinematicState":
        px, py, vx, vy = (float(v) for v in arr)
        return cls(px, py, vx, vy)


@dataclass(frozen=True)
class Measurement:
    """A single detection: kinematics, confidence score and shape descriptor."""

    px: float
    py: float
    vx: float
    vy: float
    score: float
    shape: np.ndarray

    def __post_init__(self):
        if not (0.0 < self.score <= 1.0):
            raise ValueError("score must lie in (0, 1]")
        shape = np.asarray(self.shape, dtype=float)
        if shape.ndim != 1 or not np.all(np.isfinite(shape)):
            raise ValueError("shape descriptor must be a finite 1-d vector")
        if not all(np.isfinite([self.px, self.py, self.vx, self.vy])):
            raise ValueError("non-finite measurement component")
        _set(self, "shape", _frozen_array(shape))

    def kinematics(self) -> np.ndarray:
        return np.array([self.px, self.py, self.vx, self.vy], dtype=float)


class MeasurementFrame:
    """One time step's detections, stored columnwise for vectorized access.

    Attributes:
        z: (J, 4) array of [px, py, vx, vy] rows.
        scores: (J,) array of detection scores in (0, 1].
        shapes: (J, D) array of shape descriptors.
    """

    __slots__ = ("z", "scores", "shapes")

    def __init__(self, z, scores, shapes):
        z = np.asarray(z, dtype=float).reshape(-1, STATE_DIM)
        scores = np.asarray(scores, dtype=float).reshape(-1)
        shapes = np.asarray(shapes, dtype=float)
        if shapes.ndim == 1:
            shapes = shapes.reshape(len(z), -1) if len(z) else shapes.reshape(0, 0)
        if len(scores) != len(z) or len(shapes) != len(z):
            raise ValueError("frame arrays disagree on measurement count")
        if len(scores) and (scores.min() <= 0.0 or scores.max() > 1.0):
            raise ValueError("scores must lie in (0, 1]")
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(shapes))):
            raise ValueError("non-finite frame entries")
        self.z = _frozen_array(z)
        self.scores = _frozen_array(scores)
        self.shapes = _frozen_array(shapes)

    def __len__(self) -> int:
        return self.z.shape[0]

    @classmethod
    def empty(cls, d_shape: int = 0) -> "MeasurementFrame":
        return cls(np.zeros((0, STATE_DIM)), np.zeros(0), np.zeros((0, d_shape)))

    @classmethod
    def from_measurements(cls, measurements: Sequence[Measurement]) -> "MeasurementFrame":
        if not measurements:
            return cls.empty()
        return cls(
            np.stack([m.kinematics() for m in measurements]),
            np.array([m.score for m in measurements]),
            np.stack([m.shape for m in measurements]),
        )

    def measurement(self, j: int) -> Measurement:
        return Measurement(*self.z[j], float(self.scores[j]), self.shapes[j])

    def subset(self, idx) -> "MeasurementFrame":
        idx = np.asarray(idx)
        return MeasurementFrame(self.z[idx], self.scores[idx], self.shapes[idx])

    def restrict_to(self, roi: Rect) -> tuple["MeasurementFrame", np.ndarray]:
        """Drop measurements whose position falls outside the region.

        Returns the restricted frame and the indices kept (into this frame).
        """
        keep = np.flatnonzero(roi.contains(self.z[:, :2]))
        if len(keep) == len(self):
            return self, keep
        return self.subset(keep), keep


@dataclass(frozen=True)
class PotentialObject:
    """Particle belief over one potential object's state and existence.

    kind is "legacy" for objects carried over from earlier steps and "new"
    for objects introduced by the current frame's measurements.
    """

    particles: np.ndarray  # (n, 4)
    weights: np.ndarray  # (n,), sums to 1
    existence: float
    track_id: int
    kind: str = "legacy"
    descriptor: np.ndarray | None = None  # running shape estimate, unit norm
    score: float = 0.0
    new_b0: float | None = None  # p(b_j = 0) at creation, set for kind == "new"

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if particles.ndim != 2 or particles.shape[1] != STATE_DIM:
            raise ValueError("particles must have shape (n, 4)")
        if weights.shape != (particles.shape[0],):
            raise ValueError("weights must align with particles")
        if not np.all(np.isfinite(particles)) or not np.all(np.isfinite(weights)):
            raise ValueError("non-finite particle state or weight")
        if weights.size and (weights.min() < 0.0 or abs(weights.sum() - 1.0) > 1e-9):
            raise ValueError("weights must be nonnegative and sum to 1")
        if not (0.0 <= self.existence <= 1.0):
            raise ValueError("existence must lie in [0, 1]")
        if self.kind not in ("legacy", "new"):
            raise ValueError("kind must be 'legacy' or 'new'")
        _set(self, "particles", _frozen_array(particles))
        _set(self, "weights", _frozen_array(weights))
        _set(self, "existence", float(self.existence))
        _set(self, "track_id", int(self.track_id))
        _set(self, "score", float(self.score))
        if self.new_b0 is not None:
            _set(self, "new_b0", float(self.new_b0))
        if self.descriptor is not None:
            _set(self, "descriptor", _frozen_array(self.descriptor))

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def with_kind(self, kind: str) -> "PotentialObject":
        return replace(self, kind=kind)


# A predicted potential object is a PotentialObject after time propagation;
# no separate type is needed, the invariants are identical.
PredictedPo = PotentialObject


def cv_transition(dt: float) -> np.ndarray:
    """Constant-velocity transition matrix for time step dt."""
    f = np.eye(STATE_DIM)
    f[0, 2] = dt
    f[1, 3] = dt
    return f


def cv_process_cov(q: float, dt: float) -> np.ndarray:
    """Discrete white-acceleration process covariance.

    q is the acceleration power spectral density in m^2/s^3; the returned
    4x4 matrix follows the standard G q G^T discretization per axis.
    """
    q11 = q * dt**3 / 3.0
    q12 = q * dt**2 / 2.0
    q22 = q * dt
    cov = np.zeros((STATE_DIM, STATE_DIM))
    cov[0, 0] = cov[1, 1] = q11
    cov[0, 2] = cov[2, 0] = q12
    cov[1, 3] = cov[3, 1] = q12
    cov[2, 2] = cov[3, 3] = q22
    return cov


def _check_cov(name: str, cov: np.ndarray, dim: int, allow_semidefinite: bool = False):
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}")
    if not np.allclose(cov, cov.T, atol=1e-12):
        raise ValueError(f"{name} must be symmetric")
    eigs = np.linalg.eigvalsh(cov)
    floor = -1e-12 if allow_semidefinite else 1e-15
    if eigs.min() < floor:
        kind = "positive semidefinite" if allow_semidefinite else "positive definite"
        raise ValueError(f"{name} must be {kind}")
    return cov


@dataclass(frozen=True)
class ModelParams:
    """Statistical model and runtime thresholds shared by all trackers.

    The false-alarm and birth densities are uniform over roi with density
    1/area(roi); velocity components are treated as uninformative for both,
    so likelihood ratios stay well defined for 4-d and position-only
    observation maps alike.
    """

    detection_prob: float = 0.9
    survival_prob: float = 0.999
    mean_false_alarms: float = 2.0
    mean_undetected: float = 1.0
    roi: Rect = field(default_factory=lambda: Rect(-60.0, 60.0, -60.0, 60.0))
    meas_matrix: np.ndarray = field(default_factory=lambda: np.eye(STATE_DIM))
    meas_cov: np.ndarray = field(default_factory=lambda: np.diag([0.16, 0.16, 0.16, 0.16]))
    proc_cov: np.ndarray = field(default_factory=lambda: cv_process_cov(0.5, 1.0))
    dt: float = 1.0
    declare_threshold: float = 0.5
    prune_threshold: float = 1e-3
    new_po_keep_threshold: float = 0.8
    n_particles: int = 500
    da_max_iterations: int = 200
    da_tolerance: float = 1e-6
    gate_chi2: float | None = 13.8  # squared-Mahalanobis position gate, None disables

    def __post_init__(self):
        validate_params(self)
        _set(self, "meas_matrix", _frozen_array(self.meas_matrix))
        _set(self, "meas_cov", _frozen_array(self.meas_cov))
        _set(self, "proc_cov", _frozen_array(self.proc_cov))

    @property
    def obs_dim(self) -> int:
        return int(np.asarray(self.meas_matrix).shape[0])

    def false_alarm_density(self) -> float:
        return 1.0 / self.roi.area()

    def to_json(self) -> str:
        data = {
            "detection_prob": self.detection_prob,
            "survival_prob": self.survival_prob,
            "mean_false_alarms": self.mean_false_alarms,
            "mean_undetected": self.mean_undetected,
            "roi": self.roi.as_list(),
            "meas_matrix": np.asarray(self.meas_matrix).tolist(),
            "meas_cov": np.asarray(self.meas_cov).tolist(),
            "proc_cov": np.asarray(self.proc_cov).tolist(),
            "dt": self.dt,
            "declare_threshold": self.declare_threshold,
            "prune_threshold": self.prune_threshold,
            "new_po_keep_threshold": self.new_po_keep_threshold,
            "n_particles": self.n_particles,
            "da_max_iterations": self.da_max_iterations,
            "da_tolerance": self.da_tolerance,
            "gate_chi2": self.gate_chi2,
        }
        return json.dumps(data, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ModelParams":
        data = json.loads(text)
        known = {
            "detection_prob", "survival_prob", "mean_false_alarms", "mean_undetected",
            "roi", "meas_matrix", "meas_cov", "proc_cov", "dt", "declare_threshold",
            "prune_threshold", "new_po_keep_threshold", "n_particles",
            "da_max_iterations", "da_tolerance", "gate_chi2",
        }
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown parameter fields: {sorted(unknown)}")
        kwargs = dict(data)
        if "roi" in kwargs:
            kwargs["roi"] = Rect.from_list(kwargs["roi"])
        for name in ("meas_matrix", "meas_cov", "proc_cov"):
            if name in kwargs:
                kwargs[name] = np.asarray(kwargs[name], dtype=float)
        return cls(**kwargs)


def validate_params(params: ModelParams) -> ModelParams:
    """Check every documented invariant, raising on the first violation."""
    for name in ("detection_prob", "survival_prob"):
        value = getattr(params, name)
        if not (0.0 < value <= 1.0):
            raise ValueError(f"{name} must lie in (0, 1]")
    for name in ("mean_false_alarms", "mean_undetected"):
        if getattr(params, name) <= 0.0:
            raise ValueError(f"{name} must be positive")
    if params.dt <= 0.0:
        raise ValueError("dt must be positive")
    h = np.asarray(params.meas_matrix, dtype=float)
    if h.ndim != 2 or h.shape[1] != STATE_DIM or h.shape[0] not in (2, STATE_DIM):
        raise ValueError("meas_matrix must be 2x4 or 4x4")
    _check_cov("meas_cov", params.meas_cov, h.shape[0])
    _check_cov("proc_cov", params.proc_cov, STATE_DIM, allow_semidefinite=True)
    for name in ("declare_threshold", "prune_threshold", "new_po_keep_threshold"):
        value = getattr(params, name)
        if not (0.0 <= value <= 1.0):
            raise ValueError(f"{name} must lie in [0, 1]")
    if params.n_particles < 1:
        raise ValueError("n_particles must be at least 1")
    if params.da_max_iterations < 1:
        raise ValueError("da_max_iterations must be at least 1")
    if params.da_tolerance < 0.0:
        raise ValueError("da_tolerance must be nonnegative")
    if params.gate_chi2 is not None and params.gate_chi2 <= 0.0:
        raise ValueError("gate_chi2 must be positive or None")
    return params


@dataclass(frozen=True)
class AssociationVector:
    """A joint association event in both orientations.

    a[i] = j > 0 assigns legacy object i to measurement j (1-based), a[i] = 0
    leaves it undetected. b[j] = i > 0 is the measurement-oriented mirror
    (1-based over legacy objects), b[j] = 0 marks measurement j as not
    originating from a legacy object.
    """

    a: np.ndarray  # (I,) ints in 0..J
    b: np.ndarray  # (J,) ints in 0..I

    def __post_init__(self):
        _set(self, "a", _frozen_array(self.a, dtype=int))
        _set(self, "b", _frozen_array(self.b, dtype=int))

    def is_consistent(self) -> bool:
        n_i = len(self.a)
        n_j = len(self.b)
        for i, ai in enumerate(self.a):
            if ai < 0 or ai > n_j:
                return False
            if ai > 0 and self.b[ai - 1] != i + 1:
                return False
        for j, bj in enumerate(self.b):
            if bj < 0 or bj > n_i:
                return False
            if bj > 0 and self.a[bj - 1] != j + 1:
                return False
        return True

    @classmethod
    def from_a(cls, a: Sequence[int], n_measurements: int) -> "AssociationVector":
        a = np.asarray(a, dtype=int)
        used = a[a > 0]
        if len(np.unique(used)) != len(used):
            raise ValueError("object-oriented vector reuses a measurement")
        if used.size and (used.min() < 1 or used.max() > n_measurements):
            raise ValueError("measurement index out of range")
        b = np.zeros(n_measurements, dtype=int)
        for i, ai in enumerate(a):
            if ai > 0:
                b[ai - 1] = i + 1
        return cls(a, b)

    @classmethod
    def from_b(cls, b: Sequence[int], n_objects: int) -> "AssociationVector":
        b = np.asarray(b, dtype=int)
        used = b[b > 0]
        if len(np.unique(used)) != len(used):
            raise ValueError("measurement-oriented vector reuses an object")
        if used.size and (used.min() < 1 or used.max() > n_objects):
            raise ValueError("object index out of range")
        a = np.zeros(n_objects, dtype=int)
        for j, bj in enumerate(b):
            if bj > 0:
                a[bj - 1] = j + 1
        return cls(a, b)
