"""Synthetic scenario generation.

Ground truth follows the same constant-velocity model the tracker assumes.
Measurements deliberately break the tracker's clutter model: besides the
uniform false alarms it expects, persistent clutter sources emit detections
from fixed positions with recognizable shape descriptors, frame after
frame. A tracker that only reasons about kinematics will confirm those
sources as objects; the learned refinement layer can reject them from
their descriptors and positions.

Generation is deterministic per seed. Ground truth and measurement noise
use separate child streams so regenerating measurements never perturbs the
trajectories.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    MeasurementFrame,
    ModelParams,
    Rect,
    cv_process_cov,
    cv_transition,
)

UNIFORM_CLUTTER = -1  # provenance marker; sources use -(2 + source index)


def _unit(vec: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(vec)
    return vec / n if n > 0 else vec


@dataclass(frozen=True)
class BirthSpec:
    """One ground-truth object: when it appears, where, and how it looks."""

    track_id: int
    frame: int
    state: tuple[float, float, float, float]
    death_frame: int | None = None  # first frame the object is absent
    shape: tuple[float, ...] | None = None  # None: drawn at generation time


@dataclass(frozen=True)
class ClutterSource:
    """A persistent false-alarm source at a fixed position."""

    position: tuple[float, float]
    shape: tuple[float, ...]
    rate: float  # mean emissions per frame
    spread: float  # positional standard deviation


@dataclass(frozen=True)
class ScenarioConfig:
    n_frames: int
    births: tuple[BirthSpec, ...]
    roi: Rect = field(default_factory=lambda: Rect(-60.0, 60.0, -60.0, 60.0))
    dt: float = 1.0
    process_noise_q: float = 0.05
    boundary: str = "kill"  # "kill", "reflect" or "none"
    detection_prob: float = 0.92
    meas_noise_cov: tuple = tuple(
        tuple(row) for row in np.diag([0.16, 0.16, 0.16, 0.16]).tolist()
    )
    uniform_clutter_rate: float = 1.0
    clutter_sources: tuple[ClutterSource, ...] = ()
    clutter_vel_std: float = 1.0
    d_shape: int = 8
    descriptor_noise: float = 0.08
    score_true: tuple[float, float] = (8.0, 2.0)  # Beta parameters
    score_clutter: tuple[float, float] = (2.0, 3.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_frames < 1:
            raise ValueError("n_frames must be at least 1")
        if self.boundary not in ("kill", "reflect", "none"):
            raise ValueError("boundary must be 'kill', 'reflect' or 'none'")
        cov = np.asarray(self.meas_noise_cov, dtype=float)
        if cov.shape != (4, 4) or not np.allclose(cov, cov.T):
            raise ValueError("meas_noise_cov must be a symmetric 4x4 matrix")
        ids = [b.track_id for b in self.births]
        if len(set(ids)) != len(ids):
            raise ValueError("birth track ids must be unique")

    def meas_cov_array(self) -> np.ndarray:
        return np.asarray(self.meas_noise_cov, dtype=float)

    def to_json(self) -> str:
        data = {
            "n_frames": self.n_frames,
            "births": [
                {
                    "track_id": int(b.track_id),
                    "frame": int(b.frame),
                    "state": [float(v) for v in b.state],
                    "death_frame": b.death_frame,
                    "shape": None if b.shape is None else [float(v) for v in b.shape],
                }
                for b in self.births
            ],
            "roi": self.roi.as_list(),
            "dt": self.dt,
            "process_noise_q": self.process_noise_q,
            "boundary": self.boundary,
            "detection_prob": self.detection_prob,
            "meas_noise_cov": [list(row) for row in self.meas_noise_cov],
            "uniform_clutter_rate": self.uniform_clutter_rate,
            "clutter_sources": [
                {
                    "position": [float(v) for v in s.position],
                    "shape": [float(v) for v in s.shape],
                    "rate": float(s.rate),
                    "spread": float(s.spread),
                }
                for s in self.clutter_sources
            ],
            "clutter_vel_std": self.clutter_vel_std,
            "d_shape": self.d_shape,
            "descriptor_noise": self.descriptor_noise,
            "score_true": list(self.score_true),
            "score_clutter": list(self.score_clutter),
            "seed": self.seed,
        }
        return json.dumps(data, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ScenarioConfig":
        data = json.loads(text)
        return cls(
            n_frames=data["n_frames"],
            births=tuple(
                BirthSpec(
                    track_id=b["track_id"],
                    frame=b["frame"],
                    state=tuple(b["state"]),
                    death_frame=b.get("death_frame"),
                    shape=None if b.get("shape") is None else tuple(b["shape"]),
                )
                for b in data["births"]
            ),
            roi=Rect.from_list(data["roi"]),
            dt=data["dt"],
            process_noise_q=data["process_noise_q"],
            boundary=data.get("boundary", "kill"),
            detection_prob=data["detection_prob"],
            meas_noise_cov=tuple(tuple(row) for row in data["meas_noise_cov"]),
            uniform_clutter_rate=data["uniform_clutter_rate"],
            clutter_sources=tuple(
                ClutterSource(
                    position=tuple(s["position"]),
                    shape=tuple(s["shape"]),
                    rate=s["rate"],
                    spread=s["spread"],
                )
                for s in data["clutter_sources"]
            ),
            clutter_vel_std=data["clutter_vel_std"],
            d_shape=data["d_shape"],
            descriptor_noise=data["descriptor_noise"],
            score_true=tuple(data["score_true"]),
            score_clutter=tuple(data["score_clutter"]),
            seed=data["seed"],
        )


@dataclass(frozen=True)
class GtObject:
    track_id: int
    state: np.ndarray  # (4,)
    shape: np.ndarray  # (D,), unit norm

    def __post_init__(self):
        state = np.asarray(self.state, dtype=float).reshape(4)
        shape = np.asarray(self.shape, dtype=float)
        state.setflags(write=False)
        shape.setflags(write=False)
        object.__setattr__(self, "state", state)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "track_id", int(self.track_id))


@dataclass(frozen=True)
class GroundTruth:
    frames: tuple[tuple[GtObject, ...], ...]

    def positions(self, k: int) -> np.ndarray:
        objs = self.frames[k]
        if not objs:
            return np.zeros((0, 2))
        return np.stack([o.state[:2] for o in objs])


def _reflect(state: np.ndarray, roi: Rect) -> np.ndarray:
    px, py, vx, vy = state
    if px < roi.x_min:
        px, vx = 2 * roi.x_min - px, -vx
    elif px > roi.x_max:
        px, vx = 2 * roi.x_max - px, -vx
    if py < roi.y_min:
        py, vy = 2 * roi.y_min - py, -vy
    elif py > roi.y_max:
        py, vy = 2 * roi.y_max - py, -vy
    return np.array([px, py, vx, vy])


def generate_ground_truth(cfg: ScenarioConfig) -> GroundTruth:
    """Simulate object trajectories through the constant-velocity model."""
    rng = np.random.default_rng([cfg.seed, 0])
    f = cv_transition(cfg.dt)
    # eigh-based factor so q = 0 yields exactly deterministic motion
    eigvals, eigvecs = np.linalg.eigh(cv_process_cov(cfg.process_noise_q, cfg.dt))
    noise_factor = eigvecs * np.sqrt(np.clip(eigvals, 0.0, None))
    shapes = {
        b.track_id: (
            _unit(rng.standard_normal(cfg.d_shape))
            if b.shape is None
            else np.asarray(b.shape, dtype=float)
        )
        for b in cfg.births
    }
    alive: dict[int, np.ndarray] = {}
    frames: list[tuple[GtObject, ...]] = []
    for k in range(cfg.n_frames):
        for b in cfg.births:
            if b.frame == k:
                alive[b.track_id] = np.asarray(b.state, dtype=float)
        for b in cfg.births:
            if b.death_frame is not None and b.death_frame == k:
                alive.pop(b.track_id, None)
        frames.append(
            tuple(
                GtObject(tid, state, shapes[tid])
                for tid, state in sorted(alive.items())
            )
        )
        # advance to the next frame
        dead = []
        for tid, state in alive.items():
            state = f @ state + noise_factor @ rng.standard_normal(4)
            if cfg.boundary == "reflect":
                state = _reflect(state, cfg.roi)
            elif cfg.boundary == "kill" and not cfg.roi.contains(state[:2]):
                dead.append(tid)
                continue
            alive[tid] = state
        for tid in dead:
            alive.pop(tid)
    return GroundTruth(frames=tuple(frames))


def generate_measurements(
    gt: GroundTruth, cfg: ScenarioConfig
) -> list[MeasurementFrame]:
    """Detections plus uniform and persistent clutter, shuffled per frame."""
    frames, _ = _generate_measurements(gt, cfg)
    return frames


def _generate_measurements(gt, cfg):
    rng = np.random.default_rng([cfg.seed, 1])
    meas_chol = np.linalg.cholesky(cfg.meas_cov_array() + 1e-12 * np.eye(4))
    frames = []
    provenance = []
    for objs in gt.frames:
        z_rows, scores, shapes, origin = [], [], [], []
        for obj in objs:
            if rng.random() >= cfg.detection_prob:
                continue
            z_rows.append(obj.state + meas_chol @ rng.standard_normal(4))
            scores.append(rng.beta(*cfg.score_true))
            shapes.append(
                _unit(obj.shape + cfg.descriptor_noise * rng.standard_normal(cfg.d_shape))
            )
            origin.append(obj.track_id)
        n_uniform = rng.poisson(cfg.uniform_clutter_rate)
        for _ in range(n_uniform):
            pos = np.array(
                [
                    rng.uniform(cfg.roi.x_min, cfg.roi.x_max),
                    rng.uniform(cfg.roi.y_min, cfg.roi.y_max),
                ]
            )
            vel = cfg.clutter_vel_std * rng.standard_normal(2)
            z_rows.append(np.concatenate([pos, vel]))
            scores.append(rng.beta(*cfg.score_clutter))
            shapes.append(_unit(rng.standard_normal(cfg.d_shape)))
            origin.append(UNIFORM_CLUTTER)
        for s_idx, src in enumerate(cfg.clutter_sources):
            for _ in range(rng.poisson(src.rate)):
                pos = np.asarray(src.position) + src.spread * rng.standard_normal(2)
                vel = cfg.clutter_vel_std * rng.standard_normal(2)
                z_rows.append(np.concatenate([pos, vel]))
                scores.append(rng.beta(*cfg.score_clutter))
                shapes.append(
                    _unit(
                        np.asarray(src.shape)
                        + cfg.descriptor_noise * rng.standard_normal(cfg.d_shape)
                    )
                )
                origin.append(-(2 + s_idx))
        if z_rows:
            order = rng.permutation(len(z_rows))
            frame = MeasurementFrame(
                np.stack(z_rows)[order],
                np.clip(np.array(scores), 1e-6, 1.0)[order],
                np.stack(shapes)[order],
            )
            origin = [origin[k] for k in order]
        else:
            frame = MeasurementFrame.empty(cfg.d_shape)
            origin = []
        frames.append(frame)
        provenance.append(origin)
    return frames, provenance


@dataclass(frozen=True)
class Dataset:
    """A scenario bundled with its realized truth and measurements."""

    config: ScenarioConfig
    ground_truth: GroundTruth
    frames: tuple[MeasurementFrame, ...]
    provenance: tuple[tuple[int, ...], ...]

    def to_json(self) -> str:
        data = {
            "config": json.loads(self.config.to_json()),
            "ground_truth": [
                [
                    {
                        "id": o.track_id,
                        "state": o.state.tolist(),
                        "shape": o.shape.tolist(),
                    }
                    for o in objs
                ]
                for objs in self.ground_truth.frames
            ],
            "frames": [
                {
                    "z": f.z.tolist(),
                    "scores": f.scores.tolist(),
                    "shapes": f.shapes.tolist(),
                }
                for f in self.frames
            ],
            "provenance": [list(p) for p in self.provenance],
        }
        return json.dumps(data)

    @classmethod
    def from_json(cls, text: str) -> "Dataset":
        data = json.loads(text)
        cfg = ScenarioConfig.from_json(json.dumps(data["config"]))
        gt = GroundTruth(
            frames=tuple(
                tuple(
                    GtObject(o["id"], np.array(o["state"]), np.array(o["shape"]))
                    for o in objs
                )
                for objs in data["ground_truth"]
            )
        )
        frames = tuple(
            MeasurementFrame(
                np.array(f["z"], dtype=float).reshape(-1, 4),
                np.array(f["scores"], dtype=float),
                np.array(f["shapes"], dtype=float).reshape(len(f["scores"]), -1)
                if f["scores"]
                else np.zeros((0, cfg.d_shape)),
            )
            for f in data["frames"]
        )
        return cls(
            config=cfg,
            ground_truth=gt,
            frames=frames,
            provenance=tuple(tuple(p) for p in data["provenance"]),
        )

    def gt_csv(self) -> str:
        lines = ["frame,id,px,py,vx,vy," + _shape_header(self.config.d_shape)]
        for k, objs in enumerate(self.ground_truth.frames):
            for o in objs:
                vals = [float(v) for v in o.state] + [float(v) for v in o.shape]
                lines.append(f"{k},{o.track_id}," + ",".join(repr(v) for v in vals))
        return "\n".join(lines) + "\n"

    def measurements_csv(self) -> str:
        """One row per measurement; id is the source track or a negative
        clutter marker (-1 uniform, -(2+s) for persistent source s)."""
        lines = ["frame,id,px,py,vx,vy,score," + _shape_header(self.config.d_shape)]
        for k, (frame, origin) in enumerate(zip(self.frames, self.provenance)):
            for j in range(len(frame)):
                vals = (
                    [float(v) for v in frame.z[j]]
                    + [float(frame.scores[j])]
                    + [float(v) for v in frame.shapes[j]]
                )
                lines.append(f"{k},{origin[j]}," + ",".join(repr(v) for v in vals))
        return "\n".join(lines) + "\n"


def _shape_header(d: int) -> str:
    return ",".join(f"shape_{i}" for i in range(d))


def make_dataset(cfg: ScenarioConfig) -> Dataset:
    gt = generate_ground_truth(cfg)
    frames, provenance = _generate_measurements(gt, cfg)
    return Dataset(
        config=cfg,
        ground_truth=gt,
        frames=tuple(frames),
        provenance=tuple(tuple(p) for p in provenance),
    )


# ---------------------------------------------------------------------------
# canonical mismatch benchmark

# Fixed sources shared by every benchmark scene: the rejection head can only
# learn their signatures if they look the same at train and test time.
_SOURCE_POSITIONS = ((-30.0, -25.0), (25.0, 30.0), (35.0, -35.0))
_SOURCE_RATE = 1.2
_SOURCE_SPREAD = 0.4


def _benchmark_sources(d_shape: int) -> tuple[ClutterSource, ...]:
    rng = np.random.default_rng(905174)
    return tuple(
        ClutterSource(
            position=pos,
            shape=tuple(_unit(rng.standard_normal(d_shape))),
            rate=_SOURCE_RATE,
            spread=_SOURCE_SPREAD,
        )
        for pos in _SOURCE_POSITIONS
    )


def clutter_mismatch_scenario(
    scene_seed: int,
    n_objects: int = 4,
    n_frames: int = 30,
    d_shape: int = 8,
) -> ScenarioConfig:
    """A scene from the persistent-clutter benchmark family.

    Object count, motion statistics and the (fixed) clutter sources are
    shared across the family; object trajectories and descriptors vary with
    the scene seed.
    """
    rng = np.random.default_rng([scene_seed, 2])
    births = []
    for i in range(n_objects):
        pos = rng.uniform(-35.0, 35.0, size=2)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        speed = rng.uniform(1.0, 2.5)
        vel = speed * np.array([np.cos(heading), np.sin(heading)])
        births.append(
            BirthSpec(
                track_id=i,
                frame=i % 4,
                state=(pos[0], pos[1], vel[0], vel[1]),
            )
        )
    return ScenarioConfig(
        n_frames=n_frames,
        births=tuple(births),
        roi=Rect(-60.0, 60.0, -60.0, 60.0),
        dt=1.0,
        process_noise_q=0.05,
        boundary="reflect",
        detection_prob=0.92,
        uniform_clutter_rate=1.0,
        clutter_sources=_benchmark_sources(d_shape),
        clutter_vel_std=1.0,
        d_shape=d_shape,
        descriptor_noise=0.08,
        seed=scene_seed,
    )


def matched_params(cfg: ScenarioConfig, n_particles: int = 250) -> ModelParams:
    """Tracker parameters matched to a scenario, except that all clutter is
    modeled as uniform: persistent sources enter only through the total
    false-alarm rate."""
    total_clutter = cfg.uniform_clutter_rate + sum(
        s.rate for s in cfg.clutter_sources
    )
    return ModelParams(
        detection_prob=cfg.detection_prob,
        mean_false_alarms=max(total_clutter, 1e-6),
        mean_undetected=1.0,
        roi=cfg.roi,
        meas_cov=cfg.meas_cov_array(),
        proc_cov=cv_process_cov(cfg.process_noise_q, cfg.dt),
        dt=cfg.dt,
        n_particles=n_particles,
    )
