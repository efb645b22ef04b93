"""Training of the refinement networks against pseudo ground truth.

Supervision is derived per frame, not hand-annotated: measurements are
matched to ground-truth positions by a distance-capped assignment and
inherit their ids, legacy objects keep their id only while they stay close
to the same ground-truth object, and the two loss targets follow. The
rejection head is trained toward "measurement close to any true object";
the association head toward "pair shares an id". Association messages and
particle beliefs are constants for the backward pass: gradients flow only
through the refinement networks.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import mlp
from .bp import TrackerState, bp_step, init_tracker
from .model import MeasurementFrame, ModelParams, cv_transition
from .nebp import (
    NET_NAMES,
    NebpNets,
    NebpVariant,
    nebp_backward,
    nebp_step,
    sigmoid,
)

LOSS_EPS = 1e-12


@dataclass(frozen=True)
class FrameLabels:
    """Per-frame pseudo ground truth for the two refinement heads."""

    omega_gt: np.ndarray  # (J,) in {0, 1}
    mu_gt: np.ndarray  # (I, J) in {0, 1}
    measurement_ids: tuple[int | None, ...]
    legacy_ids: tuple[int | None, ...]


def label_frame(
    gt_ids: Sequence[int],
    gt_positions: np.ndarray,
    frame: MeasurementFrame,
    legacy_positions: np.ndarray,
    legacy_prev_ids: Sequence[int | None],
    assoc_dist: float,
) -> FrameLabels:
    """Derive head targets from ground truth by nearest assignment.

    Measurements receive the id of their assigned ground-truth object when
    the matched distance is below assoc_dist. A legacy object keeps its
    inherited id only while it stays within assoc_dist of the ground-truth
    object carrying that id. omega targets are 1 for measurements within
    assoc_dist of any true position, and mu targets are 1 exactly for
    (legacy, measurement) pairs that share an id.
    """
    n_j = len(frame)
    n_i = len(legacy_prev_ids)
    gt_positions = np.asarray(gt_positions, dtype=float).reshape(-1, 2)
    legacy_positions = np.asarray(legacy_positions, dtype=float).reshape(n_i, 2)
    n_k = len(gt_ids)

    measurement_ids: list[int | None] = [None] * n_j
    omega_gt = np.zeros(n_j)
    if n_j and n_k:
        dist = np.linalg.norm(
            frame.z[:, None, :2] - gt_positions[None, :, :], axis=2
        )  # (J, K)
        omega_gt = (dist.min(axis=1) <= assoc_dist).astype(float)
        rows, cols = linear_sum_assignment(np.minimum(dist, 2.0 * assoc_dist))
        for j, k in zip(rows, cols):
            if dist[j, k] < assoc_dist:
                measurement_ids[j] = int(gt_ids[k])

    legacy_ids: list[int | None] = [None] * n_i
    if n_i and n_k:
        id_to_pos = {int(g): gt_positions[k] for k, g in enumerate(gt_ids)}
        for i, prev in enumerate(legacy_prev_ids):
            if prev is None or prev not in id_to_pos:
                continue
            if np.linalg.norm(legacy_positions[i] - id_to_pos[prev]) <= assoc_dist:
                legacy_ids[i] = prev

    mu_gt = np.zeros((n_i, n_j))
    for i, lid in enumerate(legacy_ids):
        if lid is None:
            continue
        for j, mid in enumerate(measurement_ids):
            if mid == lid:
                mu_gt[i, j] = 1.0
    return FrameLabels(
        omega_gt=omega_gt,
        mu_gt=mu_gt,
        measurement_ids=tuple(measurement_ids),
        legacy_ids=tuple(legacy_ids),
    )


# ---------------------------------------------------------------------------
# losses


def loss_rejection(omega: np.ndarray, omega_gt: np.ndarray, eps: float = 0.1) -> float:
    """Asymmetric cross entropy over acceptance weights.

    False-alarm terms are damped by eps so the pseudo labels' mistakes on
    hard positives do not dominate.
    """
    omega = np.clip(np.asarray(omega, dtype=float), LOSS_EPS, 1.0 - LOSS_EPS)
    gt = np.asarray(omega_gt, dtype=float)
    if omega.size == 0:
        return 0.0
    terms = gt * np.log(omega) + eps * (1.0 - gt) * np.log(1.0 - omega)
    return float(-terms.sum() / omega.size)


def loss_association(mu_star: np.ndarray, mu_gt: np.ndarray) -> float:
    """Mean binary cross entropy on the raw pairwise head outputs."""
    x = np.asarray(mu_star, dtype=float)
    gt = np.asarray(mu_gt, dtype=float)
    if x.size == 0:
        return 0.0
    # logits form: gt * softplus(-x) + (1 - gt) * softplus(x)
    terms = gt * np.logaddexp(0.0, -x) + (1.0 - gt) * np.logaddexp(0.0, x)
    return float(terms.sum() / x.size)


def _rejection_grad_star(omega_star: np.ndarray, omega_gt: np.ndarray, eps: float) -> np.ndarray:
    """d loss_rejection / d omega_star at temperature 1, offset 0."""
    if omega_star.size == 0:
        return np.zeros(0)
    w = sigmoid(omega_star)
    return (-omega_gt * (1.0 - w) + eps * (1.0 - omega_gt) * w) / omega_star.size


def _association_grad_star(mu_star: np.ndarray, mu_gt: np.ndarray) -> np.ndarray:
    if mu_star.size == 0:
        return np.zeros_like(mu_star)
    return (sigmoid(mu_star) - mu_gt) / mu_star.size


def frame_loss(
    refinement_omega_star: np.ndarray,
    refinement_mu_star: np.ndarray,
    labels: FrameLabels,
    eps: float = 0.1,
) -> float:
    """Total scalar objective of one frame at training settings."""
    return loss_rejection(
        sigmoid(refinement_omega_star), labels.omega_gt, eps
    ) + loss_association(refinement_mu_star, labels.mu_gt)


# ---------------------------------------------------------------------------
# training loop


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 8
    rejection_eps: float = 0.1
    assoc_dist: float = 2.0
    seed: int = 0
    shuffle: bool = True
    tracker_seed: int = 7


@dataclass
class TrainHistory:
    epoch_loss: list[float] = field(default_factory=list)
    epoch_rejection: list[float] = field(default_factory=list)
    epoch_association: list[float] = field(default_factory=list)
    wall_time: float = 0.0


def train(
    datasets: Sequence, params: ModelParams, nets: NebpNets, cfg: TrainConfig
) -> tuple[NebpNets, dict[str, mlp.AdamState], TrainHistory]:
    """Online per-frame updates over all scenes, one frame per step.

    Each dataset must expose .frames and .ground_truth (see simulate). The
    tracker runs forward with the current networks; after every frame the
    loss gradients update all networks at once.
    """
    start = time.time()
    order_rng = np.random.default_rng(cfg.seed)
    adam = {name: mlp.adam_init(getattr(nets, name), lr=cfg.lr) for name in NET_NAMES}
    history = TrainHistory()
    variant = NebpVariant()
    predict_map = cv_transition(params.dt)

    for epoch in range(cfg.epochs):
        scene_order = (
            order_rng.permutation(len(datasets)) if cfg.shuffle else np.arange(len(datasets))
        )
        sums = np.zeros(2)
        n_steps = 0
        for scene_pos, scene_idx in enumerate(scene_order):
            data = datasets[scene_idx]
            state = init_tracker(np.random.default_rng([cfg.tracker_seed, int(scene_idx)]))
            id_map: dict[int, int | None] = {}
            for k, frame in enumerate(data.frames):
                prev_pos = state.pos
                prev_ids = [id_map.get(po.track_id) for po in prev_pos]
                pred_positions = (
                    np.stack([(predict_map @ po.mean())[:2] for po in prev_pos])
                    if prev_pos
                    else np.zeros((0, 2))
                )
                sink: list = []
                try:
                    state = nebp_step(
                        state, frame, params, nets,
                        variant=variant, temperature=1.0, offset=0.0, _tape_sink=sink,
                    )
                except (ValueError, FloatingPointError) as exc:
                    # a learned refinement that breaks the association inputs
                    # (typically through non-finite net outputs) is divergence
                    raise TrainingDiverged(
                        f"tracking step failed at epoch {epoch}, scene {scene_idx}, "
                        f"frame {k}: {exc}"
                    ) from exc
                diag = state.last
                gt_objs = data.ground_truth.frames[k]
                labels = label_frame(
                    [o.track_id for o in gt_objs],
                    np.stack([o.state[:2] for o in gt_objs]) if gt_objs else np.zeros((0, 2)),
                    diag.frame,
                    pred_positions,
                    prev_ids,
                    cfg.assoc_dist,
                )
                if sink:
                    tapes = sink[0]
                    ref = tapes.refinements
                    l_rej = loss_rejection(
                        sigmoid(ref.omega_star), labels.omega_gt, cfg.rejection_eps
                    )
                    l_assoc = loss_association(ref.mu_star, labels.mu_gt)
                    if not np.isfinite(l_rej + l_assoc):
                        raise TrainingDiverged(
                            f"non-finite loss at epoch {epoch}, scene {scene_idx}, frame {k}: "
                            f"rejection={l_rej}, association={l_assoc}"
                        )
                    d_os = _rejection_grad_star(
                        ref.omega_star, labels.omega_gt, cfg.rejection_eps
                    )
                    d_ms = _association_grad_star(ref.mu_star, labels.mu_gt)
                    grads = nebp_backward(tapes, nets, d_os, d_ms)
                    new_nets = {}
                    for name in NET_NAMES:
                        new_params, adam[name] = mlp.adam_step(
                            getattr(nets, name), grads[name], adam[name]
                        )
                        new_nets[name] = new_params
                    nets = nets.replace_nets(new_nets)
                    sums += (l_rej, l_assoc)
                    n_steps += 1
                # id bookkeeping for the next frame
                new_map: dict[int, int | None] = {}
                for po, lid in zip(prev_pos, labels.legacy_ids):
                    new_map[po.track_id] = lid
                taken = {lid for lid in labels.legacy_ids if lid is not None}
                for j, tid in enumerate(diag.new_track_ids):
                    mid = labels.measurement_ids[j]
                    new_map[tid] = mid if (mid is not None and mid not in taken) else None
                id_map = new_map
        denom = max(n_steps, 1)
        history.epoch_rejection.append(float(sums[0] / denom))
        history.epoch_association.append(float(sums[1] / denom))
        history.epoch_loss.append(float(sums.sum() / denom))
    history.wall_time = time.time() - start
    return nets, adam, history


# ---------------------------------------------------------------------------
# tracking runners and calibration


def track_frames(
    frames: Sequence[MeasurementFrame],
    params: ModelParams,
    method: str = "bp",
    nets: NebpNets | None = None,
    temperature: float = 1.0,
    offset: float = 0.0,
    seed: int = 0,
) -> list[list]:
    """Run a tracker over a measurement sequence; per-frame estimates."""
    from .nebp import METHOD_VARIANTS

    state = init_tracker(seed)
    out = []
    for frame in frames:
        if method == "bp":
            state = bp_step(state, frame, params)
        else:
            if nets is None:
                raise ValueError(f"method {method!r} needs trained networks")
            variant = METHOD_VARIANTS[method]
            state = nebp_step(
                state, frame, params, nets,
                variant=variant, temperature=temperature, offset=offset,
            )
        out.append(list(state.last.estimates))
    return out


CALIBRATION_TEMPERATURES = (0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, float("inf"))
CALIBRATION_SIGMOID_OFFSETS = (0.01, 0.02, 0.05, 0.1, 0.2)


@dataclass(frozen=True)
class CalibrationResult:
    temperature: float
    offset: float
    sigmoid_offset: float
    objective: float
    metric: str
    table: tuple  # ((temperature, sigmoid_offset, value), ...)

    def to_json(self) -> str:
        return json.dumps(
            {
                "temperature": self.temperature,
                "offset": self.offset,
                "sigmoid_offset": self.sigmoid_offset,
                "objective": self.objective,
                "metric": self.metric,
                "table": [list(row) for row in self.table],
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        data = json.loads(text)
        return cls(
            temperature=data["temperature"],
            offset=data["offset"],
            sigmoid_offset=data["sigmoid_offset"],
            objective=data["objective"],
            metric=data["metric"],
            table=tuple(tuple(row) for row in data["table"]),
        )


def _logit(p: float) -> float:
    return float(np.log(p / (1.0 - p)))


def calibrate(
    nets: NebpNets,
    datasets: Sequence,
    params: ModelParams,
    metric: str = "gospa",
    temperatures: Sequence[float] = CALIBRATION_TEMPERATURES,
    sigmoid_offsets: Sequence[float] = CALIBRATION_SIGMOID_OFFSETS,
    seed: int = 0,
) -> CalibrationResult:
    """Pick rejection temperature and offset on a held-out grid.

    The offset grid is expressed through sigmoid(delta) and mapped back.
    Ties prefer the smaller temperature, then the smaller offset, which the
    ascending scan realizes by requiring strict improvement.
    """
    from .metrics import evaluate_tracking

    if metric not in ("gospa", "amota"):
        raise ValueError("metric must be 'gospa' or 'amota'")
    best = None
    table = []
    for temp in temperatures:
        for s_off in sigmoid_offsets:
            delta = _logit(s_off)
            values = []
            for data in datasets:
                est = track_frames(
                    data.frames, params, method="nebp", nets=nets,
                    temperature=temp, offset=delta, seed=seed,
                )
                report = evaluate_tracking(est, data.ground_truth)
                values.append(
                    report.gospa_total if metric == "gospa" else report.amota
                )
            value = float(np.mean(values))
            table.append((temp, s_off, value))
            better = (
                best is None
                or (metric == "gospa" and value < best[2])
                or (metric == "amota" and value > best[2])
            )
            if better:
                best = (temp, s_off, value)
    return CalibrationResult(
        temperature=best[0],
        offset=_logit(best[1]),
        sigmoid_offset=best[1],
        objective=best[2],
        metric=metric,
        table=tuple(table),
    )
