"""Learned refinement of the data-association messages.

A small graph network runs on the same bipartite graph the association
iteration uses. Node features come from two shared encoders: a motion
encoder over kinematics (plus existence for legacy objects, score for
measurements) and a shape encoder over descriptors. After a fixed number
of message rounds two heads read the result: a rejection head that turns
each measurement embedding into an acceptance weight omega in [0, 1], and
an association head that turns each pairwise message into additive mass
mu >= 0 backed by shape similarity rather than kinematics.

The refined masses feed a second association pass. With omega of one and
mu of zero the refinement is the identity and the tracker reproduces the
plain belief-propagation step.

All message quantities entering the network are normalized or squashed to
[0, 1]: raw likelihood ratios are unbounded and would otherwise dominate
every hidden layer. Gradients treat the association quantities as
constants; backprop flows only through encoders, message rounds and heads.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import mlp
from .bp import (
    DaMessages,
    Enhancement,
    TrackerState,
    beta_normalizers,
    run_step,
    xi_normalizers,
)
from .mlp import MlpGrads, MlpParams
from .model import MeasurementFrame, ModelParams, PotentialObject

NET_NAMES = ("motion", "shape", "edge", "node", "rejection", "assoc")


@dataclass(frozen=True)
class NebpConfig:
    d_shape: int = 8
    d_emb: int = 128  # per encoder; node embeddings concatenate two of these
    d_msg: int = 128
    d_hidden: int = 128
    gnn_iters: int = 3
    vel_scale: float = 10.0  # velocity feature divisor, m/s
    squash_scalars: bool = True  # map ratio messages through x / (1 + x)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "NebpConfig":
        return cls(**data)


@dataclass(frozen=True)
class NebpNets:
    config: NebpConfig
    motion: MlpParams
    shape: MlpParams
    edge: MlpParams
    node: MlpParams
    rejection: MlpParams
    assoc: MlpParams

    def as_dict(self) -> dict[str, MlpParams]:
        return {name: getattr(self, name) for name in NET_NAMES}

    def replace_nets(self, nets: dict[str, MlpParams]) -> "NebpNets":
        return NebpNets(config=self.config, **nets)


def init_nets(cfg: NebpConfig, seed: int | np.random.Generator = 0) -> NebpNets:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    e2 = 2 * cfg.d_emb
    return NebpNets(
        config=cfg,
        motion=mlp.mlp_init((5, cfg.d_hidden, cfg.d_emb), rng),
        shape=mlp.mlp_init((cfg.d_shape, cfg.d_hidden, cfg.d_emb), rng),
        edge=mlp.mlp_init((2 * e2 + 2, cfg.d_hidden, cfg.d_msg), rng),
        node=mlp.mlp_init((e2 + cfg.d_msg + 1, cfg.d_hidden, e2), rng),
        rejection=mlp.mlp_init((e2, cfg.d_hidden, 1), rng),
        assoc=mlp.mlp_init((cfg.d_msg, cfg.d_hidden, 1), rng),
    )


def save_nets(path: str, nets: NebpNets, adam: dict[str, mlp.AdamState] | None = None):
    mlp.save_checkpoint(
        path, nets.as_dict(), adam=adam, meta={"nebp_config": nets.config.to_dict()}
    )


def load_nets(path: str) -> tuple[NebpNets, dict[str, mlp.AdamState]]:
    nets, adam, meta = mlp.load_checkpoint(path)
    cfg = NebpConfig.from_dict(meta["nebp_config"])
    return NebpNets(config=cfg, **nets), adam


@dataclass(frozen=True)
class NebpVariant:
    """Which parts of the refinement are active. The ablations of the full
    method disable one ingredient each."""

    use_shape: bool = True  # False: zero the shape half of every embedding
    use_rejection: bool = True  # False: omega forced to one
    use_association: bool = True  # False: mu forced to zero


METHOD_VARIANTS: dict[str, NebpVariant] = {
    "nebp": NebpVariant(),
    "nebp-m": NebpVariant(use_shape=False),
    "nebp-r": NebpVariant(use_association=False),
    "nebp-a": NebpVariant(use_rejection=False),
    "nebp-nc": NebpVariant(),  # full refinement, calibration ignored
}


# ---------------------------------------------------------------------------
# features


def _scale_motion(rows: np.ndarray, params: ModelParams, cfg: NebpConfig) -> np.ndarray:
    roi = params.roi
    cx, cy = 0.5 * (roi.x_min + roi.x_max), 0.5 * (roi.y_min + roi.y_max)
    hx, hy = 0.5 * (roi.x_max - roi.x_min), 0.5 * (roi.y_max - roi.y_min)
    out = rows.copy()
    out[:, 0] = (rows[:, 0] - cx) / hx
    out[:, 1] = (rows[:, 1] - cy) / hy
    out[:, 2] = rows[:, 2] / cfg.vel_scale
    out[:, 3] = rows[:, 3] / cfg.vel_scale
    return out


def _legacy_motion_rows(
    prev_pos: Sequence[PotentialObject], params: ModelParams, cfg: NebpConfig
) -> np.ndarray:
    rows = np.zeros((len(prev_pos), 5))
    for i, po in enumerate(prev_pos):
        rows[i, :4] = po.mean()
        rows[i, 4] = po.existence
    rows[:, :4] = _scale_motion(rows[:, :4], params, cfg)[:, :4] if len(rows) else rows[:, :4]
    return rows


def _measurement_motion_rows(
    frame: MeasurementFrame, params: ModelParams, cfg: NebpConfig
) -> np.ndarray:
    rows = np.zeros((len(frame), 5))
    if len(frame):
        rows[:, :4] = _scale_motion(frame.z.copy(), params, cfg)
        rows[:, 4] = frame.scores
    return rows


def _descriptor_rows(
    prev_pos: Sequence[PotentialObject], d_shape: int
) -> np.ndarray:
    rows = np.zeros((len(prev_pos), d_shape))
    for i, po in enumerate(prev_pos):
        if po.descriptor is not None and len(po.descriptor) == d_shape:
            rows[i] = po.descriptor
    return rows


@dataclass(frozen=True)
class FeatureTapes:
    motion_a: mlp.MlpTape
    shape_a: mlp.MlpTape
    motion_b: mlp.MlpTape
    shape_b: mlp.MlpTape
    shape_mask: float


def extract_features(
    prev_pos: Sequence[PotentialObject],
    frame: MeasurementFrame,
    params: ModelParams,
    nets: NebpNets,
    variant: NebpVariant = NebpVariant(),
) -> tuple[np.ndarray, np.ndarray, FeatureTapes]:
    """Initial embeddings for legacy objects (h_a) and measurements (h_b).

    Each embedding concatenates a motion half and a shape half; the shape
    half is zeroed when the variant disables shape features.
    """
    cfg = nets.config
    mask = 1.0 if variant.use_shape else 0.0
    ua = _legacy_motion_rows(prev_pos, params, cfg)
    ub = _measurement_motion_rows(frame, params, cfg)
    da = _descriptor_rows(prev_pos, cfg.d_shape)
    db = frame.shapes if frame.shapes.shape[1] == cfg.d_shape else np.zeros(
        (len(frame), cfg.d_shape)
    )
    ma, tape_ma = mlp.forward(nets.motion, ua)
    mb, tape_mb = mlp.forward(nets.motion, ub)
    sa, tape_sa = mlp.forward(nets.shape, da)
    sb, tape_sb = mlp.forward(nets.shape, db)
    h_a = np.hstack([ma, mask * sa])
    h_b = np.hstack([mb, mask * sb])
    tapes = FeatureTapes(
        motion_a=tape_ma, shape_a=tape_sa, motion_b=tape_mb, shape_b=tape_sb,
        shape_mask=mask,
    )
    return h_a, h_b, tapes


# ---------------------------------------------------------------------------
# message rounds


def _squash(x: np.ndarray, enabled: bool) -> np.ndarray:
    return x / (1.0 + x) if enabled else x


@dataclass(frozen=True)
class GnnIterationTape:
    edge_ab: mlp.MlpTape
    edge_ba: mlp.MlpTape
    node_a: mlp.MlpTape
    node_b: mlp.MlpTape


@dataclass(frozen=True)
class GnnResult:
    h_a: np.ndarray  # (I, 2E) after all rounds
    h_b: np.ndarray  # (J, 2E)
    m_ab: np.ndarray | None  # (I*J, d_msg), last round
    m_ba: np.ndarray | None
    tapes: tuple[GnnIterationTape, ...]


def gnn_pass(
    h_a: np.ndarray,
    h_b: np.ndarray,
    beta_s: np.ndarray,
    xi_s0: np.ndarray,
    msgs: DaMessages,
    nets: NebpNets,
    n_iters: int | None = None,
) -> GnnResult:
    """Run message rounds over the association graph.

    beta_s is the row-normalized (I, J+1) mass matrix, xi_s0 the normalized
    measurement-side null masses (J,). Association quantities enter as
    constants. With n_iters=0 the embeddings pass through unchanged.
    """
    cfg = nets.config
    p_iters = cfg.gnn_iters if n_iters is None else n_iters
    n_i, n_j = h_a.shape[0], h_b.shape[0]
    pair = _squash(beta_s[:, 1:], False).reshape(n_i * n_j, 1)  # already in [0, 1]
    phi_in = _squash(msgs.phi, cfg.squash_scalars).reshape(n_i * n_j, 1)
    nu_in = _squash(msgs.nu, cfg.squash_scalars).reshape(n_i * n_j, 1)
    beta0 = beta_s[:, :1]  # (I, 1)
    xi0 = xi_s0.reshape(n_j, 1)

    idx_i = np.repeat(np.arange(n_i), n_j)
    idx_j = np.tile(np.arange(n_j), n_i)
    tapes = []
    m_ab = m_ba = None
    for _ in range(p_iters):
        ha_pairs = h_a[idx_i]
        hb_pairs = h_b[idx_j]
        x_ab = np.hstack([ha_pairs, hb_pairs, pair, phi_in])
        m_ab, tape_ab = mlp.forward(nets.edge, x_ab)
        x_ba = np.hstack([ha_pairs, hb_pairs, pair, nu_in])
        m_ba, tape_ba = mlp.forward(nets.edge, x_ba)
        sum_ba = m_ba.reshape(n_i, n_j, cfg.d_msg).sum(axis=1)  # (I, M)
        sum_ab = m_ab.reshape(n_i, n_j, cfg.d_msg).sum(axis=0)  # (J, M)
        x_a = np.hstack([h_a, sum_ba, beta0])
        h_a, tape_a = mlp.forward(nets.node, x_a)
        x_b = np.hstack([h_b, sum_ab, xi0])
        h_b, tape_b = mlp.forward(nets.node, x_b)
        tapes.append(
            GnnIterationTape(edge_ab=tape_ab, edge_ba=tape_ba, node_a=tape_a, node_b=tape_b)
        )
    return GnnResult(h_a=h_a, h_b=h_b, m_ab=m_ab, m_ba=m_ba, tapes=tuple(tapes))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class Refinements:
    """Outputs of the refinement heads.

    omega_star and mu_star are the raw head outputs; omega applies the
    calibrated sigmoid sigma(T (omega_star - delta)) and mu the positive
    part of mu_star. Temperature can be inf, making omega a hard threshold.
    """

    omega: np.ndarray  # (J,)
    mu: np.ndarray  # (I, J)
    omega_star: np.ndarray  # (J,)
    mu_star: np.ndarray  # (I, J)


@dataclass(frozen=True)
class HeadTapes:
    rejection: mlp.MlpTape
    assoc: mlp.MlpTape | None


def compute_refinements(
    gnn: GnnResult,
    nets: NebpNets,
    temperature: float = 1.0,
    offset: float = 0.0,
    variant: NebpVariant = NebpVariant(),
) -> tuple[Refinements, HeadTapes]:
    n_j = gnn.h_b.shape[0]
    n_i = gnn.h_a.shape[0]
    raw_omega, tape_rej = mlp.forward(nets.rejection, gnn.h_b)
    omega_star = raw_omega.reshape(n_j)
    if gnn.m_ba is not None and n_i:
        raw_mu, tape_assoc = mlp.forward(nets.assoc, gnn.m_ba)
        mu_star = raw_mu.reshape(n_i, n_j)
    else:
        tape_assoc = None
        mu_star = np.zeros((n_i, n_j))

    if variant.use_rejection:
        if np.isinf(temperature):
            omega = np.where(
                omega_star > offset, 1.0, np.where(omega_star < offset, 0.0, 0.5)
            )
        else:
            omega = sigmoid(temperature * (omega_star - offset))
    else:
        omega = np.ones(n_j)
    mu = np.maximum(mu_star, 0.0) if variant.use_association else np.zeros((n_i, n_j))
    return (
        Refinements(omega=omega, mu=mu, omega_star=omega_star, mu_star=mu_star),
        HeadTapes(rejection=tape_rej, assoc=tape_assoc),
    )


# ---------------------------------------------------------------------------
# full forward and reverse passes


@dataclass(frozen=True)
class ForwardTapes:
    features: FeatureTapes
    gnn: GnnResult
    heads: HeadTapes
    refinements: Refinements
    n_i: int
    n_j: int


def nebp_forward(
    prev_pos: Sequence[PotentialObject],
    frame: MeasurementFrame,
    params: ModelParams,
    beta: np.ndarray,
    xi: np.ndarray,
    msgs: DaMessages,
    nets: NebpNets,
    variant: NebpVariant = NebpVariant(),
    temperature: float = 1.0,
    offset: float = 0.0,
) -> tuple[Enhancement, ForwardTapes]:
    """Full refinement forward pass for one frame."""
    cq = beta_normalizers(beta)
    beta_s = beta / cq[:, None] if len(prev_pos) else beta
    xi_s0 = xi / xi_normalizers(xi, len(prev_pos))
    h_a, h_b, feat_tapes = extract_features(prev_pos, frame, params, nets, variant)
    gnn = gnn_pass(h_a, h_b, beta_s, xi_s0, msgs, nets)
    ref, head_tapes = compute_refinements(gnn, nets, temperature, offset, variant)
    enh = Enhancement(omega=ref.omega, mu=ref.mu, cq=cq)
    tapes = ForwardTapes(
        features=feat_tapes,
        gnn=gnn,
        heads=head_tapes,
        refinements=ref,
        n_i=len(prev_pos),
        n_j=len(frame),
    )
    return enh, tapes


def nebp_backward(
    tapes: ForwardTapes,
    nets: NebpNets,
    d_omega_star: np.ndarray,
    d_mu_star: np.ndarray,
) -> dict[str, MlpGrads]:
    """Gradients of a scalar loss with cotangents on the raw head outputs.

    Association quantities along the way are treated as constants, so the
    reverse pass only traverses heads, message rounds and encoders.
    """
    cfg = nets.config
    e2 = 2 * cfg.d_emb
    n_i, n_j = tapes.n_i, tapes.n_j
    grads = {name: mlp.grads_zero(getattr(nets, name)) for name in NET_NAMES}

    d_hb, g_rej = mlp.backward(tapes.heads.rejection, d_omega_star.reshape(n_j, 1))
    grads["rejection"] = mlp.grads_add(grads["rejection"], g_rej)
    d_ha = np.zeros((n_i, e2))
    if tapes.heads.assoc is not None:
        d_mba_pending, g_assoc = mlp.backward(
            tapes.heads.assoc, d_mu_star.reshape(n_i * n_j, 1)
        )
        grads["assoc"] = mlp.grads_add(grads["assoc"], g_assoc)
    else:
        d_mba_pending = np.zeros((n_i * n_j, cfg.d_msg))
    d_mab_pending = np.zeros((n_i * n_j, cfg.d_msg))

    for it in reversed(tapes.gnn.tapes):
        dxa, g_na = mlp.backward(it.node_a, d_ha)
        dxb, g_nb = mlp.backward(it.node_b, d_hb)
        grads["node"] = mlp.grads_add(grads["node"], mlp.grads_add(g_na, g_nb))
        d_ha_prev = dxa[:, :e2]
        d_hb_prev = dxb[:, :e2]
        d_mba = d_mba_pending + np.repeat(dxa[:, e2 : e2 + cfg.d_msg], n_j, axis=0)
        d_mab = d_mab_pending + np.tile(dxb[:, e2 : e2 + cfg.d_msg], (n_i, 1))
        dx_ba, g_eba = mlp.backward(it.edge_ba, d_mba)
        dx_ab, g_eab = mlp.backward(it.edge_ab, d_mab)
        grads["edge"] = mlp.grads_add(grads["edge"], mlp.grads_add(g_eba, g_eab))
        d_pair = (dx_ba[:, : 2 * e2] + dx_ab[:, : 2 * e2]).reshape(n_i, n_j, 2 * e2)
        d_ha_prev = d_ha_prev + d_pair[:, :, :e2].sum(axis=1)
        d_hb_prev = d_hb_prev + d_pair[:, :, e2:].sum(axis=0)
        d_ha, d_hb = d_ha_prev, d_hb_prev
        d_mba_pending = np.zeros((n_i * n_j, cfg.d_msg))
        d_mab_pending = np.zeros((n_i * n_j, cfg.d_msg))

    feat = tapes.features
    e = cfg.d_emb
    _, g_ma = mlp.backward(feat.motion_a, d_ha[:, :e])
    _, g_mb = mlp.backward(feat.motion_b, d_hb[:, :e])
    grads["motion"] = mlp.grads_add(g_ma, g_mb)
    _, g_sa = mlp.backward(feat.shape_a, feat.shape_mask * d_ha[:, e:])
    _, g_sb = mlp.backward(feat.shape_b, feat.shape_mask * d_hb[:, e:])
    grads["shape"] = mlp.grads_add(g_sa, g_sb)
    return grads


# ---------------------------------------------------------------------------
# tracking step


def nebp_step(
    state: TrackerState,
    frame: MeasurementFrame,
    params: ModelParams,
    nets: NebpNets,
    variant: NebpVariant = NebpVariant(),
    temperature: float = 1.0,
    offset: float = 0.0,
    _tape_sink: list | None = None,
) -> TrackerState:
    """One tracking step with learned message refinement.

    temperature and offset are the calibrated rejection parameters; with
    temperature 1 and offset 0 the raw training-time behavior applies. When
    a list is passed as _tape_sink the forward tapes of the step are
    appended to it (used by training).
    """

    def enhancer(prev_pos, pred, frame_r, beta, xi, msgs):
        enh, tapes = nebp_forward(
            prev_pos, frame_r, params, beta, xi, msgs, nets,
            variant=variant, temperature=temperature, offset=offset,
        )
        if _tape_sink is not None:
            _tape_sink.append(tapes)
        return enh

    return run_step(state, frame, params, enhancer=enhancer)
