"""Whole-package acceptance checks.

Each test exercises one end-to-end contract of the toolkit and prints a
single summary line with the measured quantities next to their bounds.
Problem sizes, tolerances, and seeds are pinned so every run measures the
same thing.
"""

import time

import numpy as np
import pytest

from nebptrack import (
    Estimate,
    MeasurementFrame,
    ModelParams,
    NebpConfig,
    NebpVariant,
    bp_step,
    clutter_mismatch_scenario,
    compute_beta,
    compute_xi,
    evaluate_tracking,
    init_nets,
    init_tracker,
    iterate_da,
    make_dataset,
    matched_params,
    nebp_step,
)
from nebptrack import mlp
from nebptrack.bp import DaInputs, da_residual
from nebptrack.metrics import clear_pass
from nebptrack.nebp import NET_NAMES, nebp_backward, nebp_forward, sigmoid
from nebptrack.simulate import GroundTruth, GtObject
from nebptrack.train import (
    CALIBRATION_SIGMOID_OFFSETS,
    CALIBRATION_TEMPERATURES,
    TrainConfig,
    _association_grad_star,
    _logit,
    _rejection_grad_star,
    calibrate,
    loss_association,
    loss_rejection,
    track_frames,
    train,
)
from conftest import (
    enum_association_marginals,
    marginals_from_messages,
    max_row_tv,
    random_da_instance,
    random_potential_object,
)


@pytest.fixture
def emit(capsys):
    """Print a summary line past pytest's capture so it always shows."""

    def _emit(line: str) -> None:
        with capsys.disabled():
            print(line)

    return _emit


# ---------------------------------------------------------------------------
# criteria 1 and 2: association marginals and the message fixed point


@pytest.fixture(scope="module")
def da_suite():
    """200 random association problems with I, J <= 3 plus their messages."""
    iterate_da(DaInputs(np.ones((1, 2)), np.ones(1)), 5, 1e-6)  # warm the jit
    rng = np.random.default_rng(20240814)
    t0 = time.perf_counter()
    cases = []
    for _ in range(200):
        n_i = int(rng.integers(1, 4))
        n_j = int(rng.integers(1, 4))
        beta, xi = random_da_instance(rng, n_i, n_j)
        inputs = DaInputs(beta=beta, xi=xi)
        msgs = iterate_da(inputs, max_iters=200, tol=1e-12)
        cases.append((inputs, msgs))
    return cases, time.perf_counter() - t0


def test_criterion_1_marginals_match_enumeration(da_suite, emit):
    cases, build_time = da_suite
    t0 = time.perf_counter()
    worst_tv = 0.0
    worst_tree = 0.0
    n_trees = 0
    for inputs, msgs in cases:
        exact_a, exact_b = enum_association_marginals(inputs.beta, inputs.xi)
        bp_a, bp_b = marginals_from_messages(inputs.beta, inputs.xi, msgs)
        tv = max(max_row_tv(bp_a, exact_a), max_row_tv(bp_b, exact_b))
        worst_tv = max(worst_tv, tv)
        n_i, n_j = inputs.beta.shape[0], inputs.beta.shape[1] - 1
        if n_i == 1 or n_j == 1:
            n_trees += 1
            err = max(
                np.abs(bp_a - exact_a).max(),
                np.abs(bp_b - exact_b).max(),
            )
            worst_tree = max(worst_tree, err)
    elapsed = build_time + time.perf_counter() - t0
    ok = worst_tv <= 0.05 and worst_tree <= 1e-9 and elapsed < 10.0
    emit(
        f"[criterion 1] marginals vs enumeration on 200 instances "
        f"({n_trees} trees): max TV {worst_tv:.3e} <= 0.05, tree error "
        f"{worst_tree:.1e} <= 1e-9, {elapsed:.2f} s < 10 s: "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert n_trees > 0
    assert worst_tv <= 0.05
    assert worst_tree <= 1e-9
    assert elapsed < 10.0


def test_criterion_2_fixed_point_residual(da_suite, emit):
    cases, _ = da_suite
    worst_residual = 0.0
    worst_iters = 0
    all_converged = True
    for inputs, msgs in cases:
        worst_residual = max(worst_residual, da_residual(inputs, msgs))
        worst_iters = max(worst_iters, msgs.iterations)
        all_converged = all_converged and msgs.converged
    ok = all_converged and worst_residual <= 1e-9 and worst_iters <= 200
    emit(
        f"[criterion 2] fixed-point residual: max {worst_residual:.1e} <= 1e-9, "
        f"all converged within {worst_iters} <= 200 sweeps: "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert all_converged
    assert worst_residual <= 1e-9
    assert worst_iters <= 200


# ---------------------------------------------------------------------------
# criterion 3: disabled refinement reproduces the plain tracker


def _random_frame(rng, n, d_shape):
    z = rng.uniform(-45.0, 45.0, size=(n, 4))
    z[:, 2:] = rng.normal(scale=1.2, size=(n, 2))
    shapes = rng.normal(size=(n, d_shape))
    shapes /= np.maximum(np.linalg.norm(shapes, axis=1, keepdims=True), 1e-12)
    return MeasurementFrame(z, rng.uniform(0.2, 1.0, size=n), shapes)


def test_criterion_3_degenerate_refinement_matches_bp(emit):
    cfg = NebpConfig(d_shape=3, d_emb=4, d_msg=4, d_hidden=8, gnn_iters=2)
    nets = init_nets(cfg, seed=11)
    params = ModelParams(n_particles=50)
    variant = NebpVariant(use_rejection=False, use_association=False)
    rng = np.random.default_rng(7)
    plain = init_tracker(seed=5)
    refined = init_tracker(seed=5)
    worst = 0.0
    for _ in range(50):
        frame = _random_frame(rng, int(rng.integers(0, 6)), cfg.d_shape)
        plain = bp_step(plain, frame, params)
        refined = nebp_step(refined, frame, params, nets, variant=variant)
        assert len(plain.pos) == len(refined.pos)
        for pa, pb in zip(plain.pos, refined.pos):
            assert pa.track_id == pb.track_id
            worst = max(
                worst,
                abs(pa.existence - pb.existence),
                float(np.abs(pa.particles - pb.particles).max(initial=0.0)),
                float(np.abs(pa.weights - pb.weights).max(initial=0.0)),
            )
    ok = worst <= 1e-9
    emit(
        f"[criterion 3] refinement with unit weights and zero pairwise mass "
        f"vs plain tracker over 50 frames: max belief deviation {worst:.1e} "
        f"<= 1e-9: {'PASS' if ok else 'FAIL'}"
    )
    assert worst <= 1e-9


# ---------------------------------------------------------------------------
# criterion 4: analytic gradients against central finite differences


def _mini_problem(rng, n_i, n_j, cfg):
    params = ModelParams(n_particles=8, gate_chi2=None)
    pos = [
        random_potential_object(rng, i, n_particles=8, d_shape=cfg.d_shape)
        for i in range(n_i)
    ]
    z = np.vstack(
        [
            pos[int(rng.integers(0, n_i))].mean() + rng.normal(scale=1.5, size=4)
            for _ in range(n_j)
        ]
    )
    shapes = rng.normal(size=(n_j, cfg.d_shape))
    shapes /= np.linalg.norm(shapes, axis=1, keepdims=True)
    frame = MeasurementFrame(z, rng.uniform(0.2, 1.0, size=n_j), shapes)
    beta = compute_beta(pos, frame, params)
    xi = compute_xi(frame, params)
    msgs = iterate_da(DaInputs(beta, xi), max_iters=500, tol=1e-12)
    return params, pos, frame, beta, xi, msgs


def _smallest_hidden_preactivation(tapes) -> float:
    found = [np.inf]

    def scan(obj):
        if isinstance(obj, mlp.MlpTape):
            for pre in obj.preacts[:-1]:
                if pre.size:
                    found.append(float(np.abs(pre).min()))
        elif isinstance(obj, (list, tuple)):
            for item in obj:
                scan(item)
        elif hasattr(obj, "__dict__"):
            for value in vars(obj).values():
                scan(value)

    scan(tapes)
    return min(found)


def test_criterion_4_gradients_match_finite_differences(emit):
    cfg = NebpConfig(d_shape=4, d_emb=8, d_msg=8, d_hidden=16, gnn_iters=2)
    rng = np.random.default_rng(2024)
    h = 1e-4
    worst = 0.0
    n_params = 0
    for _ in range(20):
        n_i = int(rng.integers(1, 5))
        n_j = int(rng.integers(1, 5))
        # central differences assume local smoothness: redraw whenever some
        # hidden unit sits within the step size of its activation kink
        while True:
            nets = init_nets(cfg, seed=int(rng.integers(1 << 30)))
            params, pos, frame, beta, xi, msgs = _mini_problem(rng, n_i, n_j, cfg)
            _, probe = nebp_forward(pos, frame, params, beta, xi, msgs, nets)
            if _smallest_hidden_preactivation(probe) > 1e-3:
                break
        omega_gt = rng.integers(0, 2, n_j).astype(float)
        mu_gt = rng.integers(0, 2, (n_i, n_j)).astype(float)

        def loss_of(nets_):
            _, tapes = nebp_forward(pos, frame, params, beta, xi, msgs, nets_)
            ref = tapes.refinements
            return (
                loss_rejection(sigmoid(ref.omega_star), omega_gt, 0.1)
                + loss_association(ref.mu_star, mu_gt)
            ), tapes

        _, tapes = loss_of(nets)
        d_os = _rejection_grad_star(tapes.refinements.omega_star, omega_gt, 0.1)
        d_ms = _association_grad_star(tapes.refinements.mu_star, mu_gt)
        grads = nebp_backward(tapes, nets, d_os, d_ms)
        for name in NET_NAMES:
            net = getattr(nets, name)
            for li in range(net.n_layers):
                for tag in ("w", "b"):
                    arr = (net.weights if tag == "w" else net.biases)[li]
                    an_arr = (
                        grads[name].d_weights if tag == "w" else grads[name].d_biases
                    )[li]
                    n_params += arr.size
                    for slot in range(arr.size):
                        idx = np.unravel_index(slot, arr.shape)
                        vals = []
                        for sign in (h, -h):
                            ws = [w.copy() for w in net.weights]
                            bs = [b.copy() for b in net.biases]
                            (ws if tag == "w" else bs)[li][idx] += sign
                            cand = mlp.MlpParams(weights=tuple(ws), biases=tuple(bs))
                            mutated = nets.replace_nets(
                                {**nets.as_dict(), name: cand}
                            )
                            vals.append(loss_of(mutated)[0])
                        fd = (vals[0] - vals[1]) / (2 * h)
                        an = an_arr[idx]
                        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    ok = worst <= 1e-3
    emit(
        f"[criterion 4] analytic vs central-difference gradients over "
        f"{n_params} parameters on 20 problems (I, J <= 4, embedding 8): "
        f"worst relative error {worst:.1e} <= 1e-3: {'PASS' if ok else 'FAIL'}"
    )
    assert worst <= 1e-3


# ---------------------------------------------------------------------------
# criterion 5: learned refinement beats the mismatched plain tracker


def _mean_reports(datasets, params, method, nets=None):
    reports = [
        evaluate_tracking(
            track_frames(
                data.frames, params, method=method, nets=nets,
                temperature=1.0, offset=0.0, seed=0,
            ),
            data.ground_truth,
        )
        for data in datasets
    ]
    return (
        float(np.mean([r.gospa_total for r in reports])),
        float(np.mean([r.gospa_false for r in reports])),
    )


def test_criterion_5_learning_effect_on_persistent_clutter(emit):
    t0 = time.perf_counter()
    train_data = [make_dataset(clutter_mismatch_scenario(100 + i)) for i in range(10)]
    eval_data = [make_dataset(clutter_mismatch_scenario(i)) for i in range(20)]
    params = matched_params(train_data[0].config, n_particles=250)
    cfg = NebpConfig(d_shape=8, d_emb=16, d_msg=16, d_hidden=32, gnn_iters=2)
    nets = init_nets(cfg, seed=0)
    nets, _, _ = train(train_data, params, nets, TrainConfig(lr=1e-3, epochs=4, seed=0))

    bp_total, bp_false = _mean_reports(eval_data, params, "bp")
    nebp_total, nebp_false = _mean_reports(eval_data, params, "nebp", nets)
    _, rej_false = _mean_reports(eval_data, params, "nebp-r", nets)
    minutes = (time.perf_counter() - t0) / 60.0
    ok = (
        nebp_total < bp_total
        and nebp_false < bp_false
        and rej_false < bp_false
        and minutes < 30.0
    )
    emit(
        f"[criterion 5] 20-scene persistent-clutter benchmark: mean error "
        f"refined {nebp_total:.0f} < plain {bp_total:.0f}, false component "
        f"refined {nebp_false:.0f} / rejection-only {rej_false:.0f} < plain "
        f"{bp_false:.0f}, done in {minutes:.1f} min < 30 min: "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert nebp_total < bp_total
    assert nebp_false < bp_false
    assert rej_false < bp_false
    assert minutes < 30.0


# ---------------------------------------------------------------------------
# criterion 6: iteration cost grows linearly in the number of pairs


def test_criterion_6_complexity_scaling(emit):
    rng = np.random.default_rng(42)
    iterate_da(DaInputs(np.ones((1, 2)), np.ones(1)), 5, 1e-6)  # warm the jit
    sizes = [8, 16, 32, 64, 128]
    iters = 50
    times = []
    for n in sizes:
        beta, xi = random_da_instance(rng, n, n)
        inputs = DaInputs(beta=beta, xi=xi)
        best = np.inf
        for _ in range(7):
            t0 = time.perf_counter()
            # a negative tolerance can never be met, forcing all sweeps
            msgs = iterate_da(inputs, max_iters=iters, tol=-1.0)
            best = min(best, time.perf_counter() - t0)
        assert msgs.iterations == iters
        times.append(best)
    slope = float(np.polyfit(np.log([n * n for n in sizes]), np.log(times), 1)[0])
    ok = 0.85 <= slope <= 1.15
    emit(
        f"[criterion 6] runtime scaling of the association iteration for "
        f"I = J in {sizes} at {iters} sweeps: log-log slope {slope:.3f} "
        f"within 1.0 +/- 0.15: {'PASS' if ok else 'FAIL'}"
    )
    assert 0.85 <= slope <= 1.15


# ---------------------------------------------------------------------------
# criterion 7: the calibration grid search is exhaustive-optimal


def test_criterion_7_calibration_returns_grid_optimum(emit):
    train_scenes = [
        make_dataset(clutter_mismatch_scenario(s, n_objects=2, n_frames=12))
        for s in (200, 201)
    ]
    held_out = [make_dataset(clutter_mismatch_scenario(210, n_objects=2, n_frames=12))]
    params = matched_params(train_scenes[0].config, n_particles=100)
    cfg = NebpConfig(d_shape=8, d_emb=8, d_msg=8, d_hidden=16, gnn_iters=2)
    nets = init_nets(cfg, seed=3)
    nets, _, _ = train(train_scenes, params, nets, TrainConfig(lr=1e-3, epochs=2, seed=0))

    result = calibrate(nets, held_out, params, metric="gospa", seed=0)

    table = {}
    best = None
    for temp in CALIBRATION_TEMPERATURES:
        for s_off in CALIBRATION_SIGMOID_OFFSETS:
            values = [
                evaluate_tracking(
                    track_frames(
                        data.frames, params, method="nebp", nets=nets,
                        temperature=temp, offset=_logit(s_off), seed=0,
                    ),
                    data.ground_truth,
                ).gospa_total
                for data in held_out
            ]
            value = float(np.mean(values))
            table[(temp, s_off)] = value
            if best is None or value < best[2]:
                best = (temp, s_off, value)

    n_points = len(table)
    picked = (result.temperature, result.sigmoid_offset)
    ok = (
        n_points == 40
        and picked == best[:2]
        and result.objective == table[picked]
        and result.objective <= min(table.values())
    )
    emit(
        f"[criterion 7] calibration over the {len(CALIBRATION_TEMPERATURES)}x"
        f"{len(CALIBRATION_SIGMOID_OFFSETS)} grid picked T={picked[0]}, "
        f"sigmoid offset {picked[1]} at objective {result.objective:.2f}, "
        f"matching the exhaustive optimum {best[2]:.2f}: "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert n_points == 40
    assert picked == best[:2]
    assert result.objective == table[picked]
    assert result.objective <= min(table.values())


# ---------------------------------------------------------------------------
# criterion 8: metric fixed points and hand-built counter cases


def _gt_two_objects(n_frames):
    frames = []
    for k in range(n_frames):
        frames.append(
            (
                GtObject(track_id=1, state=np.array([float(k), 0.0, 1.0, 0.0]), shape=np.zeros(1)),
                GtObject(track_id=2, state=np.array([-3.0, float(k), 0.0, 1.0]), shape=np.zeros(1)),
            )
        )
    return GroundTruth(frames=tuple(frames))


def test_criterion_8_metric_sanity(emit):
    truth = _gt_two_objects(4)
    estimates = [
        [
            Estimate(track_id=10, state=obj.state.copy(), existence=0.99, score=score)
            for obj, score in zip(frame, (0.9, 0.55))
        ]
        for frame in truth.frames
    ]
    for frame in estimates:
        frame[1] = Estimate(
            track_id=11, state=frame[1].state, existence=frame[1].existence,
            score=frame[1].score,
        )
    report = evaluate_tracking(estimates, truth)

    one = [[(1, np.array([0.0, 0.0]))]] * 3
    switch = clear_pass(
        one,
        [
            [(7, np.array([0.1, 0.0]))],
            [(7, np.array([0.1, 0.0]))],
            [(8, np.array([0.1, 0.0]))],
        ],
    )
    gap_switch = clear_pass(
        one,
        [
            [(7, np.array([0.1, 0.0]))],
            [],
            [(8, np.array([0.1, 0.0]))],
        ],
    )
    fragment = clear_pass(
        one,
        [
            [(7, np.array([0.1, 0.0]))],
            [],
            [(7, np.array([0.1, 0.0]))],
        ],
    )
    ok = (
        report.gospa_total == 0.0
        and report.amota == 1.0
        and report.ids == 0
        and report.frag == 0
        and (switch.ids, switch.frag) == (1, 0)
        and (gap_switch.ids, gap_switch.frag, gap_switch.fn) == (1, 1, 1)
        and (fragment.ids, fragment.frag) == (0, 1)
    )
    emit(
        f"[criterion 8] perfect tracker scores error {report.gospa_total} and "
        f"amota {report.amota}; switch/gap/fragment counters "
        f"({switch.ids},{switch.frag}) ({gap_switch.ids},{gap_switch.frag}) "
        f"({fragment.ids},{fragment.frag}) match hand counts: "
        f"{'PASS' if ok else 'FAIL'}"
    )
    assert report.gospa_total == 0.0
    assert report.amota == 1.0
    assert report.ids == 0 and report.frag == 0
    assert (switch.ids, switch.frag) == (1, 0)
    assert (gap_switch.ids, gap_switch.frag, gap_switch.fn) == (1, 1, 1)
    assert (fragment.ids, fragment.frag) == (0, 1)
