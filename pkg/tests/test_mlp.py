import numpy as np
import pytest

from nebptrack.mlp import (
    LEAKY_SLOPE,
    AdamState,
    MlpParams,
    adam_init,
    adam_step,
    backward,
    forward,
    grads_add,
    grads_scale,
    grads_zero,
    load_checkpoint,
    mlp_init,
    save_checkpoint,
)


def fd_gradients(params, loss_fn, h=1e-6):
    """Central finite differences of loss_fn over every parameter entry."""
    d_weights, d_biases = [], []
    for which in ("w", "b"):
        target = d_weights if which == "w" else d_biases
        source = params.weights if which == "w" else params.biases
        for li, arr in enumerate(source):
            grad = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                plus = perturb(params, which, li, idx, h)
                minus = perturb(params, which, li, idx, -h)
                grad[idx] = (loss_fn(plus) - loss_fn(minus)) / (2 * h)
            target.append(grad)
    return d_weights, d_biases


def perturb(params, which, layer, idx, eps):
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    (weights if which == "w" else biases)[layer][idx] += eps
    return MlpParams(weights=tuple(weights), biases=tuple(biases))


class TestForward:
    def test_hand_computed_single_hidden_layer(self):
        params = MlpParams(
            weights=(np.array([[1.0], [-2.0]]), np.array([[3.0]])),
            biases=(np.array([0.5]), np.array([-1.0])),
        )
        # x = [1, 1]: preact = 1 - 2 + 0.5 = -0.5 -> leaky -0.005 -> 3*(-0.005) - 1
        y, _ = forward(params, np.array([1.0, 1.0]))
        assert y[0] == pytest.approx(3 * (LEAKY_SLOPE * -0.5) - 1.0)
        # x = [2, 0]: preact = 2.5 -> 3*2.5 - 1 = 6.5
        y, _ = forward(params, np.array([2.0, 0.0]))
        assert y[0] == pytest.approx(6.5)

    def test_batched_forward_matches_row_by_row(self):
        rng = np.random.default_rng(0)
        params = mlp_init([4, 7, 3], rng)
        batch = rng.normal(size=(6, 4))
        out_batch, _ = forward(params, batch)
        assert out_batch.shape == (6, 3)
        for row_in, row_out in zip(batch, out_batch):
            single, _ = forward(params, row_in)
            np.testing.assert_allclose(single, row_out, rtol=1e-12)

    def test_init_respects_fan_in_bound(self):
        params = mlp_init([100, 50], np.random.default_rng(1))
        assert np.abs(params.weights[0]).max() <= 0.1
        assert params.sizes == (100, 50)

    def test_layer_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            MlpParams(weights=(np.zeros((2, 3)),), biases=(np.zeros(4),))


class TestBackward:
    def test_parameter_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        params = mlp_init([3, 6, 5, 2], rng)
        x = rng.normal(size=(4, 3))
        v = rng.normal(size=(4, 2))

        def loss_fn(p):
            out, _ = forward(p, x)
            return float(np.sum(v * out) + 0.5 * np.sum(out**2))

        out, tape = forward(params, x)
        _, grads = backward(tape, v + out)
        fd_w, fd_b = fd_gradients(params, loss_fn)
        for got, want in zip(grads.d_weights, fd_w):
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-8)
        for got, want in zip(grads.d_biases, fd_b):
            np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-8)

    def test_input_cotangent_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        params = mlp_init([4, 8, 1], rng)
        x = rng.normal(size=4)
        out, tape = forward(params, x)
        d_x, _ = backward(tape, np.ones(1))
        h = 1e-6
        for k in range(4):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (forward(params, xp)[0][0] - forward(params, xm)[0][0]) / (2 * h)
            assert d_x[k] == pytest.approx(fd, rel=1e-6, abs=1e-9)

    def test_grad_container_algebra(self):
        params = mlp_init([2, 3, 1], np.random.default_rng(4))
        z = grads_zero(params)
        assert all(np.all(w == 0) for w in z.d_weights)
        out, tape = forward(params, np.ones(2))
        _, g = backward(tape, np.ones(1))
        doubled = grads_add(g, g)
        scaled = grads_scale(g, 2.0)
        for a, b in zip(doubled.d_weights, scaled.d_weights):
            np.testing.assert_allclose(a, b, rtol=1e-12)


class TestAdam:
    def test_three_steps_match_reference_formulas(self):
        rng = np.random.default_rng(5)
        params = mlp_init([2, 2], rng)
        state = adam_init(params, lr=0.01)
        ref_w = params.weights[0].copy()
        m = np.zeros_like(ref_w)
        v = np.zeros_like(ref_w)
        current = params
        for t in range(1, 4):
            x = rng.normal(size=(3, 2))
            out, tape = forward(current, x)
            _, grads = backward(tape, out)  # gradient of 0.5*sum(out^2)
            g = grads.d_weights[0]
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            mhat = m / (1 - 0.9**t)
            vhat = v / (1 - 0.999**t)
            ref_w = ref_w - 0.01 * mhat / (np.sqrt(vhat) + 1e-8)
            current, state = adam_step(current, grads, state)
            np.testing.assert_allclose(current.weights[0], ref_w, rtol=1e-12)
        assert state.step == 3

    def test_first_step_size_is_learning_rate(self):
        params = MlpParams(weights=(np.array([[4.0]]),), biases=(np.array([0.0]),))
        state = adam_init(params, lr=0.05)
        out, tape = forward(params, np.array([1.0]))
        _, grads = backward(tape, np.array([1.0]))
        updated, _ = adam_step(params, grads, state)
        # bias correction makes the first step lr * g/(|g| + eps) ~ lr
        assert updated.weights[0][0, 0] == pytest.approx(4.0 - 0.05, abs=1e-6)

    def test_converges_on_quadratic(self):
        params = MlpParams(weights=(np.array([[2.0]]),), biases=(np.array([-1.5]),))
        state = adam_init(params, lr=0.05)
        for _ in range(600):
            out, tape = forward(params, np.array([1.0]))
            _, grads = backward(tape, out)
            params, state = adam_step(params, grads, state)
        out, _ = forward(params, np.array([1.0]))
        assert abs(out[0]) < 1e-3


class TestCheckpoint:
    def test_round_trip_is_bit_exact(self, tmp_path):
        rng = np.random.default_rng(6)
        nets = {"alpha": mlp_init([3, 4, 2], rng), "beta": mlp_init([5, 5], rng)}
        adam = {"alpha": adam_init(nets["alpha"], lr=0.003)}
        # advance optimizer state so moments are nonzero
        out, tape = forward(nets["alpha"], rng.normal(size=3))
        _, grads = backward(tape, np.ones(2))
        nets["alpha"], adam["alpha"] = adam_step(nets["alpha"], grads, adam["alpha"])
        meta = {"purpose": "test", "dims": [3, 4, 2]}
        path = tmp_path / "ckpt.npz"
        save_checkpoint(str(path), nets, adam, meta)
        nets2, adam2, meta2 = load_checkpoint(str(path))
        assert meta2 == meta
        assert set(nets2) == {"alpha", "beta"}
        for name in nets:
            for a, b in zip(nets[name].weights, nets2[name].weights):
                np.testing.assert_array_equal(a, b)
            for a, b in zip(nets[name].biases, nets2[name].biases):
                np.testing.assert_array_equal(a, b)
        st, st2 = adam["alpha"], adam2["alpha"]
        assert st2.lr == st.lr and st2.step == st.step
        for a, b in zip(st.m_weights, st2.m_weights):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(st.v_biases, st2.v_biases):
            np.testing.assert_array_equal(a, b)

    def test_version_mismatch_rejected(self, tmp_path):
        import json

        path = tmp_path / "bad.npz"
        manifest = {"version": 99, "nets": {}, "adam": {}, "meta": {}}
        arrays = {
            "__manifest__": np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8)
        }
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(ValueError, match="version"):
            load_checkpoint(str(path))
