import numpy as np
import pytest

from confplan import policy
from confplan.policy import (
    CheckpointError,
    Gradients,
    adam_init,
    backward,
    forward,
    init_params,
    load_checkpoint,
    logits,
    optimizer_step,
    save_checkpoint,
    softmax,
    zero_params,
)


def tiny_params(seed=0, f=8, hidden=(4,)):
    return init_params(f, hidden=hidden, seed=seed)


def flatten(grads_or_params):
    arrs = grads_or_params.weights + grads_or_params.biases
    return np.concatenate([a.ravel() for a in arrs])


def finite_diff_param_grads(loss_fn, params, step_size=1e-5):
    """Central differences of a scalar loss over every parameter entry."""
    grads = []
    for group in (params.weights, params.biases):
        for arr in group:
            g = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            while not it.finished:
                i = it.multi_index
                orig = arr[i]
                arr[i] = orig + step_size
                hi = loss_fn(params)
                arr[i] = orig - step_size
                lo = loss_fn(params)
                arr[i] = orig
                g[i] = (hi - lo) / (2 * step_size)
                it.iternext()
            grads.append(g)
    return np.concatenate([g.ravel() for g in grads])


class TestForward:
    def test_zero_params_give_uniform(self):
        params = zero_params(12, hidden=(5,))
        probs = forward(params, np.random.default_rng(0).uniform(size=12))
        assert np.allclose(probs, 1.0 / 6.0)
        assert probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_softmax_shift_invariance(self):
        z = np.array([0.3, -1.2, 2.0, 0.0, 5.0, -0.7])
        assert np.allclose(softmax(z), softmax(z + 123.456))

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(7)
        params = tiny_params(3)
        x = rng.normal(size=(40, 8))
        probs = forward(params, x)
        assert probs.shape == (40, 6)
        assert np.all(np.abs(probs.sum(axis=1) - 1.0) < 1e-9)
        assert np.all(probs > 0)

    def test_dimension_mismatch_raises(self):
        params = tiny_params()
        with pytest.raises(ValueError):
            forward(params, np.zeros(9))

    def test_forward_deterministic(self):
        params = tiny_params(5)
        x = np.random.default_rng(5).normal(size=8)
        assert np.array_equal(forward(params, x), forward(params, x))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        params = tiny_params()
        x = np.random.default_rng(1).normal(size=(3, 8))
        grads = backward(params, x, np.zeros((3, 6)))
        assert np.all(flatten(grads) == 0.0)

    def test_non_finite_upstream_raises(self):
        params = tiny_params()
        x = np.zeros((1, 8))
        up = np.zeros((1, 6))
        up[0, 0] = np.nan
        with pytest.raises(ValueError):
            backward(params, x, up)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(42)
        for trial in range(5):
            params = tiny_params(seed=trial)
            x = rng.normal(size=(3, 8))
            upstream = rng.normal(size=(3, 6))

            def loss_fn(p):
                return float((logits(p, x) * upstream).sum())

            analytic = flatten(backward(params, x, upstream))
            numeric = finite_diff_param_grads(loss_fn, params)
            denom = np.maximum(np.abs(numeric), 1e-6)
            assert np.max(np.abs(analytic - numeric) / denom) < 1e-4

    def test_duplicated_example_doubles_gradient(self):
        params = tiny_params(9)
        rng = np.random.default_rng(9)
        x = rng.normal(size=(1, 8))
        up = rng.normal(size=(1, 6))
        single = flatten(backward(params, x, up))
        double = flatten(backward(params, np.vstack([x, x]), np.vstack([up, up])))
        assert np.allclose(double, 2.0 * single, rtol=1e-12, atol=0)


class TestOptimizer:
    def test_zero_gradient_keeps_params(self):
        params = tiny_params()
        state = adam_init(params, learning_rate=0.01)
        zero = Gradients(
            weights=[np.zeros_like(w) for w in params.weights],
            biases=[np.zeros_like(b) for b in params.biases],
        )
        new_params, new_state = optimizer_step(params, zero, state)
        assert np.array_equal(flatten(new_params), flatten(params))
        assert new_state.step_count == 1

    def test_constant_gradient_update_magnitude_approaches_lr(self):
        # With a constant gradient the bias-corrected moment ratio tends to 1,
        # so each step has magnitude ~ learning_rate.
        params = policy.PolicyParams(weights=[np.zeros((1, 1))], biases=[np.zeros(1)])
        grad = Gradients(weights=[np.full((1, 1), 0.37)], biases=[np.full(1, 0.37)])
        state = adam_init(params, learning_rate=1e-3)
        prev = params
        for _ in range(500):
            params, state = optimizer_step(params, grad, state)
        delta = abs(params.weights[0][0, 0] - prev.weights[0][0, 0]) / 500
        assert delta == pytest.approx(1e-3, rel=1e-3)

    def test_determinism(self):
        params = tiny_params(2)
        rng = np.random.default_rng(2)
        grads = Gradients(
            weights=[rng.normal(size=w.shape) for w in params.weights],
            biases=[rng.normal(size=b.shape) for b in params.biases],
        )
        state = adam_init(params)
        a_params, a_state = optimizer_step(params, grads, state)
        b_params, b_state = optimizer_step(params, grads, state)
        assert np.array_equal(flatten(a_params), flatten(b_params))
        assert a_state.step_count == b_state.step_count

    def test_inputs_not_mutated(self):
        params = tiny_params(3)
        before = flatten(params).copy()
        grads = Gradients(
            weights=[np.ones_like(w) for w in params.weights],
            biases=[np.ones_like(b) for b in params.biases],
        )
        state = adam_init(params)
        optimizer_step(params, grads, state)
        assert np.array_equal(flatten(params), before)
        assert state.step_count == 0
        assert all(np.all(m == 0) for m in state.m_weights)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = tiny_params(11)
        state = adam_init(params, learning_rate=3e-4)
        grads = Gradients(
            weights=[np.ones_like(w) for w in params.weights],
            biases=[np.ones_like(b) for b in params.biases],
        )
        params, state = optimizer_step(params, grads, state)
        rng_state = np.random.default_rng(123).bit_generator.state
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params, state, rng_state=rng_state, meta={"note": "test"})
        p2, s2, r2, meta = load_checkpoint(path)
        assert np.array_equal(flatten(p2), flatten(params))
        assert s2.step_count == 1
        assert s2.learning_rate == 3e-4
        assert np.array_equal(s2.m_weights[0], state.m_weights[0])
        assert r2 == rng_state
        assert meta == {"note": "test"}

    def test_architecture_mismatch_rejected(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expect_arch=(8, 4, 4, 6))

    def test_matching_arch_accepted(self, tmp_path):
        params = tiny_params()
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, params)
        p2, _, _, _ = load_checkpoint(path, expect_arch=params.arch)
        assert p2.arch == params.arch

    def test_unreadable_file_raises(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_init_is_seeded(self):
        a = init_params(8, hidden=(4,), seed=3)
        b = init_params(8, hidden=(4,), seed=3)
        c = init_params(8, hidden=(4,), seed=4)
        assert np.array_equal(flatten(a), flatten(b))
        assert not np.array_equal(flatten(a), flatten(c))
