"""Unit and finite-difference tests for the tensor/autodiff substrate."""

import numpy as np
import pytest

from genplan import autodiff as ad
from genplan.autodiff import (
    GatherPlan,
    NonScalarLoss,
    ParamStore,
    Segments,
    ShapeMismatch,
    Tensor,
)

RNG = np.random.default_rng(20240817)


def finite_diff_check(fn, params, h=1e-5, rtol=1e-4):
    """Compare analytic gradients of scalar fn(*params) against central
    differences, elementwise, in 64-bit."""
    tensors = [Tensor(p.astype(np.float64), requires_grad=True) for p in params]
    loss = fn(*tensors)
    ad.backward(loss)

    def eval_at(arrays):
        return float(fn(*[Tensor(a.astype(np.float64)) for a in arrays]).data)

    for k, base in enumerate(params):
        numeric = np.zeros(base.size, dtype=np.float64)
        for i in range(base.size):
            bumped_plus = base.reshape(-1).copy()
            bumped_plus[i] += h
            bumped_minus = base.reshape(-1).copy()
            bumped_minus[i] -= h
            args_plus = list(params)
            args_minus = list(params)
            args_plus[k] = bumped_plus.reshape(base.shape)
            args_minus[k] = bumped_minus.reshape(base.shape)
            numeric[i] = (eval_at(args_plus) - eval_at(args_minus)) / (2 * h)
        analytic = tensors[k].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        scale = np.maximum(np.abs(numeric), 1e-3)
        err = np.abs(analytic.reshape(-1) - numeric) / scale
        assert err.max() <= rtol, f"arg {k}: max rel err {err.max()}"


class TestForward:
    def test_logsoftmax_equal_logits(self):
        x = Tensor(np.zeros(5))
        out = ad.log_softmax(x)
        np.testing.assert_allclose(out.data, -np.log(5) * np.ones(5), rtol=1e-12)

    def test_segment_max_singleton_identity(self):
        data = RNG.normal(size=(1, 4))
        out = ad.segment_max(Tensor(data), Segments([1]))
        np.testing.assert_array_equal(out.data, data)

    def test_segment_sum_matches_loop(self):
        counts = [3, 0, 2, 5, 1, 0]
        segs = Segments(counts)
        data = RNG.normal(size=(segs.total, 6))
        out = ad.segment_sum(Tensor(data), segs).data
        start = 0
        for s, c in enumerate(counts):
            expected = data[start : start + c].sum(axis=0) if c else np.zeros(6)
            np.testing.assert_allclose(out[s], expected, rtol=1e-12)
            start += c

    def test_segment_max_empty_is_zero(self):
        segs = Segments([2, 0, 1])
        data = np.array([[1.0], [-5.0], [-2.0]])
        out = ad.segment_max(Tensor(data), segs).data
        np.testing.assert_array_equal(out, [[1.0], [0.0], [-2.0]])

    def test_segment_log_softmax_normalizes(self):
        segs = Segments([3, 1, 4])
        x = RNG.normal(size=segs.total)
        out = ad.segment_log_softmax(Tensor(x), segs).data
        probs = np.exp(out)
        sums = np.add.reduceat(probs, segs.starts[:-1][segs.counts > 0])
        np.testing.assert_allclose(sums, 1.0, atol=1e-12)

    def test_segment_ops_single_segment_match_global(self):
        data = RNG.normal(size=(7, 3))
        segs = Segments([7])
        np.testing.assert_allclose(
            ad.segment_sum(Tensor(data), segs).data[0], data.sum(axis=0), rtol=1e-12
        )
        np.testing.assert_allclose(
            ad.segment_max(Tensor(data), segs).data[0], data.max(axis=0), rtol=1e-12
        )
        np.testing.assert_allclose(
            ad.segment_mean(Tensor(data), segs).data[0], data.mean(axis=0), rtol=1e-12
        )

    def test_matmul_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))

    def test_forward_determinism(self):
        data = RNG.normal(size=(64, 32))
        w = RNG.normal(size=(32, 16))
        a = ad.linear_relu(Tensor(data), Tensor(w), Tensor(np.zeros(16))).data
        b = ad.linear_relu(Tensor(data), Tensor(w), Tensor(np.zeros(16))).data
        assert np.array_equal(a, b)

    def test_gather_rows(self):
        data = RNG.normal(size=(5, 3))
        idx = np.array([4, 0, 0, 2])
        out = ad.gather_rows(Tensor(data), idx).data
        np.testing.assert_array_equal(out, data[idx])


class TestBackward:
    def test_square_gradient(self):
        x = Tensor(np.array([3.0]), requires_grad=True)
        loss = ad.reduce_sum(ad.mul(x, x))
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [6.0])

    def test_relu_gradient_at_negative(self):
        x = Tensor(np.array([-2.0, 5.0]), requires_grad=True)
        ad.backward(ad.reduce_sum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])

    def test_non_scalar_loss_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NonScalarLoss):
            ad.backward(ad.mul(x, 2.0))

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        loss = ad.reduce_sum(ad.add(ad.mul(x, x), x))  # x^2 + x -> 2x + 1
        ad.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])

    @pytest.mark.parametrize("trial", range(20))
    def test_finite_difference_random_shapes(self, trial):
        rng = np.random.default_rng(1000 + trial)
        n = int(rng.integers(2, 7))
        din = int(rng.integers(2, 6))
        dout = int(rng.integers(2, 6))
        x = rng.normal(size=(n, din))
        w = rng.normal(size=(din, dout))
        b = rng.normal(size=dout)
        counts = []
        left = n
        while left > 0:
            c = int(rng.integers(0, left + 1))
            counts.append(c)
            left -= c
        if not counts:
            counts = [0]
        segs = Segments(counts)

        def fn(xt, wt, bt):
            hidden = ad.linear_relu(xt, wt, bt)
            pooled = ad.segment_sum(hidden, segs)
            mx = ad.segment_max(hidden, segs)
            cat = ad.concat([pooled, mx], axis=1)
            lsm = ad.log_softmax(cat, axis=1)
            return ad.reduce_mean(ad.mul(lsm, lsm))

        finite_diff_check(fn, [x, w, b])

    @pytest.mark.parametrize("trial", range(10))
    def test_finite_difference_segment_softmax_path(self, trial):
        rng = np.random.default_rng(2000 + trial)
        r = int(rng.integers(3, 9))
        x = rng.normal(size=(r, 4))
        counts = [r // 2, r - r // 2]
        segs = Segments(counts)

        def fn(xt):
            scores = ad.reduce_sum(ad.mul(xt, xt), axis=1)
            lp = ad.segment_log_softmax(scores, segs)
            probs = ad.exp(lp)
            weighted = ad.mul(ad.reshape(probs, (-1, 1)), xt)
            return ad.reduce_sum(ad.segment_sum(weighted, segs))

        finite_diff_check(fn, [x])

    def test_finite_difference_minimum_clip(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(6,))

        def fn(xt):
            r = ad.exp(xt)
            lo = ad.mul(r, 0.7)
            c = ad.clip(r, 0.8, 1.2)
            return ad.reduce_mean(ad.minimum(ad.mul(r, lo), ad.mul(c, lo)))

        finite_diff_check(fn, [x])

    def test_finite_difference_gather_reuse(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(4, 3))
        idx = np.array([0, 2, 2, 1, 0, 0])

        def fn(xt):
            g = ad.gather_rows(xt, GatherPlan(idx, 4))
            return ad.reduce_sum(ad.mul(g, g))

        finite_diff_check(fn, [x])


class TestAdam:
    def test_first_step_magnitude_is_lr(self):
        store = ParamStore(dtype=np.float64)
        x = store.create("x", (1,), init="zeros")
        x.grad = np.array([1.0])  # d/dx of f(x) = x
        store.adam_step(lr=0.1)
        np.testing.assert_allclose(x.data, [-0.1], atol=1e-9)

    def test_zero_gradient_leaves_params(self):
        store = ParamStore(dtype=np.float64)
        x = store.create("x", (3,), rng=np.random.default_rng(0))
        before = x.data.copy()
        x.grad = np.zeros(3)
        store.adam_step(lr=0.1)
        np.testing.assert_array_equal(x.data, before)

    def test_converges_on_convex_quadratic(self):
        store = ParamStore(dtype=np.float64)
        rng = np.random.default_rng(5)
        x = store.create("x", (4,), rng=rng)
        a = np.array([1.0, 2.0, 0.5, 3.0])
        for _ in range(200):
            t = store["x"]
            loss = ad.reduce_sum(ad.mul(ad.mul(Tensor(a), ad.mul(t, t)), 0.5))
            store.zero_grad()
            ad.backward(loss)
            grad_norm = store.grad_global_norm()
            store.adam_step(lr=0.05)
        assert grad_norm < 1e-3

    def test_gradients_cleared_after_step(self):
        store = ParamStore(dtype=np.float64)
        x = store.create("x", (2,), init="zeros")
        x.grad = np.ones(2)
        store.adam_step(lr=0.1)
        assert x.grad is None

    def test_clip_gradients(self):
        store = ParamStore(dtype=np.float64)
        x = store.create("x", (2,), init="zeros")
        x.grad = np.array([3.0, 4.0])
        norm = store.clip_gradients(0.5)
        assert norm == pytest.approx(5.0)
        np.testing.assert_allclose(np.linalg.norm(x.grad), 0.5)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        store = ParamStore()
        rng = np.random.default_rng(7)
        store.create("a.w", (3, 4), rng=rng)
        store.create("a.b", (4,), init="zeros")
        path = tmp_path / "params.bin"
        store.save(path, {"domain": "gripper", "width": 4})
        loaded, meta = ParamStore.load(path)
        assert meta == {"domain": "gripper", "width": 4}
        assert loaded.names() == ["a.w", "a.b"]
        np.testing.assert_allclose(loaded["a.w"].data, store["a.w"].data, atol=1e-7)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ad.CheckpointError):
            ParamStore.load(path)

    def test_truncated_payload_rejected(self, tmp_path):
        store = ParamStore()
        store.create("w", (8, 8), rng=np.random.default_rng(0))
        path = tmp_path / "trunc.bin"
        store.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 32])
        with pytest.raises(ad.CheckpointError):
            ParamStore.load(path)
