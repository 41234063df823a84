"""Autodiff engine: forward values, analytic gradients, determinism."""

import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.integrate import quad

from quantlm import tensor as T
from quantlm.exceptions import (
    DegenerateInputError,
    MissingDependencyError,
    NumericalError,
    ShapeError,
)


def t64(data, requires_grad=False):
    return T.Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


def fd_grad(f, x: T.Tensor, step=1e-4):
    """Central finite differences of scalar f() w.r.t. x, in place."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gf = g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + step
        hi = f().item()
        flat[j] = orig - step
        lo = f().item()
        flat[j] = orig
        gf[j] = (hi - lo) / (2.0 * step)
    return g


class TestMatmul:
    def test_identity(self):
        out = T.matmul(T.Tensor([[1.0, 0.0], [0.0, 1.0]]), T.Tensor([[3.0], [4.0]]))
        assert_allclose(out.data, [[3.0], [4.0]])

    def test_row_times_column(self):
        out = T.matmul(T.Tensor([[1.0, 2.0]]), T.Tensor([[3.0], [4.0]]))
        assert_allclose(out.data, [[11.0]])

    def test_matches_naive_loops(self):
        rng = np.random.default_rng(7)
        a = rng.standard_normal((5, 7)).astype(np.float32)
        b = rng.standard_normal((7, 3)).astype(np.float32)
        want = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    want[i, j] += float(a[i, k]) * float(b[k, j])
        got = T.matmul(T.Tensor(a), T.Tensor(b)).data
        assert_allclose(got, want, rtol=1e-6, atol=1e-6)

    def test_batched(self):
        rng = np.random.default_rng(8)
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 4, 5))
        got = T.matmul(t64(a), t64(b)).data
        assert_allclose(got, a @ b, rtol=1e-12)

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))

    def test_batch_dim_mismatch(self):
        with pytest.raises(ShapeError):
            T.matmul(T.Tensor(np.ones((2, 3, 4))), T.Tensor(np.ones((3, 4, 5))))


class TestGelu:
    def test_zero(self):
        assert T.gelu(T.Tensor(0.0)).item() == 0.0

    def test_at_one_matches_normal_cdf(self):
        # integrate the standard normal density as an independent route
        phi1 = 0.5 + quad(lambda u: np.exp(-0.5 * u * u) / np.sqrt(2 * np.pi), 0.0, 1.0)[0]
        got = T.gelu(t64([1.0])).data[0]
        assert_allclose(got, 1.0 * phi1, rtol=1e-10)
        assert_allclose(got, 0.8413, atol=5e-5)

    @given(st.floats(min_value=-8, max_value=8, allow_nan=False))
    def test_odd_part_is_identity(self, x):
        # x*Phi(x) + (-x)*Phi(-x) == x exactly for the erf form
        lhs = T.gelu(t64([x])).data[0] - T.gelu(t64([-x])).data[0]
        assert_allclose(lhs, x, rtol=1e-12, atol=1e-12)


class TestLayerNorm:
    def test_constant_input_collapses_to_bias(self):
        out = T.layer_norm(T.Tensor([1.0, 1.0, 1.0]), T.Tensor([1.0] * 3), T.Tensor([0.0] * 3))
        assert_allclose(out.data, [0.0, 0.0, 0.0], atol=1e-7)

    def test_two_point_case(self):
        out = T.layer_norm(T.Tensor([1.0, -1.0]), T.Tensor([1.0, 1.0]), T.Tensor([0.0, 0.0]))
        assert_allclose(out.data, [1.0, -1.0], atol=1e-5)

    def test_normalizes_statistics(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(8) * 4 + 2
        out = T.layer_norm(t64(x), t64(np.ones(8)), t64(np.zeros(8))).data
        assert abs(out.mean()) < 1e-5
        assert abs(out.var() - 1.0) < 1e-4

    def test_affine_applied(self):
        rng = np.random.default_rng(4)
        x, g, b = rng.standard_normal((3, 6))
        plain = T.layer_norm(t64(x), t64(np.ones(6)), t64(np.zeros(6))).data
        out = T.layer_norm(t64(x), t64(g), t64(b)).data
        assert_allclose(out, g * plain + b, rtol=1e-10, atol=1e-12)

    def test_single_feature_rejected(self):
        with pytest.raises(DegenerateInputError):
            T.layer_norm(T.Tensor([5.0]), T.Tensor([1.0]), T.Tensor([0.0]))


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = T.cross_entropy(t64(np.zeros(10)), 3)
        assert_allclose(loss.item(), np.log(10.0), rtol=1e-12)

    def test_saturated_target(self):
        logits = np.zeros(6)
        logits[2] = 1000.0
        loss = T.cross_entropy(t64(logits), 2)
        assert abs(loss.item()) < 1e-9

    def test_matches_extended_precision(self):
        rng = np.random.default_rng(11)
        logits = rng.standard_normal(5) * 3
        x = logits.astype(np.longdouble)
        want = float(np.log(np.exp(x - x.max()).sum()) + x.max() - x[4])
        got = T.cross_entropy(t64(logits), 4).item()
        assert_allclose(got, want, rtol=1e-6)

    def test_batched_rows(self):
        rng = np.random.default_rng(12)
        logits = rng.standard_normal((4, 7))
        targets = [0, 3, 6, 2]
        got = T.cross_entropy(t64(logits), targets).data
        want = [T.cross_entropy(t64(logits[i]), t).item() for i, t in enumerate(targets)]
        assert_allclose(got, want, rtol=1e-12)

    def test_target_out_of_range(self):
        with pytest.raises(IndexError):
            T.cross_entropy(T.Tensor(np.zeros(4)), 4)


class TestSoftmax:
    @settings(max_examples=50)
    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=9))
    def test_rows_sum_to_one(self, row):
        p = T.softmax(T.Tensor(np.asarray(row, dtype=np.float32))).data
        assert abs(p.sum() - 1.0) < 1e-6
        assert (p >= 0).all()

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 4.0])
        a = T.softmax(t64(x)).data
        b = T.softmax(t64(x + 100.0)).data
        assert_allclose(a, b, rtol=1e-12)


class TestGradientApi:
    def test_sum_gives_ones(self):
        w = T.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        (g,) = T.gradient(T.tsum(w), [w])
        assert_allclose(g, np.ones((2, 3)))

    def test_quadratic_gives_2w(self):
        w = t64([1.5, -2.0, 0.25])
        w.requires_grad = True
        loss = T.tsum(T.mul(w, w))
        (g,) = T.gradient(loss, [w])
        assert_allclose(g, 2 * w.data, rtol=1e-12)

    def test_missing_dependency(self):
        w = T.Tensor([1.0], requires_grad=True)
        other = T.Tensor([1.0], requires_grad=True)
        loss = T.tsum(w)
        with pytest.raises(MissingDependencyError):
            T.gradient(loss, [other])

    def test_backward_accumulates_into_leaves(self):
        w = T.Tensor([2.0, 3.0], requires_grad=True)
        T.tsum(T.mul(w, w)).backward()
        assert_allclose(w.grad, [4.0, 6.0], rtol=1e-6)
        T.tsum(w).backward()
        assert_allclose(w.grad, [5.0, 7.0], rtol=1e-6)

    def test_tiny_net_matches_finite_differences(self):
        rng = np.random.default_rng(21)
        W1 = t64(rng.standard_normal((4, 5)) * 0.3, requires_grad=True)
        b1 = t64(rng.standard_normal(5) * 0.1, requires_grad=True)
        W2 = t64(rng.standard_normal((5, 3)) * 0.3, requires_grad=True)
        x = t64(rng.standard_normal((2, 4)))

        def loss():
            h = T.gelu(T.add(T.matmul(x, W1), b1))
            return T.cross_entropy(T.matmul(h, W2), [0, 2]).mean()

        grads = T.gradient(loss(), [W1, b1, W2])
        for p, g in zip([W1, b1, W2], grads):
            assert_allclose(g, fd_grad(loss, p), rtol=1e-4, atol=1e-7)


def _linear_probe(out: T.Tensor, rng) -> T.Tensor:
    c = T.Tensor(np.asarray(rng.standard_normal(out.data.shape), dtype=np.float64))
    return T.tsum(T.mul(out, c))


def _case_matmul(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    b = t64(rng.standard_normal((4, 2)), requires_grad=True)
    return [a, b], lambda: T.matmul(a, b)


def _case_add(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    b = t64(rng.standard_normal(4), requires_grad=True)
    return [a, b], lambda: T.add(a, b)


def _case_sub(rng):
    a = t64(rng.standard_normal((2, 5)), requires_grad=True)
    b = t64(rng.standard_normal((2, 1)), requires_grad=True)
    return [a, b], lambda: T.sub(a, b)


def _case_mul(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    b = t64(rng.standard_normal((3, 4)), requires_grad=True)
    return [a, b], lambda: T.mul(a, b)


def _case_scale(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    return [a], lambda: T.scale(a, -1.7)


def _case_concat(rng):
    a = t64(rng.standard_normal((2, 3)), requires_grad=True)
    b = t64(rng.standard_normal((4, 3)), requires_grad=True)
    return [a, b], lambda: T.concat([a, b], axis=0)


def _case_reshape(rng):
    a = t64(rng.standard_normal((2, 6)), requires_grad=True)
    return [a], lambda: T.reshape(a, (3, 4))


def _case_transpose(rng):
    a = t64(rng.standard_normal((2, 3, 4)), requires_grad=True)
    return [a], lambda: T.transpose(a, (1, 0, 2))


def _case_slice_rows(rng):
    a = t64(rng.standard_normal((5, 3)), requires_grad=True)
    return [a], lambda: T.slice_rows(a, 1, 4)


def _case_take_rows(rng):
    a = t64(rng.standard_normal((6, 3)), requires_grad=True)
    idx = rng.integers(0, 6, size=5)  # repeats exercise scatter-add
    return [a], lambda: T.take_rows(a, idx)


def _case_gelu(rng):
    a = t64(rng.standard_normal((3, 4)) * 2, requires_grad=True)
    return [a], lambda: T.gelu(a)


def _case_layer_norm(rng):
    x = t64(rng.standard_normal((2, 5)), requires_grad=True)
    g = t64(rng.standard_normal(5), requires_grad=True)
    b = t64(rng.standard_normal(5), requires_grad=True)
    return [x, g, b], lambda: T.layer_norm(x, g, b)


def _case_softmax(rng):
    a = t64(rng.standard_normal((2, 4)) * 2, requires_grad=True)
    return [a], lambda: T.softmax(a)


def _case_cross_entropy(rng):
    a = t64(rng.standard_normal((3, 5)), requires_grad=True)
    idx = rng.integers(0, 5, size=3)
    return [a], lambda: T.cross_entropy(a, idx)


def _case_sum(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    return [a], lambda: T.tsum(a)


def _case_mean(rng):
    a = t64(rng.standard_normal((3, 4)), requires_grad=True)
    return [a], lambda: T.tmean(a)


GRADCHECK_CASES = {
    "matmul": _case_matmul,
    "add": _case_add,
    "sub": _case_sub,
    "mul": _case_mul,
    "scale": _case_scale,
    "concat": _case_concat,
    "reshape": _case_reshape,
    "transpose": _case_transpose,
    "slice_rows": _case_slice_rows,
    "take_rows": _case_take_rows,
    "gelu": _case_gelu,
    "layer_norm": _case_layer_norm,
    "softmax": _case_softmax,
    "cross_entropy": _case_cross_entropy,
    "sum": _case_sum,
    "mean": _case_mean,
}


@pytest.mark.parametrize("name", sorted(GRADCHECK_CASES))
def test_gradcheck_every_primitive(name):
    # 100 fresh instances per primitive, analytic vs central differences
    base = zlib.crc32(name.encode())
    for i in range(100):
        rng = np.random.default_rng(base + i)
        params, op = GRADCHECK_CASES[name](rng)
        probe_rng = np.random.default_rng(base + 10_000 + i)
        c = np.asarray(probe_rng.standard_normal(op().data.shape), dtype=np.float64)

        def loss():
            return T.tsum(T.mul(op(), T.Tensor(c)))

        grads = T.gradient(loss(), params)
        for p, g in zip(params, grads):
            assert_allclose(g, fd_grad(loss, p), rtol=1e-4, atol=1e-7, err_msg=name)


class TestSgd:
    def test_basic_step(self):
        w = T.Tensor([1.0])
        out = T.sgd_update(w, T.Tensor([1.0]), lr=0.1)
        assert_allclose(out.data, [0.9], rtol=1e-7)

    def test_zero_gradient_fixed_point(self):
        w = T.Tensor([0.5, -0.5])
        out = T.sgd_update(w, T.Tensor([0.0, 0.0]), lr=0.3)
        assert_allclose(out.data, w.data)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.sgd_update(T.Tensor([1.0, 2.0]), T.Tensor([1.0]), lr=0.1)

    def test_clip_rescales_to_threshold(self):
        g = np.array([3.0, 4.0])  # norm 5
        clipped, factor = T.clip_by_global_norm([g], max_norm=1.0)
        assert_allclose(factor, 0.2)
        assert_allclose(clipped[0], g / 5.0, rtol=1e-12)

    def test_clip_noop_under_threshold(self):
        g = np.array([0.3, 0.4])
        clipped, factor = T.clip_by_global_norm([g], max_norm=1.0)
        assert factor == 1.0
        assert_allclose(clipped[0], g)

    def test_inplace_step_with_clipping(self):
        w = T.Tensor(np.zeros(2), requires_grad=True)
        w.grad = np.array([3.0, 4.0], dtype=np.float32)
        norm = T.sgd_step([w], lr=1.0, clip_norm=1.0)
        assert_allclose(norm, 5.0, rtol=1e-6)
        assert_allclose(w.data, [-0.6, -0.8], rtol=1e-6)


class TestDeterminism:
    def _run(self):
        rng = np.random.default_rng(99)
        x = T.Tensor(rng.standard_normal((4, 6)).astype(np.float32), requires_grad=True)
        w = T.Tensor(rng.standard_normal((6, 5)).astype(np.float32), requires_grad=True)
        h = T.gelu(T.matmul(x, w))
        loss = T.cross_entropy(T.layer_norm(h, T.Tensor(np.ones(5)), T.Tensor(np.zeros(5))), [0, 1, 2, 3]).mean()
        gx, gw = T.gradient(loss, [x, w])
        return loss.item(), gx.tobytes(), gw.tobytes()

    def test_bit_identical_replay(self):
        assert self._run() == self._run()


class TestCheckedMode:
    def test_nan_raises(self):
        with T.checked():
            with pytest.raises(NumericalError):
                T.Tensor([np.nan])

    def test_overflow_product_raises(self):
        big = T.Tensor(np.full((2, 2), 1e30, dtype=np.float32))
        with T.checked(), np.errstate(over="ignore"):
            with pytest.raises(NumericalError):
                T.mul(big, big)

    def test_unchecked_passes_through(self):
        with np.errstate(over="ignore"):
            out = T.mul(T.Tensor(np.full(2, 1e30, dtype=np.float32)), T.Tensor(np.full(2, 1e30, dtype=np.float32)))
        assert np.isinf(out.data).all()


class TestNoGrad:
    def test_blocks_graph_construction(self):
        w = T.Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.scale(w, 2.0)
        assert not out.requires_grad

    def test_restores_state(self):
        with T.no_grad():
            pass
        w = T.Tensor([1.0], requires_grad=True)
        assert T.scale(w, 2.0).requires_grad
