"""Autodiff core: analytic examples, finite-difference oracles, graph contracts."""

import numpy as np
import pytest

from tempotrack import tensor as tt
from tempotrack.tensor import Tensor, ShapeError


def t64(arr, requires_grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


def conv2d_loop_oracle(x, w, b, stride, padding):
    """Direct 6-nested-loop cross-correlation, independent of the library path."""
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    xp = np.zeros((H + 2 * padding, W + 2 * padding, Cin))
    xp[padding : padding + H, padding : padding + W] = x
    y = np.zeros((Ho, Wo, Cout))
    for oi in range(Ho):
        for oj in range(Wo):
            for i in range(kh):
                for j in range(kw):
                    for ci in range(Cin):
                        for co in range(Cout):
                            y[oi, oj, co] += xp[oi * stride + i, oj * stride + j, ci] * w[i, j, ci, co]
    return y + b


def conv_transpose2d_loop_oracle(x, w, b, stride, padding, output_padding):
    H, W, Cin = x.shape
    kh, kw, _, Cout = w.shape
    Hf = (H - 1) * stride + kh + output_padding
    Wf = (W - 1) * stride + kw + output_padding
    yf = np.zeros((Hf, Wf, Cout))
    for oi in range(H):
        for oj in range(W):
            for i in range(kh):
                for j in range(kw):
                    for ci in range(Cin):
                        for co in range(Cout):
                            yf[oi * stride + i, oj * stride + j, co] += x[oi, oj, ci] * w[i, j, ci, co]
    return yf[padding : Hf - 2 * padding + padding, padding : Wf - 2 * padding + padding] + b


class TestConv2d:
    def test_identity_kernel(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((5, 5, 3)))
        w = np.zeros((1, 1, 3, 3), dtype=np.float32)
        w[0, 0] = np.eye(3)
        y = tt.conv2d(x, Tensor(w), Tensor(np.zeros(3, dtype=np.float32)), stride=1, padding=0)
        np.testing.assert_allclose(y.data, x.data, atol=0)

    def test_ones_kernel_sums(self):
        x = Tensor(np.ones((3, 3, 1), dtype=np.float32))
        w = Tensor(np.ones((3, 3, 1, 1), dtype=np.float32))
        y = tt.conv2d(x, w, None, stride=1, padding=1)
        assert y.data[1, 1, 0] == pytest.approx(9.0)
        assert y.data[0, 0, 0] == pytest.approx(4.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 5, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        b = rng.standard_normal(4)
        got = tt.conv2d(t64(x, False), t64(w, False), t64(b, False), stride=2, padding=0)
        want = conv2d_loop_oracle(x, w, b, stride=2, padding=0)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_shape_errors_name_axes(self):
        x = Tensor(np.zeros((4, 4, 3)))
        w = Tensor(np.zeros((3, 3, 2, 4)))
        with pytest.raises(ShapeError, match="channel"):
            tt.conv2d(x, w)
        with pytest.raises(ShapeError, match="odd"):
            tt.conv2d(x, Tensor(np.zeros((2, 2, 3, 4))))

    def test_batched_matches_per_frame(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 6, 6, 2)).astype(np.float32)
        w = Tensor(rng.standard_normal((3, 3, 2, 5)).astype(np.float32))
        b = Tensor(rng.standard_normal(5).astype(np.float32))
        batched = tt.conv2d(Tensor(x), w, b, stride=1, padding=1)
        for t in range(4):
            single = tt.conv2d(Tensor(x[t]), w, b, stride=1, padding=1)
            np.testing.assert_allclose(batched.data[t], single.data, atol=1e-6)


class TestConvTranspose2d:
    def test_zero_weights_zero_output(self):
        x = Tensor(np.ones((4, 4, 2), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 2, 5), dtype=np.float32))
        y = tt.conv_transpose2d(x, w, None, stride=2, padding=1, output_padding=1)
        assert y.data.shape == (8, 8, 5)
        assert np.all(y.data == 0)

    def test_stride1_identity_kernel(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((5, 5, 3)).astype(np.float32))
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        w[1, 1] = np.eye(3)
        y = tt.conv_transpose2d(x, Tensor(w), None, stride=1, padding=1)
        np.testing.assert_allclose(y.data, x.data, atol=1e-7)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((3, 3, 2))
        w = rng.standard_normal((3, 3, 2, 4))
        b = rng.standard_normal(4)
        got = tt.conv_transpose2d(t64(x, False), t64(w, False), t64(b, False), stride=2, padding=1, output_padding=1)
        want = conv_transpose2d_loop_oracle(x, w, b, stride=2, padding=1, output_padding=1)
        assert got.data.shape == (6, 6, 4)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_adjoint_of_conv2d(self):
        # <conv(x), y> == <x, conv_transpose(y)> on matching geometry
        rng = np.random.default_rng(5)
        x = rng.standard_normal((8, 8, 3))
        y = rng.standard_normal((4, 4, 5))
        w = rng.standard_normal((3, 3, 3, 5))
        cx = tt.conv2d(t64(x, False), t64(w, False), None, stride=2, padding=1)
        wt = np.ascontiguousarray(w.transpose(0, 1, 3, 2))  # adjoint swaps channel axes
        cty = tt.conv_transpose2d(t64(y, False), t64(wt, False), None, stride=2, padding=1, output_padding=1)
        assert cx.data.shape == y.shape and cty.data.shape == x.shape
        assert float((cx.data * y).sum()) == pytest.approx(float((x * cty.data).sum()), rel=1e-10)


class TestElementwise:
    def test_softmax_symmetry(self):
        y = tt.softmax(Tensor([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(y.data, [1 / 3] * 3, atol=1e-7)

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x = Tensor(rng.standard_normal((3, 7)) * 50)
            y = tt.softmax(x, tau=2.5)
            assert np.all(y.data >= 0)
            np.testing.assert_allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_layernorm_constant_input(self):
        x = Tensor(np.full((4, 8), 3.7, dtype=np.float32))
        g = Tensor(np.ones(8, dtype=np.float32))
        b = Tensor(np.zeros(8, dtype=np.float32))
        y = tt.layernorm(x, g, b)
        np.testing.assert_allclose(y.data, 0.0, atol=1e-6)

    def test_gelu_zero(self):
        assert tt.gelu(Tensor([0.0])).data[0] == 0.0

    def test_l2_normalize_zero_vector(self):
        y = tt.l2_normalize(Tensor(np.zeros((2, 4))))
        assert np.all(y.data == 0)


class TestBilinear:
    def test_lattice_point(self):
        rng = np.random.default_rng(0)
        f = Tensor(rng.standard_normal((5, 6, 3)))
        y = tt.bilinear_sample2d(f, 2.0, 3.0)
        np.testing.assert_allclose(y.data, f.data[3, 2], atol=0)

    def test_midpoint(self):
        f = np.zeros((1, 2, 1), dtype=np.float32)
        f[0, 1, 0] = 1.0
        y = tt.bilinear_sample2d(Tensor(f), 0.5, 0.0)
        assert y.data[0] == pytest.approx(0.5)

    def test_closed_form_oracle(self):
        rng = np.random.default_rng(9)
        f = rng.standard_normal((5, 5, 4))
        x, y = 1.3, 2.8
        x0, y0 = int(x), int(y)
        fx, fy = x - x0, y - y0
        want = (
            (1 - fx) * (1 - fy) * f[y0, x0]
            + fx * (1 - fy) * f[y0, x0 + 1]
            + (1 - fx) * fy * f[y0 + 1, x0]
            + fx * fy * f[y0 + 1, x0 + 1]
        )
        got = tt.bilinear_sample2d(t64(f, False), x, y)
        np.testing.assert_allclose(got.data, want, atol=1e-6)

    def test_clamps_to_border(self):
        f = Tensor(np.arange(12, dtype=np.float32).reshape(3, 4, 1))
        inside = tt.bilinear_sample2d(f, 3.0, 2.0)
        outside = tt.bilinear_sample2d(f, 99.0, 99.0)
        np.testing.assert_allclose(outside.data, inside.data)

    def test_nonfinite_rejected(self):
        f = Tensor(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError, match="finite"):
            tt.bilinear_sample2d(f, float("nan"), 0.0)

    def test_gather_matches_single(self):
        rng = np.random.default_rng(4)
        f = Tensor(rng.standard_normal((3, 5, 5, 4)))
        xs = rng.uniform(0, 4, size=6)
        ys = rng.uniform(0, 4, size=6)
        ts = rng.integers(0, 3, size=6)
        got = tt.bilinear_gather(f, ts, xs, ys)
        for i in range(6):
            single = tt.bilinear_sample2d(tt.getitem(f, int(ts[i])), xs[i], ys[i])
            np.testing.assert_allclose(got.data[i], single.data, atol=1e-6)


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = t64(np.random.default_rng(0).standard_normal((3, 4)))
        tt.tsum(x).backward()
        np.testing.assert_allclose(x.grad, np.ones((3, 4)), atol=0)

    def test_half_square_grad_is_x(self):
        x = t64(np.random.default_rng(1).standard_normal(10))
        loss = tt.scale(tt.tsum(tt.mul(x, x)), 0.5)
        loss.backward()
        np.testing.assert_allclose(x.grad, x.data, atol=1e-9)

    def test_non_scalar_root_rejected(self):
        x = t64(np.zeros((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            (x + x).backward()

    def test_repeated_backward_accumulates(self):
        x = t64([1.0, 2.0])
        loss = tt.tsum(x)
        loss.backward()
        loss.backward()
        np.testing.assert_allclose(x.grad, [2.0, 2.0])

    def test_backward_deterministic_after_zeroing(self):
        rng = np.random.default_rng(2)
        x = t64(rng.standard_normal((4, 4, 2)))
        w = t64(rng.standard_normal((3, 3, 2, 3)))
        with tt.fresh_graph() as g:
            loss = tt.tsum(tt.softmax(tt.conv2d(x, w, None, stride=1, padding=1)))
            loss.backward()
            first = x.grad.copy()
            g.zero_grads()
            loss.backward()
            np.testing.assert_array_equal(x.grad, first)

    def test_composite_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        w = t64(rng.standard_normal((3, 3, 2, 3)), requires_grad=False)

        def f(x):
            return tt.tsum(tt.softmax(tt.conv2d(x, w, None, stride=1, padding=1), tau=1.5))

        x = t64(rng.standard_normal((4, 4, 2)))
        assert tt.grad_check(f, x, eps=1e-4) < 1e-4

    def test_no_grad_blocks_recording(self):
        x = t64([1.0, 2.0])
        with tt.no_grad():
            y = tt.tsum(tt.mul(x, x))
        assert not y.requires_grad


def _shapes(rng, k, lo=1, hi=5):
    return tuple(int(rng.integers(lo, hi + 1)) for _ in range(k))


@pytest.mark.parametrize("seed", range(5))
class TestGradChecks:
    """Every primitive against central differences on random shapes (f64)."""

    def test_add_mul_sub(self, seed):
        rng = np.random.default_rng(seed)
        shape = _shapes(rng, 2)
        other = t64(rng.standard_normal(shape), requires_grad=False)
        x = t64(rng.standard_normal(shape))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.add(a, other), tt.sub(a, other))), x) < 1e-6

    def test_linear(self, seed):
        rng = np.random.default_rng(10 + seed)
        cin, cout = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        w = t64(rng.standard_normal((cin, cout)), requires_grad=False)
        b = t64(rng.standard_normal(cout), requires_grad=False)
        x = t64(rng.standard_normal((3, cin)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.linear(a, w, b), tt.linear(a, w, b))), x) < 1e-6
        wp = t64(rng.standard_normal((cin, cout)))
        xc = t64(rng.standard_normal((3, cin)), requires_grad=False)
        assert tt.grad_check(lambda v: tt.tsum(tt.gelu(tt.linear(xc, v, b))), wp) < 1e-4

    def test_matmul(self, seed):
        rng = np.random.default_rng(20 + seed)
        b_ = t64(rng.standard_normal((2, 3, 4)), requires_grad=False)
        x = t64(rng.standard_normal((2, 5, 3)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.matmul(a, b_), tt.matmul(a, b_))), x) < 1e-4

    def test_softmax(self, seed):
        rng = np.random.default_rng(30 + seed)
        co = t64(rng.standard_normal((3, 6)), requires_grad=False)
        x = t64(rng.standard_normal((3, 6)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.softmax(a, tau=3.0), co)), x) < 1e-4

    def test_layernorm(self, seed):
        rng = np.random.default_rng(40 + seed)
        c = int(rng.integers(3, 8))
        g = t64(rng.standard_normal(c), requires_grad=False)
        b = t64(rng.standard_normal(c), requires_grad=False)
        co = t64(rng.standard_normal((4, c)), requires_grad=False)
        x = t64(rng.standard_normal((4, c)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.layernorm(a, g, b), co)), x) < 1e-4

    def test_gelu(self, seed):
        rng = np.random.default_rng(50 + seed)
        co = t64(rng.standard_normal(12), requires_grad=False)
        x = t64(rng.standard_normal(12))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.gelu(a), co)), x) < 1e-4

    def test_conv2d(self, seed):
        rng = np.random.default_rng(60 + seed)
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        H = int(rng.integers(3, 6))
        H = H + (H + 2 - 3) % stride  # keep output extent integral
        w = t64(rng.standard_normal((3, 3, cin, cout)), requires_grad=False)
        b = t64(rng.standard_normal(cout), requires_grad=False)
        co = None

        def f(a):
            return tt.tsum(tt.mul(tt.conv2d(a, w, b, stride=stride, padding=1),
                                  tt.conv2d(a, w, b, stride=stride, padding=1)))

        x = t64(rng.standard_normal((H, H, cin)))
        assert tt.grad_check(f, x) < 1e-4
        xc = t64(rng.standard_normal((H, H, cin)), requires_grad=False)
        wp = t64(rng.standard_normal((3, 3, cin, cout)))
        assert tt.grad_check(lambda v: tt.tsum(tt.gelu(tt.conv2d(xc, v, b, stride=stride, padding=1))), wp) < 1e-4

    def test_conv_transpose2d(self, seed):
        rng = np.random.default_rng(70 + seed)
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        w = t64(rng.standard_normal((3, 3, cin, cout)), requires_grad=False)
        x = t64(rng.standard_normal((3, 3, cin)))

        def f(a):
            y = tt.conv_transpose2d(a, w, None, stride=2, padding=1, output_padding=1)
            return tt.tsum(tt.mul(y, y))

        assert tt.grad_check(f, x) < 1e-4
        xc = t64(rng.standard_normal((3, 3, cin)), requires_grad=False)
        wp = t64(rng.standard_normal((3, 3, cin, cout)))
        assert tt.grad_check(lambda v: tt.tsum(tt.gelu(tt.conv_transpose2d(xc, v, None, stride=2, padding=1, output_padding=1))), wp) < 1e-4

    def test_conv3d(self, seed):
        rng = np.random.default_rng(80 + seed)
        c = int(rng.integers(1, 3))
        w = t64(rng.standard_normal((3, 3, 3, c, c)), requires_grad=False)
        x = t64(rng.standard_normal((4, 3, 3, c)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.conv3d(a, w, None, pad_t=1, pad_s=1),
                                                      tt.conv3d(a, w, None, pad_t=1, pad_s=1))), x) < 1e-4

    def test_dwconv1d_time(self, seed):
        rng = np.random.default_rng(90 + seed)
        c = int(rng.integers(1, 4))
        w = t64(rng.standard_normal((3, c)), requires_grad=False)
        x = t64(rng.standard_normal((5, 2, 2, c)))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.dwconv1d_time(a, w), tt.dwconv1d_time(a, w))), x) < 1e-4

    def test_bilinear(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = t64(rng.standard_normal((4, 4, 3)))
        px, py = rng.uniform(0, 3, size=2)
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.bilinear_sample2d(a, px, py),
                                                      tt.bilinear_sample2d(a, px, py))), x) < 1e-4

    def test_l2_normalize(self, seed):
        rng = np.random.default_rng(110 + seed)
        co = t64(rng.standard_normal((3, 5)), requires_grad=False)
        x = t64(rng.standard_normal((3, 5)) + 0.5)
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(tt.l2_normalize(a), co)), x) < 1e-4


class TestGradCheckHarness:
    def test_linear_map_nearly_exact(self):
        rng = np.random.default_rng(0)
        c = t64(rng.standard_normal(8), requires_grad=False)
        x = t64(rng.standard_normal(8))
        assert tt.grad_check(lambda a: tt.tsum(tt.mul(a, c)), x) < 1e-8

    def test_corrupted_gradient_detected(self):
        # negative control: a forward with a deliberately wrong backward
        def broken(x):
            data = x.data * 3.0

            def backfn(g):
                return (g * 2.0,)  # wrong: true jacobian is 3

            return tt._out(data, (x,), backfn)

        x = t64(np.random.default_rng(1).standard_normal(6))
        assert tt.grad_check(lambda a: tt.tsum(broken(a)), x) > 1e-2


class TestHuberLoss:
    def test_quadratic_branch(self):
        p = t64(np.array([[[0.5, 0.0]]]))
        loss = tt.huber_track_loss(p, np.array([[[0.0, 0.0]]]), np.array([[True]]), delta=1.0)
        assert loss.item() == pytest.approx(0.125)

    def test_linear_branch(self):
        p = t64(np.array([[[3.0, 0.0]]]))
        loss = tt.huber_track_loss(p, np.array([[[0.0, 0.0]]]), np.array([[True]]), delta=1.0)
        assert loss.item() == pytest.approx(2.5)

    def test_occluded_frames_zero_gradient(self):
        rng = np.random.default_rng(0)
        p = t64(rng.standard_normal((2, 4, 2)) * 10)
        g = rng.standard_normal((2, 4, 2))
        vis = np.array([[True, False, True, False], [False, False, True, True]])
        loss = tt.huber_track_loss(p, g, vis, delta=1.0)
        loss.backward()
        assert np.all(p.grad[~vis] == 0)
        assert np.any(p.grad[vis] != 0)

    def test_all_occluded_is_zero(self):
        p = t64(np.ones((1, 3, 2)) * 100)
        loss = tt.huber_track_loss(p, np.zeros((1, 3, 2)), np.zeros((1, 3), dtype=bool), delta=1.0)
        loss.backward()
        assert loss.item() == 0.0
        assert np.all(p.grad == 0)

    def test_grad_matches_fd(self):
        rng = np.random.default_rng(5)
        gts = rng.standard_normal((3, 4, 2))
        vis = rng.random((3, 4)) > 0.3
        x = t64(rng.standard_normal((3, 4, 2)) * 2)
        assert tt.grad_check(lambda a: tt.huber_track_loss(a, gts, vis, delta=1.0), x) < 1e-4
