import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stainlab import _kernels, core
from stainlab.errors import DegenerateInputError, DimensionError, EvaluationError


def naive_conv(x, k):
    """Plain-loop cross-correlation, 'valid' region."""
    kh, kw, cin, cout = k.shape
    h, w = x.shape[0] - kh + 1, x.shape[1] - kw + 1
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for o in range(cout):
                out[i, j, o] = np.sum(x[i : i + kh, j : j + kw, :] * k[:, :, :, o])
    return out


class TestConv:
    def test_valid_matches_loop(self, rng):
        x = rng.normal(size=(7, 6, 2))
        k = rng.normal(size=(3, 3, 2, 4))
        np.testing.assert_allclose(core.conv2d(x, k, padding="valid"), naive_conv(x, k), atol=1e-12)

    def test_same_keeps_shape(self, rng):
        x = rng.normal(size=(9, 5, 3))
        k = rng.normal(size=(3, 3, 3, 2))
        out = core.conv2d(x, k)
        assert out.shape == (9, 5, 2)
        # interior of 'same' equals 'valid'
        np.testing.assert_allclose(out[1:-1, 1:-1], core.conv2d(x, k, padding="valid"), atol=1e-12)

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(5, 5, 1))
        k = np.zeros((3, 3, 1, 1))
        k[1, 1, 0, 0] = 1.0
        np.testing.assert_allclose(core.conv2d(x, k), x)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            core.conv2d(np.zeros((4, 4, 2)), np.zeros((3, 3, 3, 1)))

    @settings(max_examples=25, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
    def test_linearity(self, a, b, seed):
        r = np.random.default_rng(seed)
        x, y = r.normal(size=(2, 6, 6, 2))
        k = r.normal(size=(3, 3, 2, 1))
        lhs = core.conv2d(a * x + b * y, k)
        rhs = a * core.conv2d(x, k) + b * core.conv2d(y, k)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)


class TestPoolingAndNorms:
    def test_pooling(self, rng):
        x = rng.normal(size=(4, 3, 2))
        for c in range(2):
            vals = [x[i, j, c] for i in range(4) for j in range(3)]
            assert core.avg_pool_global(x)[c] == pytest.approx(sum(vals) / len(vals), abs=1e-14)
            assert core.max_pool_global(x)[c] == max(vals)

    def test_instance_norm_small_case(self):
        x = np.array([1.0, 3.0]).reshape(1, 2, 1)
        out = core.instance_norm(x, eps=1e-12)
        np.testing.assert_allclose(out.ravel(), [-1.0, 1.0], atol=1e-9)

    def test_layer_norm_stats(self, rng):
        x = rng.normal(3.0, 5.0, size=(6, 6, 4))
        out = core.layer_norm(x)
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 1e-6

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            core.instance_norm(np.ones((2, 2, 1)), eps=0.0)


class TestSoftmaxCosine:
    def test_known_value(self):
        s = 0.7
        out = core.softmax(np.array([s, s + np.log(3.0)]))
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-14)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (5,), elements=st.floats(-50, 50)), st.floats(-100, 100))
    def test_sum_and_shift(self, s, c):
        p = core.softmax(s)
        assert abs(p.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(core.softmax(s + c), p, atol=1e-12)

    def test_cosine(self):
        assert core.cosine_sim([1, 0], [0, 2]) == 0.0
        assert core.cosine_sim([1, 1], [3, 3]) == pytest.approx(1.0)
        assert core.cosine_sim([1, 2], [-1, -2]) == pytest.approx(-1.0)

    def test_cosine_zero_vector(self):
        with pytest.raises(DegenerateInputError):
            core.cosine_sim([0, 0], [1, 2])

    def test_sigmoid_extremes(self):
        out = core.sigmoid(np.array([-800.0, 0.0, 800.0]))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0])
        assert np.all(np.isfinite(out))


class TestFiniteDiff:
    def test_quadratic(self, rng):
        x = rng.normal(size=10)
        assert core.finite_diff_check(lambda v: float(v @ v), x, 2 * x) < 1e-8

    def test_detects_wrong_gradient(self, rng):
        x = rng.normal(size=10)
        assert core.finite_diff_check(lambda v: float(v @ v), x, 3 * x) > 1e-2

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            core.finite_diff_check(lambda v: 0.0, np.zeros(2), np.zeros(2), h=1e-2)

    def test_non_finite(self):
        with pytest.raises(EvaluationError):
            core.finite_diff_check(lambda v: float("nan"), np.zeros(2), np.zeros(2))


class TestFilters:
    def test_gaussian_taps_normalized(self):
        t = core.gaussian_taps(7, 1.4)
        assert t.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(t, t[::-1])

    def test_blur_sigma_rule(self):
        assert core.blur_sigma(3) == pytest.approx(0.8)
        assert core.blur_sigma(5) == pytest.approx(1.1)
        assert core.blur_sigma(7) == pytest.approx(1.4)

    @pytest.mark.parametrize("mode", ["valid", "reflect"])
    def test_adjoint(self, rng, mode):
        x = rng.normal(size=(9, 8, 2))
        taps = core.gaussian_taps(5, 1.0)
        y = core.separable_filter(x, taps, mode)
        g = rng.normal(size=y.shape)
        lhs = float(np.sum(y * g))
        rhs = float(np.sum(x * core.separable_filter_adjoint(g, taps, x.shape, mode)))
        assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.skipif(not _kernels.NUMBA_AVAILABLE, reason="numba missing")
class TestKernelBackends:
    def test_conv_agree(self, rng):
        x = rng.normal(size=(11, 9, 3))
        k = rng.normal(size=(3, 3, 3, 2))
        np.testing.assert_allclose(_kernels.NUMBA_KERNELS["conv2d_valid"](x, k), _kernels.NUMPY_KERNELS["conv2d_valid"](x, k), atol=1e-12)

    def test_rows_agree(self, rng):
        x = rng.normal(size=(12, 7, 2))
        taps = core.gaussian_taps(5, 1.1)
        np.testing.assert_allclose(_kernels.NUMBA_KERNELS["correlate_rows"](x, taps), _kernels.NUMPY_KERNELS["correlate_rows"](x, taps), atol=1e-13)

    def test_concentrations_agree(self, rng):
        img = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
        inv = np.linalg.inv(rng.normal(size=(3, 3)) + 3 * np.eye(3))
        np.testing.assert_allclose(
            _kernels.NUMBA_KERNELS["rgb_to_concentrations"](img, inv, 255.0),
            _kernels.NUMPY_KERNELS["rgb_to_concentrations"](img, inv, 255.0),
            atol=1e-12,
        )

    def test_soft_histogram_agree(self, rng):
        v = rng.uniform(0, 2.0, size=500)
        np.testing.assert_allclose(_kernels.NUMBA_KERNELS["soft_histogram"](v, 20, 2.0), _kernels.NUMPY_KERNELS["soft_histogram"](v, 20, 2.0), atol=1e-12)


@pytest.mark.parametrize("flag, expected", [("1", "numpy"), ("0", "numba")])
def test_backend_env_flag(flag, expected):
    import os
    import subprocess
    import sys

    if expected == "numba" and not _kernels.NUMBA_AVAILABLE:
        pytest.skip("numba missing")
    env = dict(os.environ, STAINLAB_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from stainlab import _kernels; print(_kernels.backend())"], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected


class TestInvariants:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**16), st.floats(0.5, 50.0))
    def test_instance_norm_idempotent(self, seed, scale):
        x = np.random.default_rng(seed).normal(0.0, scale, size=(6, 5, 3))
        once = core.instance_norm(x, eps=1e-14)
        np.testing.assert_allclose(core.instance_norm(once, eps=1e-14), once, atol=1e-9)

    def test_instance_norm_default_eps_drift(self, rng):
        # second pass rescales by about 1 + eps/2
        once = core.instance_norm(rng.normal(size=(8, 8, 2)))
        drift = np.max(np.abs(core.instance_norm(once) - once))
        assert drift < 1e-5 * np.max(np.abs(once))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**16), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_cosine_scale_invariant(self, seed, lam, mu):
        a, b = np.random.default_rng(seed).normal(size=(2, 7))
        assert abs(core.cosine_sim(a, b) - core.cosine_sim(lam * a, mu * b)) < 1e-12
