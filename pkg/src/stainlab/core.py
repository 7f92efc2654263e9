"""Dense array building blocks and the finite-difference gradient harness.

Tensors are plain ``numpy.ndarray`` objects laid out channels-last
(``H x W x C``). Everything here is a pure function of its inputs.
"""

from typing import Callable

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, DimensionError, EvaluationError

DEFAULT_EPS = 1e-5


def _as3d(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[:, :, None], True
    if x.ndim != 3:
        raise DimensionError(f"expected an H x W or H x W x C array, got shape {x.shape}")
    return x, False


def conv2d(x, kernel, padding: str = "same") -> np.ndarray:
    """2-D cross-correlation (no kernel flip) of an ``H x W x Cin`` array.

    Args:
        x: input of shape ``(H, W, Cin)``.
        kernel: weights of shape ``(kh, kw, Cin, Cout)``; ``kh`` and ``kw`` odd.
        padding: ``"same"`` zero-pads so the output keeps ``H x W``; ``"valid"``
            only keeps positions where the kernel fits.

    Returns:
        Array of shape ``(H', W', Cout)``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3 or kernel.ndim != 4:
        raise DimensionError(f"conv2d needs (H,W,Cin) input and (kh,kw,Cin,Cout) kernel, got {x.shape} and {kernel.shape}")
    kh, kw, cin, _ = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"kernel extents must be odd, got {kh}x{kw}")
    if cin != x.shape[2]:
        raise DimensionError(f"kernel expects {cin} input channels, input has {x.shape[2]}")
    if padding == "same":
        x = np.pad(x, ((kh // 2, kh // 2), (kw // 2, kw // 2), (0, 0)))
    elif padding != "valid":
        raise ValueError(f"unknown padding mode {padding!r}")
    if x.shape[0] < kh or x.shape[1] < kw:
        raise DimensionError(f"input {x.shape[:2]} smaller than kernel {kh}x{kw}")
    return _kernels.conv2d_valid(np.ascontiguousarray(x), np.ascontiguousarray(kernel))


def _check_nonempty(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] < 1 or x.shape[1] < 1 or x.shape[2] < 1:
        raise DimensionError(f"global pooling needs a non-empty (H,W,C) array, got shape {x.shape}")
    return x


def avg_pool_global(x) -> np.ndarray:
    return _check_nonempty(x).mean(axis=(0, 1))


def max_pool_global(x) -> np.ndarray:
    return _check_nonempty(x).max(axis=(0, 1))


def instance_norm(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Normalize each channel to zero mean, unit variance over ``H x W``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    mu = x.mean(axis=(0, 1), keepdims=True)
    var = x.var(axis=(0, 1), keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def layer_norm(x, eps: float = DEFAULT_EPS) -> np.ndarray:
    """Normalize over all of ``H x W x C`` at once."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x, dtype=np.float64)
    return (x - x.mean()) / np.sqrt(x.var() + eps)


def softmax(scores, axis: int = -1) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    z = np.exp(s - s.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise DimensionError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Separable Gaussian filtering (SSIM windows, blur probe, pyramid)
# ---------------------------------------------------------------------------


def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    if size < 1 or size % 2 == 0:
        raise DimensionError(f"Gaussian window size must be odd and positive, got {size}")
    r = size // 2
    t = np.exp(-0.5 * (np.arange(-r, r + 1) / sigma) ** 2)
    return t / t.sum()


def blur_sigma(size: int) -> float:
    """Kernel-size to sigma rule used when only a window size is given."""
    return 0.3 * ((size - 1) / 2 - 1) + 0.8


def _filter_axis0(x, taps):
    return _kernels.correlate_rows(np.ascontiguousarray(x), np.ascontiguousarray(taps, dtype=np.float64))


def _filter_axis1(x, taps):
    y = _filter_axis0(x.transpose(1, 0, 2), taps)
    return y.transpose(1, 0, 2)


def _reflect_index(n, r):
    if r > 0 and n < r + 1:
        raise DimensionError(f"axis of length {n} too short for reflect padding of {r}")
    return np.pad(np.arange(n), r, mode="reflect")


def separable_filter(x, taps, mode: str = "valid") -> np.ndarray:
    """Apply the 1-D ``taps`` along H then W.

    ``mode="valid"`` shrinks each axis by ``len(taps) - 1``; ``mode="reflect"``
    keeps the shape using mirror padding (edge sample not repeated), which
    preserves constant images.
    """
    x3, squeeze = _as3d(x)
    r = len(taps) // 2
    if mode == "reflect":
        x3 = x3[_reflect_index(x3.shape[0], r)][:, _reflect_index(x3.shape[1], r)]
    elif mode != "valid":
        raise ValueError(f"unknown filter mode {mode!r}")
    if x3.shape[0] < len(taps) or x3.shape[1] < len(taps):
        raise DimensionError(f"image {x3.shape[:2]} smaller than window {len(taps)}")
    out = _filter_axis1(_filter_axis0(x3, taps), taps)
    return out[:, :, 0] if squeeze else out


def separable_filter_adjoint(g, taps, in_shape, mode: str = "valid") -> np.ndarray:
    """Adjoint (transpose) of :func:`separable_filter` for gradient back-propagation."""
    g3, squeeze = _as3d(g)
    k = len(taps)
    r = k // 2
    flipped = np.asarray(taps, dtype=np.float64)[::-1]
    # valid correlation adjoint == full convolution
    g3 = np.pad(g3, ((k - 1, k - 1), (0, 0), (0, 0)))
    g3 = _filter_axis0(g3, flipped)
    g3 = np.pad(g3, ((0, 0), (k - 1, k - 1), (0, 0)))
    g3 = _filter_axis1(g3, flipped)
    if mode == "reflect":
        h, w = in_shape[0], in_shape[1]
        rows = np.zeros((h,) + g3.shape[1:])
        np.add.at(rows, _reflect_index(h, r), g3)
        cols = np.zeros((h, w, g3.shape[2]))
        np.add.at(cols.transpose(1, 0, 2), _reflect_index(w, r), rows.transpose(1, 0, 2))
        g3 = cols
    return g3[:, :, 0] if squeeze else g3


def gaussian_blur(img, size: int, sigma: float | None = None) -> np.ndarray:
    """Mirror-padded Gaussian blur with an odd ``size x size`` window."""
    if sigma is None:
        sigma = blur_sigma(size)
    return separable_filter(img, gaussian_taps(size, sigma), mode="reflect")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    x,
    analytic_grad,
    h: float = 1e-5,
) -> float:
    """Compare an analytic gradient against central differences.

    Each coordinate uses the step ``h * max(1, |x_i|)``. The returned error is
    ``max_i |g_fd - g_an| / max(1, |g_fd|)``.

    Raises:
        EvaluationError: if ``f`` is non-finite at any probed point.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"step h={h} outside [1e-6, 1e-4]")
    x = np.array(x, dtype=np.float64)
    g_an = np.asarray(analytic_grad, dtype=np.float64)
    if g_an.shape != x.shape:
        raise DimensionError(f"gradient shape {g_an.shape} != input shape {x.shape}")
    flat = x.reshape(-1)
    g_fd = np.empty(flat.size)
    for i in range(flat.size):
        xi = flat[i]
        step = h * max(1.0, abs(xi))
        flat[i] = xi + step
        fp = f(x)
        flat[i] = xi - step
        fm = f(x)
        flat[i] = xi
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value near coordinate {i}")
        g_fd[i] = (fp - fm) / (2.0 * step)
    err = np.abs(g_fd - g_an.reshape(-1)) / np.maximum(1.0, np.abs(g_fd))
    return float(err.max()) if err.size else 0.0
