"""Hot inner loops, each in a numba and a pure-numpy flavour.

The public names (``conv2d_valid``, ``correlate_rows``, ``rgb_to_concentrations``,
``soft_histogram``) are bound at import time. Numba is used when it imports
cleanly and ``STAINLAB_DISABLE_NUMBA`` is unset or falsy; setting the variable to
``1`` forces the numpy path. Both flavours are always importable through
``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so tests and the benchmark can compare them.

All kernels expect C-contiguous float64 (or uint8 for images) arrays; callers in
``stainlab.core`` / ``stainlab.stain`` do the conversion.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_FALSY = {"", "0", "false", "no", "off"}


def _numba_requested():
    return os.environ.get("STAINLAB_DISABLE_NUMBA", "").strip().lower() in _FALSY


try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

USE_NUMBA = NUMBA_AVAILABLE and _numba_requested()


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _conv2d_valid_np(x, k):
    kh, kw = k.shape[0], k.shape[1]
    win = sliding_window_view(x, (kh, kw), axis=(0, 1))  # (Ho, Wo, Cin, kh, kw)
    return np.einsum("hwcij,ijco->hwo", win, k, optimize=True)


def _correlate_rows_np(x, taps):
    # out[i] = sum_j taps[j] * x[i + j] along axis 0 of a (N, M, C) array
    k = taps.shape[0]
    n_out = x.shape[0] - k + 1
    out = np.zeros((n_out,) + x.shape[1:])
    for j in range(k):
        out += taps[j] * x[j : j + n_out]
    return out


def _rgb_to_concentrations_np(img, inv, i0):
    od = -np.log10(np.clip(img.astype(np.float64), 1.0, i0) / i0)
    return od @ inv


def _soft_histogram_np(values, n_bins, vmax):
    width = vmax / n_bins
    u = np.clip(values / width - 0.5, 0.0, n_bins - 1.0)
    lo = np.minimum(np.floor(u).astype(np.int64), n_bins - 2)
    frac = u - lo
    hist = np.bincount(lo, weights=1.0 - frac, minlength=n_bins)
    hist += np.bincount(lo + 1, weights=frac, minlength=n_bins)
    return hist[:n_bins]


NUMPY_KERNELS = {
    "conv2d_valid": _conv2d_valid_np,
    "correlate_rows": _correlate_rows_np,
    "rgb_to_concentrations": _rgb_to_concentrations_np,
    "soft_histogram": _soft_histogram_np,
}


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

NUMBA_KERNELS = {}

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _conv2d_valid_nb(x, k):
        kh, kw, cin, cout = k.shape
        ho = x.shape[0] - kh + 1
        wo = x.shape[1] - kw + 1
        out = np.zeros((ho, wo, cout))
        for i in range(ho):
            for j in range(wo):
                for di in range(kh):
                    for dj in range(kw):
                        for c in range(cin):
                            v = x[i + di, j + dj, c]
                            for o in range(cout):
                                out[i, j, o] += v * k[di, dj, c, o]
        return out

    @njit(cache=True, nogil=True)
    def _correlate_rows_nb(x, taps):
        k = taps.shape[0]
        n_out = x.shape[0] - k + 1
        m = x.shape[1]
        nc = x.shape[2]
        out = np.zeros((n_out, m, nc))
        for i in range(n_out):
            for j in range(k):
                t = taps[j]
                for a in range(m):
                    for c in range(nc):
                        out[i, a, c] += t * x[i + j, a, c]
        return out

    @njit(cache=True, nogil=True)
    def _rgb_to_concentrations_nb(img, inv, i0):
        # 8-bit input: one log10 per grey level instead of per pixel
        lut = np.empty(256)
        for v in range(256):
            lut[v] = -np.log10(min(max(float(v), 1.0), i0) / i0)
        h, w = img.shape[0], img.shape[1]
        out = np.empty((h, w, 3))
        for i in range(h):
            for j in range(w):
                r = lut[img[i, j, 0]]
                g = lut[img[i, j, 1]]
                b = lut[img[i, j, 2]]
                for s in range(3):
                    out[i, j, s] = r * inv[0, s] + g * inv[1, s] + b * inv[2, s]
        return out

    @njit(cache=True, nogil=True)
    def _soft_histogram_nb(values, n_bins, vmax):
        width = vmax / n_bins
        hist = np.zeros(n_bins)
        top = n_bins - 1.0
        for idx in range(values.shape[0]):
            u = values[idx] / width - 0.5
            if u < 0.0:
                u = 0.0
            elif u > top:
                u = top
            lo = int(np.floor(u))
            if lo > n_bins - 2:
                lo = n_bins - 2
            frac = u - lo
            hist[lo] += 1.0 - frac
            hist[lo + 1] += frac
        return hist

    NUMBA_KERNELS = {
        "conv2d_valid": _conv2d_valid_nb,
        "correlate_rows": _correlate_rows_nb,
        "rgb_to_concentrations": _rgb_to_concentrations_nb,
        "soft_histogram": _soft_histogram_nb,
    }

ACTIVE_KERNELS = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS

conv2d_valid = ACTIVE_KERNELS["conv2d_valid"]
correlate_rows = ACTIVE_KERNELS["correlate_rows"]
rgb_to_concentrations = ACTIVE_KERNELS["rgb_to_concentrations"]
soft_histogram = ACTIVE_KERNELS["soft_histogram"]


def backend():
    return "numba" if USE_NUMBA else "numpy"
