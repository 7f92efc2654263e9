"""Evaluation metrics: protein-expression statistics, image quality, Fréchet distance, grading."""

import bisect
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .core import blur_sigma, gaussian_blur, gaussian_taps, separable_filter, separable_filter_adjoint
from .errors import AlignmentError, ConfigError, DegenerateInputError, DimensionError, InputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


# ---------------------------------------------------------------------------
# Dataset-level OD statistics
# ---------------------------------------------------------------------------


@dataclass
class ODSeries:
    """Per-image total DAB OD for generated (test) and reference (label) images."""

    ids: list
    test: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        self.test = np.asarray(self.test, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.float64)
        _aligned(self.test, self.label)
        if len(self.ids) != len(self.test):
            raise AlignmentError(f"{len(self.ids)} ids for {len(self.test)} values")


def _aligned(test, label):
    test = np.asarray(test, dtype=np.float64).ravel()
    label = np.asarray(label, dtype=np.float64).ravel()
    if test.shape != label.shape:
        raise AlignmentError(f"series lengths differ: {test.size} vs {label.size}")
    if not (np.all(np.isfinite(test)) and np.all(np.isfinite(label))):
        raise InputError("OD series contain non-finite values")
    return test, label


def iod(test, label) -> float:
    """Signed integrated OD difference ``sum(test) - sum(label)``."""
    test, label = _aligned(test, label)
    return math.fsum(test) - math.fsum(label)


def iod_per_image(test, label) -> float:
    test, label = _aligned(test, label)
    if test.size == 0:
        raise DegenerateInputError("empty series")
    return iod(test, label) / test.size


def pearson_r(test, label) -> float:
    test, label = _aligned(test, label)
    if test.size < 2:
        raise DegenerateInputError("Pearson-R needs at least two images")
    dt = test - test.mean()
    dl = label - label.mean()
    st = math.fsum(dt * dt)
    sl = math.fsum(dl * dl)
    if st == 0.0 or sl == 0.0:
        raise DegenerateInputError("zero-variance OD series")
    r = math.fsum(dt * dl) / math.sqrt(st * sl)
    return max(-1.0, min(1.0, r))


def cumulative_curve(test, label, order: str = "by_id", ids: Sequence | None = None):
    """Running OD totals used for protein progression plots.

    ``order="by_id"`` keeps the given order (sorted by ``ids`` when supplied);
    ``order="by_label_od"`` sorts ascending by the reference OD (stable).

    Returns:
        ``(cum_test, cum_label, index)`` where ``index`` is the permutation applied.
    """
    test, label = _aligned(test, label)
    if test.size == 0:
        raise DegenerateInputError("cumulative curve of an empty series")
    if order == "by_id":
        idx = np.arange(test.size) if ids is None else np.array(sorted(range(test.size), key=lambda i: ids[i]))
    elif order == "by_label_od":
        idx = np.argsort(label, kind="stable")
    else:
        raise ValueError(f"unknown order {order!r}")
    return np.cumsum(test[idx]), np.cumsum(label[idx]), idx


# ---------------------------------------------------------------------------
# Image quality
# ---------------------------------------------------------------------------


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 255.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 99 dB for (near-)identical images."""
    a, b = _same_shape(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-12:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(peak * peak / mse))


class _SsimTerms(NamedTuple):
    smap: np.ndarray
    mu_x: np.ndarray
    mu_y: np.ndarray
    num1: np.ndarray
    num2: np.ndarray
    den1: np.ndarray
    den2: np.ndarray


def _ssim_terms(x, y, peak, window, sigma) -> _SsimTerms:
    taps = gaussian_taps(window, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_x = separable_filter(x, taps)
    mu_y = separable_filter(y, taps)
    exx = separable_filter(x * x, taps)
    eyy = separable_filter(y * y, taps)
    exy = separable_filter(x * y, taps)
    num1 = 2 * mu_x * mu_y + c1
    num2 = 2 * (exy - mu_x * mu_y) + c2
    den1 = mu_x**2 + mu_y**2 + c1
    den2 = (exx - mu_x**2) + (eyy - mu_y**2) + c2
    return _SsimTerms(num1 * num2 / (den1 * den2), mu_x, mu_y, num1, num2, den1, den2)


def _prep_ssim(a, b, window):
    a, b = _same_shape(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    if a.ndim != 3:
        raise DimensionError(f"expected H x W or H x W x C images, got {a.shape}")
    if a.shape[0] < window or a.shape[1] < window:
        raise DimensionError(f"images {a.shape[:2]} smaller than the {window}x{window} SSIM window")
    return a, b


def ssim(a, b, peak: float = 255.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> float:
    """Mean SSIM over all valid window positions and channels.

    Uses an ``window x window`` Gaussian weighting (default 11, sigma 1.5) with
    ``C1 = (0.01 peak)^2`` and ``C2 = (0.03 peak)^2``.
    """
    a, b = _prep_ssim(a, b, window)
    if np.array_equal(a, b):
        return 1.0
    return float(_ssim_terms(a, b, peak, window, sigma).smap.mean())


def ssim_grad(a, b, peak: float = 255.0, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA):
    """Return ``(ssim(a, b), d ssim / d a)``."""
    a3, b3 = _prep_ssim(a, b, window)
    taps = gaussian_taps(window, sigma)
    t = _ssim_terms(a3, b3, peak, window, sigma)
    n = t.smap.size
    s = t.smap
    # derivatives of the map w.r.t. the local statistics mu_x, E[x^2], E[xy]
    d_mu = s * (2 * t.mu_y / t.num1 - 2 * t.mu_y / t.num2 - 2 * t.mu_x / t.den1 + 2 * t.mu_x / t.den2) / n
    d_exx = -s / t.den2 / n
    d_exy = 2 * s / t.num2 / n
    shape = a3.shape
    g = separable_filter_adjoint(d_mu, taps, shape)
    g += 2 * a3 * separable_filter_adjoint(d_exx, taps, shape)
    g += b3 * separable_filter_adjoint(d_exy, taps, shape)
    g = g.reshape(np.shape(a))
    return float(s.mean()), g


# ---------------------------------------------------------------------------
# Fréchet distance
# ---------------------------------------------------------------------------


def _moments(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"feature set must be n x d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InputError("feature set contains non-finite values")
    n, d = x.shape
    if n < 2:
        raise DegenerateInputError("need at least two feature vectors")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    if n <= d:
        cov = cov + (1e-6 * np.trace(cov) / d) * np.eye(d)
    return mu, cov


def _psd_sqrt(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a, b) -> float:
    """Fréchet distance between Gaussians fitted to two ``n x d`` feature sets.

    The cross term uses the symmetric form ``sqrt(sqrt(Sa) Sb sqrt(Sa))``,
    whose trace equals that of ``sqrt(Sa Sb)``; negative eigenvalues from
    round-off are clamped to zero.
    """
    mu_a, cov_a = _moments(a)
    mu_b, cov_b = _moments(b)
    if mu_a.shape != mu_b.shape:
        raise DimensionError(f"feature dimensions differ: {mu_a.size} vs {mu_b.size}")
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# Grading
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradeThresholds:
    biomarker: str
    cutoffs: tuple
    labels: tuple = field(default=())

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cutoffs)
        if any(b <= a for a, b in zip(cuts, cuts[1:])):
            raise ConfigError(f"{self.biomarker}: cutoffs must be strictly increasing, got {cuts}")
        labels = tuple(self.labels) or tuple(str(i) for i in range(len(cuts) + 1))
        if len(labels) != len(cuts) + 1:
            raise ConfigError(f"{self.biomarker}: need {len(cuts) + 1} labels, got {len(labels)}")
        object.__setattr__(self, "cutoffs", cuts)
        object.__setattr__(self, "labels", labels)

    def level(self, cumulative_od: float) -> int:
        # inclusive upward: od == cutoff takes the higher grade
        return bisect.bisect_right(self.cutoffs, cumulative_od)


_BINARY = ("negative", "positive")

DEFAULT_THRESHOLDS = {
    "HER2": GradeThresholds("HER2", (500.0, 2000.0, 5000.0), ("0", "1+", "2+", "3+")),
    "ER": GradeThresholds("ER", (1000.0,), _BINARY),
    "PR": GradeThresholds("PR", (1000.0,), _BINARY),
    "KI67": GradeThresholds("Ki67", (2000.0,), _BINARY),
}


def thresholds_for(biomarker: str) -> GradeThresholds:
    try:
        return DEFAULT_THRESHOLDS[biomarker.upper()]
    except KeyError:
        raise ConfigError(f"no grading thresholds for biomarker {biomarker!r}") from None


def grade(biomarker: str, cumulative_od: float, thresholds: GradeThresholds | None = None) -> str:
    """Map a cumulative OD value to a clinical grade label.

    HER2 is four-class (0, 1+, 2+, 3+ at 500 / 2000 / 5000); ER and PR are
    positive from 1000, Ki67 from 2000.
    """
    th = thresholds or thresholds_for(biomarker)
    return th.labels[th.level(cumulative_od)]


# ---------------------------------------------------------------------------
# Blur degradation probe
# ---------------------------------------------------------------------------


class BlurResult(NamedTuple):
    kernel: int
    psnr: float
    ssim: float


def blur_probe(img, kernels=(3, 5, 7), sigma_rule=blur_sigma, quantize: bool = True, peak: float = 255.0):
    """PSNR / SSIM of Gaussian-blurred copies of ``img`` against the original.

    Blurred images are rounded back to 8-bit when ``quantize`` is set, as they
    would be when written to disk.
    """
    img = np.asarray(img, dtype=np.float64)
    results = []
    for k in kernels:
        if k < 3 or k % 2 == 0:
            raise DimensionError(f"blur kernel sizes must be odd and >= 3, got {k}")
        blurred = gaussian_blur(img, k, sigma_rule(k))
        if quantize:
            blurred = np.clip(np.round(blurred), 0, peak)
        results.append(BlurResult(k, psnr(img, blurred, peak), ssim(img, blurred, peak)))
    return results
