"""Pathology-consistency and auxiliary training objectives.

Every differentiable loss comes with a ``*_grad`` companion returning the
analytic gradient with respect to the generated-side input, so the values can
be verified with :func:`stainlab.core.finite_diff_check`.

Where the objective writes an L2 norm of a scalar difference (per bin, block
or pixel-class entry), the absolute value is used; ``squared=True`` switches
to the squared difference instead.
"""

from dataclasses import dataclass, fields
from math import isqrt
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .core import separable_filter, separable_filter_adjoint, softmax
from .errors import DegenerateClassError, DegenerateInputError, DimensionError, InputError
from .metrics import ssim, ssim_grad
from .stain import OD_MAX

PROTEIN, NORMAL = 0, 1
N_CLASSES = 2


@dataclass(frozen=True)
class MLPAConfig:
    beta: float = 0.2
    n_hist_bins: int = 20
    n_blocks: int = 16
    od_ref: float = OD_MAX
    histo_mode: str = "hard"
    squared: bool = False

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.n_hist_bins < 2:
            raise ValueError("need at least two histogram bins")
        g = isqrt(self.n_blocks)
        if self.n_blocks < 1 or g * g != self.n_blocks:
            raise ValueError(f"n_blocks must be a perfect square, got {self.n_blocks}")
        if self.od_ref <= 0:
            raise ValueError("od_ref must be positive")
        if self.histo_mode not in ("hard", "soft"):
            raise ValueError(f"histo_mode must be 'hard' or 'soft', got {self.histo_mode!r}")

    @property
    def grid(self) -> int:
        return isqrt(self.n_blocks)


def _pair(o_f, o_r):
    o_f = np.asarray(o_f, dtype=np.float64)
    o_r = np.asarray(o_r, dtype=np.float64)
    if o_f.shape != o_r.shape:
        raise DimensionError(f"FOD maps differ in shape: {o_f.shape} vs {o_r.shape}")
    return o_f, o_r


def _dist(d, squared):
    return d * d if squared else np.abs(d)


def _ddist(d, squared):
    return 2.0 * d if squared else np.sign(d)


# ---------------------------------------------------------------------------
# MLPA: global / histogram / block
# ---------------------------------------------------------------------------


def mlpa_avg(o_f, o_r, beta: float = 0.2, squared: bool = False) -> float:
    """Dead-zoned global mean term.

    Returns ``|mean(o_f) - mean(o_r)|`` when it reaches ``beta * mean(o_r)``,
    and exactly 0 inside that tolerance band.
    """
    o_f, o_r = _pair(o_f, o_r)
    ref = o_r.mean()
    delta = o_f.mean() - ref
    if abs(delta) < beta * ref:
        return 0.0
    return float(_dist(delta, squared))


def mlpa_avg_grad(o_f, o_r, beta: float = 0.2, squared: bool = False) -> np.ndarray:
    o_f, o_r = _pair(o_f, o_r)
    ref = o_r.mean()
    delta = o_f.mean() - ref
    if abs(delta) < beta * ref:
        return np.zeros_like(o_f)
    return np.full_like(o_f, _ddist(delta, squared) / o_f.size)


def histogram(values, n_bins: int, vmax: float, mode: str = "hard") -> np.ndarray:
    """Normalized histogram over ``[0, vmax]``; values are clipped into range.

    ``mode="soft"`` spreads each value over its two nearest bin centres with a
    triangular kernel, which makes the histogram piecewise linear in the values.
    """
    v = np.clip(np.asarray(values, dtype=np.float64).ravel(), 0.0, vmax)
    if v.size == 0:
        raise DimensionError("histogram of an empty map")
    if mode == "hard":
        h = np.histogram(v, bins=n_bins, range=(0.0, vmax))[0].astype(np.float64)
    elif mode == "soft":
        h = _kernels.soft_histogram(np.ascontiguousarray(v), int(n_bins), float(vmax))
    else:
        raise ValueError(f"unknown histogram mode {mode!r}")
    return h / v.size


def mlpa_histo(o_f, o_r, cfg: MLPAConfig = MLPAConfig()) -> float:
    o_f, o_r = _pair(o_f, o_r)
    h_f = histogram(o_f, cfg.n_hist_bins, cfg.od_ref, cfg.histo_mode)
    h_r = histogram(o_r, cfg.n_hist_bins, cfg.od_ref, cfg.histo_mode)
    return float(_dist(h_f - h_r, cfg.squared).mean())


def _soft_weights_grad(v, n_bins, vmax):
    width = vmax / n_bins
    raw = v / width - 0.5
    u = np.clip(raw, 0.0, n_bins - 1.0)
    lo = np.minimum(np.floor(u).astype(np.int64), n_bins - 2)
    inside = (raw > 0.0) & (raw < n_bins - 1.0) & (v > 0.0) & (v < vmax)
    du = np.where(inside, 1.0 / width, 0.0)
    return lo, du


def mlpa_histo_grad(o_f, o_r, cfg: MLPAConfig = MLPAConfig(histo_mode="soft")) -> np.ndarray:
    """Gradient of the soft-binned histogram term w.r.t. ``o_f``."""
    if cfg.histo_mode != "soft":
        raise ValueError("hard histograms are piecewise constant; use histo_mode='soft' for gradients")
    o_f, o_r = _pair(o_f, o_r)
    n = cfg.n_hist_bins
    h_f = histogram(o_f, n, cfg.od_ref, "soft")
    h_r = histogram(o_r, n, cfg.od_ref, "soft")
    dh = _ddist(h_f - h_r, cfg.squared) / n
    lo, du = _soft_weights_grad(o_f.ravel(), n, cfg.od_ref)
    # weight of bin lo falls and bin lo+1 rises as the value moves right
    g = (dh[lo + 1] - dh[lo]) * du / o_f.size
    return g.reshape(o_f.shape)


def _block_slices(shape, grid):
    h, w = shape[0], shape[1]
    bh, bw = h // grid, w // grid
    if bh < 1 or bw < 1:
        raise DimensionError(f"map {shape[:2]} smaller than the {grid}x{grid} block grid")
    top = (h - bh * grid) // 2
    left = (w - bw * grid) // 2
    return top, left, bh, bw


def block_means(o, grid: int) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    top, left, bh, bw = _block_slices(o.shape, grid)
    core = o[top : top + bh * grid, left : left + bw * grid]
    return core.reshape(grid, bh, grid, bw, -1).mean(axis=(1, 3, 4))


def mlpa_block(o_f, o_r, cfg: MLPAConfig = MLPAConfig()) -> float:
    o_f, o_r = _pair(o_f, o_r)
    d = block_means(o_f, cfg.grid) - block_means(o_r, cfg.grid)
    return float(_dist(d, cfg.squared).mean())


def mlpa_block_grad(o_f, o_r, cfg: MLPAConfig = MLPAConfig()) -> np.ndarray:
    o_f, o_r = _pair(o_f, o_r)
    g_n = cfg.grid
    d = block_means(o_f, g_n) - block_means(o_r, g_n)
    top, left, bh, bw = _block_slices(o_f.shape, g_n)
    per_pixel = o_f[:bh, :bw].size  # pixels in one block (all channels)
    db = _ddist(d, cfg.squared) / (g_n * g_n) / per_pixel
    grad = np.zeros_like(o_f)
    tile = np.repeat(np.repeat(db, bh, axis=0), bw, axis=1)
    grad[top : top + bh * g_n, left : left + bw * g_n] = tile.reshape(tile.shape[:2] + (1,) * (o_f.ndim - 2))
    return grad


class MLPATerms(NamedTuple):
    avg: float
    histo: float
    block: float

    @property
    def total(self) -> float:
        return self.avg + self.histo + self.block


def mlpa_terms(o_f, o_r, cfg: MLPAConfig = MLPAConfig()) -> MLPATerms:
    return MLPATerms(mlpa_avg(o_f, o_r, cfg.beta, cfg.squared), mlpa_histo(o_f, o_r, cfg), mlpa_block(o_f, o_r, cfg))


def mlpa_total(o_f, o_r, cfg: MLPAConfig = MLPAConfig()) -> float:
    return mlpa_terms(o_f, o_r, cfg).total


# ---------------------------------------------------------------------------
# Prototype consistency
# ---------------------------------------------------------------------------


def _check_probs(p, hw):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 3 or p.shape[:2] != hw or p.shape[2] != N_CLASSES:
        raise DimensionError(f"probability map must be {hw + (N_CLASSES,)}, got {p.shape}")
    return p


def extract_prototypes(f, p) -> np.ndarray:
    """Probability-weighted mean feature per class.

    Args:
        f: features ``(H, W, D)``.
        p: class probabilities ``(H, W, 2)``; channel 0 is protein expression,
            channel 1 normal tissue.

    Returns:
        ``(2, D)`` prototypes.

    Raises:
        DegenerateClassError: a class has zero total probability mass.
    """
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 3:
        raise DimensionError(f"features must be (H, W, D), got {f.shape}")
    p = _check_probs(p, f.shape[:2])
    mass = p.sum(axis=(0, 1))
    empty = [c for c in range(N_CLASSES) if mass[c] <= 0.0]
    if empty:
        raise DegenerateClassError(f"classes {empty} have zero probability mass", empty)
    return np.einsum("hwc,hwd->cd", p, f) / mass[:, None]


def uniform_prototypes(f) -> np.ndarray:
    """Fallback used when a class is empty: every prototype is the mean feature."""
    f = np.asarray(f, dtype=np.float64)
    return np.repeat(f.reshape(-1, f.shape[-1]).mean(axis=0)[None], N_CLASSES, axis=0)


def masks_from_fod(o, od_ref: float = OD_MAX, tau_m: float = 0.15) -> np.ndarray:
    """One-hot ``(H, W, 2)`` masks: protein where ``o >= tau_m * od_ref``, else normal."""
    o = np.asarray(o, dtype=np.float64)
    protein = o >= tau_m * od_ref
    return np.stack([protein, ~protein], axis=-1).astype(np.float64)


def _unit_rows(x, what):
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} vector")
    return x / norms, norms


def _side(f, q, m, squared):
    """One direction of the consistency term and its backward closure."""
    fh, fn = _unit_rows(f, "feature")
    qh, qn = _unit_rows(q, "prototype")
    s = np.einsum("hwd,cd->hwc", fh, qh)
    p_hat = softmax(s, axis=-1)
    diff = p_hat - m
    total = float(_dist(diff, squared).sum())

    def backward(scale):
        g = _ddist(diff, squared) * scale
        ds = p_hat * (g - (p_hat * g).sum(axis=-1, keepdims=True))
        # d cos(a, q) / d a = (q_hat - s a_hat) / |a|
        df = (np.einsum("hwc,cd->hwd", ds, qh) - (ds * s).sum(axis=-1, keepdims=True) * fh) / fn
        dq = (np.einsum("hwc,hwd->cd", ds, fh) - (ds * s).sum(axis=(0, 1))[:, None] * qh) / qn
        return df, dq

    return total, backward


def _proto_backward(f, p, dq):
    mass = p.sum(axis=(0, 1))
    q = np.einsum("hwc,hwd->cd", p, f) / mass[:, None]
    df = np.einsum("hwc,cd->hwd", p / mass, dq)
    dp = (np.einsum("hwd,cd->hwc", f, dq) - (q * dq).sum(axis=1)) / mass
    return df, dp


def _cppc_inputs(f_f, f_r, p_f, p_r, m_f, m_r):
    f_f = np.asarray(f_f, dtype=np.float64)
    f_r = np.asarray(f_r, dtype=np.float64)
    if f_f.ndim != 3 or f_f.shape != f_r.shape:
        raise DimensionError(f"feature maps must share an (H, W, D) shape, got {f_f.shape} and {f_r.shape}")
    hw = f_f.shape[:2]
    return (f_f, f_r, _check_probs(p_f, hw), _check_probs(p_r, hw), _check_probs(m_f, hw), _check_probs(m_r, hw))


def cppc_loss(f_f, f_r, p_f, p_r, m_f, m_r, squared: bool = False) -> float:
    """Bidirectional cross-image prototype consistency.

    Generated-image features are scored against the reference prototypes and
    vice versa; each cosine-similarity profile is softmaxed over the two
    classes and compared with the FOD-derived masks of its own image. The sum
    is normalized by ``C * H * W``.
    """
    f_f, f_r, p_f, p_r, m_f, m_r = _cppc_inputs(f_f, f_r, p_f, p_r, m_f, m_r)
    q_f = extract_prototypes(f_f, p_f)
    q_r = extract_prototypes(f_r, p_r)
    fr, _ = _side(f_f, q_r, m_f, squared)
    rf, _ = _side(f_r, q_f, m_r, squared)
    h, w = f_f.shape[:2]
    return (fr + rf) / (N_CLASSES * h * w)


class CPPCGrads(NamedTuple):
    f_f: np.ndarray
    f_r: np.ndarray
    p_f: np.ndarray
    p_r: np.ndarray


def cppc_loss_grad(f_f, f_r, p_f, p_r, m_f, m_r, squared: bool = False):
    """Return ``(loss, CPPCGrads)`` with gradients for both feature and probability maps."""
    f_f, f_r, p_f, p_r, m_f, m_r = _cppc_inputs(f_f, f_r, p_f, p_r, m_f, m_r)
    q_f = extract_prototypes(f_f, p_f)
    q_r = extract_prototypes(f_r, p_r)
    h, w = f_f.shape[:2]
    scale = 1.0 / (N_CLASSES * h * w)
    fr, back_fr = _side(f_f, q_r, m_f, squared)
    rf, back_rf = _side(f_r, q_f, m_r, squared)
    df_f, dq_r = back_fr(scale)
    df_r, dq_f = back_rf(scale)
    pf_f, dp_f = _proto_backward(f_f, p_f, dq_f)
    pf_r, dp_r = _proto_backward(f_r, p_r, dq_r)
    return (fr + rf) * scale, CPPCGrads(df_f + pf_f, df_r + pf_r, dp_f, dp_r)


# ---------------------------------------------------------------------------
# Image-level auxiliary losses
# ---------------------------------------------------------------------------


def ssim_loss(k_f, k_r, peak: float = 255.0) -> float:
    return 1.0 - ssim(k_f, k_r, peak)


def ssim_loss_grad(k_f, k_r, peak: float = 255.0) -> np.ndarray:
    _, g = ssim_grad(k_f, k_r, peak)
    return -g


PYRAMID_TAPS = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
DEFAULT_GP_LAMBDAS = (1.0, 2.0, 4.0, 8.0)


def pyramid_weights(levels: int) -> tuple:
    """Doubling per level, coarse scales weighted highest; ``(1, 2, 4, 8)`` for four levels."""
    return tuple(2.0**i for i in range(levels))


def _pyr_down(x):
    if x.shape[0] < 3 or x.shape[1] < 3:
        raise DimensionError(f"image level {x.shape[:2]} too small for another pyramid step")
    return separable_filter(x, PYRAMID_TAPS, mode="reflect")[::2, ::2]


def _pyr_down_adjoint(g, in_shape):
    up = np.zeros(in_shape)
    up[::2, ::2] = g
    return separable_filter_adjoint(up, PYRAMID_TAPS, in_shape, mode="reflect")


def gaussian_pyramid(img, levels: int) -> list:
    """Level 0 is the image itself; level i is i rounds of 5x5 blur + 2x decimation."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    out = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        out.append(_pyr_down(out[-1]))
    return out


def _gp_check(levels, lambdas):
    lambdas = tuple(float(x) for x in lambdas)
    if len(lambdas) != levels:
        raise ValueError(f"{levels} pyramid levels but {len(lambdas)} weights")
    return lambdas


def gp_loss(k_f, k_r, levels: int = 4, lambdas=DEFAULT_GP_LAMBDAS) -> float:
    lambdas = _gp_check(levels, lambdas)
    k_f, k_r = _pair(k_f, k_r)
    pf = gaussian_pyramid(k_f, levels)
    pr = gaussian_pyramid(k_r, levels)
    return float(sum(lam * np.mean(np.abs(r - f)) for lam, f, r in zip(lambdas, pf, pr)))


def gp_loss_grad(k_f, k_r, levels: int = 4, lambdas=DEFAULT_GP_LAMBDAS) -> np.ndarray:
    lambdas = _gp_check(levels, lambdas)
    k_f, k_r = _pair(k_f, k_r)
    pf = gaussian_pyramid(k_f, levels)
    pr = gaussian_pyramid(k_r, levels)
    grad = np.zeros_like(k_f)
    for i, lam in enumerate(lambdas):
        g = lam * np.sign(pf[i] - pr[i]) / pf[i].size
        for j in range(i, 0, -1):
            g = _pyr_down_adjoint(g, pf[j - 1].shape)
        grad += g
    return grad


def _nce_parts(anchor, positive, negatives, tau):
    if tau <= 0:
        raise ValueError("temperature must be positive")
    a = np.asarray(anchor, dtype=np.float64).ravel()
    a_hat, a_norm = _unit_rows(a, "anchor")
    vecs = [np.asarray(positive, dtype=np.float64).ravel()]
    vecs += [np.asarray(n, dtype=np.float64).ravel() for n in negatives]
    v = np.stack(vecs)
    if v.shape[1] != a.size:
        raise DimensionError("anchor, positive and negatives must share a length")
    v_hat, _ = _unit_rows(v, "contrast")
    logits = v_hat @ a_hat / tau
    return a_hat, float(a_norm[0]), v_hat, logits


def nce_loss(anchor, positive, negatives=(), tau: float = 0.07) -> float:
    """Patch InfoNCE: cross-entropy of picking the positive among positive + negatives."""
    _, _, _, logits = _nce_parts(anchor, positive, negatives, tau)
    return float(logsumexp(logits) - logits[0])


def nce_loss_grad(anchor, positive, negatives=(), tau: float = 0.07) -> np.ndarray:
    a_hat, a_norm, v_hat, logits = _nce_parts(anchor, positive, negatives, tau)
    pi = np.exp(logits - logsumexp(logits))
    d_hat = (pi @ v_hat - v_hat[0]) / tau
    return (d_hat - a_hat * (a_hat @ d_hat)) / a_norm


def adversarial_value(d_real, d_fake) -> float:
    """``mean log D(real) + mean log(1 - D(fake))`` for discriminator outputs in (0, 1)."""
    d_real = np.asarray(d_real, dtype=np.float64)
    d_fake = np.asarray(d_fake, dtype=np.float64)
    for name, d in (("d_real", d_real), ("d_fake", d_fake)):
        if d.size == 0 or np.any(~np.isfinite(d)) or np.any(d <= 0.0) or np.any(d >= 1.0):
            raise InputError(f"{name} must hold probabilities strictly inside (0, 1)")
    return float(np.mean(np.log(d_real)) + np.mean(np.log1p(-d_fake)))


# ---------------------------------------------------------------------------
# Total objective
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_M: float = 1.0
    lambda_C: float = 2.5
    lambda_S: float = 0.05
    lambda_G: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass(frozen=True)
class LossComponents:
    adv: float = 0.0
    nce: float = 0.0
    mlpa: float = 0.0
    cppc: float = 0.0
    ssim: float = 0.0
    gp: float = 0.0


def total_loss(c: LossComponents, w: LossWeights = LossWeights()) -> float:
    values = [getattr(c, f.name) for f in fields(c)]
    if not all(np.isfinite(values)):
        raise InputError("loss components must be finite")
    return c.adv + c.nce + w.lambda_M * c.mlpa + w.lambda_C * c.cppc + w.lambda_S * c.ssim + w.lambda_G * c.gp
