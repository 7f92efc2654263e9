"""Lambert-Beer optical density, colour deconvolution and focal OD maps.

Stain matrices are stored with one stain per row and the R, G, B optical
density coefficients in the columns. A pixel's OD row vector is therefore
``od = s @ M`` for concentrations ``s``, and deconvolution solves
``s = od @ inv(M)``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegenerateInputError, DimensionError

I0 = 255.0
TRANSMITTANCE_FLOOR = 1.0  # in 8-bit counts
OD_MAX = float(-np.log10(TRANSMITTANCE_FLOOR / I0))  # ~2.4065
DEFAULT_ALPHA = 1.8
DAB_INDEX = 2

_HDAB_ROWS = (
    (0.650, 0.704, 0.286),  # hematoxylin
    (0.072, 0.990, 0.105),  # eosin / residual
    (0.268, 0.570, 0.776),  # DAB
)


@dataclass(frozen=True)
class StainMatrix:
    """3x3 matrix of unit-norm stain absorption vectors (rows = stains)."""

    m: np.ndarray
    names: tuple = ("hematoxylin", "eosin", "dab")
    dab_index: int = DAB_INDEX

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise DimensionError(f"stain matrix must be 3x3, got {m.shape}")
        norms = np.linalg.norm(m, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError(f"stain rows must have unit L2 norm, got {norms}")
        if abs(np.linalg.det(m)) <= 1e-6:
            raise DegenerateInputError("stain matrix is singular")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def from_rows(cls, rows, **kwargs) -> "StainMatrix":
        """Build a matrix from raw absorption rows, renormalizing each to unit length."""
        m = np.asarray(rows, dtype=np.float64).reshape(3, 3)
        norms = np.linalg.norm(m, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DegenerateInputError("stain row with zero norm")
        return cls(m / norms, **kwargs)

    @classmethod
    def hdab(cls) -> "StainMatrix":
        return cls.from_rows(_HDAB_ROWS)

    @property
    def inverse(self) -> np.ndarray:
        return np.linalg.inv(self.m)


def default_matrix() -> StainMatrix:
    return StainMatrix.hdab()


def rgb_to_od(img, i0: float = I0) -> np.ndarray:
    """Per-channel optical density ``-log10(K / i0)`` with ``K`` clipped to ``[1, i0]``."""
    if i0 <= 0:
        raise ValueError("incident intensity i0 must be positive")
    k = np.clip(np.asarray(img, dtype=np.float64), TRANSMITTANCE_FLOOR, i0)
    return -np.log10(k / i0)


def od_to_rgb(od, i0: float = I0) -> np.ndarray:
    """Inverse of :func:`rgb_to_od` (float intensities, no quantization)."""
    return i0 * np.power(10.0, -np.asarray(od, dtype=np.float64))


def reconstruct(s, m: StainMatrix | None = None) -> np.ndarray:
    m = m or default_matrix()
    return np.asarray(s, dtype=np.float64) @ m.m


def deconvolve(od, m: StainMatrix | None = None, clamp: bool = True) -> np.ndarray:
    """Solve for per-pixel stain concentrations.

    Negative concentrations (out-of-gamut pixels) are clamped to zero unless
    ``clamp`` is False; use :func:`negative_fraction` on the unclamped result
    to count them.
    """
    m = m or default_matrix()
    od = np.asarray(od, dtype=np.float64)
    if od.shape[-1] != 3:
        raise DimensionError(f"OD map must have 3 channels, got shape {od.shape}")
    s = od @ m.inverse
    return np.maximum(s, 0.0) if clamp else s


def rgb_to_concentrations(img, m: StainMatrix | None = None, i0: float = I0) -> np.ndarray:
    """Fused ``rgb_to_od`` + unclamped ``deconvolve`` over an 8-bit image."""
    m = m or default_matrix()
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"expected an H x W x 3 image, got {img.shape}")
    return _kernels.rgb_to_concentrations(np.ascontiguousarray(img, dtype=np.uint8), m.inverse.copy(), float(i0))


def negative_fraction(s) -> float:
    s = np.asarray(s)
    if s.size == 0:
        return 0.0
    return float(np.mean(np.any(s < 0.0, axis=-1)))


def dab_od(s, m: StainMatrix | None = None) -> np.ndarray:
    """Scalar DAB optical density per pixel.

    This is the L2 magnitude of the DAB-only OD reconstruction
    ``s_dab * m[dab]``, which equals ``s_dab`` for unit-norm rows.
    """
    m = m or default_matrix()
    s = np.asarray(s, dtype=np.float64)
    conc = np.maximum(s[..., m.dab_index], 0.0)
    return conc * np.linalg.norm(m.m[m.dab_index])


def fod(dab, alpha: float = DEFAULT_ALPHA, od_ref: float = OD_MAX) -> np.ndarray:
    """Focal optical density: a power-law remap of normalized DAB OD.

    ``O = clip(dab / od_ref, 0, 1) ** alpha * od_ref``. ``alpha = 1`` is the
    identity on ``[0, od_ref]``; larger ``alpha`` suppresses weak staining
    relative to strong staining.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    if od_ref <= 0:
        raise ValueError(f"od_ref must be positive, got {od_ref}")
    u = np.clip(np.asarray(dab, dtype=np.float64) / od_ref, 0.0, 1.0)
    return u**alpha * od_ref


def reference_od_ceiling(dab_maps, q: float = 99.9) -> float:
    """``q``-th percentile of pooled DAB OD, falling back to :data:`OD_MAX` for blank data."""
    values = [np.asarray(d, dtype=np.float64).ravel() for d in dab_maps]
    if not values or sum(v.size for v in values) == 0:
        return OD_MAX
    ref = float(np.percentile(np.concatenate(values), q))
    return ref if ref > 0 else OD_MAX


class ODCeilingAccumulator:
    """Streaming approximation of :func:`reference_od_ceiling`.

    Accumulates a fixed fine histogram over ``[0, OD_MAX * 2]`` so datasets of
    any size can be reduced deterministically in bounded memory. Resolution is
    ``span / n_bins``.
    """

    def __init__(self, n_bins: int = 1 << 16, span: float = 2 * OD_MAX):
        self.edges = np.linspace(0.0, span, n_bins + 1)
        self.counts = np.zeros(n_bins, dtype=np.int64)

    def add(self, dab) -> None:
        d = np.clip(np.asarray(dab, dtype=np.float64).ravel(), 0.0, self.edges[-1])
        self.counts += np.histogram(d, bins=self.edges)[0]

    def merge(self, other: "ODCeilingAccumulator") -> None:
        self.counts += other.counts

    def percentile(self, q: float = 99.9) -> float:
        total = int(self.counts.sum())
        if total == 0:
            return OD_MAX
        target = q / 100.0 * total
        cum = np.cumsum(self.counts)
        idx = int(np.searchsorted(cum, target, side="left"))
        if idx == 0:
            # essentially unstained reference set
            return OD_MAX
        return float(self.edges[min(idx + 1, len(self.edges) - 1)])


def dab_map(img, m: StainMatrix | None = None, i0: float = I0):
    """DAB OD map of an 8-bit RGB image plus the fraction of out-of-gamut pixels."""
    m = m or default_matrix()
    s = rgb_to_concentrations(img, m, i0)
    frac = negative_fraction(s)
    return dab_od(s, m), frac
