"""Synthetic IHC-like imagery for tests, the acceptance suite and demos."""

from pathlib import Path

import numpy as np

from .io import write_image
from .stain import StainMatrix, default_matrix, od_to_rgb


def power_law_field(rng, shape, exponent: float = 2.0) -> np.ndarray:
    """Zero-mean, unit-variance random field with a ``1/f**exponent`` power spectrum."""
    h, w = shape
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.rfftfreq(w)[None, :]
    f = np.sqrt(fx**2 + fy**2)
    f[0, 0] = 1.0
    amp = f ** (-exponent / 2.0)
    amp[0, 0] = 0.0
    spec = amp * (rng.standard_normal(amp.shape) + 1j * rng.standard_normal(amp.shape))
    field = np.fft.irfft2(spec, s=(h, w))
    return (field - field.mean()) / field.std()


def ihc_image(rng, size=(128, 128), m: StainMatrix | None = None, dab_level: float = 0.6) -> np.ndarray:
    """8-bit RGB image with hematoxylin counterstain and patchy DAB expression.

    Concentrations come from smooth power-law fields, so the image has the
    roughly scale-free statistics of natural tissue. ``dab_level`` scales the
    brown chromogen.
    """
    m = m or default_matrix()
    h_field = power_law_field(rng, size, 2.2)
    d_field = power_law_field(rng, size, 2.6)
    e_field = power_law_field(rng, size, 1.8)
    conc = np.stack(
        [
            0.35 + 0.15 * h_field,
            0.08 + 0.03 * e_field,
            dab_level * np.clip(d_field - 0.3, 0.0, None),
        ],
        axis=-1,
    )
    conc = np.clip(conc, 0.0, None)
    rgb = od_to_rgb(conc @ m.m)
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def perturb(rng, img, noise: float = 4.0, gain: float = 1.0) -> np.ndarray:
    """A plausible 'generated' counterpart: intensity gain plus Gaussian pixel noise."""
    out = np.asarray(img, dtype=np.float64) * gain + rng.normal(0.0, noise, np.shape(img))
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def dab_disk(size: int, radius: float, conc: float, m: StainMatrix | None = None) -> np.ndarray:
    """White background with a single disk of pure DAB at concentration ``conc``."""
    m = m or default_matrix()
    yy, xx = np.mgrid[:size, :size]
    inside = (yy - (size - 1) / 2) ** 2 + (xx - (size - 1) / 2) ** 2 <= radius**2
    rgb = np.full((size, size, 3), 255.0)
    rgb[inside] = od_to_rgb(conc * m.m[m.dab_index])
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def write_corpus(gen_dir, ref_dir, n: int, size=(96, 96), seed: int = 0) -> list:
    """Write ``n`` matched PNG pairs; returns the image ids."""
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    gen_dir.mkdir(parents=True, exist_ok=True)
    ref_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        ref = ihc_image(rng, size, dab_level=rng.uniform(0.2, 1.0))
        gen = perturb(rng, ref, noise=rng.uniform(2.0, 8.0), gain=rng.uniform(0.92, 1.05))
        name = f"img{i:04d}"
        write_image(ref_dir / f"{name}.png", ref)
        write_image(gen_dir / f"{name}.png", gen)
        ids.append(name)
    return ids
