"""Randomized finite-difference checks for every analytic gradient.

Each check draws a random non-degenerate instance from ``rng`` and returns the
max relative error reported by :func:`stainlab.core.finite_diff_check`.
"""

import numpy as np

from . import losses
from .core import finite_diff_check, softmax
from .pgsn import pgsn_apply, pgsn_backward
from .stain import OD_MAX

TOLERANCE = 1e-4


def _pgsn_instance(rng):
    x = rng.normal(0.0, 2.0, size=(5, 4, 3)) + rng.normal(0.0, 1.0, size=3)
    gamma = rng.uniform(0.5, 1.5, size=3) * rng.choice([-1.0, 1.0], size=3)
    beta = rng.normal(size=3)
    rho = float(rng.uniform(0.15, 0.85))
    up = rng.normal(size=x.shape)
    _, cache = pgsn_apply(x, gamma, beta, rho, return_cache=True)
    return x, gamma, beta, rho, up, pgsn_backward(up, cache)


def check_pgsn_x(rng):
    x, gamma, beta, rho, up, g = _pgsn_instance(rng)
    return finite_diff_check(lambda v: float(np.sum(up * pgsn_apply(v, gamma, beta, rho))), x, g.x)


def check_pgsn_gamma(rng):
    x, gamma, beta, rho, up, g = _pgsn_instance(rng)
    return finite_diff_check(lambda v: float(np.sum(up * pgsn_apply(x, v, beta, rho))), gamma, g.gamma)


def check_pgsn_beta(rng):
    x, gamma, beta, rho, up, g = _pgsn_instance(rng)
    return finite_diff_check(lambda v: float(np.sum(up * pgsn_apply(x, gamma, v, rho))), beta, g.beta)


def check_pgsn_rho(rng):
    x, gamma, beta, rho, up, g = _pgsn_instance(rng)
    return finite_diff_check(lambda v: float(np.sum(up * pgsn_apply(x, gamma, beta, v[0]))), np.array([rho]), np.array([g.rho]))


def check_cppc(rng):
    h, w, d = 4, 4, 5
    f_f = rng.normal(size=(h, w, d))
    f_r = rng.normal(size=(h, w, d))
    p_f = softmax(rng.normal(size=(h, w, 2)))
    p_r = softmax(rng.normal(size=(h, w, 2)))
    m_f = np.eye(2)[rng.integers(0, 2, size=(h, w))]
    m_r = np.eye(2)[rng.integers(0, 2, size=(h, w))]
    _, g = losses.cppc_loss_grad(f_f, f_r, p_f, p_r, m_f, m_r)
    errs = [
        finite_diff_check(lambda v: losses.cppc_loss(v, f_r, p_f, p_r, m_f, m_r), f_f, g.f_f),
        finite_diff_check(lambda v: losses.cppc_loss(f_f, v, p_f, p_r, m_f, m_r), f_r, g.f_r),
        finite_diff_check(lambda v: losses.cppc_loss(f_f, f_r, v, p_r, m_f, m_r), p_f, g.p_f),
        finite_diff_check(lambda v: losses.cppc_loss(f_f, f_r, p_f, v, m_f, m_r), p_r, g.p_r),
    ]
    return max(errs)


def _away_from_bin_centres(rng, shape, n_bins, vmax, margin=1e-3):
    width = vmax / n_bins
    v = rng.uniform(0.0, vmax, size=shape)
    while True:
        u = v / width - 0.5
        bad = np.abs(u - np.round(u)) < margin
        if not bad.any():
            return v
        v[bad] = rng.uniform(0.0, vmax, size=int(bad.sum()))


def check_mlpa_histo(rng):
    cfg = losses.MLPAConfig(histo_mode="soft", od_ref=OD_MAX)
    o_f = _away_from_bin_centres(rng, (8, 8), cfg.n_hist_bins, cfg.od_ref)
    o_r = _away_from_bin_centres(rng, (8, 8), cfg.n_hist_bins, cfg.od_ref) ** 1.5 / np.sqrt(cfg.od_ref)
    g = losses.mlpa_histo_grad(o_f, o_r, cfg)
    return finite_diff_check(lambda v: losses.mlpa_histo(v, o_r, cfg), o_f, g)


def check_mlpa_block(rng):
    cfg = losses.MLPAConfig()
    o_f = rng.uniform(0.0, OD_MAX, size=(9, 10))
    o_r = rng.uniform(0.0, OD_MAX, size=(9, 10))
    g = losses.mlpa_block_grad(o_f, o_r, cfg)
    return finite_diff_check(lambda v: losses.mlpa_block(v, o_r, cfg), o_f, g)


def check_ssim(rng):
    k_f = rng.uniform(0.0, 255.0, size=(12, 13, 2))
    k_r = np.clip(k_f + rng.normal(0.0, 40.0, size=k_f.shape), 0.0, 255.0)
    g = losses.ssim_loss_grad(k_f, k_r)
    return finite_diff_check(lambda v: losses.ssim_loss(v, k_r), k_f, g)


def check_gp(rng):
    k_f = rng.uniform(0.0, 255.0, size=(16, 14, 1))
    k_r = rng.uniform(0.0, 255.0, size=(16, 14, 1))
    lambdas = (1.0, 2.0, 4.0)
    g = losses.gp_loss_grad(k_f, k_r, 3, lambdas)
    return finite_diff_check(lambda v: losses.gp_loss(v, k_r, 3, lambdas), k_f, g)


def check_nce(rng):
    d = 16
    anchor = rng.normal(size=d)
    positive = anchor + rng.normal(0.0, 0.5, size=d)
    negatives = list(rng.normal(size=(8, d)))
    g = losses.nce_loss_grad(anchor, positive, negatives)
    return finite_diff_check(lambda v: losses.nce_loss(v, positive, negatives), anchor, g)


CHECKS = {
    "pgsn.x": check_pgsn_x,
    "pgsn.gamma": check_pgsn_gamma,
    "pgsn.beta": check_pgsn_beta,
    "pgsn.rho": check_pgsn_rho,
    "cppc": check_cppc,
    "mlpa-histo": check_mlpa_histo,
    "mlpa-block": check_mlpa_block,
    "ssim": check_ssim,
    "gp": check_gp,
    "nce": check_nce,
}

GROUPS = {"pgsn": [k for k in CHECKS if k.startswith("pgsn.")], "all": list(CHECKS)}


def resolve(name: str) -> list:
    if name in GROUPS:
        return GROUPS[name]
    if name in CHECKS:
        return [name]
    raise KeyError(f"unknown gradient check {name!r}; choose from {sorted(set(CHECKS) | set(GROUPS))}")


def run(name: str = "all", trials: int = 20, seed: int = 0) -> dict:
    """Max relative error over ``trials`` random instances for each selected check."""
    out = {}
    for key in resolve(name):
        rng = np.random.default_rng([seed, list(CHECKS).index(key)])
        out[key] = max(CHECKS[key](rng) for _ in range(trials))
    return out
