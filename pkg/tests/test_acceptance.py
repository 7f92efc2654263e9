"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -s`` to see the lines
inline, or ``python3 tests/test_acceptance.py``.
"""

import filecmp
import math
import time

import numpy as np
import pytest

from stainlab import _kernels, gradcheck, losses, metrics, pgsn, pipeline, stain
from stainlab.core import instance_norm, layer_norm
from stainlab.synthetic import ihc_image, write_corpus

RESULTS = {}


def report(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


@pytest.fixture(scope="module", autouse=True)
def warm_up():
    # compile numba kernels outside any timed section
    rng = np.random.default_rng(0)
    img = ihc_image(rng, (24, 24))
    stain.rgb_to_concentrations(img)
    metrics.ssim(img, img[::-1])
    losses.histogram(rng.uniform(size=10), 4, 1.0, "soft")
    yield
    if RESULTS:
        print("\n" + "\n".join(RESULTS[k] for k in sorted(RESULTS)))


def test_01_deconvolution_round_trip():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    m = stain.default_matrix()
    od = rng.uniform(0.0, stain.OD_MAX, size=(1000, 3))
    err = float(np.max(np.abs(stain.reconstruct(stain.deconvolve(od, m, clamp=False), m) - od)))
    dt = time.perf_counter() - t0
    report(1, "deconvolution round trip", err < 1e-9 and dt < 1.0, f"max err {err:.2e}, {dt:.3f}s")


def test_02_fod_contract():
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    od_ref = 1.7
    d = rng.uniform(0.0, od_ref, size=10_000)
    identity = np.array_equal(stain.fod(d, 1.0, od_ref), d)
    u = rng.uniform(0.0, 1.0, size=10_000)
    u = u[(u > 0) & (u < 1)]
    below = bool(np.all(stain.fod(u, 1.8, 1.0) < stain.fod(u, 1.0, 1.0)))
    argmax_ok = all(
        np.argmax(stain.fod(mp, 1.8, od_ref)) == np.argmax(mp)
        for mp in (rng.uniform(0.0, od_ref, size=(16, 16)) for _ in range(100))
    )
    dt = time.perf_counter() - t0
    report(2, "FOD contract", identity and below and argmax_ok and dt < 1.0, f"identity={identity} below={below} argmax={argmax_ok}, {dt:.3f}s")


def test_03_mlpa_dead_zone():
    rng = np.random.default_rng(3)
    inside, outside = [], []
    for _ in range(50):
        o_r = rng.uniform(0.05, 2.0, size=(16, 16))
        mu = o_r.mean()
        inside.append(losses.mlpa_avg(o_r + 0.19 * mu, o_r, beta=0.2))
        outside.append(abs(losses.mlpa_avg(o_r - 0.21 * mu, o_r, beta=0.2) - 0.21 * mu))
    ok = all(v == 0.0 for v in inside) and max(outside) < 1e-12
    report(3, "MLPA dead zone", ok, f"inside max {max(inside)}, outside err {max(outside):.1e}")


def _permute_blocks(o, grid, perm):
    bh, bw = o.shape[0] // grid, o.shape[1] // grid
    blocks = o.reshape(grid, bh, grid, bw).transpose(0, 2, 1, 3).reshape(grid * grid, bh, bw)
    return blocks[perm].reshape(grid, grid, bh, bw).transpose(0, 2, 1, 3).reshape(o.shape)


def test_04_histogram_block_separation():
    rng = np.random.default_rng(4)
    cfg = losses.MLPAConfig(n_hist_bins=20, n_blocks=16)
    changed, histo_err = 0, 0.0
    for _ in range(50):
        # blocks with distinct means so any non-trivial permutation moves mass
        o_f = stain.fod(rng.uniform(0, stain.OD_MAX, size=(32, 32)) * np.kron(rng.uniform(0.2, 1.0, (4, 4)), np.ones((8, 8))))
        o_r = np.clip(o_f + rng.normal(0.0, 0.05, size=o_f.shape), 0.0, stain.OD_MAX)
        perm = rng.permutation(16)
        while np.array_equal(perm, np.arange(16)):
            perm = rng.permutation(16)
        p = _permute_blocks(o_f, 4, perm)
        changed += losses.mlpa_block(p, o_r, cfg) != losses.mlpa_block(o_f, o_r, cfg)
        histo_err = max(histo_err, abs(losses.mlpa_histo(p, o_r, cfg) - losses.mlpa_histo(o_f, o_r, cfg)))
    report(4, "histogram/block separation", changed == 50 and histo_err < 1e-12, f"block changed {changed}/50, histo drift {histo_err:.1e}")


def test_05_cppc_correctness():
    f = np.eye(2).reshape(1, 2, 2)
    onehot = np.eye(2).reshape(1, 2, 2)
    # brute force: softmax of cosine profile [1, 0] against the one-hot target
    p_hat = [math.exp(1) / (math.exp(1) + 1), 1 / (math.exp(1) + 1)]
    per_entry = abs(p_hat[0] - 1) + abs(p_hat[1] - 0)
    oracle = 2 * (2 * per_entry) / (2 * 1 * 2)  # both directions, both pixels, / (C H W)
    value = losses.cppc_loss(f, f, onehot, onehot, onehot, onehot)
    rng = np.random.default_rng(5)
    feats = rng.normal(size=(6, 6, 5))
    probs = losses.masks_from_fod(rng.uniform(0, stain.OD_MAX, size=(6, 6)))
    probs = 0.8 * probs + 0.1
    masks = np.eye(2)[rng.integers(0, 2, size=(6, 6))]
    other = rng.normal(size=(6, 6, 5))
    swap = abs(losses.cppc_loss(feats, other, probs, probs, masks, masks) - losses.cppc_loss(other, feats, probs, probs, masks, masks))
    ok = abs(value - oracle) < 1e-9 and abs(oracle / 2 - 0.269) < 5e-4 and swap < 1e-12
    report(5, "CPPC correctness", ok, f"loss {value:.12f} vs {oracle:.12f} (per entry {oracle / 2:.4f}), swap diff {swap:.1e}")


def test_06_gradient_suite():
    t0 = time.perf_counter()
    errs = gradcheck.run("all", trials=20, seed=0)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    ok = all(v < 1e-4 for v in errs.values()) and dt < 60.0
    report(6, "gradient suite", ok, f"{len(errs)} checks x 20 trials, worst {worst} {errs[worst]:.2e}, {dt:.1f}s")


def test_07_pgsn_limits():
    rng = np.random.default_rng(7)
    # std ~10 keeps eps / var near 1e-7, below the variance tolerance
    x = rng.normal(3.0, 10.0, size=(16, 16, 4)) + rng.normal(0, 5, size=4)
    one, zero = np.ones(4), np.zeros(4)
    y1 = pgsn.pgsn_apply(x, one, zero, 1.0)
    y0 = pgsn.pgsn_apply(x, one, zero, 0.0)
    mu1 = float(np.max(np.abs(y1.mean(axis=(0, 1)))))
    var1 = float(np.max(np.abs(y1.var(axis=(0, 1)) - 1)))
    mu0, var0 = abs(float(y0.mean())), abs(float(y0.var()) - 1)
    g, b, rho = rng.normal(size=4), rng.normal(size=4), 0.37
    comp = float(np.max(np.abs(pgsn.pgsn_apply(x, g, b, rho) - (g * (rho * instance_norm(x) + (1 - rho) * layer_norm(x)) + b))))
    ok = mu1 < 1e-9 and var1 < 1e-6 and mu0 < 1e-9 and var0 < 1e-6 and comp < 1e-10
    report(7, "PGSN limits", ok, f"IN |mu| {mu1:.1e} |var-1| {var1:.1e}; LN |mu| {mu0:.1e} |var-1| {var0:.1e}; composition {comp:.1e}")


def test_08_metric_identities():
    rng = np.random.default_rng(8)
    x = rng.uniform(10, 5000, size=40)
    r_err = max(abs(metrics.pearson_r(x, a * x + b) - 1.0) for a, b in [(0.5, 3.0), (2.0, -100.0), (7.3, 0.0)])
    iod0 = metrics.iod(x, x)
    feats = rng.normal(size=(500, 8))
    self_fd = metrics.frechet_distance(feats, feats)
    mu1, mu2 = np.array([1.0, -2.0, 0.5]), np.array([0.0, 1.0, 2.5])
    point = metrics.frechet_distance(np.tile(mu1, (20, 1)), np.tile(mu2, (20, 1)))
    point_err = abs(point - float((mu1 - mu2) @ (mu1 - mu2)))
    signs = np.array([[1, 1], [1, -1], [-1, 1], [-1, -1]], dtype=float)
    a = signs * np.sqrt(np.array([1.0, 4.0]) * 0.75)
    b = signs * np.sqrt(np.array([9.0, 1.0]) * 0.75)
    diag_err = abs(metrics.frechet_distance(a, b) - 5.0)
    ok = r_err < 1e-12 and iod0 == 0.0 and self_fd < 1e-6 and point_err < 1e-9 and diag_err < 1e-9
    report(8, "metric identities", ok, f"R err {r_err:.1e}, IOD {iod0}, FD(A,A) {self_fd:.1e}, point err {point_err:.1e}, diag err {diag_err:.1e}")


def test_09_grading_thresholds():
    table = [
        ("HER2", 499.0, "0"),
        ("HER2", 500.0, "1+"),
        ("HER2", 2000.0, "2+"),
        ("HER2", 5000.0, "3+"),
        ("ER", 999.0, "negative"),
        ("ER", 1000.0, "positive"),
        ("PR", 1000.0, "positive"),
        ("Ki67", 2000.0, "positive"),
    ]
    got = [metrics.grade(m, od) for m, od, _ in table]
    bad = [(t, g) for t, g in zip(table, got) if g != t[2]]
    report(9, "grading thresholds", not bad, f"{len(table) - len(bad)}/{len(table)} boundary cases" + (f", wrong: {bad}" if bad else ""))


def test_10_blur_trend():
    rng = np.random.default_rng(10)
    fails = []
    ps, ss = [], []
    for i in range(20):
        img = ihc_image(rng, (96, 96), dab_level=rng.uniform(0.3, 1.0))
        res = metrics.blur_probe(img, (3, 5, 7))
        p = [r.psnr for r in res]
        s = [r.ssim for r in res]
        ps.append(p)
        ss.append(s)
        if not (p[0] > p[1] > p[2] and s[0] > s[1] > s[2]):
            fails.append(i)
    mp, ms = np.mean(ps, axis=0), np.mean(ss, axis=0)
    report(10, "blur trend", not fails, f"{20 - len(fails)}/20 strictly decreasing; mean PSNR {mp.round(2).tolist()} SSIM {ms.round(4).tolist()}")


def test_11_total_loss():
    unit = losses.LossComponents(1, 1, 1, 1, 1, 1)
    value = losses.total_loss(unit)
    exact = abs(value - 15.55) < 1e-12
    c = losses.LossComponents(0.4, 1.3, 0.8, 0.25, 0.6, 0.12)
    base = losses.LossWeights()
    lin = []
    for name in ("lambda_M", "lambda_C", "lambda_S", "lambda_G"):
        vals = [losses.total_loss(c, losses.LossWeights(**{**vars(base), name: w})) for w in (0.0, 1.0, 2.0, 5.0)]
        slope = vals[1] - vals[0]
        lin.append(max(abs(vals[k] - (vals[0] + w * slope)) for k, w in ((2, 2.0), (3, 5.0))))
    ok = exact and max(lin) < 1e-12
    report(11, "total-loss composition", ok, f"unit total {value!r}, max linearity residual {max(lin):.1e}")


def test_12_pipeline_determinism(tmp_path):
    gen, ref = tmp_path / "gen", tmp_path / "ref"
    write_corpus(gen, ref, 50, size=(96, 96), seed=12)
    t0 = time.perf_counter()
    outs = {}
    for w in (1, 8):
        cfg = pipeline.RunConfig(gen_dir=str(gen), ref_dir=str(ref), out_dir=str(tmp_path / f"out{w}"), workers=w)
        rep = pipeline.evaluate_dataset(cfg)
        outs[w] = tmp_path / f"out{w}"
        assert rep.exit_code == 0 and len(rep.rows) == 50
    dt = time.perf_counter() - t0
    names = ["report.csv", "report.json", "curve.csv"]
    match, mismatch, errors = filecmp.cmpfiles(outs[1], outs[8], names, shallow=False)
    ok = match == names and dt < 30.0
    report(12, "pipeline determinism", ok, f"identical {match}, differing {mismatch + errors}, {dt:.1f}s ({_kernels.backend()} kernels)")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
