"""Batch evaluation of generated / reference image pairs."""

import csv
import io as _io
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from math import isqrt
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from . import losses, metrics
from .errors import ConfigError, DimensionError, ImageReadError, InputError, StainlabError
from .io import IMAGE_SUFFIXES, read_feature_set, read_fmap, read_image
from .stain import ODCeilingAccumulator, StainMatrix, dab_od, default_matrix, fod, rgb_to_concentrations

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
GAMUT_FLAG_FRACTION = 0.05
EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    gen_dir: str = ""
    ref_dir: str = ""
    out_dir: str = "stainlab-report"
    stain: str = "HER2"
    alpha: float = 1.8
    beta: float = 0.2
    bins: int = 20
    blocks: int = 16
    stain_matrix: list | None = None
    tau_m: float = 0.15
    weights: dict = field(default_factory=dict)
    tile_size: int = 512
    workers: int = 1
    od_ref: float | str = "auto"
    features_gen: str | None = None
    features_ref: str | None = None
    fmap_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        data.update(overrides)
        return cls.from_dict(data)

    def validate(self) -> "RunConfig":
        for name in ("gen_dir", "ref_dir"):
            if not Path(getattr(self, name) or "").is_dir():
                raise ConfigError(f"{name} {getattr(self, name)!r} is not a directory")
        checks = [
            (self.alpha >= 1.0, "alpha must be >= 1"),
            (self.beta >= 0.0, "beta must be >= 0"),
            (int(self.bins) >= 2, "bins must be >= 2"),
            (int(self.blocks) >= 1 and isqrt(int(self.blocks)) ** 2 == int(self.blocks), "blocks must be a perfect square"),
            (0.0 < self.tau_m <= 1.0, "tau_m must be in (0, 1]"),
            (int(self.tile_size) >= 16, "tile_size must be >= 16"),
            (int(self.workers) >= 1, "workers must be >= 1"),
            (self.od_ref == "auto" or (isinstance(self.od_ref, (int, float)) and self.od_ref > 0), "od_ref must be 'auto' or positive"),
            ((self.features_gen is None) == (self.features_ref is None), "features_gen and features_ref go together"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            metrics.thresholds_for(self.stain)
            self.matrix()
            self.loss_weights()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def matrix(self) -> StainMatrix:
        if self.stain_matrix is None:
            return default_matrix()
        vals = np.asarray(self.stain_matrix, dtype=np.float64)
        if vals.size != 9:
            raise ConfigError("stain_matrix needs nine reals (three stain rows)")
        return StainMatrix.from_rows(vals.reshape(3, 3))

    def loss_weights(self) -> losses.LossWeights:
        return losses.LossWeights(**self.weights)

    def mlpa_config(self, od_ref: float) -> losses.MLPAConfig:
        return losses.MLPAConfig(beta=self.beta, n_hist_bins=int(self.bins), n_blocks=int(self.blocks), od_ref=od_ref)


def worker_count(cfg: RunConfig) -> int:
    env = os.environ.get("STAINLAB_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"STAINLAB_WORKERS={env!r} is not an integer") from None
        if n < 1:
            raise ConfigError("STAINLAB_WORKERS must be >= 1")
        return n
    return int(cfg.workers)


# ---------------------------------------------------------------------------
# Pairing and tiling
# ---------------------------------------------------------------------------


class Pair(NamedTuple):
    id: str
    gen: Path
    ref: Path


@dataclass
class Pairing:
    pairs: list
    orphans_gen: list
    orphans_ref: list


def _index_dir(d):
    out = {}
    for p in sorted(Path(d).iterdir()):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            if p.stem in out:
                raise InputError(f"{d}: ambiguous stem {p.stem!r} ({out[p.stem].name}, {p.name})")
            out[p.stem] = p
    return out


def pair_images(gen_dir, ref_dir) -> Pairing:
    """Match generated and reference images by file stem (extension ignored)."""
    gen = _index_dir(gen_dir)
    ref = _index_dir(ref_dir)
    common = sorted(set(gen) & set(ref))
    orphans_gen = sorted(set(gen) - set(ref))
    orphans_ref = sorted(set(ref) - set(gen))
    if not common:
        raise InputError(f"no matching image stems; unmatched generated: {orphans_gen}, unmatched reference: {orphans_ref}")
    return Pairing([Pair(s, gen[s], ref[s]) for s in common], orphans_gen, orphans_ref)


class Tile(NamedTuple):
    y: int
    x: int
    data: np.ndarray
    remainder: bool


def _starts(n, size, stride):
    starts = list(range(0, n - size + 1, stride))
    if starts[-1] + size < n:
        starts.append(starts[-1] + stride)
    return starts


def tile(image, size: int, stride: int | None = None) -> Iterator[Tile]:
    """Row-major tiles of ``size x size``; edge tiles that run out of pixels are truncated and flagged."""
    image = np.asarray(image)
    stride = stride or size
    h, w = image.shape[:2]
    if size > h or size > w:
        raise DimensionError(f"tile size {size} exceeds image {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be positive")
    for y in _starts(h, size, stride):
        for x in _starts(w, size, stride):
            data = image[y : y + size, x : x + size]
            yield Tile(y, x, data, data.shape[0] < size or data.shape[1] < size)


# ---------------------------------------------------------------------------
# Per-pair evaluation
# ---------------------------------------------------------------------------


@dataclass
class PairRow:
    id: str
    gen_file: str
    ref_file: str
    height: int
    width: int
    od_sum_gen: float
    od_sum_ref: float
    od_delta: float
    fod_mean_gen: float
    fod_mean_ref: float
    psnr: float
    ssim: float
    mlpa_avg: float
    mlpa_histo: float
    mlpa_block: float
    mlpa_total: float
    cppc: float | None
    grade_gen: str
    grade_ref: str
    clamped_frac_gen: float
    clamped_frac_ref: float
    gamut_flag: bool


class PairSkipped(StainlabError):
    def __init__(self, pair_id, reason):
        super().__init__(f"{pair_id}: {reason}")
        self.pair_id = pair_id
        self.reason = reason


def dab_tiled(img, m: StainMatrix, tile_size: int):
    """DAB OD map computed tile by tile; returns ``(map, clamped fraction, per-tile seconds)``."""
    h, w = img.shape[:2]
    size = min(tile_size, h, w)
    out = np.empty((h, w))
    negative = 0
    timings = []
    for t in tile(img, size):
        t0 = time.perf_counter()
        s = rgb_to_concentrations(t.data, m)
        th, tw = t.data.shape[:2]
        out[t.y : t.y + th, t.x : t.x + tw] = dab_od(s, m)
        negative += int(np.count_nonzero(np.any(s < 0.0, axis=-1)))
        timings.append(time.perf_counter() - t0)
    return out, negative / (h * w), timings


def _fmap_inputs(cfg, pair_id):
    root = Path(cfg.fmap_dir)
    names = {k: root / f"{pair_id}.{k}.fmap" for k in ("gen_feat", "gen_prob", "ref_feat", "ref_prob")}
    if not all(p.exists() for p in names.values()):
        return None
    return {k: read_fmap(p) for k, p in names.items()}


def _pool_to(o, hw):
    h, w = o.shape
    fh, fw = hw
    if (h, w) == (fh, fw):
        return o
    if h % fh or w % fw:
        raise DimensionError(f"FOD map {o.shape} cannot be pooled onto feature grid {hw}")
    return o.reshape(fh, h // fh, fw, w // fw).mean(axis=(1, 3))


def evaluate_pair(pair: Pair, cfg: RunConfig, od_ref: float, m: StainMatrix | None = None, timings: list | None = None) -> PairRow:
    """Compute every per-pair metric. Raises :class:`PairSkipped` for unusable pairs."""
    m = m or cfg.matrix()
    try:
        gen = read_image(pair.gen)
        ref = read_image(pair.ref)
    except ImageReadError as exc:
        raise PairSkipped(pair.id, str(exc)) from None
    if gen.shape != ref.shape:
        raise PairSkipped(pair.id, f"dimension mismatch {gen.shape[:2]} vs {ref.shape[:2]}")
    try:
        dab_g, frac_g, t_g = dab_tiled(gen, m, int(cfg.tile_size))
        dab_r, frac_r, t_r = dab_tiled(ref, m, int(cfg.tile_size))
        fod_g = fod(dab_g, cfg.alpha, od_ref)
        fod_r = fod(dab_r, cfg.alpha, od_ref)
        terms = losses.mlpa_terms(fod_g, fod_r, cfg.mlpa_config(od_ref))
        psnr = metrics.psnr(gen, ref)
        ssim = metrics.ssim(gen, ref)
        cppc = None
        if cfg.fmap_dir:
            fm = _fmap_inputs(cfg, pair.id)
            if fm is not None:
                hw = fm["gen_feat"].shape[:2]
                m_f = losses.masks_from_fod(_pool_to(fod_g, hw), od_ref, cfg.tau_m)
                m_r = losses.masks_from_fod(_pool_to(fod_r, hw), od_ref, cfg.tau_m)
                cppc = losses.cppc_loss(fm["gen_feat"], fm["ref_feat"], fm["gen_prob"], fm["ref_prob"], m_f, m_r)
    except StainlabError as exc:
        raise PairSkipped(pair.id, str(exc)) from None
    if timings is not None:
        timings.extend(t_g + t_r)
    od_g = float(np.sum(dab_g))
    od_r = float(np.sum(dab_r))
    return PairRow(
        id=pair.id,
        gen_file=pair.gen.name,
        ref_file=pair.ref.name,
        height=int(gen.shape[0]),
        width=int(gen.shape[1]),
        od_sum_gen=od_g,
        od_sum_ref=od_r,
        od_delta=od_g - od_r,
        fod_mean_gen=float(fod_g.mean()),
        fod_mean_ref=float(fod_r.mean()),
        psnr=psnr,
        ssim=ssim,
        mlpa_avg=terms.avg,
        mlpa_histo=terms.histo,
        mlpa_block=terms.block,
        mlpa_total=terms.total,
        cppc=cppc,
        grade_gen=metrics.grade(cfg.stain, od_g),
        grade_ref=metrics.grade(cfg.stain, od_r),
        clamped_frac_gen=frac_g,
        clamped_frac_ref=frac_r,
        gamut_flag=bool(frac_g > GAMUT_FLAG_FRACTION or frac_r > GAMUT_FLAG_FRACTION),
    )


# ---------------------------------------------------------------------------
# Dataset evaluation and reports
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    rows: list
    summary: dict
    skipped: list = field(default_factory=list)
    orphans: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        partial = self.skipped or self.orphans.get("gen") or self.orphans.get("ref")
        return EXIT_PARTIAL if partial else EXIT_OK

    def to_json(self) -> str:
        doc = {
            "schema": SCHEMA_VERSION,
            "summary": self.summary,
            "rows": [asdict(r) for r in self.rows],
            "skipped": self.skipped,
            "orphans": self.orphans,
        }
        return json.dumps(doc, indent=1, sort_keys=False, allow_nan=False) + "\n"

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"schema={SCHEMA_VERSION}"])
        names = [f.name for f in fields(PairRow)]
        w.writerow(names)
        for r in self.rows:
            w.writerow([_cell(getattr(r, n)) for n in names])
        return buf.getvalue()

    def curve_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"schema={SCHEMA_VERSION}"])
        w.writerow(["index", "id", "cum_od_gen", "cum_od_ref"])
        c = self.summary.get("curve") or {}
        for i, (pid, a, b) in enumerate(zip(c.get("ids", []), c.get("cum_od_gen", []), c.get("cum_od_ref", []))):
            w.writerow([i, pid, repr(a), repr(b)])
        return buf.getvalue()

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "report.csv", "json": out / "report.json", "curve": out / "curve.csv"}
        paths["csv"].write_text(self.to_csv())
        paths["json"].write_text(self.to_json())
        paths["curve"].write_text(self.curve_csv())
        return paths


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def summarize(rows, cfg: RunConfig, od_ref: float, fid: float | None = None) -> dict:
    """Dataset-level metrics; a pure function of the (id-sorted) rows."""
    test = [r.od_sum_gen for r in rows]
    label = [r.od_sum_ref for r in rows]
    summary = {
        "stain": cfg.stain,
        "alpha": float(cfg.alpha),
        "od_ref": float(od_ref),
        "n_pairs": len(rows),
        "iod": None,
        "iod_per_image": None,
        "pearson_r": None,
        "fid": fid,
        "mean_psnr": None,
        "mean_ssim": None,
        "curve": None,
    }
    if rows:
        summary["iod"] = metrics.iod(test, label)
        summary["iod_per_image"] = metrics.iod_per_image(test, label)
        summary["mean_psnr"] = math.fsum(r.psnr for r in rows) / len(rows)
        summary["mean_ssim"] = math.fsum(r.ssim for r in rows) / len(rows)
        cg, cr, idx = metrics.cumulative_curve(test, label, "by_id", [r.id for r in rows])
        summary["curve"] = {"order": "by_id", "ids": [rows[i].id for i in idx], "cum_od_gen": cg.tolist(), "cum_od_ref": cr.tolist()}
        try:
            summary["pearson_r"] = metrics.pearson_r(test, label)
        except StainlabError as exc:
            log.warning("Pearson-R undefined: %s", exc)
    return summary


def check_summary(report: EvalReport) -> None:
    """Recompute the summary's IOD from the rows and fail loudly on disagreement."""
    rows = report.rows
    if not rows:
        return
    from_deltas = math.fsum(r.od_delta for r in rows)
    scale = max(1.0, math.fsum(abs(r.od_sum_gen) + abs(r.od_sum_ref) for r in rows))
    if abs(report.summary["iod"] - from_deltas) > 1e-9 * scale:
        raise RuntimeError(f"summary IOD {report.summary['iod']} disagrees with row deltas {from_deltas}")
    if report.summary["n_pairs"] != len(rows):
        raise RuntimeError("summary pair count disagrees with rows")


def _ref_ceiling(pairs, m, workers):
    def one(p):
        acc = ODCeilingAccumulator()
        try:
            s = rgb_to_concentrations(read_image(p.ref), m)
        except ImageReadError:
            return acc
        acc.add(dab_od(s, m))
        return acc

    total = ODCeilingAccumulator()
    with ThreadPoolExecutor(max_workers=workers) as ex:
        for acc in ex.map(one, pairs):
            total.merge(acc)
    return total.percentile(99.9)


def evaluate_dataset(cfg: RunConfig, write: bool = True) -> EvalReport:
    """Evaluate every matched pair and (optionally) write report.csv / report.json / curve.csv.

    Per-tile wall-clock timings go to a separate ``timing.json`` so the report
    files stay byte-identical across runs and worker counts.
    """
    cfg.validate()
    workers = worker_count(cfg)
    m = cfg.matrix()
    pairing = pair_images(cfg.gen_dir, cfg.ref_dir)
    for side, names in (("generated", pairing.orphans_gen), ("reference", pairing.orphans_ref)):
        for n in names:
            log.warning("unmatched %s image: %s", side, n)
    od_ref = float(cfg.od_ref) if cfg.od_ref != "auto" else _ref_ceiling(pairing.pairs, m, workers)

    def one(pair):
        t = []
        try:
            return evaluate_pair(pair, cfg, od_ref, m, t), t
        except PairSkipped as exc:
            log.warning("skipping %s", exc)
            return exc, t

    with ThreadPoolExecutor(max_workers=workers) as ex:
        results = list(ex.map(one, pairing.pairs))

    rows, skipped, timing = [], [], {}
    for pair, (res, t) in zip(pairing.pairs, results):
        if isinstance(res, PairSkipped):
            skipped.append({"id": res.pair_id, "reason": res.reason})
        else:
            rows.append(res)
            timing[pair.id] = t
    rows.sort(key=lambda r: r.id)
    skipped.sort(key=lambda s: s["id"])

    fid = None
    if cfg.features_gen:
        fid = metrics.frechet_distance(read_feature_set(cfg.features_gen), read_feature_set(cfg.features_ref))

    report = EvalReport(rows, summarize(rows, cfg, od_ref, fid), skipped, {"gen": pairing.orphans_gen, "ref": pairing.orphans_ref})
    check_summary(report)
    if write:
        paths = report.write(cfg.out_dir)
        per_tile = [s for ts in timing.values() for s in ts]
        (Path(cfg.out_dir) / "timing.json").write_text(
            json.dumps({"workers": workers, "n_tiles": len(per_tile), "mean_tile_seconds": float(np.mean(per_tile)) if per_tile else None, "per_pair": timing}, indent=1) + "\n"
        )
        log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return report
