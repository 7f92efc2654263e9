"""``stainlab`` command line.

Exit codes: 0 success, 1 fatal error, 2 partial result (skipped pairs),
64 usage error, 78 configuration error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, losses, metrics, pipeline
from .errors import ConfigError, StainlabError
from .io import read_feature_set, read_fmap, read_image, write_image, write_pgm16
from .pgsn import GeneratorConfig, GeneratorWeights, generator_forward, init_weights, load_prompt_embedding, seeded_prompts
from .stain import DEFAULT_ALPHA, OD_MAX, StainMatrix, dab_map, dab_od, default_matrix, fod, negative_fraction, rgb_to_concentrations

EX_USAGE = 64
EX_CONFIG = 78

log = logging.getLogger("stainlab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(top: bool):
    # subcommand copies must not reset values given before the subcommand
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p = _Parser(add_help=False)
    p.add_argument("--config", metavar="PATH", default=d(None), help="JSON file whose keys override the corresponding flags")
    p.add_argument("--seed", type=int, default=d(0))
    p.add_argument("--json", action="store_true", default=d(False), help="machine-readable JSON on stdout")
    p.add_argument("--log-level", default=d("WARNING"))
    return p


def _stain_opts():
    p = _Parser(add_help=False)
    p.add_argument("--stain-matrix", type=float, nargs=9, metavar="X", help="three stain rows (H, E, DAB) of R,G,B OD coefficients")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="FOD focusing exponent (default 1.8)")
    p.add_argument("--od-ref", type=float, default=OD_MAX, help="reference OD ceiling for FOD normalization")
    return p


def build_parser() -> argparse.ArgumentParser:
    common, stain = _common(top=False), _stain_opts()
    parser = _Parser(prog="stainlab", description=__doc__.splitlines()[0], parents=[_common(top=True)])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("deconvolve", parents=[common, stain], help="stain concentrations of an RGB image")
    p.add_argument("image")
    p.add_argument("out", help="output .npy with H x W x 3 clamped concentrations")

    p = sub.add_parser("fod", parents=[common, stain], help="focal optical density map as 16-bit PGM")
    p.add_argument("image")
    p.add_argument("out")

    p = sub.add_parser("losses", parents=[common, stain], help="consistency losses for one image pair")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--blocks", type=int, default=16)
    p.add_argument("--histo-mode", choices=("hard", "soft"), default="hard")
    p.add_argument("--squared", action="store_true")
    p.add_argument("--tau-m", type=float, default=0.15)
    p.add_argument("--gp-levels", type=int, default=4)
    p.add_argument("--fmaps", nargs=4, metavar=("GEN_FEAT", "GEN_PROB", "REF_FEAT", "REF_PROB"))
    p.add_argument("--adv", type=float, default=0.0, help="externally computed adversarial value")
    p.add_argument("--nce", type=float, default=0.0, help="externally computed NCE value")
    p.add_argument("--weights", type=float, nargs=4, metavar=("LM", "LC", "LS", "LG"))

    p = sub.add_parser("evaluate", parents=[common], help="dataset report over matched image pairs")
    p.add_argument("--gen", dest="gen_dir", required=False)
    p.add_argument("--ref", dest="ref_dir", required=False)
    p.add_argument("--out", dest="out_dir", default="stainlab-report")
    p.add_argument("--stain", default="HER2")
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--blocks", type=int, default=16)
    p.add_argument("--tau-m", type=float, default=0.15)
    p.add_argument("--tile-size", type=int, default=512)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--od-ref", default="auto")
    p.add_argument("--stain-matrix", type=float, nargs=9)
    p.add_argument("--features-gen")
    p.add_argument("--features-ref")
    p.add_argument("--fmap-dir")

    p = sub.add_parser("fid", parents=[common], help="Fréchet distance between two feature files")
    p.add_argument("features_a")
    p.add_argument("features_b")

    p = sub.add_parser("generate", parents=[common], help="toy prompt-conditioned generator forward pass")
    p.add_argument("image")
    p.add_argument("out")
    p.add_argument("--stain", default="HER2")
    p.add_argument("--prompts", help="PEMB prompt fixture (default: seeded orthonormal prompts)")
    p.add_argument("--checkpoint", help="weights checkpoint prefix (default: seeded init)")
    p.add_argument("--blocks", type=int, default=6)
    p.add_argument("--channels", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=16)

    p = sub.add_parser("blur-probe", parents=[common], help="PSNR/SSIM of blurred copies against the original")
    p.add_argument("image")
    p.add_argument("--kernels", type=int, nargs="+", default=[3, 5, 7])
    p.add_argument("--no-quantize", action="store_true")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of analytic gradients")
    p.add_argument("--loss", default="all", help="pgsn, cppc, mlpa-histo, mlpa-block, ssim, gp, nce or all")
    p.add_argument("--trials", type=int, default=20)
    return parser


def _apply_config(args):
    if not args.config:
        return args
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{args.config}: top level must be a JSON object")
    extra = {}
    for key, value in data.items():
        dest = key.replace("-", "_")
        if hasattr(args, dest) and dest not in ("command", "config"):
            setattr(args, dest, value)
        elif args.command == "evaluate" and dest in {"weights"}:
            extra[dest] = value
        else:
            raise ConfigError(f"{args.config}: unknown key {key!r} for '{args.command}'")
    args._extra = extra
    return args


def _matrix(values):
    return default_matrix() if values is None else StainMatrix.from_rows(np.asarray(values, dtype=float).reshape(3, 3))


def _emit(args, payload, lines):
    if args.json:
        print(json.dumps(payload, indent=1))
    else:
        for line in lines:
            print(line)


def cmd_deconvolve(args):
    m = _matrix(args.stain_matrix)
    raw = rgb_to_concentrations(read_image(args.image), m)
    frac = negative_fraction(raw)
    np.save(args.out, np.maximum(raw, 0.0).astype(np.float32))
    payload = {"out": args.out, "clamped_fraction": frac, "flagged": frac > pipeline.GAMUT_FLAG_FRACTION, "dab_od_sum": float(dab_od(raw, m).sum())}
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def cmd_fod(args):
    m = _matrix(args.stain_matrix)
    dab, frac = dab_map(read_image(args.image), m)
    o = fod(dab, args.alpha, args.od_ref)
    write_pgm16(args.out, o, args.od_ref, f"stainlab FOD alpha={args.alpha!r} od_ref={args.od_ref!r}\nvalue = pixel / 65535 * od_ref")
    payload = {"out": args.out, "alpha": args.alpha, "od_ref": args.od_ref, "fod_mean": float(o.mean()), "dab_od_sum": float(dab.sum()), "clamped_fraction": frac}
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def cmd_losses(args):
    m = _matrix(args.stain_matrix)
    gen, ref = read_image(args.gen), read_image(args.ref)
    if gen.shape != ref.shape:
        raise StainlabError(f"image shapes differ: {gen.shape} vs {ref.shape}")
    o_f = fod(dab_map(gen, m)[0], args.alpha, args.od_ref)
    o_r = fod(dab_map(ref, m)[0], args.alpha, args.od_ref)
    cfg = losses.MLPAConfig(args.beta, args.bins, args.blocks, args.od_ref, args.histo_mode, args.squared)
    terms = losses.mlpa_terms(o_f, o_r, cfg)
    cppc = 0.0
    if args.fmaps:
        gf, gp, rf, rp = (read_fmap(p) for p in args.fmaps)
        hw = gf.shape[:2]
        m_f = losses.masks_from_fod(pipeline._pool_to(o_f, hw), args.od_ref, args.tau_m)
        m_r = losses.masks_from_fod(pipeline._pool_to(o_r, hw), args.od_ref, args.tau_m)
        cppc = losses.cppc_loss(gf, rf, gp, rp, m_f, m_r, args.squared)
    comp = losses.LossComponents(
        adv=args.adv,
        nce=args.nce,
        mlpa=terms.total,
        cppc=cppc,
        ssim=losses.ssim_loss(gen.astype(float), ref.astype(float)),
        gp=losses.gp_loss(gen.astype(float), ref.astype(float), args.gp_levels, losses.pyramid_weights(args.gp_levels)),
    )
    w = losses.LossWeights(*args.weights) if args.weights else losses.LossWeights()
    payload = {
        "mlpa_avg": terms.avg,
        "mlpa_histo": terms.histo,
        "mlpa_block": terms.block,
        "mlpa": terms.total,
        "cppc": cppc if args.fmaps else None,
        "ssim_loss": comp.ssim,
        "gp_loss": comp.gp,
        "adv": comp.adv,
        "nce": comp.nce,
        "weights": vars(w),
        "total": losses.total_loss(comp, w),
    }
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def cmd_evaluate(args):
    keys = {f for f in pipeline.RunConfig.__dataclass_fields__}
    d = {k: getattr(args, k) for k in keys if hasattr(args, k)}
    d.update(getattr(args, "_extra", {}))
    if d.get("od_ref") not in (None, "auto"):
        try:
            d["od_ref"] = float(d["od_ref"])
        except (TypeError, ValueError):
            raise ConfigError(f"od_ref must be 'auto' or a number, got {d['od_ref']!r}") from None
    cfg = pipeline.RunConfig.from_dict(d)
    report = pipeline.evaluate_dataset(cfg)
    s = report.summary
    payload = {k: v for k, v in s.items() if k != "curve"}
    payload.update(n_skipped=len(report.skipped), out_dir=cfg.out_dir, exit_code=report.exit_code)
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return report.exit_code


def cmd_fid(args):
    d = metrics.frechet_distance(read_feature_set(args.features_a), read_feature_set(args.features_b))
    _emit(args, {"frechet_distance": d}, [f"{d!r}"])
    return 0


def cmd_generate(args):
    cfg = GeneratorConfig(n_blocks=args.blocks, channels=args.channels, embed_dim=args.embed_dim, seed=args.seed)
    if args.prompts:
        prompt = load_prompt_embedding(args.prompts, args.stain)
    else:
        table = seeded_prompts(["HER2", "ER", "PR", "Ki67"], cfg.embed_dim, args.seed)
        if args.stain not in table:
            raise ConfigError(f"no seeded prompt for stain {args.stain!r}")
        prompt = table[args.stain]
    if prompt.vec.size != cfg.embed_dim:
        cfg = GeneratorConfig(n_blocks=args.blocks, channels=args.channels, embed_dim=prompt.vec.size, seed=args.seed)
    weights = GeneratorWeights.load(args.checkpoint) if args.checkpoint else init_weights(cfg)
    x = read_image(args.image).astype(np.float64) / 255.0
    out = generator_forward(x, prompt, cfg, weights)
    write_image(args.out, out)
    payload = {"out": args.out, "stain": args.stain, "shape": list(out.shape), "mean": float(out.mean())}
    _emit(args, payload, [f"{k}: {v}" for k, v in payload.items()])
    return 0


def cmd_blur_probe(args):
    res = metrics.blur_probe(read_image(args.image), args.kernels, quantize=not args.no_quantize)
    payload = [r._asdict() for r in res]
    _emit(args, payload, [f"{r.kernel}x{r.kernel}  psnr={r.psnr:.4f}  ssim={r.ssim:.4f}" for r in res])
    return 0


def cmd_gradcheck(args):
    try:
        names = gradcheck.resolve(args.loss)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    errs = gradcheck.run(args.loss, args.trials, args.seed)
    worst = max(errs.values())
    ok = worst < gradcheck.TOLERANCE
    payload = {"trials": args.trials, "max_rel_error": worst, "per_check": errs, "pass": ok}
    lines = [f"{k}: {errs[k]:.3e}" for k in names] + [f"max rel error: {worst:.3e} ({'PASS' if ok else 'FAIL'})"]
    _emit(args, payload, lines)
    return 0 if ok else 1


COMMANDS = {
    "deconvolve": cmd_deconvolve,
    "fod": cmd_fod,
    "losses": cmd_losses,
    "evaluate": cmd_evaluate,
    "fid": cmd_fid,
    "generate": cmd_generate,
    "blur-probe": cmd_blur_probe,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args = _apply_config(args)
        logging.basicConfig(level=str(args.log_level).upper(), format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EX_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EX_CONFIG
    except (StainlabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
