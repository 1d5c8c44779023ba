"""``aasn`` command line: gen-data, train, eval, warp, gradcheck.

Exit codes: 0 success, 1 configuration error, 2 runtime error, 3 check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import VARIANTS, RunConfig
from .errors import AasnError, ConfigError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("aasn")


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if not getattr(args, "config", None):
        cfg.apply_env()
    if getattr(args, "variant", None):
        cfg.apply_variant(args.variant)
    for item in getattr(args, "set", None) or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key.strip(), val)
    cfg.validate()
    return cfg


def _cmd_gen_data(args) -> int:
    from .pipeline import cmd_gen_data

    cfg = _run_config(args)
    h = cmd_gen_data(cfg, force=args.force)
    print(f"dataset {cfg.paths.data_dir}  manifest sha256 {h}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .pipeline import cmd_train

    cfg = _run_config(args)
    res = cmd_train(cfg)
    print(f"best epoch {res.best_epoch}  val AUC {res.best_val_auc:.4f}  checkpoint {res.checkpoint}")
    print(json.dumps(res.final_metrics(), sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .pipeline import cmd_eval

    cfg = _run_config(args) if (args.config or args.set) else None
    if cfg is not None and args.png is not None:
        cfg.eval.n_png = args.png
    if cfg is None and args.png is not None:
        from .pipeline import load_checkpoint

        _, cfg = load_checkpoint(args.checkpoint)
        cfg.eval.n_png = args.png
    metrics, report = cmd_eval(cfg, args.checkpoint, args.split, args.out)
    for k, v in metrics.items():
        print(f"{k}\t{v:.6f}")
    print(f"report {report}")
    return EXIT_OK


def _cmd_warp(args) -> int:
    from .pipeline import cmd_warp

    h, w = (int(v) for v in args.roi_hw.lower().split("x"))
    res = cmd_warp(args.image, args.landmarks, args.out, args.margin_frac, (h, w), args.reg)
    print("landmark\tresidual_px")
    for k, v in res["residuals"].items():
        print(f"{k}\t{v:.3e}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from . import gradcheck

    names = args.op or None
    if names:
        unknown = [n for n in names if n not in gradcheck.REGISTRY]
        if unknown:
            raise ConfigError(f"unknown op(s) {unknown}; registered: {sorted(gradcheck.REGISTRY)}")
    modes = tuple(int(m) for m in args.modes)
    if args.corrupt:
        with gradcheck.corrupted(args.corrupt):
            results = gradcheck.run_suite(names, modes, args.seed, args.instances)
    else:
        results = gradcheck.run_suite(names, modes, args.seed, args.instances)
    print(gradcheck.format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="aasn", description="Anatomy-aware Siamese asymmetry detection on phantoms")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        return p

    p = with_config(sub.add_parser("gen-data", help="render the phantom dataset"))
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(fn=_cmd_gen_data)

    p = with_config(sub.add_parser("train", help="train one model variant"))
    p.add_argument("--variant", choices=sorted(VARIANTS), help="ablation preset for fusion/align/contrastive")
    p.set_defaults(fn=_cmd_train)

    p = with_config(sub.add_parser("eval", help="score a checkpoint on a split"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--out", help="report directory (default: the run directory)")
    p.add_argument("--png", type=int, help="write overlay PNGs for the first N images")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("warp", help="mirror, align and visualise one image")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--margin-frac", type=float, default=0.1)
    p.add_argument("--roi-hw", default="64x128")
    p.add_argument("--reg", type=float, default=0.0, help="TPS regularisation")
    p.set_defaults(fn=_cmd_warp)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--op", action="append", help="restrict to these ops (repeatable)")
    p.add_argument("--modes", nargs="+", default=["32", "64"], choices=["32", "64"])
    p.add_argument("--instances", type=int, help="instances per op (default: per-op setting)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)
    p.set_defaults(fn=_cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (AasnError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
