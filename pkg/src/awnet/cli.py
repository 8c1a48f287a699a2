"""Command line entry point (``awnet`` / ``python -m awnet``).

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .analysis import compare_distributions, evaluate
from .attacks import FAMILIES, attack_dataset, standard_spec
from .checkpoint import CheckpointError, load_checkpoint
from .config import ExperimentConfig, parse_overrides
from .harness import RunFailure, ablate, export_plots, load_dataset, result_dict, run
from .model import ConfigError
from .training import TrainingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> ExperimentConfig:
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_text("", overrides)


def _print(obj) -> None:
    print(json.dumps(obj, indent=1, sort_keys=True))


def cmd_train(args) -> int:
    _print(result_dict(run(_config(args))))
    return EXIT_OK


def cmd_ablate(args) -> int:
    results = ablate(_config(args))
    _print({row: result_dict(r) for row, r in results.items()})
    return EXIT_OK


def _holdout(args, cfg: ExperimentConfig):
    _, hold = load_dataset(cfg.dataset, cfg.seed)
    return hold


def cmd_eval(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint).model
    hold = _holdout(args, cfg)
    eps = cfg.train.train_attack.epsilon if args.eps is None else args.eps
    families = args.attack or list(cfg.attacks)
    out = {"clean": evaluate(model, hold.images, hold.labels).to_dict()}
    for i, family in enumerate(families):
        out[family] = evaluate(model, hold.images, hold.labels, standard_spec(family, eps),
                               np.random.default_rng([cfg.seed, i])).to_dict()
    _print(out)
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config(args)
    model = load_checkpoint(args.checkpoint).model
    hold = _holdout(args, cfg)
    eps = cfg.train.train_attack.epsilon if args.eps is None else args.eps
    spec = standard_spec(args.family, eps)
    if args.iters is not None:
        spec = replace(spec, iters=args.iters)
    x_adv = attack_dataset(model, hold.images, hold.labels, spec, np.random.default_rng(cfg.seed))
    linf = float(np.abs(x_adv - hold.images).max())
    report = evaluate(model, hold.images, hold.labels, spec, np.random.default_rng(cfg.seed))
    if args.save:
        np.savez(args.save, x_adv=x_adv, y=hold.labels)
    _print({"report": report.to_dict(), "max_linf": linf})
    return EXIT_OK


def cmd_analyze(args) -> int:
    cmp = compare_distributions(args.a, args.b, args.layers)
    result = {c.layer: {"ks": c.ks, "variance_ratio": c.variance_ratio} for c in cmp.layers}
    if args.out:
        Path(args.out).write_text(json.dumps(cmp.to_dict(), indent=1, sort_keys=True) + "\n")
    _print(result)
    return EXIT_OK


def cmd_export(args) -> int:
    files = export_plots(args.run_dir)
    _print([str(f) for f in files])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="awnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help="output directory"):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help=out_help)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("train", help="train one configuration")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run the four-row component ablation")
    common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="clean and attacked accuracy of a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--attack", action="append", choices=FAMILIES)
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="craft adversarial examples against a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--family", choices=FAMILIES, default="pgd_sat")
    p.add_argument("--eps", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--save", help="write x_adv and labels to this .npz file")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("analyze", help="compare filter distributions of two checkpoints")
    common(p, "write the full comparison (with histograms) to this JSON file")
    p.add_argument("a", help="checkpoint of the first model (e.g. standard)")
    p.add_argument("b", help="checkpoint of the second model (e.g. robust)")
    p.add_argument("--layers", nargs="*")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export-plots", help="write histogram/scatter CSVs for a run directory")
    common(p)
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RunFailure, TrainingError, ad.NonFiniteError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
