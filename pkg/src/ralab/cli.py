"""Command-line front door.

Subcommands: train, train-ssl, eval, histogram, lambda-sweep, curve,
tradeoff, iters, pca, theory, layer-ablation, gen-data. Global flags
--config / --seed / --out / --threads; attack and defense knobs are
overridable with flags named after their config keys.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .data import load_config
from .exceptions import DataError, NumericError, UsageError

_COMMANDS = {
    "gen-data": harness.cmd_gen_data,
    "train": harness.cmd_train,
    "train-ssl": harness.cmd_train_ssl,
    "eval": harness.cmd_eval,
    "histogram": harness.cmd_histogram,
    "lambda-sweep": harness.cmd_lambda_sweep,
    "curve": harness.cmd_curve,
    "tradeoff": harness.cmd_tradeoff,
    "iters": harness.cmd_iters,
    "pca": harness.cmd_pca,
    "theory": harness.cmd_theory,
    "layer-ablation": harness.cmd_layer_ablation,
}

# (flag, config section, key, type) — flag names mirror config keys
_OVERRIDES = [
    ("--epsilon", "attack", "epsilon", float),
    ("--norm", "attack", "norm", str),
    ("--steps", "attack", "steps", int),
    ("--step-size", "attack", "step_size", float),
    ("--random-start", "attack", "random_start", int),
    ("--loss", "attack", "loss", str),
    ("--kappa", "attack", "kappa", float),
    ("--attack-seed", "attack", "seed", int),
    ("--method", "attack", "method", str),
    ("--epsilon-v", "defense", "epsilon_v", float),
    ("--defense-steps", "defense", "steps", int),
    ("--eta", "defense", "eta", float),
    ("--init-noise-scale", "defense", "init_noise_scale", float),
    ("--step-rule", "defense", "step_rule", str),
    ("--defense-seed", "defense", "seed", int),
    ("--epochs", "train", "epochs", int),
    ("--batch-size", "train", "batch_size", int),
    ("--lr", "train", "lr", float),
    ("--optimizer", "train", "optimizer", str),
    ("--adversarial", "train", "adversarial", int),
    ("--ssl-epochs", "ssl_train", "epochs", int),
    ("--feature-layer", "ssl_train", "feature_layer", str),
    ("--tau", "contrastive", "tau", float),
    ("--n-positive-views", "contrastive", "n_positive_views", int),
    ("--n-negatives", "contrastive", "n_negatives", int),
    ("--n-train", "dataset", "n_train", int),
    ("--n-test", "dataset", "n_test", int),
    ("--n-classes", "dataset", "n_classes", int),
    ("--n-examples", "eval", "n_examples", int),
    ("--classifier", "paths", "classifier", str),
    ("--ssl-head", "paths", "ssl_head", str),
    ("--joint-csv", "paths", "joint_csv", str),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ralab",
        description="reverse-attack laboratory: attacks, self-supervised defense, analyses")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="base seed override")
        p.add_argument("--out", type=str, default="runs", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="reserved; results identical")
        for flag, _, _, typ in _OVERRIDES:
            p.add_argument(flag, type=typ, default=None)
        if name == "eval":
            p.add_argument("--no-defense", action="store_true")
        if name == "lambda-sweep":
            p.add_argument("--lambdas", type=str, default=None,
                           help="comma-separated lambda_s values")
        if name == "curve":
            p.add_argument("--epsilons", type=str, default=None)
        if name == "tradeoff":
            p.add_argument("--epsilon-v-factors", type=str, default=None)
        if name == "iters":
            p.add_argument("--iterations", type=str, default=None)
        if name == "layer-ablation":
            p.add_argument("--layers", type=str, default=None)
    return parser


def _merged_config(args) -> dict:
    cfg = harness.DEFAULT_CONFIG
    if args.config is not None:
        cfg = harness.merge_config(cfg, load_config(args.config))
    overrides = {}
    for flag, section, key, _ in _OVERRIDES:
        attr = flag.lstrip("-").replace("-", "_")
        val = getattr(args, attr, None)
        if val is not None:
            overrides.setdefault(section, {})[key] = val
    cfg = harness.merge_config(cfg, overrides)
    if args.seed is not None:
        cfg = harness.merge_config(cfg, {
            "dataset": {"seed": args.seed},
            "train": {"seed": args.seed},
            "ssl_train": {"seed": args.seed},
            "attack": {"seed": args.seed + 4},
            "defense": {"seed": args.seed + 6},
        })
    if getattr(args, "lambdas", None):
        cfg["lambda_sweep"]["values"] = [float(v) for v in args.lambdas.split(",")]
    if getattr(args, "epsilons", None):
        cfg["curve"]["epsilons"] = [float(v) for v in args.epsilons.split(",")]
    if getattr(args, "epsilon_v_factors", None):
        cfg["tradeoff"]["epsilon_v_factors"] = [float(v) for v in args.epsilon_v_factors.split(",")]
    if getattr(args, "iterations", None):
        cfg["iters"]["values"] = [int(v) for v in args.iterations.split(",")]
    if getattr(args, "layers", None):
        cfg["layer_ablation"]["layers"] = args.layers.split(",")
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merged_config(args)
        out = Path(args.out)
        fn = _COMMANDS[args.command]
        if args.command == "eval":
            result = fn(cfg, out, with_defense=not args.no_defense)
        else:
            result = fn(cfg, out)
        for key, val in sorted(result.items()):
            if isinstance(val, (str, Path)):
                print(f"{key}: {val}")
            elif isinstance(val, (int, float)):
                print(f"{key}: {val:.6g}")
            elif isinstance(val, dict):
                flat = " ".join(f"{k}={v:.4f}" for k, v in val.items()
                                if isinstance(v, (int, float)))
                if flat:
                    print(f"{key}: {flat}")
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
