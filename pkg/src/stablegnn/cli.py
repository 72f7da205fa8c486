"""Command line entry point: ``stablegnn train`` and ``stablegnn evaluate``."""

from __future__ import annotations

import argparse
import logging
import sys

from .experiment import BIAS_PRESETS, PRESETS, ConfigError, ExperimentConfig, evaluate_saved, read_config_file, run_experiment

log = logging.getLogger("stablegnn")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _tau(text: str) -> float:
    if text in BIAS_PRESETS:
        return BIAS_PRESETS[text]
    try:
        return float(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a ratio or one of {sorted(BIAS_PRESETS)}") from exc


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--dataset", choices=["synthetic", "files", "rec-synthetic"])
    p.add_argument("--preset", choices=sorted(PRESETS), help="named defaults; config file and flags override")
    p.add_argument("--config", help="flat key=value file mirroring the flags")
    for name in ("edges", "features", "labels", "attrs", "interactions"):
        p.add_argument(f"--{name}", metavar="PATH")
    p.add_argument("--bias-factor", dest="bias_factor", help="label, label:T or attr:NAME=VALUE")
    p.add_argument("--tau-train", dest="tau_train", type=_tau, help="ratio or heavy/medium/light")
    p.add_argument("--tau-test", dest="tau_test", type=_floats, help="comma-separated test ratios")
    p.add_argument("--ndcg-n", dest="ndcg_n", type=int)
    p.add_argument("--rec-eval", dest="rec_eval", choices=["attribute", "days"])
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablegnn", description="Stable prediction on graphs under selection bias.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train models over seeds and write sweep reports")
    _add_data_flags(train)
    train.add_argument("--model", dest="models", action="append",
                       choices=["stable", "gat", "gcn", "stable-rec", "ngcf-rec"], help="repeatable")
    train.add_argument("--k-envs", dest="k_envs", type=int)
    train.add_argument("--env-tau", dest="env_tau", type=float, help="ratio for generated environments")
    for name, typ in (("lambda0", float), ("lambda1", float), ("epochs", int), ("hidden", int), ("layers", int),
                      ("lr", float), ("dropout", float)):
        train.add_argument(f"--{name}", type=typ)
    train.add_argument("--inner-steps", dest="inner_steps", type=int)
    train.add_argument("--weight-decay", dest="weight_decay", type=float)
    train.add_argument("--weight-mode", dest="weight_mode", choices=["softmax", "sigmoid"])
    train.add_argument("--seed", dest="seed_list", type=int, action="append", help="repeatable")
    train.add_argument("--seeds", dest="num_seeds", type=int, help="run seeds 0..N-1")

    ev = sub.add_parser("evaluate", help="re-score saved checkpoints in a run directory")
    ev.add_argument("run_dir")
    ev.add_argument("--tau-test", dest="tau_test", type=_floats)
    ev.add_argument("--ndcg-n", dest="ndcg_n", type=int)
    ev.add_argument("--rec-eval", dest="rec_eval", choices=["attribute", "days"])
    ev.add_argument("-v", "--verbose", action="store_true")
    return parser


_META = {"command", "config", "preset", "seed_list", "num_seeds", "verbose", "run_dir"}


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Preset < config file < flags."""
    values = read_config_file(args.config) if args.config else {}
    preset = args.preset or values.pop("preset", None)
    if preset is None:
        preset = {"synthetic": "synthetic", "rec-synthetic": "rec-synthetic"}.get(
            args.dataset or values.get("dataset"))
    flags = {k: v for k, v in vars(args).items() if k not in _META and v is not None}
    if args.seed_list:
        flags["seeds"] = tuple(args.seed_list)
    elif args.num_seeds is not None:
        flags["seeds"] = tuple(range(args.num_seeds))
    values.update(flags)
    return ExperimentConfig.from_mapping(values, preset)


def _report_line(run) -> str:
    r = run.report
    return f"{run.model:>10} seed {run.seed}: average {r.average_score:.4f}  stability_error {r.stability_error:.4f}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "train":
            cfg = resolve_config(args)
            log.info("config hash %s", cfg.config_hash())
            run_experiment(cfg, progress=lambda run: print(_report_line(run), flush=True))
            print(f"reports written to {cfg.out}")
        else:
            overrides = {k: getattr(args, k) for k in ("tau_test", "ndcg_n", "rec_eval") if getattr(args, k) is not None}
            for run in evaluate_saved(args.run_dir, overrides):
                print(_report_line(run))
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
