"""Command-line entry point: ``relstab {train,run,verify-bounds,summarize,circles}``.

Exit codes: 0 success, 2 configuration error, 3 bound violation
(``verify-bounds`` only), 4 pipeline stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataError
from .harness import (
    BOUNDS_FILE,
    MANIFEST_FILE,
    MODEL_FILE,
    CirclesConfig,
    ConfigError,
    ExperimentConfig,
    StageError,
    circles_report,
    fit_model,
    format_summary,
    prepare_data,
    reverify,
    run_experiment,
    stage,
    summarize,
    write_csv_mirror,
    write_jsonl,
)
from .model import save_model
from .stability import ELEMENTWISE, NORM_RATIO, norm_label, parse_norm_order

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_STAGE = 0, 2, 3, 4

log = logging.getLogger("relstab")


def _denom_mode(value: str) -> str:
    value = value.replace("-", "_")
    if value not in (ELEMENTWISE, NORM_RATIO):
        raise argparse.ArgumentTypeError("expected elementwise or norm-ratio")
    return value


def _norm(value: str) -> str:
    try:
        return norm_label(parse_norm_order(value))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="relstab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=out_required, help="output / results directory")
        p.add_argument("--model", choices=["lr", "mlp"])

    p = sub.add_parser("train", help="train a model and save it as JSON")
    common(p)

    p = sub.add_parser("run", help="run the full pipeline")
    common(p)
    p.add_argument("--p", type=_norm, help="norm order: 1, 2 or inf")
    p.add_argument("--denom-mode", type=_denom_mode, default=ELEMENTWISE, help="mode shown in the printed summary")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("verify-bounds", help="re-verify the metric bounds of a results directory")
    p.add_argument("--out", type=Path, required=True, help="results directory")
    p.add_argument("--tol", type=float, default=1e-9)

    p = sub.add_parser("summarize", help="summarise a results directory")
    p.add_argument("--out", type=Path, required=True, help="results directory")
    p.add_argument("--denom-mode", type=_denom_mode, default=ELEMENTWISE)
    p.add_argument("--json", action="store_true", help="print the summary as JSON")

    p = sub.add_parser("circles", help="embedding analysis on the circles toy problem")
    common(p)
    return parser


def _experiment_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.model:
        cfg.model = args.model
    if getattr(args, "p", None):
        cfg.metric = {**cfg.metric, "p": args.p}
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    cfg.output_dir = str(args.out)
    cfg.validate()
    return cfg


def _cmd_train(args) -> int:
    cfg = _experiment_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    with stage("data"):
        data = prepare_data(cfg)
    with stage("train"):
        model = fit_model(cfg, data)
    save_model(model, args.out / MODEL_FILE)
    print(json.dumps({"model": str(args.out / MODEL_FILE), **model.training_meta}))
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = _experiment_config(args)
    out = run_experiment(cfg, args.out)
    print(format_summary(summarize(out), args.denom_mode))
    return EXIT_OK


def _cmd_verify(args) -> int:
    with stage("verify"):
        bounds = reverify(args.out, tol=args.tol)
    chash = json.loads((args.out / MANIFEST_FILE).read_text(encoding="utf-8"))["config_hash"]
    rows = [{**b.to_dict(), "config_hash": chash} for b in bounds]
    write_jsonl(args.out / BOUNDS_FILE, rows)
    write_csv_mirror(args.out / "bounds.csv", rows)
    n_ris = sum(b.violated_ris for b in bounds)
    n_rrs = sum(b.violated_rrs for b in bounds)
    print(f"{len(bounds)} records checked: {n_ris} RIS-bound violations, {n_rrs} RRS-bound violations")
    return EXIT_VIOLATION if n_ris or n_rrs else EXIT_OK


def _cmd_summarize(args) -> int:
    with stage("summarize"):
        summary = summarize(args.out)
    print(json.dumps(summary, indent=2, sort_keys=True) if args.json else format_summary(summary, args.denom_mode))
    return EXIT_OK


def _cmd_circles(args) -> int:
    raw = json.loads(args.config.read_text(encoding="utf-8")) if args.config else {}
    cfg = CirclesConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.model:
        cfg.model = args.model
    with stage("circles"):
        report = circles_report(cfg, args.out)
    print(json.dumps({k: v for k, v in report.items() if k != "config"}, indent=2, sort_keys=True))
    return EXIT_OK if report["training_ok"] else EXIT_STAGE


COMMANDS = {
    "train": _cmd_train,
    "run": _cmd_run,
    "verify-bounds": _cmd_verify,
    "summarize": _cmd_summarize,
    "circles": _cmd_circles,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
