"""Command-line interface for medl-uq.

Verbs: ``generate`` writes a synthetic dataset, ``run`` trains and evaluates
a full experiment, ``report`` re-evaluates from saved samplers.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from app.core import experiment, reporting, simdata
from app.core.errors import ConfigurationError, MedlUqError
from app.core.logs import configure_logging

logger = logging.getLogger(__name__)


def _print(data: Dict[str, Any], fmt: str) -> None:
    if fmt == "json":
        print(json.dumps(data, separators=(",", ":"), ensure_ascii=False))
    else:
        for k, v in data.items():
            print(f"{k}: {v}")


def _fmt(v: Any) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _print_table(rows: List[Dict[str, Any]]) -> None:
    headers = ["Model", "Split", "AUROC", "BalAcc", "Sens@J", "Spec@J", "p(fit)"]
    keys = [
        "model",
        "split",
        "auroc",
        "balanced_accuracy",
        "sensitivity_youden",
        "specificity_youden",
        "model_fit_p",
    ]
    body = [[_fmt(r.get(k)) for k in keys] for r in rows]

    # compute column widths
    widths = [len(h) for h in headers]
    for r in body:
        for i, cell in enumerate(r):
            widths[i] = max(widths[i], len(cell))

    def fmt_row(cols: List[str]) -> str:
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(cols))

    print(fmt_row(headers))
    print("  ".join("-" * w for w in widths))
    for r in body:
        print(fmt_row(r))


def _base_config(args: argparse.Namespace) -> Dict[str, Any]:
    if getattr(args, "config", None):
        return experiment.load_config_file(args.config)
    return {}


def _summary(report: experiment.ExperimentReport, out: Path) -> Dict[str, Any]:
    return {
        "ok": True,
        "out": str(out),
        "config_hash": report.config_hash,
        "models": {m.label: m.status.value for m in report.models},
        "failed": [m.label for m in report.models if m.status.value == "failed"],
    }


def cmd_generate(args: argparse.Namespace) -> int:
    base = _base_config(args)
    gen = dict(base.get("generator") or {})
    if args.seed is not None:
        gen["seed"] = args.seed
    elif "seed" in base and "seed" not in gen:
        gen["seed"] = base["seed"]
    if args.no_probes:
        gen["probes"] = False
    try:
        cfg = simdata.GeneratorConfig.model_validate(gen)
    except ValueError as e:
        raise ConfigurationError(f"invalid generator config: {e}") from e
    data = simdata.generate(cfg)
    path = simdata.write_csv(data, args.out)
    _print(
        {
            "ok": True,
            "path": str(path),
            "samples": data.n_samples,
            "features": data.n_features,
            "clusters": len(data.cluster_labels),
            "seen_clusters": data.n_seen,
        },
        args.format,
    )
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    base = _base_config(args)
    backends = None
    if args.backend:
        backends = [experiment.BackendSpec.parse(b).model_dump(mode="json") for b in args.backend]
    cfg = experiment.build_config(
        base,
        seed=args.seed,
        out=args.out,
        backends=backends,
        draws=args.draws,
        folds=args.folds,
        parallel=True if args.parallel else None,
        allow_custom=True if args.allow_custom else None,
    )
    report = experiment.run_experiment(cfg)
    out = Path(cfg.out)
    reporting.emit_reports(report, out)
    if args.table:
        _print_table(report.performance)
    else:
        _print(_summary(report, out), args.format)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    out = Path(args.out)
    report = experiment.rerun_report(out)
    reporting.emit_reports(report, out)
    if args.table:
        _print_table(report.performance)
    else:
        _print(_summary(report, out), args.format)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="medluq",
        description="Epistemic uncertainty for mixed-effects deep learning",
    )
    p.add_argument("--format", choices=["json", "text"], default="json")
    p.add_argument("--log-level", default=None, help="Override LOG_LEVEL")

    sp = p.add_subparsers(dest="cmd", required=True)

    gen = sp.add_parser("generate", help="Write a synthetic clustered dataset as CSV")
    gen.add_argument("--config", help="JSON/TOML config; its [generator] table is used")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", default="data/synthetic.csv")
    gen.add_argument("--no-probes", action="store_true", help="Omit the confound probes")
    gen.set_defaults(func=cmd_generate)

    run = sp.add_parser("run", help="Train, sample and report a full experiment")
    run.add_argument("--config", help="JSON/TOML experiment config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument(
        "--backend",
        action="append",
        help="kind[:value], e.g. swag-full:0.01 or ensemble-subsample:0.9 (repeatable)",
    )
    run.add_argument("--draws", type=int)
    run.add_argument("--folds", type=int)
    run.add_argument(
        "--parallel",
        action="store_true",
        help="Thread pool for ensemble members and draws (timings not comparable)",
    )
    run.add_argument(
        "--allow-custom",
        action="store_true",
        help="Accept hyperparameters outside the tested grids",
    )
    run.add_argument("--table", action="store_true", help="Print the performance table")
    run.set_defaults(func=cmd_run)

    rep = sp.add_parser("report", help="Re-emit reports from saved samplers")
    rep.add_argument("--out", required=True, help="Directory of a previous run")
    rep.add_argument("--table", action="store_true")
    rep.set_defaults(func=cmd_report)

    return p


def main(argv: Optional[Sequence[str]] = None) -> None:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        code = args.func(args)
        sys.exit(code)
    except SystemExit as e:
        raise e
    except MedlUqError as e:
        logger.error(str(e))
        _print({"ok": False, "error": str(e), "type": type(e).__name__}, args.format)
        sys.exit(e.exit_code)
    except Exception as e:
        logger.exception("unexpected failure")
        _print({"ok": False, "error": str(e)}, args.format)
        sys.exit(1)
