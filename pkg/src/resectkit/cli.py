"""Command-line interface.

Subcommands cover the whole pipeline: demo scene generation, planning,
registration, trace simulation, per-trial metrics, CSV analysis, the full
synthetic study, and the guidance HTTP service. Errors print a single
machine-parseable ``error: ...`` line; usage problems and missing files
exit with status 2, runtime failures with 1.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _err(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _require_files(*paths) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise FileNotFoundError(", ".join(missing))


def cmd_demo(args) -> int:
    from .demo import write_demo

    out = write_demo(args.out, margin=args.margin)
    print(f"demo scene written to {out}")
    return 0


def cmd_plan(args) -> int:
    from . import meshio
    from .planning import build_plan, save_plan, validate_plan

    _require_files(args.liver, args.tumor)
    liver = meshio.load_mesh(args.liver)
    tumor = meshio.load_mesh(args.tumor)
    plan = build_plan(liver, tumor, args.margin)
    report = validate_plan(plan, liver)
    manifest = save_plan(plan, args.out,
                         liver_mesh_file=os.path.relpath(args.liver, args.out))
    print(report)
    print(f"plan manifest: {manifest}")
    return 0 if report.passed else 1


def cmd_register(args) -> int:
    from .registration import (format_registration_record, horn_absolute_orientation,
                               leave_one_out, load_fiducials)

    _require_files(args.fiducials)
    fiducials = load_fiducials(args.fiducials)
    result = horn_absolute_orientation(fiducials)
    record = format_registration_record(result)
    entries = leave_one_out(fiducials)
    record += "leave_one_out = " + " ".join(
        f"{e.error_mm:.6f}:{e.status}" for e in entries) + "\n"
    if args.out:
        Path(args.out).write_text(record)
    print(record, end="")
    return 0


def cmd_simulate(args) -> int:
    from .planning import load_plan
    from .simulate import NoiseModel, OperatorModel, save_trace, simulate_cut_trace
    from .study import load_config

    _require_files(args.plan)
    plan, _ = load_plan(args.plan)
    if args.config:
        _require_files(args.config)
        cfg = load_config(args.config)
        base = cfg.guided if args.condition == "guided" else cfg.unguided
        op = OperatorModel(args.condition, base.lateral_error_sigma,
                           base.correlation_length, base.systematic_bias,
                           base.cut_speed, base.pause_count_mean,
                           base.pause_duration_mean)
        noise = NoiseModel(fiducial_sigma=cfg.fiducial_sigma,
                           tracker_jitter_sigma=cfg.tracker_jitter_sigma)
    else:
        from . import calibration as cal
        if args.condition == "guided":
            op = OperatorModel("guided", cal.GUIDED_LATERAL_SIGMA,
                               cal.GUIDED_CORRELATION_LENGTH, cal.GUIDED_BIAS,
                               cal.GUIDED_SPEED, cal.GUIDED_PAUSE_COUNT,
                               cal.GUIDED_PAUSE_DURATION)
        else:
            op = OperatorModel("unguided", cal.UNGUIDED_LATERAL_SIGMA,
                               cal.UNGUIDED_CORRELATION_LENGTH, cal.UNGUIDED_BIAS,
                               cal.UNGUIDED_SPEED, cal.UNGUIDED_PAUSE_COUNT,
                               cal.UNGUIDED_PAUSE_DURATION)
        noise = NoiseModel(tracker_jitter_sigma=cal.TRACKER_JITTER_SIGMA)
    trace = simulate_cut_trace(plan, op, noise, args.seed)
    save_trace(trace, args.out)
    print(f"trace with {trace.n_samples} samples written to {args.out}")
    return 0


def cmd_metrics(args) -> int:
    from .metrics import compute_trial_metrics, format_metrics_record, METRICS_CSV_HEADER, _csv_row
    from .planning import load_plan
    from .simulate import load_trace

    _require_files(args.trace, args.plan)
    plan, _ = load_plan(args.plan)
    trace = load_trace(args.trace)
    metrics = compute_trial_metrics(trace, plan, args.participant,
                                    cut_depth=args.depth)
    if args.csv:
        print(METRICS_CSV_HEADER)
        print(_csv_row(metrics))
    else:
        print(format_metrics_record(metrics), end="")
    return 0


def cmd_analyze(args) -> int:
    from .metrics import read_metrics_csv
    from .study import analyze_trials, default_config, StudyReport, format_report_text, format_stats_csv

    _require_files(args.metrics)
    trials = read_metrics_csv(args.metrics)
    tests, descriptives = analyze_trials(trials)
    participants = {m.participant_id for m in trials}
    report = StudyReport(
        config=default_config(n_participants=len(participants),
                              alpha=args.alpha),
        trials=tuple(trials), tests=tests, descriptives=descriptives,
        registration_fre=(), registration_tre=(), orders=())
    print(format_report_text(report), end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "stats.csv").write_text(format_stats_csv(report))
        (out / "report.txt").write_text(format_report_text(report))
        print(f"\nreport files written to {out}")
    return 0


def cmd_study(args) -> int:
    from .study import load_config, run_study, write_report
    from .study import replace as cfg_replace

    _require_files(args.config)
    config = load_config(args.config)
    if args.seed is not None:
        config = cfg_replace(config, seed=args.seed)
    report = run_study(config, workers=args.workers)
    out = write_report(report, args.out)
    print(f"study report written to {out}")
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    _require_files(args.plan)
    serve(plan_manifest=args.plan, port=args.port, state_dir=args.state_dir,
          ui_dir=args.ui_dir)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="resectkit",
        description="resection guidance toolkit: planning, registration, "
                    "simulation, metrics and study analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("demo", help="generate the bundled demo scene")
    p.add_argument("--out", default="demo", help="output directory")
    p.add_argument("--margin", type=float, default=10.0)
    p.set_defaults(func=cmd_demo)

    p = sub.add_parser("plan", help="build a resection plan from meshes")
    p.add_argument("--liver", required=True)
    p.add_argument("--tumor", required=True)
    p.add_argument("--margin", type=float, default=10.0)
    p.add_argument("--out", default="plan")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("register", help="rigid registration from a fiducial table")
    p.add_argument("--fiducials", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("simulate", help="simulate an operator cut trace")
    p.add_argument("--plan", required=True, help="plan manifest")
    p.add_argument("--condition", choices=("guided", "unguided"),
                   default="guided")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="study config for operator params")
    p.add_argument("--out", default="trace.txt")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("metrics", help="score a trace against a plan")
    p.add_argument("--trace", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--participant", default="P01")
    p.add_argument("--depth", type=float, default=40.0)
    p.add_argument("--csv", action="store_true", help="emit a CSV row")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("analyze", help="paired analysis of a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("study", help="run the full synthetic study")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("serve", help="start the guidance trial service")
    p.add_argument("--plan", required=True, help="plan manifest")
    p.add_argument("--port", type=int, default=8077)
    p.add_argument("--state-dir", default=None,
                   help="session persistence directory")
    p.add_argument("--ui-dir", default=None, help="static UI directory to serve")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "study" and args.out is None:
        args.out = os.environ.get("RESECTKIT_OUT", "study_out")
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _err(f"missing file: {exc}", 2)
    except KeyboardInterrupt:
        return _err("interrupted", 130)
    except Exception as exc:  # single-line machine-parseable failure
        return _err(f"{type(exc).__name__}: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
