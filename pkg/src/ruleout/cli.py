"""Command-line entry point.

Exit codes: 0 success, 1 validation failure, 2 statistical not-applicable
blocking a requested output, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .calibration import calibrate
from .cohort import ValidationError, ground_truth
from .io import ingest_dir, write_csv, write_cohort, write_json
from .pipeline import PipelineError, RunConfig, run_pipeline
from .stats import NotApplicable
from .synth import SynthConfig, generate
from .workflow import simulate_cohort

EXIT_OK, EXIT_INVALID, EXIT_NA, EXIT_INTERNAL = 0, 1, 2, 3


def _load(path):
    return {} if path is None else json.loads(Path(path).read_text())


def _run_config(args, **override) -> RunConfig:
    d = _load(args.config)
    d.update(override)
    if getattr(args, "seed", None) is not None:
        d["split_seed"] = args.seed
        boot = d.get("bootstrap", {})
        if boot is not None:
            d["bootstrap"] = dict(boot, seed=args.seed)
    if getattr(args, "site", None):
        d["sites"] = args.site
    if getattr(args, "scanner", None):
        d["scanners"] = args.scanner
    return RunConfig.from_dict(d)


def _cohort(args):
    c = ingest_dir(args.data)
    for w in c.warnings:
        print(f"warning: {w}", file=sys.stderr)
    return c


def cmd_synth(args):
    d = _load(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.n_patients is not None:
        d["n_patients"] = args.n_patients
    exams = generate(SynthConfig(**d))
    write_cohort(exams, args.out, labels=not args.no_labels)
    print(f"wrote {len(exams)} exams to {args.out}")


def cmd_validate(args):
    c = _cohort(args)
    labels = {}
    for x in c.exams:
        labels[x.exam_label.name] = labels.get(x.exam_label.name, 0) + 1
    print(json.dumps({"n_exams": len(c.exams), "dropped_unknown": c.dropped_unknown,
                      "labels": dict(sorted(labels.items())),
                      "warnings": c.warnings}, indent=2))


def cmd_calibrate(args):
    cfg = _run_config(args)
    exams = _cohort(args).exams
    w = cfg.calibration_window
    truth = [ground_truth(x, w) for x in exams]
    if not any(truth):
        raise NotApplicable("no cancers in the calibration cohort")
    table = calibrate([x.device_score for x in exams], truth, cfg.target_sensitivities)
    out = {str(t): {"threshold": e.threshold, "sensitivity": e.sensitivity,
                    "rule_out_rate": e.rule_out_rate} for t, e in table.entries.items()}
    if args.out:
        write_json(Path(args.out) / "thresholds.json", {"window": w, "targets": out})
    print(json.dumps(out, indent=2, sort_keys=True))


def cmd_simulate(args):
    exams = _cohort(args).exams
    sims = simulate_cohort(exams, args.threshold, args.window, args.mode)
    cols = ["exam_id", "patient_id", "site", "scanner", "label", "truth", "score",
            "ruled_out", "original_assessment", "effective_assessment",
            "incorrect_callback", "incorrect_biopsy", "prevented_callback",
            "prevented_benign_biopsy"]
    write_csv(Path(args.out) / "simulation.csv", cols,
              ([getattr(s, c) for c in cols] for s in sims))
    print(f"ruled out {sum(s.ruled_out for s in sims)} of {len(sims)} exams")


def _report(args, cfg):
    cohort = _cohort(args).exams
    result = run_pipeline(cfg, cohort, args.out)
    for t, thr in result.thresholds.items():
        print(f"target {t}: threshold {thr!r}")
    print(f"wrote {', '.join(sorted(result.outputs))} and run_manifest.json "
          f"to {args.out}")


def cmd_report(args):
    cfg = _run_config(args)
    if args.threshold:
        cfg = replace(cfg, thresholds=args.threshold)
    if not cfg.thresholds:
        raise ValidationError("report needs explicit thresholds (--threshold or "
                              "'thresholds' in the config); use 'run' to calibrate")
    _report(args, cfg)


def cmd_run(args):
    _report(args, _run_config(args))


def build_parser():
    p = argparse.ArgumentParser(prog="ruleout", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True, out=True, config=True):
        if data:
            sp.add_argument("data", help="directory with exams/opinions/events/scores.csv")
        if config:
            sp.add_argument("--config", help="JSON configuration file")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, help="override the configured seed(s)")

    def strata(sp):
        sp.add_argument("--site", action="append", help="restrict to a site (repeatable)")
        sp.add_argument("--scanner", action="append",
                        help="restrict to a scanner (repeatable)")

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    common(sp, data=False)
    sp.add_argument("--n-patients", type=int)
    sp.add_argument("--no-labels", action="store_true",
                    help="omit label columns so ingestion derives them")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("validate", help="ingest and validate a cohort")
    sp.add_argument("data")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("calibrate", help="select thresholds on a cohort")
    common(sp, out=False)
    sp.add_argument("--out", help="also write thresholds.json here")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("simulate", help="apply a threshold to every exam")
    common(sp, config=False)
    sp.add_argument("--threshold", type=float, required=True)
    sp.add_argument("--window", type=int, default=12)
    sp.add_argument("--mode", choices=("final", "first"), default="final")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="report metrics at explicit thresholds")
    common(sp)
    strata(sp)
    sp.add_argument("--threshold", type=float, action="append")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="split, calibrate, simulate and report")
    common(sp)
    strata(sp)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print("validation failed:", file=sys.stderr)
        for issue in exc.issues:
            print(f"  {issue}", file=sys.stderr)
        return EXIT_INVALID
    except NotApplicable as exc:
        print(f"not applicable: {exc}", file=sys.stderr)
        return EXIT_NA
    except PipelineError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return EXIT_INVALID if isinstance(exc.cause, ValueError) else EXIT_INTERNAL
    except (ValueError, TypeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
