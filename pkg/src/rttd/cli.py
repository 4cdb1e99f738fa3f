"""Command line: scenarios, sweeps, offline detection, distances and cost.

Exit codes: 0 success, 1 usage error, 2 config or validation error,
3 detection flagged at least one malicious server.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detector import (
    DetectionConfig,
    cost_overhead,
    detect_all,
    detection_probability,
    pairwise_distances,
    report_to_dict,
)
from .datasets import load_dataset
from .distances import METRICS, feature_distance, make_probe_context, model_features
from .harness import SWEEP_AXES, ConfigError, load_config, run_scenario, sweep, write_report
from .nn import load_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_MALICIOUS = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _verdict_table(rows) -> str:
    lines = [f"{'server':>8}  {'verdict':<9}  {'statistic':>12}  {'truth':<9}"]
    for server, benign, stat, truth in rows:
        t = "" if truth is None else ("benign" if truth else "malicious")
        lines.append(f"{server:>8}  {'benign' if benign else 'MALICIOUS':<9}  {stat:>12}  {t:<9}")
    return "\n".join(lines)


def _stat(v) -> str:
    if v.best_p_value is not None:
        return f"p={v.best_p_value:.4g}"
    q, own = v.anomaly_summary
    return f"q={q:.3g}/{own:.3g}"


def _matrix_text(m: np.ndarray) -> str:
    return "\n".join("  ".join(f"{x:.6g}" for x in row) for row in m)


# -- commands -----------------------------------------------------------------

def cmd_scenario_run(config_path, out_dir, seed: int | None = None, metric: str | None = None,
                     as_json: bool = False, out=None) -> int:
    out = out or sys.stdout
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, scenario_seed=seed)
        if metric is not None:
            cfg = replace(cfg, metric=metric)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    report = run_scenario(cfg, keep_models=True)
    write_report(report, out_dir)
    if as_json:
        print(json.dumps(report.to_dict(), sort_keys=True), file=out)
    else:
        for r in report.subruns:
            print(f"sub-run {r.subrun_index} (steps {r.start_step}..{r.start_step + cfg.k}), "
                  f"metric {cfg.metric}", file=out)
            rows = []
            for pos, b in enumerate(cfg.servers):
                v = r.detection.verdicts[pos * cfg.virtualize_replicas]
                rows.append((b.server_id, r.server_verdicts[b.server_id], _stat(v), not b.malicious))
            print(_verdict_table(rows), file=out)
        print(f"accuracy {report.accuracy:.4f}; flagged servers: "
              f"{', '.join(map(str, report.flagged_servers)) or 'none'}", file=out)
    return EXIT_MALICIOUS if report.flagged_servers else EXIT_OK


def cmd_scenario_sweep(config_path, out_dir, axis: str, values: list[str], seed: int | None = None,
                       out=None) -> int:
    out = out or sys.stdout
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = replace(cfg, scenario_seed=seed)
        if axis not in SWEEP_AXES:
            raise ConfigError(f"axis: must be one of {SWEEP_AXES}")
        parsed = [v if axis == "metric" else float(v) if axis in ("eta", "r", "asr") else int(v)
                  for v in values]
        reports = sweep(cfg, axis, parsed)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{axis:>10}  {'accuracy':>8}  flagged", file=out)
    for v, rep in zip(values, reports):
        write_report(rep, Path(out_dir) / f"{axis}={v}", models=False)
        print(f"{v:>10}  {rep.accuracy:8.4f}  {rep.flagged_servers}", file=out)
    return EXIT_MALICIOUS if any(r.flagged_servers for r in reports) else EXIT_OK


def _probe_for(args):
    if args.metric == "parameter":
        return None
    if args.dataset is None:
        raise UsageError(f"--dataset is required for metric {args.metric!r}")
    data, seg = load_dataset(args.dataset)
    if seg is None:
        raise ConfigError(f"{args.dataset}: dataset file has no segment map")
    return make_probe_context(data, seg, args.probe_seed, args.num_reference, args.num_masks,
                              args.num_probe)


def _load_models(paths):
    models = []
    for p in paths:
        try:
            models.append(load_checkpoint(p).weights)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"{p}: {exc}") from None
    return models


def cmd_detect(args, out=None) -> int:
    out = out or sys.stdout
    if len(args.checkpoints) < 3:
        raise UsageError("detect needs at least three checkpoints")
    try:
        models = _load_models(args.checkpoints)
        ctx = _probe_for(args)
        cfg = DetectionConfig(args.r, args.alpha, fallback=args.fallback)
        groups = None
        if args.groups is not None:
            groups = [int(g) for g in args.groups.split(",")]
        matrix = pairwise_distances(models, args.metric, ctx, args.ridge_lambda)
        report = detect_all(matrix, cfg, groups=groups)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps(report_to_dict(report), sort_keys=True), file=out)
    else:
        print(f"distance matrix ({args.metric})", file=out)
        print(_matrix_text(matrix.entries), file=out)
        rows = [(Path(p).name, v.is_benign, _stat(v), None)
                for p, v in zip(args.checkpoints, report.verdicts)]
        print(_verdict_table(rows), file=out)
    return EXIT_MALICIOUS if report.flagged else EXIT_OK


def cmd_distance(args, out=None) -> int:
    out = out or sys.stdout
    try:
        models = _load_models([args.a, args.b])
        ctx = _probe_for(args)
        fa, fb = model_features(models, args.metric, ctx, args.ridge_lambda)
        d = feature_distance(args.metric, fa, fb)
    except (ConfigError, ValueError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps({"metric": args.metric, "distance": d}) if args.json else f"{d!r}", file=out)
    return EXIT_OK


def cmd_cost(args, out=None) -> int:
    out = out or sys.stdout
    try:
        c = cost_overhead(args.n, args.m, args.k, args.metric, args.probe_batches, args.T,
                          args.price_per_step)
        prob = detection_probability(args.m, args.k, args.T) if args.detection_probability else None
    except ValueError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        d = c._asdict()
        if prob is not None:
            d["detection_probability"] = prob
        print(json.dumps(d, sort_keys=True), file=out)
        return EXIT_OK
    print(f"replication_steps          {c.replication_steps}", file=out)
    print(f"distance_step_equivalents  {c.distance_step_equivalents:.6g}", file=out)
    print(f"fraction_of_T              {c.fraction_of_T:.6g}", file=out)
    print(f"replication_fraction       {c.replication_fraction:.6g}", file=out)
    if c.money is not None:
        print(f"money                      {c.money:.6g}", file=out)
    if prob is not None:
        print(f"detection_probability      {prob:.4f}", file=out)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _add_probe_flags(p):
    p.add_argument("--metric", choices=METRICS, default="zest")
    p.add_argument("--dataset", help="dataset dump (with segment map) the probe is drawn from")
    p.add_argument("--probe-seed", type=int, default=0)
    p.add_argument("--num-reference", type=int, default=32)
    p.add_argument("--num-masks", type=int, default=64)
    p.add_argument("--num-probe", type=int, default=256)
    p.add_argument("--ridge-lambda", type=float, default=1e-6)
    p.add_argument("--json", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rttd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    sc = sub.add_parser("scenario", help="run a scenario or a sweep from a JSON config")
    scs = sc.add_subparsers(dest="action", parser_class=_Parser)
    run = scs.add_parser("run")
    run.add_argument("config")
    run.add_argument("out_dir")
    run.add_argument("--seed", type=int)
    run.add_argument("--metric", choices=METRICS)
    run.add_argument("--json", action="store_true")
    sw = scs.add_parser("sweep")
    sw.add_argument("config")
    sw.add_argument("out_dir")
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--seed", type=int)

    det = sub.add_parser("detect", help="detect over saved checkpoints")
    det.add_argument("checkpoints", nargs="*")
    det.add_argument("--r", type=float, default=0.5)
    det.add_argument("--alpha", type=float, default=0.01)
    det.add_argument("--fallback", choices=("ks", "mad"), default="ks")
    det.add_argument("--groups", help="comma-separated physical server per checkpoint")
    _add_probe_flags(det)

    dist = sub.add_parser("distance", help="distance between two checkpoints")
    dist.add_argument("a")
    dist.add_argument("b")
    _add_probe_flags(dist)

    cost = sub.add_parser("cost", help="replication and distance cost")
    cost.add_argument("--n", type=int, required=True)
    cost.add_argument("--m", type=int, required=True)
    cost.add_argument("--k", type=int, required=True)
    cost.add_argument("--T", type=int, required=True)
    cost.add_argument("--metric", choices=METRICS, default="zest")
    cost.add_argument("--probe-batches", type=int, default=1)
    cost.add_argument("--price-per-step", type=float)
    cost.add_argument("--detection-probability", action="store_true")
    cost.add_argument("--json", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        if args.command == "scenario":
            if args.action == "run":
                return cmd_scenario_run(args.config, args.out_dir, args.seed, args.metric, args.json)
            if args.action == "sweep":
                return cmd_scenario_sweep(args.config, args.out_dir, args.axis,
                                          args.values.split(","), args.seed)
            raise UsageError("scenario needs an action: run or sweep")
        if args.command == "detect":
            return cmd_detect(args)
        if args.command == "distance":
            return cmd_distance(args)
        return cmd_cost(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
