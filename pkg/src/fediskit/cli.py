"""Command-line entry point.

Commands:
    fediskit run -c cfg          run one experiment, write metrics.csv
    fediskit bench-dre -c cfg    estimator scaling benchmark, write scaling.csv
    fediskit sweep -c cfg        threshold/alpha/seed grid, write sweep.csv
    fediskit report <dir>        summarize a results directory into report.md

Every command writes ``manifest.txt`` (config hash, seed, versions) and
``config.json`` (the resolved canonical config; re-running with it
reproduces the run exactly) into the output directory.  The environment
variable ``FEDISKIT_OUT`` overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import logging
import os
import platform
import sys

import numpy as np
import scipy

from . import __version__, bench, protocol
from .config import (RunConfig, ThresholdSpec, config_hash, config_to_json,
                     parse_config)
from .errors import ConfigError, FediskitError

log = logging.getLogger("fediskit")


def _output_dir(cfg: RunConfig) -> str:
    out = os.environ.get("FEDISKIT_OUT") or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(cfg: RunConfig, out_dir: str, command: str) -> None:
    canonical = config_to_json(cfg)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as f:
        f.write(canonical + "\n")
    with open(os.path.join(out_dir, "manifest.txt"), "w", encoding="utf-8") as f:
        f.write(f"command={command}\n")
        f.write(f"config_hash=sha256:{config_hash(cfg)}\n")
        f.write(f"seed={cfg.seed}\n")
        f.write(f"fediskit={__version__}\n")
        f.write(f"python={platform.python_version()}\n")
        f.write(f"numpy={np.__version__}\n")
        f.write(f"scipy={scipy.__version__}\n")
        f.write("reproduce=fediskit run -c config.json\n")


def _overrides(args: argparse.Namespace) -> dict:
    overrides = {}
    for name, key in (("seed", "seed"), ("rounds", "rounds"),
                      ("filter_mode", "filter_mode"), ("alpha", "alpha"),
                      ("out", "output_dir")):
        value = getattr(args, name, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _parse_threshold_token(token: str) -> ThresholdSpec:
    if token.startswith("q:"):
        return ThresholdSpec(quantile=float(token[2:]), raw=None)
    if token.startswith("raw:"):
        return ThresholdSpec(quantile=None, raw=float(token[4:]))
    raise ConfigError(f"threshold token {token!r} must look like q:0.95 or raw:3.0")


def _float_list(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def cmd_run(cfg: RunConfig) -> int:
    out = _output_dir(cfg)
    _write_manifest(cfg, out, "run")
    result = protocol.run_experiment(cfg)
    bench.write_metrics_csv(result, os.path.join(out, "metrics.csv"))
    rows = [bench.AccuracyRecord(cfg.scheme, cfg.filter_mode, result.mean_accuracy)]
    bench.write_accuracy_markdown(rows, os.path.join(out, "report.md"))
    log.info("mean accuracy %.4f -> %s/metrics.csv", result.mean_accuracy, out)
    return 0


def cmd_bench_dre(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _output_dir(cfg)
    _write_manifest(cfg, out, "bench-dre")
    all_records = []
    for clusters in args.clusters:
        records, slopes = bench.bench_dre_scaling(
            args.sizes, args.dim, clusters, repeats=args.repeats, seed=cfg.seed)
        all_records.extend(records)
        for (estimator, phase), slope in sorted(slopes.items()):
            log.info("c=%d %s %s slope=%.3f", clusters, estimator, phase, slope)
    bench.write_scaling_csv(all_records, os.path.join(out, "scaling.csv"))
    return 0


def cmd_sweep(cfg: RunConfig, args: argparse.Namespace) -> int:
    out = _output_dir(cfg)
    _write_manifest(cfg, out, "sweep")
    thresholds = [_parse_threshold_token(t) for t in args.thresholds.split(",") if t]
    records = bench.sweep(cfg, thresholds, _float_list(args.alphas),
                          _int_list(args.seeds))
    bench.write_sweep_csv(records, os.path.join(out, "sweep.csv"))
    log.info("%d sweep records -> %s/sweep.csv", len(records), out)
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    directory = args.directory
    lines = ["# Results summary", ""]
    metrics = os.path.join(directory, "metrics.csv")
    if os.path.exists(metrics):
        with open(metrics, "r", encoding="utf-8") as f:
            final = [ln for ln in f.read().splitlines() if ln.startswith("final,")]
        if final:
            lines.append(f"Final mean accuracy: {final[-1].split(',')[-1]}")
            lines.append("")
    scaling = os.path.join(directory, "scaling.csv")
    if os.path.exists(scaling):
        records = bench.read_scaling_csv(scaling)
        lines.append("## Estimator scaling (median seconds)")
        lines.append("")
        lines.append("| estimator | phase | size | clusters | wall_s |")
        lines.append("|---|---|---|---|---|")
        for r in records:
            lines.append(f"| {r.estimator} | {r.phase} | {r.sample_size} "
                         f"| {r.clusters} | {r.wall_time:.6e} |")
        lines.append("")
    sweep_path = os.path.join(directory, "sweep.csv")
    if os.path.exists(sweep_path):
        records = bench.read_sweep_csv(sweep_path)
        lines.append("## Sweep")
        lines.append("")
        lines.append("| threshold | quantile | alpha | seed | mean_acc | id_kept | ood_leak |")
        lines.append("|---|---|---|---|---|---|---|")
        for r in records:
            thr = "" if r.threshold is None else f"{r.threshold:.4f}"
            q = "" if r.quantile is None else f"{r.quantile:.4f}"
            lines.append(f"| {thr} | {q} | {r.alpha:.4f} | {r.seed} "
                         f"| {r.mean_acc:.4f} | {r.id_kept:.4f} | {r.ood_leak:.4f} |")
        lines.append("")
    if len(lines) <= 2:
        raise FediskitError(f"no result CSVs found under {directory}")
    path = os.path.join(directory, "report.md")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    log.info("wrote %s", path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fediskit",
        description="Deterministic federated-distillation simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("-c", "--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--filter-mode", dest="filter_mode",
                       choices=["kmeans", "kulsif", "none", "indlearn"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--out", help="output directory override")

    run_p = sub.add_parser("run", help="run one experiment")
    add_common(run_p)

    bench_p = sub.add_parser("bench-dre", help="estimator scaling benchmark")
    add_common(bench_p)
    bench_p.add_argument("--sizes", type=_int_list, default=[250, 500, 1000, 2000])
    bench_p.add_argument("--dim", type=int, default=50)
    bench_p.add_argument("--clusters", type=_int_list, default=[1, 10])
    bench_p.add_argument("--repeats", type=int, default=3)

    sweep_p = sub.add_parser("sweep", help="threshold/alpha/seed grid")
    add_common(sweep_p)
    sweep_p.add_argument("--thresholds", default="q:0.95",
                         help="comma list of q:VAL or raw:VAL tokens")
    sweep_p.add_argument("--alphas", default="0.2")
    sweep_p.add_argument("--seeds", default="0")

    report_p = sub.add_parser("report", help="summarize a results directory")
    report_p.add_argument("directory")
    return parser


def dispatch(command: str, cfg: RunConfig | None,
             args: argparse.Namespace) -> int:
    if command == "run":
        return cmd_run(cfg)
    if command == "bench-dre":
        return cmd_bench_dre(cfg, args)
    if command == "sweep":
        return cmd_sweep(cfg, args)
    if command == "report":
        return cmd_report(args)
    raise ConfigError(f"unknown command {command!r}")


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = None
        if args.command != "report":
            cfg = parse_config(args.config, overrides=_overrides(args))
        return dispatch(args.command, cfg, args)
    except ConfigError as exc:
        log.error("config: %s", exc)
        return 2
    except FediskitError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("i/o: %s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
