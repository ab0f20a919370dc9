"""Benchmark harness: estimator scaling, threshold/alpha sweeps, reports.

Timing uses a warm-up run plus median-of-repeats, with short callables
auto-repeated until each measurement spans a minimum wall time.  Memory is
accounted analytically from the estimators' matrix shapes so the numbers are
deterministic; an optional tracemalloc cross-check records actual peaks.
"""

from __future__ import annotations

import csv
import dataclasses
import time
import tracemalloc
from dataclasses import dataclass, replace

import numpy as np

from . import dre, protocol
from .config import RunConfig, ThresholdSpec, validate_config
from .errors import ConfigError
from .seeding import derive_rng, derive_seed

SCALING_COLUMNS = ("estimator", "phase", "size", "dim", "clusters",
                   "repeat", "wall_s", "bytes")
SWEEP_COLUMNS = ("threshold", "quantile", "alpha", "seed",
                 "mean_acc", "id_kept", "ood_leak")
METRICS_COLUMNS = ("round", "client_id", "kept_fraction", "test_acc")

# Iteration budget for benchmark KMeans fits: a fixed k keeps the measured
# learning cost at k*n*c*d regardless of convergence luck.
BENCH_KMEANS_ITERS = 20


@dataclass(frozen=True)
class ScalingRecord:
    estimator: str   # kmeans | kulsif
    phase: str       # learn | estimate
    sample_size: int
    dim: int
    clusters: int
    repeats: int
    wall_time: float        # median seconds over repeats
    accounted_bytes: int    # analytic payload size
    measured_bytes: int | None = None  # tracemalloc peak, when requested


@dataclass(frozen=True)
class SweepRecord:
    threshold: float | None
    quantile: float | None
    alpha: float
    seed: int
    mean_acc: float
    id_kept: float
    ood_leak: float


@dataclass(frozen=True)
class AccuracyRecord:
    scenario: str
    method: str
    mean_acc: float


def accounted_bytes(estimator: str, phase: str, size: int, dim: int,
                    clusters: int) -> int:
    """Analytic allocation count in bytes for one estimator phase.

    kulsif learn holds K11 (m^2), K12 (n*m) and alpha (m) float64 entries at
    m = n = size; kmeans learn holds centroids (c*d floats) and assignment
    labels (one word per sample).  Estimation holds the per-test-point
    distance payloads: kulsif t*(n+m) floats, kmeans c*d floats plus one
    boolean per test point.
    """
    if estimator == "kulsif":
        if phase == "learn":
            return 8 * (size * size + size * size + size)
        return 8 * size * (size + size)
    if estimator == "kmeans":
        if phase == "learn":
            return 8 * clusters * dim + 8 * size
        return 8 * clusters * dim + size
    raise ValueError(f"unknown estimator {estimator!r}")


def _time_once(fn, min_time: float) -> float:
    """Per-call seconds; short callables are looped so one measurement spans
    at least ``min_time`` seconds."""
    loops = 1
    while True:
        t0 = time.perf_counter()
        for _ in range(loops):
            fn()
        elapsed = time.perf_counter() - t0
        if elapsed >= min_time:
            return elapsed / loops
        loops = max(loops * 2, int(loops * min_time / max(elapsed, 1e-9)))


def time_callable(fn, repeats: int, min_time: float = 0.005) -> float:
    """Median per-call time over ``repeats`` measurements after one warm-up."""
    fn()
    return float(np.median([_time_once(fn, min_time) for _ in range(repeats)]))


def fit_loglog_slope(sizes, times) -> float:
    """Least-squares slope of log(time) against log(size)."""
    sizes = np.asarray(sizes, dtype=np.float64)
    times = np.asarray(times, dtype=np.float64)
    if sizes.size < 2:
        raise ValueError("need at least two sizes to fit a slope")
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def _bench_data(size: int, dim: int, clusters: int,
                rng: np.random.Generator) -> np.ndarray:
    # Well-separated blobs so KMeans behaves identically across sizes.
    means = rng.uniform(0.0, 10.0, size=(clusters, dim))
    labels = rng.integers(clusters, size=size)
    return means[labels] + 0.5 * rng.standard_normal((size, dim))


def _measure(fn, repeats: int, min_time: float, measure_memory: bool):
    wall = time_callable(fn, repeats, min_time)
    peak = None
    if measure_memory:
        tracemalloc.start()
        tracemalloc.reset_peak()
        fn()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    return wall, peak


def bench_dre_scaling(sizes, dim: int, clusters: int, repeats: int = 3,
                      seed: int = 0, measure_memory: bool = False,
                      min_time: float = 0.005
                      ) -> tuple[list[ScalingRecord], dict[tuple[str, str], float]]:
    """Time both estimators' learn/estimate phases across sample sizes.

    At each size the private, auxiliary and test sets all have that many
    samples.  Returns per-phase records (median wall time, analytic bytes)
    and the fitted log-log slope per (estimator, phase).
    """
    sizes = [int(s) for s in sizes]
    if sorted(sizes) != sizes or len(set(sizes)) != len(sizes):
        raise ValueError("sizes must be strictly ascending")
    if len(sizes) < 2:
        raise ValueError("need at least two sizes to fit slopes")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    records: list[ScalingRecord] = []
    for size in sizes:
        rng = derive_rng(seed, "bench-data", round_num=size)
        X = _bench_data(size, dim, clusters, rng)
        X_test = _bench_data(size, dim, clusters, rng)
        fit_seed = derive_seed(seed, "bench-kmeans", round_num=size)

        wall, peak = _measure(
            lambda: dre.kmeans_fit(X, clusters, max_iters=BENCH_KMEANS_ITERS,
                                   tol=0.0, seed=fit_seed),
            repeats, min_time, measure_memory)
        records.append(ScalingRecord(
            "kmeans", "learn", size, dim, clusters, repeats, wall,
            accounted_bytes("kmeans", "learn", size, dim, clusters), peak))

        km = dre.kmeans_fit(X, clusters, max_iters=BENCH_KMEANS_ITERS,
                            tol=0.0, seed=fit_seed)
        wall, peak = _measure(lambda: dre.kmeans_score_batch(km, X_test),
                              repeats, min_time, measure_memory)
        records.append(ScalingRecord(
            "kmeans", "estimate", size, dim, clusters, repeats, wall,
            accounted_bytes("kmeans", "estimate", size, dim, clusters), peak))

        aux = dre.gen_auxiliary(X, size,
                                seed=derive_seed(seed, "bench-aux", round_num=size))
        sigma = 1.0
        wall, peak = _measure(lambda: dre.kulsif_learn(X, aux, sigma, 0.1),
                              repeats, min_time, measure_memory)
        records.append(ScalingRecord(
            "kulsif", "learn", size, dim, clusters, repeats, wall,
            accounted_bytes("kulsif", "learn", size, dim, clusters), peak))

        ku = dre.kulsif_learn(X, aux, sigma, 0.1)
        wall, peak = _measure(lambda: dre.kulsif_score_batch(ku, X_test),
                              repeats, min_time, measure_memory)
        records.append(ScalingRecord(
            "kulsif", "estimate", size, dim, clusters, repeats, wall,
            accounted_bytes("kulsif", "estimate", size, dim, clusters), peak))

    slopes: dict[tuple[str, str], float] = {}
    for estimator in ("kmeans", "kulsif"):
        for phase in ("learn", "estimate"):
            points = [(r.sample_size, r.wall_time) for r in records
                      if r.estimator == estimator and r.phase == phase]
            slopes[(estimator, phase)] = fit_loglog_slope(
                [p[0] for p in points], [p[1] for p in points])
    return records, slopes


def filter_quality(result: protocol.ExperimentResult,
                   config: RunConfig) -> tuple[float, float]:
    """ID recall and OOD leak of the run's filters, averaged over clients.

    Ground truth comes from the proxy pool's hidden labels (diagnostic access
    only): a proxy sample is truly ID for a client when its label belongs to
    the client's label set.  The pool and client label sets are rebuilt
    deterministically from the config.
    """
    if not result.id_masks:
        raise ConfigError("filter quality needs a proxy-exchanging filter mode")
    _, _, clients, proxy = protocol.prepare_data(config, build_proxy=True)
    true_labels = proxy.diagnostic_labels()
    id_rates, leak_rates = [], []
    for client in clients:
        mask = result.id_masks[client.client_id]
        truly_id = np.isin(true_labels, sorted(client.label_set))
        if truly_id.any():
            id_rates.append(float(mask[truly_id].mean()))
        if (~truly_id).any():
            leak_rates.append(float(mask[~truly_id].mean()))
    id_kept = float(np.mean(id_rates)) if id_rates else 1.0
    ood_leak = float(np.mean(leak_rates)) if leak_rates else 0.0
    return id_kept, ood_leak


def sweep(base_config: RunConfig, thresholds: list[ThresholdSpec],
          alphas: list[float], seeds: list[int]) -> list[SweepRecord]:
    """Full cross-product of threshold x alpha x seed experiment runs."""
    if not thresholds or not alphas or not seeds:
        raise ValueError("threshold, alpha and seed grids must be non-empty")
    if base_config.filter_mode == "indlearn":
        raise ConfigError("sweep needs a filtering mode, not indlearn")
    records = []
    for thr in thresholds:
        for alpha in alphas:
            for seed in seeds:
                cfg = validate_config(replace(base_config, threshold=thr,
                                              alpha=alpha, seed=seed))
                result = protocol.run_experiment(cfg)
                id_kept, ood_leak = filter_quality(result, cfg)
                records.append(SweepRecord(
                    threshold=thr.raw, quantile=thr.quantile, alpha=alpha,
                    seed=seed, mean_acc=result.mean_accuracy,
                    id_kept=id_kept, ood_leak=ood_leak))
    return records


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def write_scaling_csv(records: list[ScalingRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SCALING_COLUMNS)
        for r in records:
            writer.writerow([r.estimator, r.phase, r.sample_size, r.dim,
                             r.clusters, r.repeats, f"{r.wall_time:.6e}",
                             r.accounted_bytes])


def read_scaling_csv(path: str) -> list[ScalingRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            records.append(ScalingRecord(
                row["estimator"], row["phase"], int(row["size"]),
                int(row["dim"]), int(row["clusters"]), int(row["repeat"]),
                float(row["wall_s"]), int(row["bytes"])))
    return records


def write_sweep_csv(records: list[SweepRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(SWEEP_COLUMNS)
        for r in records:
            writer.writerow([_fmt(r.threshold), _fmt(r.quantile), _fmt(r.alpha),
                             r.seed, _fmt(r.mean_acc), _fmt(r.id_kept),
                             _fmt(r.ood_leak)])


def read_sweep_csv(path: str) -> list[SweepRecord]:
    records = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for row in csv.DictReader(f):
            records.append(SweepRecord(
                float(row["threshold"]) if row["threshold"] else None,
                float(row["quantile"]) if row["quantile"] else None,
                float(row["alpha"]), int(row["seed"]), float(row["mean_acc"]),
                float(row["id_kept"]), float(row["ood_leak"])))
    return records


def write_metrics_csv(result: protocol.ExperimentResult, path: str) -> None:
    """Per-round per-client metrics plus a mean row per round.

    Wall-clock timings are deliberately omitted so identical runs emit
    byte-identical files.
    """
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_COLUMNS)
        for m in result.rounds:
            for cid in sorted(m.test_accuracy):
                writer.writerow([m.round_number, cid,
                                 _fmt(m.kept_fraction.get(cid, 0.0)),
                                 _fmt(m.test_accuracy[cid])])
            mean_kept = float(np.mean(list(m.kept_fraction.values()))) \
                if m.kept_fraction else 0.0
            writer.writerow([m.round_number, "mean", _fmt(mean_kept),
                             _fmt(m.mean_accuracy)])
        writer.writerow(["final", "mean", "", _fmt(result.mean_accuracy)])


def write_accuracy_markdown(records: list[AccuracyRecord], path: str) -> None:
    """Scenario x method accuracy grid in the comparison-table layout."""
    if not records:
        raise ValueError("no accuracy records to report")
    with open(path, "w", encoding="utf-8") as f:
        f.write("| Scenario | Method | Mean accuracy |\n")
        f.write("|---|---|---|\n")
        for r in records:
            f.write(f"| {r.scenario} | {r.method} | {r.mean_acc:.4f} |\n")


def report(results, fmt: str, out_dir: str) -> list[str]:
    """Write a result collection as CSV or markdown; returns written paths."""
    import os

    if not results:
        raise ValueError("cannot report an empty result collection")
    if fmt not in ("csv", "markdown"):
        raise ValueError(f"format must be csv or markdown, got {fmt!r}")
    os.makedirs(out_dir, exist_ok=True)
    first = results[0]
    if isinstance(first, ScalingRecord):
        if fmt == "csv":
            path = os.path.join(out_dir, "scaling.csv")
            write_scaling_csv(results, path)
        else:
            path = os.path.join(out_dir, "scaling.md")
            _write_records_markdown(results, path)
        return [path]
    if isinstance(first, SweepRecord):
        if fmt == "csv":
            path = os.path.join(out_dir, "sweep.csv")
            write_sweep_csv(results, path)
        else:
            path = os.path.join(out_dir, "sweep.md")
            _write_records_markdown(results, path)
        return [path]
    if isinstance(first, AccuracyRecord):
        path = os.path.join(out_dir, "report.md")
        write_accuracy_markdown(results, path)
        return [path]
    raise TypeError(f"cannot report records of type {type(first).__name__}")


def _write_records_markdown(records, path: str) -> None:
    fields = [f.name for f in dataclasses.fields(records[0])]
    with open(path, "w", encoding="utf-8") as f:
        f.write("| " + " | ".join(fields) + " |\n")
        f.write("|" + "---|" * len(fields) + "\n")
        for r in records:
            f.write("| " + " | ".join(_fmt(getattr(r, n)) for n in fields) + " |\n")
