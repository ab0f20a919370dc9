"""Round-based federated distillation with two-stage client-side filtering.

One experiment runs an initialization phase (fit a density-ratio filter per
client, initialize models, pool the proxy set) and then R bulk-synchronous
rounds: the server samples proxy indices, every client submits predictions
for the sampled points it keeps (its own donations always pass; the rest are
kept only when the filter scores them in-distribution), the server averages
the submissions, and every client trains on private data and distills toward
the averaged targets.

Filter modes: ``kmeans`` (centroid-distance filter), ``kulsif`` (kernel
density-ratio filter), ``none`` (submit everything), ``indlearn``
(independent supervised training, no proxy exchange at all).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import dre, learner
from .config import RunConfig, validate_config
from .data import ClientDataset, Dataset, PartitionSpec, ProxyDataset
from .errors import ConfigError
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)


@dataclass(eq=False)
class ClientState:
    """Everything a client owns: data, model, filter, and its donations."""

    client_id: int
    dataset: ClientDataset
    model: learner.MlpModel
    dre: dre.CentroidModel | dre.KulsifModel | None
    threshold: dre.IdThreshold | None
    contributed: frozenset[int]

    def __post_init__(self):
        if (self.dre is None) != (self.threshold is None):
            raise ValueError("dre and threshold must be both present or both absent")


@dataclass(frozen=True, eq=False)
class RoundPlan:
    """The proxy indices broadcast for one round."""

    round_number: int
    indices: np.ndarray

    def __post_init__(self):
        if len(np.unique(self.indices)) != len(self.indices):
            raise ValueError("round indices must be distinct")


@dataclass(eq=False)
class PredictionSet:
    """One client's filtered submissions: proxy index -> probability vector."""

    client_id: int
    entries: dict[int, np.ndarray]


@dataclass(eq=False)
class AggregatedTargets:
    """Server-side mean prediction per index: index -> (mean probs, count)."""

    entries: dict[int, tuple[np.ndarray, int]]


@dataclass
class FilterCounts:
    kept_membership: int = 0  # stage 1: the client donated the sample
    kept_scored: int = 0      # stage 2: the filter scored it in-distribution
    rejected: int = 0


@dataclass(eq=False)
class RoundMetrics:
    round_number: int
    kept_fraction: dict[int, float]
    test_accuracy: dict[int, float]
    mean_accuracy: float
    uplink_floats: int
    wall_seconds: float  # excluded from the determinism surface


@dataclass(eq=False)
class ExperimentResult:
    rounds: list[RoundMetrics]
    final_accuracy: dict[int, float]
    mean_accuracy: float
    filter_counts: dict[int, FilterCounts]
    id_masks: dict[int, np.ndarray] = field(default_factory=dict)
    uplink_floats_total: int = 0

    def canonical_lines(self) -> list[str]:
        """Deterministic text form of everything except wall-clock timings."""
        lines = []
        for m in self.rounds:
            kept = ",".join(f"{c}:{m.kept_fraction[c]!r}" for c in sorted(m.kept_fraction))
            acc = ",".join(f"{c}:{m.test_accuracy[c]!r}" for c in sorted(m.test_accuracy))
            lines.append(f"round {m.round_number} kept[{kept}] acc[{acc}] "
                         f"mean={m.mean_accuracy!r} uplink={m.uplink_floats}")
        fin = ",".join(f"{c}:{self.final_accuracy[c]!r}" for c in sorted(self.final_accuracy))
        lines.append(f"final [{fin}] mean={self.mean_accuracy!r}")
        for c in sorted(self.filter_counts):
            fc = self.filter_counts[c]
            lines.append(f"filter {c} member={fc.kept_membership} "
                         f"scored={fc.kept_scored} rejected={fc.rejected}")
        for c in sorted(self.id_masks):
            lines.append(f"mask {c} " + "".join("1" if v else "0" for v in self.id_masks[c]))
        lines.append(f"uplink_total {self.uplink_floats_total}")
        return lines

    def canonical_bytes(self) -> bytes:
        return "\n".join(self.canonical_lines()).encode("utf-8")


def clusters_for(scheme: str, label_count: int, clusters_rule: str | int,
                 sample_count: int) -> int:
    """Cluster count per client: one for strong non-IID, one per held label
    otherwise, unless a fixed count is configured.  Capped at the sample count."""
    if isinstance(clusters_rule, int):
        c = clusters_rule
    elif scheme == data_mod.STRONG_NONIID:
        c = 1
    else:
        c = label_count
    return max(1, min(c, sample_count))


def _fit_filter(client: ClientDataset, cfg: RunConfig):
    master = cfg.seed
    cid = client.client_id
    if cfg.filter_mode == "kmeans":
        c = clusters_for(cfg.scheme, len(client.label_set), cfg.clusters_rule,
                         len(client))
        return dre.kmeans_fit(client.features, c,
                              seed=derive_seed(master, "kmeans-fit", cid))
    if cfg.filter_mode == "kulsif":
        n = len(client)
        m = cfg.kulsif.aux_count if cfg.kulsif.aux_count is not None else n
        aux = dre.gen_auxiliary(client.features, m,
                                seed=derive_seed(master, "kulsif-aux", cid))
        sigma = cfg.kulsif.sigma
        if sigma is None:
            sigma = dre.median_heuristic_sigma(
                client.features, seed=derive_seed(master, "kulsif-sigma", cid))
        return dre.kulsif_learn(client.features, aux, sigma, cfg.kulsif.lam)
    return None


def _make_threshold(model, client: ClientDataset, cfg: RunConfig) -> dre.IdThreshold:
    direction = dre.model_direction(model)
    if cfg.threshold.raw is not None:
        return dre.IdThreshold(float(cfg.threshold.raw), direction, None)
    scores = dre.score_batch(model, client.features)
    return dre.calibrate_threshold(scores, cfg.threshold.quantile, direction)


def initialize(clients_data: list[ClientDataset], config: RunConfig,
               num_classes: int | None = None
               ) -> tuple[list[ClientState], ProxyDataset]:
    """Initialization phase: fit filters, init models, pool the proxy set."""
    if config.filter_mode not in ("kmeans", "kulsif", "none"):
        raise ConfigError(
            f"initialize expects a proxy-exchanging filter mode, got {config.filter_mode!r}")
    if num_classes is None:
        num_classes = max(max(c.label_set) for c in clients_data) + 1
    proxy, clients_data = data_mod.extract_proxy(
        clients_data, config.alpha, seed=derive_seed(config.seed, "proxy"))
    states = []
    for client in clients_data:
        cid = client.client_id
        model_filter = _fit_filter(client, config)
        threshold = None if model_filter is None else _make_threshold(
            model_filter, client, config)
        layer_sizes = (client.features.shape[1], *config.hidden_plan_for(cid),
                       num_classes)
        model = learner.model_init(layer_sizes,
                                   seed=derive_seed(config.seed, "model-init", cid))
        states.append(ClientState(
            client_id=cid,
            dataset=client,
            model=model,
            dre=model_filter,
            threshold=threshold,
            contributed=frozenset(int(i) for i in proxy.contributions[cid]),
        ))
    return states, proxy


def select_round_indices(num_proxy: int, batch: int, rng: np.random.Generator,
                         round_number: int = 1) -> RoundPlan:
    """Uniform sample of proxy indices without replacement."""
    if not 1 <= batch <= num_proxy:
        raise ValueError(f"batch must be in [1, {num_proxy}], got {batch}")
    indices = rng.choice(num_proxy, size=batch, replace=False)
    return RoundPlan(round_number, indices.astype(np.int64))


def client_filter(state: ClientState, proxy: ProxyDataset,
                  plan: RoundPlan) -> PredictionSet:
    """Two-stage filter, then predict on the kept samples.

    Stage 1 keeps indices the client itself donated; stage 2 scores only the
    remaining ones against the client's filter.  Without a filter everything
    is kept.  Predictions are probability vectors at temperature 1.
    """
    idx = plan.indices
    if state.dre is None:
        keep = np.ones(idx.size, dtype=bool)
    else:
        contributed = np.fromiter(state.contributed, dtype=np.int64,
                                  count=len(state.contributed))
        member = np.isin(idx, contributed)
        keep = member.copy()
        rest = ~member
        if rest.any():
            scores = dre.score_batch(state.dre, proxy.features[idx[rest]])
            keep[rest] = dre.is_id_batch(scores, state.threshold)
    kept_idx = idx[keep]
    entries: dict[int, np.ndarray] = {}
    if kept_idx.size:
        probs = learner.softmax_t(
            learner.forward_batch(state.model, proxy.features[kept_idx]), 1.0)
        entries = {int(i): probs[row] for row, i in enumerate(kept_idx)}
    return PredictionSet(state.client_id, entries)


def server_aggregate(submissions: list[PredictionSet],
                     plan: RoundPlan) -> AggregatedTargets:
    """Arithmetic mean per index over all submitters.

    Summation runs in ascending client-id order, so the result is invariant
    to the order submissions arrive in.  Indices nobody kept are dropped.
    """
    valid = set(int(i) for i in plan.indices)
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for sub in sorted(submissions, key=lambda s: s.client_id):
        for index, probs in sub.entries.items():
            if index not in valid:
                raise ValueError(f"submission for index {index} outside the round plan")
            if index in sums:
                sums[index] = sums[index] + probs
                counts[index] += 1
            else:
                sums[index] = np.asarray(probs, dtype=np.float64)
                counts[index] = 1
    entries = {i: (sums[i] / counts[i], counts[i]) for i in sorted(sums)}
    return AggregatedTargets(entries)


def _targets_from(agg: AggregatedTargets) -> list[learner.SoftTarget]:
    return [learner.SoftTarget(i, vec) for i, (vec, _) in agg.entries.items()]


def run_round(states: list[ClientState], proxy: ProxyDataset, plan: RoundPlan,
              config: RunConfig, test_set: Dataset | None = None,
              filter_counts: dict[int, FilterCounts] | None = None
              ) -> tuple[list[ClientState], RoundMetrics]:
    """One bulk-synchronous round: filter, aggregate, train, distill."""
    t0 = time.perf_counter()
    lc = config.learner
    submissions = [client_filter(s, proxy, plan) for s in states]
    agg = server_aggregate(submissions, plan)
    targets = _targets_from(agg)
    kept_fraction, accuracy = {}, {}
    uplink = 0
    for state, sub in zip(states, submissions):
        cid = state.client_id
        kept = set(sub.entries)
        kept_fraction[cid] = len(kept) / plan.indices.size
        uplink += len(kept) * state.model.num_outputs
        if filter_counts is not None:
            fc = filter_counts.setdefault(cid, FilterCounts())
            member = sum(1 for i in plan.indices if int(i) in state.contributed)
            fc.kept_membership += member
            fc.kept_scored += len(kept) - member
            fc.rejected += plan.indices.size - len(kept)
        learner.train_supervised(state.model, state.dataset.data, lc.epochs,
                                 lc.lr, lc.batch_size,
                                 seed=derive_seed(config.seed, "train",
                                                  cid, plan.round_number))
        learner.distill(state.model, proxy.features, targets, lc.distill_epochs,
                        lc.distill_lr, lc.temperature,
                        seed=derive_seed(config.seed, "distill",
                                         cid, plan.round_number),
                        batch_size=lc.batch_size)
        if test_set is not None:
            accuracy[cid] = learner.evaluate(state.model, test_set)
    mean_acc = float(np.mean(list(accuracy.values()))) if accuracy else float("nan")
    metrics = RoundMetrics(plan.round_number, kept_fraction, accuracy, mean_acc,
                           uplink, time.perf_counter() - t0)
    return states, metrics


def prepare_data(config: RunConfig, build_proxy: bool | None = None
                 ) -> tuple[Dataset, Dataset, list[ClientDataset], ProxyDataset | None]:
    """Deterministic data pipeline: build, split, partition, pool proxy.

    The proxy pool is None in indlearn mode (or when ``build_proxy`` is
    False; ``initialize`` performs its own pooling from the same derived
    seed).  Re-running with the same config reproduces the identical
    pipeline, which lets diagnostics rebuild the proxy set without the
    protocol ever touching its hidden labels.
    """
    validate_config(config)
    ds = config.dataset
    if ds.kind == "synthetic":
        if ds.class_means is not None:
            means = np.asarray(ds.class_means, dtype=np.float64)
        else:
            mean_rng = derive_rng(config.seed, "synthetic-means")
            means = mean_rng.uniform(0.0, ds.mean_scale, size=(ds.num_classes, ds.dim))
        full = data_mod.gen_gaussian_mixture(
            ds.num_classes, ds.per_class, ds.dim, means, ds.stddev,
            seed=derive_seed(config.seed, "synthetic"))
    elif ds.kind == "idx":
        full = data_mod.load_idx(ds.images_path, ds.labels_path)
    else:
        full = data_mod.load_digits_dataset()
    train, test = data_mod.train_test_split(
        full, config.test_fraction, seed=derive_seed(config.seed, "split"))
    spec = PartitionSpec(config.scheme, config.num_clients,
                         config.labels_per_client,
                         seed=derive_seed(config.seed, "partition"))
    clients = data_mod.partition(train, spec)
    if build_proxy is None:
        build_proxy = config.filter_mode != "indlearn"
    proxy = None
    if build_proxy:
        proxy, clients = data_mod.extract_proxy(
            clients, config.alpha, seed=derive_seed(config.seed, "proxy"))
    return train, test, clients, proxy


def _id_masks(states: list[ClientState], proxy: ProxyDataset) -> dict[int, np.ndarray]:
    """Combined would-keep decision of every client over the whole proxy pool."""
    masks = {}
    all_idx = np.arange(len(proxy))
    for state in states:
        if state.dre is None:
            masks[state.client_id] = np.ones(len(proxy), dtype=bool)
            continue
        contributed = np.fromiter(state.contributed, dtype=np.int64,
                                  count=len(state.contributed))
        member = np.isin(all_idx, contributed)
        scores = dre.score_batch(state.dre, proxy.features)
        masks[state.client_id] = member | dre.is_id_batch(scores, state.threshold)
    return masks


def run_experiment(config: RunConfig) -> ExperimentResult:
    """Run initialization plus R rounds and collect metrics.

    indlearn mode trains each client on its private data only, with the same
    per-round supervised schedule but no proxy exchange.
    """
    validate_config(config)
    train, test, clients, _ = prepare_data(config, build_proxy=False)
    num_classes = train.num_classes
    filter_counts: dict[int, FilterCounts] = {}
    rounds: list[RoundMetrics] = []

    if config.filter_mode == "indlearn":
        states = []
        for client in clients:
            layer_sizes = (client.features.shape[1],
                           *config.hidden_plan_for(client.client_id), num_classes)
            model = learner.model_init(
                layer_sizes, seed=derive_seed(config.seed, "model-init",
                                              client.client_id))
            states.append(ClientState(client.client_id, client, model,
                                      None, None, frozenset()))
        proxy = None
        for r in range(1, config.rounds + 1):
            t0 = time.perf_counter()
            accuracy = {}
            for state in states:
                learner.train_supervised(
                    state.model, state.dataset.data, config.learner.epochs,
                    config.learner.lr, config.learner.batch_size,
                    seed=derive_seed(config.seed, "train", state.client_id, r))
                accuracy[state.client_id] = learner.evaluate(state.model, test)
            mean_acc = float(np.mean(list(accuracy.values())))
            rounds.append(RoundMetrics(r, {s.client_id: 0.0 for s in states},
                                       accuracy, mean_acc, 0,
                                       time.perf_counter() - t0))
            log.info("round %d/%d mean_acc=%.4f", r, config.rounds, mean_acc)
    else:
        states, proxy = initialize(clients, config, num_classes)
        batch = min(config.proxy_batch, len(proxy))
        for r in range(1, config.rounds + 1):
            rng = derive_rng(config.seed, "round-select", round_num=r)
            plan = select_round_indices(len(proxy), batch, rng, r)
            states, metrics = run_round(states, proxy, plan, config, test,
                                        filter_counts)
            rounds.append(metrics)
            log.info("round %d/%d mean_acc=%.4f kept=%.3f", r, config.rounds,
                     metrics.mean_accuracy,
                     float(np.mean(list(metrics.kept_fraction.values()))))

    final = {s.client_id: learner.evaluate(s.model, test) for s in states}
    result = ExperimentResult(
        rounds=rounds,
        final_accuracy=final,
        mean_accuracy=float(np.mean(list(final.values()))),
        filter_counts=filter_counts,
        id_masks=_id_masks(states, proxy) if proxy is not None else {},
        uplink_floats_total=sum(m.uplink_floats for m in rounds),
    )
    return result
