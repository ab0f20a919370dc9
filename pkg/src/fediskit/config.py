"""Run configuration: dataclasses, JSON parsing, validation, canonical form.

A run is described by a single JSON object with nested ``learner`` and
``kulsif`` objects.  Unknown keys are rejected; every accepted field has a
documented default.  ``config_to_json`` emits a canonical serialization used
for manifests and config hashing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import SCHEMES
from .errors import ConfigError

FILTER_MODES = ("kmeans", "kulsif", "none", "indlearn")
DATASET_KINDS = ("synthetic", "idx", "digits")

# Stand-in for per-client customized architectures: ten distinct hidden-layer
# plans, broadcast cyclically when num_clients differs.
DEFAULT_HIDDEN_PLANS = (
    (128,), (144,), (112,), (160,), (128, 64),
    (96,), (176,), (120,), (160, 80), (136,),
)


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "digits"
    images_path: str | None = None       # idx only
    labels_path: str | None = None       # idx only
    num_classes: int = 10                # synthetic only
    per_class: int = 100                 # synthetic only
    dim: int = 16                        # synthetic only
    stddev: float = 0.5                  # synthetic only
    mean_scale: float = 8.0              # synthetic only; box for random class means
    class_means: tuple | None = None     # synthetic only; explicit (L, d) means


@dataclass(frozen=True)
class ThresholdSpec:
    """Either a calibration quantile or a raw threshold value."""

    quantile: float | None = 0.95
    raw: float | None = None


@dataclass(frozen=True)
class LearnerConfig:
    hidden_layers: tuple[tuple[int, ...], ...] = DEFAULT_HIDDEN_PLANS
    lr: float = 0.05
    distill_lr: float = 0.05
    epochs: int = 1           # supervised epochs per round
    distill_epochs: int = 1   # distillation epochs per round
    batch_size: int = 32
    temperature: float = 2.0


@dataclass(frozen=True)
class KulsifConfig:
    sigma: float | None = None   # None -> median heuristic per client
    lam: float = 0.1
    aux_count: int | None = None  # None -> match private sample count


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    scheme: str = "strong_noniid"
    num_clients: int = 10
    labels_per_client: int = 3
    alpha: float = 0.2
    filter_mode: str = "kmeans"
    threshold: ThresholdSpec = field(default_factory=ThresholdSpec)
    clusters_rule: str | int = "auto"
    rounds: int = 40
    proxy_batch: int = 256
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    kulsif: KulsifConfig = field(default_factory=KulsifConfig)
    test_fraction: float = 0.2
    seed: int = 0
    output_dir: str = "out"

    def hidden_plan_for(self, client_id: int) -> tuple[int, ...]:
        plans = self.learner.hidden_layers
        return tuple(plans[client_id % len(plans)])


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def _known_classes(cfg: RunConfig) -> int | None:
    if cfg.dataset.kind == "synthetic":
        return cfg.dataset.num_classes
    if cfg.dataset.kind == "digits":
        return 10
    return None  # idx: class count only known after loading


def validate_config(cfg: RunConfig) -> RunConfig:
    """Range-check every field, naming the offending one."""
    _require(cfg.dataset.kind in DATASET_KINDS,
             f"dataset.kind must be one of {DATASET_KINDS}, got {cfg.dataset.kind!r}")
    if cfg.dataset.kind == "idx":
        _require(bool(cfg.dataset.images_path) and bool(cfg.dataset.labels_path),
                 "dataset.images_path and dataset.labels_path are required for idx")
    if cfg.dataset.kind == "synthetic":
        _require(cfg.dataset.num_classes >= 2, "dataset.num_classes must be >= 2")
        _require(cfg.dataset.per_class >= 1, "dataset.per_class must be >= 1")
        _require(cfg.dataset.dim >= 1, "dataset.dim must be >= 1")
        _require(cfg.dataset.stddev > 0, "dataset.stddev must be > 0")
    _require(cfg.scheme in SCHEMES, f"scheme must be one of {SCHEMES}, got {cfg.scheme!r}")
    _require(cfg.num_clients >= 1, "num_clients must be >= 1")
    _require(cfg.labels_per_client >= 1, "labels_per_client must be >= 1")
    _require(0 < cfg.alpha <= 1, f"alpha must be in (0, 1], got {cfg.alpha}")
    _require(cfg.filter_mode in FILTER_MODES,
             f"filter_mode must be one of {FILTER_MODES}, got {cfg.filter_mode!r}")
    has_q = cfg.threshold.quantile is not None
    has_raw = cfg.threshold.raw is not None
    _require(has_q != has_raw, "threshold needs exactly one of quantile or raw")
    if has_q:
        _require(0 < cfg.threshold.quantile < 1,
                 f"threshold.quantile must be in (0, 1), got {cfg.threshold.quantile}")
    if isinstance(cfg.clusters_rule, str):
        _require(cfg.clusters_rule == "auto",
                 f"clusters_rule must be 'auto' or a positive int, got {cfg.clusters_rule!r}")
    else:
        _require(cfg.clusters_rule >= 1, "clusters_rule must be >= 1 when fixed")
    _require(cfg.rounds >= 0, "rounds must be >= 0")
    _require(cfg.proxy_batch >= 1, "proxy_batch must be >= 1")
    _require(cfg.learner.lr > 0, "learner.lr must be > 0")
    _require(cfg.learner.distill_lr > 0, "learner.distill_lr must be > 0")
    _require(cfg.learner.epochs >= 0, "learner.epochs must be >= 0")
    _require(cfg.learner.distill_epochs >= 0, "learner.distill_epochs must be >= 0")
    _require(cfg.learner.batch_size >= 1, "learner.batch_size must be >= 1")
    _require(cfg.learner.temperature > 0, "learner.temperature must be > 0")
    _require(len(cfg.learner.hidden_layers) >= 1,
             "learner.hidden_layers needs at least one plan")
    for plan in cfg.learner.hidden_layers:
        _require(all(int(h) >= 1 for h in plan),
                 "learner.hidden_layers entries must be positive")
    if cfg.kulsif.sigma is not None:
        _require(cfg.kulsif.sigma > 0, "kulsif.sigma must be > 0")
    _require(cfg.kulsif.lam > 0, "kulsif.lam must be > 0")
    if cfg.kulsif.aux_count is not None:
        _require(cfg.kulsif.aux_count >= 1, "kulsif.aux_count must be >= 1")
    _require(0 < cfg.test_fraction < 1,
             f"test_fraction must be in (0, 1), got {cfg.test_fraction}")
    _require(cfg.seed >= 0, "seed must be >= 0")

    num_classes = _known_classes(cfg)
    if num_classes is not None:
        if cfg.scheme == "strong_noniid":
            _require(cfg.num_clients <= num_classes,
                     f"strong non-IID with num_clients={cfg.num_clients} is infeasible "
                     f"for {num_classes} classes")
        if cfg.scheme == "weak_noniid":
            _require(cfg.labels_per_client <= num_classes,
                     "labels_per_client exceeds the number of classes")
            _require(cfg.num_clients * cfg.labels_per_client >= num_classes,
                     "weak non-IID cannot cover all classes with this grid")
    return cfg


def _build_section(cls, obj: dict, path: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{path} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in {path}: {', '.join(sorted(unknown))}")
    kwargs = {}
    for key, value in obj.items():
        if key == "hidden_layers":
            if isinstance(value, list) and value and isinstance(value[0], (int, float)):
                value = [value]  # single plan broadcast
            value = tuple(tuple(int(h) for h in plan) for plan in value)
        elif key == "class_means" and value is not None:
            value = tuple(tuple(float(v) for v in row) for row in value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in {path}: {exc}") from exc


def config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config document must be a single JSON object")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(obj) - top_fields
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    kwargs = dict(obj)
    if "dataset" in kwargs:
        kwargs["dataset"] = _build_section(DatasetSpec, kwargs["dataset"], "dataset")
    if "threshold" in kwargs:
        kwargs["threshold"] = _build_section(ThresholdSpec, kwargs["threshold"], "threshold")
    if "learner" in kwargs:
        kwargs["learner"] = _build_section(LearnerConfig, kwargs["learner"], "learner")
    if "kulsif" in kwargs:
        kwargs["kulsif"] = _build_section(KulsifConfig, kwargs["kulsif"], "kulsif")
    try:
        cfg = RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc
    return validate_config(cfg)


def parse_config(path: str | None = None, overrides: dict | None = None,
                 text: str | None = None) -> RunConfig:
    """Parse a JSON config file (or literal text) and apply CLI overrides.

    Overrides replace top-level scalar fields after parsing; the merged
    config is re-validated.
    """
    if text is None:
        if path is None:
            obj = {}
        else:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
    if text is not None:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
            ) from exc
    cfg = config_from_dict(obj)
    if overrides:
        cfg = validate_config(dataclasses.replace(cfg, **overrides))
    return cfg


def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name))
                for f in dataclasses.fields(value)}
    if isinstance(value, tuple):
        return [_to_plain(v) for v in value]
    return value


def config_to_json(cfg: RunConfig) -> str:
    """Canonical JSON serialization (sorted keys, stable spacing)."""
    return json.dumps(_to_plain(cfg), sort_keys=True, indent=2)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(config_to_json(cfg).encode("utf-8")).hexdigest()
