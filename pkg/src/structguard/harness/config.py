"""Experiment configuration: JSON sections, strict validation, defaults.

Configs are nested dataclasses mirroring the JSON sections
{data, model, anchors, probes, unlearn, eval, sweep}. Parsing is strict:
unknown keys raise :class:`ConfigError` carrying the offending field path,
as do type and range violations.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..unlearn import METHODS, LossWeights, UnlearnConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class DataConfig:
    b: int = 5
    n_per_class: int = 200
    d_in: int = 16
    spread: float = 0.3
    seed: int = 1
    test_fraction: float = 0.2
    path: str | None = None  # load a dataset CSV instead of generating


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple[int, ...] = (32,)
    d: int = 16
    init_seed: int = 101
    pretrain_epochs: int = 400
    pretrain_lr: float = 0.5
    pretrain_batch: int | None = None
    checkpoint: str | None = None  # load pretrained weights instead of training


@dataclass(frozen=True)
class AnchorConfig:
    mode: str = "orthonormal"  # orthonormal | random_unit | prototype | file
    seed: int = 5
    path: str | None = None


@dataclass(frozen=True)
class ProbeConfig:
    n_adv: int = 4
    steps: int = 40
    step_size: float = 0.05
    radius: float = 1.0
    seed: int = 7
    clamp: tuple[float, float] | None = None


@dataclass(frozen=True)
class UnlearnSection:
    method: str = "structguard"
    k: int = 64
    split_seed: int = 3
    class_mode: bool = False
    class_fraction: float = 0.2
    steps: int = 200
    lr: float = 0.05
    weights: tuple[float, float, float, float, float] = (1.0, 1.0, 1.0, 1.0, 1.0)
    elastic_net: tuple[float, float] = (1e-3, 1e-3)
    align_axis: str = "per_probe_row"
    align_variant: str = "CS"
    importance_refresh: int = 1
    stop_when_forgotten: bool = True
    patience: int = 5
    seed: int = 17
    fisher_lambda: float = 1.0
    oracle_init_seed: int = 23

    def to_unlearn_config(self) -> UnlearnConfig:
        w = self.weights
        return UnlearnConfig(
            method=self.method,
            steps=self.steps,
            lr=self.lr,
            loss_weights=LossWeights(
                w_del=w[0], w_ret=w[1], w_align=w[2], w_reg=w[3], w_cr=w[4]
            ),
            elastic_net=self.elastic_net,
            align_axis=self.align_axis,
            align_variant=self.align_variant,
            importance_refresh=self.importance_refresh,
            stop_when_forgotten=self.stop_when_forgotten,
            patience=self.patience,
            seed=self.seed,
            fisher_lambda=self.fisher_lambda,
        )


@dataclass(frozen=True)
class EvalConfig:
    retrieval_ks: tuple[int, ...] = (1, 5, 10)
    retrieval_query_count: int = 50
    retrieval_seed: int = 21
    profile_instances: int = 2
    profile_top_n: int = 3
    consistency_bins: int = 20


@dataclass(frozen=True)
class SweepConfig:
    methods: tuple[str, ...] = ("structguard", "neggrad")
    k_values: tuple[int, ...] = (16, 64)
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    align_variants: tuple[str, ...] | None = None
    ablations: tuple[str, ...] | None = None  # names from ABLATIONS
    anchor_modes: tuple[str, ...] | None = None


ABLATIONS = ("full", "no_align", "no_reg", "no_cr")


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "anchors": AnchorConfig,
    "probes": ProbeConfig,
    "unlearn": UnlearnSection,
    "eval": EvalConfig,
    "sweep": SweepConfig,
}

_TUPLE_FIELDS = {
    "model.hidden",
    "unlearn.weights",
    "unlearn.elastic_net",
    "probes.clamp",
    "eval.retrieval_ks",
    "sweep.methods",
    "sweep.k_values",
    "sweep.seeds",
    "sweep.align_variants",
    "sweep.ablations",
    "sweep.anchor_modes",
}


def _coerce(path: str, value):
    if path in _TUPLE_FIELDS and isinstance(value, list):
        return tuple(value)
    return value


def _build_section(name: str, payload: dict, cls):
    if not isinstance(payload, dict):
        raise ConfigError(name, f"section must be an object, got {type(payload).__name__}")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
    kwargs = {k: _coerce(f"{name}.{k}", v) for k, v in payload.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(name, str(exc)) from exc


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in payload:
        if key not in _SECTION_TYPES:
            raise ConfigError(key, "unknown section")
    sections = {}
    for name, cls in _SECTION_TYPES.items():
        if name in payload:
            sections[name] = _build_section(name, payload[name], cls)
    cfg = ExperimentConfig(**sections)
    validate_config(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("<root>", f"not valid JSON: {exc}") from exc
    return config_from_dict(payload)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def convert(value):
        if isinstance(value, tuple):
            return [convert(v) for v in value]
        return value

    out = {}
    for section_field in dataclasses.fields(cfg):
        section = getattr(cfg, section_field.name)
        out[section_field.name] = {
            f.name: convert(getattr(section, f.name)) for f in dataclasses.fields(section)
        }
    return out


def validate_config(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if d.path is None:
        if d.b < 2:
            raise ConfigError("data.b", "needs at least 2 classes")
        if d.n_per_class < 1:
            raise ConfigError("data.n_per_class", "must be positive")
        if d.d_in < 2:
            raise ConfigError("data.d_in", "must be at least 2")
        if d.spread < 0:
            raise ConfigError("data.spread", "must be nonnegative")
    if not 0.0 < d.test_fraction < 1.0:
        raise ConfigError("data.test_fraction", "must lie in (0, 1)")

    m = cfg.model
    if any(h < 1 for h in m.hidden) or m.d < 1:
        raise ConfigError("model.hidden", "layer widths must be positive")
    if m.pretrain_epochs < 1:
        raise ConfigError("model.pretrain_epochs", "must be at least 1")
    if m.pretrain_lr <= 0:
        raise ConfigError("model.pretrain_lr", "must be positive")

    a = cfg.anchors
    if a.mode not in ("orthonormal", "random_unit", "prototype", "file"):
        raise ConfigError("anchors.mode", f"unknown mode {a.mode!r}")
    if a.mode == "file" and not a.path:
        raise ConfigError("anchors.path", "required when anchors.mode is 'file'")

    p = cfg.probes
    if p.n_adv < 1:
        raise ConfigError("probes.n_adv", "must be at least 1")
    if p.steps < 1:
        raise ConfigError("probes.steps", "must be at least 1")
    if p.radius <= 0:
        raise ConfigError("probes.radius", "must be positive")

    u = cfg.unlearn
    if u.method not in METHODS:
        raise ConfigError("unlearn.method", f"must be one of {METHODS}, got {u.method!r}")
    if u.k < 1:
        raise ConfigError("unlearn.k", "must be at least 1")
    if len(u.weights) != 5:
        raise ConfigError("unlearn.weights", "needs exactly 5 entries")
    try:
        u.to_unlearn_config()
    except ValueError as exc:
        raise ConfigError("unlearn", str(exc)) from exc

    e = cfg.eval
    if not e.retrieval_ks or any(k < 1 for k in e.retrieval_ks):
        raise ConfigError("eval.retrieval_ks", "cutoffs must be positive")
    if e.retrieval_query_count < 1:
        raise ConfigError("eval.retrieval_query_count", "must be positive")
    if e.profile_instances < 0:
        raise ConfigError("eval.profile_instances", "must be nonnegative")

    s = cfg.sweep
    for method in s.methods:
        if method not in METHODS:
            raise ConfigError("sweep.methods", f"unknown method {method!r}")
    if any(k < 1 for k in s.k_values):
        raise ConfigError("sweep.k_values", "k values must be positive")
    if not s.seeds:
        raise ConfigError("sweep.seeds", "needs at least one seed")
    if s.align_variants is not None:
        for v in s.align_variants:
            if v not in ("CS", "MSE", "KL", "WD", "MMD"):
                raise ConfigError("sweep.align_variants", f"unknown variant {v!r}")
    if s.ablations is not None:
        for name in s.ablations:
            if name not in ABLATIONS:
                raise ConfigError("sweep.ablations", f"unknown ablation {name!r}")
    if s.anchor_modes is not None:
        for mode in s.anchor_modes:
            if mode not in ("orthonormal", "random_unit", "prototype", "file"):
                raise ConfigError("sweep.anchor_modes", f"unknown anchor mode {mode!r}")
