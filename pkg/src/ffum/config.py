"""Experiment configuration: one JSON document, validated before any compute.

Every section is a frozen dataclass; unknown keys are rejected and each error
names the offending field by its dotted path (``methods[0].alpha``). Missing
keys take their defaults, and :func:`dump_config` writes every field, so
``dump_config(parse_config(dump_config(c))) == dump_config(c)`` byte for byte.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import CorruptionSpec, ScenarioSpec
from .divergences import DivergenceKind, DivergencePlan
from .errors import ConfigurationError
from .federation import RoundConfig
from .models import ModelSpec
from .unlearning import FfumConfig

METHOD_KINDS = ("ffum", "halimi", "not", "retrain_oracle")
SCENARIO_KINDS = ("auto", "robustness", "privacy")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    # synthetic blobs
    num_classes: int = 10
    per_class: int = 100
    dim: int = 196
    spread: float = 1.0
    noise: float = 0.3
    # IDX files
    images: str | None = None
    labels: str | None = None
    limit: int | None = None
    downsample_to: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigurationError(f"kind must be 'synthetic' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigurationError("images and labels paths are required for kind 'idx'")
        for name in ("num_classes", "per_class", "dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")


@dataclass(frozen=True)
class PretrainConfig:
    rounds: int = 15
    local_epochs: int = 2
    batch_size: int = 32
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")
        RoundConfig(self.local_epochs, self.batch_size, self.learning_rate)


@dataclass(frozen=True)
class MethodConfig:
    """One unlearning method. Fields irrelevant to ``kind`` are ignored.

    ``ffum`` reads the f-FUM fields (``plan`` is ``"<retain>-<forget>"``);
    ``halimi`` reads ``eta``, ``epochs``, ``radius_delta`` (``None``: a third
    of the last pretraining round's client spread) and the fine-tuning
    fields; ``not`` reads only the fine-tuning fields. Fine-tuning fields left
    as ``None`` inherit the pretraining values.
    """

    kind: str = "ffum"
    name: str | None = None
    # f-FUM
    plan: str = "KL-JS"
    supervised_term: str = "KL"
    rounds_R: int = 2
    post_rounds: int = 3
    eta_max: float = 0.1
    eta_min: float = 0.1
    epochs_max: int = 2
    epochs_min: int = 1
    epochs_post: int = 1
    alpha: float = 0.5
    gamma: float = 1.0
    teacher_policy: str = "initial_model"
    batch_size: int = 32
    # Halimi et al.
    eta: float = 0.05
    epochs: int = 1
    radius_delta: float | None = None
    # fine-tuning for both baselines
    finetune_rounds: int = 3
    finetune_epochs: int | None = None
    finetune_lr: float | None = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigurationError(f"kind must be one of {METHOD_KINDS}, got {self.kind!r}")
        if self.kind == "ffum":
            self.ffum_config(0)
        if self.kind == "halimi":
            if self.eta < 0:
                raise ConfigurationError("eta must be non-negative")
            if self.epochs < 1:
                raise ConfigurationError("epochs must be at least 1")
            if self.radius_delta is not None and self.radius_delta < 0:
                raise ConfigurationError("radius_delta must be non-negative")
        if self.kind in ("halimi", "not"):
            if self.finetune_rounds < 0:
                raise ConfigurationError("finetune_rounds must be non-negative")
            if self.finetune_epochs is not None and self.finetune_epochs < 1:
                raise ConfigurationError("finetune_epochs must be at least 1")
            if self.finetune_lr is not None and self.finetune_lr < 0:
                raise ConfigurationError("finetune_lr must be non-negative")
            if self.batch_size < 1:
                raise ConfigurationError("batch_size must be at least 1")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "ffum":
            return f"ffum-{self.ffum_config(0).plan.label}"
        return self.kind

    def ffum_config(self, seed: int) -> FfumConfig:
        plan = DivergencePlan.from_label(self.plan, self.supervised_term)
        return FfumConfig(
            rounds_R=self.rounds_R, post_rounds=self.post_rounds,
            eta_max=self.eta_max, eta_min=self.eta_min,
            epochs_max=self.epochs_max, epochs_min=self.epochs_min, epochs_post=self.epochs_post,
            alpha=self.alpha, gamma=self.gamma, plan=plan,
            teacher_policy=self.teacher_policy, batch_size=self.batch_size, seed=seed,
        )


@dataclass(frozen=True)
class EvalConfig:
    tau_eq: float = 0.05
    tau_mia: float = 0.05
    mia: bool = True
    mia_seed: int = 0
    forget_metric: str = "accuracy"
    scenario_kind: str = "auto"

    def __post_init__(self):
        if self.tau_eq < 0 or self.tau_mia < 0:
            raise ConfigurationError("tolerances must be non-negative")
        if self.forget_metric not in ("accuracy", "loss"):
            raise ConfigurationError("forget_metric must be 'accuracy' or 'loss'")
        if self.scenario_kind not in SCENARIO_KINDS:
            raise ConfigurationError(f"scenario_kind must be one of {SCENARIO_KINDS}")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    methods: tuple[MethodConfig, ...] = (MethodConfig(), MethodConfig(kind="retrain_oracle"))
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        if not self.methods:
            raise ConfigurationError("methods must list at least one method")
        labels = [m.label for m in self.methods]
        dupes = sorted({x for x in labels if labels.count(x) > 1})
        if dupes:
            raise ConfigurationError(f"methods: duplicate method label(s) {dupes}; set 'name' to disambiguate")
        if self.model.input_dim != self.input_dim_expected():
            raise ConfigurationError(
                f"model.input_dim is {self.model.input_dim} but the dataset yields {self.input_dim_expected()}"
            )
        if self.scenario.level == "client":
            for cid in self.scenario.target_clients:
                if not 0 <= cid < self.scenario.num_clients:
                    raise ConfigurationError(
                        f"scenario.target_clients: client {cid} out of range [0, {self.scenario.num_clients})"
                    )
        if self.model.num_classes != self.dataset.num_classes:
            raise ConfigurationError("model.num_classes must equal dataset.num_classes")

    def input_dim_expected(self) -> int:
        if self.dataset.kind == "synthetic":
            return self.dataset.dim
        if self.dataset.downsample_to is not None:
            return self.dataset.downsample_to ** 2
        return self.model.input_dim  # known only after reading the header

    @property
    def scenario_kind(self) -> str:
        if self.eval.scenario_kind != "auto":
            return self.eval.scenario_kind
        return "privacy" if self.corruption.kind == "none" else "robustness"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))


# section name -> (class, {field: accepted JSON types})
_NUM = (int, float)
_SCHEMA = {
    "dataset": (DatasetConfig, {
        "kind": str, "num_classes": int, "per_class": int, "dim": int, "spread": _NUM, "noise": _NUM,
        "images": (str, type(None)), "labels": (str, type(None)),
        "limit": (int, type(None)), "downsample_to": (int, type(None)),
    }),
    "model": (ModelSpec, {"input_dim": int, "hidden_dims": list, "num_classes": int, "use_layer_norm": bool}),
    # the scenario's own seed is derived from the master seed, never read from the file
    "scenario": (ScenarioSpec, {
        "level": str, "num_clients": int, "target_clients": list, "corrupted_fraction": _NUM,
        "forget_fraction": _NUM, "test_fraction": _NUM,
    }),
    "corruption": (CorruptionSpec, {
        "kind": str, "backdoor_target_class": int, "trigger_size": int, "trigger_corner": str,
        "trigger_value": _NUM, "confuse_pairs": list,
    }),
    "pretrain": (PretrainConfig, {"rounds": int, "local_epochs": int, "batch_size": int, "learning_rate": _NUM}),
    "eval": (EvalConfig, {
        "tau_eq": _NUM, "tau_mia": _NUM, "mia": bool, "mia_seed": int, "forget_metric": str, "scenario_kind": str,
    }),
}
_METHOD_TYPES = {
    "kind": str, "name": (str, type(None)), "plan": str, "supervised_term": str,
    "rounds_R": int, "post_rounds": int, "eta_max": _NUM, "eta_min": _NUM,
    "epochs_max": int, "epochs_min": int, "epochs_post": int, "alpha": _NUM, "gamma": _NUM,
    "teacher_policy": str, "batch_size": int, "eta": _NUM, "epochs": int,
    "radius_delta": (_NUM[0], _NUM[1], type(None)), "finetune_rounds": int,
    "finetune_epochs": (int, type(None)), "finetune_lr": (_NUM[0], _NUM[1], type(None)),
}
_TOP_TYPES = {"seed": int, "output_dir": str, "methods": list, **{k: dict for k in _SCHEMA}}


def _check_type(path, value, types):
    types = types if isinstance(types, tuple) else (types,)
    # bool is an int subclass; never accept it where a number is wanted
    if isinstance(value, bool) and bool not in types:
        ok = False
    else:
        ok = isinstance(value, types)
    if not ok:
        names = "/".join("null" if t is type(None) else t.__name__ for t in types)
        raise ConfigurationError(f"{path} must be {names}, got {json.dumps(value)}")


def _section(path, data, cls, types, **fixed):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must be an object")
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ConfigurationError(f"{path}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        _check_type(f"{path}.{key}", value, types[key])
        if key in ("hidden_dims", "target_clients"):
            for i, v in enumerate(value):
                _check_type(f"{path}.{key}[{i}]", v, int)
            value = tuple(value)
        if key == "confuse_pairs":
            for i, pair in enumerate(value):
                if not isinstance(pair, list) or len(pair) != 2:
                    raise ConfigurationError(f"{path}.{key}[{i}] must be a two-element list")
                for v in pair:
                    _check_type(f"{path}.{key}[{i}]", v, int)
            value = tuple(tuple(p) for p in value)
        kwargs[key] = value
    try:
        return cls(**kwargs, **fixed)
    except ConfigurationError as exc:
        msg = str(exc)
        # messages from the domain types already carry the section prefix
        if not msg.startswith(path.split("[")[0] + "."):
            msg = f"{path}: {msg}"
        raise ConfigurationError(msg) from None


def config_from_dict(data) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigurationError("config must be a JSON object")
    unknown = sorted(set(data) - set(_TOP_TYPES))
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s) {unknown}")
    kwargs = {}
    for key, value in data.items():
        _check_type(key, value, _TOP_TYPES[key])
        if key in _SCHEMA:
            cls, types = _SCHEMA[key]
            kwargs[key] = _section(key, value, cls, types)
        elif key == "methods":
            kwargs[key] = tuple(
                _section(f"methods[{i}]", m, MethodConfig, _METHOD_TYPES) for i, m in enumerate(value)
            )
        else:
            kwargs[key] = value
    try:
        return ExperimentConfig(**kwargs)
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, DivergenceKind):
        return obj.value
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = {"seed": cfg.seed, "output_dir": cfg.output_dir}
    for key, (_, types) in _SCHEMA.items():
        section = getattr(cfg, key)
        out[key] = {k: _plain(getattr(section, k)) for k in types}
    out["methods"] = [{k: _plain(getattr(m, k)) for k in _METHOD_TYPES} for m in cfg.methods]
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config is not valid JSON: {exc}") from None
    return config_from_dict(data)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()
