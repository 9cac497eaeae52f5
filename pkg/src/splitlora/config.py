"""Run configuration: strict JSON loading into frozen dataclasses.

Top-level keys are the :class:`TrainingConfig` fields plus ``mode`` and
``output_dir``; ``model``, ``data`` and ``costs`` are nested objects.
Unknown keys anywhere are rejected. Defaults describe a GPT2-small-shaped
run at toy width: 3 clients, cut after 3 of 12 blocks, batch 8, learning
rate 2e-4.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .costs import ComputeSpec, LinkSpec
from .data import TASKS, PartitionSpec
from .errors import ConfigError
from .model import TRANSFORMER, TRUNK_KINDS, LayerSpec, toy_architecture

log = logging.getLogger(__name__)

MODES = ("splitlora", "cenlora", "fedlora")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    seq_len: int = 16
    width: int = 32
    hidden: int = 64
    num_blocks: int = 12
    block: str = TRANSFORMER
    init_sigma: float | None = None
    lora_targets: tuple[str, ...] | None = None
    lora_on_embedding: bool = False
    lora_on_head: bool = False

    def validate(self):
        if self.block not in TRUNK_KINDS:
            raise ConfigError(f"model.block must be one of {TRUNK_KINDS}")
        for name in ("vocab_size", "seq_len", "width", "hidden", "num_blocks"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.num_blocks < 2:
            raise ConfigError("model.num_blocks must be >= 2 so both parties hold layers")
        if self.init_sigma is not None and self.init_sigma < 0:
            raise ConfigError("model.init_sigma must be >= 0")

    def architecture(self) -> list[LayerSpec]:
        return toy_architecture(self.vocab_size, self.width, self.hidden, self.num_blocks, self.block)


@dataclass(frozen=True)
class DataConfig:
    task: str = "copy_next_token"
    n_train: int = 1200
    n_eval: int = 240
    groups: int = 4
    noise: float = 0.1
    partition: str = "iid"
    concentration: float = 0.5

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ConfigError("data.n_train and data.n_eval must be >= 1")
        if not 0 <= self.noise <= 1:
            raise ConfigError("data.noise must lie in [0, 1]")
        try:
            PartitionSpec(self.partition, self.concentration)
        except ValueError as exc:
            raise ConfigError(f"data: {exc}") from exc

    @property
    def partition_spec(self) -> PartitionSpec:
        return PartitionSpec(self.partition, self.concentration)


@dataclass(frozen=True)
class CostConfig:
    client_flops: float = 35.6e12
    server_flops: float = 284.8e12
    aggregator_flops: float = 35.6e12
    client_server_bps: float = 600e6
    client_aggregator_bps: float = 300e6
    bytes_per_element: int = 4
    header_bytes: int = 64

    def validate(self):
        try:
            self.compute, self.links
        except ValueError as exc:
            raise ConfigError(f"costs: {exc}") from exc
        if self.bytes_per_element < 1 or self.header_bytes < 0:
            raise ConfigError("costs.bytes_per_element must be >= 1 and header_bytes >= 0")

    @property
    def compute(self) -> ComputeSpec:
        return ComputeSpec(self.client_flops, self.server_flops, self.aggregator_flops)

    @property
    def links(self) -> LinkSpec:
        return LinkSpec(self.client_server_bps, self.client_aggregator_bps)


@dataclass(frozen=True)
class TrainingConfig:
    num_clients: int = 3
    rounds: int = 100
    agg_interval: int = 1
    batch_size: int = 8
    lr_client: float = 0.0002
    lr_server: float = 0.0002
    cut_layer: int = 3
    rank: int = 4
    alpha: float | None = None
    lora_sigma: float = 0.02
    seed: int = 0
    epochs: int | None = None
    checkpoint_every: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    costs: CostConfig = field(default_factory=CostConfig)

    def validate(self) -> "TrainingConfig":
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.agg_interval < 1:
            raise ConfigError("agg_interval must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_client < 0 or self.lr_server < 0:
            raise ConfigError("learning rates must be >= 0")
        max_rank = min(self.model.width, self.model.hidden)
        if self.rank < 1 or self.rank > max_rank:
            raise ConfigError(f"rank must lie in [1, {max_rank}]")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.lora_sigma < 0:
            raise ConfigError("lora_sigma must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        self.model.validate()
        self.data.validate()
        self.costs.validate()
        if not 1 <= self.cut_layer <= self.model.num_blocks - 1:
            raise ConfigError(f"cut_layer must lie in [1, {self.model.num_blocks - 1}]")
        if self.data.n_train < self.num_clients:
            raise ConfigError("data.n_train must be at least num_clients")
        if self.epochs is not None:
            log.warning("'epochs' is accepted for compatibility but ignored; training runs for 'rounds'")
        return self


@dataclass(frozen=True)
class RunConfig:
    mode: str
    training: TrainingConfig
    output_dir: str | None = None


def _coerce(value, tp, where: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], where)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, where)
    if origin is tuple:
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"{where} must be a list of strings")
        return tuple(value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _build(cls, obj, where: str):
    if not isinstance(obj, dict):
        raise ConfigError(f"{where or 'config'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(obj) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}.{k}" if where else k) for k, v in obj.items()}
    return cls(**kwargs)


def training_config_from_dict(obj: dict) -> TrainingConfig:
    return _build(TrainingConfig, obj, "").validate()


def run_config_from_dict(obj: dict) -> RunConfig:
    if not isinstance(obj, dict):
        raise ConfigError("config must be a JSON object")
    obj = dict(obj)
    mode = obj.pop("mode", "splitlora")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    out = obj.pop("output_dir", None)
    if out is not None and not isinstance(out, str):
        raise ConfigError("output_dir must be a string")
    return RunConfig(mode, training_config_from_dict(obj), out)


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    return run_config_from_dict(obj)


def to_dict(cfg) -> dict:
    """JSON-ready dict of a config (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg)))
