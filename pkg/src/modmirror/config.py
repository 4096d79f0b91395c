"""Run configuration: defaults, validation and TOML loading."""
from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .datagen import DatasetSpec, n_test_samples
from .nnkit import Topology

STRATEGIES = ("modality_mirror", "multifl", "unifl", "harmony")


class ConfigError(ValueError):
    """Validation failure; ``errors`` lists ``(field_path, message)`` pairs."""

    def __init__(self, errors: list[tuple[str, str]]):
        self.errors = errors
        super().__init__("; ".join(f"{p}: {m}" for p, m in errors))


@dataclass(frozen=True)
class RunConfig:
    n_clients: int = 100
    missing_rate: float = 0.3
    rounds: int = 200
    local_epochs: int = 1
    clients_per_round: int = 10
    lr: float = 5e-4
    temperature: float = 2.0
    kl_weight: float = 1.0
    batch_size: int = 16
    seed: int = 0
    alpha: float = 0.1
    hidden_dim: int = 64
    embed_dim: int = 32
    topk: int = 5
    strategy: str = "modality_mirror"
    # "uniform" (plain FedAvg over sampled clients) or "size" (shard-size weights)
    aggregation: str = "uniform"
    # "mean" divides the stage-2 sum by the number of contributors; "literal"
    # divides by the audio-only count of the same round's draw.
    stage2_divisor: str = "mean"
    warm_start: bool = True
    harmony_freeze_encoders: bool = False
    workers: int = 1
    dataset: DatasetSpec = field(default_factory=DatasetSpec)

    @property
    def topology(self) -> Topology:
        return Topology(
            audio_dim=self.dataset.audio_dim,
            visual_dim=self.dataset.visual_dim,
            num_classes=self.dataset.num_classes,
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["dataset"]["audio_ambiguous_pairs"] = [list(p) for p in self.dataset.audio_ambiguous_pairs]
        return d


_INT_FIELDS = {"n_clients", "rounds", "local_epochs", "clients_per_round", "batch_size", "seed",
               "hidden_dim", "embed_dim", "topk", "workers"}
_FLOAT_FIELDS = {"missing_rate", "lr", "temperature", "kl_weight", "alpha"}
_BOOL_FIELDS = {"warm_start", "harmony_freeze_encoders"}
_DATASET_INT = {"num_classes", "audio_dim", "visual_dim", "samples_per_class", "seed"}
_DATASET_FLOAT = {"audio_noise_sigma", "visual_noise_sigma"}


def _coerce(path: str, value, kind, errors) -> Any:
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif kind is str:
        if isinstance(value, str):
            return value
    errors.append((path, f"expected {kind.__name__}, got {type(value).__name__}"))
    return None


def config_from_dict(raw: dict[str, Any]) -> RunConfig:
    """Build a RunConfig from a parsed mapping, collecting every violation."""
    errors: list[tuple[str, str]] = []
    known = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in raw.items():
        if key not in known:
            errors.append((key, "unknown field"))
            continue
        if key == "dataset":
            continue
        kind = int if key in _INT_FIELDS else float if key in _FLOAT_FIELDS else bool if key in _BOOL_FIELDS else str
        v = _coerce(key, value, kind, errors)
        if v is not None:
            kwargs[key] = v

    ds_raw = raw.get("dataset", {})
    ds_kwargs: dict[str, Any] = {}
    if not isinstance(ds_raw, dict):
        errors.append(("dataset", "expected a table"))
        ds_raw = {}
    ds_known = {f.name for f in dataclasses.fields(DatasetSpec)}
    for key, value in ds_raw.items():
        path = f"dataset.{key}"
        if key not in ds_known:
            errors.append((path, "unknown field"))
        elif key == "audio_ambiguous_pairs":
            if isinstance(value, list) and all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(i, int) for i in p) for p in value
            ):
                ds_kwargs[key] = tuple(tuple(p) for p in value)
            else:
                errors.append((path, "expected a list of [int, int] pairs"))
        else:
            v = _coerce(path, value, int if key in _DATASET_INT else float, errors)
            if v is not None:
                ds_kwargs[key] = v
    cfg = RunConfig(**kwargs, dataset=DatasetSpec(**ds_kwargs))
    # range checks run on the well-typed fields too, so one pass reports everything
    errors.extend(validation_errors(cfg))
    if errors:
        raise ConfigError(errors)
    return cfg


def validate(cfg: RunConfig) -> RunConfig:
    errors = validation_errors(cfg)
    if errors:
        raise ConfigError(errors)
    return cfg


def validation_errors(cfg: RunConfig) -> list[tuple[str, str]]:
    errors: list[tuple[str, str]] = []

    def need(ok: bool, path: str, msg: str):
        if not ok:
            errors.append((path, msg))

    need(cfg.n_clients >= 1, "n_clients", "must be >= 1")
    need(0.0 <= cfg.missing_rate <= 1.0, "missing_rate", "must lie in [0, 1]")
    need(cfg.rounds >= 0, "rounds", "must be >= 0")
    need(cfg.local_epochs >= 1, "local_epochs", "must be >= 1")
    need(1 <= cfg.clients_per_round <= cfg.n_clients, "clients_per_round", "must lie in [1, n_clients]")
    need(cfg.lr > 0, "lr", "must be > 0")
    need(cfg.temperature > 0, "temperature", "must be > 0")
    need(cfg.kl_weight >= 0, "kl_weight", "must be >= 0")
    need(cfg.batch_size >= 1, "batch_size", "must be >= 1")
    need(cfg.seed >= 0, "seed", "must be >= 0")
    need(cfg.alpha > 0, "alpha", "must be > 0")
    need(cfg.hidden_dim >= 1, "hidden_dim", "must be >= 1")
    need(cfg.embed_dim >= 1, "embed_dim", "must be >= 1")
    need(1 <= cfg.topk <= cfg.dataset.num_classes, "topk", "must lie in [1, dataset.num_classes]")
    need(cfg.strategy in STRATEGIES, "strategy", f"must be one of {', '.join(STRATEGIES)}")
    need(cfg.aggregation in ("uniform", "size"), "aggregation", "must be 'uniform' or 'size'")
    need(cfg.stage2_divisor in ("mean", "literal"), "stage2_divisor", "must be 'mean' or 'literal'")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    try:
        cfg.dataset.validate()
    except ValueError as exc:
        errors.append(("dataset", str(exc)))
    spc = cfg.dataset.samples_per_class
    n_samples = cfg.dataset.num_classes * (spc - n_test_samples(spc))
    need(n_samples >= cfg.n_clients, "n_clients", "more clients than training samples")
    return errors


def parse_config_text(text: str) -> RunConfig:
    """Parse TOML text into a validated RunConfig; empty text gives defaults."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError([("<file>", f"invalid TOML: {exc}")]) from exc
    return config_from_dict(raw)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    """Render a RunConfig as TOML (inverse of ``parse_config_text``)."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, float):
            return repr(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return str(v)

    d = cfg.to_dict()
    ds = d.pop("dataset")
    lines = [f"{k} = {fmt(v)}" for k, v in d.items()]
    lines.append("")
    lines.append("[dataset]")
    lines.extend(f"{k} = {fmt(v)}" for k, v in ds.items())
    return "\n".join(lines) + "\n"


# the name used by the CLI docs for text -> RunConfig checking
validate_config = parse_config_text
