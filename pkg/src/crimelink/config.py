"""Flat ``key = value`` config files, canonical snapshots and config hashes."""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .network import NetConfig
from .synthgen import ConfigError, GenConfig
from .training import LossConfig, TrainConfig

NET_KEYS = tuple(f.name for f in dataclasses.fields(NetConfig) if f.name != "input_dim")
LOSS_KEYS = tuple(f.name for f in dataclasses.fields(LossConfig))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig))
RUN_EXTRA_KEYS = ("folds", "fixed_fp_rate")
GEN_EXTRA_KEYS = ("target_positive_fraction",)
# stands in for input_dim, which is only known once the dataset is loaded
_PROBE_DIM = 1 << 20


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value' in {source}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "empty key")
        if key in out:
            raise ConfigError(key, f"duplicate key on line {lineno}")
        out[key] = value
    return out


def read_kv(path) -> dict[str, str]:
    return parse_kv(Path(path).read_text(encoding="utf-8"), str(path))


def _coerce(name: str, raw: str, hint) -> Any:
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        hint = args[0]
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None


def build(cls, values: dict[str, str], **fixed):
    """Instantiate dataclass ``cls`` from string values, naming the field on failure."""
    hints = typing.get_type_hints(cls)
    kwargs = dict(fixed)
    for key, raw in values.items():
        kwargs[key] = _coerce(key, raw, hints[key])
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        field_name = next((k for k in kwargs if k in msg), next(iter(values), cls.__name__))
        raise ConfigError(field_name, msg) from None


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(snapshot: dict) -> str:
    """SHA-256 over sorted ``key=value`` lines; independent of key order."""
    lines = "\n".join(f"{k}={format_value(snapshot[k])}" for k in sorted(snapshot))
    return hashlib.sha256(lines.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RunConfig:
    net: dict = field(default_factory=dict)
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    folds: int = 5
    fixed_fp_rate: float = 0.15

    def net_config(self, input_dim: int) -> NetConfig:
        return NetConfig(input_dim=input_dim, **self.net)

    def snapshot(self, input_dim: Optional[int] = None) -> dict:
        net = dataclasses.asdict(self.net_config(input_dim or _PROBE_DIM))
        if input_dim is None:
            del net["input_dim"]
        out = {**net, **dataclasses.asdict(self.loss), **dataclasses.asdict(self.train)}
        out["folds"] = self.folds
        out["fixed_fp_rate"] = self.fixed_fp_rate
        return out

    def replace(self, **changes) -> "RunConfig":
        net = dict(self.net)
        loss, train = {}, {}
        top = {}
        for k, v in changes.items():
            if k in NET_KEYS:
                net[k] = v
            elif k in LOSS_KEYS:
                loss[k] = v
            elif k in TRAIN_KEYS:
                train[k] = v
            elif k in RUN_EXTRA_KEYS:
                top[k] = v
            else:
                raise ConfigError(k, "unknown key")
        return RunConfig(
            net,
            dataclasses.replace(self.loss, **loss),
            dataclasses.replace(self.train, **train),
            top.get("folds", self.folds),
            top.get("fixed_fp_rate", self.fixed_fp_rate),
        )


def run_config_from_dict(values: dict[str, str]) -> RunConfig:
    known = set(NET_KEYS) | set(LOSS_KEYS) | set(TRAIN_KEYS) | set(RUN_EXTRA_KEYS)
    for key in values:
        if key not in known:
            raise ConfigError(key, "unknown key")
    probe = build(NetConfig, {k: v for k, v in values.items() if k in NET_KEYS}, input_dim=_PROBE_DIM)
    net = {k: getattr(probe, k) for k in values if k in NET_KEYS}
    loss = build(LossConfig, {k: v for k, v in values.items() if k in LOSS_KEYS})
    train = build(TrainConfig, {k: v for k, v in values.items() if k in TRAIN_KEYS})
    folds = _coerce("folds", values["folds"], int) if "folds" in values else 5
    if folds < 2:
        raise ConfigError("folds", "must be at least 2")
    fp = _coerce("fixed_fp_rate", values["fixed_fp_rate"], float) if "fixed_fp_rate" in values else 0.15
    if not 0 < fp < 1:
        raise ConfigError("fixed_fp_rate", "must lie in (0, 1)")
    return RunConfig(net, loss, train, folds, fp)


def load_run_config(path) -> RunConfig:
    return run_config_from_dict(read_kv(path))


def gen_config_from_dict(values: dict[str, str]) -> tuple[GenConfig, Optional[float]]:
    names = {f.name for f in dataclasses.fields(GenConfig)}
    for key in values:
        if key not in names and key not in GEN_EXTRA_KEYS:
            raise ConfigError(key, "unknown key")
    target = None
    if "target_positive_fraction" in values:
        target = _coerce("target_positive_fraction", values["target_positive_fraction"], float)
    cfg = build(GenConfig, {k: v for k, v in values.items() if k in names})
    return cfg, target


def load_gen_config(path) -> tuple[GenConfig, Optional[float]]:
    return gen_config_from_dict(read_kv(path))


def gen_snapshot(cfg: GenConfig, target: Optional[float] = None) -> dict:
    out = dataclasses.asdict(cfg)
    out["target_positive_fraction"] = target
    return out
