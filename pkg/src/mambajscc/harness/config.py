"""Flat ``key = value`` run configuration.

Every key of ``ModelConfig`` and ``TrainConfig`` is accepted under its field
name (``channels``, ``cbr``, ``learning_rate``, ``snr_min`` ...), plus:

``data_dir``
    directory of PPM / raw tensor images; empty means a synthetic corpus
``synthetic_count``, ``synthetic_seed``
    size and seed of the synthetic corpus
``eval_snrs``
    comma-separated SNRs (dB) for ``eval`` / ``sweep``; ``inf`` is the noiseless row
``eval_count``
    number of images scored per SNR (0 means all)

Lines starting with ``#`` are comments. Unknown keys are errors. Model keys
override the desk-scale preset, not the full-size defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..codec import ConfigError, ModelConfig, parse_model_fields
from .train import TrainConfig

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}


def parse_snr_list(text: str) -> list[float]:
    return [float(tok) for tok in text.replace(" ", "").split(",") if tok]


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_dir: str = ""
    synthetic_count: int = 64
    synthetic_seed: int = 0
    eval_snrs: tuple[float, ...] = (1.0, 5.0, 10.0, 15.0, 20.0)
    eval_count: int = 0

    def to_text(self) -> str:
        extra = [f"data_dir = {self.data_dir}", f"synthetic_count = {self.synthetic_count}",
                 f"synthetic_seed = {self.synthetic_seed}",
                 "eval_snrs = " + ",".join(repr(s) for s in self.eval_snrs),
                 f"eval_count = {self.eval_count}"]
        return self.model.to_manifest() + self.train.to_manifest() + "\n".join(extra) + "\n"


def parse_lines(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        raw[key.strip()] = value.strip()
    return raw


def _train_value(key: str, value: str):
    kind = _TRAIN_KEYS[key]
    if kind in ("int", int):
        return int(value)
    if kind in ("float", float):
        return float(value)
    return value


def build_config(raw: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Apply ``raw`` string settings on top of ``base`` (default: desk preset)."""
    base = base or RunConfig()
    model_raw = {k: v for k, v in raw.items() if k in _MODEL_KEYS}
    train_raw = {k: v for k, v in raw.items() if k in _TRAIN_KEYS}
    rest = {k: v for k, v in raw.items() if k not in _MODEL_KEYS and k not in _TRAIN_KEYS}
    known_rest = {"data_dir", "synthetic_count", "synthetic_seed", "eval_snrs", "eval_count"}
    unknown = rest.keys() - known_rest
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model = replace(base.model, **parse_model_fields(model_raw))
        train = replace(base.train, **{k: _train_value(k, v) for k, v in train_raw.items()})
        updates = {}
        if "data_dir" in rest:
            updates["data_dir"] = rest["data_dir"]
        for key in ("synthetic_count", "synthetic_seed", "eval_count"):
            if key in rest:
                updates[key] = int(rest[key])
        if "eval_snrs" in rest:
            updates["eval_snrs"] = tuple(parse_snr_list(rest["eval_snrs"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return replace(base, model=model, train=train, **updates)


def load_config(path: str | os.PathLike) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file {p} does not exist")
    return build_config(parse_lines(p.read_text(), str(p)))
