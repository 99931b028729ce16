"""Run configuration: a flat key=value file with command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .model import Ablation
from .training import TrainConfig

TASKS = ("retention", "selection")


@dataclass
class RunConfig:
    task: str = "retention"
    input: str = ""
    workdir: str = "work"
    checkpoint: str = ""
    seed: int = 0
    # model
    embed_dim: int = 64
    char_embed_dim: int = 16
    hidden_dim: int = 64
    context: int = 3
    chronological_context: bool = False
    k: int = 20
    # data
    vocab_size: int = 10000
    session_gap: int = 1800
    max_url_chars: int = 256
    train_frac: float = 0.8
    dev_frac: float = 0.1
    test_frac: float = 0.1
    # optimisation
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    balance_candidates: bool = True
    # start the encoder from another checkpoint (e.g. the retention model)
    init_encoder_from: str = ""
    # ablations
    disable_deficit: bool = False
    disable_context: bool = False
    last_query_only: bool = False

    def validate(self) -> "RunConfig":
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        for name in ("embed_dim", "char_embed_dim", "hidden_dim", "context", "k",
                     "batch_size", "max_url_chars"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.vocab_size < 3:
            raise ValueError("vocab_size must be at least 3")
        return self

    @property
    def ablation(self) -> Ablation:
        return Ablation(self.disable_deficit, self.disable_context, self.last_query_only)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, alpha=self.alpha,
            beta1=self.beta1, beta2=self.beta2, epsilon=self.epsilon, seed=self.seed,
            context=self.context, chronological=self.chronological_context,
            balance_candidates=self.balance_candidates, ablation=self.ablation,
        )

    def model_dims(self) -> dict:
        return {"embed_dim": self.embed_dim, "char_embed_dim": self.char_embed_dim,
                "hidden_dim": self.hidden_dim}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.to_dict().items())

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    if kind in ("bool", bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw.strip()


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    values = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            values.update(parse_config_text(fh.read()))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = coerce(k, v)
    return RunConfig(**values).validate()
