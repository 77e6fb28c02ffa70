"""Experiment configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .cost import SCHEMES, Preset, TrainHyper, load_preset
from .errors import ConfigError, ValidationError
from .model import ModelConfig

OUT_ENV = "SPLITLORA_OUT"


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    cost_model: ModelConfig = field(default_factory=ModelConfig.paper_scale)
    hyper: TrainHyper = field(default_factory=TrainHyper)
    preset: str | dict = "paper-sec6"
    schemes: list[str] = field(default_factory=lambda: list(SCHEMES))
    rounds: int = 200
    agg_every: int = 5
    alpha: float = 0.5
    seed: int = 0
    output_dir: str = "runs"
    lr: float = 0.1
    batch_size: int = 16
    n_train: int = 3000
    n_eval: int = 1000
    cuts: list[int] = field(default_factory=lambda: [1, 1, 2, 2, 3, 3])
    policy: str = "greedy"
    uniform_weights: bool = False
    eval_every: int = 1

    def validate(self) -> "ExperimentConfig":
        positive = ("rounds", "agg_every", "batch_size", "n_train", "n_eval", "eval_every")
        for name in positive:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(name, f"must be an integer >= 1, got {v!r}")
        if not self.alpha > 0:
            raise ConfigError("alpha", f"must be positive, got {self.alpha!r}")
        if not self.lr >= 0:
            raise ConfigError("lr", f"must be >= 0, got {self.lr!r}")
        bad = [s for s in self.schemes if s not in SCHEMES]
        if bad or not self.schemes:
            raise ConfigError("schemes", f"must be a non-empty subset of {list(SCHEMES)}, got {self.schemes}")
        if self.policy not in ("greedy", "fifo"):
            raise ConfigError("policy", f"must be 'greedy' or 'fifo', got {self.policy!r}")
        if not self.cuts:
            raise ConfigError("cuts", "at least one client is required")
        for i, c in enumerate(self.cuts):
            if not isinstance(c, int) or not 0 <= c <= self.model.num_blocks:
                raise ConfigError(f"cuts[{i}]", f"must lie in [0, {self.model.num_blocks}], got {c!r}")
        if self.n_train < len(self.cuts):
            raise ConfigError("n_train", f"{self.n_train} examples cannot cover {len(self.cuts)} clients")
        try:
            self.load_preset()
        except ValidationError as exc:
            raise ConfigError("preset", str(exc)) from None
        return self

    def load_preset(self) -> Preset:
        if isinstance(self.preset, dict):
            return Preset.from_dict(self.preset)
        return load_preset(self.preset)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        known = {f.name for f in fields(cls)}
        for k in doc:
            if k not in known:
                raise ConfigError(k, "unknown field")
        kw = dict(doc)
        for name, typ in (("model", ModelConfig), ("cost_model", ModelConfig), ("hyper", TrainHyper)):
            if name in kw:
                kw[name] = _nested(name, typ, kw[name])
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError("<root>", str(exc)) from None
        return cfg.validate()


def _nested(name: str, typ, value):
    if isinstance(value, typ):
        return value
    if not isinstance(value, dict):
        raise ConfigError(name, "must be an object")
    known = {f.name for f in fields(typ)}
    for k in value:
        if k not in known:
            raise ConfigError(f"{name}.{k}", "unknown field")
    if name == "cost_model":
        base = asdict(ModelConfig.paper_scale())
        base.update(value)
        value = base
    try:
        return typ(**value)
    except ValidationError as exc:
        raise ConfigError(name, str(exc)) from None
    except TypeError as exc:
        raise ConfigError(name, str(exc)) from None


def load_config(path: str | os.PathLike | None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Read a JSON config (or defaults), apply non-None overrides, validate."""
    doc: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {p}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    for k, v in (overrides or {}).items():
        if v is not None:
            doc[k] = v
    return ExperimentConfig.from_dict(doc)


def output_dir(cfg: ExperimentConfig, flag: str | None = None) -> Path:
    """``--out`` flag, then ``$SPLITLORA_OUT``, then the config value."""
    return Path(flag or os.environ.get(OUT_ENV) or cfg.output_dir)
