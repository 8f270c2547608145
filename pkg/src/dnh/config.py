"""Experiment configuration: dataclasses, strict TOML loading, hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .meta import MetaParams
from .numerics import ConfigError
from .streams import StreamSpec

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

MODES = ("dnh", "static")
OPTIMIZERS = ("eadam", "proximal_momentum")


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "proximal_momentum"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bias_correction: bool = True
    sigma2: float = 0.0
    eta_beta: float = 0.0
    momentum_eta: float = 0.002
    momentum_decay: float = 0.9

    def validate(self) -> None:
        if self.kind not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.kind!r}; expected one of {OPTIMIZERS}")
        if not (self.lr > 0 and self.eps > 0 and self.momentum_eta > 0):
            raise ConfigError("lr, eps and momentum_eta must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.momentum_decay < 1):
            raise ConfigError("beta1, beta2 and momentum_decay must lie in [0, 1)")
        if self.sigma2 < 0 or self.eta_beta < 0:
            raise ConfigError("sigma2 and eta_beta must be nonnegative")


@dataclass(frozen=True)
class ExperimentConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    meta: MetaParams = field(default_factory=MetaParams)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    mode: str = "dnh"
    l0: int = 2
    l_max: int = 5
    init_freqs: tuple[float, ...] = (1.0, 0.5)
    d_max: int = 2
    seed: int = 0
    total_steps: int = 0  # 0 means the whole stream
    log_every: int = 10
    task_matrix: bool = False
    eval_samples: int = 500

    @property
    def d(self) -> int:
        return self.stream.dim

    @property
    def steps(self) -> int:
        total = self.stream.total
        return total if self.total_steps <= 0 else min(self.total_steps, total)

    def validate(self) -> None:
        self.stream.validate()
        self.meta.validate()
        self.optimizer.validate()
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 1 <= self.l0 <= self.l_max:
            raise ConfigError("need 1 <= l0 <= l_max")
        if not self.init_freqs or any(f <= 0 for f in self.init_freqs):
            raise ConfigError("init_freqs must be a non-empty list of positive reals")
        if self.log_every < 1 or self.eval_samples < 1 or self.d_max < 2:
            raise ConfigError("log_every, eval_samples must be >= 1 and d_max >= 2")
        if self.total_steps < 0:
            raise ConfigError("total_steps must be nonnegative")

    def level_freqs(self) -> list[float]:
        fs = list(self.init_freqs[: self.l0])
        while len(fs) < self.l0:
            fs.append(fs[-1] / 2.0)
        return fs

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed, stream=replace(self.stream, seed=seed))


_SECTIONS = {"stream": StreamSpec, "meta": MetaParams, "optimizer": OptimizerConfig}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(unknown)}")
    kwargs = {}
    for k, v in data.items():
        default = getattr(cls(), k) if k not in _SECTIONS else None
        if isinstance(default, bool) and not isinstance(v, bool):
            raise ConfigError(f"{where}.{k} must be a boolean")
        if isinstance(default, float) and isinstance(v, (int, float)) and not isinstance(v, bool):
            v = float(v)
        elif isinstance(default, float) and isinstance(v, str) and v.lower() in ("inf", "+inf"):
            v = math.inf
        elif isinstance(default, tuple):
            v = tuple(float(a) for a in v)
        elif default is not None and not isinstance(v, type(default)):
            raise ConfigError(f"{where}.{k} has type {type(v).__name__}, "
                              f"expected {type(default).__name__}")
        kwargs[k] = v
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    data = dict(data)
    sections = {}
    for name, cls in _SECTIONS.items():
        sections[name] = data.pop(name, {})
    top = _build(ExperimentConfig, data, "experiment")
    stream_data = dict(sections["stream"])
    stream_data.setdefault("seed", top.seed)
    cfg = replace(
        top,
        stream=_build(StreamSpec, stream_data, "stream"),
        meta=_build(MetaParams, sections["meta"], "meta"),
        optimizer=_build(OptimizerConfig, sections["optimizer"], "optimizer"),
    )
    cfg.validate()
    return cfg


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return from_dict(data)


def to_dict(cfg: ExperimentConfig) -> dict:
    def clean(v):
        if isinstance(v, float) and math.isinf(v):
            return "inf"
        if isinstance(v, tuple):
            return [clean(a) for a in v]
        return v

    out = {k: clean(v) for k, v in dataclasses.asdict(cfg).items() if k not in _SECTIONS}
    for name in _SECTIONS:
        out[name] = {k: clean(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    return out


def dumps_toml(cfg: ExperimentConfig) -> str:
    """Render a config as TOML accepted by ``load``."""

    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(fmt(a) for a in v) + "]"
        return repr(v)

    d = to_dict(cfg)
    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if k not in _SECTIONS]
    for name in _SECTIONS:
        lines.append(f"\n[{name}]")
        lines += [f"{k} = {fmt(v)}" for k, v in d[name].items()]
    return "\n".join(lines) + "\n"


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
