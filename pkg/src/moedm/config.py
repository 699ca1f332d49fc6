"""Experiment configuration: a TOML file with one section per stage, plus a stable hash."""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Unknown keys, bad values or inconsistent sections."""


@dataclass
class RunSection:
    name: str = "default"
    seed: int = 0
    root: str = "runs"
    workers: int = 0  # 0 means all available cores


@dataclass
class ModelSection:
    d: int = 16
    emb: int = 16
    hidden: int = 64
    n_hidden: int = 2
    m: int = 9  # experts besides the primitive


@dataclass
class EnvSection:
    table: str = ""  # empty selects the shipped transition table
    noise_free: bool = True


@dataclass
class CorpusSection:
    n_conversations: int = 2000
    n_heldout: int = 200


@dataclass
class PrimitiveSection:
    steps: int = 4000
    batch: int = 64
    lr: float = 2e-3
    kappa: float = 0.1


@dataclass
class ExpertsSection:
    steps: int = 2000
    batch: int = 32
    lr: float = 2e-3
    k: int = 4
    temperature: float = 0.7
    n_contexts: int = 1000


@dataclass
class CollectSection:
    n_episodes: int = 2000
    temperature: float = 1.0
    candidate_temperature: float = 0.7


@dataclass
class RLSection:
    algos: list = field(default_factory=lambda: ["sac", "ensq", "klc", "iql", "saiql", "ftle", "moevrl", "bc",
                                                 "bandit"])
    gamma: float = 0.8
    tau: float = 0.9
    alpha: float = 0.1
    polyak: float = 0.005
    batch: int = 256
    lr: float = 2e-3
    steps: int = 4000
    dropout: float = 0.5
    n_masks: int = 5
    teacher_forcing: bool = False


@dataclass
class UserModelSection:
    hidden: list = field(default_factory=lambda: [128, 128])
    steps: int = 4000
    batch: int = 256
    lr: float = 2e-3


@dataclass
class EvalSection:
    n: int = 100
    beta: float = 50.0
    k: int = 5  # candidates per expert
    temperature: float = 0.7
    modes: list = field(default_factory=lambda: ["mf", "mb"])
    n_diversity: int = 25


SECTIONS = {
    "run": RunSection, "model": ModelSection, "env": EnvSection, "corpus": CorpusSection,
    "primitive": PrimitiveSection, "experts": ExpertsSection, "collect": CollectSection, "rl": RLSection,
    "user_model": UserModelSection, "eval": EvalSection,
}
# sections that do not change any artifact
_UNHASHED = {("run", "name"), ("run", "root"), ("run", "workers")}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    env: EnvSection = field(default_factory=EnvSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    primitive: PrimitiveSection = field(default_factory=PrimitiveSection)
    experts: ExpertsSection = field(default_factory=ExpertsSection)
    collect: CollectSection = field(default_factory=CollectSection)
    rl: RLSection = field(default_factory=RLSection)
    user_model: UserModelSection = field(default_factory=UserModelSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        from .rl.trainers import ALGOS

        bad = [a for a in self.rl.algos if a not in ALGOS]
        if bad:
            raise ConfigError(f"unknown algorithms {bad}; choose from {list(ALGOS)}")
        if not 0.0 < self.rl.gamma < 1.0:
            raise ConfigError("rl.gamma must lie in (0, 1)")
        if not 0.0 < self.rl.tau < 1.0:
            raise ConfigError("rl.tau must lie in (0, 1)")
        if self.eval.beta <= 0 or self.rl.alpha <= 0:
            raise ConfigError("eval.beta and rl.alpha must be positive")
        if not 1 <= self.model.m <= 9:
            raise ConfigError("model.m must lie in 1..9 (one expert per intent at most)")
        if self.eval.k < 1 or self.eval.n < 2:
            raise ConfigError("eval.k must be at least 1 and eval.n at least 2")
        for m in self.eval.modes:
            if m not in ("mf", "mb"):
                raise ConfigError(f"unknown evaluation mode {m!r}")
        for name in SECTIONS:
            for f in fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                    raise ConfigError(f"{name}.{f.name} must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        """sha256 prefix of every setting that can change an artifact."""
        d = self.to_dict()
        for sec, key in _UNHASHED:
            d[sec].pop(key, None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def run_dir(self) -> Path:
        return Path(self.run.root) / self.run.name


def _coerce(section: str, cls, values: dict):
    known = {f.name: f for f in fields(cls)}
    for k in values:
        if k not in known:
            raise ConfigError(f"unknown key {section}.{k}")
    default = cls()
    out = {}
    for k, v in values.items():
        ref = getattr(default, k)
        if isinstance(ref, bool):
            if not isinstance(v, bool):
                raise ConfigError(f"{section}.{k} must be true or false")
        elif isinstance(ref, int) and not isinstance(v, int):
            raise ConfigError(f"{section}.{k} must be an integer")
        elif isinstance(ref, float) and not isinstance(v, (int, float)):
            raise ConfigError(f"{section}.{k} must be a number")
        elif isinstance(ref, float):
            v = float(v)
        elif isinstance(ref, list) and not isinstance(v, list):
            raise ConfigError(f"{section}.{k} must be a list")
        elif isinstance(ref, str) and not isinstance(v, str):
            raise ConfigError(f"{section}.{k} must be a string")
        out[k] = v
    return cls(**out)


def from_dict(doc: dict) -> ExperimentConfig:
    for sec in doc:
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
        if not isinstance(doc[sec], dict):
            raise ConfigError(f"[{sec}] must be a table")
    return ExperimentConfig(**{sec: _coerce(sec, cls, doc.get(sec, {})) for sec, cls in SECTIONS.items()})


def load_config(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    """Defaults, then the TOML file, then ``section.key=value`` overrides (values in TOML syntax)."""
    doc: dict = {}
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    doc = copy.deepcopy(doc)
    for item in overrides or []:
        key, sep, raw = item.partition("=")
        sec, dot, name = key.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        try:
            value = tomllib.loads(f"v = {raw.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw.strip()  # bare strings
        doc.setdefault(sec, {})[name] = value
    return from_dict(doc)


def dump_toml(cfg: ExperimentConfig) -> str:
    """Plain TOML rendering, enough for the flat sections used here."""
    lines = []
    for sec, values in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in values.items():
            lines.append(f"{k} = {json.dumps(v)}")
        lines.append("")
    return "\n".join(lines)
