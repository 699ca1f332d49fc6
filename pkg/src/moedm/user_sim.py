"""Scripted user environment.

The user has a hidden mood and trust.  Each agent utterance is mapped to an
intent through its marker tokens; a rule table then moves mood and trust.
The user replies with a templated utterance whose sentiment tracks the new
mood, and the reward is that reply's sentiment score.  Trust is the delayed
payoff: cheerful or probing utterances only lift the mood once trust has been
built, while low trust makes a non-negative mood relapse.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from . import toylang as tl
from .numkit import ContractViolation


@dataclass(frozen=True)
class Rule:
    dm: float
    dt: float
    trust_below: float = np.inf
    mood_at_most: float = np.inf

    def applies(self, mood: float, trust: float) -> bool:
        return trust < self.trust_below and mood <= self.mood_at_most


@dataclass(frozen=True)
class EnvConfig:
    horizon: int = 5
    gamma: float = 0.8
    mood_bands: tuple = (-0.8, -0.4, 0.0, 0.4, 0.8)
    trust_bands: tuple = (0.125, 0.375, 0.625, 0.875)
    rules: tuple = ()  # per intent: tuple of Rule, first match wins
    relapse_trust_below: float = 0.25
    relapse_mood_at_least: float = -0.2
    relapse_delta: float = -1.0
    reply_intents: tuple = (0, 8, 9, 1)  # indexed by trust band
    noise: float = 0.05
    noise_free: bool = False
    init_mood_mean: float = -0.4
    init_mood_std: float = 0.2
    init_trust: float = 0.1
    n_topics: int = 4

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ContractViolation("gamma must lie in (0, 1)")
        if len(self.rules) != tl.N_INTENTS:
            raise ContractViolation("need one rule list per intent")
        mags = [abs(r.dm) for rs in self.rules for r in rs] + [abs(r.dt) for rs in self.rules for r in rs]
        if max(mags + [abs(self.relapse_delta)]) > 1.0:
            raise ContractViolation("transition magnitudes must not exceed 1")

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "rules"}
        d["rules"] = [[{"dm": r.dm, "dt": r.dt, "trust_below": _finite(r.trust_below),
                        "mood_at_most": _finite(r.mood_at_most)} for r in rs] for rs in self.rules]
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    # band helpers (noise-free snapping)
    def mood_band(self, mood: float) -> int:
        width = 2.0 / len(self.mood_bands)
        return int(min(len(self.mood_bands) - 1, max(0, np.floor((np.clip(mood, -1, 1) + 1.0) / width))))

    def trust_band(self, trust: float) -> int:
        width = 1.0 / len(self.trust_bands)
        return int(min(len(self.trust_bands) - 1, max(0, np.floor(np.clip(trust, 0, 1) / width))))


def _finite(x: float):
    return None if np.isinf(x) else x


def load_env_config(path: str | Path | None = None, **overrides) -> EnvConfig:
    """Read the transition-table asset (the shipped default unless ``path`` is given)."""
    if path is None:
        doc = json.loads(resources.files("moedm.assets").joinpath("trust_env.json").read_text())
    else:
        doc = json.loads(Path(path).read_text())
    if doc.get("format") != "moedm-trust-env-v1":
        raise ContractViolation(f"unsupported env table format {doc.get('format')!r}")
    rules = []
    for name in tl.INTENTS:
        rows = doc["rules"][name]
        rules.append(tuple(
            Rule(float(r["dm"]), float(r["dt"]),
                 float(r.get("trust_below", np.inf)), float(r.get("mood_at_most", np.inf)))
            for r in rows))
    init = doc["initial"]
    kw = dict(
        horizon=int(doc["horizon"]), gamma=float(doc["gamma"]),
        mood_bands=tuple(doc["mood_bands"]), trust_bands=tuple(doc["trust_bands"]), rules=tuple(rules),
        relapse_trust_below=doc["relapse"]["trust_below"], relapse_mood_at_least=doc["relapse"]["mood_at_least"],
        relapse_delta=doc["relapse"]["delta_mood"],
        reply_intents=tuple(tl.INTENTS.index(n) for n in doc["reply_intent_by_trust_band"]),
        noise=float(doc["noise"]), init_mood_mean=init["mood_mean"], init_mood_std=init["mood_std"],
        init_trust=init["trust"], n_topics=init["n_topics"],
    )
    kw.update(overrides)
    return EnvConfig(**kw)


@dataclass(frozen=True)
class UserState:
    mood: float
    trust: float
    turn: int = 0
    topic: int = 0

    @property
    def done(self) -> bool:
        return self._horizon is not None and self.turn >= self._horizon

    _horizon: int | None = field(default=None, repr=False, compare=False)


def transition(cfg: EnvConfig, mood: float, trust: float, intent: int) -> tuple[float, float]:
    """Deterministic part of the dynamics: relapse, then the first matching rule."""
    if trust < cfg.relapse_trust_below and mood >= cfg.relapse_mood_at_least:
        mood = mood + cfg.relapse_delta
    mood = float(np.clip(mood, -1.0, 1.0))
    for rule in cfg.rules[intent]:
        if rule.applies(mood, trust):
            return mood + rule.dm, trust + rule.dt
    return mood, trust


def snap(cfg: EnvConfig, mood: float, trust: float) -> tuple[float, float]:
    return float(cfg.mood_bands[cfg.mood_band(mood)]), float(cfg.trust_bands[cfg.trust_band(trust)])


def reply(cfg: EnvConfig, state: UserState, rng: np.random.Generator) -> tl.Utterance:
    return tl.gen_template(cfg.reply_intents[cfg.trust_band(state.trust)], state.mood, rng)


def reset(cfg: EnvConfig, rng: np.random.Generator) -> tuple[tl.ConversationHistory, UserState]:
    """Initial user query and hidden state."""
    if cfg.noise_free:
        mood, trust = snap(cfg, cfg.init_mood_mean, cfg.init_trust)
    else:
        mood = float(np.clip(rng.normal(cfg.init_mood_mean, cfg.init_mood_std), -1.0, 1.0))
        trust = float(cfg.init_trust)
    state = UserState(mood, trust, 0, int(rng.integers(cfg.n_topics)), _horizon=cfg.horizon)
    query = reply(cfg, state, rng)
    return tl.ConversationHistory((query,), 0), state


def step(cfg: EnvConfig, state: UserState, agent_utt, rng: np.random.Generator):
    """Apply one agent utterance.  Returns ``(reply, reward, next_state, done)``."""
    if state.turn >= cfg.horizon:
        raise ContractViolation("step called on a finished episode")
    intent = tl.marker_intent(agent_utt)
    mood, trust = transition(cfg, state.mood, state.trust, intent)
    if cfg.noise_free:
        mood, trust = snap(cfg, mood, trust)
    else:
        mood = mood + rng.normal(0.0, cfg.noise)
    mood = float(np.clip(mood, -1.0, 1.0))
    trust = float(np.clip(trust, 0.0, 1.0))
    nxt = replace(state, mood=mood, trust=trust, turn=state.turn + 1)
    x_next = reply(cfg, nxt, rng)
    return x_next, tl.sent_score(x_next), nxt, nxt.turn >= cfg.horizon


def discounted_return(rewards, gamma: float) -> float:
    return float(sum(gamma**k * r for k, r in enumerate(rewards)))


@dataclass
class Rollout:
    ret: float
    rewards: list
    turns: list  # per turn: dict(history, action, reply, reward, expert, intent)
    counts: np.ndarray  # selections per expert


# A policy maps (history, rng) to an utterance, or to (utterance, expert index).
Policy = Callable[[tl.ConversationHistory, np.random.Generator], object]


def rollout(policy: Policy, cfg: EnvConfig, rng: np.random.Generator, n_experts: int = tl.N_INTENTS) -> Rollout:
    history, state = reset(cfg, rng)
    rewards, turns = [], []
    counts = np.zeros(n_experts, dtype=int)
    done = False
    while not done:
        out = policy(history, rng)
        y, expert = (out if isinstance(out, tuple) and len(out) == 2 and isinstance(out[1], (int, np.integer))
                     else (out, None))
        y = tuple(int(t) for t in y)
        x_next, r, state, done = step(cfg, state, y, rng)
        if expert is not None:
            counts[int(expert)] += 1
        turns.append({"history": history, "action": y, "reply": x_next, "reward": r,
                      "expert": expert, "intent": tl.marker_intent(y)})
        history = history.with_reply(y, x_next)
        rewards.append(r)
    return Rollout(discounted_return(rewards, cfg.gamma), rewards, turns, counts)


@dataclass(frozen=True)
class IntentPolicy:
    """Open-loop policy playing templated utterances of the given intents turn by turn.

    A plain class rather than a closure so it pickles into worker processes.
    """

    intents: tuple

    def __call__(self, history: tl.ConversationHistory, rng: np.random.Generator):
        i = self.intents[min(history.turn, len(self.intents) - 1)]
        return tl.gen_template(i, 0.0, rng), int(i)


def intent_policy(intents) -> Policy:
    return IntentPolicy(tuple(int(i) for i in intents))
