"""Corpus generation, behavior-policy data collection and the latent dataset
views consumed by the offline RL trainers."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numkit as nk
from . import toylang as tl
from . import user_sim as us
from .moe_model import MoELM

DATA_FORMAT = "moedm-data-v1"

# the corpus agent's usual response to each user reply intent
_APPROPRIATE = {tl.PRIMITIVE: tl.EMPATHY, tl.QUESTIONING: tl.EMPATHY,
                tl.EXPLORATION: tl.QUESTIONING, tl.EMPATHY: tl.CHEERFULNESS}


def corpus_agent(history: tl.ConversationHistory, rng: np.random.Generator, p_appropriate: float = 0.5):
    """Templated agent used for the pre-training corpus.

    With probability ``p_appropriate`` it answers the user's visible reply type
    with a fitting intent, otherwise it picks an intent uniformly.
    """
    last = history.turns[-1]
    if rng.random() < p_appropriate:
        intent = _APPROPRIATE.get(tl.marker_intent(last), tl.EMPATHY)
    else:
        intent = int(rng.integers(tl.N_INTENTS))
    if intent in tl.POLARITY:
        level = tl.POLARITY[intent] * rng.uniform(0.3, 1.0)
    else:
        level = float(np.clip(tl.sent_score(last) + rng.normal(0.0, 0.2), -1.0, 1.0))
    return tl.gen_template(intent, level, rng), intent


def generate_corpus(env_cfg: us.EnvConfig, n_conversations: int, rng: np.random.Generator) -> list[dict]:
    """Conversations between the corpus agent and the simulated user."""
    out = []
    for _ in range(n_conversations):
        history, state = us.reset(env_cfg, rng)
        turns, intents = [history.turns[0]], [env_cfg.reply_intents[env_cfg.trust_band(state.trust)]]
        done = False
        while not done:
            y, intent = corpus_agent(history, rng)
            x_next, _, state, done = us.step(env_cfg, state, y, rng)
            turns += [y, x_next]
            intents += [intent, env_cfg.reply_intents[env_cfg.trust_band(state.trust)]]
            history = history.with_reply(y, x_next)
        out.append({"turns": turns, "intents": intents})
    return out


def corpus_pairs(conversations: Sequence[dict]) -> tuple[list, list]:
    """``(history, agent utterance)`` training pairs from corpus conversations."""
    hs, ys = [], []
    for conv in conversations:
        turns = [tuple(t) for t in conv["turns"]]
        for k in range(1, len(turns), 2):
            hs.append(tl.ConversationHistory(tuple(turns[:k]), k // 2))
            ys.append(turns[k])
    return hs, ys


# ---------------------------------------------------------------------------
# behavior data


@dataclass
class RawEpisode:
    histories: list  # context before each agent turn
    actions: list
    replies: list
    rewards: list
    experts: list  # behavior expert per turn
    states: list  # (mood, trust) after each turn, for diagnostics only
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.actions)


def collect(model: MoELM, n_episodes: int, env_cfg: us.EnvConfig, rng: np.random.Generator,
            weights: Sequence[float] | None = None, temperature: float = 1.0) -> list[RawEpisode]:
    """Roll out the behavior policy (a mixture over experts) in lockstep batches."""
    m1 = model.cfg.n_experts
    w = np.full(m1, 1.0 / m1) if weights is None else np.asarray(weights, dtype=float) / np.sum(weights)
    eps = []
    starts = [us.reset(env_cfg, rng) for _ in range(n_episodes)]
    histories = [h for h, _ in starts]
    states = [s for _, s in starts]
    for _ in range(n_episodes):
        eps.append(RawEpisode([], [], [], [], [], [], {"weights": w.tolist(), "temperature": temperature}))
    for _t in range(env_cfg.horizon):
        if n_episodes == 0:
            break
        z = model.encode(histories)
        experts = rng.choice(m1, size=n_episodes, p=w)
        zp = np.zeros_like(z)
        for i in np.unique(experts):
            rows = experts == i
            dist = model.expert(int(i), z[rows]).dist
            zp[rows] = dist.mu + dist.sigma * rng.standard_normal(dist.mu.shape)
        utts, _ = model.decoder.sample(zp, rng, temperature)
        for n in range(n_episodes):
            x_next, r, states[n], _ = us.step(env_cfg, states[n], utts[n], rng)
            ep = eps[n]
            ep.histories.append(histories[n])
            ep.actions.append(tuple(utts[n]))
            ep.replies.append(x_next)
            ep.rewards.append(r)
            ep.experts.append(int(experts[n]))
            ep.states.append((states[n].mood, states[n].trust))
            histories[n] = histories[n].with_reply(utts[n], x_next)
    return eps


# ---------------------------------------------------------------------------
# latent datasets


@dataclass
class LatentDataset:
    """Columnar store of latent transitions ``(z, z_a, r, z_next, terminal)``."""

    z: np.ndarray
    za: np.ndarray
    r: np.ndarray
    zn: np.ndarray
    terminal: np.ndarray
    histories: list
    actions: list
    experts: np.ndarray  # behavior expert (diagnostic)
    episode: np.ndarray
    turn: np.ndarray
    cand_z: np.ndarray | None = None  # (n, m+1, d) candidate action latents
    cand_utts: list | None = None
    attribution: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.r)

    @property
    def d(self) -> int:
        return self.z.shape[1]

    def subset(self, idx) -> "LatentDataset":
        idx = np.asarray(idx)
        pick = lambda xs: [xs[k] for k in idx] if xs is not None else None  # noqa: E731
        return LatentDataset(
            self.z[idx], self.za[idx], self.r[idx], self.zn[idx], self.terminal[idx],
            pick(self.histories), pick(self.actions), self.experts[idx], self.episode[idx], self.turn[idx],
            None if self.cand_z is None else self.cand_z[idx], pick(self.cand_utts),
            None if self.attribution is None else self.attribution[idx], dict(self.meta))


def encode_dataset(episodes: Sequence[RawEpisode], model: MoELM, chunk: int = 2048) -> LatentDataset:
    hs, acts, rs, term, nxt, experts, ep_id, turns = [], [], [], [], [], [], [], []
    for e, ep in enumerate(episodes):
        for t in range(len(ep)):
            hs.append(ep.histories[t])
            acts.append(ep.actions[t])
            rs.append(ep.rewards[t])
            term.append(t == len(ep) - 1 and ep.histories[t].turn + 1 >= model.cfg.horizon)
            nxt.append(ep.histories[t].with_reply(ep.actions[t], ep.replies[t]))
            experts.append(ep.experts[t])
            ep_id.append(e)
            turns.append(ep.histories[t].turn)
    n = len(hs)
    d = model.cfg.d
    z, za, zn = np.zeros((n, d)), np.zeros((n, d)), np.zeros((n, d))
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        z[sl] = model.encode(hs[sl])
        za[sl] = model.encode_actions(hs[sl], acts[sl])
        zn[sl] = model.encode(nxt[sl])
    return LatentDataset(z, za, np.array(rs, dtype=float), zn, np.array(term, dtype=bool), hs, acts,
                         np.array(experts, dtype=int), np.array(ep_id, dtype=int), np.array(turns, dtype=int),
                         meta={"d": d, "m": model.cfg.n_experts - 1})


def augment(ds: LatentDataset, model: MoELM, rng: np.random.Generator, temperature: float = 0.7,
            chunk: int = 1024) -> LatentDataset:
    """Attach one decoded candidate per expert to every transition, encoded as ``Phi(X + [Y_i])``."""
    n, m1, d = len(ds), model.cfg.n_experts, model.cfg.d
    cand_z = np.zeros((n, m1, d))
    cand_utts = []
    for s in range(0, n, chunk):
        sl = slice(s, min(n, s + chunk))
        ids, utts, _, _ = model.candidates_from_latents(ds.z[sl], rng, 1, temperature)
        hs = ds.histories[sl]
        flat_h = [h for h in hs for _ in range(m1)]
        flat_y = [y for row in utts for y in row]
        cand_z[sl] = model.encode_actions(flat_h, flat_y).reshape(-1, m1, d)
        cand_utts.extend([list(row) for row in utts])
    out = ds.subset(np.arange(n))
    out.cand_z, out.cand_utts = cand_z, cand_utts
    return out


def tabular_dataset(mdp, reps: int = 1) -> LatentDataset:
    """Every non-terminal ``(s, a)`` of a deterministic tabular MDP, ``reps`` times, with one-hot features.

    ``z`` is ``onehot(s)`` and ``z_a`` is ``onehot(s, a)`` in a disjoint block of
    the same vector, so one net can read both.  The action doubles as the
    expert attribution.
    """
    S, A = mdp.n_states, mdp.n_actions
    dim = S + S * A
    rows = [(s, a) for s in range(S) if not mdp.terminal[s] for a in range(A)] * reps
    n = len(rows)
    z, za, zn = np.zeros((n, dim)), np.zeros((n, dim)), np.zeros((n, dim))
    r, term, acts = np.zeros(n), np.zeros(n, dtype=bool), np.zeros(n, dtype=int)
    for k, (s, a) in enumerate(rows):
        s2 = int(np.argmax(mdp.P[s, a]))
        z[k, s], za[k, S + s * A + a], zn[k, s2] = 1.0, 1.0, 1.0
        r[k], term[k], acts[k] = mdp.r[s, a], mdp.terminal[s2], a
    states = np.array([s for s, _ in rows], dtype=int)
    ds = LatentDataset(z, za, r, zn, term, [None] * n, [None] * n, acts.copy(), states, np.zeros(n, dtype=int),
                       attribution=acts, meta={"d": dim, "m": A - 1, "tabular": True})
    return ds


def with_logged_candidates(ds: LatentDataset, m1: int) -> LatentDataset:
    """Degenerate augmentation: every candidate equals the logged action."""
    out = ds.subset(np.arange(len(ds)))
    out.cand_z = np.repeat(ds.za[:, None, :], m1, axis=1)
    out.cand_utts = [[a] * m1 for a in ds.actions]
    return out


def attribute(ds: LatentDataset, model: MoELM, mode: str = "mean", rng=None, chunk: int = 2048) -> np.ndarray:
    from .moe_model import assign_expert

    out = np.zeros(len(ds), dtype=int)
    for s in range(0, len(ds), chunk):
        sl = slice(s, min(len(ds), s + chunk))
        out[sl] = assign_expert(model, ds.z[sl], ds.actions[sl], mode=mode, rng=rng)
    ds.attribution = out
    return out


# ---------------------------------------------------------------------------
# persistence


def _canon(x) -> str:
    return json.dumps(x, sort_keys=True, separators=(",", ":"))


def save_dataset(ds: LatentDataset, path, header: dict | None = None) -> str:
    """Write JSON Lines (header first) and return the sha256 of the file."""
    head = {"format": DATA_FORMAT, "d": ds.d, "m": ds.meta.get("m"), "n": len(ds)}
    head.update(header or {})
    lines = [_canon(head)]
    for k in range(len(ds)):
        rec = {
            "z": nk.pack_array(ds.z[k]), "za": nk.pack_array(ds.za[k]), "zn": nk.pack_array(ds.zn[k]),
            "r": float(ds.r[k]), "terminal": bool(ds.terminal[k]),
            "history": [list(u) for u in ds.histories[k].turns], "turn": int(ds.turn[k]),
            "action": list(ds.actions[k]), "expert": int(ds.experts[k]), "episode": int(ds.episode[k]),
        }
        if ds.cand_z is not None:
            rec["cand_z"] = nk.pack_array(ds.cand_z[k])
            rec["cand_utts"] = [list(u) for u in ds.cand_utts[k]]
        if ds.attribution is not None:
            rec["attribution"] = int(ds.attribution[k])
        lines.append(_canon(rec))
    body = "\n".join(lines) + "\n"
    Path(path).write_text(body)
    return hashlib.sha256(body.encode()).hexdigest()


def load_dataset(path) -> LatentDataset:
    with open(path) as fh:
        head = json.loads(fh.readline())
        if head.get("format") != DATA_FORMAT:
            raise nk.ContractViolation(f"{path}: not a {DATA_FORMAT} file")
        recs = [json.loads(line) for line in fh if line.strip()]
    d, n = head["d"], len(recs)
    col = lambda key: np.stack([nk.unpack_array(r[key]) for r in recs]) if n else np.zeros((0, d))  # noqa: E731
    ds = LatentDataset(
        col("z"), col("za"), np.array([r["r"] for r in recs], dtype=float), col("zn"),
        np.array([r["terminal"] for r in recs], dtype=bool),
        [tl.ConversationHistory(tuple(tuple(u) for u in r["history"]), r["turn"]) for r in recs],
        [tuple(r["action"]) for r in recs], np.array([r["expert"] for r in recs], dtype=int),
        np.array([r["episode"] for r in recs], dtype=int), np.array([r["turn"] for r in recs], dtype=int),
        meta={"d": d, "m": head.get("m"), "header": head})
    if n and "cand_z" in recs[0]:
        ds.cand_z = np.stack([nk.unpack_array(r["cand_z"]).reshape(-1, d) for r in recs])
        ds.cand_utts = [[tuple(u) for u in r["cand_utts"]] for r in recs]
    if n and "attribution" in recs[0]:
        ds.attribution = np.array([r["attribution"] for r in recs], dtype=int)
    return ds


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
