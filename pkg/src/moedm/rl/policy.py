"""Dialogue-manager policies: generate candidates, score them, sample by softmax."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import numkit as nk
from .. import toylang as tl
from ..eval_report import score_model_based
from ..moe_model import MoELM, assign_expert, gauss_head
from .critics import CriticSet, ExpertValueFn, LatentNorm, MultiHeadCritic

# where each method's candidate utterances come from
SOURCE = {"sac": "actor", "ensq": "actor", "klc": "actor", "bc": "actor", "iql": "primitive",
          "saiql": "moe", "ftle": "moe", "moevrl": "moe", "bandit": "moe"}
SCORING_MODES = ("mf", "mb")


def softmax_probs(scores, beta: float) -> np.ndarray:
    """``p_j ∝ exp(beta * s_j)``, computed stably."""
    s = beta * np.asarray(scores, dtype=float)
    p = np.exp(s - s.max())
    return p / p.sum()


@dataclass
class Scorer:
    """The learned pieces a policy needs, detached from any trainer."""

    algo: str
    gamma: float
    critics: CriticSet | None = None
    mh: MultiHeadCritic | None = None
    evf: ExpertValueFn | None = None
    actor: nk.DenseNet | None = None
    norm: LatentNorm | None = None  # applied to latents before any critic

    @classmethod
    def from_trainer(cls, tr) -> "Scorer":
        algo, n = tr.algo, tr.norm
        if algo == "ftle":
            return cls(algo, tr.gamma, mh=tr.mh, norm=n)
        if algo == "moevrl":
            return cls(algo, tr.gamma, mh=tr.mh, evf=tr.evf, norm=n)
        if algo == "bc":
            return cls(algo, tr.gamma, actor=tr.actor, norm=n)
        return cls(algo, tr.gamma, critics=tr.critics, actor=getattr(tr, "actor", None), norm=n)

    @classmethod
    def load(cls, path) -> "Scorer":
        """Rebuild from a trainer checkpoint written by ``Trainer.save``."""
        nets, meta = nk.load_nets(path)
        algo, c = meta["algo"], meta["config"]
        gamma = float(meta["gamma_used"])
        norm = LatentNorm.from_dict(meta["norm"])
        if algo == "bc":
            return cls(algo, gamma, actor=nets["actor"], norm=norm)
        if algo in ("ftle", "moevrl"):
            n_heads = nets["qh"].out_dim
            mh = MultiHeadCritic(nets["trunk"].in_dim, n_heads, c["trunk_hidden"], c["polyak"], seed=c["seed"],
                                 trunk=nets["trunk"])
            mh.qh, mh.vh = nets["qh"], nets["vh"]
            mh.trunk_tar, mh.qh_tar, mh.vh_tar = nets["trunk_tar"], nets["qh_tar"], nets["vh_tar"]
            evf = None
            if algo == "moevrl":
                evf = ExpertValueFn(nets["lam"].in_dim, n_heads, net=nets["lam"])
                evf.tar = nets["lam_tar"]
            return cls(algo, gamma, mh=mh, evf=evf, norm=norm)
        res = meta["wiring"]["resolved"]
        d = nets["v"].in_dim
        # same seed and construction order reproduce the fixed dropout masks
        cs = CriticSet(d, c["hidden"], res["q"], c["dropout"], c["n_masks"], c["alpha"], c["polyak"], seed=c["seed"])
        n_q = len(cs.q)
        cs.q = [nets[f"q{k}"] for k in range(n_q)]
        cs.q_tar = [nets[f"q{k}_tar"] for k in range(n_q)]
        cs.v, cs.v_tar = nets["v"], nets["v_tar"]
        return cls(algo, gamma, critics=cs, actor=nets.get("actor"), norm=norm)


@dataclass
class Decision:
    candidates: list
    experts: np.ndarray  # expert credited for each candidate
    scores: np.ndarray
    probs: np.ndarray
    choice: int


@dataclass
class DMPolicy:
    """Softmax over candidate scores; callable as ``policy(history, rng) -> (utterance, expert)``.

    ``mode="mf"`` scores with the learned critic, ``mode="mb"`` with a learned
    user model ``r_hat(z_a) + gamma * V(z_hat_next)``; the user model works on
    the scorer's normalized latents.  MoE-VRL is expert-gated: only the
    candidates of ``lambda*(z)`` are eligible, scored by that expert's head.
    Behavior cloning has no
    critic and simply decodes one utterance from its latent policy.
    """

    model: MoELM
    scorer: Scorer
    beta: float = 50.0
    mode: str = "mf"
    user_model: object | None = None
    n_candidates: int = 50
    temperature: float = 0.7
    head_index: str = "attribution"  # FtLE head per candidate: "attribution" or "generator"
    trace: list | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.mode not in SCORING_MODES:
            raise nk.ContractViolation(f"unknown scoring mode {self.mode!r}")
        if self.mode == "mb" and self.user_model is None and self.scorer.algo != "bc":
            raise nk.ContractViolation("model-based scoring needs a user model")
        m1 = self.model.cfg.n_experts
        if SOURCE[self.scorer.algo] == "moe" and self.n_candidates % m1:
            raise nk.ContractViolation("candidate count must be a multiple of the expert count")

    # -- candidates -------------------------------------------------------
    def candidates(self, z, rng, n: int):
        src = SOURCE[self.scorer.algo]
        model = self.model
        if src == "moe":
            ids, utts, _, _ = model.candidates_from_latents(z, rng, n // model.cfg.n_experts, self.temperature)
            return list(utts[0]), ids[0], True
        if src == "primitive":
            _, utts, _, _ = model.candidates_from_latents(z, rng, n, self.temperature, experts=[0])
            return list(utts[0]), None, False
        dist = gauss_head(self.scorer.actor, z, smin=model.cfg.sigma_min, smax=model.cfg.sigma_max).dist
        lat = dist.mu + dist.sigma * rng.standard_normal((n, model.cfg.d))
        utts, _ = model.decoder.sample(lat, rng, self.temperature)
        return list(utts), None, False

    def _heads(self, z, utts, ids):
        if self.head_index == "generator" and ids is not None:
            return np.asarray(ids)
        return assign_expert(self.model, np.repeat(z, len(utts), axis=0), utts)

    # -- scoring ----------------------------------------------------------
    def score(self, history: tl.ConversationHistory, z, utts, ids=None) -> np.ndarray:
        scores = self._raw_scores(history, z, utts, ids)
        if self.scorer.algo == "moevrl" and ids is not None:
            # expert gate: only the chosen expert's candidates stay eligible
            lam = int(self.scorer.evf.best_expert(self.scorer.norm(z))[0])
            scores = np.where(np.asarray(ids) == lam, scores, -np.inf)
        return scores

    def _raw_scores(self, history, z, utts, ids=None) -> np.ndarray:
        sc, algo, M = self.scorer, self.scorer.algo, len(utts)
        za = self.scorer.norm(self.model.encode_actions([history] * M, utts))
        if self.mode == "mf":
            if algo == "ftle":
                return sc.mh.q_all(za)[np.arange(M), self._heads(z, utts, ids)]
            if algo == "moevrl":
                lam = int(sc.evf.best_expert(sc.norm(z))[0])
                return sc.mh.q_all(za)[:, lam]
            return sc.critics.q_value(za)
        g = 0.0 if history.turn + 1 >= self.model.cfg.horizon else sc.gamma
        if algo == "ftle":
            heads = self._heads(z, utts, ids)
            value_fn = lambda zn: sc.mh.v_all(zn)[np.arange(M), heads]  # noqa: E731
        elif algo == "moevrl":
            value_fn = lambda zn: sc.evf.values(zn).max(axis=1)  # noqa: E731
        else:
            value_fn = sc.critics.v_value
        return score_model_based(self.user_model, value_fn, za, g)

    def decide(self, history: tl.ConversationHistory, rng) -> Decision:
        z = self.model.encode([history])
        if self.scorer.algo == "bc":
            utts, _, _ = self.candidates(z, rng, 1)
            experts = assign_expert(self.model, z, utts)
            return Decision(utts, experts, np.zeros(1), np.ones(1), 0)
        utts, ids, generated = self.candidates(z, rng, self.n_candidates)
        scores = self.score(history, z, utts, ids)
        probs = softmax_probs(scores, self.beta)
        choice = int(rng.choice(len(utts), p=probs))
        if generated:
            experts = np.asarray(ids)
        else:
            experts = np.full(len(utts), -1)
            experts[choice] = assign_expert(self.model, z, [utts[choice]])[0]
        d = Decision(utts, experts, scores, probs, choice)
        if self.trace is not None:
            self.trace.append(d)
        return d

    def __call__(self, history: tl.ConversationHistory, rng):
        d = self.decide(history, rng)
        return d.candidates[d.choice], int(d.experts[d.choice])


def select_action(policy: DMPolicy, history: tl.ConversationHistory, rng):
    """One sampled action: ``(utterance, expert)``."""
    return policy(history, rng)
