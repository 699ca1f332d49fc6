"""Brute-force ground truth: tabular MDPs, exact dynamic programming,
expectile bisection and finite-difference gradient checks.

Nothing here learns; tests compare the learning code against these values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import toylang as tl
from .user_sim import EnvConfig, snap, transition


@dataclass
class TabularMDP:
    """Finite MDP with ``P[s, a, s']`` and expected rewards ``r[s, a]``."""

    P: np.ndarray
    r: np.ndarray
    gamma: float
    s0: int = 0
    terminal: np.ndarray | None = None
    labels: list = field(default_factory=list)

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or self.r.shape != (S, A):
            raise ValueError("inconsistent MDP shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ValueError("transition rows must sum to 1")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def to_dict(self) -> dict:
        return {"P": self.P.tolist(), "r": self.r.tolist(), "gamma": self.gamma, "s0": self.s0,
                "terminal": self.terminal.tolist(), "labels": [list(x) for x in self.labels]}


class TabularMoEMDP(TabularMDP):
    """Mood band x trust band x turn abstraction of the trust environment."""

    def __init__(self, cfg: EnvConfig, P, r, s0, terminal, labels):
        super().__init__(P, r, cfg.gamma, s0, terminal, labels)
        self.cfg = cfg
        self.index = {lab: k for k, lab in enumerate(labels)}

    def state_of(self, mood: float, trust: float, turn: int) -> int:
        return self.index[(self.cfg.mood_band(mood), self.cfg.trust_band(trust), turn)]


def build_tabular(cfg: EnvConfig, expert_intents: Sequence[int] = tuple(range(tl.N_INTENTS))) -> TabularMoEMDP:
    """Exact abstraction where expert ``i`` deterministically plays ``expert_intents[i]``."""
    nm, nt, H = len(cfg.mood_bands), len(cfg.trust_bands), cfg.horizon
    labels = [(mb, tb, turn) for turn in range(H + 1) for mb in range(nm) for tb in range(nt)]
    index = {lab: k for k, lab in enumerate(labels)}
    S, A = len(labels), len(expert_intents)
    P = np.zeros((S, A, S))
    r = np.zeros((S, A))
    terminal = np.array([lab[2] == H for lab in labels])
    for s, (mb, tb, turn) in enumerate(labels):
        if turn == H:
            P[s, :, s] = 1.0
            continue
        mood, trust = cfg.mood_bands[mb], cfg.trust_bands[tb]
        for a, intent in enumerate(expert_intents):
            m2, t2 = snap(cfg, *transition(cfg, mood, trust, intent))
            nxt = index[(cfg.mood_band(m2), cfg.trust_band(t2), turn + 1)]
            P[s, a, nxt] = 1.0
            r[s, a] = m2  # reply sentiment equals the snapped mood exactly
    s0_m, s0_t = snap(cfg, cfg.init_mood_mean, cfg.init_trust)
    s0 = index[(cfg.mood_band(s0_m), cfg.trust_band(s0_t), 0)]
    return TabularMoEMDP(cfg, P, r, s0, terminal, labels)


def argmax_lowest(q: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Row-wise argmax with ties (within ``tol``) broken toward the lowest index."""
    q = np.atleast_2d(q)
    return np.argmax(q >= q.max(axis=1, keepdims=True) - tol, axis=1)


@dataclass
class VIResult:
    V: np.ndarray
    Q: np.ndarray
    policy: np.ndarray
    sweeps: list  # V after each sweep


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_sweeps: int = 100_000, keep_sweeps: bool = False) -> VIResult:
    """Exact optimal values from a pessimistic start (values rise monotonically)."""
    lo = min(mdp.r.min(), 0.0) / (1.0 - mdp.gamma)
    V = np.where(mdp.terminal, 0.0, lo)
    sweeps = [V.copy()] if keep_sweeps else []
    for _ in range(max_sweeps):
        Q = mdp.r + mdp.gamma * mdp.P @ V
        V_new = Q.max(axis=1)
        resid = np.max(np.abs(V_new - V))
        V = V_new
        if keep_sweeps:
            sweeps.append(V.copy())
        if resid < tol:
            break
    Q = mdp.r + mdp.gamma * mdp.P @ V
    return VIResult(V, Q, argmax_lowest(Q), sweeps)


def policy_eval(mdp: TabularMDP, policy) -> np.ndarray:
    """Exact value of a fixed expert index (int) or per-state action array."""
    S = mdp.n_states
    acts = np.full(S, int(policy)) if np.isscalar(policy) else np.asarray(policy, dtype=int)
    P_pi = mdp.P[np.arange(S), acts]
    r_pi = mdp.r[np.arange(S), acts]
    return np.linalg.solve(np.eye(S) - mdp.gamma * P_pi, r_pi)


def q_of_policy(mdp: TabularMDP, policy) -> np.ndarray:
    return mdp.r + mdp.gamma * mdp.P @ policy_eval(mdp, policy)


def greedy_policy(mdp: TabularMDP) -> np.ndarray:
    """Myopic policy maximizing the immediate reward."""
    return argmax_lowest(mdp.r)


def simulate(mdp: TabularMDP, policy, horizon: int | None = None, s: int | None = None) -> float:
    """Discounted return of a deterministic policy on a deterministic MDP."""
    s = mdp.s0 if s is None else s
    ret, disc, k = 0.0, 1.0, 0
    while not mdp.terminal[s] and (horizon is None or k < horizon):
        a = int(policy[s]) if not callable(policy) else int(policy(s))
        ret += disc * mdp.r[s, a]
        s = int(np.argmax(mdp.P[s, a]))
        disc *= mdp.gamma
        k += 1
    return ret


def reachable(mdp: TabularMDP) -> tuple[TabularMDP, np.ndarray]:
    """Restriction to the states reachable from ``s0``; returns ``(sub_mdp, original state ids)``."""
    seen, frontier = {mdp.s0}, [mdp.s0]
    while frontier:
        s = frontier.pop()
        for s2 in np.flatnonzero(mdp.P[s].sum(axis=0) > 0):
            if int(s2) not in seen:
                seen.add(int(s2))
                frontier.append(int(s2))
    keep = np.array(sorted(seen))
    P = mdp.P[np.ix_(keep, np.arange(mdp.n_actions), keep)]
    labels = [mdp.labels[k] for k in keep] if mdp.labels else []
    sub = TabularMDP(P, mdp.r[keep], mdp.gamma, int(np.searchsorted(keep, mdp.s0)), mdp.terminal[keep], labels)
    return sub, keep


def chain_mdp(gamma: float = 0.5) -> TabularMDP:
    """Three-state chain: ``stay`` pays 0.1 (0.5 at the far end), ``advance`` moves right for 0."""
    P = np.zeros((3, 2, 3))
    r = np.zeros((3, 2))
    for s in range(3):
        P[s, 0, s] = 1.0
        P[s, 1, min(s + 1, 2)] = 1.0
    r[:, 0] = [0.1, 0.1, 0.5]
    r[2, 1] = 0.5
    return TabularMDP(P, r, gamma, 0)


def expectile_bisect(x: Sequence[float], tau: float, tol: float = 1e-10) -> float:
    """Root of ``sum |tau - 1{x < v}| (x - v)`` by bisection on ``[min x, max x]``."""
    x = np.asarray(x, dtype=float)
    if x.size == 0 or not 0.0 < tau < 1.0:
        raise ValueError("need a non-empty sample and tau in (0, 1)")
    lo, hi = float(x.min()), float(x.max())

    def g(v):
        return float(np.sum(np.where(x < v, 1.0 - tau, tau) * (x - v)))

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if g(mid) > 0.0:
            lo = mid
        else:
            hi = mid
        if mid in (lo, hi) and hi - lo <= 4 * np.spacing(max(abs(lo), abs(hi), 1.0)):
            break
    return 0.5 * (lo + hi)


@dataclass
class GradCheck:
    max_rel_err: float
    worst: tuple | None  # (parameter index, flat coordinate)
    n_checked: int
    n_skipped: int


def grad_check(
    fn: Callable[[], float],
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    h: float = 1e-5,
    n_coords: int | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
    skip_kinks: bool = False,
    stencil: int = 2,
) -> GradCheck:
    """Compare analytic ``grads`` with central differences of ``fn`` (which reads ``params`` in place).

    Relative error is ``|a - n| / max(|a|, |n|, floor)``.  With ``n_coords`` only
    that many random coordinates per parameter are perturbed.  ``skip_kinks``
    skips coordinates where the one-sided differences disagree (a kink
    inside ``[x - h, x + h]``).  ``stencil=4`` uses the fourth-order central
    difference, for smooth losses whose curvature swamps tiny gradients.
    """
    if stencil not in (2, 4):
        raise ValueError("stencil must be 2 or 4")
    rng = rng if rng is not None else np.random.default_rng(0)
    worst, worst_err, checked, skipped = None, 0.0, 0, 0
    f0 = fn() if skip_kinks else None
    for pi, (p, g) in enumerate(zip(params, grads)):
        flat_p, flat_g = p.reshape(-1), np.asarray(g).reshape(-1)
        coords = np.arange(flat_p.size)
        if n_coords is not None and flat_p.size > n_coords:
            coords = rng.choice(flat_p.size, n_coords, replace=False)
        for c in coords:
            old = flat_p[c]
            flat_p[c] = old + h
            fp = fn()
            flat_p[c] = old - h
            fm = fn()
            num = (fp - fm) / (2 * h)
            if stencil == 4:
                flat_p[c] = old + 2 * h
                fp2 = fn()
                flat_p[c] = old - 2 * h
                fm2 = fn()
                num = (8 * (fp - fm) - (fp2 - fm2)) / (12 * h)
            flat_p[c] = old
            if skip_kinks:
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > 1e-3 * max(1.0, abs(num)):
                    skipped += 1
                    continue
            a = float(flat_g[c])
            err = abs(a - num) / max(abs(a), abs(num), floor)
            checked += 1
            if err > worst_err:
                worst_err, worst = err, (pi, int(c))
    return GradCheck(worst_err, worst, checked, skipped)


def dump_fixtures(cfg: EnvConfig, path) -> dict:
    """Write oracle values (V*, per-expert values, greedy gap) as JSON."""
    mdp = build_tabular(cfg)
    vi = value_iteration(mdp)
    greedy = greedy_policy(mdp)
    doc = {
        "format": "moedm-oracle-v1",
        "mdp": mdp.to_dict(),
        "V_star": vi.V.tolist(),
        "Q_star": vi.Q.tolist(),
        "policy": vi.policy.tolist(),
        "V_expert": [policy_eval(mdp, i).tolist() for i in range(mdp.n_actions)],
        "greedy_policy": greedy.tolist(),
        "greedy_return": simulate(mdp, greedy),
        "optimal_return": float(vi.V[mdp.s0]),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    return doc
