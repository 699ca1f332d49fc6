"""Oracle-equivalence checks shared by ``verify`` and the acceptance suite.

Each check returns a ``Check`` with the measured value and the threshold it
was held to; sizes are parameters so ``verify`` can run a quick pass and the
acceptance suite the full one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from . import offline_data as od
from . import oracle as orc
from . import toylang as tl
from . import user_sim as us
from .eval_report import UserModel, expert_histogram_kl, user_model_loss
from .moe_model import MoELM, ModelConfig, assign_expert, gauss_head
from .rl import losses as L
from .rl.critics import ExpertValueFn, MultiHeadCritic
from .rl.trainers import FtLETrainer, MoEVRLTrainer, RLConfig, ValueTrainer


@dataclass
class Check:
    name: str
    ok: bool
    value: float | str
    threshold: float | str
    detail: str = ""

    def line(self) -> str:
        num = lambda v, f: format(v, f) if isinstance(v, (int, float)) else str(v)  # noqa: E731
        text = f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {num(self.value, '.6g')} (threshold {num(self.threshold, 'g')})"
        return f"{text} {self.detail}".rstrip()


# ---------------------------------------------------------------------------
# gradients


def _small_net(rng, d_in, d_out, hidden=(5, 4), last="identity"):
    return nk.DenseNet([d_in, *hidden, d_out], ["tanh"] * len(hidden) + [last], rng)


def _gc(fn, params, grads, rng, n_coords, kinks=False, h=1e-5, stencil=2):
    return orc.grad_check(fn, params, grads, h=h, n_coords=n_coords, rng=rng, skip_kinks=kinks,
                          stencil=stencil).max_rel_err


def loss_gradient_errors(seed: int, n_coords: int = 4) -> dict:
    """Worst relative error per loss for one random draw of nets and data."""
    rng = np.random.default_rng(seed)
    d, B, tau, alpha = 4, 6, 0.8, 0.1
    z, za, zn = rng.normal(size=(B, d)), rng.normal(size=(B, d)), rng.normal(size=(B, d))
    y = rng.normal(size=B)
    out = {}

    # squared and expectile regression (Q and V losses)
    v = _small_net(rng, d, 1)
    multi = rng.normal(size=(B, 3))
    for name, tgt, t in (("v_mse", y, None), ("v_expectile", y, tau), ("v_expectile_multi", multi, tau)):
        _, g = L.v_loss(v, z, tgt, tau=t)
        out[name] = _gc(lambda: L.v_loss(v, z, tgt, tau=t)[0], v.params(), g, rng, n_coords, kinks=t is not None)
    q = _small_net(rng, d, 1)
    masks = [(rng.random((B, h)) < 0.5) / 0.5 for h in q.hidden_sizes]
    _, gq = L.q_loss([q], za, y, masks=masks)
    out["q_td"] = _gc(lambda: L.q_loss([q], za, y, masks=masks)[0], q.params(), gq[0], rng, n_coords)

    # latent actor: pathwise Q, score-function Q and teacher forcing
    g_net, g0 = _small_net(rng, d, 2 * d), _small_net(rng, d, 2 * d)
    eps = rng.normal(size=(B, d))
    w_q = rng.normal(size=d)

    def action_value(zp):
        t = np.tanh(zp @ w_q)
        return t, (1 - t * t)[:, None] * w_q

    _, ga, _ = L.actor_loss(g_net, z, eps, alpha, "shannon", action_value=action_value)
    out["actor_pathwise"] = _gc(lambda: L.actor_loss(g_net, z, eps, alpha, "shannon", action_value=action_value)[0],
                                g_net.params(), ga, rng, n_coords)
    _, ga, _ = L.actor_loss(g_net, z, eps, alpha, "kl", g0)
    out["actor_teacher_forced"] = _gc(lambda: L.actor_loss(g_net, z, eps, alpha, "kl", g0)[0],
                                      g_net.params(), ga, rng, n_coords)
    # score function: z' is a fixed sample, so the Q term differentiates -mean(adv * log G(z'|z))
    qv, base = rng.normal(size=B), rng.normal(size=B)
    _, ga, info = L.actor_loss(g_net, z, eps, alpha, "kl", g0, q_values=qv, baseline=base)
    zp_fixed = info["zp"].copy()

    def score_fn():
        lp = nk.gauss_logpdf(gauss_head(g_net, z).dist, zp_fixed)
        return L.actor_loss(g_net, z, eps, alpha, "kl", g0)[0] - float(np.mean((qv - base) * lp))

    out["actor_score_function"] = _gc(score_fn, g_net.params(), ga, rng, n_coords)

    # multi-head critic
    mh = MultiHeadCritic(d, 3, (5,), seed=seed)
    qt, vt, att = rng.normal(size=(B, 3)), rng.normal(size=(B, 3)), rng.integers(3, size=B)
    gm = L.ftle_losses(mh, z, za, qt, vt, att)[4]
    ffn = lambda: sum(L.ftle_losses(mh, z, za, qt, vt, att)[:2])  # noqa: E731
    out["ftle"] = max(_gc(ffn, getattr(mh, k).params(), gm[k], rng, n_coords) for k in ("trunk", "qh", "vh"))

    # expert value function
    evf = ExpertValueFn(d, 3, (5,), seed=seed)
    _, gl = L.dqn_loss(evf.net, z, att, y)
    out["dqn"] = _gc(lambda: L.dqn_loss(evf.net, z, att, y)[0], evf.net.params(), gl, rng, n_coords)

    # behavior cloning
    tgt = rng.normal(size=(B, d))
    _, gb = L.bc_loss(g_net, z, tgt)
    out["bc"] = _gc(lambda: L.bc_loss(g_net, z, tgt)[0], g_net.params(), gb, rng, n_coords)

    # user model
    um = UserModel.create(d, hidden=(5,), seed=seed)
    rr = rng.uniform(-0.9, 0.9, B)
    gu = user_model_loss(um, za, rr, zn)[2]
    ufn = lambda: sum(user_model_loss(um, za, rr, zn)[:2])  # noqa: E731
    out["user_model"] = max(_gc(ufn, um.r_net.params(), gu["r"], rng, n_coords),
                            _gc(ufn, um.z_net.params(), gu["z"], rng, n_coords))

    # primitive objective and the expert score-function surrogate on a tiny MoE-LM
    model = MoELM(ModelConfig(d=3, emb=4, hidden=5, n_hidden=1, n_experts=3), seed=seed)
    hs, ys = _tiny_pairs(rng)
    e2 = rng.normal(size=(len(ys), model.cfg.d))
    kappa = 0.1
    gp = model.primitive_loss(hs, ys, e2, kappa)[2]

    def pfn():
        nll, kl, _ = model.primitive_loss(hs, ys, e2, kappa, grads=False)
        return nll + kappa * kl

    nets = model.primitive_nets()
    # the sequence nll is O(10): a wider step keeps round-off down and the
    # fourth-order stencil keeps truncation below tiny sigma-bias gradients
    out["primitive"] = max(_gc(pfn, nets[k].params(), gp[k], rng, n_coords, h=1e-3, stencil=4) for k in gp)
    zc = model.encode(hs)
    zp = rng.normal(size=(len(hs), 3, model.cfg.d))
    adv = rng.normal(size=(len(hs), 3))
    ge = model.expert_reinforce_grads(1, zc, zp, adv)

    def efn():
        h = model.expert(1, zc).dist
        g = nk.DiagGaussian(np.broadcast_to(h.mu[:, None], zp.shape), np.broadcast_to(h.sigma[:, None], zp.shape))
        return float(-np.mean(adv * nk.gauss_logpdf(g, zp)))

    out["expert_reinforce"] = _gc(efn, model.experts[1].params(), ge, rng, n_coords)
    return out


def _tiny_pairs(rng, n: int = 3):
    hs, ys = [], []
    for k in range(n):
        x = tl.gen_template(int(rng.integers(tl.N_INTENTS)), 0.5, rng)
        hs.append(tl.ConversationHistory((tuple(x),), 0))
        ys.append(tuple(tl.gen_template(int(rng.integers(tl.N_INTENTS)), 0.5, rng)))
    return hs, ys


def gradient_check(seeds=range(100), n_coords: int = 4, tol: float = 1e-4) -> Check:
    worst, where = 0.0, ""
    for s in seeds:
        for name, err in loss_gradient_errors(int(s), n_coords).items():
            if err > worst:
                worst, where = err, f"{name} (seed {s})"
    return Check("gradient correctness", worst < tol, worst, tol, f"worst: {where}")


# ---------------------------------------------------------------------------
# expectiles


def expectile_by_descent(x, tau: float, tol: float = 1e-13, max_iter: int = 100_000) -> float:
    """Minimize ``mean L2^tau(x - v)`` over ``v`` by gradient descent with a safe fixed step."""
    x = np.asarray(x, dtype=float)
    v = float(x.mean())
    step = 1.0 / (2.0 * max(tau, 1.0 - tau))
    for _ in range(max_iter):
        g = -float(np.mean(L.expectile_grad(x - v, tau)))
        v_new = v - step * g
        if abs(v_new - v) < tol:
            return v_new
        v = v_new
    return v


def expectile_check(n_samples: int = 200, taus=(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.99),
                    seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    worst, worst_mean = 0.0, 0.0
    for _ in range(n_samples):
        x = rng.normal(size=int(rng.integers(2, 40))) * rng.uniform(0.1, 3.0)
        for t in taus:
            gd, bis = expectile_by_descent(x, t), orc.expectile_bisect(x, t)
            worst = max(worst, abs(gd - bis))
            if t == 0.5:
                worst_mean = max(worst_mean, abs(bis - x.mean()), abs(gd - x.mean()))
    ok = worst < 1e-4 and worst_mean < 1e-6
    return Check("expectile fidelity", ok, worst, 1e-4, f"tau=0.5 vs mean: {worst_mean:.2e} (threshold 1e-6)")


# ---------------------------------------------------------------------------
# tabular learning checks


def tabular_config(steps: int, **kw) -> RLConfig:
    """Linear critics on one-hot features, full-batch updates."""
    base = dict(steps=steps, hidden=(), trunk_hidden=(), dropout=0.0, n_masks=1, polyak=0.05, lr=1e-3, batch=100_000)
    base.update(kw)
    return RLConfig(**base)


def iql_chain_check(steps: int = 20_000, tau: float = 0.99, tol: float = 1e-2) -> Check:
    mdp = orc.chain_mdp()
    vi = orc.value_iteration(mdp)
    ds = od.tabular_dataset(mdp)
    tr = ValueTrainer("iql", tabular_config(steps, tau=tau, gamma=mdp.gamma, lr=1e-2), ds)
    tr.train()
    q = tr.critics.q_value(tr.za)
    err = max(abs(q[k] - vi.Q[s, a]) for k, (s, a) in enumerate(zip(ds.episode, ds.attribution)))
    return Check("IQL tabular optimality", err < tol, float(err), tol)


def moe_mdp(env: us.EnvConfig | None = None) -> orc.TabularMDP:
    """The tabular fixture: the noise-free MoE-MDP restricted to states reachable from the start."""
    env = env or us.load_env_config(noise_free=True)
    return orc.reachable(orc.build_tabular(env))[0]


def ftle_heads_check(steps: int = 20_000, tol: float = 5e-2, env: us.EnvConfig | None = None) -> Check:
    mdp = moe_mdp(env)
    ds = od.tabular_dataset(mdp)
    tr = FtLETrainer(tabular_config(steps, gamma=mdp.gamma), ds, mdp.n_actions)
    tr.train()
    states = np.flatnonzero(~mdp.terminal)
    z = tr.norm(np.eye(ds.d)[states])
    v = tr.mh.v_all(z)
    truth = np.stack([orc.policy_eval(mdp, i)[states] for i in range(mdp.n_actions)], axis=1)
    err = float(np.max(np.abs(v - truth)))
    return Check("FtLE head semantics", err < tol, err, tol, f"{len(states)} states x {mdp.n_actions} heads")


def moevrl_check(steps: int = 20_000, match: float = 0.95, ret_tol: float = 0.05,
                 env: us.EnvConfig | None = None) -> tuple[Check, Check]:
    mdp = moe_mdp(env)
    vi = orc.value_iteration(mdp)
    ds = od.tabular_dataset(mdp)
    # Lambda alone is under test, so the candidate critic is left untrained
    tr = MoEVRLTrainer(tabular_config(steps, gamma=mdp.gamma), ds, mdp.n_actions,
                       critic=MultiHeadCritic(ds.d, mdp.n_actions, ()))
    tr.train()
    S = mdp.n_states
    lam = tr.evf.best_expert(tr.norm(np.eye(ds.d)[:S]))
    states = np.flatnonzero(~mdp.terminal)
    # a choice matches when it is one of the tied optimal experts
    hit = np.array([vi.Q[s, lam[s]] >= vi.V[s] - 1e-9 for s in states])
    gap = abs(orc.simulate(mdp, lam) - vi.V[mdp.s0])
    return (Check("MoE-VRL optimal expert choice", hit.mean() >= match, float(hit.mean()), match,
                  f"{hit.sum()}/{len(states)} non-terminal states"),
            Check("MoE-VRL induced return", gap < ret_tol, float(gap), ret_tol))


# ---------------------------------------------------------------------------
# attribution and the SAIQL degeneracy


def separated_expert_model(seed: int = 0, scale: float = 4.0) -> MoELM:
    """MoE-LM whose experts sit at far-apart fixed latent points with small spread."""
    model = MoELM(ModelConfig(), seed=seed)
    rng = np.random.default_rng(seed + 1)
    d, m1 = model.cfg.d, model.cfg.n_experts
    centers = rng.normal(size=(m1, d))
    centers *= scale / np.linalg.norm(centers, axis=1, keepdims=True)
    for i, net in enumerate(model.experts):
        net = net.copy()
        net.weights[-1][:] *= 0.01
        net.biases[-1][:d] = centers[i]
        net.biases[-1][d:] = nk.raw_from_sigma(np.full(d, 0.05))
        model.experts[i] = net
    return model


def attribution_check(n: int = 500, seed: int = 0, threshold: float = 0.9) -> Check:
    model = separated_expert_model(seed)
    rng = np.random.default_rng(seed)
    env = us.load_env_config()
    hs = [us.reset(env, rng)[0] for _ in range(n)]
    z = model.encode(hs)
    gen = rng.integers(model.cfg.n_experts, size=n)
    zp = np.stack([model.expert(int(i), z[k:k + 1]).dist.mu[0] for k, i in enumerate(gen)])
    ys, _ = model.decoder.sample(zp, rng, 0.0)
    got = assign_expert(model, z, ys)
    acc = float(np.mean(got == gen))
    return Check("attribution accuracy", acc >= threshold, acc, threshold, f"{n} greedy utterances")


def saiql_identity_check(n_batches: int = 100, seed: int = 0, tol: float = 1e-9) -> Check:
    rng = np.random.default_rng(seed)
    n, d, m1 = 600, 6, 10
    ds = od.LatentDataset(rng.normal(size=(n, d)), rng.normal(size=(n, d)), rng.uniform(-1, 1, n),
                          rng.normal(size=(n, d)), rng.random(n) < 0.2, [None] * n, [None] * n,
                          np.zeros(n, dtype=int), np.arange(n), np.zeros(n, dtype=int), meta={"d": d, "m": m1 - 1})
    ds = od.with_logged_candidates(ds, m1)
    cfg = RLConfig(steps=n_batches, hidden=(16, 16), batch=64, seed=seed)
    a, b = ValueTrainer("iql", cfg, ds), ValueTrainer("saiql", cfg, ds)
    worst = 0.0
    for _ in range(n_batches):
        idx_a, idx_b = a.stream.next(), b.stream.next()
        la, lb = a.step(idx_a), b.step(idx_b)
        worst = max(worst, float(np.max(np.abs(idx_a - idx_b))), *(abs(la[k] - lb[k]) for k in la))
    return Check("SAIQL/IQL degeneracy", worst < tol, worst, tol, f"{n_batches} batches")


# ---------------------------------------------------------------------------
# oracle self-consistency


def oracle_checks(env: us.EnvConfig | None = None) -> list[Check]:
    env = env or us.load_env_config(noise_free=True)
    mdp = orc.build_tabular(env)
    vi = orc.value_iteration(mdp, keep_sweeps=True)
    out = []
    resid = float(np.max(np.abs((mdp.r + mdp.gamma * mdp.P @ vi.V).max(axis=1) - vi.V)))
    out.append(Check("value iteration residual", resid < 1e-10, resid, 1e-10))
    drops = min(float(np.min(b - a)) for a, b in zip(vi.sweeps, vi.sweeps[1:]))
    out.append(Check("value iteration monotone", drops >= -1e-12, drops, 0.0, "smallest per-sweep change"))
    sim = abs(orc.simulate(mdp, vi.policy) - vi.V[mdp.s0])
    out.append(Check("greedy lambda* reproduces V*", sim < 1e-9, sim, 1e-9))
    gap = vi.V[mdp.s0] - orc.simulate(mdp, orc.greedy_policy(mdp))
    out.append(Check("greedy gap", gap >= 0.5, float(gap), 0.5))
    excess = max(float(np.max(orc.policy_eval(mdp, i) - vi.V)) for i in range(mdp.n_actions))
    out.append(Check("expert values below V*", excess <= 1e-9, excess, 1e-9))
    worst = 0.0
    for i in range(mdp.n_actions):
        sub = orc.TabularMDP(mdp.P[:, [i]], mdp.r[:, [i]], mdp.gamma, mdp.s0, mdp.terminal)
        worst = max(worst, float(np.max(np.abs(orc.value_iteration(sub).V - orc.policy_eval(mdp, i)))))
    out.append(Check("policy_eval matches restricted value iteration", worst < 1e-8, worst, 1e-8))
    out.append(Check("tabular state count", mdp.n_states <= 120, float(mdp.n_states), 120))
    x = np.random.default_rng(0).normal(size=30)
    taus = np.linspace(0.05, 0.95, 19)
    ex = [orc.expectile_bisect(x, t) for t in taus]
    out.append(Check("expectile monotone in tau", bool(np.all(np.diff(ex) >= -1e-12)), float(np.min(np.diff(ex))), 0.0))
    return out


def kl_spot_checks() -> Check:
    _, k_uniform = expert_histogram_kl(np.full(10, 20))
    one_hot = np.zeros(10)
    one_hot[3] = 200
    _, k_one = expert_histogram_kl(one_hot)
    err = max(abs(k_uniform), abs(k_one - np.log(10)))
    return Check("KL-to-uniform spot checks", err < 1e-9, err, 1e-9)


# ---------------------------------------------------------------------------
# checks on pipeline artifacts


def expert_gap_check(path, threshold: float = 0.3) -> Check:
    """Every intent's trained expert beats the primitive's mean label by ``threshold`` on held-out contexts."""
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    gaps = {r["intent"]: float(r["gap"]) for r in rows}
    worst = min(gaps, key=gaps.get)
    return Check("expert construction", len(gaps) == tl.N_INTENTS - 1 and gaps[worst] >= threshold, gaps[worst],
                 threshold, f"smallest gap: {worst}")


def gap_fractions(returns: dict, env: us.EnvConfig | None = None) -> dict:
    """Each mean return as a fraction of the (optimal - greedy) gap above the greedy return."""
    mdp = orc.build_tabular(env or us.load_env_config(noise_free=True))
    v_star = orc.value_iteration(mdp).V[mdp.s0]
    greedy = orc.simulate(mdp, orc.greedy_policy(mdp))
    return {a: (float(j) - greedy) / (v_star - greedy) for a, j in returns.items()}


def planning_checks(cfg, model: MoELM, log=print, seeds=range(5), high: float = 0.8, low: float = 0.2) -> list[Check]:
    from . import pipeline as pl

    res = pl.planning_check(cfg, model, seeds=seeds, log=log)
    frac = gap_fractions({a: res[a] for a in ("ftle", "moevrl", "bandit")})
    return [Check(f"planning: {a} share of greedy gap", frac[a] >= high, frac[a], high, f"J={res[a]:.4f}")
            for a in ("ftle", "moevrl")] + [
        Check("planning: bandit share of greedy gap (upper bound)", frac["bandit"] <= low, frac["bandit"], low,
              f"J={res['bandit']:.4f}")]
