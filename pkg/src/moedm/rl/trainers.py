"""Offline RL trainers over latent transition datasets.

All trainers share a loop: draw a minibatch (epoch-wise permutations), run
one optimizer step per learned component, then Polyak-average the targets.
Terminal transitions never bootstrap.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import numkit as nk
from ..moe_model import MoELM, gauss_head
from ..offline_data import LatentDataset
from . import losses as L
from .critics import CriticSet, ExpertValueFn, LatentNorm, MultiHeadCritic, load_wiring

ALGOS = ("sac", "ensq", "klc", "iql", "saiql", "ftle", "moevrl", "bc", "bandit")


@dataclass
class RLConfig:
    gamma: float = 0.8
    tau: float = 0.9
    alpha: float = 0.1
    beta: float = 50.0
    polyak: float = 0.005
    batch: int = 256
    lr: float = 2e-3
    epochs: int = 100
    steps: int | None = None  # overrides epochs when set
    hidden: tuple = (128, 128, 128)
    trunk_hidden: tuple = (128, 128)
    dropout: float = 0.5
    n_masks: int = 5
    teacher_forcing: bool = False
    bc_target: str = "posterior"  # or "logged"
    decode_temperature: float = 0.7
    seed: int = 0

    def n_steps(self, n: int) -> int:
        if self.steps is not None:
            return int(self.steps)
        return int(self.epochs * max(1, int(np.ceil(n / self.batch))))


class BatchStream:
    """Minibatch indices from successive random permutations of the dataset."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator):
        if n == 0:
            raise nk.ContractViolation("cannot train on an empty dataset")
        self.n, self.batch, self.rng = n, min(batch, n), rng
        self._perm, self._pos = rng.permutation(n), 0
        self.full = np.arange(n)

    def next(self) -> np.ndarray:
        if self.batch == self.n:
            return self.full  # full-batch training: order is irrelevant
        if self._pos + self.batch > self.n:
            self._perm, self._pos = self.rng.permutation(self.n), 0
        out = self._perm[self._pos:self._pos + self.batch]
        self._pos += self.batch
        return out


class Trainer:
    algo = "base"

    def __init__(self, cfg: RLConfig, ds: LatentDataset, model: MoELM | None = None):
        self.cfg, self.ds, self.model = cfg, ds, model
        self.rng = np.random.default_rng(cfg.seed)
        self.stream = BatchStream(len(ds), cfg.batch, self.rng)
        self.step_count = 0
        self.curve: list[dict] = []
        self.gamma = cfg.gamma
        # critics see standardized latents; actors keep the raw encoder space
        self.norm = LatentNorm.fit(ds.z, ds.za)
        self.z, self.za, self.zn = self.norm(ds.z), self.norm(ds.za), self.norm(ds.zn)
        self.cand_z = None if ds.cand_z is None else self.norm(ds.cand_z)
        wiring = load_wiring()
        self.wiring = {"table": wiring["table"].get(self.algo), "resolved": wiring["resolved"][self.algo]}

    def step(self, idx) -> dict:
        raise NotImplementedError

    def train(self, steps: int | None = None, log_every: int = 100) -> list[dict]:
        steps = self.cfg.n_steps(len(self.ds)) if steps is None else steps
        for _ in range(steps):
            losses = self.step(self.stream.next())
            self.step_count += 1
            if self.step_count % log_every == 0 or self.step_count == 1:
                row = {"step": self.step_count, **{k: float(v) for k, v in losses.items()}}
                self.curve.append(row)
        return self.curve

    # -- persistence -------------------------------------------------------
    def nets(self) -> dict:
        raise NotImplementedError

    def opt_states(self) -> dict:
        return {k: v.state.to_record() for k, v in self.__dict__.items() if isinstance(v, nk.Trainable)}

    def meta(self) -> dict:
        cfg = asdict(self.cfg)
        return {"kind": "trainer", "algo": self.algo, "config": cfg, "gamma_used": self.gamma,
                "step": self.step_count, "wiring": self.wiring, "norm": self.norm.to_dict(),
                "opt": self.opt_states()}

    def save(self, path, extra: dict | None = None) -> None:
        m = self.meta()
        m.update(extra or {})
        nk.save_nets(path, self.nets(), m)

    def write_curve(self, path) -> None:
        if not self.curve:
            return
        keys = list(self.curve[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.curve)


def _batch(tr: Trainer, idx):
    """Normalized ``(z, z_a, r, z_next, terminal)`` rows."""
    if idx is tr.stream.full:
        return tr.z, tr.za, tr.ds.r, tr.zn, tr.ds.terminal
    return tr.z[idx], tr.za[idx], tr.ds.r[idx], tr.zn[idx], tr.ds.terminal[idx]


class ValueTrainer(Trainer):
    """IQL, SAIQL, Bandit and the latent actor-critic family (SAC, EnsQ, KLC)."""

    def __init__(self, algo: str, cfg: RLConfig, ds: LatentDataset, model: MoELM | None = None):
        self.algo = algo
        super().__init__(cfg, ds, model)
        res = self.wiring["resolved"]
        if algo == "bandit":
            self.gamma = 0.0
        if algo == "saiql" and ds.cand_z is None:
            raise nk.ContractViolation("SAIQL needs an augmented dataset (run augment first)")
        self.critics = CriticSet(ds.d, cfg.hidden, res["q"], cfg.dropout, cfg.n_masks, cfg.alpha, cfg.polyak,
                                 seed=cfg.seed)
        self.actor_mode = res["actor"]
        self.use_target_v, self.use_target_q = res["target_v"], res["target_q"]
        self.q_opt = nk.Trainable({f"q{k}": q for k, q in enumerate(self.critics.q)}, lr=cfg.lr)
        self.v_opt = nk.Trainable({"v": self.critics.v}, lr=cfg.lr)
        self.actor = None
        if self.actor_mode is not None:
            if model is None:
                raise nk.ContractViolation(f"{algo} needs the MoE-LM (its actor starts from the primitive)")
            self.actor = model.experts[0].copy()
            self.actor_opt = nk.Trainable({"actor": self.actor}, lr=cfg.lr)

    def nets(self) -> dict:
        out = dict(self.critics.nets())
        if self.actor is not None:
            out["actor"] = self.actor
        return out

    def q_step(self, idx) -> float:
        z, za, r, zn, term = _batch(self, idx)
        v_next = self.critics.v_value(zn, target=self.use_target_v)
        y = L.td_target(r, term, self.gamma, v_next)
        masks = self.critics.train_masks(len(idx), self.rng)
        loss, grads = L.q_loss(self.critics.q, za, y, masks=masks)
        self.q_opt.step({f"q{k}": g for k, g in enumerate(grads)})
        return loss

    def _q_for_v(self, za):
        return self.critics.q_value(za, target=self.use_target_q)

    def _sample_actions(self, idx, zp):
        """Decode ``z'`` and encode ``X + [a_hat]`` to get ``z_a_hat``."""
        utts, _ = self.model.decoder.sample(zp, self.rng, self.cfg.decode_temperature)
        hs = [self.ds.histories[k] for k in idx]
        return self.norm(self.model.encode_actions(hs, utts))

    def v_and_actor_step(self, idx) -> dict:
        z, za = self.z[idx], self.za[idx]
        out = {}
        if self.algo == "bandit":
            return out
        if self.algo == "iql":
            out["loss_v"], g = L.v_loss(self.critics.v, z, self._q_for_v(za), tau=self.cfg.tau)
            self.v_opt.step({"v": g})
            return out
        if self.algo == "saiql":
            cz = self.cand_z[idx]
            B, M, d = cz.shape
            targets = self._q_for_v(cz.reshape(B * M, d)).reshape(B, M)
            out["loss_v"], g = L.v_loss(self.critics.v, z, targets, tau=self.cfg.tau)
            self.v_opt.step({"v": g})
            return out
        # latent actor-critic; the actor conditions on the raw latent
        z_raw = self.ds.z[idx]
        eps = self.rng.standard_normal(z.shape)
        smin, smax = self.model.cfg.sigma_min, self.model.cfg.sigma_max
        dist = gauss_head(self.actor, z_raw, smin=smin, smax=smax).dist
        zp = dist.mu + dist.sigma * eps
        reg = nk.gauss_logpdf(dist, zp)
        if self.actor_mode == "kl":
            reg = reg - nk.gauss_logpdf(gauss_head(self.model.experts[0], z_raw, smin=smin, smax=smax).dist, zp)
        z_hat = za if self.cfg.teacher_forcing else self._sample_actions(idx, zp)
        target = L.soft_v_target(self._q_for_v(z_hat), reg, self.cfg.alpha)
        out["loss_v"], g = L.v_loss(self.critics.v, z, target)
        self.v_opt.step({"v": g})
        if self.cfg.teacher_forcing:
            q_vals, base = None, None
        else:
            q_vals, base = self.critics.q_value(z_hat), self.critics.v_value(z)
        out["loss_actor"], ga, _ = L.actor_loss(
            self.actor, z_raw, eps, self.cfg.alpha, self.actor_mode, self.model.experts[0],
            q_values=q_vals, baseline=base, sigma_bounds=(smin, smax))
        self.actor_opt.step({"actor": ga})
        return out

    def step(self, idx) -> dict:
        out = {"loss_q": self.q_step(idx)}
        out.update(self.v_and_actor_step(idx))
        self.critics.update_targets()
        return out


def _attribution(ds: LatentDataset):
    if ds.attribution is None:
        raise nk.ContractViolation("dataset has no expert attribution (run attribute first)")
    return ds.attribution


class FtLETrainer(Trainer):
    algo = "ftle"

    def __init__(self, cfg: RLConfig, ds: LatentDataset, n_heads: int, model: MoELM | None = None,
                 critic: MultiHeadCritic | None = None):
        super().__init__(cfg, ds, model)
        _attribution(ds)
        self.mh = critic or MultiHeadCritic(ds.d, n_heads, cfg.trunk_hidden, cfg.polyak, seed=cfg.seed)
        self.opt = nk.Trainable({"trunk": self.mh.trunk, "qh": self.mh.qh, "vh": self.mh.vh}, lr=cfg.lr)

    def nets(self) -> dict:
        return self.mh.nets()

    def step(self, idx) -> dict:
        z, za, r, zn, term = _batch(self, idx)
        vn = self.mh.v_all(zn, target=True)
        q_t = L.td_target(r[:, None], term[:, None], self.gamma, vn)
        v_t = self.mh.q_all(za, target=True)
        lq, lv, _, _, grads = L.ftle_losses(self.mh, z, za, q_t, v_t, self.ds.attribution[idx])
        self.opt.step(grads)
        self.mh.update_targets()
        return {"loss_q": lq, "loss_v": lv}


class MoEVRLTrainer(Trainer):
    """DQN over expert indices, plus the per-expert critic used to score candidates.

    Passing an already trained ``critic`` reuses it as-is (only Lambda is
    trained); otherwise an FtLE critic is trained alongside Lambda.
    """

    algo = "moevrl"

    def __init__(self, cfg: RLConfig, ds: LatentDataset, n_heads: int, model: MoELM | None = None,
                 evf: ExpertValueFn | None = None, critic: MultiHeadCritic | None = None):
        super().__init__(cfg, ds, model)
        _attribution(ds)
        self.evf = evf or ExpertValueFn(ds.d, n_heads, cfg.hidden, cfg.polyak, seed=cfg.seed)
        self.lam_opt = nk.Trainable({"lam": self.evf.net}, lr=cfg.lr)
        self.ftle = None if critic is not None else FtLETrainer(cfg, ds, n_heads, model)
        self.mh = critic if critic is not None else self.ftle.mh

    def nets(self) -> dict:
        out = dict(self.evf.nets())
        out.update(self.mh.nets())
        return out

    def lambda_step(self, idx) -> float:
        z, _, r, zn, term = _batch(self, idx)
        y = L.td_target(r, term, self.gamma, self.evf.values(zn, target=True).max(axis=1))
        loss, g = L.dqn_loss(self.evf.net, z, self.ds.attribution[idx], y)
        self.lam_opt.step({"lam": g})
        self.evf.update_targets()
        return loss

    def step(self, idx) -> dict:
        out = {"loss_lambda": self.lambda_step(idx)}
        if self.ftle is not None:
            out.update(self.ftle.step(idx))
        return out


class BCTrainer(Trainer):
    """Fit a latent policy to the behavior latents of the logged actions."""

    algo = "bc"

    def __init__(self, cfg: RLConfig, ds: LatentDataset, model: MoELM, target_latents=None):
        super().__init__(cfg, ds, model)
        self.actor = model.experts[0].copy()
        self.opt = nk.Trainable({"actor": self.actor}, lr=cfg.lr)
        if target_latents is None:
            if cfg.bc_target != "posterior":
                raise nk.ContractViolation("logged-latent BC needs explicit target latents")
            target_latents = np.zeros_like(ds.z)
            for s in range(0, len(ds), 2048):
                sl = slice(s, min(len(ds), s + 2048))
                target_latents[sl] = model.posterior_head(ds.z[sl], ds.actions[sl]).dist.mu
        self.targets = np.asarray(target_latents, dtype=float)

    def nets(self) -> dict:
        return {"actor": self.actor}

    def step(self, idx) -> dict:
        smin, smax = self.model.cfg.sigma_min, self.model.cfg.sigma_max
        loss, g = L.bc_loss(self.actor, self.ds.z[idx], self.targets[idx], (smin, smax))
        self.opt.step({"actor": g})
        return {"loss_bc": loss}


def make_trainer(algo: str, cfg: RLConfig, ds: LatentDataset, model: MoELM | None = None,
                 critic: MultiHeadCritic | None = None) -> Trainer:
    if algo not in ALGOS:
        raise nk.ContractViolation(f"unknown algorithm {algo!r}")
    n_heads = model.cfg.n_experts if model is not None else int(ds.meta.get("m", 9)) + 1
    if algo == "ftle":
        return FtLETrainer(cfg, ds, n_heads, model)
    if algo == "moevrl":
        return MoEVRLTrainer(cfg, ds, n_heads, model, critic=critic)
    if algo == "bc":
        return BCTrainer(cfg, ds, model)
    return ValueTrainer(algo, cfg, ds, model)
