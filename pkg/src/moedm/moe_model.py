"""The mixture-of-experts language model surrogate.

Components:

* encoder ``Phi``: per-turn mean token embeddings of the last ``L`` turns plus
  a turn one-hot, mapped by a DenseNet to ``z`` in R^d;
* decoder ``Psi``: autoregressive, each step sees ``[z', onehot(prev), onehot(pos)]``;
* posterior ``rho(z' | z, Y)`` reading ``z`` and a frozen bag-of-words of ``Y``;
* latent experts ``G_i(z' | z)``, expert 0 being the primitive.

Phase one fits ``(Phi, Psi, rho, G_0)`` with a reparameterized ELBO-style loss
(nll plus a KL penalty); phase two trains each expert ``G_i`` by REINFORCE
on its intent label with ``Phi`` and ``Psi`` frozen.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numkit as nk
from . import toylang as tl


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d: int = 16
    emb: int = 16
    hidden: int = 64
    n_hidden: int = 2
    history_turns: int = tl.HISTORY_TURNS
    max_len: int = tl.MAX_LEN
    horizon: int = 5
    n_experts: int = tl.N_INTENTS
    eos: int | None = tl.EOS
    banned: tuple = (tl.PAD, tl.SOS)
    sigma_min: float = nk.SIGMA_MIN
    sigma_max: float = nk.SIGMA_MAX

    def hidden_sizes(self) -> list[int]:
        return [self.hidden] * self.n_hidden


def _mlp(sizes_in: int, hidden: Sequence[int], out: int, rng, out_scale: float = 1.0) -> nk.DenseNet:
    sizes = [sizes_in, *hidden, out]
    acts = ["tanh"] * len(hidden) + ["identity"]
    return nk.DenseNet(sizes, acts, rng, out_scale=out_scale)


# ---------------------------------------------------------------------------
# Gaussian heads: a net emitting [mu, raw sigma]


@dataclass
class HeadOut:
    dist: nk.DiagGaussian
    tape: nk.Tape | None
    dsig_draw: np.ndarray


def gauss_head(net: nk.DenseNet, x, keep: bool = False, smin=nk.SIGMA_MIN, smax=nk.SIGMA_MAX) -> HeadOut:
    out = net.forward(x, keep=keep)
    tape = None
    if keep:
        out, tape = out
    d = out.shape[-1] // 2
    sigma, ds = nk.sigma_from_raw(out[..., d:], smin, smax)
    return HeadOut(nk.DiagGaussian(out[..., :d], sigma), tape, ds)


def gauss_head_backward(net: nk.DenseNet, h: HeadOut, dmu, dsigma):
    return net.backward(h.tape, np.concatenate([dmu, dsigma * h.dsig_draw], axis=-1))


# ---------------------------------------------------------------------------
# encoder


def bow(u: Sequence[int], vocab: int) -> np.ndarray:
    v = np.zeros(vocab)
    toks = [t for t in u if t != tl.PAD and t != tl.SOS]
    if toks:
        np.add.at(v, toks, 1.0 / len(toks))
    return v


@dataclass
class EncFeatures:
    bows: np.ndarray  # (B, L, V)
    present: np.ndarray  # (B, L)
    turn: np.ndarray  # (B, H+1)


def featurize(histories: Sequence[tl.ConversationHistory], cfg: ModelConfig) -> EncFeatures:
    B, L, V = len(histories), cfg.history_turns, cfg.vocab
    bows = np.zeros((B, L, V))
    present = np.zeros((B, L))
    turn = np.zeros((B, cfg.horizon + 1))
    for b, h in enumerate(histories):
        win = h.window(L)
        for k, u in enumerate(win):
            slot = L - len(win) + k
            toks = [t for t in u if t != tl.PAD and t != tl.SOS]
            if toks:
                np.add.at(bows[b, slot], toks, 1.0 / len(toks))
                present[b, slot] = 1.0
        turn[b, min(h.turn, cfg.horizon)] = 1.0
    return EncFeatures(bows, present, turn)


class Encoder:
    def __init__(self, cfg: ModelConfig, rng):
        self.cfg = cfg
        self.emb = nk.DenseNet([cfg.vocab, cfg.emb], ["identity"], rng)
        self.net = _mlp(cfg.history_turns * cfg.emb + cfg.horizon + 1, cfg.hidden_sizes(), cfg.d, rng)

    def nets(self) -> dict:
        return {"emb": self.emb, "enc": self.net}

    def forward(self, f: EncFeatures, keep: bool = False):
        B, L, V = f.bows.shape
        e, etape = self.emb.forward(f.bows.reshape(B * L, V), keep=True)
        e = e.reshape(B, L, -1) * f.present[:, :, None]
        x = np.concatenate([e.reshape(B, -1), f.turn], axis=1)
        if not keep:
            return self.net.forward(x)
        z, ntape = self.net.forward(x, keep=True)
        return z, (etape, ntape, f)

    def backward(self, tape, dz) -> dict:
        etape, ntape, f = tape
        B, L, _ = f.bows.shape
        g_net, dx = self.net.backward(ntape, dz)
        de = dx[:, : L * self.cfg.emb].reshape(B, L, -1) * f.present[:, :, None]
        g_emb, _ = self.emb.backward(etape, de.reshape(B * L, -1))
        return {"emb": g_emb, "enc": g_net}


# ---------------------------------------------------------------------------
# decoder


@dataclass(frozen=True)
class DecoderConfig:
    vocab: int = 64
    d: int = 16
    max_len: int = tl.MAX_LEN
    eos: int | None = tl.EOS
    banned: tuple = (tl.PAD, tl.SOS)
    sos: int = tl.SOS
    hidden: tuple = (64, 64)


@dataclass
class DecodeTape:
    net_tape: nk.Tape
    probs: np.ndarray  # (R, V)
    targets: np.ndarray  # (R,)
    rows: np.ndarray  # (R,) sequence index of each row
    B: int


class Decoder:
    def __init__(self, dcfg: DecoderConfig, rng):
        self.dcfg = dcfg
        self.net = _mlp(dcfg.d + dcfg.vocab + dcfg.max_len, list(dcfg.hidden), dcfg.vocab, rng)
        self._ban = np.zeros(dcfg.vocab, dtype=bool)
        self._ban[list(dcfg.banned)] = True

    def _inputs(self, zp, prev, pos) -> np.ndarray:
        c = self.dcfg
        x = np.zeros((len(prev), c.d + c.vocab + c.max_len))
        x[:, : c.d] = zp
        x[np.arange(len(prev)), c.d + prev] = 1.0
        x[np.arange(len(prev)), c.d + c.vocab + pos] = 1.0
        return x

    def _log_softmax(self, logits):
        logits = np.where(self._ban, -np.inf, logits)
        m = logits.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
        return logits - lse

    def _layout(self, ys: Sequence[Sequence[int]]):
        rows, pos, prev, tgt = [], [], [], []
        for b, y in enumerate(ys):
            y = [t for t in y if t != tl.PAD][: self.dcfg.max_len]
            p = self.dcfg.sos
            for n, t in enumerate(y):
                rows.append(b), pos.append(n), prev.append(p), tgt.append(t)
                p = t
        return (np.array(rows, dtype=int), np.array(pos, dtype=int),
                np.array(prev, dtype=int), np.array(tgt, dtype=int))

    def logprob(self, zp, ys: Sequence[Sequence[int]], keep: bool = False, per_token: bool = False):
        """Teacher-forced ``log Psi(Y | z')`` per sequence (``zp`` is ``(B, d)``)."""
        zp = np.atleast_2d(np.asarray(zp, dtype=float))
        rows, pos, prev, tgt = self._layout(ys)
        B = len(ys)
        if len(rows) == 0:
            return (np.zeros(B), None) if keep else np.zeros(B)
        x = self._inputs(zp[rows], prev, pos)
        if keep:
            logits, tape = self.net.forward(x, keep=True)
        else:
            logits = self.net.forward(x)
        lp = self._log_softmax(logits)
        tok = lp[np.arange(len(rows)), tgt]
        seq = np.bincount(rows, weights=tok, minlength=B)
        if per_token:
            return seq, np.bincount(rows, minlength=B)
        if keep:
            return seq, DecodeTape(tape, np.exp(lp), tgt, rows, B)
        return seq

    def logprob_backward(self, tape: DecodeTape, dseq):
        """Adjoint of ``logprob`` given ``d loss / d logprob`` per sequence."""
        if tape is None:
            raise nk.ContractViolation("logprob_backward needs a tape from logprob(keep=True)")
        w = np.asarray(dseq, dtype=float)[tape.rows]
        dlogits = -tape.probs * w[:, None]
        dlogits[np.arange(len(tape.rows)), tape.targets] += w
        grads, dx = self.net.backward(tape.net_tape, dlogits)
        dzp = np.zeros((tape.B, self.dcfg.d))
        np.add.at(dzp, tape.rows, dx[:, : self.dcfg.d])
        return grads, dzp

    def sample(self, zp, rng: np.random.Generator | None, temperature: float = 1.0):
        """Autoregressive decoding; returns (utterances, untempered log-probs)."""
        c = self.dcfg
        zp = np.atleast_2d(np.asarray(zp, dtype=float))
        B = zp.shape[0]
        prev = np.full(B, c.sos, dtype=int)
        alive = np.ones(B, dtype=bool)
        out = [[] for _ in range(B)]
        logp = np.zeros(B)
        for n in range(c.max_len):
            idx = np.flatnonzero(alive)
            if idx.size == 0:
                break
            lp = self._log_softmax(self.net.forward(self._inputs(zp[idx], prev[idx], np.full(idx.size, n))))
            if temperature <= 1e-8:
                tok = np.argmax(lp, axis=1)
            else:
                scaled = lp / temperature
                p = np.exp(scaled - scaled.max(axis=1, keepdims=True))
                cdf = np.cumsum(p, axis=1)
                u = rng.random(idx.size) * cdf[:, -1]
                tok = np.minimum((cdf < u[:, None]).sum(axis=1), c.vocab - 1)
            logp[idx] += lp[np.arange(idx.size), tok]
            for j, b in enumerate(idx):
                out[b].append(int(tok[j]))
            prev[idx] = tok
            if c.eos is not None:
                alive[idx[tok == c.eos]] = False
        return [tuple(u) for u in out], logp


def decode_sample(dec: Decoder, zp, rng, temperature: float = 1.0):
    """Single-latent convenience wrapper: ``(utterance, log-prob)``."""
    utts, lp = dec.sample(np.atleast_2d(zp), rng, temperature)
    return utts[0], float(lp[0])


def decode_logprob(dec: Decoder, zp, y) -> float:
    return float(dec.logprob(np.atleast_2d(zp), [y])[0])


# ---------------------------------------------------------------------------
# the full model


@dataclass
class Candidate:
    expert: int
    utterance: tuple
    latent: np.ndarray
    logprob: float


class MoELM:
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(DecoderConfig(cfg.vocab, cfg.d, cfg.max_len, cfg.eos, cfg.banned,
                                             hidden=tuple(cfg.hidden_sizes())), rng)
        self.posterior = _mlp(cfg.d + cfg.vocab, cfg.hidden_sizes(), 2 * cfg.d, rng, out_scale=0.1)
        prior = _mlp(cfg.d, cfg.hidden_sizes(), 2 * cfg.d, rng, out_scale=0.1)
        self.experts = [prior] + [prior.copy() for _ in range(cfg.n_experts - 1)]
        self.baselines = np.zeros(cfg.n_experts)

    # -- containers ------------------------------------------------------
    def nets(self) -> dict:
        d = {"emb": self.encoder.emb, "enc": self.encoder.net, "dec": self.decoder.net, "post": self.posterior}
        for i, e in enumerate(self.experts):
            d[f"expert{i}"] = e
        return d

    def primitive_nets(self) -> dict:
        n = self.nets()
        return {k: n[k] for k in ("emb", "enc", "dec", "post", "expert0")}

    def reset_experts_from_primitive(self) -> None:
        self.experts = [self.experts[0]] + [self.experts[0].copy() for _ in range(self.cfg.n_experts - 1)]
        self.baselines = np.zeros(self.cfg.n_experts)

    def tie_posterior_to_prior(self) -> None:
        """Make ``rho(.|z, Y)`` equal ``G_0(.|z)`` by zeroing its bag-of-words weights."""
        w0 = self.experts[0].weights[0]
        self.posterior.weights[0][:] = 0.0
        self.posterior.weights[0][:, : self.cfg.d] = w0
        for k in range(self.posterior.n_layers):
            self.posterior.biases[k][:] = self.experts[0].biases[k]
            if k > 0:
                self.posterior.weights[k][:] = self.experts[0].weights[k]

    def save(self, path, meta: dict | None = None) -> None:
        m = {"model_config": asdict(self.cfg), "intents": list(tl.INTENTS[: self.cfg.n_experts]),
             "baselines": self.baselines.tolist(), "kind": "moelm"}
        m.update(meta or {})
        nk.save_nets(path, self.nets(), m)

    @classmethod
    def load(cls, path) -> "MoELM":
        nets, meta = nk.load_nets(path)
        mc = dict(meta["model_config"])
        mc["banned"] = tuple(mc["banned"])
        model = cls(ModelConfig(**mc))
        model.encoder.emb, model.encoder.net = nets["emb"], nets["enc"]
        model.decoder.net = nets["dec"]
        model.posterior = nets["post"]
        model.experts = [nets[f"expert{i}"] for i in range(model.cfg.n_experts)]
        model.baselines = np.asarray(meta["baselines"], dtype=float)
        model.meta = meta
        return model

    # -- evaluation -------------------------------------------------------
    def encode(self, histories: Sequence[tl.ConversationHistory]) -> np.ndarray:
        return self.encoder.forward(featurize(histories, self.cfg))

    def encode_actions(self, histories, actions) -> np.ndarray:
        """``z_a = Phi(X + [a])``: the history with the agent utterance appended."""
        return self.encode([h.with_action(a) for h, a in zip(histories, actions)])

    def expert(self, i: int, z, keep: bool = False) -> HeadOut:
        return gauss_head(self.experts[i], z, keep, self.cfg.sigma_min, self.cfg.sigma_max)

    def expert_means(self, z) -> np.ndarray:
        """``(m+1, B, d)`` stack of expert means."""
        return np.stack([self.expert(i, z).dist.mu for i in range(self.cfg.n_experts)])

    def posterior_head(self, z, ys, keep: bool = False) -> HeadOut:
        x = np.concatenate([z, np.stack([bow(y, self.cfg.vocab) for y in ys])], axis=1)
        return gauss_head(self.posterior, x, keep, self.cfg.sigma_min, self.cfg.sigma_max)

    def perplexity(self, histories, ys, rng=None, n_samples: int = 32) -> float:
        """``exp`` of the per-token nll of the primitive LM on held-out pairs.

        The latent is marginalized by a log-mean-exp over ``n_samples`` draws
        from ``G_0(.|z)``; with ``n_samples=0`` the prior mean is plugged in.
        """
        z = self.encode(histories)
        dist = self.expert(0, z).dist
        ntok = sum(len([t for t in y if t != tl.PAD]) for y in ys)
        if n_samples == 0:
            lp = self.decoder.logprob(dist.mu, ys)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            draws = np.stack([self.decoder.logprob(dist.mu + dist.sigma * rng.standard_normal(dist.mu.shape), ys)
                              for _ in range(n_samples)])
            lp = np.logaddexp.reduce(draws, axis=0) - np.log(n_samples)
        return float(np.exp(-lp.sum() / ntok))

    # -- phase one: primitive ---------------------------------------------
    def primitive_loss(self, histories, ys, eps, kappa: float = 0.1, grads: bool = True):
        """``mean nll + kappa * mean KL(rho || G_0)`` with ``z' = mu_rho + sigma_rho * eps``.

        Returns ``(nll, kl, grads)`` where grads is keyed like ``primitive_nets()``.
        """
        B = len(ys)
        z, etape = self.encoder.forward(featurize(histories, self.cfg), keep=True)
        post = self.posterior_head(z, ys, keep=True)
        prior = self.expert(0, z, keep=True)
        rep = nk.reparam_sample(post.dist, eps=eps)
        lp, dtape = self.decoder.logprob(rep.sample, ys, keep=True)
        kl = nk.gauss_kl(post.dist, prior.dist)
        nll, kl_mean = float(-lp.mean()), float(kl.mean())
        if not grads:
            return nll, kl_mean, None
        g_dec, dzp = self.decoder.logprob_backward(dtape, np.full(B, -1.0 / B))
        dmu_r, dsig_r = rep.pullback(dzp)
        kmu_p, ksig_p, kmu_q, ksig_q = nk.gauss_kl_grads(post.dist, prior.dist)
        w = kappa / B
        g_post, dx_post = gauss_head_backward(self.posterior, post, dmu_r + w * kmu_p, dsig_r + w * ksig_p)
        g_prior, dz_prior = gauss_head_backward(self.experts[0], prior, w * kmu_q, w * ksig_q)
        dz = dx_post[:, : self.cfg.d] + dz_prior
        g = self.encoder.backward(etape, dz)
        g.update({"dec": g_dec, "post": g_post, "expert0": g_prior})
        return nll, kl_mean, g

    # -- phase two: experts ---------------------------------------------
    def expert_reinforce_grads(self, i: int, z, zp, advantages):
        """Gradient of ``-mean(adv * log G_i(z' | z))`` w.r.t. expert ``i``'s parameters.

        ``z`` is ``(B, d)``; ``zp`` is ``(B, K, d)`` with advantages ``(B, K)``.
        """
        h = self.expert(i, z, keep=True)
        mu, sig = h.dist.mu[:, None, :], h.dist.sigma[:, None, :]
        g = nk.DiagGaussian(np.broadcast_to(mu, zp.shape), np.broadcast_to(sig, zp.shape))
        _, dmu, dsig = nk.gauss_logpdf_grads(g, zp)
        w = -np.asarray(advantages)[:, :, None] / advantages.size
        return gauss_head_backward(self.experts[i], h, (w * dmu).sum(axis=1), (w * dsig).sum(axis=1))[0]

    def candidates_from_latents(self, z, rng, k: int, temperature: float, experts=None):
        """Sample ``k`` latents per expert per context and decode them.

        Returns ``(expert ids (B, M), utterances [B][M], latents (B, M, d), logprobs (B, M))``.
        """
        z = np.atleast_2d(z)
        experts = list(range(self.cfg.n_experts)) if experts is None else list(experts)
        B, d = z.shape
        M = len(experts) * k
        lat = np.zeros((B, M, d))
        ids = np.repeat(np.array(experts), k)[None, :].repeat(B, axis=0)
        for j, i in enumerate(experts):
            dist = self.expert(i, z).dist
            eps = rng.standard_normal((B, k, d))
            lat[:, j * k:(j + 1) * k] = dist.mu[:, None, :] + dist.sigma[:, None, :] * eps
        utts, lp = self.decoder.sample(lat.reshape(B * M, d), rng, temperature)
        utts = [utts[b * M:(b + 1) * M] for b in range(B)]
        return ids, utts, lat, lp.reshape(B, M)


def gen_candidates(model: MoELM, history: tl.ConversationHistory, k_per_expert: int, rng,
                   temperature: float = 0.7) -> list[Candidate]:
    """``(m+1) * k`` candidate utterances for one history, each tagged with its expert."""
    if k_per_expert < 1:
        raise nk.ContractViolation("k_per_expert must be at least 1")
    z = model.encode([history])
    ids, utts, lat, lp = model.candidates_from_latents(z, rng, k_per_expert, temperature)
    return [Candidate(int(ids[0, j]), utts[0][j], lat[0, j], float(lp[0, j])) for j in range(ids.shape[1])]


def assign_expert(model: MoELM, z, ys, mode: str = "mean", rng=None, n_samples: int = 8) -> np.ndarray:
    """Attribution ``i(z, Y) = argmax_i log Psi(Y | z^i)``; ties go to the lowest index.

    ``mode="mean"`` uses ``z^i = mu_i(z)``; ``mode="sampled"`` averages the
    log-likelihood over ``n_samples`` draws from each expert.
    """
    z = np.atleast_2d(z)
    B, m1 = z.shape[0], model.cfg.n_experts
    scores = np.zeros((B, m1))
    for i in range(m1):
        dist = model.expert(i, z).dist
        if mode == "mean":
            scores[:, i] = model.decoder.logprob(dist.mu, ys)
        elif mode == "sampled":
            acc = np.zeros(B)
            for _ in range(n_samples):
                acc += model.decoder.logprob(dist.mu + dist.sigma * rng.standard_normal(dist.mu.shape), ys)
            scores[:, i] = acc / n_samples
        else:
            raise ValueError(f"unknown attribution mode {mode!r}")
    best = scores.max(axis=1, keepdims=True)
    return np.argmax(scores >= best - 1e-12 * np.maximum(1.0, np.abs(best)), axis=1)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class PrimitiveTrainer:
    model: MoELM
    kappa: float = 0.1
    lr: float = 2e-3
    opt: nk.Trainable = field(init=False)

    def __post_init__(self):
        self.opt = nk.Trainable(self.model.primitive_nets(), lr=self.lr)

    def step(self, histories, ys, rng) -> tuple[float, float]:
        eps = rng.standard_normal((len(ys), self.model.cfg.d))
        nll, kl, g = self.model.primitive_loss(histories, ys, eps, self.kappa)
        if not (np.isfinite(nll) and np.isfinite(kl)):
            raise nk.TrainingStepError("primitive", f"non-finite loss: nll={nll}, kl={kl}")
        self.opt.step(g)
        return nll, kl


def train_primitive_step(trainer: PrimitiveTrainer, histories, ys, rng) -> tuple[float, float]:
    return trainer.step(histories, ys, rng)


@dataclass
class ExpertTrainer:
    """REINFORCE with an EMA baseline for one expert; the rest of the model stays frozen."""

    model: MoELM
    i: int
    lr: float = 2e-3
    k: int = 4
    temperature: float = 0.7
    baseline_decay: float = 0.99
    opt: nk.Trainable = field(init=False)

    def __post_init__(self):
        if self.i < 1:
            raise nk.ContractViolation("expert index must be >= 1 (0 is the primitive)")
        self.opt = nk.Trainable({f"expert{self.i}": self.model.experts[self.i]}, lr=self.lr)

    def step(self, histories, rng, z=None) -> float:
        m = self.model
        z = m.encode(histories) if z is None else z
        dist = m.expert(self.i, z).dist
        B, d = z.shape
        zp = dist.mu[:, None, :] + dist.sigma[:, None, :] * rng.standard_normal((B, self.k, d))
        utts, _ = m.decoder.sample(zp.reshape(B * self.k, d), rng, self.temperature)
        labels = np.array([tl.intent_label(self.i, histories[n // self.k], y) for n, y in enumerate(utts)])
        labels = labels.reshape(B, self.k)
        adv = labels - m.baselines[self.i]
        g = m.expert_reinforce_grads(self.i, z, zp, adv)
        self.opt.step({f"expert{self.i}": g})
        mean = float(labels.mean())
        m.baselines[self.i] = self.baseline_decay * m.baselines[self.i] + (1 - self.baseline_decay) * mean
        return mean


def train_expert_step(trainer: ExpertTrainer, histories, rng, z=None) -> float:
    return trainer.step(histories, rng, z)


def mean_label(model: MoELM, i: int, histories, rng, expert: int | None = None, k: int = 4,
               temperature: float = 0.7) -> float:
    """Mean ``l_i`` of utterances decoded from ``expert`` (defaults to ``i``) on the given contexts."""
    expert = i if expert is None else expert
    z = model.encode(histories)
    dist = model.expert(expert, z).dist
    B, d = z.shape
    zp = dist.mu[:, None, :] + dist.sigma[:, None, :] * rng.standard_normal((B, k, d))
    utts, _ = model.decoder.sample(zp.reshape(B * k, d), rng, temperature)
    return float(np.mean([tl.intent_label(i, histories[n // k], y) for n, y in enumerate(utts)]))
