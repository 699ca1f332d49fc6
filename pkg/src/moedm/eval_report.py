"""Evaluation: learned user model, rollout statistics, expert histograms, diversity, report files.

Nothing here imports the RL package, so policies reach ``evaluate`` as plain
callables and the model-based scorer is shared with ``rl.policy``.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numkit as nk
from . import toylang as tl
from . import user_sim as us

# ---------------------------------------------------------------------------
# user model


@dataclass
class UserModel:
    """``r_hat(z_a)`` (tanh output, so inside [-1, 1]) and ``z_hat_next(z_a)``."""

    r_net: nk.DenseNet
    z_net: nk.DenseNet

    @classmethod
    def create(cls, d_in: int, d_out: int | None = None, hidden: Sequence[int] = (128, 128), seed: int = 0):
        rng = np.random.default_rng(seed)
        hidden = list(hidden)
        d_out = d_in if d_out is None else d_out
        r_net = nk.DenseNet([d_in, *hidden, 1], ["tanh"] * (len(hidden) + 1), rng, out_scale=0.1)
        z_net = nk.DenseNet([d_in, *hidden, d_out], ["tanh"] * len(hidden) + ["identity"], rng)
        return cls(r_net, z_net)

    def nets(self) -> dict:
        return {"r": self.r_net, "z": self.z_net}

    def predict(self, za) -> tuple[np.ndarray, np.ndarray]:
        za = np.atleast_2d(za)
        return np.clip(self.r_net.forward(za)[:, 0], -1.0, 1.0), self.z_net.forward(za)

    def save(self, path, meta: dict | None = None) -> None:
        nk.save_nets(path, self.nets(), {"kind": "user_model", **(meta or {})})

    @classmethod
    def load(cls, path) -> "UserModel":
        nets, _ = nk.load_nets(path)
        return cls(nets["r"], nets["z"])


def user_model_loss(um: UserModel, za, r, zn):
    """``mean (r - r_hat)^2`` and ``mean ||z_next - z_hat||^2`` with gradients for both heads."""
    za = np.atleast_2d(za)
    B = za.shape[0]
    pr, tr = um.r_net.forward(za, keep=True)
    pz, tz = um.z_net.forward(za, keep=True)
    ur = np.asarray(r, dtype=float) - pr[:, 0]
    uz = np.asarray(zn, dtype=float) - pz
    g_r, _ = um.r_net.backward(tr, (-2.0 * ur / B)[:, None])
    g_z, _ = um.z_net.backward(tz, -2.0 * uz / B)
    return float((ur * ur).mean()), float((uz * uz).sum(axis=1).mean()), {"r": g_r, "z": g_z}


def train_user_model(um: UserModel, za, r, zn, steps: int = 4000, batch: int = 256, lr: float = 2e-3,
                     seed: int = 0, log_every: int = 100) -> dict:
    """Minimize both regression losses; returns their logged curves."""
    za, r, zn = np.atleast_2d(za), np.asarray(r, dtype=float), np.atleast_2d(zn)
    if len(r) == 0:
        raise nk.ContractViolation("cannot fit a user model to an empty dataset")
    rng = np.random.default_rng(seed)
    opt = nk.Trainable(um.nets(), lr=lr)
    n, b = len(r), min(batch, len(r))
    perm, pos = rng.permutation(n), 0
    out = {"step": [], "loss_r": [], "loss_z": []}
    for s in range(1, steps + 1):
        if pos + b > n:
            perm, pos = rng.permutation(n), 0
        idx = perm[pos:pos + b]
        pos += b
        lr_, lz, g = user_model_loss(um, za[idx], r[idx], zn[idx])
        opt.step(g)
        if s % log_every == 0 or s == 1 or s == steps:
            out["step"].append(s)
            out["loss_r"].append(lr_)
            out["loss_z"].append(lz)
    return out


def score_model_based(um: UserModel, value_fn: Callable, za, gamma: float) -> np.ndarray:
    """``r_hat(z_a) + gamma * V(z_hat_next(z_a))``."""
    r_hat, zn_hat = um.predict(za)
    if gamma == 0.0:
        return r_hat
    return r_hat + gamma * np.asarray(value_fn(zn_hat), dtype=float)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class EvalResult:
    method: str
    mode: str
    returns: np.ndarray
    counts: np.ndarray  # expert selections summed over conversations
    selections: list = field(default_factory=list)  # per conversation, the expert chosen at each turn
    samples: list = field(default_factory=list, repr=False)  # (history, chosen utterance), in turn order

    @property
    def n(self) -> int:
        return len(self.returns)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns))

    @property
    def stderr(self) -> float:
        return stderr(self.returns)


def stderr(x) -> float:
    """Sample standard deviation over sqrt(n); zero for a single value."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return 0.0
    return float(np.std(x, ddof=1) / np.sqrt(len(x)))


def _episode_rngs(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _run_chunk(args):
    policy, env_cfg, seeds, n_experts = args
    out = []
    for ss in seeds:
        ro = us.rollout(policy, env_cfg, np.random.default_rng(ss), n_experts)
        out.append((ro.ret, ro.counts, [t["expert"] for t in ro.turns], [(t["history"], t["action"]) for t in ro.turns]))
    return out


def evaluate(policy: us.Policy, env_cfg: us.EnvConfig, n: int = 100, seed: int = 0, method: str = "",
             mode: str = "mf", n_experts: int = tl.N_INTENTS, workers: int = 1) -> EvalResult:
    """``n`` independent conversations, each with its own spawned generator.

    Per-conversation generators make the result independent of ``workers``;
    chunks are reduced in submission order.
    """
    seeds = np.random.SeedSequence(seed).spawn(n)
    if workers > 1 and n > 1:
        chunks = [seeds[k::workers] for k in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_run_chunk, [(policy, env_cfg, c, n_experts) for c in chunks]))
        rows = [None] * n
        for k, part in enumerate(parts):
            for j, row in enumerate(part):
                rows[k + j * workers] = row
    else:
        rows = _run_chunk((policy, env_cfg, seeds, n_experts))
    returns = np.array([r[0] for r in rows])
    counts = np.sum([r[1] for r in rows], axis=0) if rows else np.zeros(n_experts, dtype=int)
    return EvalResult(method, mode, returns, np.asarray(counts, dtype=int), [r[2] for r in rows],
                      [p for r in rows for p in r[3]])


# ---------------------------------------------------------------------------
# expert-selection analysis and diversity


def expert_histogram_kl(counts) -> tuple[np.ndarray, float]:
    """Empirical distribution over experts and ``KL(p || uniform) = sum p ln(K p)`` (0 ln 0 = 0)."""
    c = np.asarray(counts, dtype=float)
    if c.ndim != 1 or np.any(c < 0):
        raise nk.ContractViolation("counts must be a non-negative vector")
    total = c.sum()
    if total <= 0:
        raise nk.ContractViolation("histogram needs at least one selection")
    p = c / total
    nz = p > 0
    return p, float(np.sum(p[nz] * np.log(len(p) * p[nz])))


def hoyer_sparsity(x) -> float:
    """``(sqrt(n) - |x|_1 / |x|_2) / (sqrt(n) - 1)``: 0 for a flat vector, 1 for a one-hot one."""
    x = np.abs(np.asarray(x, dtype=float)).ravel()
    n = len(x)
    l2 = np.linalg.norm(x)
    if n < 2 or l2 == 0:
        raise nk.ContractViolation("sparsity needs at least two entries, not all zero")
    return float((np.sqrt(n) - x.sum() / l2) / (np.sqrt(n) - 1))


def embedding_diversity(embeddings) -> tuple[float, np.ndarray]:
    """``1 - sparsity`` of the singular values of the embedding matrix, and those values."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=float))
    if e.shape[0] < 2:
        raise nk.ContractViolation("diversity needs at least two utterances")
    sv = np.linalg.svd(e, compute_uv=False)
    # rank-deficient matrices leave round-off singular values; treat them as zero
    sv = np.where(sv > sv.max() * 1e-10, sv, 0.0)
    return 1.0 - hoyer_sparsity(sv), sv


def utterance_embeddings(utterances, vocab: int) -> np.ndarray:
    """Bag-of-words rows over content tokens."""
    out = np.zeros((len(utterances), vocab))
    for k, u in enumerate(utterances):
        for t in tl.content_tokens(u):
            out[k, t] += 1.0
    return out


def diversity_block(utterances, embeddings, perplexity: float | None = None) -> dict:
    if len(utterances) < 2:
        raise nk.ContractViolation("diversity needs at least two utterances")
    div, _ = embedding_diversity(embeddings)
    return {"diversity": div, "gram1": tl.gram_ratio(1, utterances), "gram2": tl.gram_ratio(2, utterances),
            "gram3": tl.gram_ratio(3, utterances), "perplexity": perplexity}


# ---------------------------------------------------------------------------
# report files

CSV_FIELDS = ["method", "mode", "n", "mean_return", "stderr", "kl_uniform", "diversity", "gram1", "gram2", "gram3",
              "perplexity", "seed", "config_hash", "revision"]


def fmt_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_row(res: EvalResult, div: dict | None, seed: int, config_hash: str, revision: str) -> dict:
    _, kl = expert_histogram_kl(res.counts) if res.counts.sum() > 0 else (None, None)
    div = div or {}
    return {"method": res.method, "mode": res.mode, "n": res.n, "mean_return": res.mean, "stderr": res.stderr,
            "kl_uniform": kl, "diversity": div.get("diversity"), "gram1": div.get("gram1"),
            "gram2": div.get("gram2"), "gram3": div.get("gram3"), "perplexity": div.get("perplexity"),
            "seed": seed, "config_hash": config_hash, "revision": revision}


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: fmt_cell(r.get(k)) for k in CSV_FIELDS})
    return buf.getvalue()


def table_csv(rows: Sequence[dict]) -> str:
    """One line per method with mean and stderr columns per evaluation mode."""
    methods, modes, cell = [], [], {}
    for r in rows:
        if r["method"] not in methods:
            methods.append(r["method"])
        if r["mode"] not in modes:
            modes.append(r["mode"])
        cell[(r["method"], r["mode"])] = r
    fields = ["method"] + [f"{m}_{c}" for m in modes for c in ("mean", "stderr")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for meth in methods:
        line = [meth]
        for m in modes:
            r = cell.get((meth, m))
            line += [fmt_cell(r["mean_return"]), fmt_cell(r["stderr"])] if r else ["", ""]
        w.writerow(line)
    return buf.getvalue()


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def report_json(results: Sequence[EvalResult], rows: Sequence[dict], header: dict) -> str:
    doc = {"header": header, "rows": [{k: r.get(k) for k in CSV_FIELDS} for r in rows], "histograms": []}
    for res in results:
        if res.counts.sum() == 0:
            continue
        p, kl = expert_histogram_kl(res.counts)
        doc["histograms"].append({"method": res.method, "mode": res.mode, "counts": res.counts.tolist(),
                                  "frequency": p.tolist(), "kl_uniform": kl, "selections": int(res.counts.sum()),
                                  "experts": list(tl.INTENTS[: len(p)])})
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"
