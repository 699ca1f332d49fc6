"""Critic containers: single/dual/dropout-ensemble Q with V, the multi-head
per-expert critic, and the expert value function over expert indices."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .. import numkit as nk

Q_STRUCTURES = ("single", "dual", "dropout_ensemble")


@dataclass(frozen=True)
class LatentNorm:
    """Per-dimension standardization of latents fed to critics.

    Encoder latents have a small spread, so critics see them rescaled by the
    mean and standard deviation of the training states.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, *arrays, floor: float = 1e-6) -> "LatentNorm":
        x = np.concatenate([np.asarray(a, dtype=float).reshape(-1, np.shape(a)[-1]) for a in arrays])
        std = x.std(axis=0)
        # constant columns are only centered, so unseen values stay on a sane scale
        return cls(x.mean(axis=0), np.where(std > floor, std, 1.0))

    @classmethod
    def identity(cls, d: int) -> "LatentNorm":
        return cls(np.zeros(d), np.ones(d))

    def __call__(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentNorm":
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["std"], dtype=float))


def load_wiring() -> dict:
    return json.loads(resources.files("moedm.assets").joinpath("wiring.json").read_text())


def critic_net(in_dim: int, out_dim: int, hidden: Sequence[int], rng) -> nk.DenseNet:
    hidden = list(hidden)
    return nk.DenseNet([in_dim, *hidden, out_dim], ["tanh"] * len(hidden) + ["identity"], rng)


class CriticSet:
    """``Q`` over ``z_a`` and ``V`` over ``z`` with Polyak-averaged target copies.

    ``structure`` picks how the Q estimate is formed: one net, the minimum of
    two nets, or the minimum of one net under ``n_masks`` fixed dropout masks.
    """

    def __init__(self, d: int, hidden=(128, 128, 128), structure: str = "single", dropout: float = 0.5,
                 n_masks: int = 5, alpha: float = 0.1, polyak: float = 0.005, seed: int = 0):
        if structure not in Q_STRUCTURES:
            raise nk.ContractViolation(f"unknown Q structure {structure!r}")
        if alpha <= 0:
            raise nk.ContractViolation("entropy temperature must be positive")
        rng = np.random.default_rng(seed)
        self.structure, self.dropout, self.alpha, self.polyak = structure, dropout, alpha, polyak
        n_q = 2 if structure == "dual" else 1
        self.q = [critic_net(d, 1, hidden, rng) for _ in range(n_q)]
        self.v = critic_net(d, 1, hidden, rng)
        self.q_tar = [q.copy() for q in self.q]
        self.v_tar = self.v.copy()
        self.masks = nk.dropout_masks(self.q[0], dropout, rng, n_masks) if structure == "dropout_ensemble" else None
        self.trace: list | None = None  # set to a list to record Q reductions

    def nets(self) -> dict:
        out = {f"q{k}": q for k, q in enumerate(self.q)}
        out.update({f"q{k}_tar": q for k, q in enumerate(self.q_tar)})
        out.update({"v": self.v, "v_tar": self.v_tar})
        return out

    def q_value(self, za, target: bool = False) -> np.ndarray:
        """Pessimistic Q estimate: min over the dual pair or the dropout masks."""
        nets = self.q_tar if target else self.q
        if self.structure == "dropout_ensemble":
            vals = np.stack([nets[0].forward(za, dropout_masks=m)[..., 0] for m in self.masks])
        else:
            vals = np.stack([q.forward(za)[..., 0] for q in nets])
        out = vals.min(axis=0)
        if self.trace is not None:
            self.trace.append({"target": target, "members": vals, "value": out})
        return out

    def v_value(self, z, target: bool = False) -> np.ndarray:
        return (self.v_tar if target else self.v).forward(z)[..., 0]

    def train_masks(self, batch: int, rng) -> list | None:
        """Fresh per-sample dropout masks for a training forward pass."""
        if self.structure != "dropout_ensemble":
            return None
        keep = 1.0 - self.dropout
        return [(rng.random((batch, h)) < keep) / keep for h in self.q[0].hidden_sizes]

    def update_targets(self) -> None:
        for q, qt in zip(self.q, self.q_tar):
            nk.polyak_update(qt, q, self.polyak)
        nk.polyak_update(self.v_tar, self.v, self.polyak)


class MultiHeadCritic:
    """Shared trunk with ``m+1`` Q heads (on ``z_a``) and ``m+1`` V heads (on ``z``)."""

    def __init__(self, d: int, n_heads: int, trunk_hidden=(128, 128), polyak: float = 0.005, seed: int = 0,
                 trunk: nk.DenseNet | None = None):
        rng = np.random.default_rng(seed)
        self.n_heads, self.polyak = n_heads, polyak
        if trunk is None:
            trunk_hidden = list(trunk_hidden)
            trunk = nk.DenseNet([d, *trunk_hidden], ["tanh"] * len(trunk_hidden), rng)
        self.trunk = trunk
        width = self.trunk.out_dim
        self.qh = nk.DenseNet([width, n_heads], ["identity"], rng)
        self.vh = nk.DenseNet([width, n_heads], ["identity"], rng)
        self.trunk_tar, self.qh_tar, self.vh_tar = self.trunk.copy(), self.qh.copy(), self.vh.copy()

    def nets(self) -> dict:
        return {"trunk": self.trunk, "qh": self.qh, "vh": self.vh,
                "trunk_tar": self.trunk_tar, "qh_tar": self.qh_tar, "vh_tar": self.vh_tar}

    def _pair(self, target: bool):
        return (self.trunk_tar, self.qh_tar, self.vh_tar) if target else (self.trunk, self.qh, self.vh)

    def q_all(self, za, target: bool = False) -> np.ndarray:
        trunk, qh, _ = self._pair(target)
        return qh.forward(trunk.forward(za))

    def v_all(self, z, target: bool = False) -> np.ndarray:
        trunk, _, vh = self._pair(target)
        return vh.forward(trunk.forward(z))

    def update_targets(self) -> None:
        for t, o in ((self.trunk_tar, self.trunk), (self.qh_tar, self.qh), (self.vh_tar, self.vh)):
            nk.polyak_update(t, o, self.polyak)


class ExpertValueFn:
    """``Lambda(z, i)`` with one output per expert and a target copy."""

    def __init__(self, d: int, n_heads: int, hidden=(128, 128, 128), polyak: float = 0.005, seed: int = 0,
                 net: nk.DenseNet | None = None):
        rng = np.random.default_rng(seed)
        self.n_heads, self.polyak = n_heads, polyak
        self.net = net if net is not None else critic_net(d, n_heads, hidden, rng)
        self.tar = self.net.copy()

    def nets(self) -> dict:
        return {"lam": self.net, "lam_tar": self.tar}

    def values(self, z, target: bool = False) -> np.ndarray:
        return (self.tar if target else self.net).forward(z)

    def best_expert(self, z) -> np.ndarray:
        """``lambda*(z)``: argmax over heads, ties to the lowest index."""
        vals = np.atleast_2d(self.values(z))
        return np.argmax(vals >= vals.max(axis=1, keepdims=True) - 1e-12, axis=1)

    def update_targets(self) -> None:
        nk.polyak_update(self.tar, self.net, self.polyak)
