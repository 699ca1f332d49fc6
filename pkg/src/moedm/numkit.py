"""Dense feed-forward nets with hand-written reverse mode, Adam, and
diagonal-Gaussian helpers.

Every learned function approximator in the package is a :class:`DenseNet`.
Forward passes optionally return a :class:`Tape` holding the intermediate
activations; :meth:`DenseNet.backward` consumes a tape and an output adjoint
and returns parameter gradients plus the input adjoint.  Losses are written
by hand on top of this (see ``moe_model`` and ``rl``).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FORMAT_TAG = "numkit-v1"
ACTIVATIONS = ("relu", "tanh", "identity")
LOG_2PI = float(np.log(2.0 * np.pi))

SIGMA_MIN = 1e-3
SIGMA_MAX = 5.0


class ContractViolation(ValueError):
    """A caller broke a documented precondition (shapes, missing tape, ...)."""


class TrainingStepError(FloatingPointError):
    """Raised when an optimizer step sees a non-finite gradient."""

    def __init__(self, param_id, message: str = ""):
        self.param_id = param_id
        super().__init__(message or f"non-finite gradient for parameter {param_id!r}")


# ---------------------------------------------------------------------------
# dense nets


@dataclass
class Tape:
    """Activations cached by a forward pass, consumed by ``backward``."""

    inputs: list  # input to each layer, (B, in_l)
    pre: list  # pre-activation of each layer, (B, out_l)
    masks: list  # dropout mask applied after each layer's activation (or None)
    squeeze: bool


def _act(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "tanh":
        return np.tanh(x)
    return x


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(pre.dtype)
    if name == "tanh":
        return 1.0 - post * post
    return np.ones_like(pre)


class DenseNet:
    """Multi-layer perceptron ``x -> act_L(W_L ... act_1(W_1 x + b_1) ... + b_L)``.

    ``sizes`` lists the layer widths including input and output; ``activations``
    has one tag per layer.  A net with ``sizes=[n]`` and no layers is the
    identity map, which the tabular fixtures use as a trivial trunk.
    """

    def __init__(
        self,
        sizes: Sequence[int],
        activations: Sequence[str] | None = None,
        rng: np.random.Generator | None = None,
        out_scale: float = 1.0,
    ):
        sizes = [int(s) for s in sizes]
        if len(sizes) < 1:
            raise ContractViolation("a DenseNet needs at least an input size")
        n_layers = len(sizes) - 1
        if activations is None:
            activations = ["tanh"] * max(n_layers - 1, 0) + ["identity"] * min(n_layers, 1)
        activations = list(activations)
        if len(activations) != n_layers:
            raise ContractViolation(f"{n_layers} layers but {len(activations)} activation tags")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ContractViolation(f"unknown activation {a!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.activations = activations
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for li in range(n_layers):
            fan_in, fan_out = sizes[li], sizes[li + 1]
            gain = np.sqrt(2.0) if activations[li] == "relu" else 1.0
            w = rng.normal(0.0, gain / np.sqrt(fan_in), size=(fan_out, fan_in))
            if li == n_layers - 1:
                w *= out_scale
            self.weights.append(w)
            self.biases.append(np.zeros(fan_out))
        self._in_dim = sizes[0]

    # -- structure -----------------------------------------------------
    @property
    def in_dim(self) -> int:
        return self._in_dim

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0] if self.weights else self._in_dim

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def hidden_sizes(self) -> list[int]:
        return [w.shape[0] for w in self.weights[:-1]]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.activations = list(self.activations)
        other.weights = [w.copy() for w in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other._in_dim = self._in_dim
        return other

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        mine = self.params()
        if len(mine) != len(params):
            raise ContractViolation("parameter count mismatch")
        for dst, src in zip(mine, params):
            if dst.shape != np.shape(src):
                raise ContractViolation(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src

    # -- evaluation ------------------------------------------------------
    def forward(self, x, keep: bool = False, dropout_masks: Sequence | None = None):
        """Evaluate the net on a vector ``(in,)`` or batch ``(B, in)``.

        With ``keep=True`` returns ``(y, tape)``.  ``dropout_masks`` holds one
        multiplicative mask per hidden layer (``None`` entries skip a layer).
        """
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        if h.ndim != 2 or h.shape[1] != self._in_dim:
            raise ContractViolation(f"expected input dim {self._in_dim}, got shape {x.shape}")
        inputs, pre, masks = [], [], []
        last = self.n_layers - 1
        for li, (w, b) in enumerate(zip(self.weights, self.biases)):
            inputs.append(h)
            a = h @ w.T + b
            pre.append(a)
            h = _act(self.activations[li], a)
            mask = None
            if dropout_masks is not None and li < last and li < len(dropout_masks):
                mask = dropout_masks[li]
                if mask is not None:
                    h = h * mask
            masks.append(mask)
        y = h[0] if squeeze else h
        if keep:
            return y, Tape(inputs, pre, masks, squeeze)
        return y

    __call__ = forward

    def backward(self, tape: Tape | None, dy):
        """Reverse pass.  Returns ``(grads, dx)`` with grads aligned to ``params()``."""
        if tape is None:
            raise ContractViolation("backward called without a forward tape")
        dy = np.asarray(dy, dtype=float)
        g = dy[None, :] if tape.squeeze else dy
        grads_w = [None] * self.n_layers
        grads_b = [None] * self.n_layers
        for li in range(self.n_layers - 1, -1, -1):
            mask = tape.masks[li]
            if mask is not None:
                g = g * mask
            post = _act(self.activations[li], tape.pre[li])
            g = g * _act_grad(self.activations[li], tape.pre[li], post)
            grads_w[li] = g.T @ tape.inputs[li]
            grads_b[li] = g.sum(axis=0)
            g = g @ self.weights[li]
        grads = []
        for gw, gb in zip(grads_w, grads_b):
            grads.extend([gw, gb])
        dx = g[0] if tape.squeeze else g
        return grads, dx

    # -- serialization -----------------------------------------------------
    def to_record(self) -> dict:
        return {
            "format": FORMAT_TAG,
            "in_dim": self._in_dim,
            "layers": [
                {
                    "shape": list(w.shape),
                    "weight": w.ravel().tolist(),
                    "bias": b.tolist(),
                    "activation": act,
                }
                for w, b, act in zip(self.weights, self.biases, self.activations)
            ],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "DenseNet":
        if rec.get("format") != FORMAT_TAG:
            raise ContractViolation(f"unsupported checkpoint format {rec.get('format')!r}")
        net = cls.__new__(cls)
        net.activations = [layer["activation"] for layer in rec["layers"]]
        net.weights = [
            np.asarray(layer["weight"], dtype=float).reshape(layer["shape"]) for layer in rec["layers"]
        ]
        net.biases = [np.asarray(layer["bias"], dtype=float) for layer in rec["layers"]]
        net._in_dim = int(rec["in_dim"])
        for w, b in zip(net.weights, net.biases):
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ContractViolation("checkpoint holds non-finite parameters")
        return net


def forward(net: DenseNet, x, **kw):
    return net.forward(x, **kw)


def backward(net: DenseNet, tape: Tape | None, dy):
    return net.backward(tape, dy)


def dropout_masks(net: DenseNet, rate: float, rng: np.random.Generator, n: int = 1) -> list:
    """``n`` independent inverted-dropout mask sets (one mask per hidden layer)."""
    keep = 1.0 - rate
    out = []
    for _ in range(n):
        out.append([(rng.random(h) < keep) / keep for h in net.hidden_sizes])
    return out


def polyak_update(target: DenseNet, online: DenseNet, rate: float) -> None:
    for t, o in zip(target.params(), online.params()):
        t *= 1.0 - rate
        t += rate * o


def save_nets(path, nets: dict, meta: dict | None = None) -> None:
    doc = {"format": FORMAT_TAG, "meta": meta or {}, "nets": {k: v.to_record() for k, v in nets.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_nets(path) -> tuple[dict, dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT_TAG:
        raise ContractViolation(f"{path}: not a {FORMAT_TAG} container")
    return {k: DenseNet.from_record(v) for k, v in doc["nets"].items()}, doc.get("meta", {})


def pack_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def unpack_array(s: str, shape=None) -> np.ndarray:
    a = np.frombuffer(base64.b64decode(s), dtype="<f8").copy()
    return a.reshape(shape) if shape is not None else a


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    """Adam moments for one parameter group."""

    lr: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], **kw) -> "OptState":
        st = cls(**kw)
        st.m = [np.zeros_like(p) for p in params]
        st.v = [np.zeros_like(p) for p in params]
        return st

    def to_record(self) -> dict:
        return {
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps, "step": self.step,
            "m": [pack_array(a) for a in self.m], "v": [pack_array(a) for a in self.v],
            "shapes": [list(a.shape) for a in self.m],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "OptState":
        st = cls(lr=rec["lr"], beta1=rec["beta1"], beta2=rec["beta2"], eps=rec["eps"], step=rec["step"])
        st.m = [unpack_array(s, sh) for s, sh in zip(rec["m"], rec["shapes"])]
        st.v = [unpack_array(s, sh) for s, sh in zip(rec["v"], rec["shapes"])]
        return st


def opt_step(state: OptState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], ids=None) -> None:
    """One in-place Adam update of ``params``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ContractViolation("params, grads and optimizer moments must align")
    for k, g in enumerate(grads):
        if params[k].shape != np.shape(g):
            raise ContractViolation(f"gradient shape {np.shape(g)} != parameter shape {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingStepError(ids[k] if ids is not None else k)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class Trainable:
    """A named group of nets sharing one Adam state."""

    def __init__(self, nets: dict, lr: float = 2e-3):
        self.nets = nets
        self.names = list(nets)
        self.state = OptState.for_params(self.params(), lr=lr)

    def params(self) -> list[np.ndarray]:
        out = []
        for k in self.names:
            out.extend(self.nets[k].params())
        return out

    def ids(self) -> list[str]:
        out = []
        for k in self.names:
            n = len(self.nets[k].params())
            out.extend(f"{k}[{j}]" for j in range(n))
        return out

    def step(self, grads: dict) -> None:
        flat = []
        for k in self.names:
            g = grads.get(k)
            flat.extend(g if g is not None else self.nets[k].zero_grads())
        opt_step(self.state, self.params(), flat, ids=self.ids())


def add_grads(acc, new):
    if acc is None:
        return [g.copy() for g in new]
    for a, g in zip(acc, new):
        a += g
    return acc


# ---------------------------------------------------------------------------
# diagonal Gaussians


@dataclass
class DiagGaussian:
    """``N(mu, diag(sigma^2))``; arrays may carry leading batch dims."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.sigma = np.asarray(self.sigma, dtype=float)
        if self.mu.shape != self.sigma.shape:
            raise ContractViolation("mu and sigma shapes differ")
        if np.any(self.sigma <= 0):
            raise ContractViolation("sigma must be positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigma_from_raw(raw, smin: float = SIGMA_MIN, smax: float = SIGMA_MAX):
    """``sigma = min(smin + softplus(raw), smax)`` and its derivative."""
    s = smin + softplus(raw)
    clamped = s >= smax
    return np.where(clamped, smax, s), np.where(clamped, 0.0, sigmoid(raw))


def raw_from_sigma(sigma, smin: float = SIGMA_MIN):
    y = np.asarray(sigma, dtype=float) - smin
    return y + np.log(-np.expm1(-y))


def gauss_logpdf(g: DiagGaussian, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != g.dim:
        raise ContractViolation(f"dimension mismatch {x.shape[-1]} vs {g.dim}")
    r = (x - g.mu) / g.sigma
    return np.sum(-0.5 * LOG_2PI - np.log(g.sigma) - 0.5 * r * r, axis=-1)


def gauss_logpdf_grads(g: DiagGaussian, x):
    """Partials of ``gauss_logpdf`` w.r.t. ``(x, mu, sigma)``."""
    x = np.asarray(x, dtype=float)
    diff = x - g.mu
    s2 = g.sigma * g.sigma
    dx = -diff / s2
    return dx, -dx, -1.0 / g.sigma + diff * diff / (s2 * g.sigma)


def gauss_kl(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    if p.mu.shape[-1] != q.mu.shape[-1]:
        raise ContractViolation("KL between Gaussians of different dimension")
    ratio = p.sigma / q.sigma
    d = (p.mu - q.mu) / q.sigma
    # ratio^2 - 1 - 2 ln ratio >= 0 termwise; expm1/log1p keep it exact near ratio = 1
    lr = np.log(ratio)
    terms = 0.5 * (np.expm1(2.0 * lr) - 2.0 * lr + d * d)
    return np.maximum(np.sum(terms, axis=-1), 0.0)


def gauss_kl_grads(p: DiagGaussian, q: DiagGaussian):
    """Partials of ``gauss_kl(p, q)`` w.r.t. ``(mu_p, sigma_p, mu_q, sigma_q)``."""
    sq2 = q.sigma * q.sigma
    diff = p.mu - q.mu
    dmu_p = diff / sq2
    dsig_p = -1.0 / p.sigma + p.sigma / sq2
    dsig_q = 1.0 / q.sigma - (p.sigma * p.sigma + diff * diff) / (sq2 * q.sigma)
    return dmu_p, dsig_p, -dmu_p, dsig_q


@dataclass
class Reparam:
    """A reparameterized draw ``sample = mu + sigma * eps``."""

    sample: np.ndarray
    eps: np.ndarray

    def pullback(self, dsample):
        """Map an adjoint on ``sample`` to adjoints on ``(mu, sigma)``."""
        dsample = np.asarray(dsample, dtype=float)
        return dsample, dsample * self.eps


def reparam_sample(g: DiagGaussian, rng: np.random.Generator | None = None, eps=None) -> Reparam:
    if eps is None:
        eps = rng.standard_normal(g.mu.shape)
    eps = np.asarray(eps, dtype=float)
    return Reparam(g.mu + g.sigma * eps, eps)
