"""Loss functions with hand-derived gradients.

Each function is pure given its inputs (dropout masks and Gaussian noise are
passed in), returns the scalar loss and gradients aligned with the nets'
``params()``, and never touches optimizer state.  Batch losses are means over
the batch.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .. import numkit as nk
from ..moe_model import HeadOut, gauss_head, gauss_head_backward


def expectile_loss(u, tau: float):
    """``L2^tau(u) = |tau - 1{u < 0}| * u^2`` elementwise."""
    if not 0.0 < tau < 1.0:
        raise nk.ContractViolation("tau must lie in (0, 1)")
    u = np.asarray(u, dtype=float)
    return np.where(u < 0, 1.0 - tau, tau) * u * u


def expectile_grad(u, tau: float):
    u = np.asarray(u, dtype=float)
    return 2.0 * np.where(u < 0, 1.0 - tau, tau) * u


def td_target(r, terminal, gamma: float, v_next):
    """``r + gamma * V(z_next)``, with no bootstrap on terminal transitions."""
    return np.asarray(r) + gamma * (1.0 - np.asarray(terminal, dtype=float)) * np.asarray(v_next)


def regression(net: nk.DenseNet, x, target, tau: float | None = None, masks=None, head: int = 0):
    """Mean squared (or expectile) error of ``target - net(x)[:, head]``.

    ``target`` may be ``(B,)`` or ``(B, M)``; in the latter case the loss is
    averaged over the ``M`` targets sharing one prediction.
    """
    pred, tape = net.forward(x, keep=True, dropout_masks=masks)
    p = pred[:, head]
    target = np.asarray(target, dtype=float)
    u = target - (p[:, None] if target.ndim == 2 else p)
    if tau is None:
        loss, du = u * u, 2.0 * u
    else:
        loss, du = expectile_loss(u, tau), expectile_grad(u, tau)
    n = u.size
    dp = -(du.sum(axis=1) if u.ndim == 2 else du) / n
    dy = np.zeros_like(pred)
    dy[:, head] = dp
    grads, _ = net.backward(tape, dy)
    return float(loss.mean()), grads


def q_loss(nets, za, y, masks=None):
    """Squared TD loss summed over a list of Q nets (dual pairs share the target)."""
    total, grads = 0.0, []
    for q in nets:
        lv, g = regression(q, za, y, masks=masks)
        total += lv
        grads.append(g)
    return total, grads


def v_loss(v: nk.DenseNet, z, target, tau: float | None = None):
    """V regression; ``tau=None`` is plain squared error, otherwise the expectile loss."""
    return regression(v, z, target, tau=tau)


# ---------------------------------------------------------------------------
# latent actor


def actor_loss(
    g_net: nk.DenseNet,
    z,
    eps,
    alpha: float,
    mode: str = "shannon",
    g0_net: nk.DenseNet | None = None,
    q_values=None,
    baseline=None,
    action_value: Callable | None = None,
    sigma_bounds=(nk.SIGMA_MIN, nk.SIGMA_MAX),
):
    """Negated soft-actor objective ``-mean[Q(z_a) - alpha * reg(z')]`` with ``z' = mu + sigma * eps``.

    ``reg`` is ``log G`` (``mode="shannon"``) or ``log G - log G_0`` (``"kl"``)
    and is always differentiated pathwise.  The Q term is differentiated
    pathwise when ``action_value(z') -> (q, dq/dz')`` is supplied, by the score
    function with ``baseline`` when sampled ``q_values`` are given, and not at
    all when neither is (teacher forcing: the action latent is the logged one).

    Returns ``(loss, grads, info)`` with ``info`` holding the sample and terms.
    """
    h = gauss_head(g_net, z, keep=True, smin=sigma_bounds[0], smax=sigma_bounds[1])
    rep = nk.reparam_sample(h.dist, eps=eps)
    zp = rep.sample
    B = zp.shape[0]
    dx, dmu_d, dsig_d = nk.gauss_logpdf_grads(h.dist, zp)
    reg = nk.gauss_logpdf(h.dist, zp)
    if mode == "kl":
        if g0_net is None:
            raise nk.ContractViolation("KL mode needs the primitive expert")
        p0 = gauss_head(g0_net, z, smin=sigma_bounds[0], smax=sigma_bounds[1]).dist
        reg = reg - nk.gauss_logpdf(p0, zp)
        dx = dx - nk.gauss_logpdf_grads(p0, zp)[0]
    elif mode != "shannon":
        raise nk.ContractViolation(f"unknown regularizer mode {mode!r}")
    # d reg / d(mu, sigma) through the sample plus the direct density terms
    dreg_mu, dreg_sig = rep.pullback(dx)
    dreg_mu, dreg_sig = dreg_mu + dmu_d, dreg_sig + dsig_d
    dq_mu = np.zeros_like(zp)
    dq_sig = np.zeros_like(zp)
    if action_value is not None:
        q, dq = action_value(zp)
        dq_mu, dq_sig = rep.pullback(dq)
    elif q_values is not None:
        q = np.asarray(q_values, dtype=float)
        adv = q - (0.0 if baseline is None else np.asarray(baseline, dtype=float))
        # score function: z' held fixed, gradient of log G(z'|z) w.r.t. (mu, sigma)
        dq_mu, dq_sig = adv[:, None] * dmu_d, adv[:, None] * dsig_d
    else:
        q = np.zeros(B)
    objective = q - alpha * reg
    dmu = -(dq_mu - alpha * dreg_mu) / B
    dsig = -(dq_sig - alpha * dreg_sig) / B
    grads, _ = gauss_head_backward(g_net, h, dmu, dsig)
    return float(-objective.mean()), grads, {"zp": zp, "reg": reg, "q": q, "head": h}


def soft_v_target(q_tar_values, reg, alpha: float):
    """``Q_tar(z_a) - alpha * reg(z')``: the soft value regression target."""
    return np.asarray(q_tar_values) - alpha * np.asarray(reg)


# ---------------------------------------------------------------------------
# multi-head critic and expert value function


def ftle_losses(mh, z, za, q_targets, v_targets, attribution):
    """Per-head critic losses.

    Q: ``sum_i mean_b (q_targets[b, i] - Q^i(za_b))^2`` on every transition.
    V: ``sum_i mean_b 1{i = attribution_b} (v_targets[b, i] - V^i(z_b))^2``.
    Returns ``(loss_q, loss_v, per_head_q, per_head_v, grads)`` with grads for
    ``trunk``, ``qh`` and ``vh``.
    """
    B = za.shape[0]
    hq, tq = mh.trunk.forward(za, keep=True)
    q, tqh = mh.qh.forward(hq, keep=True)
    hv, tv = mh.trunk.forward(z, keep=True)
    v, tvh = mh.vh.forward(hv, keep=True)
    uq = np.asarray(q_targets) - q
    sel = np.zeros_like(v)
    sel[np.arange(B), np.asarray(attribution)] = 1.0
    uv = (np.asarray(v_targets) - v) * sel
    per_q, per_v = (uq * uq).mean(axis=0), (uv * uv).mean(axis=0)
    g_qh, dhq = mh.qh.backward(tqh, -2.0 * uq / B)
    g_vh, dhv = mh.vh.backward(tvh, -2.0 * uv / B)
    g_t1, _ = mh.trunk.backward(tq, dhq)
    g_t2, _ = mh.trunk.backward(tv, dhv)
    g_trunk = [a + b for a, b in zip(g_t1, g_t2)]
    return float(per_q.sum()), float(per_v.sum()), per_q, per_v, {"trunk": g_trunk, "qh": g_qh, "vh": g_vh}


def dqn_loss(net: nk.DenseNet, z, actions, y):
    """``mean_b (y_b - Lambda(z_b, actions_b))^2``."""
    pred, tape = net.forward(z, keep=True)
    B = pred.shape[0]
    idx = np.asarray(actions)
    u = np.asarray(y) - pred[np.arange(B), idx]
    dy = np.zeros_like(pred)
    dy[np.arange(B), idx] = -2.0 * u / B
    grads, _ = net.backward(tape, dy)
    return float((u * u).mean()), grads


def bc_loss(g_net: nk.DenseNet, z, target_latents, sigma_bounds=(nk.SIGMA_MIN, nk.SIGMA_MAX)):
    """Negative mean log-density of target latents under ``G(.|z)``."""
    h: HeadOut = gauss_head(g_net, z, keep=True, smin=sigma_bounds[0], smax=sigma_bounds[1])
    lp = nk.gauss_logpdf(h.dist, target_latents)
    _, dmu, dsig = nk.gauss_logpdf_grads(h.dist, target_latents)
    B = lp.shape[0]
    grads, _ = gauss_head_backward(g_net, h, -dmu / B, -dsig / B)
    return float(-lp.mean()), grads
