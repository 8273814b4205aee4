"""FixMatch-style and ReMixMatch-style losses and pseudo-label processing.

Every loss returns ``(LossReport, grads)`` with ``grads`` aligned to
``model.params()``. All inputs that need gradients are pushed through one
concatenated forward pass; targets (pseudo-labels) are plain arrays, so no
gradient can reach them.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .data import ICON_SIDE, UnsupportedFamily, mixup
from .nn import mlp_backward, mlp_forward, softmax, weighted_xent

N_ROTATIONS = 4
ALIGN_WINDOW = 128


@dataclass
class LossReport:
    total: float
    components: dict
    mask_rate: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate outside [0, 1]")


def pseudo_label(model, weak_views):
    return softmax(model.logits(weak_views))


def harden(q):
    """One-hot at the argmax; ``np.argmax`` already picks the lowest index on ties."""
    q = np.atleast_2d(q)
    out = np.zeros_like(q, dtype=np.float64)
    out[np.arange(len(q)), np.argmax(q, axis=1)] = 1.0
    return out


def confidence_mask(q, tau):
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return np.atleast_2d(q).max(axis=1) >= tau


def _normalize(a):
    return a / a.sum(axis=1, keepdims=True)


@dataclass
class AlignState:
    C: int
    window: int = ALIGN_WINDOW
    history: deque = field(default=None)

    def __post_init__(self):
        if self.history is None:
            self.history = deque(maxlen=self.window)

    @property
    def running_mean(self):
        if not self.history:
            return np.full(self.C, 1.0 / self.C)
        return np.mean(np.stack(self.history), axis=0)

    def push(self, q):
        self.history.append(np.atleast_2d(q).mean(axis=0))


def distribution_align(q, P_l, state: AlignState):
    """``Normalize(q * P_l / running_mean)``, then push the batch mean of the
    *unaligned* q into the window."""
    q = np.atleast_2d(q)
    qbar = np.maximum(state.running_mean, 1e-8)
    out = _normalize(q * np.asarray(P_l)[None, :] / qbar[None, :])
    state.push(q)
    return out


def sharpen(q, T=0.5):
    q = np.atleast_2d(q)
    if T <= 0:
        raise ValueError("temperature must be positive")
    # power in log space so tiny probabilities do not underflow to 0/0
    lq = np.log(np.maximum(q, 1e-300)) / T
    lq -= lq.max(axis=1, keepdims=True)
    return _normalize(np.exp(lq))


def rotation_views(u_batch, family="icon8x8", degrees=None, rng=None):
    """Rotate each icon by a multiple of 90 degrees.

    ``degrees`` gives the quarter-turn count per sample; by default each
    sample gets a uniformly random one. Returns ``(rotated, degrees)``.
    """
    if family != "icon8x8":
        raise UnsupportedFamily(f"rotation needs icon8x8, got {family}")
    u = np.atleast_2d(u_batch)
    if degrees is None:
        degrees = np.random.default_rng(rng).integers(0, N_ROTATIONS, size=len(u))
    degrees = np.broadcast_to(np.asarray(degrees, dtype=int), (len(u),))
    imgs = u.reshape(-1, ICON_SIDE, ICON_SIDE)
    out = np.stack([np.rot90(img, k) for img, k in zip(imgs, degrees)])
    return out.reshape(len(u), -1), np.array(degrees)


def _run(model, segments):
    """Forward the concatenation of ``segments`` (list of input matrices)."""
    X = np.concatenate(segments, axis=0)
    logits, cache = mlp_forward(model, X)
    bounds = np.cumsum([0] + [len(s) for s in segments])
    return logits, cache, bounds


def _backward(model, cache, dlogits, drot=None):
    return mlp_backward(model, cache, dlogits, drot)


def fixmatch_loss(MX, MU, q_targets, tau, model, q_conf=None):
    """``Sup + Con``.

    Sup: mean cross-entropy on the weak labeled views. Con: cross-entropy of
    the strong unlabeled views against ``q_targets``, summed over samples
    whose confidence ``max(q_conf)`` reaches ``tau`` and divided by mu*B.
    ``q_conf`` defaults to ``q_targets`` (pass the soft q when the targets
    have been hardened).
    """
    q_targets = np.atleast_2d(q_targets)
    if len(q_targets) != len(MU.u_strong):
        raise ValueError("one pseudo-label per unlabeled sample required")
    conf = q_targets if q_conf is None else np.atleast_2d(q_conf)
    mask = confidence_mask(conf, tau).astype(np.float64)
    logits, cache, bd = _run(model, [MX.x_weak, MU.u_strong])
    sup, g_sup = weighted_xent(logits[bd[0]:bd[1]], MX.p)
    con, g_con = weighted_xent(logits[bd[1]:bd[2]], q_targets, mask, denom=len(q_targets))
    grads = _backward(model, cache, np.concatenate([g_sup, g_con]))
    report = LossReport(sup + con, {"sup": sup, "con": con}, float(mask.mean()) if len(mask) else 0.0)
    return report, grads


def remixmatch_loss(MX, MU, q_targets, model, rot_enabled, rng, family="gaussian2d",
                    alpha=0.75, extra_sup=False, lam=None):
    """``Mix + Con + Rot`` (+ ``Sup`` on weak labeled views when ``extra_sup``).

    Mix: the strong labeled and unlabeled views (with one-hot labels and
    ``q_targets``) are pooled, each row is mixed with a row of a shuffled
    copy of the pool, and the cross-entropy is averaged separately over the
    B mixed labeled rows and the mu*B mixed unlabeled rows. Con: unmasked
    cross-entropy of the strong unlabeled views against ``q_targets``. Rot:
    four-way rotation prediction on the raw unlabeled inputs, only for
    icon8x8 and only when ``rot_enabled``.
    """
    q_targets = np.atleast_2d(q_targets)
    B, nU = len(MX.x_strong), len(MU.u_strong)
    if len(q_targets) != nU:
        raise ValueError("one pseudo-label per unlabeled sample required")
    pool_x = np.concatenate([MX.x_strong, MU.u_strong])
    pool_t = np.concatenate([MX.p, q_targets])
    perm = rng.permutation(len(pool_x))
    mx, mt = mixup((pool_x, pool_t), (pool_x[perm], pool_t[perm]), alpha, rng, lam=lam)

    use_rot = rot_enabled and family == "icon8x8" and model.rotation_head is not None
    segments = [mx, MU.u_strong]
    if extra_sup:
        segments.append(MX.x_weak)
    if use_rot:
        rot_x, rot_r = rotation_views(MU.u, family, rng=rng)
        segments.append(rot_x)
    logits, cache, bd = _run(model, segments)
    mix_l, g_mix_l = weighted_xent(logits[:B], mt[:B])
    mix_u, g_mix_u = weighted_xent(logits[B:bd[1]], mt[B:])
    con, g_con = weighted_xent(logits[bd[1]:bd[2]], q_targets)
    parts = [g_mix_l, g_mix_u, g_con]
    comps = {"mix": mix_l + mix_u, "con": con}
    seg = 3
    if extra_sup:
        sup, g_sup = weighted_xent(logits[bd[seg - 1]:bd[seg]], MX.p)
        parts.append(g_sup)
        comps["sup"] = sup
        seg += 1
    drot = None
    if use_rot:
        parts.append(np.zeros((len(rot_x), logits.shape[1])))
        lo = bd[seg - 1]
        rot_t = np.eye(N_ROTATIONS)[rot_r]
        rot, g_rot = weighted_xent(cache.rot_logits[lo:], rot_t)
        drot = np.zeros_like(cache.rot_logits)
        drot[lo:] = g_rot
        comps["rot"] = rot
    else:
        comps["rot"] = 0.0
    grads = _backward(model, cache, np.concatenate(parts), drot)
    return LossReport(float(sum(comps.values())), comps, 1.0), grads
