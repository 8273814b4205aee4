"""Dense MLP core: softmax / cross-entropy, forward and backward passes,
Adam with decoupled weight decay, EMA shadow weights and a central
finite-difference gradient checker.

Everything is float64 numpy. A "Matrix" is simply a 2-D ``np.ndarray``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

LOG_FLOOR = 1e-12


class InvalidInput(ValueError):
    """Raised on non-finite or badly shaped numeric input."""


def _as_matrix(a, name="input"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise InvalidInput(f"{name} must be 2-D, got shape {a.shape}")
    return a


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    g = _as_matrix(logits, "logits")
    if not np.all(np.isfinite(g)):
        raise InvalidInput("softmax got non-finite logits")
    z = g - g.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    g = _as_matrix(logits, "logits")
    z = g - g.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(pred_probs, target_probs):
    """Mean over rows of ``-sum_c target * log(pred + floor)``.

    Returns ``(loss, dlogits)`` where ``dlogits = (pred - target) / batch`` is
    the gradient with respect to the logits that produced ``pred_probs``
    through a softmax.
    """
    p = _as_matrix(pred_probs, "pred_probs")
    t = _as_matrix(target_probs, "target_probs")
    if p.shape != t.shape:
        raise InvalidInput(f"shape mismatch {p.shape} vs {t.shape}")
    n = p.shape[0]
    loss = float(-(t * np.log(np.maximum(p, 0.0) + LOG_FLOOR)).sum() / n)
    return loss, (p - t) / n


def weighted_xent(logits, targets, weights=None, denom=None):
    """Cross-entropy of softmax(logits) against soft targets.

    ``loss = sum_b w_b * H(softmax(logits_b), t_b) / denom``. Works from the
    log-softmax directly so saturated rows stay finite. Returns the loss and
    the gradient with respect to ``logits``.
    """
    g = _as_matrix(logits, "logits")
    t = _as_matrix(targets, "targets")
    if g.shape != t.shape:
        raise InvalidInput(f"shape mismatch {g.shape} vs {t.shape}")
    n = g.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    denom = float(n if denom is None else denom)
    if n == 0:
        return 0.0, np.zeros_like(g)
    lsm = log_softmax(g)
    per_row = -(t * lsm).sum(axis=1)
    loss = float((w * per_row).sum() / denom)
    p = np.exp(lsm)
    # d/dg of H(softmax(g), t) is p * sum(t) - t; sum(t) == 1 for valid targets
    grad = (p * t.sum(axis=1, keepdims=True) - t) * (w / denom)[:, None]
    return loss, grad


@dataclass
class Layer:
    W: np.ndarray  # (fan_in, fan_out)
    b: np.ndarray  # (fan_out,)
    activation: str = "relu"

    @property
    def fan_in(self):
        return self.W.shape[0]

    @property
    def fan_out(self):
        return self.W.shape[1]


@dataclass
class MlpModel:
    """Stack of affine layers; the last layer emits the C class logits.

    ``rotation_head`` (optional) reads the last hidden representation and
    predicts one of ``n_rotations`` rotation degrees. It shares the whole
    trunk with the classifier.
    """

    layers: list
    rotation_head: Optional[Layer] = None

    def __post_init__(self):
        if not self.layers:
            raise InvalidInput("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise InvalidInput("layer dimensions do not chain")
        if self.rotation_head is not None:
            hidden = self.layers[-1].fan_in
            if self.rotation_head.fan_in != hidden:
                raise InvalidInput("rotation head must read the last hidden layer")

    @property
    def n_in(self):
        return self.layers[0].fan_in

    @property
    def n_classes(self):
        return self.layers[-1].fan_out

    def params(self):
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        if self.rotation_head is not None:
            out += [self.rotation_head.W, self.rotation_head.b]
        return out

    def set_params(self, values):
        values = list(values)
        slots = self.params()
        if len(values) != len(slots):
            raise InvalidInput("parameter count mismatch")
        for dst, src in zip(slots, values):
            if dst.shape != np.shape(src):
                raise InvalidInput("parameter shape mismatch")
            dst[...] = src

    def copy(self):
        layers = [Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers]
        rot = None
        if self.rotation_head is not None:
            r = self.rotation_head
            rot = Layer(r.W.copy(), r.b.copy(), r.activation)
        return MlpModel(layers, rot)

    def n_params(self):
        return int(sum(p.size for p in self.params()))

    def logits(self, x):
        return mlp_forward(self, x)[0]


def init_mlp(n_in, n_classes, hidden=(64, 64), n_rotations=0, rng=None):
    """He-initialised relu MLP; biases start at zero."""
    rng = np.random.default_rng(rng)
    dims = [n_in, *hidden, n_classes]
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        act = "identity" if i == len(dims) - 2 else "relu"
        W = rng.normal(0.0, np.sqrt(2.0 / a), size=(a, b))
        layers.append(Layer(W, np.zeros(b), act))
    rot = None
    if n_rotations:
        h = dims[-2]
        rot = Layer(rng.normal(0.0, np.sqrt(1.0 / h), size=(h, n_rotations)),
                    np.zeros(n_rotations), "identity")
    return MlpModel(layers, rot)


@dataclass
class ForwardCache:
    inputs: list  # input to each layer
    preacts: list  # pre-activation of each layer
    model_id: int
    shapes: tuple
    rot_logits: Optional[np.ndarray] = None


def _shape_sig(model):
    return tuple(p.shape for p in model.params())


def mlp_forward(model, x):
    """Returns ``(logits, cache)``; the cache also holds rotation logits
    when the model has a rotation head."""
    h = _as_matrix(x, "x")
    if h.shape[1] != model.n_in:
        raise InvalidInput(f"expected {model.n_in} input features, got {h.shape[1]}")
    inputs, preacts = [], []
    for layer in model.layers:
        inputs.append(h)
        z = h @ layer.W + layer.b
        preacts.append(z)
        h = np.maximum(z, 0.0) if layer.activation == "relu" else z
    cache = ForwardCache(inputs, preacts, id(model), _shape_sig(model))
    if model.rotation_head is not None:
        r = model.rotation_head
        cache.rot_logits = inputs[-1] @ r.W + r.b
    return h, cache


def mlp_backward(model, cache, dlogits, drot=None):
    """Gradients for ``model.params()`` (same order) given upstream
    gradients on the class logits and, optionally, on the rotation logits."""
    if cache.model_id != id(model) or cache.shapes != _shape_sig(model):
        raise InvalidInput("cache does not belong to this model")
    delta = _as_matrix(dlogits, "dlogits")
    if delta.shape != cache.preacts[-1].shape:
        raise InvalidInput("upstream gradient shape does not match cache")
    grads = [None] * (2 * len(model.layers))
    rot_grads = []
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            delta = delta * (cache.preacts[k] > 0)
        grads[2 * k] = cache.inputs[k].T @ delta
        grads[2 * k + 1] = delta.sum(axis=0)
        if k == 0:
            break
        delta = delta @ layer.W.T
        if k == len(model.layers) - 1 and model.rotation_head is not None:
            r = model.rotation_head
            if drot is None:
                dr = np.zeros((delta.shape[0], r.fan_out))
            else:
                dr = _as_matrix(drot, "drot")
            rot_grads = [cache.inputs[k].T @ dr, dr.sum(axis=0)]
            delta = delta + dr @ r.W.T
    if model.rotation_head is not None and not rot_grads:
        # single-layer trunk: the rotation head reads the raw input
        r = model.rotation_head
        dr = np.zeros((delta.shape[0], r.fan_out)) if drot is None else _as_matrix(drot)
        rot_grads = [cache.inputs[0].T @ dr, dr.sum(axis=0)]
    return grads + rot_grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state, params, grads):
    """In-place Adam update of ``params``; returns ``(params, state)``.

    Decoupled weight decay ``p *= 1 - lr * weight_decay`` is applied before
    the moment update.
    """
    if len(params) != len(grads):
        raise InvalidInput("params / grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise InvalidInput("parameter / gradient shape mismatch")
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class EmaParams:
    shadow: list
    decay: float = 0.999

    @classmethod
    def from_params(cls, params, decay=0.999):
        return cls([p.copy() for p in params], decay)


def ema_update(ema, params):
    if len(ema.shadow) != len(params):
        raise InvalidInput("EMA / params length mismatch")
    d = ema.decay
    for s, p in zip(ema.shadow, params):
        if s.shape != p.shape:
            raise InvalidInput("EMA shape mismatch")
        s *= d
        s += (1.0 - d) * p
    return ema


def numeric_grads(loss_fn: Callable[[], float], params: Sequence[np.ndarray], eps=1e-5):
    """Central differences of ``loss_fn`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn()
            flat[i] = old - eps
            down = loss_fn()
            flat[i] = old
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


REL_ERR_FLOOR = 1e-6


def max_rel_error(analytic, numeric, floor=REL_ERR_FLOOR):
    """``max |a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero entries from dominating: central differences
    with eps 1e-5 carry ~1e-11 of rounding noise, so entries below ``floor``
    are effectively compared on an absolute scale.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a, n = np.asarray(a), np.asarray(n)
        den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / den)))
    return worst


def grad_check(model, x=None, targets=None, eps=1e-5, loss=None):
    """Max relative error between analytic and central-difference gradients.

    By default checks the mean cross-entropy of ``softmax(model(x))`` against
    ``targets``. Pass ``loss`` (a callable ``model -> (value, grads)``) to
    check any other loss built on the model.
    """
    if loss is None:
        def loss(m):
            logits, cache = mlp_forward(m, x)
            value, dlog = weighted_xent(logits, targets)
            return value, mlp_backward(m, cache, dlog)
    value, analytic = loss(model)
    numeric = numeric_grads(lambda: loss(model)[0], model.params(), eps)
    # rounding noise of the central difference grows with |loss|
    return max_rel_error(analytic, numeric, REL_ERR_FLOOR * max(1.0, abs(value)))
