"""Classifier-bias measurement with a pattern-free probe input and the
refinements built on it.

The classifier's bias is read off as the logits it produces on a probe
input ``I`` that carries no class features (a solid-colour image, or a
constant vector outside the data range). Subtracting those logits from the
logits of real inputs refines both the pseudo-labels used for training and
the final test predictions. Logit adjustment (subtracting ``log pi`` for a
fixed class prior ``pi``) is provided as the baseline rule.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .nn import softmax
from .ssl import fixmatch_loss, remixmatch_loss

SOLID_LEVELS = {
    "white": 1.0,
    "black": 0.0,
    "gray": 0.5,
    # single-channel (luminance) analogs of pure RGB colours
    "red": 0.299,
    "green": 0.587,
    "blue": 0.114,
}
RANDOM_KINDS = ("uniform", "normal", "bernoulli")
PROBE_KINDS = (*SOLID_LEVELS, *RANDOM_KINDS, "nonimage")


@dataclass
class ProbeInput:
    kind: str
    vector: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def probe_id(self):
        extra = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({extra})" if extra else self.kind

    def to_config(self):
        return {"kind": self.kind, **self.params}


def nonimage_value(max_normalized):
    """Smallest integer strictly above every normalised feature value,
    e.g. channel maxima (2.06, 2.12, 2.11) give 3."""
    return math.floor(float(np.max(max_normalized))) + 1.0


def make_probe(kind, header, seed=0, offset=None):
    """Build a probe in the dataset's normalised coordinates.

    Solid probes map a raw constant through the normalisation. Random probes
    draw raw entries i.i.d. (uniform on [0, 1], Bernoulli(0.5), or
    N(0.5, 0.25^2)) from a fixed seed. The non-image probe is a constant
    strictly above the largest normalised training value; ``offset`` places
    it at ``max_normalized + offset`` instead.
    """
    d = header.d
    params = {}
    if kind in SOLID_LEVELS:
        vec = header.normalize(np.full(d, SOLID_LEVELS[kind]))
    elif kind in RANDOM_KINDS:
        rng = np.random.default_rng([int(seed), 777])
        if kind == "uniform":
            raw = rng.uniform(0.0, 1.0, size=d)
        elif kind == "bernoulli":
            raw = (rng.random(d) < 0.5).astype(np.float64)
        else:
            raw = rng.normal(0.5, 0.25, size=d)
        vec = header.normalize(raw)
        params["seed"] = int(seed)
    elif kind == "nonimage":
        if offset is None:
            value = nonimage_value(header.max_normalized)
        else:
            value = header.max_normalized + float(offset)
            params["offset"] = float(offset)
        vec = np.full(d, value)
    else:
        raise ValueError(f"unknown probe kind {kind!r}; expected one of {PROBE_KINDS}")
    return ProbeInput(kind, np.asarray(vec, dtype=np.float64).reshape(-1), params)


def probe_from_config(cfg, header):
    cfg = dict(cfg or {"kind": "white"})
    kind = cfg.pop("kind", "white")
    return make_probe(kind, header, seed=cfg.get("seed", 0), offset=cfg.get("offset"))


@dataclass
class BiasLogits:
    g_I: np.ndarray
    probe_id: str = ""
    snapshot: str = ""

    @property
    def probs(self):
        return softmax(self.g_I)[0]


def measure_bias(model, probe, snapshot=""):
    """Logits of ``model`` on the raw (un-augmented) probe vector."""
    vec = probe.vector if isinstance(probe, ProbeInput) else np.asarray(probe)
    g = np.asarray(model.logits(vec[None, :]))[0]
    pid = probe.probe_id if isinstance(probe, ProbeInput) else "custom"
    return BiasLogits(g.copy(), pid, snapshot)


def _bias_vector(g_I):
    return np.asarray(g_I.g_I if isinstance(g_I, BiasLogits) else g_I, dtype=np.float64)


def refine_logits(g_u, g_I):
    g_u = np.atleast_2d(np.asarray(g_u, dtype=np.float64))
    b = _bias_vector(g_I)
    if b.shape != (g_u.shape[1],):
        raise ValueError(f"bias length {b.shape} does not match {g_u.shape[1]} classes")
    return g_u - b[None, :]


def refine_pseudo_label(model, weak_views, probe, bias=None):
    """Soft refined pseudo-labels ``softmax(g(weak) - g(I))``.

    ``bias`` lets a caller reuse one measurement for the whole batch.
    """
    if bias is None:
        bias = measure_bias(model, probe)
    return softmax(refine_logits(model.logits(weak_views), bias))


def cdmad_step_loss(algo, MX, MU, model, probe, rng=None, family="gaussian2d",
                    rot_enabled=True, bias=None, lam=None, teacher=None):
    """Training loss with refined soft pseudo-labels.

    fixmatch: FixMatch loss with the refined targets and no threshold.
    remixmatch: ReMixMatch loss with the refined targets (no alignment, no
    sharpening) plus a supervised term on the weak labeled views, reported
    as ``sup``.

    Targets carry no gradient. ``teacher`` (default: ``model``) is the
    snapshot that produces them.
    """
    q_star = refine_pseudo_label(teacher or model, MU.u_weak, probe, bias)
    if algo == "fixmatch":
        return fixmatch_loss(MX, MU, q_star, 0.0, model)
    if algo == "remixmatch":
        rng = np.random.default_rng(rng)
        return remixmatch_loss(MX, MU, q_star, model, rot_enabled, rng, family,
                               extra_sup=True, lam=lam)
    raise ValueError(f"unknown algorithm {algo!r}")


@dataclass
class RefinementRule:
    variant: str = "none"  # none | cdmad | la
    probe: Optional[ProbeInput] = None
    prior: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in ("none", "cdmad", "la"):
            raise ValueError(f"unknown refinement {self.variant!r}")
        if self.variant == "cdmad" and self.probe is None:
            raise ValueError("cdmad refinement needs a probe")
        if self.variant == "la":
            if self.prior is None:
                raise ValueError("logit adjustment needs a prior")
            pi = np.asarray(self.prior, dtype=np.float64)
            if np.any(pi <= 0) or abs(pi.sum() - 1) > 1e-6:
                raise ValueError("prior must be a strictly positive distribution")
            self.prior = pi

    def shift(self, model):
        """Vector subtracted from the logits under this rule."""
        if self.variant == "cdmad":
            return measure_bias(model, self.probe).g_I
        if self.variant == "la":
            return np.log(self.prior)
        return np.zeros(model.n_classes)


def refine_test_predictions(model_ema, X_test, rule: RefinementRule):
    """Argmax of the (refined) logits; ties go to the lowest class index."""
    g = np.atleast_2d(model_ema.logits(X_test))
    return np.argmax(g - rule.shift(model_ema)[None, :], axis=1)


class GammaUnknown(RuntimeError):
    pass


def la_prior(mode, dataset, oracle_override=False, gamma_u_known=False):
    """Empirical class frequencies used by logit adjustment.

    ``labeled``: the labeled set only. ``full_training``: labeled plus
    unlabeled; it needs the unlabeled class counts and so is refused unless
    they are declared known or ``oracle_override`` is set.
    """
    C = dataset.header.C
    counts = np.bincount(dataset.y, minlength=C).astype(np.float64)
    if mode == "full_training":
        if not (gamma_u_known or oracle_override):
            raise GammaUnknown("unlabeled class distribution is unknown")
        counts = counts + np.asarray(dataset.header.unlabeled_counts, dtype=np.float64)
    elif mode != "labeled":
        raise ValueError(f"unknown prior mode {mode!r}")
    return counts / counts.sum()
