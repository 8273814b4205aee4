"""Experiment orchestration: configuration, the training loop with warm
start, and seed/grid sweeps."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import cdmad as cd
from .data import LongTailSpec, TaskSpec, batch_stream, longtail_counts, synthesize
from .metrics import MetricsRecord, confusion
from .nn import AdamState, EmaParams, adam_step, ema_update, init_mlp, softmax
from .ssl import (AlignState, N_ROTATIONS, distribution_align, fixmatch_loss, harden,
                  remixmatch_loss, sharpen)

log = logging.getLogger(__name__)

ALGOS = ("fixmatch", "remixmatch")
BASE_TAU = 0.95
DEFAULT_SEEDS = (1, 2, 3)
_ALGO_DEFAULTS = {
    "fixmatch": {"B": 32, "lr": 1.5e-3},
    "remixmatch": {"B": 64, "lr": 2e-3},
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """One training run. Every field has a default, so ``{}`` is a valid
    config: FixMatch + refinement with a white probe on gaussian2d, C=10,
    N1=300, M1=600, gamma_l=100, gamma_u=1."""

    task: dict = field(default_factory=dict)
    longtail: dict = field(default_factory=dict)
    test_per_class: int = 500
    algo: str = "fixmatch"
    # {"kind": "none" | "cdmad" | "la", "probe": {...}, "la_mode": ...}
    refine: dict = field(default_factory=lambda: {"kind": "cdmad", "probe": {"kind": "white"}})
    train_refine: bool = True
    test_refine: bool = True
    # None: base-algorithm setting when refine.kind == "none", else the
    # refinement setting (soft labels, no threshold, no alignment, extra Sup)
    hard_labels: Optional[bool] = None
    sharpen: Optional[bool] = None
    tau: Optional[float] = None
    dist_align: Optional[bool] = None
    extra_sup: Optional[bool] = None
    rot_enabled: bool = True
    epochs: int = 50
    iters_per_epoch: int = 100
    warm_epochs: Optional[int] = None
    B: Optional[int] = None
    mu: int = 2
    lr: Optional[float] = None
    T: float = 0.5
    mixup_alpha: float = 0.75
    ema_decay: float = 0.999
    weight_decay: float = 0.04
    hidden: list = field(default_factory=lambda: [64, 64])
    seed: int = 1
    oracle_override: bool = False
    name: str = ""
    out_dir: str = "runs"

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return asdict(self)

    # resolved settings ------------------------------------------------
    @property
    def refine_kind(self):
        return (self.refine or {}).get("kind", "none")

    @property
    def probe_cfg(self):
        return (self.refine or {}).get("probe") or {"kind": "white"}

    def resolved(self):
        """Concrete hyperparameters after filling algorithm defaults."""
        base = self.refine_kind == "none"
        algo_d = _ALGO_DEFAULTS.get(self.algo, {})
        pick = lambda v, if_base, if_refined: (if_base if base else if_refined) if v is None else v
        return {
            "B": algo_d.get("B", 32) if self.B is None else self.B,
            "lr": algo_d.get("lr", 1.5e-3) if self.lr is None else self.lr,
            "warm_epochs": max(0, round(0.2 * self.epochs)) if self.warm_epochs is None else self.warm_epochs,
            "hard_labels": pick(self.hard_labels, self.algo == "fixmatch", False),
            "sharpen": pick(self.sharpen, self.algo == "remixmatch", False),
            "tau": pick(self.tau, BASE_TAU if self.algo == "fixmatch" else 0.0, 0.0),
            "dist_align": pick(self.dist_align, self.algo == "remixmatch", False),
            "extra_sup": pick(self.extra_sup, False, self.algo == "remixmatch"),
        }

    def validate(self):
        r = self.resolved()
        if self.algo not in ALGOS:
            raise ConfigError(f"algo must be one of {ALGOS}")
        if self.refine_kind not in ("none", "cdmad", "la"):
            raise ConfigError(f"unknown refinement {self.refine_kind!r}")
        if self.epochs < 1 or self.iters_per_epoch < 1:
            raise ConfigError("epochs and iters_per_epoch must be >= 1")
        if not 0 <= r["warm_epochs"] <= self.epochs:
            raise ConfigError("warm_epochs must lie in [0, epochs]")
        if r["B"] < 1 or self.mu < 1:
            raise ConfigError("B and mu must be >= 1")
        for k in ("lr",):
            if r[k] <= 0:
                raise ConfigError(f"{k} must be positive")
        if not 0 < self.T <= 1 or self.mixup_alpha <= 0 or self.weight_decay < 0:
            raise ConfigError("T in (0, 1], mixup_alpha > 0 and weight_decay >= 0 required")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must be in [0, 1)")
        TaskSpec(**self.task)
        LongTailSpec(**self.longtail)
        return self

    def config_id(self):
        d = self.to_dict()
        for k in ("seed", "out_dir", "name"):
            d.pop(k)
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:10]


def deep_merge(base, delta):
    out = copy.deepcopy(base)
    for k, v in delta.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunResult:
    config: dict
    config_id: str
    seed: int
    final: dict
    epoch_metrics: list = field(default_factory=list)
    pseudo_trace: list = field(default_factory=list)  # per-epoch confusion, eval-only
    bias_trace: list = field(default_factory=list)  # per-epoch softmax(g_I)
    phase_trace: list = field(default_factory=list)  # per-epoch pseudo-label rule
    probe: str = ""
    seconds: float = 0.0
    error: str = ""
    # EMA model, attached on request; never serialised
    model: object = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {f.name: copy.deepcopy(getattr(self, f.name)) for f in fields(self) if f.name != "model"}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _ema_model(model, ema):
    m = model.copy()
    m.set_params(ema.shadow)
    return m


def _rule(kind, probe, prior):
    if kind == "cdmad":
        return cd.RefinementRule("cdmad", probe=probe)
    if kind == "la":
        return cd.RefinementRule("la", prior=prior)
    return cd.RefinementRule("none")


def build_dataset(cfg: RunConfig):
    task = TaskSpec(**cfg.task)
    lt = LongTailSpec(**{"C": task.C, **cfg.longtail})
    ds = synthesize(task, longtail_counts(lt, "labeled"), longtail_counts(lt, "unlabeled"),
                    cfg.test_per_class, seed=cfg.seed)
    return task, lt, ds


def run_experiment(config, keep_model=False) -> RunResult:
    """Train one model and evaluate it on the balanced test set.

    Per iteration: draw a batch; before ``warm_epochs`` use the plain base
    algorithm, afterwards the configured variant (by default: measure the
    probe bias on the live weights, refine the soft pseudo-labels, apply the
    refined loss); Adam step; EMA update. Each epoch ends with an evaluation
    of the EMA weights under the test-time rule. ``keep_model`` attaches
    the final EMA model to the result.
    """
    cfg = config if isinstance(config, RunConfig) else RunConfig.from_dict(config)
    cfg.validate()
    r = cfg.resolved()
    t0 = time.perf_counter()
    task, lt, ds = build_dataset(cfg)
    hdr, C = ds.header, task.C
    B, mu = r["B"], cfg.mu
    family = task.family

    use_rot = cfg.algo == "remixmatch" and family == "icon8x8" and cfg.rot_enabled
    model = init_mlp(task.d, C, tuple(cfg.hidden), N_ROTATIONS if use_rot else 0,
                     rng=np.random.default_rng([cfg.seed, 501]))
    adam = AdamState(lr=r["lr"], weight_decay=cfg.weight_decay)
    ema = EmaParams.from_params(model.params(), cfg.ema_decay)

    probe = cd.probe_from_config(cfg.probe_cfg, hdr)
    kind = cfg.refine_kind
    prior = None
    if kind == "la":
        mode = cfg.refine.get("la_mode", "labeled")
        prior = cd.la_prior(mode, ds, oracle_override=cfg.oracle_override,
                            gamma_u_known=lt.gamma_u_known)
    P_l = ds.labeled_distribution()
    align = AlignState(C)
    U_all = ds.unlabeled().U
    hidden_u = ds.eval_only_unlabeled_labels()

    base = {"hard_labels": cfg.algo == "fixmatch", "sharpen": cfg.algo == "remixmatch",
            "tau": BASE_TAU if cfg.algo == "fixmatch" else 0.0,
            "dist_align": cfg.algo == "remixmatch", "extra_sup": False, "refine": False}
    main = {k: r[k] for k in ("hard_labels", "sharpen", "tau", "dist_align", "extra_sup")}
    main["refine"] = cfg.train_refine and kind != "none"
    canonical = (kind == "cdmad" and main["refine"] and not main["hard_labels"]
                 and not main["sharpen"] and main["tau"] == 0 and not main["dist_align"]
                 and main["extra_sup"] == (cfg.algo == "remixmatch"))

    stream = batch_stream(ds, B, mu, cfg.seed)
    test_rule = _rule(kind if cfg.test_refine else "none", probe, prior)
    res = RunResult(cfg.to_dict(), cfg.config_id(), cfg.seed, {}, probe=probe.probe_id)
    step = 0
    for epoch in range(cfg.epochs):
        warm = epoch < r["warm_epochs"]
        s = base if warm else main
        res.phase_trace.append("base" if warm else ("refined" if s["refine"] else "unrefined"))
        for _ in range(cfg.iters_per_epoch):
            bp = next(stream)
            rng = np.random.default_rng([cfg.seed, 31, step])
            if not warm and canonical:
                bias = cd.measure_bias(model, probe)
                rep, grads = cd.cdmad_step_loss(cfg.algo, bp.MX, bp.MU, model, probe, rng,
                                                family, cfg.rot_enabled, bias=bias)
            else:
                shift = _rule(kind, probe, prior).shift(model) if s["refine"] else 0.0
                q = softmax(model.logits(bp.MU.u_weak) - shift)
                if cfg.algo == "fixmatch":
                    targets = harden(q) if s["hard_labels"] else q
                    if s["sharpen"]:
                        targets = sharpen(targets, cfg.T)
                    rep, grads = fixmatch_loss(bp.MX, bp.MU, targets, s["tau"], model, q_conf=q)
                else:
                    if s["dist_align"]:
                        q = distribution_align(q, P_l, align)
                    if s["sharpen"]:
                        q = sharpen(q, cfg.T)
                    if s["hard_labels"]:
                        q = harden(q)
                    rep, grads = remixmatch_loss(bp.MX, bp.MU, q, model, cfg.rot_enabled, rng,
                                                 family, cfg.mixup_alpha, extra_sup=s["extra_sup"])
            adam_step(adam, model.params(), grads)
            ema_update(ema, model.params())
            step += 1

        # evaluation (EMA weights)
        em = _ema_model(model, ema)
        preds = cd.refine_test_predictions(em, ds.X_test, test_rule)
        rec = MetricsRecord.from_predictions(preds, ds.y_test, C, seed=cfg.seed, epoch=epoch,
                                             algo=cfg.algo, refinement=kind, probe=probe.probe_id)
        res.epoch_metrics.append({k: getattr(rec, k) for k in ("epoch", "bacc", "gm", "ber")}
                                 | {"group_acc": list(rec.group_acc)})
        res.bias_trace.append(cd.measure_bias(em, probe).probs.tolist())
        # pseudo-label quality on the raw unlabeled pool (diagnostic only)
        shift = _rule(kind, probe, prior).shift(model) if s["refine"] else 0.0
        pl = np.argmax(model.logits(U_all) - shift, axis=1)
        res.pseudo_trace.append(confusion(pl, hidden_u, C).tolist())
        log.debug("epoch %d bacc %.4f", epoch, rec.bacc)

    res.final = rec.to_dict()
    if keep_model:
        res.model = em
    res.seconds = time.perf_counter() - t0
    return res


# ------------------------------------------------------------------- sweeps

def _run_cell(cfg_dict):
    try:
        return run_experiment(RunConfig.from_dict(cfg_dict))
    except Exception as exc:  # a failed cell must not stop the sweep
        log.exception("sweep cell failed")
        return RunResult(cfg_dict, "", int(cfg_dict.get("seed", 0)), {}, error=repr(exc))


def expand_grid(grid, base: RunConfig):
    """Cell configs (as dicts) for every (delta, seed) pair.

    ``grid`` is a list of deltas or ``{"cells": [...], "seeds": [...]}``.
    Without explicit seeds each cell runs with the base seed.
    """
    if isinstance(grid, dict):
        cells, seeds = grid.get("cells", []), grid.get("seeds")
    else:
        cells, seeds = grid, None
    seeds = [base.seed] if seeds is None else list(seeds)
    out = []
    for delta in cells:
        merged = deep_merge(base.to_dict(), delta)
        for s in seeds:
            out.append({**merged, "seed": int(s)})
    return out


def thread_cap():
    try:
        return max(1, int(os.environ.get("CDMAD_LAB_THREADS", "1")))
    except ValueError:
        return 1


def sweep(grid, base: RunConfig, workers=None):
    """Run every cell of ``grid``; returns ``(table, results)`` where ``table``
    aggregates mean and standard error per configuration."""
    cells = expand_grid(grid, base)
    workers = thread_cap() if workers is None else workers
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    return aggregate(results), results


def _mean_se(values):
    v = np.asarray([x for x in values if x == x], dtype=np.float64)  # drop NaN
    if len(v) == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0
    return float(v.mean()), se


def aggregate(results):
    """One row per config id: mean and standard error over seeds."""
    groups = {}
    for r in results:
        if r.error:
            continue
        groups.setdefault(r.config_id, []).append(r)
    table = []
    for cid in sorted(groups):
        rs = sorted(groups[cid], key=lambda r: r.seed)
        cfg = rs[0].config
        row = {"config_id": cid, "name": cfg.get("name", ""), "algo": cfg["algo"],
               "refine": refine_label(cfg), "probe": rs[0].probe,
               "seeds": [r.seed for r in rs]}
        lt = {**LongTailSpec().__dict__, **cfg.get("longtail", {})}
        row["gamma_l"], row["gamma_u"] = lt["gamma_l"], lt["gamma_u"]
        for key in ("bacc", "gm", "ber"):
            row[f"{key}_mean"], row[f"{key}_se"] = _mean_se([r.final[key] for r in rs])
        for i, g in enumerate(("many", "medium", "few")):
            row[f"acc_{g}_mean"], row[f"acc_{g}_se"] = _mean_se([r.final["group_acc"][i] for r in rs])
        table.append(row)
    errors = [{"config": r.config, "error": r.error} for r in results if r.error]
    return {"rows": table, "errors": errors}


def refine_label(cfg_dict):
    ref = cfg_dict.get("refine") or {}
    kind = ref.get("kind", "none")
    if kind == "la":
        kind = f"la-{ref.get('la_mode', 'labeled')}"
    tags = []
    if not cfg_dict.get("train_refine", True):
        tags.append("notrain")
    if not cfg_dict.get("test_refine", True):
        tags.append("notest")
    return kind + ("[" + ",".join(tags) + "]" if tags else "")
