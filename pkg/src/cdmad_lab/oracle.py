"""Brute-force Bayes classifiers for gaussian2d tasks.

``balanced`` decides ``argmax_y p(x | y)`` (minimises the balanced error);
``prior_weighted`` decides ``argmax_y P(y) p(x | y)`` (minimises the plain
error under the given prior). Both are evaluated by direct density
evaluation, on a grid or on samples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TaskSpec, UnsupportedFamily
from .metrics import ber, confusion


@dataclass
class AnalyticPosterior:
    """Stand-in "model" whose logits are ``log P(y) + log p(x | y)``, i.e.
    the exact class posterior up to a per-row constant. Inputs are raw."""

    task: TaskSpec
    priors: np.ndarray

    def logits(self, x):
        return np.log(np.asarray(self.priors))[None, :] + self.task.log_likelihood(x)

    @property
    def n_classes(self):
        return self.task.C


@dataclass
class OracleClassifier:
    task: TaskSpec
    priors: np.ndarray
    target: str  # balanced | prior_weighted
    grid_x: np.ndarray = None
    grid_y: np.ndarray = None
    decisions: np.ndarray = None  # (len(grid_y), len(grid_x))

    def scores(self, x):
        ll = self.task.log_likelihood(x)
        if self.target == "prior_weighted":
            ll = ll + np.log(np.asarray(self.priors))[None, :]
        return ll

    def predict(self, x):
        return np.argmax(self.scores(x), axis=1)

    def grid_points(self):
        gx, gy = np.meshgrid(self.grid_x, self.grid_y)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


def make_grid(task, n=100, margin=3.0):
    """``n x n`` grid spanning every class mean +- ``margin`` standard deviations."""
    means = task.class_means()
    sd = np.sqrt(np.max([np.diag(c) for c in task.class_covs()]))
    lo, hi = means.min(axis=0) - margin * sd, means.max(axis=0) + margin * sd
    return np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)


def balanced_sample(task, n_total, seed):
    per = int(np.ceil(n_total / task.C))
    rng = np.random.default_rng([int(seed), 4242])
    X = np.concatenate([task.sample(c, per, rng) for c in range(task.C)])
    y = np.repeat(np.arange(task.C), per)
    return X, y


def bayes_oracle(task, priors, target="balanced", grid=None, n_eval=100_000, seed=0):
    """Returns ``(OracleClassifier, ber)``; the BER is a Monte Carlo estimate
    on a balanced i.i.d. sample of ``n_eval`` points."""
    if task.family != "gaussian2d":
        raise UnsupportedFamily("the Bayes oracle needs closed-form densities")
    if target not in ("balanced", "prior_weighted"):
        raise ValueError(f"unknown oracle target {target!r}")
    gx, gy = make_grid(task) if grid is None else grid
    oracle = OracleClassifier(task, np.asarray(priors, dtype=np.float64), target,
                              np.asarray(gx), np.asarray(gy))
    oracle.decisions = oracle.predict(oracle.grid_points()).reshape(len(gy), len(gx))
    X, y = balanced_sample(task, n_eval, seed)
    return oracle, ber(confusion(oracle.predict(X), y, task.C))


def boundary_crossings(decisions_1d, xs):
    """Midpoints between adjacent grid cells whose decisions differ."""
    d = np.asarray(decisions_1d)
    idx = np.flatnonzero(d[1:] != d[:-1])
    return 0.5 * (xs[idx] + xs[idx + 1])
