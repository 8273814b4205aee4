"""Synthetic long-tailed classification tasks.

Two families:

``gaussian2d``
    Each class is a two-component Gaussian mixture: a class-specific
    "spoke" (mean on a ring around the raw origin, elongated along its own
    radius) and, with weight ``core_weight``, a core component at the origin
    shared by every class. The core carries no class information, so there
    the posterior equals the class prior; towards the rim the spokes
    separate.
    Raw coordinates are wide "sensor units" (ring radius 100), so the
    constant inputs 0, 0.5 and 1 all sit in the hub. Densities are
    closed-form, which makes Bayes-oracle checks possible.
``icon8x8``
    8x8 single-channel glyphs (left/right symmetric, equal ink) plus pixel
    noise and a random one-pixel jitter. Raw pixel values live around [0, 1].

Every dataset is normalised with constants computed on its training pool
(labeled + unlabeled); the constants travel in :class:`DatasetHeader`.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

FAMILIES = ("gaussian2d", "icon8x8")
ICON_SIDE = 8


class UnsupportedFamily(ValueError):
    pass


@dataclass
class TaskSpec:
    C: int = 10
    family: str = "gaussian2d"
    seed: int = 0
    # gaussian2d: explicit means/covs override the ring
    means: Optional[list] = None
    covs: Optional[list] = None
    ring_radius: float = 100.0
    radial_sigma: float = 40.0
    tangential_sigma: float = 12.0
    core_weight: float = 0.2
    core_sigma: float = 25.0
    # icon8x8
    ink: int = 16
    deformation: float = 0.4

    def __post_init__(self):
        if self.C < 2:
            raise ValueError("need at least two classes")
        if self.family not in FAMILIES:
            raise UnsupportedFamily(self.family)

    @property
    def d(self):
        if self.family == "gaussian2d":
            return len(self.class_means()[0])
        return ICON_SIDE * ICON_SIDE

    def class_means(self):
        if self.family != "gaussian2d":
            raise UnsupportedFamily("class means are defined for gaussian2d only")
        if self.means is not None:
            return np.asarray(self.means, dtype=np.float64)
        angles = 2 * np.pi * np.arange(self.C) / self.C
        return self.ring_radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def class_covs(self):
        means = self.class_means()
        if self.covs is not None:
            return np.asarray(self.covs, dtype=np.float64)
        if means.shape[1] != 2:
            raise ValueError("ring covariances need 2-D means; pass covs explicitly")
        out = []
        for c in range(self.C):
            a = 2 * np.pi * c / self.C
            R = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
            D = np.diag([self.radial_sigma ** 2, self.tangential_sigma ** 2])
            out.append(R @ D @ R.T)
        return np.stack(out)

    def glyphs(self):
        """C distinct left/right-symmetric binary glyphs with equal ink."""
        if self.family != "icon8x8":
            raise UnsupportedFamily("glyphs are defined for icon8x8 only")
        rng = np.random.default_rng([self.seed, 8080])
        half_cells = ICON_SIDE * ICON_SIDE // 2
        out = []
        while len(out) < self.C:
            half = np.zeros(half_cells)
            half[rng.choice(half_cells, self.ink // 2, replace=False)] = 1.0
            half = half.reshape(ICON_SIDE, ICON_SIDE // 2)
            g = np.concatenate([half, half[:, ::-1]], axis=1)
            # reject near-duplicates and up/down symmetric glyphs (rotation
            # prediction needs 180 degrees to be distinguishable)
            if np.array_equal(g, g[::-1, :]):
                continue
            if any(np.abs(g - o).sum() < self.ink // 2 for o in out):
                continue
            out.append(g)
        return np.stack(out)

    def log_likelihood(self, x):
        """``log p(x | y)`` for every class, shape (n, C). Raw coordinates."""
        if self.family != "gaussian2d":
            raise UnsupportedFamily("closed-form densities need gaussian2d")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        means, covs = self.class_means(), self.class_covs()
        out = np.empty((x.shape[0], self.C))
        for c in range(self.C):
            out[:, c] = _gauss_logpdf(x, means[c], covs[c])
        w = self._core_weight()
        if w > 0:
            d = x.shape[1]
            core = _gauss_logpdf(x, np.zeros(d), np.eye(d) * self.core_sigma ** 2)
            out = np.logaddexp(math.log1p(-w) + out, math.log(w) + core[:, None])
        return out

    def _core_weight(self):
        # explicit means/covs describe plain Gaussians
        return 0.0 if self.means is not None else float(self.core_weight)

    def sample(self, c, n, rng):
        """``n`` raw samples of class ``c``."""
        if self.family == "gaussian2d":
            out = rng.multivariate_normal(self.class_means()[c], self.class_covs()[c], size=n)
            w = self._core_weight()
            if w > 0:
                in_core = rng.random(n) < w
                out[in_core] = rng.normal(0.0, self.core_sigma, size=(int(in_core.sum()), out.shape[1]))
            return out
        g = self.glyphs()[c]
        out = np.empty((n, ICON_SIDE * ICON_SIDE))
        for i in range(n):
            img = _shift(g, rng.integers(-1, 2), rng.integers(-1, 2), 0.0)
            img = img + self.deformation * rng.normal(size=img.shape)
            out[i] = img.reshape(-1)
        return out


def _gauss_logpdf(x, mean, cov):
    diff = x - mean
    inv = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    maha = np.einsum("ni,ij,nj->n", diff, inv, diff)
    return -0.5 * (maha + logdet + x.shape[1] * math.log(2 * math.pi))


@dataclass
class LongTailSpec:
    C: int = 10
    N1: int = 300
    gamma_l: float = 100.0
    M1: int = 600
    gamma_u: float = 1.0
    gamma_u_known: bool = False
    reversed: bool = False


def _profile(head, gamma, C):
    if gamma < 1:
        raise ValueError("imbalance ratio must be >= 1")
    if head < C:
        raise ValueError(f"head count {head} < C={C} would starve tail classes")
    k = np.arange(C)
    raw = head * (1.0 / gamma) ** (k / (C - 1))
    return np.maximum(np.floor(raw + 0.5), 1).astype(int)


def longtail_counts(spec: LongTailSpec, which="labeled"):
    """Per-class counts ``N_k = N_1 * (N_C / N_1) ** ((k - 1) / (C - 1))``
    rounded to the nearest integer (at least one)."""
    if which == "labeled":
        counts = _profile(spec.N1, spec.gamma_l, spec.C)
    elif which == "unlabeled":
        counts = _profile(spec.M1, spec.gamma_u, spec.C)
    else:
        raise ValueError(f"unknown split {which!r}")
    return counts[::-1].copy() if spec.reversed else counts


@dataclass
class DatasetHeader:
    family: str
    C: int
    d: int
    labeled_counts: list
    unlabeled_counts: list
    test_per_class: int
    mean: list  # per-feature shift
    scale: float
    max_normalized: float
    min_normalized: float
    seed: int
    task: dict = field(default_factory=dict)

    @property
    def fill_value(self):
        """Normalised value of a raw-zero (background) feature, per feature."""
        return (0.0 - np.asarray(self.mean)) / self.scale

    def normalize(self, raw):
        return (np.asarray(raw, dtype=np.float64) - np.asarray(self.mean)) / self.scale

    def denormalize(self, x):
        return np.asarray(x) * self.scale + np.asarray(self.mean)


@dataclass(frozen=True)
class UnlabeledView:
    """What training code may see of the unlabeled pool: inputs only."""
    U: np.ndarray


@dataclass
class SplitDataset:
    header: DatasetHeader
    X: np.ndarray
    y: np.ndarray
    _U: np.ndarray
    _hidden_y: np.ndarray
    X_test: np.ndarray
    y_test: np.ndarray

    def unlabeled(self):
        return UnlabeledView(self._U)

    def eval_only_unlabeled_labels(self):
        """True labels of the unlabeled pool. Diagnostics only."""
        return self._hidden_y

    def labeled_distribution(self):
        counts = np.bincount(self.y, minlength=self.header.C).astype(np.float64)
        return counts / counts.sum()


def _seed_stream(seed, *tags):
    return np.random.default_rng([int(seed), *[int(t) for t in tags]])


_SPLIT_TAG = {"labeled": 1, "unlabeled": 2, "test": 3}


def synthesize(task: TaskSpec, lt_labeled, lt_unlabeled, test_per_class, seed):
    """Draw labeled / unlabeled / balanced-test pools and normalise them.

    Each (split, class) pair has its own seed stream, so the pools are
    independent draws and the result is a pure function of the arguments.
    """
    lt_labeled = np.asarray(lt_labeled, dtype=int)
    lt_unlabeled = np.asarray(lt_unlabeled, dtype=int)
    if len(lt_labeled) != task.C or len(lt_unlabeled) != task.C:
        raise ValueError("count vectors must have length C")

    def draw(split, counts):
        xs, ys = [], []
        for c, n in enumerate(counts):
            rng = _seed_stream(seed, _SPLIT_TAG[split], c)
            xs.append(task.sample(c, int(n), rng))
            ys.append(np.full(int(n), c, dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    X, y = draw("labeled", lt_labeled)
    U, uy = draw("unlabeled", lt_unlabeled)
    Xt, yt = draw("test", [test_per_class] * task.C)

    pool = np.concatenate([X, U])
    if task.family == "icon8x8":
        mean = np.full(task.d, pool.mean())
    else:
        mean = pool.mean(axis=0)
    scale = float(np.sqrt(((pool - mean) ** 2).mean()))
    Xn, Un, Xtn = ((a - mean) / scale for a in (X, U, Xt))
    header = DatasetHeader(
        family=task.family, C=task.C, d=task.d,
        labeled_counts=lt_labeled.tolist(), unlabeled_counts=lt_unlabeled.tolist(),
        test_per_class=int(test_per_class), mean=mean.tolist(), scale=scale,
        max_normalized=float(max(Xn.max(), Un.max())),
        min_normalized=float(min(Xn.min(), Un.min())),
        seed=int(seed), task=asdict(task),
    )
    return SplitDataset(header, Xn, y, Un, uy, Xtn, yt)


# ---------------------------------------------------------------- augmentation

def _shift(img, dy, dx, fill):
    """Translate a 2-D image by (dy, dx) pixels, padding with ``fill``."""
    out = np.full_like(img, fill)
    h, w = img.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def flip_horizontal(x):
    img = np.asarray(x).reshape(ICON_SIDE, ICON_SIDE)
    return img[:, ::-1].reshape(-1).copy()


def _fill(header):
    if header is None:
        return 0.0
    return float(np.asarray(header.fill_value).reshape(-1)[0])


def weak_augment(x, family, rng, header=None, noise=0.1, flip=None, shift=True):
    """Label-preserving light perturbation of one normalised sample.

    gaussian2d: isotropic noise of ``noise`` dataset standard deviations
    (the data are unit-scale after normalisation). icon8x8: horizontal flip
    with probability 0.5 (``flip`` forces it) and a +-1 pixel shift padded
    with the background value.
    """
    x = np.asarray(x, dtype=np.float64)
    if family == "gaussian2d":
        return x + noise * rng.normal(size=x.shape)
    if family != "icon8x8":
        raise UnsupportedFamily(family)
    img = x.reshape(ICON_SIDE, ICON_SIDE)
    do_flip = rng.random() < 0.5 if flip is None else flip
    if do_flip:
        img = img[:, ::-1]
    if shift:
        img = _shift(img, int(rng.integers(-1, 2)), int(rng.integers(-1, 2)), _fill(header))
    return img.reshape(-1).copy()


def cutout_corner(rng, size=3):
    hi = ICON_SIDE - size + 1
    return int(rng.integers(0, hi)), int(rng.integers(0, hi))


def strong_augment(x, family, rng, header=None, noise=0.3, drop_prob=0.3,
                   cut=3, brightness=0.2):
    """Heavy perturbation (toy Cutout / RandAugment).

    gaussian2d: noise of 0.3 dataset standard deviations, then with
    probability ``drop_prob`` one coordinate is zeroed. icon8x8: weak
    augmentation, a ``cut`` x ``cut`` patch set to the background value, then
    brightness jitter of +-``brightness`` applied in raw intensity.
    """
    x = np.asarray(x, dtype=np.float64)
    if family == "gaussian2d":
        out = x + noise * rng.normal(size=x.shape)
        if rng.random() < drop_prob:
            out[int(rng.integers(0, out.size))] = 0.0
        return out
    if family != "icon8x8":
        raise UnsupportedFamily(family)
    fill = _fill(header)
    img = weak_augment(x, family, rng, header).reshape(ICON_SIDE, ICON_SIDE)
    r, c = cutout_corner(rng, cut)
    img[r:r + cut, c:c + cut] = fill
    f = 1.0 + rng.uniform(-brightness, brightness)
    # raw' = f * raw  <=>  x' = fill + f * (x - fill); keeps the patch exact
    img = fill + f * (img - fill)
    return img.reshape(-1)


def weak_batch(X, family, rng, header=None):
    return np.stack([weak_augment(x, family, rng, header) for x in X]) if family == "icon8x8" \
        else X + 0.1 * rng.normal(size=X.shape)


def strong_batch(X, family, rng, header=None):
    if family == "icon8x8":
        return np.stack([strong_augment(x, family, rng, header) for x in X])
    out = X + 0.3 * rng.normal(size=X.shape)
    drop = rng.random(len(X)) < 0.3
    coord = rng.integers(0, X.shape[1], size=len(X))
    out[np.flatnonzero(drop), coord[drop]] = 0.0
    return out


def mixup(batch_a, batch_b, alpha, rng, lam=None):
    """Convex mix of two (X, targets) batches with ``lam = max(l, 1 - l)``,
    ``l ~ Beta(alpha, alpha)``. Pass ``lam`` to force the coefficient."""
    xa, ta = (np.asarray(v, dtype=np.float64) for v in batch_a)
    xb, tb = (np.asarray(v, dtype=np.float64) for v in batch_b)
    if xa.shape != xb.shape or ta.shape != tb.shape:
        raise ValueError("mixup batches must have equal shapes")
    if lam is None:
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        lam = rng.beta(alpha, alpha)
        lam = max(lam, 1.0 - lam)
    return lam * xa + (1 - lam) * xb, lam * ta + (1 - lam) * tb


# --------------------------------------------------------------------- batches

@dataclass
class LabeledBatch:
    x: np.ndarray
    x_weak: np.ndarray
    x_strong: np.ndarray
    y: np.ndarray
    p: np.ndarray  # one-hot
    idx: np.ndarray


@dataclass
class UnlabeledBatch:
    u: np.ndarray
    u_weak: np.ndarray
    u_strong: np.ndarray
    idx: np.ndarray


@dataclass
class BatchPair:
    MX: LabeledBatch
    MU: UnlabeledBatch
    epoch_x: int
    epoch_u: int


class _Cycler:
    """Endless epoch-shuffled index stream; epoch ``e`` uses seed (seed, tag, e)."""

    def __init__(self, n, seed, tag):
        self.n, self.seed, self.tag = n, seed, tag
        self.epoch, self.pos = 0, 0
        self.order = self._perm()

    def _perm(self):
        return _seed_stream(self.seed, self.tag, self.epoch).permutation(self.n)

    def take(self, k):
        out = []
        while len(out) < k:
            if self.pos == self.n:
                self.epoch += 1
                self.pos = 0
                self.order = self._perm()
            step = min(k - len(out), self.n - self.pos)
            out.extend(self.order[self.pos:self.pos + step])
            self.pos += step
        return np.asarray(out, dtype=np.int64)


def batch_stream(dataset: SplitDataset, B, mu, seed) -> Iterator[BatchPair]:
    """Infinite stream of (labeled, unlabeled) minibatches of sizes B and mu*B.

    Augmented views use one derived generator per (iteration, stream), so a
    given seed always yields the same sequence.
    """
    if B < 1 or mu < 1:
        raise ValueError("B and mu must be >= 1")
    fam, hdr = dataset.header.family, dataset.header
    U = dataset.unlabeled().U
    lab = _Cycler(len(dataset.y), seed, 11)
    unl = _Cycler(len(U), seed, 12)
    C = hdr.C
    it = 0
    while True:
        ix, iu = lab.take(B), unl.take(mu * B)
        rx = _seed_stream(seed, 21, it)
        ru = _seed_stream(seed, 22, it)
        x = dataset.X[ix]
        u = U[iu]
        MX = LabeledBatch(x, weak_batch(x, fam, rx, hdr), strong_batch(x, fam, rx, hdr),
                          dataset.y[ix], np.eye(C)[dataset.y[ix]], ix)
        MU = UnlabeledBatch(u, weak_batch(u, fam, ru, hdr), strong_batch(u, fam, ru, hdr), iu)
        yield BatchPair(MX, MU, lab.epoch, unl.epoch)
        it += 1


# ------------------------------------------------------------------- container

MAGIC = b"CDMADLAB"


def save_dataset(ds: SplitDataset, path):
    """Binary container: magic, u32 header length, JSON header, then the
    row-major float64 blocks X, U, X_test followed by int64 y, hidden_y, y_test."""
    header = json.dumps(asdict(ds.header), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for a in (ds.X, ds._U, ds.X_test):
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for a in (ds.y, ds._hidden_y, ds.y_test):
            f.write(np.ascontiguousarray(a, dtype="<i8").tobytes())


def load_dataset(path):
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError("not a dataset container")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = DatasetHeader(**json.loads(raw[12:12 + hlen]))
    off = 12 + hlen
    d = header.d
    sizes = [sum(header.labeled_counts), sum(header.unlabeled_counts),
             header.test_per_class * header.C]

    def take(n, dtype, width):
        nonlocal off
        nbytes = n * width * 8
        a = np.frombuffer(raw[off:off + nbytes], dtype=dtype).copy()
        off += nbytes
        return a.reshape(n, width) if width > 1 else a

    X, U, Xt = (take(n, "<f8", d) for n in sizes)
    y, uy, yt = (take(n, "<i8", 1) for n in sizes)
    return SplitDataset(header, X, y, U, uy, Xt, yt)


def export_csv(ds: SplitDataset, path=None, include_hidden=False):
    """Debug dump, one row per sample: split, class (blank for unlabeled
    unless ``include_hidden``), features."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "class", *[f"f{i}" for i in range(ds.header.d)]])
    for x, y in zip(ds.X, ds.y):
        w.writerow(["labeled", int(y), *map(repr, x.tolist())])
    for x, y in zip(ds._U, ds._hidden_y):
        w.writerow(["unlabeled", int(y) if include_hidden else "", *map(repr, x.tolist())])
    for x, y in zip(ds.X_test, ds.y_test):
        w.writerow(["test", int(y), *map(repr, x.tolist())])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text
