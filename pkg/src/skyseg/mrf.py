"""Markov random field segmentation with Gaussian class likelihoods.

Energy of a labelling ``y`` (0 = clear, 1 = cloud, spins ``s = 2y - 1``)::

    E(y) = sum_i -log N(x_i; theta_{y_i})  -  beta * sum_{(i,j) in cliques} s_i s_j

Lower energy means higher posterior.  Cliques are 4-neighbour pairs (order 1)
or 8-neighbour pairs (order 2).  ICM visits pixels in raster order and
updates in place, so every sweep is monotone in energy.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numba
import numpy as np
from scipy import ndimage

from .generative import FitError, GaussianClass, _class_stats, _ensure_pd, fit_gda, fit_kmeans, map_clusters
from .core import ConfigurationError

log = logging.getLogger(__name__)

CLIQUE_OFFSETS = {
    1: ((-1, 0), (0, -1), (0, 1), (1, 0)),
    2: ((-1, 0), (0, -1), (0, 1), (1, 0), (-1, -1), (-1, 1), (1, -1), (1, 1)),
}
MAX_SWEEPS = 50
MAX_OUTER = 50
MAX_COLLAPSES = 3
MIN_CLASS_PIXELS = 2
_BIG = 1e12


def _order(order) -> int:
    o = {"1": 1, "2": 2, "first": 1, "second": 2, "omega1": 1, "omega2": 2}.get(str(order).lower())
    if o is None:
        raise ConfigurationError(f"clique order must be 1 or 2, got {order!r}")
    return o


@dataclass(frozen=True)
class AnnealSchedule:
    T0: float = 1.0
    alpha: float = 0.75
    t_max: int = 20

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if self.T0 <= 0 or self.t_max < 0:
            raise ConfigurationError("T0 must be positive and t_max non-negative")

    def temperatures(self) -> np.ndarray:
        temps = np.empty(self.t_max)
        t = self.T0
        for k in range(self.t_max):
            temps[k] = t
            t = self.alpha * t
        return temps


@dataclass(frozen=True)
class MrfModel:
    classes: tuple  # (clear, cloud) GaussianClass
    beta: float = 1.0
    clique_order: int = 1
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "clique_order", _order(self.clique_order))

    def unary(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel negative log-likelihoods, shape ``(n, 2)``."""
        return -np.stack([c.logpdf(x) for c in self.classes], axis=-1)


# ---------------------------------------------------------------------------
# numba kernels (labels int8 grid, unary float64 (rows, cols, 2))


@numba.njit(cache=True)
def _neighbor_spin_sum(labels, r, c, offs):
    rows, cols = labels.shape
    s = 0.0
    for k in range(offs.shape[0]):
        rr = r + offs[k, 0]
        cc = c + offs[k, 1]
        if 0 <= rr < rows and 0 <= cc < cols:
            s += 2.0 * labels[rr, cc] - 1.0
    return s


@numba.njit(cache=True)
def _icm_sweep(labels, unary, beta, offs):
    rows, cols = labels.shape
    changed = 0
    for r in range(rows):
        for c in range(cols):
            ns = _neighbor_spin_sum(labels, r, c, offs)
            e0 = unary[r, c, 0] + beta * ns
            e1 = unary[r, c, 1] - beta * ns
            cur = labels[r, c]
            new = cur
            if e1 < e0:
                new = 1
            elif e0 < e1:
                new = 0
            if new != cur:
                labels[r, c] = new
                changed += 1
    return changed


@numba.njit(cache=True)
def _metropolis(labels, unary, beta, offs, proposals, uniforms, temp):
    cols = labels.shape[1]
    accepted = 0
    for k in range(proposals.shape[0]):
        idx = proposals[k]
        r = idx // cols
        c = idx - r * cols
        ns = _neighbor_spin_sum(labels, r, c, offs)
        e0 = unary[r, c, 0] + beta * ns
        e1 = unary[r, c, 1] - beta * ns
        cur = labels[r, c]
        delta = e0 - e1 if cur == 1 else e1 - e0
        if delta <= 0.0 or uniforms[k] < math.exp(-delta / temp):
            labels[r, c] = 1 - cur
            accepted += 1
    return accepted


def _offsets(order: int) -> np.ndarray:
    return np.array(CLIQUE_OFFSETS[_order(order)], dtype=np.int64)


def _kernel(order: int) -> np.ndarray:
    k = np.zeros((3, 3))
    for di, dj in CLIQUE_OFFSETS[_order(order)]:
        k[1 + di, 1 + dj] = 1.0
    return k


def neighbor_spin_sums(labels: np.ndarray, order: int) -> np.ndarray:
    spins = 2.0 * np.asarray(labels, dtype=float) - 1.0
    return ndimage.correlate(spins, _kernel(order), mode="constant", cval=0.0)


def pairwise_energy(labels: np.ndarray, beta: float, order: int) -> float:
    spins = 2.0 * np.asarray(labels, dtype=float) - 1.0
    total = 0.0
    for di, dj in CLIQUE_OFFSETS[_order(order)]:
        # count each unordered pair once: keep offsets pointing "forward"
        if (di, dj) <= (0, 0):
            continue
        a = spins[max(0, -di):spins.shape[0] - max(0, di), max(0, -dj):spins.shape[1] - max(0, dj)]
        b = spins[max(0, di):, max(0, dj):][:a.shape[0], :a.shape[1]]
        total += float(np.sum(a * b))
    return -beta * total


def clique_count(shape, order: int) -> int:
    rows, cols = shape
    n = rows * (cols - 1) + (rows - 1) * cols
    if _order(order) == 2:
        n += 2 * (rows - 1) * (cols - 1)
    return n


def _unary_grid(model: MrfModel, features) -> np.ndarray:
    return model.unary(features.data).reshape(features.rows, features.cols, 2)


def energy(labels: np.ndarray, features, model: MrfModel, unary: Optional[np.ndarray] = None) -> float:
    labels = np.asarray(labels).reshape(features.rows, features.cols)
    if unary is None:
        unary = _unary_grid(model, features)
    rr, cc = np.indices(labels.shape)
    data_term = float(unary[rr, cc, labels.astype(np.int64)].sum())
    return data_term + pairwise_energy(labels, model.beta, model.clique_order)


def local_energies(labels: np.ndarray, unary: np.ndarray, beta: float, order: int) -> np.ndarray:
    """Conditional energy of each label at each pixel given its neighbours, ``(rows, cols, 2)``."""
    ns = neighbor_spin_sums(labels, order)
    return np.stack([unary[..., 0] + beta * ns, unary[..., 1] - beta * ns], axis=-1)


def icm_sweep(labels: np.ndarray, features, model: MrfModel, unary: Optional[np.ndarray] = None):
    """One raster-order in-place ICM pass; returns ``(new_labels, n_changed)``."""
    lab = np.array(labels, dtype=np.int8).reshape(features.rows, features.cols)
    if unary is None:
        unary = _unary_grid(model, features)
    changed = _icm_sweep(lab, np.ascontiguousarray(unary), float(model.beta), _offsets(model.clique_order))
    return lab, int(changed)


def margin_sampling(labels: np.ndarray, features, model: MrfModel, fraction: float,
                    unary: Optional[np.ndarray] = None) -> np.ndarray:
    """Flat indices of the ``round(fraction * n)`` pixels with the smallest energy margin.

    The margin is ``|E(y=1) - E(y=0)|`` for the pixel given its neighbours; a
    small margin marks a pixel likely to be misclassified.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError("fraction must lie in (0, 1]")
    lab = np.asarray(labels).reshape(features.rows, features.cols)
    if unary is None:
        unary = _unary_grid(model, features)
    loc = local_energies(lab, unary, model.beta, model.clique_order)
    margin = np.abs(loc[..., 1] - loc[..., 0]).ravel()
    n = margin.size
    count = max(1, min(n, int(math.floor(fraction * n + 0.5))))
    return np.argsort(margin, kind="stable")[:count]


@dataclass(frozen=True)
class Segmentation:
    mask: np.ndarray  # (rows, cols) int8
    probability: np.ndarray  # (rows, cols) conditional p(cloud | neighbours)
    energy_trace: tuple
    sweeps: int


def _conditional_probability(labels, unary, beta, order) -> np.ndarray:
    loc = local_energies(labels, unary, beta, order)
    diff = np.clip(loc[..., 1] - loc[..., 0], -700, 700)
    return 1.0 / (1.0 + np.exp(diff))


def run_icm(labels, unary, model: MrfModel, max_sweeps: int = MAX_SWEEPS):
    lab = np.array(labels, dtype=np.int8)
    offs = _offsets(model.clique_order)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        if _icm_sweep(lab, unary, float(model.beta), offs) == 0:
            break
    return lab, sweeps


def anneal(labels, unary, model: MrfModel, schedule: AnnealSchedule, seed: int = 0,
           fraction: float = 0.2):
    """Metropolis single-site flips over margin-sampled pixels, cooled geometrically.

    Each schedule step draws ``|subset|`` proposals from the current
    low-margin subset at temperature ``T``; then one ICM sweep settles.
    """
    rng = np.random.default_rng(seed)
    lab = np.array(labels, dtype=np.int8)
    offs = _offsets(model.clique_order)
    rows, cols = lab.shape
    for temp in schedule.temperatures():
        loc = local_energies(lab, unary, model.beta, model.clique_order)
        margin = np.abs(loc[..., 1] - loc[..., 0]).ravel()
        count = max(1, min(margin.size, int(math.floor(fraction * margin.size + 0.5))))
        subset = np.argsort(margin, kind="stable")[:count]
        proposals = rng.choice(subset, size=count).astype(np.int64)
        uniforms = rng.random(count)
        _metropolis(lab, unary, float(model.beta), offs, proposals, uniforms, float(temp))
    _icm_sweep(lab, unary, float(model.beta), offs)
    return lab


def initial_labels(unary: np.ndarray) -> np.ndarray:
    """Maximum-likelihood labels; ties go to cloud."""
    return (unary[..., 1] <= unary[..., 0]).astype(np.int8)


def lambda_offset(lam: float) -> float:
    """Energy added to the cloud label so ICM decides ``p * lam >= 0.5``.

    ``p`` is the conditional cloud probability ``sigmoid(E_clear - E_cloud)``;
    the rule holds when ``E_clear - E_cloud >= logit(1 / (2 lam))``.
    """
    if lam < 0:
        raise ConfigurationError("lambda must be non-negative")
    if lam == 0:
        return _BIG
    q = 1.0 / (2.0 * lam)
    if q >= 1.0:
        return _BIG
    return float(np.log(q) - np.log1p(-q))


def _shifted_unary(unary: np.ndarray, lam: float) -> np.ndarray:
    off = lambda_offset(lam)
    if off == 0.0:
        return unary
    out = unary.copy()
    out[..., 1] += off
    return np.ascontiguousarray(out)


def segment(model: MrfModel, features, mode: str = "icm", schedule: Optional[AnnealSchedule] = None,
            init: Optional[np.ndarray] = None, seed: int = 0, fraction: float = 0.2,
            max_sweeps: int = MAX_SWEEPS, lam: float = 1.0) -> Segmentation:
    """Segment one frame.  ``mode`` is ``icm`` or ``sa`` (needs ``schedule``).

    A virtual prior ``lam`` other than 1 shifts the cloud energies so that a
    settled mask satisfies ``p * lam >= 0.5`` pixel by pixel.  The reported
    energies and probabilities use the unshifted model.
    """
    if mode not in ("icm", "sa"):
        raise ConfigurationError(f"unknown inference mode {mode!r}")
    if mode == "sa" and schedule is None:
        raise ConfigurationError("simulated annealing needs a schedule")
    unary = np.ascontiguousarray(_unary_grid(model, features))
    work = _shifted_unary(unary, lam)
    lab = initial_labels(work) if init is None else np.array(init, dtype=np.int8).reshape(unary.shape[:2])
    trace = [energy(lab, features, model, unary)]
    if mode == "icm":
        lab, sweeps = run_icm(lab, work, model, max_sweeps)
    else:
        lab = anneal(lab, work, model, schedule, seed, fraction)
        sweeps = 1
    trace.append(energy(lab, features, model, unary))
    prob = _conditional_probability(lab, unary, model.beta, model.clique_order)
    return Segmentation(lab, prob, tuple(trace), sweeps)


def fit_supervised(frames, gamma: float = 1.0, beta: float = 1.0, clique_order=1) -> MrfModel:
    """Class Gaussians from labelled pixels (``Sigma_k + gamma I``); ``beta`` is given."""
    frames = _as_list(frames)
    x = np.vstack([f.data for f in frames])
    y = np.concatenate([f.labels for f in frames])
    gda = fit_gda(x, y, gamma)
    return MrfModel(gda.classes, beta, clique_order, gamma)


def _as_list(frames) -> list:
    if hasattr(frames, "data"):
        return [frames]
    return list(frames)


def _estimate_classes(x, y, gamma):
    classes = []
    for k in (0, 1):
        xk = x[y == k]
        if xk.shape[0] < 2:
            return None
        mean, cov = _class_stats(xk, gamma, False)
        classes.append(GaussianClass(mean, _ensure_pd(cov), 0.5))
    return tuple(classes)


def _kmeans_labels(x, seed):
    std = x.std(axis=0)
    z = (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)
    km = fit_kmeans(z, 2, seed)
    return km.assign(z).astype(np.int8)


def fit_icm_unsupervised(frames, beta: float = 1.0, clique_order=1, seed: int = 0, gamma: float = 1.0,
                         labels: Optional[Sequence] = None, reference: Optional[str] = None,
                         max_outer: int = MAX_OUTER):
    """Unsupervised MRF: alternate class re-estimation and one ICM sweep per frame.

    Starts from k-means on the pooled (z-scored) pixels.  Stops at a mask
    fixpoint or after ``max_outer`` rounds.  A class shrinking below two
    pixels triggers a k-means restart with a new seed; the third collapse
    raises :class:`FitError`.  Cluster 1 of the returned model is cloud:
    chosen by overlap with ``labels`` when given, else as the class with the
    larger mean of feature ``reference`` (default: the first ``dT`` column).

    Returns ``(model, masks)`` with one mask per frame.
    """
    frames = _as_list(frames)
    sizes = [f.rows * f.cols for f in frames]
    x = np.vstack([f.data for f in frames])
    splits = np.cumsum(sizes)[:-1]
    offs = _offsets(clique_order)
    collapses = 0
    y = _kmeans_labels(x, seed)
    masks = [m.reshape(f.rows, f.cols).copy() for m, f in zip(np.split(y, splits), frames)]
    classes = None
    for outer in range(max_outer):
        y = np.concatenate([m.ravel() for m in masks])
        est = _estimate_classes(x, y, gamma)
        if est is None:
            collapses += 1
            if collapses >= MAX_COLLAPSES:
                raise FitError(f"class collapsed {collapses} times during unsupervised ICM")
            log.warning("unsupervised ICM: class collapsed, restarting from k-means")
            y = _kmeans_labels(x, seed + collapses)
            masks = [m.reshape(f.rows, f.cols).copy() for m, f in zip(np.split(y, splits), frames)]
            continue
        classes = est
        model = MrfModel(classes, beta, clique_order, gamma)
        changed = 0
        for f, m in zip(frames, masks):
            unary = np.ascontiguousarray(_unary_grid(model, f))
            changed += _icm_sweep(m, unary, float(beta), offs)
        if changed == 0:
            break
    if classes is None:
        raise FitError("unsupervised ICM never produced two classes")
    y = np.concatenate([m.ravel() for m in masks])
    if labels is not None:
        truth = np.concatenate([np.asarray(getattr(l, "labels", l)).ravel() for l in labels])
        mapping = map_clusters(y, labels=truth)
    else:
        names = list(frames[0].names)
        col = names.index(reference) if reference in names else next(
            (k for k, n in enumerate(names) if n == "dT"), 0)
        mapping = map_clusters(y, reference=x[:, col])
    if mapping[0] == 1:
        classes = (classes[1], classes[0])
        masks = [(1 - m).astype(np.int8) for m in masks]
    return MrfModel(classes, beta, clique_order, gamma), masks


def adapt(model: MrfModel, features, lam: float = 1.0, mode: str = "icm",
          schedule: Optional[AnnealSchedule] = None, seed: int = 0, fraction: float = 0.2,
          max_outer: int = MAX_OUTER) -> tuple:
    """Unsupervised ICM-MRF on one frame, warm-started from a trained model.

    Alternates one ICM sweep with re-estimating each class Gaussian from the
    current mask, until the mask is a fixpoint or ``max_outer`` rounds.  A
    class holding fewer than two pixels keeps its current parameters, so an
    all-clear frame stays all clear instead of being split in two.  In
    ``sa`` mode the annealer runs once on the adapted model at the end.

    Returns ``(adapted model, Segmentation)``.
    """
    x = features.data
    offs = _offsets(model.clique_order)
    unary = np.ascontiguousarray(_unary_grid(model, features))
    lab = initial_labels(_shifted_unary(unary, lam))
    classes = list(model.classes)
    outer = 0
    for outer in range(1, max_outer + 1):
        work = _shifted_unary(unary, lam)
        changed = _icm_sweep(lab, work, float(model.beta), offs)
        y = lab.ravel()
        for k in (0, 1):
            xk = x[y == k]
            if xk.shape[0] >= MIN_CLASS_PIXELS:
                mean, cov = _class_stats(xk, model.gamma, False)
                classes[k] = GaussianClass(mean, _ensure_pd(cov), 0.5)
        model = MrfModel(tuple(classes), model.beta, model.clique_order, model.gamma)
        unary = np.ascontiguousarray(_unary_grid(model, features))
        if changed == 0 and outer > 1:
            break
    seg = segment(model, features, mode, schedule, init=lab, seed=seed, fraction=fraction, lam=lam)
    return model, Segmentation(seg.mask, seg.probability, seg.energy_trace, outer)
