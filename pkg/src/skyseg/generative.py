"""Gaussian generative classifiers (GDA, naive Bayes) and clusterers (k-means, GMM).

Class index 1 is *cloud*, 0 is *clear*.  Every model exposes
``posterior(x) -> p(cloud | x)``; the hard decision with virtual prior
``lam`` is :func:`decide`.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

log = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


class FitError(RuntimeError):
    """Training could not produce a valid model."""


def decide(p, lam: float = 1.0):
    """Cloud iff ``p * lam`` beats ``1 - p * lam``; exact ties go to cloud."""
    return (np.asarray(p) * lam >= 0.5).astype(np.int8)


@dataclass(frozen=True)
class GaussianClass:
    mean: np.ndarray
    cov: np.ndarray
    prior: float = 0.5

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return gaussian_logpdf(x, self.mean, self.cov)


def gaussian_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(x)
    d = mean.shape[0]
    c, low = linalg.cho_factor(cov, lower=True, check_finite=False)
    z = linalg.solve_triangular(c, (x - mean).T, lower=True, check_finite=False)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    return -0.5 * (np.sum(z * z, axis=0) + logdet + d * LOG_2PI)


def _class_stats(x: np.ndarray, gamma: float, diagonal: bool) -> tuple:
    mean = x.mean(axis=0)
    diff = x - mean
    cov = diff.T @ diff / x.shape[0]
    if diagonal:
        cov = np.diag(np.diag(cov))
    cov = cov + gamma * np.eye(x.shape[1])
    return mean, cov


def _ensure_pd(cov: np.ndarray) -> np.ndarray:
    """Add the smallest diagonal jitter that makes ``cov`` Cholesky-factorable."""
    jitter = 0.0
    scale = max(float(np.trace(cov)) / cov.shape[0], 1.0)
    for _ in range(12):
        try:
            np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))
            return cov + jitter * np.eye(cov.shape[0])
        except np.linalg.LinAlgError:
            jitter = scale * 1e-10 if jitter == 0 else jitter * 10
    raise FitError("covariance is not positive definite")


@dataclass(frozen=True)
class GaussianClassifier:
    """Two-class Gaussian classifier with uniform class prior."""

    kind: str  # "gda" or "nbc"
    classes: tuple  # (clear, cloud) GaussianClass
    gamma: float = 0.0

    def log_likelihoods(self, x: np.ndarray) -> np.ndarray:
        return np.stack([c.logpdf(x) for c in self.classes], axis=-1)

    def class_posteriors(self, x: np.ndarray) -> np.ndarray:
        ll = self.log_likelihoods(x) + np.log([c.prior for c in self.classes])
        return np.exp(ll - logsumexp(ll, axis=-1, keepdims=True))

    def posterior(self, x: np.ndarray) -> np.ndarray:
        return self.class_posteriors(x)[:, 1]


def _fit_gaussian_classifier(x, y, gamma, diagonal, kind) -> GaussianClassifier:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y).reshape(-1)
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    classes = []
    for k in (0, 1):
        xk = x[y == k]
        if xk.shape[0] < 2:
            raise FitError(f"class {k} has {xk.shape[0]} samples; at least 2 are required")
        mean, cov = _class_stats(xk, gamma, diagonal)
        classes.append(GaussianClass(mean, _ensure_pd(cov), 0.5))
    return GaussianClassifier(kind, tuple(classes), gamma)


def fit_gda(x, y, gamma: float = 0.0) -> GaussianClassifier:
    """Full-covariance class Gaussians, ``Sigma_k + gamma I``."""
    return _fit_gaussian_classifier(x, y, gamma, False, "gda")


def fit_nbc(x, y, gamma: float = 0.0) -> GaussianClassifier:
    return _fit_gaussian_classifier(x, y, gamma, True, "nbc")


# ---------------------------------------------------------------------------
# clustering


def map_clusters(assign: np.ndarray, labels: Optional[np.ndarray] = None,
                 reference: Optional[np.ndarray] = None, k: int = 2) -> np.ndarray:
    """Return ``cls`` with ``cls[cluster]`` in {0, 1}.

    With labels, the cluster-to-class permutation with the largest overlap
    wins.  Otherwise the cluster with the highest mean ``reference`` value
    (temperature increment: clouds are warmer) is cloud.
    """
    assign = np.asarray(assign).reshape(-1)
    if k != 2:
        raise ValueError("only two-class segmentation is supported")
    if labels is not None:
        labels = np.asarray(labels).reshape(-1)
        keep = np.sum((assign == 0) & (labels == 0)) + np.sum((assign == 1) & (labels == 1))
        swap = np.sum((assign == 0) & (labels == 1)) + np.sum((assign == 1) & (labels == 0))
        return np.array([1, 0]) if swap > keep else np.array([0, 1])
    if reference is None:
        return np.array([0, 1])
    reference = np.asarray(reference).reshape(-1)
    means = [reference[assign == c].mean() if np.any(assign == c) else -np.inf for c in (0, 1)]
    return np.array([0, 1]) if means[1] >= means[0] else np.array([1, 0])


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers, dtype=float)


def _sq_dist(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=-1)


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray
    inertia_trace: tuple
    cluster_class: np.ndarray = field(default_factory=lambda: np.array([0, 1]))
    iterations: int = 0

    def assign(self, x: np.ndarray) -> np.ndarray:
        return np.argmin(_sq_dist(np.atleast_2d(x), self.centroids), axis=1)

    def posterior(self, x: np.ndarray) -> np.ndarray:
        """Hard responsibilities: 1 for the class of the nearest centroid."""
        return self.cluster_class[self.assign(x)].astype(float)

    def with_mapping(self, cluster_class) -> "KMeansModel":
        return KMeansModel(self.centroids, self.inertia_trace, np.asarray(cluster_class), self.iterations)


def fit_kmeans(x, k: int = 2, seed: int = 0, max_iter: int = 500, tol: float = 1e-8,
               init: Optional[np.ndarray] = None) -> KMeansModel:
    """Lloyd iterations from k-means++ seeding.

    An emptied cluster is re-seeded at the point farthest from its assigned
    centroid.  The inertia trace is recorded after every assignment step.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if n < k:
        raise FitError(f"need at least {k} samples, got {n}")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(x, k, rng) if init is None else np.array(init, dtype=float)
    trace = []
    assign = None
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dist(x, centers)
        new_assign = np.argmin(d2, axis=1)
        inertia = float(d2[np.arange(n), new_assign].sum())
        trace.append(inertia)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(d2[np.arange(n), assign]))
                log.debug("k-means: cluster %d emptied, reseeding at sample %d", c, far)
                centers[c] = x[far]
        if len(trace) > 1 and trace[-2] - trace[-1] < tol * max(1.0, abs(trace[-1])) and it > 1:
            d2 = _sq_dist(x, centers)
            if np.array_equal(np.argmin(d2, axis=1), assign):
                trace.append(float(d2[np.arange(n), assign].sum()))
                break
    return KMeansModel(centers, tuple(trace), np.array([0, 1]), it)


@dataclass(frozen=True)
class MixtureModel:
    """Gaussian mixture; ``loglik_trace`` holds the objective EM ascends.

    With ``gamma > 0`` each component density carries the factor
    ``exp(-(gamma / 2) tr(Sigma_k^-1))``.  The EM M-step for that penalized
    objective is exactly ``Sigma_k = S_k + gamma I``, so the regularized fit
    still ascends a well-defined objective monotonically.
    """

    components: tuple
    loglik_trace: tuple
    gamma: float = 0.0
    cluster_class: np.ndarray = field(default_factory=lambda: np.array([0, 1]))
    converged: bool = True

    @property
    def K(self) -> int:
        return len(self.components)

    def responsibilities(self, x: np.ndarray) -> np.ndarray:
        return _em_objective(np.atleast_2d(x), self.components, self.gamma)[1]

    def posterior(self, x: np.ndarray) -> np.ndarray:
        r = self.responsibilities(x)
        return r[:, self.cluster_class == 1].sum(axis=1)

    def assign(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.responsibilities(x), axis=1)

    def with_mapping(self, cluster_class) -> "MixtureModel":
        return MixtureModel(self.components, self.loglik_trace, self.gamma, np.asarray(cluster_class),
                            self.converged)


def _component_penalty(c: GaussianClass, gamma: float) -> float:
    if gamma <= 0:
        return 0.0
    return 0.5 * gamma * float(np.trace(np.linalg.inv(c.cov)))


def _em_objective(x, comps, gamma):
    ll = np.stack([c.logpdf(x) + np.log(c.prior) - _component_penalty(c, gamma) for c in comps], axis=-1)
    norm = logsumexp(ll, axis=-1, keepdims=True)
    return float(norm.sum()), np.exp(ll - norm)


def fit_gmm(x, k: int = 2, gamma: float = 0.0, seed: int = 0, max_iter: int = 500,
            tol: float = 1e-8) -> MixtureModel:
    """EM for a ``k``-component Gaussian mixture, initialised from k-means.

    Stops when the per-sample objective changes by less than ``tol``.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    if n < k:
        raise FitError(f"need at least {k} samples, got {n}")
    km = fit_kmeans(x, k, seed)
    assign = km.assign(x)
    comps = []
    for c in range(k):
        xc = x[assign == c]
        if xc.shape[0] < 2:
            xc = x
        mean, cov = _class_stats(xc, max(gamma, 0.0), False)
        comps.append(GaussianClass(mean, _ensure_pd(cov), max(xc.shape[0], 1) / n))
    obj, resp = _em_objective(x, comps, gamma)
    trace = [obj]
    converged = False
    for _ in range(max_iter):
        nk = resp.sum(axis=0)
        new = []
        for c in range(k):
            if nk[c] < 1e-10:
                raise FitError(f"mixture component {c} collapsed")
            mean = resp[:, c] @ x / nk[c]
            diff = x - mean
            cov = (resp[:, c, None] * diff).T @ diff / nk[c]
            cov = 0.5 * (cov + cov.T) + max(gamma, 0.0) * np.eye(d)
            new.append(GaussianClass(mean, _ensure_pd(cov), nk[c] / n))
        comps = new
        obj, resp = _em_objective(x, comps, gamma)
        trace.append(obj)
        if abs(trace[-1] - trace[-2]) / n < tol:
            converged = True
            break
    return MixtureModel(tuple(comps), tuple(trace), gamma, np.array([0, 1]), converged)
