"""Primal kernel classifiers on an explicit polynomial feature map.

All three models are linear in ``phi(x)``; the constant monomial of the map
acts as the bias and is regularized like every other weight.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import linalg, optimize
from scipy.special import expit, log_expit

from .generative import FitError, decide
from .core import ConfigurationError

log = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class PolyMap:
    """Feature map with ``phi(x) . phi(x') = (1 + x . x')**order``.

    Layout for order 2: ``[1, sqrt2*x_1..x_d, x_1^2..x_d^2, sqrt2*x_j*x_k (j<k)]``.
    """

    input_dim: int
    order: int = 2

    def __post_init__(self):
        if self.order not in (1, 2):
            raise ConfigurationError(f"polynomial order must be 1 or 2, got {self.order}")
        if self.input_dim < 1:
            raise ConfigurationError("input dimension must be positive")

    @property
    def output_dim(self) -> int:
        return math.comb(self.input_dim + self.order, self.order)

    @property
    def monomials(self) -> list:
        """``(coefficient, index tuple)`` for every output coordinate."""
        d = self.input_dim
        if self.order == 1:
            return [(1.0, ())] + [(1.0, (j,)) for j in range(d)]
        out = [(1.0, ())]
        out += [(SQRT2, (j,)) for j in range(d)]
        out += [(1.0, (j, j)) for j in range(d)]
        out += [(SQRT2, (j, k)) for j, k in itertools.combinations(range(d), 2)]
        return out

    def __call__(self, x) -> np.ndarray:
        return poly_expand(x, self.order)


@lru_cache(maxsize=64)
def _pair_index(d: int):
    iu = np.triu_indices(d, k=1)
    return iu[0], iu[1]


def poly_expand(x, order: int = 2) -> np.ndarray:
    """Map a vector ``(d,)`` or matrix ``(n, d)`` to ``(.., C(d+order, order))``."""
    if order not in (1, 2):
        raise ConfigurationError(f"polynomial order must be 1 or 2, got {order}")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    n, d = X.shape
    XT = np.ascontiguousarray(X.T)
    # fill feature-major so every block write is contiguous; return the transpose
    out = np.empty((math.comb(d + order, order), n))
    out[0] = 1.0
    if order == 1:
        out[1:] = XT
    else:
        np.multiply(XT, SQRT2, out=out[1:1 + d])
        np.multiply(XT, XT, out=out[1 + d:1 + 2 * d])
        pos = 1 + 2 * d
        for j in range(d - 1):
            m = d - 1 - j
            # sqrt2 * x_j * x_k for k > j, reusing the scaled linear block
            np.multiply(out[1 + j], XT[j + 1:], out=out[pos:pos + m])
            pos += m
    out = out.T
    return out[0] if single else out


@dataclass(frozen=True)
class LinearModel:
    family: str  # rrc | svc | gpc
    weights: np.ndarray
    order: int
    input_dim: int
    hyper: dict = field(default_factory=dict)
    lam: float = 1.0
    covariance: Optional[np.ndarray] = None  # GPC posterior covariance
    converged: bool = True
    iterations: int = 0
    _hess: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def decision(self, phi: np.ndarray) -> np.ndarray:
        return np.asarray(phi) @ self.weights

    def probability(self, phi: np.ndarray) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        f = phi @ self.weights
        if self.family == "rrc":
            return expit(f)
        if self.family == "svc":
            return expit(f / self._gradient_norm(phi))
        if self.family == "gpc":
            var = np.einsum("ij,ij->i", phi @ self.covariance, phi) if phi.ndim == 2 else phi @ self.covariance @ phi
            return expit(f / np.sqrt(1.0 + math.pi * np.maximum(var, 0.0) / 8.0))
        raise ConfigurationError(f"unknown linear model family {self.family!r}")

    def _gradient_norm(self, phi: np.ndarray) -> np.ndarray:
        """``|grad_x f(x)|`` recovered from ``phi``; ``f / |grad f|`` is the
        first-order signed distance of ``x`` to the decision surface."""
        w = self.weights
        d = self.input_dim
        if self.order == 1:
            g = float(np.linalg.norm(w[1:]))
            return g if g > 0 else 1.0
        if self._hess is None:
            a, b = _pair_index(d)
            M = np.diag(2.0 * w[1 + d:1 + 2 * d])
            M[a, b] = M[b, a] = SQRT2 * w[1 + 2 * d:]
            object.__setattr__(self, "_hess", M)
        x = phi[..., 1:1 + d] / SQRT2
        grad = SQRT2 * w[1:1 + d] + x @ self._hess
        g = np.sqrt(np.sum(grad * grad, axis=-1))
        return np.where(g > 0, g, 1.0)

    def with_lambda(self, lam: float) -> "LinearModel":
        return LinearModel(self.family, self.weights, self.order, self.input_dim, dict(self.hyper), float(lam),
                           self.covariance, self.converged, self.iterations)


def predict(model: LinearModel, phi: np.ndarray, lam: Optional[float] = None):
    """Return ``(probability, class)``; cloud iff ``p * lam >= 0.5``."""
    p = model.probability(phi)
    return p, decide(p, model.lam if lam is None else lam)


def _targets(y) -> np.ndarray:
    y = np.asarray(y).reshape(-1)
    if not np.all(np.isin(y, (0, 1, -1))):
        raise ConfigurationError("labels must be in {0, 1} or {-1, +1}")
    return np.where(y > 0, 1.0, -1.0)


def _input_dim(phi: np.ndarray, order: int) -> int:
    p = phi.shape[1]
    if order == 1:
        return p - 1
    d = int(round((math.sqrt(8 * p + 1) - 3) / 2))
    return d


# ---------------------------------------------------------------------------
# ridge regression classifier


def rrc_objective(w, phi, t, gamma) -> float:
    r = phi @ w - t
    return float(r @ r + gamma * (w @ w))


def fit_rrc(phi, y, gamma: float, order: int = 2) -> LinearModel:
    """Closed form ``w = (Phi^T Phi + gamma I)^-1 Phi^T t`` with ``t = +-1``."""
    phi = np.asarray(phi, dtype=float)
    t = _targets(y)
    if gamma < 0:
        raise ConfigurationError("gamma must be positive")
    A = phi.T @ phi + gamma * np.eye(phi.shape[1])
    try:
        cf = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise FitError("normal matrix is singular; use gamma > 0") from None
    if gamma == 0 and np.linalg.cond(A) > 1e12:
        raise FitError("normal matrix is singular; use gamma > 0")
    w = linalg.cho_solve(cf, phi.T @ t, check_finite=False)
    return LinearModel("rrc", w, order, _input_dim(phi, order), {"gamma": float(gamma)})


# ---------------------------------------------------------------------------
# L2 support vector classifier (squared hinge), primal Newton


def svc_objective(w, phi, t, C) -> float:
    h = np.maximum(0.0, 1.0 - t * (phi @ w))
    return float(0.5 * (w @ w) + C * (h @ h))


def _scaled_solve(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``H x = g`` for SPD ``H`` after symmetric diagonal scaling.

    Polynomial features of unscaled inputs span many orders of magnitude;
    equilibrating the diagonal keeps the Cholesky solve accurate.
    """
    d = 1.0 / np.sqrt(np.diag(H))
    Hs = H * d[:, None] * d[None, :]
    return d * linalg.solve(Hs, d * g, assume_a="pos", check_finite=False)


def _svc_exact_step(w, s, o, q, C) -> float:
    """Exact minimizer over ``a >= 0`` of the objective along ``w + a s``.

    ``o = t * (phi @ w)`` and ``q = t * (phi @ s)``.  The directional
    derivative is piecewise linear and non-decreasing in ``a``; its breakpoints
    are where a residual ``1 - o - a q`` crosses zero.
    """
    r0 = 1.0 - o
    A = float(w @ s)
    B = float(s @ s)
    act = (r0 > 0) | ((r0 == 0) & (q < 0))
    A -= 2.0 * C * float(q[act] @ r0[act])
    B += 2.0 * C * float(q[act] @ q[act])
    with np.errstate(divide="ignore", invalid="ignore"):
        bp = np.where(q != 0, r0 / q, np.inf)
    cross = (bp > 0) & np.isfinite(bp)
    b = bp[cross]
    qc = q[cross]
    rc = r0[cross]
    order = np.argsort(b, kind="stable")
    b, qc, rc = b[order], qc[order], rc[order]
    sign = np.where(qc > 0, 1.0, -1.0)  # leaving (+) or entering (-) the active set
    dA = sign * 2.0 * C * qc * rc
    dB = -sign * 2.0 * C * qc * qc
    As = A + np.concatenate([[0.0], np.cumsum(dA)])
    Bs = B + np.concatenate([[0.0], np.cumsum(dB)])
    ends = np.concatenate([b, [np.inf]])
    deriv_end = As + Bs * ends
    k = int(np.argmax(deriv_end >= 0)) if np.any(deriv_end >= 0) else len(ends) - 1
    return max(0.0, -As[k] / Bs[k]) if Bs[k] > 0 else float(b[k - 1]) if k > 0 else 0.0


def fit_svc(phi, y, C: float, order: int = 2, max_iter: int = 500, tol: float = 1e-8) -> LinearModel:
    """Minimize ``0.5 |w|^2 + C sum max(0, 1 - t w.phi)^2`` by finite Newton.

    Each step solves the Newton system of the active-set quadratic
    ``I + 2C Phi_a^T Phi_a`` and then minimizes the objective exactly along
    the step (the objective is a convex piecewise quadratic).  Stops when the
    gradient norm falls below ``tol`` relative to ``max(1, C |Phi^T t|)``.
    """
    phi = np.asarray(phi, dtype=float)
    t = _targets(y)
    if C <= 0:
        raise ConfigurationError("C must be positive")
    p = phi.shape[1]
    tphi = phi * t[:, None]
    w = np.zeros(p)
    best_w, best_obj = w, svc_objective(w, phi, t, C)
    scale = max(1.0, C * float(np.linalg.norm(tphi.sum(axis=0))))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        o = tphi @ w
        act = o < 1.0
        ta = tphi[act]
        grad = w - 2.0 * C * (ta.T @ (1.0 - o[act]))
        if np.linalg.norm(grad) <= tol * scale:
            converged = True
            break
        H = np.eye(p) + 2.0 * C * (ta.T @ ta)
        step = -_scaled_solve(H, grad)
        a = _svc_exact_step(w, step, o, tphi @ step, C)
        w_new = w + a * step
        obj_new = svc_objective(w_new, phi, t, C)
        if obj_new < best_obj:
            best_w, best_obj = w_new, obj_new
        if np.array_equal(w_new, w) or obj_new >= best_obj and obj_new > best_obj:
            break
        w = w_new
    if not converged:
        o = tphi @ best_w
        act = o < 1.0
        grad = best_w - 2.0 * C * (tphi[act].T @ (1.0 - o[act]))
        converged = bool(np.linalg.norm(grad) <= tol * scale)
    if not converged:
        log.warning("SVC Newton stopped after %d iterations above tolerance; returning best iterate", it)
    return LinearModel("svc", best_w, order, _input_dim(phi, order), {"C": float(C)}, converged=converged,
                       iterations=it)


# ---------------------------------------------------------------------------
# Gaussian process classifier in primal form (Bayesian logistic regression)


def gpc_log_posterior(w, phi, y, gamma) -> float:
    f = phi @ w
    return float(np.sum(y * log_expit(f) + (1 - y) * log_expit(-f)) - 0.5 * (w @ w) / gamma)


def _gpc_map(phi, y, gamma, max_iter=100, tol=1e-10):
    p = phi.shape[1]
    w = np.zeros(p)
    obj = gpc_log_posterior(w, phi, y, gamma)
    trace = [obj]
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(phi @ w)
        grad = phi.T @ (y - mu) - w / gamma
        r = mu * (1.0 - mu)
        H = (phi * r[:, None]).T @ phi + np.eye(p) / gamma
        step = _scaled_solve(H, grad)
        a = 1.0
        while True:
            w_new = w + a * step
            obj_new = gpc_log_posterior(w_new, phi, y, gamma)
            if obj_new >= obj or a < 1e-10:
                break
            a *= 0.5
        if obj_new < obj:
            break
        gain = obj_new - obj
        w, obj = w_new, obj_new
        trace.append(obj)
        if gain <= tol * max(1.0, abs(obj)) or np.linalg.norm(grad) <= 1e-10 * max(1.0, float(np.abs(phi).sum())):
            break
    mu = expit(phi @ w)
    r = mu * (1.0 - mu)
    H = (phi * r[:, None]).T @ phi + np.eye(p) / gamma
    return w, H, trace, it


def gpc_log_evidence(phi, y, gamma) -> float:
    """Laplace approximation of ``log p(y | gamma)``."""
    w, H, _, _ = _gpc_map(phi, y, gamma)
    _, logdet = np.linalg.slogdet(gamma * H)
    return gpc_log_posterior(w, phi, y, gamma) - 0.5 * logdet


def fit_gpc(phi, y, gamma: float = 1.0, order: int = 2, evidence: bool = False,
            gamma_bounds=(1e-4, 1e4)) -> LinearModel:
    """Laplace-approximated Bayesian logistic regression with prior ``N(0, gamma I)``.

    With ``evidence=True`` the prior variance is chosen by maximizing the
    Laplace log evidence over ``log gamma`` (``gamma`` is then ignored).
    """
    phi = np.asarray(phi, dtype=float)
    y = (_targets(y) > 0).astype(float)
    if gamma <= 0:
        raise ConfigurationError("gamma must be positive")
    if evidence:
        lo, hi = np.log(gamma_bounds)
        res = optimize.minimize_scalar(lambda lg: -gpc_log_evidence(phi, y, float(np.exp(lg))),
                                       bounds=(lo, hi), method="bounded", options={"xatol": 1e-4})
        gamma = float(np.exp(res.x))
    w, H, trace, it = _gpc_map(phi, y, gamma)
    try:
        cf = linalg.cho_factor(H, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise FitError("GPC Hessian is not positive definite") from None
    cov = linalg.cho_solve(cf, np.eye(H.shape[0]), check_finite=False)
    cov = 0.5 * (cov + cov.T)
    model = LinearModel("gpc", w, order, _input_dim(phi, order), {"gamma": float(gamma)}, covariance=cov,
                        iterations=it)
    object.__setattr__(model, "trace", tuple(trace))
    return model


FITTERS = {"rrc": fit_rrc, "svc": fit_svc, "gpc": fit_gpc}
