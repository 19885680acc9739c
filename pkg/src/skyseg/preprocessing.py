"""Radiometric preprocessing: heights, window artifacts, atmospheric background,
8-bit normalization and optical flow.

Stage order is fixed: ``T -> T' (window) -> dT (atmosphere) -> I8``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .core import DataError, IRFrame, WeatherRecord

log = logging.getLogger(__name__)

# physical constants used by the lapse-rate fixture
GRAVITY = 9.80665  # m s-2
CP_DRY = 1004.0  # J kg-1 K-1
R_DRY = 287.04  # J kg-1 K-1
LATENT_HEAT = 2.501e6  # J kg-1
EPSILON = 0.622  # R_dry / R_vapour
DRY_LAPSE_RATE = 1000.0 * GRAVITY / CP_DRY  # K/km, about 9.77

# normalization constants: tropopause height, site elevation (km) and lapse rate (K/km)
TROPOPAUSE_KM = 11.5
SITE_KM = 1.52
TROPOPAUSE_LAPSE = 9.8
MAX_FEASIBLE_DT = (TROPOPAUSE_KM - SITE_KM) * TROPOPAUSE_LAPSE

WINDOW_LENGTH = 250

#: heights use |T - T_air| so that pixels colder than the ground air get positive heights
HEIGHT_USES_ABS = True


def magnus_vapour_pressure(temp_k: float) -> float:
    """Saturation vapour pressure over water (Pa), Magnus form."""
    tc = temp_k - 273.15
    return 610.94 * math.exp(17.625 * tc / (tc + 243.04))


def malr_rate(air_temp: float, dew_point: float, pressure: float) -> float:
    """Moist adiabatic lapse rate in K/km.

    Uses the mixing ratio implied by the dew point (Magnus vapour pressure)
    in the standard saturated-adiabat expression.  Tends to the dry rate
    ``g / c_p`` as the air dries out.
    """
    if not (air_temp > 0 and dew_point > 0 and pressure > 0):
        raise DataError("temperatures and pressure must be positive")
    if dew_point > air_temp:
        raise DataError(f"dew point {dew_point} K above air temperature {air_temp} K")
    e = magnus_vapour_pressure(dew_point)
    if e >= pressure:
        raise DataError("vapour pressure exceeds total pressure")
    r = EPSILON * e / (pressure - e)
    num = 1.0 + LATENT_HEAT * r / (R_DRY * air_temp)
    den = CP_DRY + LATENT_HEAT ** 2 * r * EPSILON / (R_DRY * air_temp ** 2)
    return 1000.0 * GRAVITY * num / den


def pixel_height(temp, air_temp: float, lapse_rate: float):
    """Height (km) of pixels at temperature ``temp`` given a lapse rate (K/km)."""
    if lapse_rate <= 0:
        raise DataError("lapse rate must be positive")
    diff = np.asarray(temp, dtype=float) - air_temp
    if HEIGHT_USES_ABS:
        diff = np.abs(diff)
    return np.maximum(diff / lapse_rate, 0.0)


# ---------------------------------------------------------------------------
# window (lens stain) model


@dataclass(frozen=True)
class WindowModel:
    """Rolling set of clear-sky offset grids and their per-pixel median."""

    buffer: tuple = ()
    length: int = WINDOW_LENGTH
    shape: tuple = (60, 80)
    W: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.W is None:
            if self.buffer:
                w = np.median(np.stack(self.buffer), axis=0)
            else:
                w = np.zeros(self.shape)
            w.setflags(write=False)
            object.__setattr__(self, "W", w)


def update_window(model: WindowModel, grid: np.ndarray) -> WindowModel:
    """Append a clear-sky grid (FIFO, at most ``model.length``) and recompute the median."""
    grid = np.array(grid, dtype=float)
    if grid.shape != model.shape:
        raise DataError(f"window grid shape {grid.shape} != {model.shape}")
    grid.setflags(write=False)
    buf = (model.buffer + (grid,))[-model.length:]
    return WindowModel(buf, model.length, model.shape)


def apply_window(temp: np.ndarray, model: Optional[WindowModel]) -> np.ndarray:
    temp = np.asarray(temp, dtype=float)
    if model is None:
        return temp.copy()
    return temp - model.W


# ---------------------------------------------------------------------------
# atmospheric background


@dataclass(frozen=True)
class AtmosphericParams:
    theta1: float  # K
    theta2: float  # px, may be inf (flat scatter)
    theta3: float  # K px
    theta4: float  # px
    x0: float  # Sun row
    y0: float  # Sun column

    def __post_init__(self):
        if self.theta2 == 0:
            raise ValueError("theta2 must be nonzero")
        if not self.theta4 > 0:
            raise ValueError("theta4 must be positive")

    def as_vector(self) -> np.ndarray:
        """Internal fitting coordinates: (theta1, 1/theta2, theta3, log theta4, x0, y0)."""
        return np.array([self.theta1, 1.0 / self.theta2, self.theta3, math.log(self.theta4),
                         self.x0, self.y0])

    @classmethod
    def from_vector(cls, p) -> "AtmosphericParams":
        kappa = float(p[1])
        theta2 = math.inf if kappa == 0 else 1.0 / kappa
        return cls(float(p[0]), theta2, float(p[2]), math.exp(float(p[3])), float(p[4]), float(p[5]))


def scatter_term(params: AtmosphericParams, i, j):
    j = np.asarray(j, dtype=float)
    return params.theta1 * np.exp((j - params.y0) / params.theta2)


def direct_term(params: AtmosphericParams, i, j):
    i = np.asarray(i, dtype=float)
    j = np.asarray(j, dtype=float)
    t4sq = params.theta4 ** 2
    dist = (i - params.x0) ** 2 + (j - params.y0) ** 2 + t4sq
    return params.theta3 * t4sq / dist ** 1.5


def eval_atmosphere(params: AtmosphericParams, i, j):
    """Background irradiance temperature: exponential scatter plus Sun direct term."""
    return scatter_term(params, i, j) + direct_term(params, i, j)


def atmosphere_grid(params: AtmosphericParams, shape=(60, 80)) -> np.ndarray:
    ii, jj = np.indices(shape, dtype=float)
    return eval_atmosphere(params, ii, jj)


def _model_and_jacobian(p, ii, jj):
    t1, kappa, t3, rho, x0, y0 = p
    t4sq = math.exp(2.0 * rho)
    dj = jj - y0
    di = ii - x0
    e = np.exp(dj * kappa)
    dist = di ** 2 + dj ** 2 + t4sq
    d15 = dist ** -1.5
    d25 = d15 / dist
    direct = t3 * t4sq * d15
    model = t1 * e + direct
    jac = np.empty(ii.shape + (6,))
    jac[..., 0] = e
    jac[..., 1] = t1 * e * dj
    jac[..., 2] = t4sq * d15
    jac[..., 3] = direct * (2.0 - 3.0 * t4sq / dist)
    jac[..., 4] = 3.0 * t3 * t4sq * di * d25
    jac[..., 5] = -t1 * e * kappa + 3.0 * t3 * t4sq * dj * d25
    return model, jac


def atmosphere_residual(p, grid, mask=None):
    """Residual vector ``model - grid`` over masked pixels, in fitting coordinates."""
    ii, jj = np.indices(grid.shape, dtype=float)
    model, jac = _model_and_jacobian(np.asarray(p, dtype=float), ii, jj)
    res = model - grid
    if mask is None:
        return res.ravel(), jac.reshape(-1, 6)
    return res[mask], jac[mask]


_LOG_THETA4_BOUNDS = (math.log(1e-2), math.log(1e3))


@dataclass(frozen=True)
class AtmosphereFit:
    params: AtmosphericParams
    cost: float  # 0.5 * sum of squared residuals
    initial_cost: float
    iterations: int
    converged: bool


def initial_atmosphere(grid: np.ndarray, sun: Optional[tuple] = None) -> AtmosphericParams:
    rows, cols = grid.shape
    if sun is None:
        sun = ((rows - 1) / 2.0, (cols - 1) / 2.0)
    x0, y0 = sun
    base = float(np.min(grid))
    ri = int(np.clip(round(x0), 0, rows - 1))
    rj = int(np.clip(round(y0), 0, cols - 1))
    peak = float(grid[ri, rj])
    theta4 = 5.0
    theta3 = max(peak - base, 0.0) * theta4
    # flat scatter start: a steep exponential start overshoots badly on real-scale frames
    return AtmosphericParams(base, math.inf, theta3, theta4, float(x0), float(y0))


def fit_atmosphere(grid: np.ndarray, sun: Optional[tuple] = None, init: Optional[AtmosphericParams] = None,
                   mask: Optional[np.ndarray] = None, max_iter: int = 200, tol: float = 1e-8,
                   fix_sun: bool = False) -> AtmosphereFit:
    """Levenberg-Marquardt fit of the background model to a clear-sky grid.

    ``theta4`` is optimised on a log scale and ``theta2`` through its
    reciprocal, so a flat scatter term is reachable.  With ``fix_sun`` only
    the scatter parameters move.  Returns the best iterate even when
    ``max_iter`` is exhausted (``converged=False``).
    """
    grid = np.asarray(grid, dtype=float)
    if init is None:
        init = initial_atmosphere(grid, sun)
    free = np.array([True, True, not fix_sun, not fix_sun, not fix_sun, not fix_sun])
    p = init.as_vector()
    res, jac = atmosphere_residual(p, grid, mask)
    jac = jac[:, free]
    cost = 0.5 * float(res @ res)
    initial_cost = cost
    mu = 1e-3
    converged = cost <= tol
    it = 0
    while it < max_iter and not converged:
        it += 1
        jtj = jac.T @ jac
        g = jac.T @ res
        diag = np.diag(jtj).copy()
        diag[diag <= 0] = 1.0
        improved = False
        for _ in range(30):
            try:
                step = np.linalg.solve(jtj + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            trial = p.copy()
            trial[free] += step
            if not _LOG_THETA4_BOUNDS[0] <= trial[3] <= _LOG_THETA4_BOUNDS[1]:
                mu *= 4.0
                continue
            new_res, new_jac = atmosphere_residual(trial, grid, mask)
            new_cost = 0.5 * float(new_res @ new_res)
            if np.isfinite(new_cost) and new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                small_step = np.linalg.norm(step) <= 1e-12 * (np.linalg.norm(p) + 1e-12)
                p, res, jac, cost = trial, new_res, new_jac[:, free], new_cost
                mu = max(mu / 3.0, 1e-12)
                improved = True
                if cost <= tol or rel < 1e-15 or small_step:
                    converged = True
                break
            mu *= 4.0
        if not improved:
            # no descent direction left at this damping: stationary point
            converged = np.linalg.norm(g) <= 1e-6 * max(1.0, cost)
            break
    return AtmosphereFit(AtmosphericParams.from_vector(p), cost, initial_cost, it, converged)


def scatter_start(grid: np.ndarray, sun_params: AtmosphericParams, quantile: float = 0.25) -> AtmosphericParams:
    """Robust scatter initialisation for a cloudy grid.

    The scatter term depends on the column only, so a low per-column quantile
    of the Sun-free grid estimates it wherever a column is not fully clouded;
    a log-linear fit of that profile gives ``theta1`` and ``theta2``.
    """
    ii, jj = np.indices(grid.shape, dtype=float)
    rest = grid - direct_term(sun_params, ii, jj)
    profile = np.quantile(rest, quantile, axis=0)
    cols = np.arange(grid.shape[1], dtype=float) - sun_params.y0
    ok = profile > 0
    if ok.sum() < 2:
        kappa, t1 = 0.0, float(np.median(rest))
    else:
        kappa, log_t1 = np.polyfit(cols[ok], np.log(profile[ok]), 1)
        t1 = math.exp(log_t1)
    theta2 = math.inf if kappa == 0 else 1.0 / kappa
    return AtmosphericParams(t1, theta2, sun_params.theta3, sun_params.theta4, sun_params.x0, sun_params.y0)


def fit_background(grid: np.ndarray, sun: Optional[tuple] = None, init: Optional[AtmosphericParams] = None,
                   sun_params: Optional[AtmosphericParams] = None, clip: float = 3.0, rounds: int = 8,
                   min_fraction: float = 0.1) -> tuple[AtmosphereFit, np.ndarray]:
    """Fit the background on a possibly cloudy grid.

    Clouds are warmer than the background, so pixels whose residual exceeds
    ``clip`` robust standard deviations above the fit are excluded and the
    model is refitted.  When ``sun_params`` is given its direct-term
    parameters are held fixed (the Sun model is constant between frames).
    Returns the fit and the mask of pixels it used.
    """
    grid = np.asarray(grid, dtype=float)
    fix = sun_params is not None
    if fix:
        start = scatter_start(grid, sun_params)
    elif init is not None:
        start = init
    else:
        first = initial_atmosphere(grid, sun)
        start = scatter_start(grid, first)
    ii, jj = np.indices(grid.shape, dtype=float)
    params = start
    fit = None
    mask = np.ones(grid.shape, dtype=bool)
    for _ in range(rounds):
        resid = grid - eval_atmosphere(params, ii, jj)
        # noise scale from the cold side only: clouds sit in the warm tail
        center = float(np.median(resid[mask]))
        cold = center - resid[mask & (resid <= center)]
        scale = max(float(np.median(cold)) / 0.6745 if cold.size else 0.0, 0.05)
        new_mask = resid <= center + clip * scale
        if new_mask.mean() < min_fraction:
            break
        if fit is not None and np.array_equal(new_mask, mask):
            break
        mask = new_mask
        fit = fit_atmosphere(grid, sun, params, mask=mask, fix_sun=fix)
        params = fit.params
    if fit is None:
        fit = fit_atmosphere(grid, sun, params, fix_sun=fix)
    return fit, mask


def remove_atmosphere(temp_w: np.ndarray, params: AtmosphericParams, lapse_rate: float):
    """Return ``(dT, H'', tropopause_temp)``.

    ``dT`` is the increment over the modelled background, ``H''`` is ``|dT|``
    converted to km with the lapse rate, and the tropopause temperature is
    the mean of the background model over the frame.
    """
    temp_w = np.asarray(temp_w, dtype=float)
    background = atmosphere_grid(params, temp_w.shape)
    dt = temp_w - background
    return dt, pixel_height(dt, 0.0, lapse_rate), float(background.mean())


def normalize8(dt: np.ndarray) -> np.ndarray:
    """Map temperature increments to 8-bit intensities.

    The minimum maps to 0 and the maximum feasible cloud increment to 255;
    rounding is half-up and larger values saturate.
    """
    dt = np.asarray(dt, dtype=float)
    if dt.size == 0:
        raise ValueError("empty grid")
    frac = (dt - dt.min()) / MAX_FEASIBLE_DT
    # the tolerance keeps exact halves (up to representation error) rounding up
    return np.clip(np.floor(frac * 255.0 + 0.5 + 1e-9), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# optical flow


def _gaussian_window(size: int = 5, sigma: float = 1.0) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    w = np.outer(g, g)
    return w / w.sum()


def optical_flow(prev: np.ndarray, curr: np.ndarray, window: int = 5, sigma: float = 1.0,
                 min_eig: float = 1e-6, iterations: int = 3, presmooth: float = 1.5) -> np.ndarray:
    """Weighted Lucas-Kanade flow between two intensity grids.

    Both grids are first smoothed with a Gaussian of width ``presmooth``;
    without it pixel noise in the gradients biases the flow towards zero.
    Returns an array of shape ``(rows, cols, 2)`` holding ``(u, v)``: ``u``
    along columns and ``v`` along rows, in pixels per frame.  Pixels whose
    weighted structure tensor has smallest eigenvalue below ``min_eig`` get
    zero flow.
    """
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise DataError("flow frames differ in shape")
    if presmooth > 0:
        prev = ndimage.gaussian_filter(prev, presmooth, mode="nearest")
        curr = ndimage.gaussian_filter(curr, presmooth, mode="nearest")
    kernel = _gaussian_window(window, sigma)
    gy, gx = np.gradient(prev)
    sxx = ndimage.correlate(gx * gx, kernel, mode="nearest")
    sxy = ndimage.correlate(gx * gy, kernel, mode="nearest")
    syy = ndimage.correlate(gy * gy, kernel, mode="nearest")
    tr = sxx + syy
    det = sxx * syy - sxy ** 2
    disc = np.sqrt(np.maximum((sxx - syy) ** 2 / 4.0 + sxy ** 2, 0.0))
    lam_min = tr / 2.0 - disc
    ok = lam_min >= min_eig
    safe_det = np.where(ok, det, 1.0)

    rows, cols = prev.shape
    ii, jj = np.indices(prev.shape, dtype=float)
    u = np.zeros(prev.shape)
    v = np.zeros(prev.shape)
    for _ in range(max(iterations, 1)):
        warped = ndimage.map_coordinates(curr, [ii + v, jj + u], order=1, mode="nearest")
        it = warped - prev
        bx = -ndimage.correlate(gx * it, kernel, mode="nearest")
        by = -ndimage.correlate(gy * it, kernel, mode="nearest")
        du = (syy * bx - sxy * by) / safe_det
        dv = (sxx * by - sxy * bx) / safe_det
        u = np.where(ok, u + du, 0.0)
        v = np.where(ok, v + dv, 0.0)
    flow = np.stack([u, v], axis=-1)
    flow[~np.isfinite(flow)] = 0.0
    return flow


def flow_magnitude(flow: np.ndarray) -> np.ndarray:
    return np.hypot(flow[..., 0], flow[..., 1])


# ---------------------------------------------------------------------------
# full derivation


@dataclass(frozen=True)
class DerivedFrame:
    T: np.ndarray
    H: np.ndarray
    T_w: np.ndarray  # window-corrected temperature
    H_w: np.ndarray
    dT: np.ndarray
    H_dd: np.ndarray  # heights of the increments
    I8: np.ndarray
    V: Optional[np.ndarray] = None
    lapse_rate: float = float("nan")
    tropopause_temp: float = float("nan")
    atmosphere: Optional[AtmosphericParams] = None

    @property
    def shape(self):
        return self.T.shape

    def channel(self, name: str) -> np.ndarray:
        if name == "mag_v":
            if self.V is None:
                raise KeyError("mag_v")
            return flow_magnitude(self.V)
        value = getattr(self, name, None)
        if value is None or not isinstance(value, np.ndarray):
            raise KeyError(name)
        return value


def derive(frame: IRFrame, weather: WeatherRecord, window: Optional[WindowModel] = None,
           previous: Optional[IRFrame] = None, sun_params: Optional[AtmosphericParams] = None,
           sun: Optional[tuple] = None, stage: str = "all") -> DerivedFrame:
    """Run the preprocessing chain on one frame.

    ``stage`` stops early: ``raw`` (T, H), ``window`` (adds T', H') or
    ``atmosphere``/``all`` (everything; flow needs ``previous``).
    ``sun_params`` carries the Sun direct-term parameters from clear-sky
    calibration; without it the full model is fitted on this frame.
    """
    gamma = malr_rate(weather.air_temp, weather.dew_point, weather.pressure)
    temp = frame.kelvin
    height = pixel_height(temp, weather.air_temp, gamma)
    nan = np.full(temp.shape, np.nan)
    if stage == "raw":
        return DerivedFrame(temp, height, nan, nan, nan, nan, np.zeros(temp.shape, np.uint8), None, gamma)
    temp_w = apply_window(temp, window)
    height_w = pixel_height(temp_w, weather.air_temp, gamma)
    if stage == "window":
        return DerivedFrame(temp, height, temp_w, height_w, nan, nan, np.zeros(temp.shape, np.uint8), None, gamma)
    fit, _ = fit_background(temp_w, sun, sun_params=sun_params)
    dt, h_dd, trop = remove_atmosphere(temp_w, fit.params, gamma)
    i8 = normalize8(dt)
    flow = None
    if previous is not None:
        prev_w = apply_window(previous.kelvin, window)
        pfit, _ = fit_background(prev_w, sun, sun_params=sun_params or fit.params)
        prev_dt, _, _ = remove_atmosphere(prev_w, pfit.params, gamma)
        flow = optical_flow(normalize8(prev_dt), i8)
    return DerivedFrame(temp, height, temp_w, height_w, dt, h_dd, i8, flow, gamma, trop, fit.params)


def clear_sky_offsets(frame: IRFrame, sun: Optional[tuple] = None, init: Optional[AtmosphericParams] = None):
    """Residual of a clear-sky frame after its own full background fit.

    The residual feeds the window model; the fitted parameters provide the
    Sun direct-term calibration.
    """
    temp = frame.kelvin
    fit, _ = fit_background(temp, sun, init)
    return temp - atmosphere_grid(fit.params, temp.shape), fit.params


def derive_entries(loaded: Sequence, stage: str = "all", window_length: int = WINDOW_LENGTH):
    """Derive every loaded manifest entry in time order.

    Clear-sky frames feed the window model as they are met, so each frame is
    corrected with the stains known at its own time.  Returns derived frames
    in the input order.
    """
    order = sorted(range(len(loaded)), key=lambda k: (loaded[k].frame.timestamp or 0.0, k))
    shape = loaded[0].frame.shape if loaded else (60, 80)
    window = WindowModel(length=window_length, shape=shape)
    out: list = [None] * len(loaded)
    sun_params = None
    for k in order:
        item = loaded[k]
        if item.entry.clear_sky and stage != "raw":
            offsets, sun_params = clear_sky_offsets(item.frame, init=sun_params)
            window = update_window(window, offsets)
        out[k] = derive(item.frame, item.weather, window, item.previous, sun_params=sun_params, stage=stage)
    return out
