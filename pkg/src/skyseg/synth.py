"""Synthetic infrared sky scenes with known ground truth.

Each frame is the atmospheric background model plus warm cloud blobs, a
persistent lens-stain pattern and Gaussian pixel noise, quantized to
centi-Kelvin.  The cloud field of every labelled frame is also rendered one
frame earlier, displaced by a constant translation, for flow features.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .core import (COLS, ROWS, DatasetManifest, IRFrame, LabelMask, ManifestEntry, WeatherRecord,
                   save_frame, save_label, save_manifest, save_weather)
from .preprocessing import AtmosphericParams, atmosphere_grid, magnus_vapour_pressure

T_START = 1_600_000_000.0
DAY = 86_400.0


@dataclass(frozen=True)
class SceneParams:
    rows: int = ROWS
    cols: int = COLS
    cover: tuple = (0.15, 0.45)  # cloud-covered fraction range of cloudy frames
    blob_scale: float = 4.0  # smoothing sigma of the cloud field (px)
    amplitude: tuple = (8.0, 25.0)  # cloud temperature excess (K)
    edge_floor: float = 0.6  # fraction of the amplitude reached at a cloud edge
    noise: float = 0.15  # pixel noise sigma (K)
    stains: int = 6
    stain_amplitude: tuple = (0.5, 2.0)
    translation: tuple = (1, 0)  # (u along columns, v along rows), px/frame
    theta1: tuple = (235.0, 255.0)
    theta2: tuple = (400.0, 900.0)
    sun_peak: tuple = (8.0, 20.0)  # direct-term maximum theta3/theta4 (K)
    theta4: tuple = (3.0, 7.0)
    sun_jitter: float = 2.0  # px around the frame centre
    n_clear_calibration: int = 5
    include_clear: bool = True  # one clear-sky labelled frame per split


WELL_SEPARATED = SceneParams()
NOISY_BOUNDARY = SceneParams(edge_floor=0.4, amplitude=(6.0, 15.0), noise=2.0)


@dataclass(frozen=True)
class SynthScene:
    frame: IRFrame
    previous: Optional[IRFrame]
    label: LabelMask
    atmosphere: AtmosphericParams
    clouds: np.ndarray  # temperature excess (K) of the current frame
    weather: list
    split: str
    clear_sky: bool
    labelled: bool = True


@dataclass(frozen=True)
class SynthDataset:
    scenes: tuple
    stains: np.ndarray
    params: SceneParams = field(default_factory=SceneParams)


def stain_pattern(rng: np.random.Generator, p: SceneParams) -> np.ndarray:
    ii, jj = np.indices((p.rows, p.cols), dtype=float)
    w = np.zeros((p.rows, p.cols))
    for _ in range(p.stains):
        ci, cj = rng.uniform(0, p.rows), rng.uniform(0, p.cols)
        s = rng.uniform(1.5, 4.0)
        a = rng.uniform(*p.stain_amplitude) * rng.choice([-1.0, 1.0])
        w += a * np.exp(-0.5 * ((ii - ci) ** 2 + (jj - cj) ** 2) / s ** 2)
    return w


def cloud_canvas(rng: np.random.Generator, p: SceneParams, cover: float, pad: int) -> np.ndarray:
    """Temperature excess on a padded canvas; zero outside the cloud support."""
    shape = (p.rows + 2 * pad, p.cols + 2 * pad)
    if cover <= 0:
        return np.zeros(shape)
    amp = rng.uniform(*p.amplitude)
    f = ndimage.gaussian_filter(rng.standard_normal(shape), p.blob_scale, mode="wrap")
    inner = f[pad:pad + p.rows, pad:pad + p.cols]
    thr = np.quantile(inner, 1.0 - cover)
    top = f.max()
    profile = np.clip((f - thr) / (top - thr), 0.0, 1.0)
    support = f > thr
    return np.where(support, amp * (p.edge_floor + (1.0 - p.edge_floor) * profile), 0.0)


def sun_model(rng: np.random.Generator, p: SceneParams) -> AtmosphericParams:
    """Direct-term parameters, constant over a dataset (the tracker keeps the Sun centred)."""
    theta4 = rng.uniform(*p.theta4)
    peak = rng.uniform(*p.sun_peak)
    x0 = (p.rows - 1) / 2.0 + rng.uniform(-p.sun_jitter, p.sun_jitter)
    y0 = (p.cols - 1) / 2.0 + rng.uniform(-p.sun_jitter, p.sun_jitter)
    return AtmosphericParams(1.0, np.inf, peak * theta4, theta4, x0, y0)


def random_atmosphere(rng: np.random.Generator, p: SceneParams, sun: AtmosphericParams) -> AtmosphericParams:
    theta2 = rng.uniform(*p.theta2) * rng.choice([-1.0, 1.0])
    return replace(sun, theta1=rng.uniform(*p.theta1), theta2=theta2)


def weather_around(rng: np.random.Generator, t: float, span: int = 3) -> list:
    air = rng.uniform(288.0, 302.0)
    dew = air - rng.uniform(5.0, 20.0)
    pres = rng.uniform(83_500.0, 84_500.0)
    out = []
    for k in range(-span, span + 1):
        a = air + 0.05 * k
        d = dew + 0.02 * k
        hum = magnus_vapour_pressure(d) / magnus_vapour_pressure(a)
        out.append(WeatherRecord(t + 600.0 * k, a, d, pres + 2.0 * k, hum))
    return out


def render_scene(rng: np.random.Generator, p: SceneParams, stains: np.ndarray, sun: AtmosphericParams,
                 t: float, cover: float, split: str, labelled: bool = True,
                 with_previous: bool = True) -> SynthScene:
    du, dv = p.translation
    pad = int(max(abs(du), abs(dv))) + 1
    atm = random_atmosphere(rng, p, sun)
    background = atmosphere_grid(atm, (p.rows, p.cols))
    canvas = cloud_canvas(rng, p, cover, pad)
    clouds = canvas[pad:pad + p.rows, pad:pad + p.cols]
    prev_clouds = canvas[pad + dv:pad + dv + p.rows, pad + du:pad + du + p.cols]
    meta = dict(sun_elevation=round(float(rng.uniform(20.0, 75.0)), 2),
                sun_azimuth=round(float(rng.uniform(140.0, 210.0)), 2))

    def frame(cl, ts):
        kelvin = background + cl + stains + rng.normal(0.0, p.noise, background.shape)
        return IRFrame.from_kelvin(kelvin, timestamp=ts, **meta)

    current = frame(clouds, t)
    previous = frame(prev_clouds, t - 60.0) if with_previous else None
    label = LabelMask((clouds > 0).astype(np.int8))
    return SynthScene(current, previous, label, atm, clouds, weather_around(rng, t), split,
                      clear_sky=cover <= 0, labelled=labelled)


def generate(seed: int, n_train: int = 7, n_test: int = 5, params: SceneParams = WELL_SEPARATED) -> SynthDataset:
    """Build an in-memory synthetic dataset; a pure function of its arguments."""
    rng = np.random.default_rng(seed)
    p = params
    stains = stain_pattern(rng, p)
    sun = sun_model(rng, p)
    scenes = []
    t = T_START
    for k in range(p.n_clear_calibration):
        scenes.append(render_scene(rng, p, stains, sun, t + 3600.0 * k, 0.0, "test", labelled=False,
                                   with_previous=False))
    for split, n in (("train", n_train), ("test", n_test)):
        for k in range(n):
            t += DAY
            clear = p.include_clear and n >= 3 and k == n - 1
            cover = 0.0 if clear else rng.uniform(*p.cover)
            scenes.append(render_scene(rng, p, stains, sun, t, cover, split))
    return SynthDataset(tuple(scenes), stains, p)


def write_dataset(ds: SynthDataset, out_dir) -> DatasetManifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, sc in enumerate(ds.scenes):
        stem = f"{sc.split}_{k:03d}"
        fpath = out / f"{stem}.frame"
        wpath = out / f"{stem}_weather.csv"
        save_frame(fpath, sc.frame)
        save_weather(wpath, sc.weather)
        lpath = None
        if sc.labelled:
            lpath = out / f"{stem}.label"
            save_label(lpath, sc.label)
        ppath = None
        if sc.previous is not None:
            ppath = out / f"{stem}_prev.frame"
            save_frame(ppath, sc.previous)
        entries.append(ManifestEntry(fpath, wpath, lpath, sc.split, sc.clear_sky, ppath))
    manifest = DatasetManifest(tuple(entries), out)
    save_manifest(out / "manifest.csv", manifest)
    return manifest


def synth_dataset(seed: int, n_train: int = 7, n_test: int = 5, params: SceneParams = WELL_SEPARATED,
                  out_dir=None):
    """Generate a dataset; with ``out_dir`` also write it and return the manifest."""
    ds = generate(seed, n_train, n_test, params)
    if out_dir is None:
        return ds
    return write_dataset(ds, out_dir)


def with_params(base: SceneParams, **kw) -> SceneParams:
    return replace(base, **kw)
