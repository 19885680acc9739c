"""Uniform train/segment interface over every model family, plus JSON model files."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import discriminative as disc
from . import generative as gen
from . import mrf
from .features import FeatureFrame, FeatureSpec, Standardizer, stack, standardize
from .core import ConfigurationError

FORMAT = "skyseg-model"
VERSION = 1

DEFAULT_HYPER = {
    "nbc": {},
    "gda": {"gamma": 1.0},
    "kmeans": {},
    "gmm": {"gamma": 1.0},
    "mrf": {"gamma": 1.0, "beta": 1.0, "order": 1},
    "sa-mrf": {"gamma": 1.0, "beta": 1.0, "order": 1, "alpha": 0.75, "t_max": 20, "T0": 1.0, "fraction": 0.2},
    "icm-mrf": {"gamma": 1.0, "beta": 1.0, "order": 1},
    "sa-icm-mrf": {"gamma": 1.0, "beta": 1.0, "order": 1, "alpha": 0.75, "t_max": 20, "T0": 1.0,
                   "fraction": 0.2},
    "rrc": {"gamma": 1.0, "n": 2},
    "svc": {"C": 1.0, "n": 2},
    "gpc": {"gamma": 1.0, "n": 2, "evidence": False},
}
FAMILIES = tuple(DEFAULT_HYPER)
GENERATIVE = ("nbc", "gda", "kmeans", "gmm")
MRF_FAMILIES = ("mrf", "sa-mrf", "icm-mrf", "sa-icm-mrf")
DISCRIMINATIVE = ("rrc", "svc", "gpc")
UNSUPERVISED = ("kmeans", "gmm", "icm-mrf", "sa-icm-mrf")


class ModelFileError(ValueError):
    pass


def resolve_hyper(family: str, hyper: Optional[dict] = None) -> dict:
    if family not in DEFAULT_HYPER:
        raise ConfigurationError(f"unknown model family {family!r}; choose from {', '.join(FAMILIES)}")
    out = dict(DEFAULT_HYPER[family])
    for k, v in (hyper or {}).items():
        if k not in out:
            raise ConfigurationError(f"{family} has no hyperparameter {k!r}")
        out[k] = type(out[k])(v) if not isinstance(out[k], bool) else bool(v)
    return out


@dataclass(frozen=True)
class Segmenter:
    family: str
    spec: FeatureSpec
    hyper: dict
    model: Any
    standardizer: Optional[Standardizer] = None
    lam: float = 1.0
    seed: int = 0
    train_time_s: float = 0.0

    def prepare(self, frame: FeatureFrame) -> FeatureFrame:
        if tuple(frame.names) != tuple(self.spec.names()):
            raise ConfigurationError(
                f"feature mismatch: model expects {self.spec.family}/{self.spec.neighborhood}, "
                f"got columns {list(frame.names)[:3]}...")
        return self.standardizer(frame) if self.standardizer is not None else frame

    def _schedule(self) -> Optional[mrf.AnnealSchedule]:
        if not self.family.startswith("sa-"):
            return None
        h = self.hyper
        return mrf.AnnealSchedule(h["T0"], h["alpha"], int(h["t_max"]))

    def segment(self, frame: FeatureFrame, lam: Optional[float] = None):
        """Return ``(probability grid, mask grid)`` for one frame."""
        lam = self.lam if lam is None else float(lam)
        f = self.prepare(frame)
        shape = (f.rows, f.cols)
        if self.family in MRF_FAMILIES:
            mode = "sa" if self.family.startswith("sa-") else "icm"
            kw = dict(schedule=self._schedule(), seed=self.seed, fraction=self.hyper.get("fraction", 0.2), lam=lam)
            if self.family.endswith("icm-mrf"):
                _, seg = mrf.adapt(self.model, f, mode=mode, **kw)
            else:
                seg = mrf.segment(self.model, f, mode, **kw)
            return seg.probability, seg.mask.astype(np.int8)
        if self.family in DISCRIMINATIVE:
            p = self.model.probability(disc.poly_expand(f.data, self.model.order))
        else:
            p = self.model.posterior(f.data)
        p = np.asarray(p, dtype=float).reshape(shape)
        return p, gen.decide(p, lam)

    def score(self, frame: FeatureFrame) -> np.ndarray:
        """Cloud probability at ``lam = 1``, the input of ROC lambda selection."""
        return self.segment(frame, 1.0)[0]

    def with_lambda(self, lam: float) -> "Segmenter":
        return replace(self, lam=float(lam))


def _fit_core(family: str, h: dict, frames: list, x: np.ndarray, y: Optional[np.ndarray], seed: int):
    if family in ("nbc", "gda"):
        if y is None:
            raise ConfigurationError(f"{family} needs labelled training frames")
        fit = gen.fit_gda if family == "gda" else gen.fit_nbc
        return fit(x, y, h.get("gamma", 0.0))
    if family in ("kmeans", "gmm"):
        m = gen.fit_kmeans(x, 2, seed) if family == "kmeans" else gen.fit_gmm(x, 2, h["gamma"], seed)
        assign = m.assign(x)
        ref = None
        if y is None and "dT" in frames[0].names:
            ref = x[:, list(frames[0].names).index("dT")]
        return m.with_mapping(gen.map_clusters(assign, y, ref))
    if family in ("mrf", "sa-mrf"):
        if y is None:
            raise ConfigurationError(f"{family} needs labelled training frames")
        return mrf.fit_supervised(frames, h["gamma"], h["beta"], int(h["order"]))
    if family in ("icm-mrf", "sa-icm-mrf"):
        labels = frames if y is not None else None
        model, _ = mrf.fit_icm_unsupervised(frames, h["beta"], int(h["order"]), seed, h["gamma"], labels=labels)
        return model
    if family in DISCRIMINATIVE:
        if y is None:
            raise ConfigurationError(f"{family} needs labelled training frames")
        phi = disc.poly_expand(x, int(h["n"]))
        if family == "rrc":
            return disc.fit_rrc(phi, y, h["gamma"], int(h["n"]))
        if family == "svc":
            return disc.fit_svc(phi, y, h["C"], int(h["n"]))
        return disc.fit_gpc(phi, y, h["gamma"], int(h["n"]), evidence=bool(h["evidence"]))
    raise ConfigurationError(f"unknown model family {family!r}")


def train(family: str, frames: Sequence[FeatureFrame], spec: FeatureSpec, hyper: Optional[dict] = None,
          seed: int = 0, lam: float = 1.0) -> Segmenter:
    """Fit one model family on feature frames (labels used when present)."""
    h = resolve_hyper(family, hyper)
    frames = list(frames)
    if not frames:
        raise ConfigurationError("no training frames")
    t0 = time.perf_counter()
    stdz = standardize(frames) if spec.standardize else None
    if stdz is not None:
        frames = [stdz(f) for f in frames]
    x, y = stack(frames)
    model = _fit_core(family, h, frames, x, y, seed)
    return Segmenter(family, spec, h, model, stdz, float(lam), seed, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# serialization


def _arr(a) -> Any:
    return None if a is None else np.asarray(a).tolist()


def _gclass(c: gen.GaussianClass) -> dict:
    return {"mean": _arr(c.mean), "cov": _arr(c.cov), "prior": float(c.prior)}


def _ungclass(d: dict) -> gen.GaussianClass:
    return gen.GaussianClass(np.array(d["mean"], dtype=float), np.array(d["cov"], dtype=float), float(d["prior"]))


def _model_payload(family: str, m) -> dict:
    if family in ("nbc", "gda"):
        return {"kind": m.kind, "gamma": m.gamma, "classes": [_gclass(c) for c in m.classes]}
    if family == "kmeans":
        return {"centroids": _arr(m.centroids), "cluster_class": _arr(m.cluster_class)}
    if family == "gmm":
        return {"gamma": m.gamma, "components": [_gclass(c) for c in m.components],
                "cluster_class": _arr(m.cluster_class)}
    if family in MRF_FAMILIES:
        return {"classes": [_gclass(c) for c in m.classes], "beta": m.beta, "clique_order": m.clique_order,
                "gamma": m.gamma}
    return {"family": m.family, "weights": _arr(m.weights), "order": m.order, "input_dim": m.input_dim,
            "hyper": m.hyper, "covariance": _arr(m.covariance), "converged": m.converged}


def _model_from_payload(family: str, d: dict):
    if family in ("nbc", "gda"):
        return gen.GaussianClassifier(d["kind"], tuple(_ungclass(c) for c in d["classes"]), d["gamma"])
    if family == "kmeans":
        return gen.KMeansModel(np.array(d["centroids"], dtype=float), (), np.array(d["cluster_class"]))
    if family == "gmm":
        return gen.MixtureModel(tuple(_ungclass(c) for c in d["components"]), (), d["gamma"],
                                np.array(d["cluster_class"]))
    if family in MRF_FAMILIES:
        return mrf.MrfModel(tuple(_ungclass(c) for c in d["classes"]), d["beta"], d["clique_order"], d["gamma"])
    cov = d.get("covariance")
    return disc.LinearModel(d["family"], np.array(d["weights"], dtype=float), d["order"], d["input_dim"],
                            d.get("hyper", {}), covariance=None if cov is None else np.array(cov, dtype=float),
                            converged=d.get("converged", True))


def to_dict(seg: Segmenter) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "family": seg.family,
        "features": seg.spec.to_dict(),
        "hyper": seg.hyper,
        "lambda": seg.lam,
        "seed": seg.seed,
        "train_time_s": seg.train_time_s,
        "standardizer": None if seg.standardizer is None else {
            "mean": _arr(seg.standardizer.mean), "var": _arr(seg.standardizer.var)},
        "model": _model_payload(seg.family, seg.model),
    }


def from_dict(d: dict) -> Segmenter:
    if d.get("format") != FORMAT:
        raise ModelFileError("not a skyseg model file")
    if d.get("version") != VERSION:
        raise ModelFileError(f"unsupported model file version {d.get('version')!r}")
    try:
        family = d["family"]
        spec = FeatureSpec(**d["features"])
        st = d.get("standardizer")
        stdz = None if st is None else Standardizer(np.array(st["mean"], dtype=float), np.array(st["var"], dtype=float))
        model = _model_from_payload(family, d["model"])
        return Segmenter(family, spec, resolve_hyper(family, d["hyper"]), model, stdz, float(d["lambda"]),
                         int(d.get("seed", 0)), float(d.get("train_time_s", 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFileError(f"malformed model file: {exc}") from exc


def save_model(path, seg: Segmenter) -> None:
    Path(path).write_text(json.dumps(to_dict(seg), indent=1, sort_keys=True) + "\n")


def load_model(path) -> Segmenter:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{path}: not valid JSON ({exc})") from exc
    return from_dict(d)
