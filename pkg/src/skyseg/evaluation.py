"""Metrics, ROC-based virtual-prior selection, LOO grid search, timing and voting."""
from __future__ import annotations

import csv
import itertools
import json
import logging
import os
import statistics
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .features import FeatureSpec, extract
from .generative import FitError, decide
from .models import MRF_FAMILIES, ConfigurationError, Segmenter, resolve_hyper, train

log = logging.getLogger(__name__)

DEFAULT_LAMBDAS = tuple(float(v) for v in np.logspace(np.log10(0.02), np.log10(2.0), 50))


class DegenerateClassWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# confusion matrix and scores


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def sensitivity(self) -> float:
        return _rate(self.tp, self.fn, "sensitivity")

    @property
    def specificity(self) -> float:
        return _rate(self.tn, self.fp, "specificity")


def _rate(hit: int, miss: int, name: str) -> float:
    """``hit / (hit + miss)``; with no members of the class, 1 if no errors else 0."""
    if hit + miss == 0:
        warnings.warn(f"{name} undefined (class absent from truth); using 1", DegenerateClassWarning, stacklevel=3)
        return 1.0 if miss == 0 else 0.0
    return hit / (hit + miss)


def confusion(pred, truth) -> ConfusionMatrix:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    p = pred.astype(bool)
    t = truth.astype(bool)
    return ConfusionMatrix(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & ~t)), int(np.sum(~p & t)))


def sensitivity(cm: ConfusionMatrix) -> float:
    return cm.sensitivity


def specificity(cm: ConfusionMatrix) -> float:
    return cm.specificity


def j_stat(cm: ConfusionMatrix) -> float:
    return cm.sensitivity + cm.specificity - 1.0


def acc(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy of an empty confusion matrix")
    return (cm.tp + cm.tn) / cm.total


# ---------------------------------------------------------------------------
# ROC and virtual prior


def _j_from_counts(tp, fn, tn, fp) -> np.ndarray:
    pos = tp + fn
    neg = tn + fp
    sens = np.where(pos > 0, tp / np.maximum(pos, 1), (fn == 0).astype(float))
    spec = np.where(neg > 0, tn / np.maximum(neg, 1), (fp == 0).astype(float))
    return sens + spec - 1.0


def j_curve(scores, truth, lambdas) -> np.ndarray:
    """J of the rule ``score * lam >= 0.5`` for every ``lam`` (vectorized)."""
    s = np.asarray(scores, dtype=float).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    pos = np.sort(s[t])
    neg = np.sort(s[~t])
    lam = np.asarray(lambdas, dtype=float)
    tp = np.array([pos.size - np.searchsorted(pos * l, 0.5, side="left") for l in lam])
    fp = np.array([neg.size - np.searchsorted(neg * l, 0.5, side="left") for l in lam])
    return _j_from_counts(tp, pos.size - tp, neg.size - fp, fp)


def roc_select_lambda(scores, truth, lambdas: Sequence[float] = DEFAULT_LAMBDAS):
    """``(lam*, J*)`` maximizing J over the grid; ties go to the smaller ``lam``."""
    s = np.asarray(scores, dtype=float).ravel()
    if s.size and (s.min() < 0 or s.max() > 1):
        raise ValueError("scores must lie in [0, 1]")
    t = np.asarray(truth).astype(bool).ravel()
    grid = np.asarray(sorted(set(float(v) for v in lambdas)))
    if grid.size == 0:
        raise ValueError("empty lambda grid")
    if t.all() or not t.any():
        warnings.warn("truth has a single class; returning lambda = 1", DegenerateClassWarning, stacklevel=2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateClassWarning)
            return 1.0, float(j_stat(confusion(decide(s, 1.0), t)))
    js = j_curve(s, t, grid)
    k = int(np.argmax(js))  # first maximum = smallest lambda
    return float(grid[k]), float(js[k])


def roc_curve(scores, truth):
    """``(fpr, tpr, thresholds)`` from sorting scores, thresholds descending."""
    s = np.asarray(scores, dtype=float).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    thr = np.unique(s)[::-1]
    pos = np.sort(s[t])
    neg = np.sort(s[~t])
    tp = pos.size - np.searchsorted(pos, thr, side="left")
    fp = neg.size - np.searchsorted(neg, thr, side="left")
    tpr = tp / max(pos.size, 1)
    fpr = fp / max(neg.size, 1)
    return np.concatenate([[0.0], fpr]), np.concatenate([[0.0], tpr]), np.concatenate([[np.inf], thr])


# ---------------------------------------------------------------------------
# reports


@dataclass
class ImageResult:
    name: str
    cm: ConfusionMatrix
    test_time_s: float = 0.0

    @property
    def row(self) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateClassWarning)
            return {"image": self.name, "tp": self.cm.tp, "fp": self.cm.fp, "tn": self.cm.tn, "fn": self.cm.fn,
                    "sensitivity": self.cm.sensitivity, "specificity": self.cm.specificity,
                    "J": j_stat(self.cm), "ACC": acc(self.cm), "test_time_s": self.test_time_s}


@dataclass
class EvalReport:
    model: str
    images: list = field(default_factory=list)
    train_time_s: float = 0.0

    @property
    def cm(self) -> ConfusionMatrix:
        total = ConfusionMatrix(0, 0, 0, 0)
        for r in self.images:
            total = total + r.cm
        return total

    @property
    def j(self) -> float:
        return j_stat(self.cm)

    @property
    def accuracy(self) -> float:
        return acc(self.cm)

    @property
    def test_time_s_per_image(self) -> float:
        return float(np.mean([r.test_time_s for r in self.images])) if self.images else 0.0

    def summary(self) -> dict:
        cm = self.cm
        return {"model": self.model, "image": "ALL", "tp": cm.tp, "fp": cm.fp, "tn": cm.tn, "fn": cm.fn,
                "sensitivity": cm.sensitivity, "specificity": cm.specificity, "J": self.j, "ACC": self.accuracy,
                "train_time_s": self.train_time_s, "test_time_s": self.test_time_s_per_image}


CSV_FIELDS = ["model", "image", "tp", "fp", "tn", "fn", "sensitivity", "specificity", "J", "ACC",
              "train_time_s", "test_time_s"]


def write_reports(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        for rep in reports:
            for img in rep.images:
                w.writerow({"model": rep.model, "train_time_s": rep.train_time_s, **img.row})
            w.writerow(rep.summary())


def write_plot_data(path, reports: Sequence[EvalReport]) -> None:
    """JSON with ``J vs model`` and ``time vs model`` series."""
    data = {
        "models": [r.model for r in reports],
        "J": [r.j for r in reports],
        "test_time_s_per_image": [r.test_time_s_per_image for r in reports],
        "train_time_s": [r.train_time_s for r in reports],
    }
    Path(path).write_text(json.dumps(data, indent=1) + "\n")


def evaluate(seg: Segmenter, frames: Sequence, names: Optional[Sequence[str]] = None,
             lam: Optional[float] = None) -> EvalReport:
    """Segment labelled feature frames and collect per-image confusion matrices."""
    rep = EvalReport(seg.family, train_time_s=seg.train_time_s)
    for k, f in enumerate(frames):
        if f.labels is None:
            raise ConfigurationError("evaluation needs labelled frames")
        t0 = time.perf_counter()
        _, mask = seg.segment(f, lam)
        dt = time.perf_counter() - t0
        name = names[k] if names is not None else f"image_{k}"
        rep.images.append(ImageResult(name, confusion(mask.ravel(), f.labels), dt))
    return rep


# ---------------------------------------------------------------------------
# leave-one-out grid search


@dataclass(frozen=True)
class GridSpec:
    family: str
    hyper: dict = field(default_factory=dict)  # name -> list of values
    lambdas: tuple = DEFAULT_LAMBDAS
    features: tuple = (FeatureSpec(),)

    def __post_init__(self):
        resolve_hyper(self.family, {k: v[0] for k, v in self.hyper.items() if len(v)})
        if not self.lambdas or not self.features or any(len(v) == 0 for v in self.hyper.values()):
            raise ConfigurationError("grids must be non-empty")

    def configs(self) -> list:
        names = sorted(self.hyper)
        combos = itertools.product(*[sorted(self.hyper[n]) for n in names])
        return [dict(zip(names, c)) for c in combos]


@dataclass
class CVResult:
    family: str
    best: Optional[dict]  # {"features", "hyper", "lambda", "J"}
    table: list  # rows: features, hyper, lambda, mean J, fold Js, valid


def _fold_js(family, spec, hyper, frames, lambdas, seed) -> np.ndarray:
    """``(folds, lambdas)`` J table of one configuration."""
    out = np.empty((len(frames), len(lambdas)))
    for k in range(len(frames)):
        rest = frames[:k] + frames[k + 1:]
        held = frames[k]
        seg = train(family, rest, spec, hyper, seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateClassWarning)
            if family in MRF_FAMILIES:
                for j, lam in enumerate(lambdas):
                    mask = seg.segment(held, lam)[1].ravel()
                    out[k, j] = j_stat(confusion(mask, held.labels))
            else:
                out[k] = j_curve(seg.score(held).ravel(), held.labels, lambdas)
    return out


def _cv_task(args):
    family, spec, hyper, frames, lambdas, seed = args
    with threadpool_limits(1):
        try:
            return _fold_js(family, spec, hyper, frames, lambdas, seed), None
        except (FitError, ConfigurationError, np.linalg.LinAlgError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"


def _hyper_key(h: dict) -> tuple:
    return tuple((k, float(v)) for k, v in sorted(h.items()))


def loo_cross_validate(derived: Sequence, labels: Sequence, grid: GridSpec, seed: int = 0,
                       threads: int = 1) -> CVResult:
    """Leave-one-image-out validation of every (features, hyper, lambda) combination.

    ``derived`` are derived frames of the training images and ``labels`` their
    masks.  The best combination maximizes the mean held-out J; ties go to
    smaller hyperparameters, then smaller lambda.  Configurations where any
    fold fails to train are marked invalid and skipped.
    """
    if len(derived) < 2:
        raise ConfigurationError("LOO cross-validation needs at least 2 training images")
    lambdas = tuple(sorted(set(float(v) for v in grid.lambdas)))
    tasks = []
    for spec in grid.features:
        frames = [extract(d, spec, l) for d, l in zip(derived, labels)]
        for hyper in grid.configs():
            tasks.append((grid.family, spec, hyper, frames, lambdas, seed))
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
            results = list(pool.map(_cv_task, tasks))
    else:
        results = [_cv_task(t) for t in tasks]
    table = []
    best = None
    best_key = None
    for (family, spec, hyper, _, _, _), (js, err) in zip(tasks, results):
        if js is None:
            log.warning("grid point %s %s invalid: %s", spec.to_dict(), hyper, err)
            table.append({"features": spec.to_dict(), "hyper": hyper, "lambda": None, "J": None,
                          "folds": None, "valid": False, "error": err})
            continue
        means = js.mean(axis=0)
        for j, lam in enumerate(lambdas):
            table.append({"features": spec.to_dict(), "hyper": hyper, "lambda": lam, "J": float(means[j]),
                          "folds": js[:, j].tolist(), "valid": True})
        j = int(np.argmax(means))
        key = (-float(means[j]), _hyper_key(hyper), lambdas[j])
        if best_key is None or key < best_key:
            best_key = key
            best = {"features": spec.to_dict(), "hyper": hyper, "lambda": lambdas[j], "J": float(means[j])}
    return CVResult(grid.family, best, table)


def write_cv_table(path, result: CVResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["family", "features", "hyper", "lambda", "mean_J", "fold_J", "valid"])
        for row in result.table:
            w.writerow([result.family, json.dumps(row["features"], sort_keys=True),
                        json.dumps(row["hyper"], sort_keys=True), row["lambda"], row["J"],
                        json.dumps(row["folds"]), row["valid"]])


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class Timing:
    model: str
    repetitions: int
    preprocess_median_s: float
    preprocess_mean_s: float
    segment_median_s: float
    segment_mean_s: float
    total_median_s: float
    total_mean_s: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _timing(name, reps, pre, seg, tot) -> Timing:
    return Timing(name, reps, statistics.median(pre), statistics.fmean(pre), statistics.median(seg),
                  statistics.fmean(seg), statistics.median(tot), statistics.fmean(tot))


def benchmark_many(segmenters: Sequence[Segmenter], derived: Sequence, repetitions: int = 10) -> list:
    """Per-image timings of several models, interleaved to share drift.

    Each repetition times, per model and frame, feature extraction
    (preprocessing) and segmentation on a monotonic clock.  A warm-up pass
    is discarded and BLAS is pinned to one thread.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    clock = time.perf_counter
    per = {k: ([], [], []) for k in range(len(segmenters))}
    with threadpool_limits(1):
        for rep in range(repetitions + 1):
            for k, seg in enumerate(segmenters):
                for d in derived:
                    t0 = clock()
                    f = extract(d, seg.spec)
                    t1 = clock()
                    seg.segment(f)
                    t2 = clock()
                    if rep > 0:
                        per[k][0].append(t1 - t0)
                        per[k][1].append(t2 - t1)
                        per[k][2].append(t2 - t0)
    return [_timing(seg.family, repetitions, *per[k]) for k, seg in enumerate(segmenters)]


def benchmark(seg: Segmenter, derived: Sequence, repetitions: int = 10) -> Timing:
    return benchmark_many([seg], derived, repetitions)[0]


# ---------------------------------------------------------------------------
# voting


@dataclass(frozen=True)
class VotingScheme:
    """Majority vote of hard predictions; an even split goes to cloud."""

    members: tuple

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("a voting scheme needs at least one member")


def vote(scheme, frames: Sequence):
    """``frames[m]`` is the feature frame for member ``m``.

    Returns ``(vote fraction grid, mask grid)``.
    """
    members = scheme.members if isinstance(scheme, VotingScheme) else tuple(scheme)
    if len(frames) != len(members):
        raise ConfigurationError(f"{len(members)} members but {len(frames)} feature frames")
    votes = None
    for seg, f in zip(members, frames):
        _, mask = seg.segment(f)
        votes = mask.astype(np.int64) if votes is None else votes + mask
    n = len(members)
    return votes / n, (2 * votes >= n).astype(np.int8)
