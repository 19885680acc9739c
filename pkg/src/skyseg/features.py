"""Per-pixel feature vectors built from derived frame channels."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from .core import ConfigurationError

FAMILIES = {
    "X1": ("T", "H"),
    "X2": ("T_w", "H_w"),
    "X3": ("dT", "H_dd"),
    "X4": ("mag_v", "I8", "dT"),
}

# (row, col) offsets appended after the centre pixel: N, W, E, S, then NW, NE, SW, SE
FIRST_ORDER = ((-1, 0), (0, -1), (0, 1), (1, 0))
SECOND_ORDER = FIRST_ORDER + ((-1, -1), (-1, 1), (1, -1), (1, 1))
NEIGHBORHOODS = {"single": (), "first": FIRST_ORDER, "second": SECOND_ORDER}


@dataclass(frozen=True)
class FeatureSpec:
    family: str = "X3"
    neighborhood: str = "single"
    standardize: bool = False

    def __post_init__(self):
        fam = self.family.upper()
        nb = self.neighborhood.lower()
        if fam not in FAMILIES:
            raise ConfigurationError(f"unknown feature family {self.family!r}")
        if nb not in NEIGHBORHOODS:
            raise ConfigurationError(f"unknown neighborhood {self.neighborhood!r}")
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "neighborhood", nb)

    @property
    def channels(self) -> tuple:
        return FAMILIES[self.family]

    @property
    def dim(self) -> int:
        return len(self.channels) * (1 + len(NEIGHBORHOODS[self.neighborhood]))

    def names(self) -> list[str]:
        out = list(self.channels)
        for di, dj in NEIGHBORHOODS[self.neighborhood]:
            out += [f"{c}[{di:+d},{dj:+d}]" for c in self.channels]
        return out

    def to_dict(self) -> dict:
        return {"family": self.family, "neighborhood": self.neighborhood, "standardize": self.standardize}


@dataclass(frozen=True)
class FeatureFrame:
    rows: int
    cols: int
    data: np.ndarray  # (rows * cols, dim), row-major pixels
    labels: Optional[np.ndarray] = None  # (rows * cols,) in {0, 1}
    names: tuple = ()

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple:
        return (self.rows, self.cols)

    def column(self, name: str) -> np.ndarray:
        return self.data[:, self.names.index(name)]

    def with_data(self, data: np.ndarray) -> "FeatureFrame":
        return FeatureFrame(self.rows, self.cols, data, self.labels, self.names)


def _shifted(grid: np.ndarray, di: int, dj: int) -> np.ndarray:
    """Value of the (di, dj) neighbour at every pixel, replicating the border."""
    rows, cols = grid.shape
    r = np.clip(np.arange(rows) + di, 0, rows - 1)
    c = np.clip(np.arange(cols) + dj, 0, cols - 1)
    return grid[np.ix_(r, c)]


def available(derived, spec: FeatureSpec) -> bool:
    """Whether ``derived`` holds every channel ``spec`` needs (flow needs a previous frame)."""
    for name in spec.channels:
        try:
            g = np.asarray(derived.channel(name), dtype=float)
        except KeyError:
            return False
        if np.isnan(g).any():
            return False
    return True


def extract(derived, spec: FeatureSpec, labels=None) -> FeatureFrame:
    """Stack the family channels of ``derived`` and their neighbours into vectors."""
    grids = []
    for name in spec.channels:
        try:
            g = np.asarray(derived.channel(name), dtype=float)
        except KeyError:
            hint = " (needs a previous frame for flow)" if name == "mag_v" else ""
            raise ConfigurationError(f"channel {name!r} unavailable for {spec.family}{hint}") from None
        if np.isnan(g).any():
            raise ConfigurationError(f"channel {name!r} not computed at this preprocessing stage")
        grids.append(g)
    rows, cols = grids[0].shape
    planes = list(grids)
    for di, dj in NEIGHBORHOODS[spec.neighborhood]:
        planes.extend(_shifted(g, di, dj) for g in grids)
    data = np.stack(planes, axis=-1).reshape(rows * cols, len(planes))
    lab = None
    if labels is not None:
        lab = np.asarray(getattr(labels, "labels", labels)).reshape(-1).astype(np.int8)
        if lab.size != rows * cols:
            raise ConfigurationError("labels do not match the frame size")
    return FeatureFrame(rows, cols, data, lab, tuple(spec.names()))


@dataclass(frozen=True)
class Standardizer:
    """Frozen training statistics: ``(x - mean) / var``.

    Dimensions with zero variance are only centred.  Dividing by the variance
    rather than the standard deviation is deliberate.
    """

    mean: np.ndarray
    var: np.ndarray

    def transform(self, x: np.ndarray) -> np.ndarray:
        scale = np.where(self.var > 0, self.var, 1.0)
        return (np.asarray(x, dtype=float) - self.mean) / scale

    def __call__(self, frame: FeatureFrame) -> FeatureFrame:
        return frame.with_data(self.transform(frame.data))


def standardize(frames: Sequence) -> Standardizer:
    """Fit a :class:`Standardizer` on training frames (or arrays)."""
    mats = [f.data if isinstance(f, FeatureFrame) else np.asarray(f, dtype=float) for f in frames]
    if not mats or sum(m.shape[0] for m in mats) == 0:
        raise ValueError("standardize needs at least one sample")
    x = np.vstack(mats)
    return Standardizer(x.mean(axis=0), x.var(axis=0))


def stack(frames: Sequence[FeatureFrame]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    x = np.vstack([f.data for f in frames])
    if all(f.labels is not None for f in frames):
        return x, np.concatenate([f.labels for f in frames])
    return x, None


def write_csv(path, frame: FeatureFrame) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(frame.names) + ["label"])
        labels = frame.labels if frame.labels is not None else [""] * frame.data.shape[0]
        for row, lab in zip(frame.data, labels):
            w.writerow([repr(float(v)) for v in row] + [lab if lab == "" else int(lab)])


def read_csv(path, rows: int, cols: int) -> FeatureFrame:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data, labels = [], []
        for row in r:
            data.append([float(v) for v in row[:-1]])
            labels.append(row[-1])
    lab = None if any(v == "" for v in labels) else np.array([int(v) for v in labels], dtype=np.int8)
    return FeatureFrame(rows, cols, np.array(data), lab, tuple(header[:-1]))
