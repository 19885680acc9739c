"""Domain types and file I/O for radiometric frames, weather, labels and manifests.

Frame files are plain text: the first line holds ``rows cols`` optionally
followed by ``key=value`` metadata tokens (``t``, ``elev``, ``az``), then
``rows`` lines of ``cols`` space-separated centi-Kelvin integers.  Label files
use the same grid layout with cells in {0, 1}.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

ROWS = 60
COLS = 80
#: maximum distance between a frame and its nearest weather record (seconds)
WEATHER_TOLERANCE_S = 600.0

WEATHER_HEADER = ["timestamp", "air_temp_K", "dew_point_K", "pressure_Pa", "humidity"]
MANIFEST_HEADER = ["frame", "weather", "label", "split", "clear_sky"]


class ParseError(ValueError):
    """Raised when an input file does not follow its documented layout."""


class DataError(ValueError):
    """Raised for semantically invalid data (shape mismatch, out-of-range time...)."""


class ConfigurationError(ValueError):
    """Raised for invalid settings: unknown family, bad hyperparameter, missing schedule."""


@dataclass(frozen=True)
class IRFrame:
    raw: np.ndarray  # centi-Kelvin integers, shape (rows, cols)
    timestamp: Optional[float] = None  # UTC seconds
    sun_elevation: Optional[float] = None  # degrees
    sun_azimuth: Optional[float] = None

    def __post_init__(self):
        raw = np.asarray(self.raw)
        if raw.ndim != 2:
            raise DataError(f"frame must be 2-d, got shape {raw.shape}")
        if np.any(raw <= 0):
            raise DataError("radiometric frame values must be positive")
        raw = raw.astype(np.int64, copy=True)
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    @property
    def shape(self) -> tuple[int, int]:
        return self.raw.shape

    @property
    def kelvin(self) -> np.ndarray:
        return self.raw / 100.0

    @classmethod
    def from_kelvin(cls, kelvin: np.ndarray, **meta) -> "IRFrame":
        raw = np.floor(np.asarray(kelvin, dtype=float) * 100.0 + 0.5).astype(np.int64)
        return cls(raw, **meta)


@dataclass(frozen=True)
class WeatherRecord:
    timestamp: float
    air_temp: float
    dew_point: float
    pressure: float
    humidity: float

    def __post_init__(self):
        if self.dew_point > self.air_temp + 1e-9:
            raise DataError(f"dew point {self.dew_point} K above air temperature {self.air_temp} K")
        if self.pressure <= 0:
            raise DataError(f"pressure must be positive, got {self.pressure}")


@dataclass(frozen=True)
class LabelMask:
    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DataError(f"label mask must be 2-d, got shape {lab.shape}")
        if not np.isin(lab, (0, 1)).all():
            raise DataError("label mask values must be 0 or 1")
        lab = lab.astype(np.int8, copy=True)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class ManifestEntry:
    frame: Path
    weather: Path
    label: Optional[Path]
    split: str
    clear_sky: bool
    previous: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    root: Path = field(default=Path("."))

    def split(self, tag: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == tag]

    @property
    def train(self) -> list[ManifestEntry]:
        return self.split("train")

    @property
    def test(self) -> list[ManifestEntry]:
        return self.split("test")


# ---------------------------------------------------------------------------
# grids


def _format_header(rows: int, cols: int, meta: dict) -> str:
    parts = [str(rows), str(cols)]
    for key, value in meta.items():
        if value is None:
            continue
        value = float(value)
        text = str(int(value)) if value.is_integer() else repr(value)
        parts.append(f"{key}={text}")
    return " ".join(parts)


def read_grid(path, *, kind: str = "frame") -> tuple[np.ndarray, dict]:
    """Read an integer grid file; returns the array and header metadata."""
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: line 1: empty {kind} file")
    head = lines[0].split()
    if len(head) < 2:
        raise ParseError(f"{path}: line 1: malformed header {lines[0]!r}, expected 'rows cols'")
    try:
        rows, cols = int(head[0]), int(head[1])
    except ValueError:
        raise ParseError(f"{path}: line 1: malformed header {lines[0]!r}") from None
    if rows <= 0 or cols <= 0:
        raise ParseError(f"{path}: line 1: non-positive grid size {rows}x{cols}")
    meta = {}
    for token in head[2:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise ParseError(f"{path}: line 1: malformed header token {token!r}")
        try:
            meta[key] = float(value)
        except ValueError:
            raise ParseError(f"{path}: line 1: non-numeric header value {token!r}") from None

    body = [ln for ln in lines[1:]]
    while body and not body[-1].strip():
        body.pop()
    cells = []
    for lineno, line in enumerate(body, start=2):
        for tok in line.split():
            try:
                cells.append(int(tok))
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: non-numeric cell {tok!r}") from None
    expected = rows * cols
    if len(cells) != expected:
        raise ParseError(f"{path}: line {len(body) + 1}: expected {expected} cells, found {len(cells)}")
    for lineno, line in enumerate(body, start=2):
        if len(line.split()) != cols:
            raise ParseError(f"{path}: line {lineno}: expected {cols} cells per row, found {len(line.split())}")
    return np.asarray(cells, dtype=np.int64).reshape(rows, cols), meta


def write_grid(path, grid: np.ndarray, meta: Optional[dict] = None) -> None:
    grid = np.asarray(grid)
    if not np.issubdtype(grid.dtype, np.integer):
        raise TypeError("grid files hold integers; scale and round before writing")
    rows, cols = grid.shape
    out = [_format_header(rows, cols, meta or {})]
    out.extend(" ".join(str(int(v)) for v in row) for row in grid)
    Path(path).write_text("\n".join(out) + "\n")


def load_frame(path) -> IRFrame:
    raw, meta = read_grid(path, kind="frame")
    if raw.shape != (ROWS, COLS):
        raise ParseError(f"{path}: line 1: frame must be {ROWS}x{COLS}, got {raw.shape[0]}x{raw.shape[1]}")
    if np.any(raw <= 0):
        raise ParseError(f"{path}: radiometric values must be positive")
    return IRFrame(raw, timestamp=meta.get("t"), sun_elevation=meta.get("elev"),
                   sun_azimuth=meta.get("az"))


def save_frame(path, frame: IRFrame) -> None:
    write_grid(path, frame.raw, {"t": frame.timestamp, "elev": frame.sun_elevation,
                                 "az": frame.sun_azimuth})


def load_label(path) -> LabelMask:
    grid, _ = read_grid(path, kind="label")
    bad = ~np.isin(grid, (0, 1))
    if bad.any():
        r = int(np.argwhere(bad)[0][0])
        raise ParseError(f"{path}: line {r + 2}: label cells must be 0 or 1")
    return LabelMask(grid)


def save_label(path, mask) -> None:
    labels = mask.labels if isinstance(mask, LabelMask) else np.asarray(mask)
    write_grid(path, labels.astype(np.int64))


# ---------------------------------------------------------------------------
# weather


def _parse_time(text: str) -> float:
    text = text.strip()
    try:
        return float(text)
    except ValueError:
        pass
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def format_time(t: float) -> str:
    return datetime.fromtimestamp(t, tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def load_weather(path) -> list[WeatherRecord]:
    path = Path(path)
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != WEATHER_HEADER:
            raise ParseError(f"{path}: line 1: expected header {','.join(WEATHER_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(WEATHER_HEADER):
                raise ParseError(f"{path}: line {lineno}: expected {len(WEATHER_HEADER)} fields")
            try:
                t = _parse_time(row[0])
                values = [float(v) for v in row[1:]]
                records.append(WeatherRecord(t, *values))
            except (ValueError, DataError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    times = [r.timestamp for r in records]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ParseError(f"{path}: weather records must be strictly time-ordered")
    return records


def save_weather(path, records: Iterable[WeatherRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(WEATHER_HEADER)
        for r in records:
            writer.writerow([format_time(r.timestamp), repr(r.air_temp), repr(r.dew_point),
                             repr(r.pressure), repr(r.humidity)])


def interpolate_weather(records: Sequence[WeatherRecord], t: float) -> WeatherRecord:
    """Linearly interpolate every weather field at time ``t``.

    No extrapolation: ``t`` outside the record span raises :class:`DataError`.
    At a record timestamp the record itself is returned.
    """
    if not records:
        raise DataError("no weather records")
    times = np.array([r.timestamp for r in records])
    if t < times[0] or t > times[-1]:
        raise DataError(f"time {t} outside weather range [{times[0]}, {times[-1]}]")
    k = int(np.searchsorted(times, t, side="left"))
    if times[k] == t:
        return records[k]
    a, b = records[k - 1], records[k]
    w = (t - a.timestamp) / (b.timestamp - a.timestamp)

    def lerp(x, y):
        return x + w * (y - x)

    return WeatherRecord(t, lerp(a.air_temp, b.air_temp), lerp(a.dew_point, b.dew_point),
                         lerp(a.pressure, b.pressure), lerp(a.humidity, b.humidity))


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path, *, validate: bool = True) -> DatasetManifest:
    """Parse a manifest CSV; relative paths resolve against its directory.

    An optional sixth column ``previous`` names the frame preceding each entry
    (needed for velocity features).
    """
    path = Path(path)
    root = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: line 1: empty manifest")
        header = [h.strip() for h in header]
        if header[:5] != MANIFEST_HEADER or header[5:] not in ([], ["previous"]):
            raise ParseError(f"{path}: line 1: expected header {','.join(MANIFEST_HEADER)}[,previous]")
        for lineno, row in enumerate(reader, start=2):
            if not row or not any(c.strip() for c in row):
                continue
            if len(row) not in (5, 6):
                raise ParseError(f"{path}: line {lineno}: expected 5 or 6 fields, got {len(row)}")
            frame, weather, label, split, clear = (c.strip() for c in row[:5])
            prev = row[5].strip() if len(row) == 6 else ""
            if split not in ("train", "test"):
                raise ParseError(f"{path}: line {lineno}: split must be train or test, got {split!r}")
            if clear not in ("0", "1"):
                raise ParseError(f"{path}: line {lineno}: clear_sky must be 0 or 1, got {clear!r}")
            if not frame or not weather:
                raise ParseError(f"{path}: line {lineno}: frame and weather paths are required")
            if split == "train" and not label:
                raise ParseError(f"{path}: line {lineno}: train entry without label")
            entries.append(ManifestEntry(root / frame, root / weather, root / label if label else None,
                                         split, clear == "1", root / prev if prev else None))
    manifest = DatasetManifest(tuple(entries), root)
    if validate:
        validate_manifest(manifest)
    return manifest


def save_manifest(path, manifest: DatasetManifest) -> None:
    path = Path(path)
    base = path.parent

    def rel(p):
        if p is None:
            return ""
        try:
            return str(Path(p).relative_to(base))
        except ValueError:
            return str(p)

    has_prev = any(e.previous is not None for e in manifest.entries)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER + (["previous"] if has_prev else []))
        for e in manifest.entries:
            row = [rel(e.frame), rel(e.weather), rel(e.label), e.split, "1" if e.clear_sky else "0"]
            if has_prev:
                row.append(rel(e.previous))
            writer.writerow(row)


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check shape agreement and weather coverage for every entry."""
    weather_cache: dict[Path, list[WeatherRecord]] = {}
    for e in manifest.entries:
        frame = load_frame(e.frame)
        if e.label is not None:
            mask = load_label(e.label)
            if mask.shape != frame.shape:
                raise DataError(f"{e.label}: label shape {mask.shape} != frame shape {frame.shape}")
        if e.weather not in weather_cache:
            weather_cache[e.weather] = load_weather(e.weather)
        records = weather_cache[e.weather]
        if frame.timestamp is None:
            raise DataError(f"{e.frame}: frame has no timestamp (header token t=...)")
        check_weather_coverage(records, frame.timestamp, where=str(e.frame))
        if e.previous is not None:
            prev = load_frame(e.previous)
            if prev.shape != frame.shape:
                raise DataError(f"{e.previous}: previous frame shape differs from {e.frame}")


def check_weather_coverage(records: Sequence[WeatherRecord], t: float, where: str = "") -> None:
    if not records:
        raise DataError(f"{where}: no weather records")
    gap = min(abs(r.timestamp - t) for r in records)
    if gap > WEATHER_TOLERANCE_S:
        raise DataError(f"{where}: nearest weather record is {gap:.0f} s away (limit {WEATHER_TOLERANCE_S:.0f} s)")
    if t < records[0].timestamp or t > records[-1].timestamp:
        raise DataError(f"{where}: frame time outside weather record range")


@dataclass(frozen=True)
class LoadedEntry:
    entry: ManifestEntry
    frame: IRFrame
    weather: WeatherRecord
    label: Optional[LabelMask]
    previous: Optional[IRFrame]


def load_entries(manifest: DatasetManifest, entries: Optional[Sequence[ManifestEntry]] = None) -> list[LoadedEntry]:
    out = []
    cache: dict[Path, list[WeatherRecord]] = {}
    for e in (manifest.entries if entries is None else entries):
        frame = load_frame(e.frame)
        if frame.timestamp is None:
            raise DataError(f"{e.frame}: frame has no timestamp (t= header token)")
        if e.weather not in cache:
            cache[e.weather] = load_weather(e.weather)
        weather = interpolate_weather(cache[e.weather], frame.timestamp)
        label = load_label(e.label) if e.label is not None else None
        if label is not None and label.shape != frame.shape:
            raise DataError(f"{e.label}: label shape {label.shape} != frame shape {frame.shape}")
        prev = load_frame(e.previous) if e.previous is not None else None
        out.append(LoadedEntry(e, frame, weather, label, prev))
    return out


def with_timestamp(frame: IRFrame, t: float) -> IRFrame:
    return replace(frame, timestamp=t)
