"""Glue from a dataset manifest (or an in-memory synthetic set) to derived frames."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .core import DatasetManifest, LoadedEntry, ManifestEntry, interpolate_weather, load_entries
from .features import FeatureSpec, extract
from .preprocessing import WINDOW_LENGTH, derive_entries


@dataclass(frozen=True)
class Prepared:
    """Derived frames of every manifest entry, in manifest order."""

    loaded: tuple
    derived: tuple

    def indices(self, split: Optional[str] = None, labelled: bool = True) -> list:
        out = []
        for k, item in enumerate(self.loaded):
            if split is not None and item.entry.split != split:
                continue
            if labelled and item.label is None:
                continue
            out.append(k)
        return out

    def part(self, split: Optional[str] = None, labelled: bool = True):
        """``(derived frames, label masks, names)`` of one split."""
        idx = self.indices(split, labelled)
        return ([self.derived[k] for k in idx], [self.loaded[k].label for k in idx],
                [str(self.loaded[k].entry.frame) for k in idx])

    def features(self, spec: FeatureSpec, split: Optional[str] = None, labelled: bool = True) -> list:
        derived, labels, _ = self.part(split, labelled)
        return [extract(d, spec, l) for d, l in zip(derived, labels)]


def prepare(manifest: DatasetManifest, stage: str = "all", window_length: int = WINDOW_LENGTH) -> Prepared:
    loaded = load_entries(manifest)
    return Prepared(tuple(loaded), tuple(derive_entries(loaded, stage, window_length)))


def prepare_synthetic(dataset, stage: str = "all") -> Prepared:
    """Same as :func:`prepare` for a :class:`~skyseg.synth.SynthDataset`, without files."""
    loaded = []
    for k, sc in enumerate(dataset.scenes):
        entry = ManifestEntry(f"{sc.split}_{k:03d}.frame", f"{sc.split}_{k:03d}_weather.csv",
                              f"{sc.split}_{k:03d}.label" if sc.labelled else None, sc.split, sc.clear_sky, None)
        weather = interpolate_weather(sc.weather, sc.frame.timestamp)
        loaded.append(LoadedEntry(entry, sc.frame, weather, sc.label if sc.labelled else None, sc.previous))
    return Prepared(tuple(loaded), tuple(derive_entries(loaded, stage)))
