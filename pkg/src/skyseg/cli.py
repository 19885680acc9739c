"""``skyseg`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 model or convergence error.  Settings resolve as command-line flags, then
the ``--config`` JSON file, then built-in defaults.  Every command writes
``run.json`` under ``--out`` recording the resolved configuration, seed and
library versions.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .core import ConfigurationError, DataError, ParseError, load_manifest, save_label, write_grid

log = logging.getLogger("skyseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

# defaults per command; flags default to None so that config files can fill gaps
DEFAULTS = {
    "synth": {"seed": 0, "preset": "well-separated", "n_train": 7, "n_test": 5},
    "preprocess": {"stage": "all", "window_length": 250},
    "train": {"family": "gda", "features": "X3", "neighborhood": "single", "standardize": False, "hyper": [],
              "lam": 1.0, "seed": 0},
    "segment": {"split": "test"},
    "cross-validate": {"family": "gda", "features": ["X3:single"], "standardize": False, "grid": [],
                       "lambdas": None, "seed": 0, "threads": None},
    "benchmark": {"split": "test", "repetitions": 10, "threads": 1},
    "vote": {"split": "test"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="skyseg", description="Cloud segmentation of infrared sky images.")
    p.add_argument("--version", action="version", version=f"skyseg {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, manifest=True):
        if manifest:
            sp.add_argument("--manifest", help="dataset manifest CSV")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--config", help="JSON file with settings (flags take precedence)")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"), manifest=False)
    s.add_argument("--seed", type=int)
    s.add_argument("--preset", choices=["well-separated", "noisy-boundary"])
    s.add_argument("--n-train", dest="n_train", type=int)
    s.add_argument("--n-test", dest="n_test", type=int)

    s = common(sub.add_parser("preprocess", help="derive feature channels for every frame"))
    s.add_argument("--stage", choices=["raw", "window", "atmosphere", "all"])
    s.add_argument("--window-length", dest="window_length", type=int)

    s = common(sub.add_parser("train", help="train one model on the train split"))
    s.add_argument("--family")
    s.add_argument("--features", help="feature family X1..X4")
    s.add_argument("--neighborhood", choices=["single", "first", "second"])
    s.add_argument("--standardize", action="store_const", const=True)
    s.add_argument("--hyper", action="append", metavar="NAME=VALUE", help="hyperparameter (repeatable)")
    s.add_argument("--lambda", dest="lam", type=float, help="virtual prior")
    s.add_argument("--seed", type=int)

    s = common(sub.add_parser("segment", help="segment frames with a trained model"))
    s.add_argument("--model", help="model JSON from 'skyseg train'")
    s.add_argument("--split", choices=["train", "test", "all"])

    s = common(sub.add_parser("cross-validate", help="LOO grid search on the train split"))
    s.add_argument("--family")
    s.add_argument("--features", action="append", metavar="FAMILY:NEIGHBORHOOD")
    s.add_argument("--standardize", action="store_const", const=True)
    s.add_argument("--grid", action="append", metavar="NAME=V1,V2,...")
    s.add_argument("--lambdas", help="comma-separated virtual priors (default: 50 log-spaced in [0.02, 2])")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)

    s = common(sub.add_parser("benchmark", help="time per-image segmentation"))
    s.add_argument("--model", nargs="+")
    s.add_argument("--split", choices=["train", "test", "all"])
    s.add_argument("--repetitions", type=int)
    s.add_argument("--threads", type=int)

    s = common(sub.add_parser("vote", help="majority vote of several trained models"))
    s.add_argument("--model", nargs="+")
    s.add_argument("--split", choices=["train", "test", "all"])
    return p


def resolve(command: str, flags: dict, config: Optional[dict]) -> dict:
    """Merge settings: flags > config file > defaults."""
    out = dict(DEFAULTS.get(command, {}))
    for k, v in (config or {}).items():
        out[k.replace("-", "_")] = v
    for k, v in flags.items():
        if v is not None:
            out[k] = v
    return out


def _threads(cfg: dict, fallback: int) -> int:
    if cfg.get("threads") is not None:
        return int(cfg["threads"])
    env = os.environ.get("SKYSEG_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SKYSEG_THREADS must be an integer, got {env!r}") from None
    return fallback


def _versions() -> dict:
    import numba
    import scipy

    return {"skyseg": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


def _write_run(out: Path, command: str, cfg: dict, outputs: Sequence[str]) -> None:
    record = {"command": command, "config": cfg, "seed": cfg.get("seed"), "versions": _versions(),
              "outputs": sorted(str(o) for o in outputs)}
    (out / "run.json").write_text(json.dumps(record, indent=1, sort_keys=True, default=str) + "\n")


def _require(cfg: dict, *names: str) -> None:
    missing = [n for n in names if not cfg.get(n)]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join('--' + m.replace('_', '-') for m in missing)}")


def _parse_value(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise UsageError(f"cannot parse value {text!r}") from None


def _parse_assignments(items, multi: bool) -> dict:
    out = {}
    for item in items or []:
        if isinstance(item, dict):
            out.update(item)
            continue
        if "=" not in item:
            raise UsageError(f"expected NAME=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = [_parse_value(x) for x in v.split(",")] if multi else _parse_value(v)
    return out


def _feature_specs(items, standardize: bool):
    from .features import FeatureSpec

    specs = []
    for item in items if isinstance(items, (list, tuple)) else [items]:
        fam, _, nb = str(item).partition(":")
        specs.append(FeatureSpec(fam, nb or "single", standardize))
    return tuple(specs)


def _split_arg(split: str) -> Optional[str]:
    return None if split == "all" else split


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: dict, out: Path) -> list:
    from . import synth

    preset = {"well-separated": synth.WELL_SEPARATED, "noisy-boundary": synth.NOISY_BOUNDARY}[cfg["preset"]]
    synth.synth_dataset(int(cfg["seed"]), int(cfg["n_train"]), int(cfg["n_test"]), preset, out_dir=out)
    return sorted(p.name for p in out.iterdir() if p.name != "run.json")


def cmd_preprocess(cfg: dict, out: Path) -> list:
    from .pipeline import prepare

    _require(cfg, "manifest")
    prep = prepare(load_manifest(cfg["manifest"]), cfg["stage"], int(cfg["window_length"]))
    written = []
    summary = []
    for item, der in zip(prep.loaded, prep.derived):
        stem = Path(item.entry.frame).stem
        for name in ("T", "H", "T_w", "H_w", "dT", "H_dd", "I8", "mag_v"):
            try:
                grid = der.channel(name)
            except KeyError:
                continue
            if np.isnan(grid).any():
                continue
            path = out / f"{stem}.{name}.grid"
            scaled = grid if name == "I8" else np.floor(grid * 100.0 + 0.5)
            write_grid(path, scaled.astype(np.int64), {"scale": 1 if name == "I8" else 100})
            written.append(path.name)
        summary.append({"frame": str(item.entry.frame), "lapse_rate_K_per_km": der.lapse_rate,
                        "tropopause_temp_K": der.tropopause_temp})
    (out / "derived.json").write_text(json.dumps(summary, indent=1) + "\n")
    return written + ["derived.json"]


def _train_frames(manifest_path, spec, split="train"):
    from .pipeline import prepare

    prep = prepare(load_manifest(manifest_path))
    frames = prep.features(spec, split)
    if not frames:
        raise DataError(f"{manifest_path}: no labelled {split} frames")
    return prep, frames


def cmd_train(cfg: dict, out: Path) -> list:
    from .features import FeatureSpec
    from .models import save_model, train

    _require(cfg, "manifest", "family")
    spec = FeatureSpec(cfg["features"], cfg["neighborhood"], bool(cfg["standardize"]))
    _, frames = _train_frames(cfg["manifest"], spec)
    hyper = _parse_assignments(cfg["hyper"], multi=False)
    seg = train(cfg["family"], frames, spec, hyper, int(cfg["seed"]), float(cfg["lam"]))
    save_model(out / "model.json", seg)
    return ["model.json"]


def _segment_all(models, manifest_path, split):
    from .pipeline import prepare

    from .features import available

    prep = prepare(load_manifest(manifest_path))
    idx = prep.indices(_split_arg(split), labelled=False)
    usable = [k for k in idx if all(available(prep.derived[k], m.spec) for m in models)]
    for k in sorted(set(idx) - set(usable)):
        log.warning("skipping %s: missing a channel the model needs (flow needs a previous frame)",
                    prep.loaded[k].entry.frame)
    if not usable:
        raise DataError(f"{manifest_path}: no usable frames in split {split!r}")
    return prep, usable


def _report(out: Path, reports) -> list:
    from .evaluation import write_plot_data, write_reports

    write_reports(out / "report.csv", reports)
    write_plot_data(out / "plot_data.json", reports)
    return ["report.csv", "plot_data.json"]


def cmd_segment(cfg: dict, out: Path) -> list:
    from .evaluation import EvalReport, ImageResult, confusion
    from .features import extract
    from .models import load_model

    _require(cfg, "model", "manifest")
    seg = load_model(cfg["model"])
    prep, idx = _segment_all([seg], cfg["manifest"], cfg["split"])
    rep = EvalReport(seg.family, train_time_s=seg.train_time_s)
    written = []
    import time

    for k in idx:
        item = prep.loaded[k]
        f = extract(prep.derived[k], seg.spec)
        t0 = time.perf_counter()
        prob, mask = seg.segment(f)
        dt = time.perf_counter() - t0
        stem = Path(item.entry.frame).stem
        save_label(out / f"{stem}.label", mask)
        write_grid(out / f"{stem}.prob.grid", np.floor(prob * 1000.0 + 0.5).astype(np.int64), {"scale": 1000})
        written += [f"{stem}.label", f"{stem}.prob.grid"]
        if item.label is not None:
            rep.images.append(ImageResult(stem, confusion(mask, item.label.labels), dt))
    if rep.images:
        written += _report(out, [rep])
    return written


def cmd_cross_validate(cfg: dict, out: Path) -> list:
    from .evaluation import DEFAULT_LAMBDAS, GridSpec, loo_cross_validate, write_cv_table
    from .features import FeatureSpec
    from .models import save_model, train
    from .pipeline import prepare

    _require(cfg, "manifest", "family")
    specs = _feature_specs(cfg["features"], bool(cfg["standardize"]))
    grid_h = _parse_assignments(cfg["grid"], multi=True)
    lambdas = DEFAULT_LAMBDAS
    if cfg.get("lambdas"):
        raw = cfg["lambdas"]
        lambdas = tuple(float(v) for v in (raw.split(",") if isinstance(raw, str) else raw))
    grid = GridSpec(cfg["family"], grid_h, lambdas, specs)
    prep = prepare(load_manifest(cfg["manifest"]))
    derived, labels, _ = prep.part("train")
    threads = _threads(cfg, os.cpu_count() or 1)
    result = loo_cross_validate(derived, labels, grid, int(cfg["seed"]), threads)
    write_cv_table(out / "cv_table.csv", result)
    if result.best is None:
        raise _ModelFailure("every grid point failed to train")
    (out / "best.json").write_text(json.dumps(result.best, indent=1, sort_keys=True) + "\n")
    spec = FeatureSpec(**result.best["features"])
    seg = train(cfg["family"], prep.features(spec, "train"), spec, result.best["hyper"], int(cfg["seed"]),
                result.best["lambda"])
    save_model(out / "model.json", seg)
    return ["cv_table.csv", "best.json", "model.json"]


def cmd_benchmark(cfg: dict, out: Path) -> list:
    from .evaluation import benchmark_many
    from .models import load_model

    _require(cfg, "model", "manifest")
    segs = [load_model(m) for m in _as_list(cfg["model"])]
    prep, idx = _segment_all(segs, cfg["manifest"], cfg["split"])
    threads = _threads(cfg, 1)
    if threads != 1:
        log.warning("benchmarks always run single-threaded; ignoring threads=%d", threads)
    timings = benchmark_many(segs, [prep.derived[k] for k in idx], int(cfg["repetitions"]))
    rows = [t.to_dict() for t in timings]
    (out / "timing.json").write_text(json.dumps(rows, indent=1) + "\n")
    import csv

    with open(out / "timing.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    return ["timing.json", "timing.csv"]


def cmd_vote(cfg: dict, out: Path) -> list:
    from .evaluation import EvalReport, ImageResult, VotingScheme, confusion, vote
    from .features import extract
    from .models import load_model

    _require(cfg, "model", "manifest")
    segs = [load_model(m) for m in _as_list(cfg["model"])]
    scheme = VotingScheme(tuple(segs))
    prep, idx = _segment_all(segs, cfg["manifest"], cfg["split"])
    rep = EvalReport("vote(" + ",".join(s.family for s in segs) + ")")
    written = []
    for k in idx:
        item = prep.loaded[k]
        frames = [extract(prep.derived[k], s.spec) for s in segs]
        frac, mask = vote(scheme, frames)
        stem = Path(item.entry.frame).stem
        save_label(out / f"{stem}.label", mask)
        write_grid(out / f"{stem}.votes.grid", np.floor(frac * 1000.0 + 0.5).astype(np.int64), {"scale": 1000})
        written += [f"{stem}.label", f"{stem}.votes.grid"]
        if item.label is not None:
            rep.images.append(ImageResult(stem, confusion(mask, item.label.labels)))
    if rep.images:
        written += _report(out, [rep])
    return written


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


class _ModelFailure(Exception):
    pass


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "segment": cmd_segment,
    "cross-validate": cmd_cross_validate,
    "benchmark": cmd_benchmark,
    "vote": cmd_vote,
}


def _load_config(path) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"config file {path}: expected a JSON object")
    return data


def run(argv: Optional[Sequence[str]] = None) -> int:
    from .generative import FitError
    from .models import ModelFileError

    parser = _parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        flags = {k: v for k, v in vars(ns).items() if k not in ("command", "config", "verbose")}
        cfg = resolve(ns.command, flags, _load_config(ns.config))
        _require(cfg, "out")
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", category=UserWarning)
            outputs = COMMANDS[ns.command](cfg, out)
        _write_run(out, ns.command, cfg, outputs)
        return EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, ModelFileError, _ModelFailure, np.linalg.LinAlgError) as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
