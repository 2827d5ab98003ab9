"""``msimil`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import platform
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .colorlab import load_profile_registry, write_profile_registry
from .dataset import SlideTileSource
from .evaluation import (
    UndefinedMetricError,
    dumps,
    evaluation_report,
    format_predictions,
    parse_predictions,
    subgroup_eval,
)
from .experiments import (
    BAG_SIZES,
    RESULT_SCHEMA_VERSION,
    TITRATION_FRACTIONS,
    attention_heatmap,
    simulate_bag_size,
    titrate,
    write_png,
    write_result,
)
from .ioutil import atomic_write_text, blob_hash
from .milcore import FEATURE_VERSION
from .slideio import (
    ManifestError,
    MaskParams,
    compute_tissue_mask,
    extract_tiles,
    format_manifest,
    labelled,
    load_tile,
    read_manifest,
    tissue_area_mm2,
)
from .synthetic import (
    SyntheticCohort,
    SyntheticCohortSpec,
    generate_synthetic_cohort,
    load_cohort_images,
    synthesize_paired_sections,
    write_cohort,
)
from .trainer import (
    CHECKPOINT_VERSION,
    CheckpointError,
    FeatureCache,
    GridSpec,
    TrainConfig,
    cross_validate,
    ensemble_scores,
    grid_search,
    load_ensemble,
    save_ensemble,
    slide_rng,
)

log = logging.getLogger("msimil")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration

_MASK_KEYS = ("white_threshold", "tissue_saturation_min", "marker_saturation_min", "black_value_max")
_JITTER_KEYS = ("brightness", "contrast", "saturation", "hue", "scope")


@dataclass
class RunConfig:
    """Every tunable of a run, flattened to scalar keys."""

    train: TrainConfig = field(default_factory=TrainConfig)
    mask: MaskParams = field(default_factory=MaskParams)
    min_tissue_fraction: float = 0.5
    profiles: str = ""

    def flat(self) -> dict:
        d = {k: v for k, v in asdict(self.train).items() if k != "jitter"}
        for k in _JITTER_KEYS:
            d[f"jitter_{k}"] = getattr(self.train.jitter, k)
        for k in _MASK_KEYS:
            d[k] = getattr(self.mask, k)
        d["min_tissue_fraction"] = self.min_tissue_fraction
        d["profiles"] = self.profiles
        return d

    def updated(self, values: dict) -> "RunConfig":
        known = self.flat()
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        typed = {k: _coerce(k, v, known[k]) for k, v in values.items()}
        train_kw = {k: v for k, v in typed.items() if k in {f.name for f in fields(TrainConfig)}}
        jit_kw = {k[7:]: v for k, v in typed.items() if k.startswith("jitter_")}
        mask_kw = {k: v for k, v in typed.items() if k in _MASK_KEYS}
        try:
            train = replace(self.train, **train_kw)
            if jit_kw:
                train = replace(train, jitter=replace(train.jitter, **jit_kw))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from None
        return RunConfig(
            train,
            replace(self.mask, **mask_kw),
            typed.get("min_tissue_fraction", self.min_tissue_fraction),
            typed.get("profiles", self.profiles),
        )


def _coerce(key: str, value, like):
    if not isinstance(value, str):
        return value
    v = value.strip()
    try:
        if isinstance(like, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if isinstance(like, int):
            return int(v)
        if isinstance(like, float):
            return float(v)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {value!r} as {type(like).__name__}") from None
    return v


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def format_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.flat().items())


def load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = cfg.updated(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    overrides = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for flag in ("learning_rate", "max_epochs", "magnification"):
        v = getattr(args, flag, None)
        if v is not None:
            overrides[flag] = v
    if getattr(args, "profiles", None):
        overrides["profiles"] = args.profiles
    return cfg.updated(overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# helpers


class _Run:
    """Collects inputs and outputs for the run manifest."""

    def __init__(self, args, cfg: RunConfig | None):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
        if p.is_file():
            self.inputs[str(p)] = blob_hash(p.read_bytes())
        else:
            for q in sorted(p.glob("*.milh")):
                self.inputs[str(q)] = blob_hash(q.read_bytes())
        return p

    def write_text(self, rel: str, text: str) -> Path:
        p = self.out / rel
        atomic_write_text(p, text)
        self.outputs.append(rel)
        return p

    def finish(self) -> None:
        doc = {
            "schema_version": RESULT_SCHEMA_VERSION,
            "command": self.args.command,
            "argv": getattr(self.args, "argv", []),
            "config": self.cfg.flat() if self.cfg else None,
            "inputs": self.inputs,
            "outputs": sorted(self.outputs),
            "versions": version_info(),
        }
        atomic_write_text(self.out / "run_manifest.json", json.dumps(doc, indent=2, sort_keys=True))
        if self.cfg is not None:
            atomic_write_text(self.out / "run_config.txt", format_config(self.cfg))


def version_info() -> dict:
    return {
        "artifact": __version__,
        "checkpoint_format": CHECKPOINT_VERSION,
        "feature_format": FEATURE_VERSION,
        "result_schema": RESULT_SCHEMA_VERSION,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }


def version_string() -> str:
    return (
        f"msimil {__version__} (checkpoint MILH v{CHECKPOINT_VERSION}, "
        f"features MILF v{FEATURE_VERSION}, results schema v{RESULT_SCHEMA_VERSION})"
    )


def _profiles_for(cfg: RunConfig, manifest: Path) -> dict:
    path = Path(cfg.profiles) if cfg.profiles else manifest.parent / "profiles.ini"
    if cfg.profiles and not path.exists():
        raise FileNotFoundError(f"profile registry not found: {path}")
    return load_profile_registry(path) if path.exists() else {}


def _source(run: _Run, manifest: Path, magnification: int | None = None) -> SlideTileSource:
    cfg = run.cfg
    profiles = _profiles_for(cfg, manifest)
    if cfg.profiles:
        run.input(cfg.profiles)
    return SlideTileSource(
        root=manifest.parent,
        profiles=profiles,
        magnification=magnification or cfg.train.magnification,
        min_tissue_fraction=cfg.min_tissue_fraction,
        mask_params=cfg.mask,
    )


def _records(run: _Run, path):
    p = run.input(path)
    return p, read_manifest(p)


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of numbers, got {text!r}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_tile(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    src = _source(run, manifest)
    rows = io.StringIO()
    w = csv.writer(rows, lineterminator="\n")
    w.writerow(["slide_id", "grid_x", "grid_y", "magnification"])
    summary = {}
    for r in records:
        image = src.image(r)
        mask = compute_tissue_mask(image, run.cfg.mask)
        refs = extract_tiles(image, mask, src.magnification, src.min_tissue_fraction, r.slide_id)
        summary[r.slide_id] = {"n_tiles": len(refs), "tissue_area_mm2": tissue_area_mm2(mask, r.microns_per_pixel)}
        for t in refs:
            w.writerow([r.slide_id, t.grid_x, t.grid_y, t.magnification])
            if args.export:
                rel = f"tiles/{r.slide_id}/{t.grid_x}_{t.grid_y}.png"
                write_png(run.out / rel, load_tile(image, t))
                run.outputs.append(rel)
    run.write_text("tiles.csv", rows.getvalue())
    run.write_text("slides.json", json.dumps(summary, indent=2, sort_keys=True))


def cmd_datagen(args, run: _Run) -> None:
    spec = SyntheticCohortSpec(
        n_slides=args.n_slides,
        positive_prevalence=args.prevalence,
        slide_px=(args.height, args.width),
        signal_tile_fraction=args.signal_fraction,
        signal_strength=args.signal_strength,
        seed=args.seed,
    )
    cohort = generate_synthetic_cohort(spec)
    write_cohort(cohort, run.out, image_format=args.format)
    run.outputs += ["manifest.csv", "profiles.ini", "signal_tiles.json", "cohort_spec.json"]
    run.outputs += [r.image_path for r in cohort.records]


def cmd_pair(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    profiles = _profiles_for(run.cfg, manifest)
    if args.external_profile not in profiles:
        raise ValueError(f"external profile {args.external_profile!r} is not in the registry")
    images = load_cohort_images(records, manifest.parent)
    cohort = SyntheticCohort(SyntheticCohortSpec(n_slides=max(2, len(records))), records, {}, images)
    ext = synthesize_paired_sections(cohort, profiles, profiles[args.external_profile], args.jitter_noise, args.seed)
    for r in ext.records:
        write_png(run.out / r.image_path, ext.images[r.slide_id])
        run.outputs.append(r.image_path)
    run.write_text("manifest_external.csv", format_manifest(ext.records))
    # both arms in one manifest, each pointing at its partner
    rel_root = os.path.relpath(manifest.parent.resolve(), run.out.resolve())
    internal = [replace(r, image_path=str(Path(rel_root) / r.image_path), paired_id=r.slide_id + "_ext") for r in records]
    run.write_text("paired_manifest.csv", format_manifest(internal + ext.records))
    write_profile_registry(run.out / "profiles.ini", list(profiles.values()))
    run.outputs.append("profiles.ini")


def cmd_train(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    src = _source(run, manifest)
    res = cross_validate(labelled(records), src, run.cfg.train)
    for p in save_ensemble(run.out / "model", res.ensemble):
        run.outputs.append(str(p.relative_to(run.out)))
    run.write_text("oof_predictions.csv", format_predictions(res.oof_cases))
    run.write_text("folds.csv", "slide_id,fold\n" + "".join(f"{k},{v}\n" for k, v in res.folds.folds.items()))
    hist = [[asdict(e) for e in h] for h in res.histories]
    run.write_text("history.json", dumps({"oof_auc": res.oof_auc, "folds": hist}))


def _read_grid(path) -> GridSpec:
    values = {}
    for k, v in parse_config_text(Path(path).read_text(encoding="utf-8")).items():
        items = []
        for tok in v.split(","):
            tok = tok.strip()
            for cast in (int, float):
                try:
                    items.append(cast(tok))
                    break
                except ValueError:
                    continue
            else:
                items.append({"true": True, "false": False}.get(tok.lower(), tok))
        values[k] = items
    try:
        return GridSpec(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def cmd_tune(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    grid = _read_grid(run.input(args.grid))
    sources = {}

    def source_for(cfg):
        if cfg.magnification not in sources:
            sources[cfg.magnification] = _source(run, manifest, cfg.magnification)
        return sources[cfg.magnification]

    best, table = grid_search(grid, records, source_for, seed=run.cfg.train.seed, base=run.cfg.train)
    run.write_text("grid.json", dumps({"table": table, "best": best.to_dict()}))
    run.write_text("best_config.txt", format_config(replace(run.cfg, train=best)))


def cmd_predict(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    ens = load_ensemble(run.input(args.model))
    cfg = replace(run.cfg, train=ens.config)
    run.cfg = cfg
    src = _source(run, manifest)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["slide_id", "score", "label", "gleason_total", "procedure", "scanner_profile", "stain_site",
                "tissue_area_mm2", "tumor_purity", "paired_id"])
    seed = args.seed if args.seed is not None else 0
    for r in records:
        bag = src.bag(r)
        score, _, _, _ = ensemble_scores(ens, r, bag.pixels, slide_rng(seed, r.slide_id))
        w.writerow([r.slide_id, repr(score), r.label, r.gleason_total or "NA", r.procedure or "NA",
                    r.scanner_profile, r.stain_site or "NA",
                    "NA" if bag.tissue_area_mm2 is None else repr(bag.tissue_area_mm2),
                    "NA" if r.tumor_purity is None else repr(r.tumor_purity), r.paired_id or "NA"])
    run.write_text("predictions.csv", buf.getvalue())


def cmd_evaluate(args, run: _Run) -> None:
    cases = parse_predictions(run.input(args.predictions).read_text(encoding="utf-8"))
    seed = args.seed if args.seed is not None else 0
    report = evaluation_report(cases, _floats(args.targets), n=args.n_boot, seed=seed)
    run.write_text("metrics.json", dumps(report))


def cmd_subgroups(args, run: _Run) -> None:
    cases = parse_predictions(run.input(args.predictions).read_text(encoding="utf-8"))
    groups = [g.strip() for g in args.groups.split(",")] if args.groups else None
    seed = args.seed if args.seed is not None else 0
    try:
        res = subgroup_eval(cases, groups, n=args.n_boot, seed=seed)
    except KeyError as exc:
        raise UsageError(str(exc)) from None
    run.write_text("subgroups.json", dumps(res))


def cmd_simulate_bagsize(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    ens = load_ensemble(run.input(args.model))
    run.cfg = replace(run.cfg, train=ens.config)
    src = _source(run, manifest)
    sizes = [int(v) for v in _floats(args.sizes)]
    seed = args.seed if args.seed is not None else 0
    res = simulate_bag_size(ens, labelled(records), src, sizes, args.n_seeds, seed)
    write_result(run.out / "bagsize.json", "bag_size", res, run.cfg.flat(), res.seeds, dict(run.inputs))
    run.outputs.append("bagsize.json")


def cmd_titrate(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    src = _source(run, manifest)
    eval_records = None
    if args.eval_manifest:
        eval_manifest, eval_records = _records(run, args.eval_manifest)
        if eval_manifest.parent != manifest.parent:
            raise UsageError("--eval-manifest must live next to --manifest (shared slide root)")
        eval_records = labelled(eval_records)
    seed = run.cfg.train.seed
    res = titrate(labelled(records), _floats(args.fractions), run.cfg.train, seed, src, eval_records)
    write_result(run.out / "titration.json", "titration", res, run.cfg.flat(), [seed], dict(run.inputs))
    run.outputs.append("titration.json")


def cmd_heatmap(args, run: _Run) -> None:
    manifest, records = _records(run, args.manifest)
    ens = load_ensemble(run.input(args.model))
    run.cfg = replace(run.cfg, train=ens.config)
    src = _source(run, manifest)
    wanted = {s.strip() for s in args.slides.split(",")} if args.slides else None
    chosen = [r for r in records if wanted is None or r.slide_id in wanted]
    if wanted and len(chosen) != len(wanted):
        missing = sorted(wanted - {r.slide_id for r in chosen})
        raise ValueError(f"slides not in manifest: {', '.join(missing)}")
    seed = args.seed if args.seed is not None else 0
    cache = FeatureCache()
    for r in chosen:
        res = attention_heatmap(ens, r, src, run.out / "heatmaps", args.n_tiles, seed, cache=cache)
        run.outputs += [str(p.relative_to(run.out)) for p in res.files]


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    p.add_argument("--out", required=True, help="output directory (created if missing)")
    p.add_argument("--seed", type=int, default=None, help="seed for every random draw")
    p.add_argument("--workers", type=int, default=1, help="worker count (work runs in-process)")
    if config:
        p.add_argument("--config", help="flat key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")
        p.add_argument("--profiles", help="scanner profile registry (INI)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msimil", description="Attention-MIL slide classification pipeline.")
    parser.add_argument("--version", action="version", version=version_string())
    parser.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tile", help="mask slides and list their tiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--magnification", type=int, choices=(5, 10, 20))
    p.add_argument("--export", action="store_true", help="also write each tile as PNG")
    _common(p)
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("datagen", help="render a synthetic planted-signal cohort")
    p.add_argument("--n-slides", type=int, default=200)
    p.add_argument("--prevalence", type=float, default=0.2)
    p.add_argument("--signal-fraction", type=float, default=0.05)
    p.add_argument("--signal-strength", type=float, default=1.0)
    p.add_argument("--height", type=int, default=1280)
    p.add_argument("--width", type=int, default=1280)
    p.add_argument("--format", choices=("png", "rgbp"), default="png")
    _common(p, config=False)
    p.set_defaults(func=cmd_datagen, seed=0)

    p = sub.add_parser("pair", help="re-render a cohort as external serial sections")
    p.add_argument("--manifest", required=True)
    p.add_argument("--external-profile", default="external_scanner")
    p.add_argument("--jitter-noise", type=float, default=0.05)
    _common(p)
    p.set_defaults(func=cmd_pair, seed=0)

    p = sub.add_parser("train", help="cross-validated training; writes the fold ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--magnification", type=int, choices=(5, 10, 20))
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="grid search over training settings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--grid", required=True, help="file of key = v1, v2, ... lines")
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    _common(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="score slides with a trained ensemble")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, help="directory holding fold*.milh")
    _common(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="AUC, ROC and operating points with bootstrap CIs")
    p.add_argument("--predictions", required=True)
    p.add_argument("--targets", default="0.5,0.7,0.9,0.95", help="target sensitivities")
    p.add_argument("--n-boot", type=int, default=1000)
    _common(p, config=False)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("subgroups", help="per-subgroup AUC and Mann-Whitney tests")
    p.add_argument("--predictions", required=True)
    p.add_argument("--groups", help="comma-separated group names (default: all)")
    p.add_argument("--n-boot", type=int, default=1000)
    _common(p, config=False)
    p.set_defaults(func=cmd_subgroups)

    p = sub.add_parser("simulate-bagsize", help="AUC as a function of bag size")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--sizes", default=",".join(str(s) for s in BAG_SIZES))
    p.add_argument("--n-seeds", type=int, default=10)
    _common(p)
    p.set_defaults(func=cmd_simulate_bagsize)

    p = sub.add_parser("titrate", help="train on nested fractions of the data")
    p.add_argument("--manifest", required=True)
    p.add_argument("--eval-manifest", help="held-out slides to score each subset's ensemble on")
    p.add_argument("--fractions", default=",".join(str(f) for f in TITRATION_FRACTIONS))
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--max-epochs", type=int)
    _common(p)
    p.set_defaults(func=cmd_titrate)

    p = sub.add_parser("heatmap", help="attention overlays and top/bottom tiles")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--slides", help="comma-separated slide ids (default: all)")
    p.add_argument("--n-tiles", type=int, default=4)
    _common(p)
    p.set_defaults(func=cmd_heatmap)
    return parser


_DATA_ERRORS = (
    ManifestError,
    CheckpointError,
    UndefinedMetricError,
    FileNotFoundError,
    KeyError,
    ValueError,
)


def _error_record(kind: str, exc: BaseException, code: int) -> str:
    return json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), "exit_code": code})


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(_error_record("usage", exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    args.argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args) if hasattr(args, "config") else None
        run_ = _Run(args, cfg)
        args.func(args, run_)
        run_.finish()
        return EXIT_OK
    except UsageError as exc:
        print(_error_record("usage", exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except _DATA_ERRORS as exc:
        print(_error_record("data", exc, EXIT_DATA), file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a bug
        log.debug("internal error", exc_info=True)
        print(_error_record("internal", exc, EXIT_INTERNAL), file=sys.stderr)
        return EXIT_INTERNAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
