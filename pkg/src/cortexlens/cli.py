"""``cortexlens`` command-line entry point.

Subcommands: gen, augment, train, predict, uncertainty, analyze, holdout, report.
Every run records its resolved arguments in a ``run_config.json`` next to its
outputs. Input directories are only ever read.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .analysis import (
    augmentation_stats_from_deltas,
    compute_deltas,
    roi_delta_table,
    selectivity_probe,
)
from .augment import ENHANCEMENTS, AugmentationKind, AugmentationParams, apply_augmentation
from .core import HEMISPHERES, load_dataset
from .encoder import FeatureBankConfig, load_encoder, save_encoder
from .ensemble import partition_folds, predict_ensemble, train_ensemble, uncertainty_decomposition
from .errors import CortexLensError, TooFewImages
from .holdout import run_holdout_experiment
from .reports import (
    AUG_STATS_COLUMNS,
    AUGMENT_LOG_COLUMNS,
    HOLDOUT_COLUMNS,
    ROI_DELTA_COLUMNS,
    SELECTIVITY_COLUMNS,
    UNCERTAINTY_COLUMNS,
    aug_stats_rows,
    augment_log_rows,
    holdout_rows,
    render_markdown_report,
    render_roi_delta_svg,
    roi_delta_rows,
    selectivity_rows,
    uncertainty_rows,
    write_table,
    write_text,
)
from .synthgen import SynthConfig, write_synthetic

log = logging.getLogger("cortexlens")

SPLIT_FILE = "split.json"
DEFAULT_TEST_FRACTION = 0.1


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""

    def __init__(self, message: str, usage: str):
        super().__init__(message)
        self.usage = usage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_usage())


# ---------------------------------------------------------------------------
# helpers


def _threads(value) -> int:
    if value is None:
        env = os.environ.get("CORTEXLENS_THREADS")
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise ValueError(f"CORTEXLENS_THREADS must be an integer, got {env!r}") from None
    if int(value) < 1:
        raise ValueError(f"--threads must be >= 1, got {value}")
    return int(value)


def _write_run_config(target: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    """``run_config.json`` inside directory outputs, ``<file>.run_config.json`` beside file outputs."""
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k != "func"}
    cfg["version"] = __version__
    if extra:
        cfg.update(extra)
    path = target / "run_config.json" if target.is_dir() else target.with_name(target.name + ".run_config.json")
    write_text(path, json.dumps(cfg, indent=1, sort_keys=True, default=str) + "\n")


def _load_params(text: str | None) -> AugmentationParams:
    if not text:
        return AugmentationParams()
    p = Path(text)
    try:
        raw = json.loads(p.read_text(encoding="utf-8")) if p.is_file() else json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"--params is neither a JSON file nor JSON text: {exc}") from None
    if not isinstance(raw, dict):
        raise ValueError("--params must be a JSON object")
    try:
        return AugmentationParams.from_dict(raw)
    except TypeError as exc:
        raise ValueError(f"--params: {exc}") from None


def _parse_kinds(names, include_original=False) -> list:
    if not names or names == ["all"]:
        kinds = list(ENHANCEMENTS)
    else:
        kinds = [AugmentationKind.parse(n) for n in names]
    if include_original and AugmentationKind.ORIGINAL not in kinds:
        kinds.insert(0, AugmentationKind.ORIGINAL)
    return kinds


def _synth_config(spec: str, seed: int | None) -> SynthConfig:
    if spec == "default":
        raw = {}
    else:
        p = Path(spec)
        if not p.is_file():
            raise FileNotFoundError(f"--config: no such file {spec!r} (use 'default' or a JSON path)")
        try:
            raw = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ValueError(f"--config {spec}: invalid JSON: {exc}") from None
    if seed is not None:
        raw["seed"] = seed
    return SynthConfig.from_dict(raw)


def _split_ids(dataset, seed: int, test_fraction: float) -> tuple:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"--test-fraction must lie in (0, 1), got {test_fraction}")
    ids = list(dataset.image_ids)
    perm = np.random.default_rng((seed, 4)).permutation(len(ids))
    n_test = max(2, int(round(test_fraction * len(ids))))
    test = sorted(ids[k] for k in perm[:n_test])
    train = sorted(ids[k] for k in perm[n_test:])
    return train, test


def _load_encoders(path: Path) -> tuple:
    if not path.is_dir():
        raise FileNotFoundError(f"--encoders: no such directory {str(path)!r}")
    dirs = sorted((d for d in path.iterdir() if (d / "encoder.json").is_file()), key=lambda d: d.name)
    if (path / "encoder.json").is_file():
        dirs = [path]
    if not dirs:
        raise FileNotFoundError(f"--encoders: no encoder.json under {str(path)!r}")
    split = None
    if (path / SPLIT_FILE).is_file():
        split = json.loads((path / SPLIT_FILE).read_text(encoding="utf-8"))
    return [load_encoder(d) for d in dirs], split


def _select_ids(dataset, split, which: str) -> list:
    if which == "all" or split is None:
        return list(dataset.image_ids)
    ids = split[f"{which}_ids"]
    missing = [i for i in ids if i not in set(dataset.image_ids)]
    if missing:
        raise ValueError(f"split ids {missing[:5]} are not in the dataset")
    return list(ids)


def _table_path(out: Path, fmt_name: str) -> str:
    if out.suffix in (".csv", ".json"):
        return out.suffix[1:]
    return fmt_name


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    config = _synth_config(args.config, args.seed)
    out = Path(args.out)
    dataset, _ = write_synthetic(config, out, args.threads)
    _write_run_config(out, args, {"synth_config": config.to_dict()})
    log.info("wrote %d images to %s", len(dataset.image_ids), out)
    return 0


def cmd_augment(args) -> int:
    dataset = load_dataset(args.input)
    params = _load_params(args.params)
    kinds = list(AugmentationKind) if args.kind == ["all"] else _parse_kinds(args.kind)
    categories = args.category or None
    for name in categories or ():
        dataset.category(name)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    for image_id in dataset.image_ids:
        stim = dataset.stimulus(image_id)
        masks = stim.masks_of(categories)
        if not masks:
            log.info("image %d has no target masks; skipped", image_id)
            continue
        for kind in kinds:
            res = apply_augmentation(stim.image, masks, kind, params)
            Image.fromarray(res.image).save(out / f"{image_id}__{kind.value}.png", format="PNG")
            records.append((image_id, kind.value, res.altered_pixel_count, res.altered_fraction))
    write_table(out / "augment_log.csv", AUGMENT_LOG_COLUMNS, records)
    _write_run_config(out, args, {"params": params.to_dict()})
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    config = FeatureBankConfig(tuple(args.grid_sizes)) if args.grid_sizes else FeatureBankConfig()
    train_ids, test_ids = _split_ids(dataset, args.seed, args.test_fraction)
    folds = partition_folds(train_ids, args.folds, args.seed)
    encoders = train_ensemble(dataset, folds, config, base_seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, enc in enumerate(encoders):
        save_encoder(enc, out / f"fold_{i}")
    split = {"seed": args.seed, "n_folds": args.folds, "train_ids": train_ids, "test_ids": test_ids,
             "folds": [list(f) for f in folds.folds]}
    write_text(out / SPLIT_FILE, json.dumps(split) + "\n")
    _write_run_config(out, args)
    return 0


def cmd_predict(args) -> int:
    dataset = load_dataset(args.dataset)
    encoders, split = _load_encoders(Path(args.encoders))
    ids = _select_ids(dataset, split, args.ids)
    preds = predict_ensemble(encoders, dataset, ids, args.threads)
    out = Path(args.out)
    rows = []
    for hemi in HEMISPHERES:
        tensor = preds.hemisphere(hemi)
        rois = {"all": np.arange(tensor.shape[2])} | dataset.atlas.rois(hemi)
        for inst in range(preds.n_instances):
            for j, image_id in enumerate(ids):
                for roi, idx in rois.items():
                    rows.append((inst, image_id, hemi, roi, float(tensor[inst, j, idx].mean())))
    fmt_name = _table_path(out, args.format)
    write_table(out, ("instance", "image_id", "hemisphere", "roi", "mean_prediction"), rows, fmt_name)
    if args.raw:
        for hemi in HEMISPHERES:
            raw = out.with_name(f"{out.stem}_{hemi}.f32")
            raw.write_bytes(np.ascontiguousarray(preds.hemisphere(hemi), dtype="<f4").tobytes())
    _write_run_config(out, args, {"shape": [preds.n_instances, len(ids)]})
    return 0


def cmd_uncertainty(args) -> int:
    dataset = load_dataset(args.dataset)
    if args.encoders:
        encoders, split = _load_encoders(Path(args.encoders))
        ids = _select_ids(dataset, split, args.ids)
    else:
        train_ids, test_ids = _split_ids(dataset, args.seed, args.test_fraction)
        folds = partition_folds(train_ids, args.folds, args.seed)
        encoders = train_ensemble(dataset, folds, base_seed=args.seed, threads=args.threads)
        ids = test_ids if args.ids == "test" else list(dataset.image_ids)
    report = uncertainty_decomposition(predict_ensemble(encoders, dataset, ids, args.threads), dataset.atlas)
    out = Path(args.out)
    write_table(out, UNCERTAINTY_COLUMNS, uncertainty_rows(report), _table_path(out, args.format),
                report.metadata)
    _write_run_config(out, args, {"n_images": len(ids), "sd_estimator": report.metadata["sd_estimator"]})
    return 0


def _prefixed(prefix: str, name: str) -> Path:
    p = Path(prefix)
    if prefix.endswith(("/", os.sep)) or p.is_dir():
        return p / name
    return p.with_name(f"{p.name}_{name}")


def cmd_analyze(args) -> int:
    dataset = load_dataset(args.dataset)
    encoders, split = _load_encoders(Path(args.encoders))
    ids = _select_ids(dataset, split, args.ids)
    params = _load_params(args.params)
    kinds = _parse_kinds(args.kinds, include_original=True)
    categories = args.category or None
    deltas = compute_deltas(encoders, dataset, kinds, params, ids, categories, args.threads)
    if len(deltas.image_ids) < 2:
        raise TooFewImages("fewer than 2 images carry target masks")
    table = roi_delta_table(deltas, dataset.atlas, args.alpha, args.bonferroni)
    stats = augmentation_stats_from_deltas(deltas)

    fmt_name = args.format
    ext = "json" if fmt_name == "json" else "csv"
    paths = {name: _prefixed(args.out_prefix, f"{name}.{ext}")
             for name in ("roi_deltas", "aug_stats", "selectivity", "augment_log")}
    write_table(paths["roi_deltas"], ROI_DELTA_COLUMNS, roi_delta_rows(table), fmt_name, table.metadata)
    write_table(paths["aug_stats"], AUG_STATS_COLUMNS, aug_stats_rows(stats), fmt_name,
                {"sd_estimator": "population (1/N)"})
    write_table(paths["augment_log"], AUGMENT_LOG_COLUMNS,
                augment_log_rows(r for r in deltas.augment_log if r.kind != "original"), fmt_name)

    reports = []
    for cat in args.selectivity:
        if cat not in {c.name for c in dataset.categories}:
            log.info("category %s not in dataset; selectivity skipped", cat)
            continue
        rois = [r for r in args.selectivity_rois if r in dataset.atlas.names()]
        try:
            reports.append(selectivity_probe(encoders, dataset, cat, rois, params, ids, args.threads))
        except TooFewImages as exc:
            log.warning("selectivity for %s skipped: %s", cat, exc)
    write_table(paths["selectivity"], SELECTIVITY_COLUMNS, selectivity_rows(reports), fmt_name)

    if fmt_name == "csv":
        render_roi_delta_svg(paths["roi_deltas"], _prefixed(args.out_prefix, "roi_deltas.svg"))
    _write_run_config(paths["roi_deltas"], args, {"n_images": len(deltas.image_ids),
                                                  "skipped_ids": list(deltas.skipped)})
    return 0


def cmd_holdout(args) -> int:
    dataset = load_dataset(args.dataset)
    report = run_holdout_experiment(dataset, args.category, seed=args.seed, n_test=args.n_test,
                                    n_val=args.n_val, n_folds=args.folds, threads=args.threads)
    out = Path(args.out) if args.out else Path(f"holdout_{args.category}.csv")
    write_table(out, HOLDOUT_COLUMNS, holdout_rows(report), _table_path(out, args.format), report.metadata)
    _write_run_config(out, args, {"split_sizes": {
        "train": len(report.split.seen_train), "test": len(report.split.test_ids),
        "general_val": len(report.split.general_val_ids)}})
    return 0


def cmd_report(args) -> int:
    inputs = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            inputs += sorted(p.glob("*.csv"))
        elif p.is_file():
            inputs.append(p)
        else:
            raise FileNotFoundError(f"report input {item!r} does not exist")
    if not inputs:
        raise ValueError("no CSV inputs found")
    out = Path(args.out)
    render_markdown_report(inputs, out, args.title)
    _write_run_config(out, args)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0; gen: config seed)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads (default $CORTEXLENS_THREADS or 1); never changes results")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="table format")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="cortexlens", description="Synthetic brain-encoder robustness experiments.")
    parser.add_argument("--version", action="version", version=f"cortexlens {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset and ground-truth brain")
    p.add_argument("--config", default="default", help="'default' or a JSON file of SynthConfig fields")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("augment", parents=[common], help="write augmented PNGs and augment_log.csv")
    p.add_argument("--in", dest="input", required=True, help="dataset directory")
    p.add_argument("--kind", nargs="+", default=["all"], help="augmentation kinds or 'all' (every kind)")
    p.add_argument("--category", nargs="*", default=[], help="target categories (default: every mask)")
    p.add_argument("--params", help="AugmentationParams as JSON text or a JSON file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("train", parents=[common], help="train a disjoint-fold encoder ensemble")
    p.add_argument("--dataset", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--grid-sizes", type=int, nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="ensemble predictions summarised per ROI")
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--ids", choices=("test", "train", "all"), default="test")
    p.add_argument("--raw", action="store_true", help="also dump [instance, image, vertex] float32 tensors")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("uncertainty", parents=[common], help="three-way SD decomposition of an ensemble")
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoders", help="trained ensemble (default: train one now)")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--test-fraction", type=float, default=DEFAULT_TEST_FRACTION)
    p.add_argument("--ids", choices=("test", "train", "all"), default="test")
    p.add_argument("--out", required=True, help="report.csv or report.json")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("analyze", parents=[common], help="ROI deltas, augmentation statistics and selectivity")
    p.add_argument("--dataset", required=True)
    p.add_argument("--encoders", required=True)
    p.add_argument("--kinds", nargs="+", default=["all"])
    p.add_argument("--category", nargs="*", default=[], help="target categories (default: every mask)")
    p.add_argument("--params", help="AugmentationParams as JSON text or a JSON file")
    p.add_argument("--ids", choices=("test", "train", "all"), default="test")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bonferroni", action="store_true")
    p.add_argument("--selectivity", nargs="*", default=["face", "word"])
    p.add_argument("--selectivity-rois", nargs="*", default=["face-roi", "word-roi"])
    p.add_argument("--out-prefix", required=True, help="directory (trailing /) or filename prefix")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("holdout", parents=[common], help="seen / not-seen category holdout")
    p.add_argument("--dataset", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--out", help="default holdout_<category>.csv")
    p.set_defaults(func=cmd_holdout)

    p = sub.add_parser("report", parents=[common], help="render CSVs into report.md plus SVG")
    p.add_argument("inputs", nargs="+", help="CSV files or directories of CSVs")
    p.add_argument("--title", default="cortexlens report")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(exc.usage)
        sys.stderr.write(f"cortexlens: error: {exc}\n")
        return 1
    if args.command is None:
        sys.stderr.write(parser.format_usage())
        sys.stderr.write("cortexlens: error: a subcommand is required\n")
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _threads(args.threads)
        if args.command != "gen" and args.seed is None:
            args.seed = 0
        return args.func(args)
    except (CortexLensError, ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"cortexlens {args.command}: error: {msg}\n")
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
