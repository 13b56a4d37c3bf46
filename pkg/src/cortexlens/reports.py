"""CSV / JSON / Markdown / SVG writers for the experiment outputs.

Every float goes through :func:`fmt` so reruns produce identical bytes.
Plots are rendered from CSV files only.
"""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import Iterable, Sequence

from .core import HEMISPHERES
from .errors import IoFailure, MissingFile

UNCERTAINTY_COLUMNS = ("hemisphere", "roi", "sd_total", "sd_across_images", "sd_across_folds")
AUGMENT_LOG_COLUMNS = ("image_id", "kind", "altered_pixel_count", "altered_fraction")
ROI_DELTA_COLUMNS = ("roi", "hemisphere", "kind", "mean_delta", "t", "df", "p", "significant")
AUG_STATS_COLUMNS = (
    "augmentation",
    "SD_LH", "SD_RH", "SD_images_LH", "SD_images_RH", "SD_folds_LH", "SD_folds_RH",
    "dSD_LH", "dSD_RH", "dSD_images_LH", "dSD_images_RH", "dSD_folds_LH", "dSD_folds_RH",
    "mean_abs_diff_LH", "mean_abs_diff_RH", "max_abs_diff_LH", "max_abs_diff_RH",
)
SELECTIVITY_COLUMNS = ("category", "roi", "condition", "hemisphere", "mean_activation", "delta", "t", "df", "p")
HOLDOUT_COLUMNS = (
    "configuration", "MAE_LH", "MAE_RH", "SD_LH", "SD_RH", "SD_images_LH", "SD_images_RH",
    "SD_folds_LH", "SD_folds_RH", "corr", "total_images",
)


def fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, int):
        return str(x)
    if isinstance(x, float):
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        v = float(f"{x:.9g}")
        return repr(0.0 if v == 0 else v)
    return str(x)


def csv_text(columns: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


def json_text(columns: Sequence[str], rows: Iterable[Sequence], metadata: dict | None = None) -> str:
    records = [{c: _jsonable(v) for c, v in zip(columns, row)} for row in rows]
    payload = {"columns": list(columns), "rows": records}
    if metadata:
        payload["metadata"] = metadata
    return json.dumps(payload, indent=1, sort_keys=False) + "\n"


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return fmt(v)
    if isinstance(v, float):
        return float(fmt(v))
    return v


def write_text(path, text: str) -> Path:
    p = Path(path)
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with open(p, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"cannot write {p}: {exc}") from exc
    return p


def write_table(path, columns, rows, fmt_name: str = "csv", metadata: dict | None = None) -> Path:
    rows = list(rows)
    text = json_text(columns, rows, metadata) if fmt_name == "json" else csv_text(columns, rows)
    return write_text(path, text)


def read_csv(path) -> list:
    p = Path(path)
    if not p.is_file():
        raise MissingFile(f"missing {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# row builders


def uncertainty_rows(report) -> list:
    return list(report.rows())


def augment_log_rows(records) -> list:
    return [(r.image_id, r.kind, r.altered_pixel_count, r.altered_fraction) for r in records]


def roi_delta_rows(table) -> list:
    return [(r.roi, r.hemisphere, r.kind, r.mean_delta, r.t, r.df, r.p, r.significant) for r in table.rows]


def aug_stats_rows(stats) -> list:
    """One summary row per augmentation, LH/RH interleaved."""
    by_kind: dict = {}
    for r in stats:
        by_kind.setdefault(r.kind, {})[r.hemisphere] = r
    rows = []
    for kind, hemis in by_kind.items():
        lh, rh = hemis["lh"], hemis["rh"]
        cells = []
        for attr in ("signal_sd_total", "signal_sd_across_images", "signal_sd_across_folds",
                     "delta_sd_total", "delta_sd_across_images", "delta_sd_across_folds",
                     "mean_abs_diff", "max_abs_diff"):
            cells += [getattr(lh, attr), getattr(rh, attr)]
        rows.append((kind, *cells))
    return rows


def selectivity_rows(reports) -> list:
    rows = []
    for rep in reports:
        for r in rep.rows:
            for hemi in HEMISPHERES:
                e = r.hemisphere(hemi)
                if e is None:
                    continue
                rows.append((r.category, r.roi, r.condition, hemi, e.mean_activation, e.delta,
                             e.ttest.t, e.ttest.df, e.ttest.p))
    return rows


def holdout_rows(report) -> list:
    rows = []
    for r in report.rows.values():
        rows.append((r.configuration, r.mae["lh"], r.mae["rh"], r.sd_total["lh"], r.sd_total["rh"],
                     r.sd_across_images["lh"], r.sd_across_images["rh"],
                     r.sd_across_folds["lh"], r.sd_across_folds["rh"], r.corr, r.total_images))
    return rows


# ---------------------------------------------------------------------------
# rendering


def render_roi_delta_svg(csv_path, svg_path) -> Path:
    """Grouped bar chart of mean delta per ROI and augmentation, one panel per hemisphere.

    Bars are hatched when the change is not significant.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    all_rows = read_csv(csv_path)
    rois = list(dict.fromkeys(r["roi"] for r in all_rows))
    kinds = list(dict.fromkeys(r["kind"] for r in all_rows))
    width = 0.8 / max(len(kinds), 1)
    with plt.rc_context({"svg.hashsalt": "cortexlens", "svg.fonttype": "none"}):
        fig, axes = plt.subplots(len(HEMISPHERES), 1, figsize=(max(6.0, 1.1 * len(rois)), 7.0), sharex=True)
        for ax, hemi in zip(axes, HEMISPHERES):
            rows = [r for r in all_rows if r["hemisphere"] == hemi]
            for k, kind in enumerate(kinds):
                vals = {r["roi"]: r for r in rows if r["kind"] == kind}
                xs = [i + (k - (len(kinds) - 1) / 2) * width for i in range(len(rois))]
                heights = [float(vals[roi]["mean_delta"]) if roi in vals else 0.0 for roi in rois]
                bars = ax.bar(xs, heights, width, label=kind.replace("_", " "))
                for roi, bar in zip(rois, bars):
                    if roi in vals and vals[roi]["significant"] != "true":
                        bar.set_hatch("//")
            ax.axhline(0.0, color="black", linewidth=0.6)
            ax.set_ylabel(f"{hemi.upper()} mean delta")
        axes[-1].set_xticks(range(len(rois)), rois, rotation=30, ha="right")
        axes[0].set_title("augmented minus original (hatched: not significant)")
        axes[0].legend(fontsize="small", ncols=2)
        fig.tight_layout()
        Path(svg_path).parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(svg_path, format="svg", metadata={"Date": None, "Creator": None})
        plt.close(fig)
    return Path(svg_path)


def markdown_table(rows: list) -> str:
    if not rows:
        return "_(empty)_\n"
    cols = list(rows[0])
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    out += ["| " + " | ".join(r[c] for c in cols) + " |" for r in rows]
    return "\n".join(out) + "\n"


def render_markdown_report(csv_paths: Sequence, out_dir, title: str = "cortexlens report") -> Path:
    """Bundle CSVs into ``report.md`` plus an SVG for every ROI delta table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = [f"# {title}\n"]
    for path in csv_paths:
        path = Path(path)
        rows = read_csv(path)
        parts.append(f"\n## {path.name}\n\n")
        if rows and set(ROI_DELTA_COLUMNS) <= set(rows[0]):
            svg = render_roi_delta_svg(path, out / f"{path.stem}.svg")
            parts.append(f"![{path.stem}]({svg.name})\n\n")
        parts.append(markdown_table(rows))
    return write_text(out / "report.md", "".join(parts))
