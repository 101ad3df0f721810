"""Figure and table emission across runs: boxplots of per-case average Dice
and HD95 (one box per run), a mean (std) comparison table in markdown + CSV,
and optional mid-axial qualitative overlays."""

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import NoRunsFound, SchemaVersionMismatch  # noqa: E402
from .metrics import METRICS_SCHEMA_VERSION, REGIONS, MetricsReport  # noqa: E402

_TABLE_METRICS = (
    ("lw_dice", "LesionWise Dice"),
    ("dice", "Dice"),
    ("lw_hd95", "LesionWise HD95"),
    ("hd95", "HD95"),
)


@dataclass
class RunArtifacts:
    name: str
    report: MetricsReport
    run_dir: Path


def discover_runs(runs_dir) -> list:
    """Each direct subdirectory containing a metrics.csv is one run."""
    runs_dir = Path(runs_dir)
    found = []
    if runs_dir.is_dir():
        for sub in sorted(runs_dir.iterdir()):
            csv_path = sub / "metrics.csv"
            if sub.is_dir() and csv_path.exists():
                found.append(RunArtifacts(name=sub.name,
                                          report=MetricsReport.from_csv(csv_path),
                                          run_dir=sub))
    if not found:
        raise NoRunsFound(f"no run outputs with metrics.csv under {runs_dir}")
    versions = {r.report.schema_version for r in found}
    if len(versions) > 1 or versions != {METRICS_SCHEMA_VERSION}:
        raise SchemaVersionMismatch(
            f"mixed or unsupported metrics schema versions {sorted(versions)}"
        )
    return found


def _boxplot(runs, metric, ylabel, path_base):
    data = [list(r.report.per_case_mean(metric).values()) for r in runs]
    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * len(runs), 4.2))
    ax.boxplot(data, tick_labels=[r.name for r in runs])
    ax.set_ylabel(ylabel)
    ax.set_title(f"Per-case average {ylabel} by run")
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    written = []
    for ext in ("png", "svg"):
        out = Path(f"{path_base}.{ext}")
        fig.savefig(out)
        written.append(out)
    plt.close(fig)
    return written


def write_boxplots(runs, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = _boxplot(runs, "dice", "Dice", out_dir / "boxplot_dice")
    files += _boxplot(runs, "hd95", "HD95 (mm)", out_dir / "boxplot_hd95")
    return files


def comparison_rows(runs):
    """Flat rows: run, metric, region (or Avg), mean, std."""
    rows = []
    for r in runs:
        agg = r.report.aggregates()
        for metric, _label in _TABLE_METRICS:
            for region in REGIONS:
                cell = agg["regions"][region][metric]
                rows.append((r.name, metric, region, cell["mean"], cell["std"]))
            rows.append((r.name, metric, "Avg", agg["region_mean"][metric], None))
    return rows


def write_comparison_table(runs, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = comparison_rows(runs)

    csv_path = out_dir / "comparison.csv"
    with open(csv_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("schema_version", METRICS_SCHEMA_VERSION))
        w.writerow(("run", "metric", "region", "mean", "std"))
        for run, metric, region, mean, std in rows:
            w.writerow((run, metric, region, format(mean, ".6g"),
                        "" if std is None else format(std, ".6g")))

    md_path = out_dir / "comparison.md"
    lines = []
    header = ["Metric"] + [f"{r.name} {c}" for r in runs for c in (*REGIONS, "Avg")]
    lines.append("| " + " | ".join(header) + " |")
    lines.append("|" + "---|" * len(header))
    by_key = {(run, metric, region): (mean, std)
              for run, metric, region, mean, std in rows}
    for metric, label in _TABLE_METRICS:
        cells = [label]
        for r in runs:
            for region in (*REGIONS, "Avg"):
                mean, std = by_key[(r.name, metric, region)]
                cells.append(f"{mean:.2f}" if std is None else f"{mean:.2f} ({std:.2f})")
        lines.append("| " + " | ".join(cells) + " |")
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def write_overlays(run, cohort_dir, out_dir, max_cases=8) -> list:
    """Mid-axial slices with ground-truth and predicted masks side by side.
    Requires predictions saved by `evaluate --save-pred`."""
    from .synthetic_cohort import read_manifest
    from .volume_io import load_labels, load_volume

    cohort_dir = Path(cohort_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = read_manifest(cohort_dir)
    pred_dir = run.run_dir / "predictions"
    written = []
    for entry in manifest["cases"][:max_cases]:
        cid = entry["case_id"]
        pred_path = pred_dir / f"{cid}_pred.rawvol"
        if not pred_path.exists():
            continue
        vol = load_volume(cohort_dir / entry["image"])
        gt = load_labels(cohort_dir / entry["labels"])
        pred = load_labels(pred_path)
        z = vol.spatial_shape[2] // 2
        base = vol.data[0, :, :, z].T

        fig, axes = plt.subplots(1, 2, figsize=(7, 3.6))
        for ax, mask, title in ((axes[0], gt.data[:, :, z].T, "reference"),
                                (axes[1], pred.data[:, :, z].T, "prediction")):
            ax.imshow(base, cmap="gray", origin="lower")
            shown = np.ma.masked_where(mask == 0, mask)
            ax.imshow(shown, cmap="tab10", origin="lower", alpha=0.5,
                      vmin=0, vmax=9)
            ax.set_title(f"{cid} {title}")
            ax.axis("off")
        fig.tight_layout()
        out = out_dir / f"{cid}_overlay.png"
        fig.savefig(out)
        plt.close(fig)
        written.append(out)
    return written


def write_report(runs_dir, out_dir, overlays_cohort=None) -> dict:
    """The full `report` operation; returns a summary of written artifacts."""
    runs = discover_runs(runs_dir)
    figures = write_boxplots(runs, out_dir)
    csv_path, md_path = write_comparison_table(runs, out_dir)
    overlay_files = []
    if overlays_cohort is not None:
        for run in runs:
            overlay_files += write_overlays(run, overlays_cohort,
                                            Path(out_dir) / f"overlays_{run.name}")
    summary = {
        "runs": [r.name for r in runs],
        "figures": [str(f) for f in figures],
        "table_csv": str(csv_path),
        "table_md": str(md_path),
        "overlays": [str(f) for f in overlay_files],
    }
    (Path(out_dir) / "report_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=1) + "\n"
    )
    return summary
