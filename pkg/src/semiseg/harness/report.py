"""Tables, the DSC-vs-subjects plot and a JSON summary from a ReportBundle."""
from __future__ import annotations

import csv
import datetime as _dt
import json
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .experiment import METHODS, SUBJECT_COUNTS
from .matrix import CellResult, ReportBundle

FOREGROUND = ("uterus", "bladder")
GAP = "n/a"
SERIES_COLORS = {"baseline": "blue", "self_sl": "gold", "semi_sl": "red"}
METHOD_LABELS = {"baseline": "Baseline", "self_sl": "Self-SL", "semi_sl": "Semi-SL"}


class ReportError(RuntimeError):
    pass


def _fmt(cell: Optional[CellResult], cls: str) -> str:
    if cell is None or not cell.runs:
        return GAP
    return f"{cell.median(cls):.4f}({cell.median(cls, 'std'):.4f})"


def _write_table(out_dir: Path, name: str, header: List[str], rows: List[List[str]]) -> Dict:
    with open(out_dir / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(v).ljust(widths[i]) for i, v in enumerate(r)).rstrip() for r in [header] + rows]
    (out_dir / f"{name}.txt").write_text("\n".join(lines) + "\n")
    return {"csv": f"{name}.csv", "txt": f"{name}.txt", "rows": len(rows)}


# -- table layouts ----------------------------------------------------------------

def table2(b: ReportBundle):
    header = ["model", "task"] + [f"{c}_{m}" for c in FOREGROUND for m in ("baseline", "self_sl")]
    rows = []
    for arch in ("unet", "unetpp"):
        for mode in ("SR", "PS", "BOTH"):
            base = b.find(arch=arch, method="baseline", sup_loss="CE", labeled_subjects_used=10, view_filter="all")
            self_ = b.find(arch=arch, method="self_sl", degrade_mode=mode, sup_loss="CE",
                           labeled_subjects_used=10, view_filter="all")
            rows.append([arch, mode] + [_fmt(x, c) for c in FOREGROUND for x in (base, self_)])
    return header, rows


def table3(b: ReportBundle):
    header = ["model", "loss"] + [f"{c}_{m}" for c in FOREGROUND for m in ("baseline", "semi_sl")]
    rows = []
    for arch in ("unet", "unetpp"):
        for loss in ("DL", "CE"):
            common = dict(arch=arch, sup_loss=loss, degrade_mode="BOTH", labeled_subjects_used=10, view_filter="all")
            base, semi = b.find(method="baseline", **common), b.find(method="semi_sl", **common)
            rows.append([arch, loss] + [_fmt(x, c) for c in FOREGROUND for x in (base, semi)])
    return header, rows


def table4(b: ReportBundle):
    header = ["subjects"] + [f"{c}_{m}" for c in FOREGROUND for m in METHODS]
    rows = []
    for n in SUBJECT_COUNTS:
        cells = [b.find(arch="unet", method=m, degrade_mode="BOTH", sup_loss="CE", labeled_subjects_used=n,
                        view_filter="all") for m in METHODS]
        rows.append([str(n)] + [_fmt(x, c) for c in FOREGROUND for x in cells])
    return header, rows


def table5(b: ReportBundle):
    header = ["trained_on"] + [f"{c}_{m}" for c in FOREGROUND for m in METHODS]
    rows = []
    for view in ("coronal", "sagittal", "axial", "partial_third", "all"):
        cells = [b.find(arch="unet", method=m, degrade_mode="BOTH", sup_loss="CE", labeled_subjects_used=10,
                        view_filter=view) for m in METHODS]
        rows.append([view] + [_fmt(x, c) for c in FOREGROUND for x in cells])
    return header, rows


def table6(b: ReportBundle):
    header = ["trained_on"] + [f"{c}_{v}" for c in FOREGROUND for v in ("coronal", "sagittal", "axial")]
    rows = []
    for view in ("coronal", "sagittal", "axial", "all"):
        cell = b.find(arch="unet", method="semi_sl", degrade_mode="BOTH", sup_loss="CE", labeled_subjects_used=10,
                      view_filter=view)
        row = [view]
        for c in FOREGROUND:
            for test_view in ("coronal", "sagittal", "axial"):
                # single-view models are only scored on their own view
                if view != "all" and view != test_view:
                    row.append("-")
                    continue
                v = cell.median_by_view(c, test_view) if cell is not None else None
                row.append(GAP if v is None else f"{v:.4f}")
        rows.append(row)
    return header, rows


TABLES = {"table2": table2, "table3": table3, "table4": table4, "table5": table5, "table6": table6}


# -- long format, plot, summary -----------------------------------------------------

def cells_rows(b: ReportBundle) -> List[List]:
    rows = []
    for cell in b.cells:
        s = cell.spec
        run_dirs = ";".join(r.extra.get("run_dir", "") for r in cell.runs.values())
        ckpts = ";".join(str(r.checkpoint) for r in cell.runs.values())
        for c in FOREGROUND:
            med = cell.median(c)
            rows.append([s.cell_id(), s.arch, s.method, s.degrade_mode, s.sup_loss, s.labeled_subjects_used,
                         s.view_filter, c, GAP if med is None else f"{med:.6f}",
                         GAP if med is None else f"{cell.median(c, 'std'):.6f}", len(cell.runs),
                         ";".join(str(k) for k in sorted(cell.failures)), run_dirs, ckpts])
    return rows


CELLS_HEADER = ["cell_id", "arch", "method", "degrade_mode", "sup_loss", "labeled_subjects", "view_filter",
                "class", "median_dsc", "median_std", "seeds_done", "seeds_failed", "run_dirs", "checkpoint_sha256"]


def figure_points(b: ReportBundle) -> Dict[str, List]:
    pts = {}
    for m in METHODS:
        series = []
        for n in SUBJECT_COUNTS:
            cell = b.find(arch="unet", method=m, degrade_mode="BOTH", sup_loss="CE", labeled_subjects_used=n,
                          view_filter="all")
            if cell is not None and cell.runs:
                series.append((n, cell.median_foreground()))
        pts[m] = series
    return pts


def write_svg(points: Dict[str, List], path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "semiseg", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for m in METHODS:
            xs = [p[0] for p in points[m]]
            ys = [p[1] for p in points[m]]
            ax.plot(xs, ys, marker="o", color=SERIES_COLORS[m], label=METHOD_LABELS[m], gid=f"series-{m}")
        ax.set_xlabel("labeled subjects")
        ax.set_ylabel("mean foreground DSC")
        ax.set_xticks(list(SUBJECT_COUNTS))
        ax.legend(loc="lower right")
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)


def improvement(b: ReportBundle) -> Dict:
    """Semi over baseline, per matched pair of cells and class."""
    diffs = []
    for semi in b.cells:
        s = semi.spec
        if s.method != "semi_sl" or not semi.runs:
            continue
        base = b.find(arch=s.arch, method="baseline", sup_loss=s.sup_loss,
                      labeled_subjects_used=s.labeled_subjects_used, view_filter=s.view_filter)
        if base is None or not base.runs:
            continue
        for c in FOREGROUND:
            diffs.append({"semi_cell": s.cell_id(), "baseline_cell": base.spec.cell_id(), "class": c,
                          "delta": semi.median(c) - base.median(c)})
    if not diffs:
        return {"pairs": [], "mean_delta": None, "max_delta": None}
    d = np.array([x["delta"] for x in diffs])
    return {"pairs": diffs, "mean_delta": float(d.mean()), "max_delta": float(d.max()),
            "mean_delta_percent": float(100 * d.mean()), "max_delta_percent": float(100 * d.max())}


def emit_report(bundle: ReportBundle, out_dir, tables: Sequence[str] = tuple(TABLES),
                timestamp: Optional[str] = None) -> Dict:
    """Write every table, cells.csv, fig3.svg and summary.json; return the summary."""
    if not bundle.cells or not any(c.runs for c in bundle.cells):
        raise ReportError("refusing to report an empty bundle: no cell has a finished run")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ReportError(f"cannot write report to {out}: {exc}") from None

    files = {}
    for name in tables:
        header, rows = TABLES[name](bundle)
        files[name] = _write_table(out, name, header, rows)
    files["cells"] = _write_table(out, "cells", CELLS_HEADER, cells_rows(bundle))

    pts = figure_points(bundle)
    if any(pts.values()):
        write_svg(pts, out / "fig3.svg")
        files["figure"] = {"svg": "fig3.svg", "points": {m: [list(p) for p in v] for m, v in pts.items()}}

    summary = {
        "timestamp": timestamp or _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "cells": len(bundle.cells),
        "runs": sum(len(c.runs) for c in bundle.cells),
        "failures": bundle.failures,
        "semi_over_baseline": improvement(bundle),
        "files": files,
        "medians": {c.spec.cell_id(): {"mean_foreground": c.median_foreground(),
                                        **{k: c.median(k) for k in FOREGROUND if c.runs}}
                    for c in bundle.cells},
    }
    (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    return summary
