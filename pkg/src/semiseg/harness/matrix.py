"""Ablation matrix: expand table presets into cells, run every (cell, seed), aggregate."""
from __future__ import annotations

import itertools
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import pipeline as pl
from .experiment import ExperimentSpec, RunSettings, load_run, run_dir_for, run_experiment

log = logging.getLogger(__name__)

# Fields a block may sweep, with the defaults every preset starts from.
CELL_DEFAULTS = {"arch": "unet", "method": "semi_sl", "degrade_mode": "BOTH", "sup_loss": "CE",
                 "labeled_subjects_used": 10, "view_filter": "all"}

PRESETS: Dict[str, Dict[str, list]] = {
    "table2": {"arch": ["unet", "unetpp"], "degrade_mode": ["SR", "PS", "BOTH"], "method": ["baseline", "self_sl"]},
    "table3": {"arch": ["unet", "unetpp"], "sup_loss": ["CE", "DL"], "method": ["baseline", "semi_sl"]},
    "table4": {"labeled_subjects_used": [2, 4, 6, 8, 10], "method": ["baseline", "self_sl", "semi_sl"]},
    "table5": {"view_filter": ["coronal", "sagittal", "axial", "partial_third", "all"],
               "method": ["baseline", "self_sl", "semi_sl"]},
    "table6": {"view_filter": ["coronal", "sagittal", "axial", "all"], "method": ["semi_sl"]},
}


def canonical(spec: ExperimentSpec) -> ExperimentSpec:
    # the baseline never sees the restoration task, so its mode is irrelevant
    if spec.method == "baseline" and spec.degrade_mode != "BOTH":
        return replace(spec, degrade_mode="BOTH")
    return spec


@dataclass
class MatrixConfig:
    dataset: str
    seeds: Tuple[int, ...] = (0, 1, 2, 3, 4)
    settings: RunSettings = field(default_factory=RunSettings)
    tables: Tuple[str, ...] = ()
    blocks: Tuple[Dict, ...] = ()
    defaults: Dict = field(default_factory=dict)

    def __post_init__(self):
        bad = [t for t in self.tables if t not in PRESETS]
        if bad:
            raise ValueError(f"unknown table preset(s) {bad}; known: {sorted(PRESETS)}")
        unknown = set(self.defaults) - set(CELL_DEFAULTS)
        for b in self.blocks:
            unknown |= set(b) - set(CELL_DEFAULTS)
        if unknown:
            raise ValueError(f"unknown matrix field(s) {sorted(unknown)}")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ValueError("seed list is empty")

    @classmethod
    def from_dict(cls, raw: Dict) -> "MatrixConfig":
        raw = dict(raw)
        if "dataset" not in raw:
            raise ValueError("matrix config needs a 'dataset' entry")
        settings = raw.pop("settings", {})
        if not isinstance(settings, RunSettings):
            settings = RunSettings(**settings)
        tables = raw.pop("tables", ())
        if isinstance(tables, str):
            tables = (tables,)
        known = {"dataset", "seeds", "blocks", "defaults"}
        extra = set(raw) - known
        if extra:
            raise ValueError(f"unknown matrix config key(s) {sorted(extra)}")
        return cls(dataset=str(raw["dataset"]), seeds=tuple(raw.get("seeds", (0, 1, 2, 3, 4))), settings=settings,
                   tables=tuple(tables), blocks=tuple(raw.get("blocks", ())), defaults=dict(raw.get("defaults", {})))

    def to_dict(self) -> Dict:
        return {"dataset": self.dataset, "seeds": list(self.seeds), "settings": asdict(self.settings),
                "tables": list(self.tables), "blocks": [dict(b) for b in self.blocks], "defaults": dict(self.defaults)}

    def cells(self) -> List[ExperimentSpec]:
        """All distinct cells in first-seen order."""
        base = dict(CELL_DEFAULTS, **self.defaults)
        blocks = [PRESETS[t] for t in self.tables] + list(self.blocks)
        out: Dict[str, ExperimentSpec] = {}
        for block in blocks:
            axes = {k: v if isinstance(v, (list, tuple)) else [v] for k, v in block.items()}
            names = list(axes)
            for combo in itertools.product(*(axes[k] for k in names)):
                fields = dict(base, **dict(zip(names, combo)))
                spec = canonical(ExperimentSpec(dataset=self.dataset, seeds=self.seeds, settings=self.settings,
                                                **fields))
                out.setdefault(spec.cell_id(), spec)
        if not out:
            raise ValueError("matrix is empty")
        return list(out.values())


@dataclass
class CellResult:
    spec: ExperimentSpec
    runs: Dict[int, pl.MetricsRecord] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)

    @property
    def complete(self) -> bool:
        return not self.failures and len(self.runs) == len(self.spec.seeds)

    def median(self, cls: str, stat: str = "mean") -> Optional[float]:
        vals = [r.summary[cls][stat] for r in self.runs.values()]
        return float(np.median(vals)) if vals else None

    def median_by_view(self, cls: str, view: str) -> Optional[float]:
        vals = [r.summary_by_view[view][cls]["mean"] for r in self.runs.values() if view in r.summary_by_view]
        return float(np.median(vals)) if vals else None

    def median_foreground(self) -> Optional[float]:
        vals = [r.mean_foreground for r in self.runs.values()]
        return float(np.median(vals)) if vals else None


@dataclass
class ReportBundle:
    cells: List[CellResult]
    out_root: Path
    matrix: Optional[MatrixConfig] = None

    def find(self, **fields) -> Optional[CellResult]:
        for c in self.cells:
            spec = c.spec
            want = dict(fields)
            if spec.method == "baseline" and want.get("method") == "baseline":
                want.pop("degrade_mode", None)
            if all(getattr(spec, k) == v for k, v in want.items()):
                return c
        return None

    @property
    def failures(self) -> List[Dict]:
        return [{"cell_id": c.spec.cell_id(), "seed": s, "error": msg}
                for c in self.cells for s, msg in sorted(c.failures.items())]


def _pin_threads():
    n = os.environ.get("SEMISEG_THREADS")
    if n:
        from threadpoolctl import threadpool_limits
        threadpool_limits(int(n))


def _worker_init():
    os.environ.setdefault("SEMISEG_THREADS", "1")
    _pin_threads()


def _run_one(spec_dict: Dict, seed: int, out_root: str) -> Tuple[int, Optional[Dict], Optional[str]]:
    spec = ExperimentSpec.from_dict(spec_dict)
    try:
        rec = run_experiment(spec, seed, out_root)
        return seed, rec.to_json(), None
    except Exception as exc:  # noqa: BLE001 - one failing cell must not stop the matrix
        log.error("cell %s seed %d failed: %s", spec.cell_id(), seed, exc)
        return seed, None, f"{type(exc).__name__}: {exc}"


def run_ablation_matrix(matrix: MatrixConfig, out_root, jobs: int = 1) -> ReportBundle:
    """Run every (cell, seed) not already finished under ``out_root``; return the bundle."""
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "matrix.json").write_text(json.dumps(matrix.to_dict(), sort_keys=True, indent=1) + "\n")
    cells = [CellResult(spec) for spec in matrix.cells()]
    todo = []
    for ci, cell in enumerate(cells):
        for seed in cell.spec.seeds:
            done = load_run(run_dir_for(out_root, cell.spec, seed))
            if done is not None:
                cell.runs[seed] = done
            else:
                todo.append((ci, seed))
    log.info("%d cells, %d runs to do, %d reused", len(cells), len(todo),
             sum(len(c.runs) for c in cells))

    def collect(ci, result):
        seed, rec, err = result
        if err is None:
            cells[ci].runs[seed] = pl.MetricsRecord.from_json(rec)
        else:
            cells[ci].failures[seed] = err

    if jobs <= 1:
        _pin_threads()
        for ci, seed in todo:
            collect(ci, _run_one(cells[ci].spec.to_dict(), seed, str(out_root)))
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_worker_init) as pool:
            futs = [(ci, pool.submit(_run_one, cells[ci].spec.to_dict(), seed, str(out_root))) for ci, seed in todo]
            for (ci, fut), (_, seed) in zip(futs, todo):
                try:
                    collect(ci, fut.result())
                except Exception as exc:  # noqa: BLE001 - a dead worker is a per-cell failure
                    collect(ci, (seed, None, f"{type(exc).__name__}: {exc}"))
    for c in cells:
        c.runs = dict(sorted(c.runs.items()))
    return ReportBundle(cells, out_root, matrix)


def load_bundle(out_root) -> ReportBundle:
    """Rebuild a bundle from a finished (or partial) matrix directory without running anything."""
    out_root = Path(out_root)
    path = out_root / "matrix.json"
    if not path.exists():
        raise FileNotFoundError(f"no matrix.json under {out_root}")
    matrix = MatrixConfig.from_dict(json.loads(path.read_text()))
    cells = []
    for spec in matrix.cells():
        cell = CellResult(spec)
        for seed in spec.seeds:
            rec = load_run(run_dir_for(out_root, spec, seed))
            if rec is None:
                cell.failures[seed] = "missing run"
            else:
                cell.runs[seed] = rec
        cells.append(cell)
    return ReportBundle(cells, out_root, matrix)


def single_cell_bundle(spec: ExperimentSpec, out_root, seeds: Sequence[int] = None) -> ReportBundle:
    matrix = MatrixConfig(dataset=spec.dataset, seeds=tuple(seeds or spec.seeds), settings=spec.settings,
                          blocks=({k: getattr(spec, k) for k in CELL_DEFAULTS},))
    return run_ablation_matrix(matrix, out_root)
