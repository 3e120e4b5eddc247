import csv
import json
import os
import shutil
import xml.etree.ElementTree as ET
from dataclasses import asdict

import numpy as np
import pytest

from semiseg.dataset import build_dataset
from semiseg.harness.cli import EXIT_PARTIAL, EXIT_RUNTIME, EXIT_USAGE, load_config, main
from semiseg.harness.experiment import (ExperimentSpec, RunSettings, StageError, filter_views, load_cell_data,
                                        load_run, run_dir_for, run_experiment)
from semiseg.harness.matrix import PRESETS, MatrixConfig, ReportBundle, load_bundle, run_ablation_matrix
from semiseg.harness.report import ReportError, emit_report
from semiseg.phantom import PhantomConfig

TINY = RunSettings(epochs=1, depth=2, base_channels=4, batch_size=4, steps_per_epoch=2, pretrain_steps_per_epoch=2)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    build_dataset(PhantomConfig(volume_side=16, slices_per_view=2, seed=2), 16, 32, (10, 2, 4), root)
    return str(root)


def spec(dataset, **kw):
    base = dict(dataset=dataset, settings=TINY, labeled_subjects_used=2)
    base.update(kw)
    return ExperimentSpec(**base)


# -- specs and data selection ----------------------------------------------------------

def test_spec_validation(dataset):
    with pytest.raises(ValueError):
        spec(dataset, method="transfer")
    with pytest.raises(ValueError):
        spec(dataset, view_filter="oblique")
    with pytest.raises(ValueError):
        spec(dataset, seeds=())


def test_spec_roundtrip_and_cell_id(dataset):
    s = spec(dataset, seeds=(3, 4))
    back = ExperimentSpec.from_dict(json.loads(json.dumps(s.to_dict())))
    assert back == s
    assert back.cell_id() == s.cell_id()
    # the seed list is not part of the cell identity
    assert spec(dataset, seeds=(9,)).cell_id() == s.cell_id()
    assert spec(dataset, sup_loss="DL").cell_id() != s.cell_id()


def test_view_filters(dataset):
    data = load_cell_data(spec(dataset, labeled_subjects_used=10))
    full = data.labeled_train
    cor = filter_views(full, "coronal")
    assert set(cor.views) == {"coronal"} and len(cor) == len(full) // 3
    part = filter_views(full, "partial_third")
    assert len(part) == len(full) // 3
    assert part.keys == filter_views(full, "partial_third").keys
    assert len(set(part.subjects)) > 1


def test_cell_data_selection(dataset):
    a = load_cell_data(spec(dataset, labeled_subjects_used=2))
    b = load_cell_data(spec(dataset, labeled_subjects_used=10))
    assert len(a.labeled_train.subject_set()) == 2 and len(b.labeled_train.subject_set()) == 10
    assert set(a.labeled_train.subject_set()) < set(b.labeled_train.subject_set())
    # restoration pretraining sees the same images whatever the labeled count
    assert np.array_equal(a.pretrain_images, b.pretrain_images)
    assert len(a.unlabeled) == 32 * 6
    assert not set(a.pretrain_subjects) & set(a.test.subject_set() + a.labeled_val.subject_set())
    single = load_cell_data(spec(dataset, view_filter="axial"))
    assert set(single.labeled_val.views) == {"axial"} and set(single.test.views) == {"axial", "coronal", "sagittal"}


def test_too_many_subjects_names_stage(dataset, tmp_path):
    with pytest.raises(StageError) as info:
        run_experiment(spec(dataset, labeled_subjects_used=11), 0, tmp_path)
    assert info.value.stage == "data"


# -- single runs -------------------------------------------------------------------------

def test_baseline_rerun_bit_identical(dataset, tmp_path):
    s = spec(dataset, method="baseline")
    a = run_experiment(s, 0, tmp_path / "a")
    b = run_experiment(s, 0, tmp_path / "b", cache=False)
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    run = run_dir_for(tmp_path / "a", s, 0)
    assert (run / "checkpoints" / "baseline.sslc").exists()
    assert (run / "baseline_curve.csv").exists()


def test_semi_run_layout(dataset, tmp_path):
    s = spec(dataset, method="semi_sl")
    rec = run_experiment(s, 1, tmp_path)
    assert set(rec.summary) == {"background", "uterus", "bladder"}
    assert all(set(v) == {"mean", "std"} for v in rec.summary.values())
    run = run_dir_for(tmp_path, s, 1)
    cfg = json.loads((run / "config.json").read_text())
    assert set(cfg["stages"]) == {"cnn1", "cnn2", "cnn3"}
    assert load_run(run).to_json() == rec.to_json()
    assert rec.checkpoint is not None and rec.extra["run_dir"] == str(run.relative_to(tmp_path))


def test_stage_cache_shared_between_methods(dataset, tmp_path):
    self_rec = run_experiment(spec(dataset, method="self_sl"), 0, tmp_path)
    run_experiment(spec(dataset, method="semi_sl"), 0, tmp_path)
    cfg_self = json.loads((run_dir_for(tmp_path, spec(dataset, method="self_sl"), 0) / "config.json").read_text())
    cfg_semi = json.loads((run_dir_for(tmp_path, spec(dataset, method="semi_sl"), 0) / "config.json").read_text())
    for stage in ("cnn1", "cnn2"):
        assert cfg_self["stages"][stage]["sha256"] == cfg_semi["stages"][stage]["sha256"]
    assert len(list((tmp_path / "cache" / "cnn1").glob("*.sslc"))) == 1
    # the self_sl result is the shared CNN 2 checkpoint
    assert self_rec.checkpoint == cfg_self["stages"]["cnn2"]["sha256"]


# -- matrix ----------------------------------------------------------------------------

def test_table4_preset_has_15_cells(dataset):
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY, tables=("table4",))
    cells = m.cells()
    assert len(cells) == 15
    assert {(c.method, c.labeled_subjects_used) for c in cells} == {
        (meth, n) for meth in ("baseline", "self_sl", "semi_sl") for n in (2, 4, 6, 8, 10)}


def test_baseline_cells_collapse_over_modes(dataset):
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY, tables=("table2",))
    methods = [c.method for c in m.cells()]
    assert methods.count("baseline") == 2 and methods.count("self_sl") == 6


def test_all_presets_dedupe(dataset):
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY, tables=tuple(PRESETS))
    ids = [c.cell_id() for c in m.cells()]
    assert len(ids) == len(set(ids))


def test_matrix_config_errors(dataset):
    with pytest.raises(ValueError):
        MatrixConfig(dataset=dataset, tables=("table9",))
    with pytest.raises(ValueError):
        MatrixConfig(dataset=dataset, blocks=({"colour": ["red"]},))
    with pytest.raises(ValueError):
        MatrixConfig(dataset=dataset).cells()


def test_one_cell_matrix_wraps_run(dataset, tmp_path):
    s = spec(dataset, method="baseline", seeds=(0,))
    single = run_experiment(s, 0, tmp_path / "single")
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY,
                     blocks=({"method": "baseline", "labeled_subjects_used": 2},))
    bundle = run_ablation_matrix(m, tmp_path / "matrix")
    assert len(bundle.cells) == 1
    assert bundle.cells[0].runs[0].to_json() == single.to_json()


def test_matrix_resume_recomputes_only_missing(dataset, tmp_path):
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY,
                     blocks=({"method": ["baseline", "self_sl"], "labeled_subjects_used": 2},))
    bundle = run_ablation_matrix(m, tmp_path)
    paths = [run_dir_for(tmp_path, c.spec, 0) / "metrics.json" for c in bundle.cells]
    stamps = [p.stat().st_mtime_ns for p in paths]
    before = [p.read_bytes() for p in paths]
    shutil.rmtree(paths[0].parent)
    again = run_ablation_matrix(m, tmp_path)
    assert paths[1].stat().st_mtime_ns == stamps[1]
    assert paths[0].read_bytes() == before[0]
    assert all(c.complete for c in again.cells)


def test_matrix_parallel_matches_serial(dataset, tmp_path):
    m = MatrixConfig(dataset=dataset, seeds=(0, 1), settings=TINY,
                     blocks=({"method": ["baseline", "semi_sl"], "labeled_subjects_used": 2},))
    a = run_ablation_matrix(m, tmp_path / "serial", jobs=1)
    b = run_ablation_matrix(m, tmp_path / "parallel", jobs=2)
    for ca, cb in zip(a.cells, b.cells):
        assert [r.to_json() for r in ca.runs.values()] == [r.to_json() for r in cb.runs.values()]


def test_load_bundle_marks_gaps(dataset, tmp_path):
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY,
                     blocks=({"method": ["baseline"], "labeled_subjects_used": [1, 2]},))
    bundle = run_ablation_matrix(m, tmp_path)
    shutil.rmtree(run_dir_for(tmp_path, bundle.cells[0].spec, 0))
    loaded = load_bundle(tmp_path)
    assert loaded.cells[0].failures == {0: "missing run"} and loaded.cells[1].complete


# -- report ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_bundle(dataset, tmp_path_factory):
    root = tmp_path_factory.mktemp("bundle")
    m = MatrixConfig(dataset=dataset, seeds=(0,), settings=TINY,
                     blocks=({"method": ["baseline", "self_sl", "semi_sl"], "labeled_subjects_used": [1, 2]},))
    return run_ablation_matrix(m, root)


def test_report_refuses_empty(tmp_path):
    with pytest.raises(ReportError, match="empty"):
        emit_report(ReportBundle([], tmp_path), tmp_path / "r")


def test_report_files_and_shapes(small_bundle, tmp_path):
    summary = emit_report(small_bundle, tmp_path, timestamp="T")
    with open(tmp_path / "cells.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(small_bundle.cells) * 2
    assert {r["class"] for r in rows} == {"uterus", "bladder"}
    assert all(r["run_dirs"] and r["checkpoint_sha256"] for r in rows)
    expected_rows = {"table2": 6, "table3": 4, "table4": 5, "table5": 5, "table6": 4}
    for name, n in expected_rows.items():
        assert summary["files"][name]["rows"] == n
        lines = (tmp_path / f"{name}.csv").read_text().splitlines()
        assert len(lines) == n + 1
    t4 = (tmp_path / "table4.csv").read_text().splitlines()
    assert t4[1].startswith("2,") and "n/a" not in t4[1] and "n/a" in t4[2]
    tree = ET.parse(tmp_path / "fig3.svg")
    ids = {el.get("id") for el in tree.iter() if el.get("id", "").startswith("series-")}
    assert ids == {"series-baseline", "series-self_sl", "series-semi_sl"}
    assert summary["timestamp"] == "T"
    assert summary["semi_over_baseline"]["mean_delta"] is not None


def test_report_bytes_deterministic(small_bundle, tmp_path):
    emit_report(small_bundle, tmp_path / "a", timestamp="T")
    emit_report(small_bundle, tmp_path / "b", timestamp="T")
    for f in sorted(os.listdir(tmp_path / "a")):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_report_unwritable(small_bundle, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(ReportError, match="cannot write"):
        emit_report(small_bundle, blocker / "sub")


# -- CLI -----------------------------------------------------------------------------

def test_config_json_and_toml(tmp_path):
    (tmp_path / "a.json").write_text('{"epochs": 3, "dataset": "d"}')
    (tmp_path / "b.toml").write_text('epochs = 3\ndataset = "d"\n')
    assert load_config(tmp_path / "a.json") == load_config(tmp_path / "b.toml")


def test_cli_usage_errors(tmp_path, capsys):
    assert main(["pretrain", "--out", str(tmp_path)]) == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["nope"])
    assert info.value.code == EXIT_USAGE
    (tmp_path / "bad.toml").write_text("= broken")
    assert main(["ablate", "--config", str(tmp_path / "bad.toml"), "--out", str(tmp_path)]) == EXIT_USAGE


def test_cli_runtime_error(dataset, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"dataset": dataset, "checkpoint": str(tmp_path / "missing.sslc")}))
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


def test_cli_partial_matrix_exit(dataset, tmp_path):
    cfg = tmp_path / "m.json"
    cfg.write_text(json.dumps({"dataset": dataset, "seeds": [0], "settings": asdict(TINY),
                               "blocks": [{"method": "baseline", "labeled_subjects_used": [2, 11]}]}))
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_PARTIAL
    summary = json.loads((tmp_path / "o" / "report" / "summary.json").read_text())
    assert len(summary["failures"]) == 1 and "stage data" in summary["failures"][0]["error"]
    t4 = (tmp_path / "o" / "report" / "table4.csv").read_text().splitlines()
    assert "n/a" in t4[-1]
    # re-rendering from the run directories keeps the gap
    assert main(["report", "--out", str(tmp_path / "o")]) == EXIT_PARTIAL

