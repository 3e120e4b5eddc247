"""One experiment cell: a method run on the phantom dataset for one seed."""
from __future__ import annotations

import fcntl
import hashlib
import json
import logging
import shutil
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .. import pipeline as pl
from ..dataset import DatasetManifest
from ..degrade import MODES
from ..losses import SUPERVISED
from ..models import ARCHS, Checkpoint, ModelConfig, load_checkpoint, save_checkpoint
from ..phantom import VIEWS

log = logging.getLogger(__name__)

METHODS = ("baseline", "self_sl", "semi_sl")
VIEW_FILTERS = ("coronal", "sagittal", "axial", "partial_third", "all")
SUBJECT_COUNTS = (2, 4, 6, 8, 10)
PARTIAL_SEED = 3


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RunSettings:
    """Model and optimization knobs shared by every stage of a cell."""

    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 8
    precision: str = "float64"
    depth: int = 4
    base_channels: int = 16
    # None = full pass over the training images per epoch
    steps_per_epoch: Optional[int] = None
    pretrain_steps_per_epoch: Optional[int] = None
    val_every: int = 1
    ce_reduction: str = "mean"

    def model_config(self, arch: str) -> ModelConfig:
        return ModelConfig(arch=arch, depth=self.depth, base_channels=self.base_channels,
                           precision=self.precision)

    def train_config(self, seed: int, loss: str, mode: str, pretrain: bool = False) -> pl.TrainConfig:
        spe = self.pretrain_steps_per_epoch if pretrain else self.steps_per_epoch
        return pl.TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size, seed=seed,
                              precision=self.precision, loss_choice=loss, degrade_mode=mode,
                              ce_reduction=self.ce_reduction, steps_per_epoch=spe, val_every=self.val_every)


@dataclass(frozen=True)
class ExperimentSpec:
    dataset: str
    arch: str = "unet"
    method: str = "semi_sl"
    degrade_mode: str = "BOTH"
    sup_loss: str = "CE"
    labeled_subjects_used: int = 10
    view_filter: str = "all"
    seeds: Tuple[int, ...] = (0,)
    settings: RunSettings = field(default_factory=RunSettings)

    def __post_init__(self):
        checks = [("arch", ARCHS), ("method", METHODS), ("degrade_mode", MODES),
                  ("sup_loss", tuple(SUPERVISED)), ("view_filter", VIEW_FILTERS)]
        for name, allowed in checks:
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.labeled_subjects_used < 1:
            raise ValueError("labeled_subjects_used must be >= 1")
        if not self.seeds:
            raise ValueError("seed list is empty")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def to_dict(self) -> Dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, raw: Dict) -> "ExperimentSpec":
        raw = dict(raw)
        settings = RunSettings(**raw.pop("settings", {}))
        raw["seeds"] = tuple(raw.get("seeds", (0,)))
        return cls(settings=settings, **raw)

    def cell_key(self) -> Dict:
        """Everything that defines the cell except the seed list."""
        d = self.to_dict()
        d.pop("seeds")
        d["dataset"] = dataset_digest(self.dataset)
        return d

    def cell_id(self) -> str:
        h = _hash(self.cell_key())
        return f"{self.arch}-{self.method}-{self.degrade_mode}-{self.sup_loss}-n{self.labeled_subjects_used}-{self.view_filter}-{h[:10]}"


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def dataset_digest(path) -> str:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    try:
        return hashlib.sha256(p.read_bytes()).hexdigest()
    except OSError as exc:
        raise FileNotFoundError(f"dataset manifest not found at {p}: {exc}") from None


# -- data selection -------------------------------------------------------------

def filter_views(data: pl.SampleSet, view_filter: str) -> pl.SampleSet:
    if view_filter == "all" or not len(data):
        return data
    if view_filter in VIEWS:
        return data.subset([i for i, v in enumerate(data.views) if v == view_filter])
    # partial_third: a fixed-seed one-in-three sample of the all-view images
    rng = np.random.default_rng([PARTIAL_SEED, len(data)])
    keep = np.sort(rng.choice(len(data), size=max(1, len(data) // 3), replace=False))
    return data.subset(keep.tolist())


@dataclass
class CellData:
    labeled_train: pl.SampleSet
    labeled_val: pl.SampleSet
    test: pl.SampleSet
    unlabeled: pl.SampleSet
    pretrain_images: np.ndarray
    pretrain_subjects: List[str]
    manifest: DatasetManifest


def load_cell_data(spec: ExperimentSpec) -> CellData:
    m = DatasetManifest.load(spec.dataset)
    train_subj = sorted(m.subjects("train"))
    if spec.labeled_subjects_used > len(train_subj):
        raise ValueError(f"requested {spec.labeled_subjects_used} labeled subjects, dataset has {len(train_subj)}")
    used = train_subj[:spec.labeled_subjects_used]
    view = spec.view_filter
    load = lambda subs, masks: pl.SampleSet.from_samples(m.load_samples(subs, with_masks=masks))
    labeled_train = filter_views(load(used, True), view)
    val_all = load(sorted(m.subjects("val")), True)
    labeled_val = filter_views(val_all, view) if view in VIEWS else val_all
    test = load(sorted(m.subjects("test")), True)
    unlabeled = filter_views(load(sorted(m.unlabeled_subjects), False), view)
    # restoration pretraining sees every training-split image whatever the
    # labeled count, so one CNN 1 serves the whole subject sweep
    pre = filter_views(load(train_subj, False), view).concat(unlabeled)
    pl.audit_split(m, pre.subject_set(), labeled_val.subject_set() + test.subject_set())
    return CellData(labeled_train, labeled_val, test, unlabeled, pre.images, pre.subject_set(), m)


# -- content-addressed stage cache ------------------------------------------------

@contextmanager
def _locked(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def cached_stage(cache_dir: Optional[Path], stage: str, key: Dict, compute):
    """Return (checkpoint, record dict); reuse an immutable cached result when present."""
    if cache_dir is None:
        ck, rec = compute()
        return ck, rec.to_json()
    digest = _hash(key)
    base = Path(cache_dir) / stage / digest[:32]
    with _locked(base.with_suffix(".lock")):
        ck_path, rec_path = base.with_suffix(".sslc"), base.with_suffix(".json")
        if ck_path.exists() and rec_path.exists():
            return load_checkpoint(ck_path), json.loads(rec_path.read_text())
        ck, rec = compute()
        save_checkpoint(ck, ck_path)
        tmp = rec_path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps({"key": key, **rec.to_json()}, sort_keys=True, indent=1))
        tmp.replace(rec_path)
        return ck, json.loads(rec_path.read_text())


# -- running -------------------------------------------------------------------------

def run_dir_for(out_root, spec: ExperimentSpec, seed: int) -> Path:
    return Path(out_root) / "runs" / spec.cell_id() / f"seed-{seed}"


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise StageError(name, exc) from exc


def run_experiment(spec: ExperimentSpec, seed: Optional[int] = None, out_root="runs_out",
                   cache: bool = True, data: Optional[CellData] = None) -> pl.MetricsRecord:
    """Run one cell for one seed and write its run directory."""
    seed = spec.seeds[0] if seed is None else int(seed)
    s = spec.settings
    out_root = Path(out_root)
    run_dir = run_dir_for(out_root, spec, seed)
    if run_dir.exists():
        shutil.rmtree(run_dir)
    (run_dir / "checkpoints").mkdir(parents=True)
    cache_dir = out_root / "cache" if cache else None

    data = data or _stage("data", load_cell_data, spec)
    mc = s.model_config(spec.arch)
    ds = dataset_digest(spec.dataset)
    base_key = {"dataset": ds, "model": asdict(mc), "settings": asdict(s), "seed": seed,
                "view_filter": spec.view_filter}
    stages: Dict[str, Dict] = {}

    def keep(name, ck: Checkpoint, rec: Dict):
        path = run_dir / "checkpoints" / f"{name}.sslc"
        digest = save_checkpoint(ck, path)
        stages[name] = {"checkpoint": str(path.relative_to(run_dir)), "sha256": digest,
                        "best_val": rec.get("best_val"), "best_epoch": rec.get("best_epoch")}
        pl.StageRecord(**{k: rec[k] for k in ("stage", "epochs_run", "best_val", "best_epoch", "curve")},
                       checkpoint_path=stages[name]["checkpoint"], extra=rec.get("extra", {})).write(run_dir, name)

    if spec.method == "baseline":
        tc = s.train_config(seed, spec.sup_loss, spec.degrade_mode)
        key = dict(base_key, stage="baseline", loss=spec.sup_loss, n=spec.labeled_subjects_used)
        final, rec = _stage("baseline", cached_stage, cache_dir, "baseline", key,
                            lambda: pl.train_baseline(data.labeled_train, data.labeled_val, mc, tc))
        keep("baseline", final, rec)
    else:
        pre_cfg = s.train_config(seed, spec.sup_loss, spec.degrade_mode, pretrain=True)
        k1 = dict(base_key, stage="cnn1", mode=spec.degrade_mode)
        cnn1, rec1 = _stage("cnn1", cached_stage, cache_dir, "cnn1", k1,
                            lambda: pl.pretrain_restoration(data.pretrain_images, data.labeled_val.images, mc, pre_cfg,
                                                            train_subjects=data.pretrain_subjects))
        keep("cnn1", cnn1, rec1)
        tc = s.train_config(seed, spec.sup_loss, spec.degrade_mode)
        k2 = dict(k1, stage="cnn2", cnn1=cnn1.digest(), loss=spec.sup_loss, n=spec.labeled_subjects_used)
        cnn2, rec2 = _stage("cnn2", cached_stage, cache_dir, "cnn2", k2,
                            lambda: pl.finetune_segmentation(cnn1, data.labeled_train, data.labeled_val, mc, tc))
        keep("cnn2", cnn2, rec2)
        final = cnn2
        if spec.method == "semi_sl":
            pseudo = _stage("pseudo", pl.predict_pseudo_labels, cnn2, data.unlabeled)
            cnn3, rec3 = _stage("cnn3", lambda: pl.train_semi(cnn1, data.labeled_train, pseudo, data.unlabeled,
                                                              data.labeled_val, mc, tc))
            keep("cnn3", cnn3, rec3.to_json())
            final = cnn3

    metrics = _stage("evaluate", pl.evaluate, final, data.test, data.manifest)
    metrics.extra.update({"cell_id": spec.cell_id(), "seed": seed, "run_dir": str(run_dir.relative_to(out_root))})
    config = {"spec": spec.to_dict(), "seed": seed, "dataset_sha256": ds, "model": asdict(mc),
              "stages": stages, "cell_key_sha256": _hash(spec.cell_key())}
    (run_dir / "config.json").write_text(json.dumps(config, sort_keys=True, indent=1) + "\n")
    tmp = run_dir / "metrics.json.tmp"
    tmp.write_text(json.dumps(metrics.to_json(), sort_keys=True, indent=1) + "\n")
    tmp.replace(run_dir / "metrics.json")
    return metrics


def load_run(run_dir) -> Optional[pl.MetricsRecord]:
    p = Path(run_dir) / "metrics.json"
    if not p.exists():
        return None
    return pl.MetricsRecord.from_json(json.loads(p.read_text()))
