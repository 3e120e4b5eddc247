"""The two-stage training framework.

Stage 1: restoration pretraining (CNN 1) on every available training image,
then supervised fine-tuning from its trunk (CNN 2). Stage 2: CNN 2 labels the
unlabeled images, and CNN 3, again initialized from CNN 1, is trained on the
labeled batch loss plus the MSE to those pseudo labels.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import losses
from .dataset import DatasetManifest
from .degrade import MODES, degrade, sample_spec
from .models import (Checkpoint, ModelConfig, SegNet, build_model, make_checkpoint,
                     transfer_trunk)
from .nnkit import AdamState, NonFiniteError, apply_adam
from .phantom import CLASS_NAMES, VIEWS, Sample

log = logging.getLogger(__name__)

FOREGROUND = (1, 2)
STREAMS = {"order": 1, "pseudo": 2, "degrade": 3, "val_degrade": 4}


class TrainingError(RuntimeError):
    pass


class SplitContamination(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    batch_size: int = 8
    seed: int = 0
    precision: str = "float64"
    loss_choice: str = "CE"
    degrade_mode: str = "BOTH"
    ce_reduction: str = "mean"
    # None = one full pass over the (labeled) training images per epoch
    steps_per_epoch: Optional[int] = None
    val_every: int = 1
    soft_pseudo: bool = False

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1")
        if self.loss_choice not in losses.SUPERVISED:
            raise ValueError(f"loss_choice must be one of {tuple(losses.SUPERVISED)}")
        if self.degrade_mode not in MODES:
            raise ValueError(f"degrade_mode must be one of {MODES}")

    def to_dict(self):
        return asdict(self)


@dataclass
class SampleSet:
    """Stacked images (N, H, W), optional class-id masks, and per-sample tags."""

    images: np.ndarray
    masks: Optional[np.ndarray]
    subjects: List[str]
    views: List[str]
    keys: List[str]

    @classmethod
    def from_samples(cls, samples: Sequence[Sample]) -> "SampleSet":
        if not samples:
            return cls(np.zeros((0, 0, 0)), None, [], [], [])
        images = np.stack([s.image for s in samples]).astype(np.float64)
        masks = None
        if all(s.mask is not None for s in samples):
            masks = np.stack([s.mask for s in samples]).astype(np.int64)
        return cls(images, masks, [s.subject_id for s in samples], [s.view for s in samples],
                   [s.key for s in samples])

    def __len__(self):
        return len(self.keys)

    def subset(self, idx) -> "SampleSet":
        idx = list(idx)
        return SampleSet(self.images[idx], None if self.masks is None else self.masks[idx],
                         [self.subjects[i] for i in idx], [self.views[i] for i in idx],
                         [self.keys[i] for i in idx])

    def concat(self, other: "SampleSet") -> "SampleSet":
        if not len(other):
            return self
        if not len(self):
            return other
        masks = None
        if self.masks is not None and other.masks is not None:
            masks = np.concatenate([self.masks, other.masks])
        return SampleSet(np.concatenate([self.images, other.images]), masks,
                         self.subjects + other.subjects, self.views + other.views, self.keys + other.keys)

    def subject_set(self):
        return sorted(set(self.subjects))


@dataclass
class PseudoLabelSet:
    masks: Dict[str, np.ndarray]          # sample key -> one-hot (L, H, W) uint8
    provenance: Dict = field(default_factory=dict)

    def __len__(self):
        return len(self.masks)


@dataclass
class StageRecord:
    stage: str
    epochs_run: int
    best_val: Optional[float]
    best_epoch: int
    checkpoint_path: Optional[str] = None
    curve: List[Dict] = field(default_factory=list)
    extra: Dict = field(default_factory=dict)

    def to_json(self) -> Dict:
        return asdict(self)

    def write(self, out_dir, name: Optional[str] = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        name = name or self.stage
        (out / f"{name}_record.json").write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")
        with open(out / f"{name}_curve.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_loss", "val_metric"])
            for row in self.curve:
                w.writerow([row["epoch"], repr(row["train_loss"]),
                            "" if row["val_metric"] is None else repr(row["val_metric"])])


class BatchStream:
    """Endless fixed-size batches drawn from successive seeded permutations."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("cannot draw batches from an empty set")
        self.n, self.bs, self.rng = n, batch_size, rng
        self._perm = np.empty(0, dtype=np.int64)

    def next(self) -> np.ndarray:
        while len(self._perm) < self.bs:
            self._perm = np.concatenate([self._perm, self.rng.permutation(self.n)])
        out, self._perm = self._perm[:self.bs], self._perm[self.bs:]
        return out


def stream(seed: int, stage: str, purpose: str) -> np.random.Generator:
    stage_code = {"cnn1": 1, "cnn2": 2, "cnn3": 3, "baseline": 4}[stage]
    # cnn3 labeled order must match cnn2's so an empty pseudo set reproduces it
    if purpose == "order" and stage in ("cnn3", "baseline"):
        stage_code = 2
    return np.random.default_rng([int(seed), stage_code, STREAMS[purpose]])


def _steps(cfg: TrainConfig, n: int) -> int:
    return cfg.steps_per_epoch if cfg.steps_per_epoch else math.ceil(n / cfg.batch_size)


def _as_input(images: np.ndarray, dtype) -> np.ndarray:
    return np.asarray(images, dtype=dtype)[:, None]


def _fit(net: SegNet, stage: str, cfg: TrainConfig, step_loss, steps: int, validate,
         higher_is_better: bool, meta: Dict):
    """Generic epoch loop with Adam and best-validation snapshotting."""
    state = AdamState(lr=cfg.lr)
    best_val = validate(net) if cfg.epochs == 0 else None
    best_epoch = 0
    best_state = net.state_dict()
    curve = []
    for epoch in range(1, cfg.epochs + 1):
        total = 0.0
        for step in range(steps):
            try:
                loss = step_loss(net)
                grads = net.backward(loss)
            except NonFiniteError as exc:
                raise TrainingError(f"{stage}: non-finite value at epoch {epoch} step {step}: {exc}") from None
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"{stage}: non-finite loss at epoch {epoch} step {step}")
            apply_adam(net, grads, state)
            total += value
        val = None
        if epoch % cfg.val_every == 0 or epoch == cfg.epochs:
            val = float(validate(net))
            better = best_val is None or (val > best_val if higher_is_better else val < best_val)
            if better:
                best_val, best_epoch, best_state = val, epoch, net.state_dict()
        curve.append({"epoch": epoch, "train_loss": total / max(steps, 1), "val_metric": val})
        log.debug("%s epoch %d loss %.5f val %s", stage, epoch, total / max(steps, 1), val)
    net.load_state_dict(best_state)
    ckpt = make_checkpoint(net, stage, epoch=best_epoch, best_val=best_val, train_config=cfg.to_dict(), **meta)
    record = StageRecord(stage, cfg.epochs, best_val, best_epoch, curve=curve)
    return ckpt, record


# -- restoration pretraining ---------------------------------------------------

def restoration_pairs(images: np.ndarray, mode: str, rng: np.random.Generator):
    specs = [sample_spec(rng, mode) for _ in range(len(images))]
    pairs = [degrade(img, s) for img, s in zip(images, specs)]
    return np.stack([p.degraded for p in pairs]), np.stack([p.original for p in pairs])


def validation_pairs(images: np.ndarray, cfg: TrainConfig):
    return restoration_pairs(images, cfg.degrade_mode, stream(cfg.seed, "cnn1", "val_degrade"))


def identity_l1(degraded: np.ndarray, original: np.ndarray) -> float:
    """L1 of passing the degraded input through unchanged."""
    return float(np.abs(degraded - original).mean())


def restoration_l1(net: SegNet, degraded: np.ndarray, original: np.ndarray) -> float:
    pred = net.predict(degraded)[:, 0]
    return float(np.abs(pred - original).mean())


def pretrain_restoration(train_images: np.ndarray, val_images: np.ndarray, model_cfg: ModelConfig,
                         train_cfg: TrainConfig, train_subjects: Sequence[str] = ()):
    """Train CNN 1 to undo the degradation; returns (checkpoint, record)."""
    if len(train_images) < 1:
        raise TrainingError("pretrain_restoration needs at least one image")
    cfg = train_cfg
    net = build_model(model_cfg.with_head("restoration"), cfg.seed)
    dtype = net.dtype
    rng = stream(cfg.seed, "cnn1", "degrade")
    batches = BatchStream(len(train_images), cfg.batch_size, stream(cfg.seed, "cnn1", "order"))
    if len(val_images):
        val_deg, val_orig = validation_pairs(val_images, cfg)
    else:
        val_deg, val_orig = restoration_pairs(train_images, cfg.degrade_mode, stream(cfg.seed, "cnn1", "val_degrade"))

    def step_loss(model):
        idx = batches.next()
        deg, orig = restoration_pairs(train_images[idx], cfg.degrade_mode, rng)
        out = model(_as_input(deg, dtype))
        return losses.l1(out, _as_input(orig, dtype))

    def validate(model):
        return restoration_l1(model, val_deg, val_orig)

    ckpt, rec = _fit(net, "cnn1", cfg, step_loss, _steps(cfg, len(train_images)), validate, False,
                     {"train_subjects": sorted(set(train_subjects)), "val_metric": "l1",
                      "degrade_mode": cfg.degrade_mode})
    rec.extra["identity_l1"] = identity_l1(val_deg, val_orig)
    return ckpt, rec


# -- segmentation stages -------------------------------------------------------

def subject_scores(probs_or_masks: np.ndarray, targets: np.ndarray, subjects: Sequence[str],
                   classes=FOREGROUND, already_hard: bool = False) -> Dict[str, Dict[int, float]]:
    """Per-subject pooled DSC for each class."""
    hard = probs_or_masks if already_hard else losses.hard_mask(probs_or_masks)
    onehot = losses.one_hot(targets, hard.shape[1])
    out: Dict[str, Dict[int, float]] = {}
    for subj in sorted(set(subjects)):
        idx = [i for i, s in enumerate(subjects) if s == subj]
        out[subj] = {c: losses.subject_dsc([hard[i] for i in idx], [onehot[i] for i in idx], c)
                     for c in classes}
    return out


def mean_foreground_dsc(net: SegNet, data: SampleSet) -> float:
    probs = net.predict(data.images)
    scores = subject_scores(probs, data.masks, data.subjects)
    return float(np.mean([v for s in scores.values() for v in s.values()]))


def _check_labeled(data: SampleSet, what: str):
    if len(data) == 0:
        raise TrainingError(f"{what}: no labeled samples (0 labeled subjects)")
    if data.masks is None:
        raise TrainingError(f"{what}: samples lack masks")


def train_segmentation(stage: str, init: Optional[Checkpoint], labeled_train: SampleSet,
                       labeled_val: SampleSet, model_cfg: ModelConfig, train_cfg: TrainConfig,
                       pseudo: Optional[PseudoLabelSet] = None, unlabeled: Optional[SampleSet] = None,
                       extra_meta: Optional[Dict] = None):
    _check_labeled(labeled_train, stage)
    _check_labeled(labeled_val, f"{stage} validation")
    cfg = train_cfg
    net = build_model(model_cfg.with_head("segmentation"), cfg.seed)
    if init is not None:
        transfer_trunk(init, net, "reinit_head", target_stage=stage)
    dtype = net.dtype
    L = net.config.num_classes
    sup = losses.SUPERVISED[cfg.loss_choice]
    targets = losses.one_hot(labeled_train.masks, L).astype(dtype)
    batches = BatchStream(len(labeled_train), cfg.batch_size, stream(cfg.seed, stage, "order"))

    use_pseudo = pseudo is not None and len(pseudo) > 0
    if use_pseudo:
        if unlabeled is None or set(unlabeled.keys) != set(pseudo.masks):
            raise TrainingError("pseudo labels do not match the unlabeled training samples")
        u_images = unlabeled.images
        u_targets = np.stack([pseudo.masks[k] for k in unlabeled.keys]).astype(dtype)
        u_batches = BatchStream(len(unlabeled), cfg.batch_size, stream(cfg.seed, stage, "pseudo"))

    def step_loss(model):
        idx = batches.next()
        if cfg.loss_choice == "CE":
            l_su = sup(model(_as_input(labeled_train.images[idx], dtype)), targets[idx], cfg.ce_reduction)
        else:
            l_su = sup(model(_as_input(labeled_train.images[idx], dtype)), targets[idx])
        if not use_pseudo:
            return l_su
        uidx = u_batches.next()
        l_un = losses.mse(model(_as_input(u_images[uidx], dtype)), u_targets[uidx])
        return losses.total(l_su, l_un)

    meta = {"train_subjects": sorted(set(labeled_train.subjects) | set(unlabeled.subjects if use_pseudo else ())),
            "val_subjects": labeled_val.subject_set(), "val_metric": "mean_dsc",
            "init_from": None if init is None else {"stage": init.stage, "digest": init.digest()}}
    if use_pseudo:
        meta["pseudo_provenance"] = pseudo.provenance
    meta.update(extra_meta or {})
    return _fit(net, stage, cfg, step_loss, _steps(cfg, len(labeled_train)),
                lambda m: mean_foreground_dsc(m, labeled_val), True, meta)


def _require_stage(ckpt: Checkpoint, stage: str, what: str):
    if ckpt.stage != stage:
        raise TrainingError(f"{what} requires a {stage} checkpoint, got stage {ckpt.stage!r}")


def finetune_segmentation(cnn1: Checkpoint, labeled_train: SampleSet, labeled_val: SampleSet,
                          model_cfg: ModelConfig, train_cfg: TrainConfig):
    _require_stage(cnn1, "cnn1", "finetune_segmentation")
    return train_segmentation("cnn2", cnn1, labeled_train, labeled_val, model_cfg, train_cfg)


def train_baseline(labeled_train: SampleSet, labeled_val: SampleSet, model_cfg: ModelConfig,
                   train_cfg: TrainConfig):
    """Supervised training from random initialization on labeled data only."""
    return train_segmentation("baseline", None, labeled_train, labeled_val, model_cfg, train_cfg)


def predict_pseudo_labels(cnn2: Checkpoint, unlabeled: SampleSet, batch_size: int = 16) -> PseudoLabelSet:
    _require_stage(cnn2, "cnn2", "predict_pseudo_labels")
    if len(unlabeled) and unlabeled.images.ndim != 3:
        raise TrainingError("unlabeled images missing or malformed")
    net = cnn2.to_model()
    masks = {}
    if len(unlabeled):
        probs = net.predict(unlabeled.images, batch_size)
        hard = losses.hard_mask(probs).astype(np.uint8)
        masks = {k: hard[i] for i, k in enumerate(unlabeled.keys)}
    return PseudoLabelSet(masks, {"cnn2_digest": cnn2.digest(), "count": len(masks)})


def train_semi(cnn1: Checkpoint, labeled_train: SampleSet, pseudo: PseudoLabelSet, unlabeled: SampleSet,
               labeled_val: SampleSet, model_cfg: ModelConfig, train_cfg: TrainConfig):
    """CNN 3: labeled loss plus MSE to pseudo labels, one backward on the sum."""
    if cnn1.stage != "cnn1":
        # transfer_trunk raises the leakage error for a cnn2 source
        transfer_trunk(cnn1, build_model(model_cfg.with_head("segmentation"), 0), target_stage="cnn3")
        raise TrainingError(f"train_semi requires a cnn1 checkpoint, got {cnn1.stage!r}")
    return train_segmentation("cnn3", cnn1, labeled_train, labeled_val, model_cfg, train_cfg,
                              pseudo=pseudo, unlabeled=unlabeled)


# -- evaluation ----------------------------------------------------------------

@dataclass
class MetricsRecord:
    per_subject: Dict[str, Dict[str, float]]
    per_view: Dict[str, Dict[str, Dict[str, float]]]
    summary: Dict[str, Dict[str, float]]
    summary_by_view: Dict[str, Dict[str, Dict[str, float]]]
    mean_foreground: float
    checkpoint: Optional[str] = None
    extra: Dict = field(default_factory=dict)
    # secondary aggregation: mean and std over single images instead of subjects
    summary_per_image: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def to_json(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_json(cls, raw: Dict) -> "MetricsRecord":
        return cls(**raw)


def _mean_std(values: Sequence[float]) -> Dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0}


def audit_split(manifest: Optional[DatasetManifest], train_subjects: Sequence[str],
                eval_subjects: Sequence[str]) -> None:
    """Raise if any evaluation subject also contributed training gradients."""
    overlap = sorted(set(train_subjects) & set(eval_subjects))
    if overlap:
        raise SplitContamination(f"evaluation subjects used in training: {overlap}")
    if manifest is not None:
        for s in eval_subjects:
            if manifest.split.get(s) == "train":
                raise SplitContamination(f"subject {s} is a training subject in the manifest")
        for s in train_subjects:
            if manifest.split.get(s) in ("val", "test"):
                raise SplitContamination(f"training subject {s} belongs to {manifest.split[s]}")


def score_predictions(hard: np.ndarray, data: SampleSet, classes=(0, 1, 2), checkpoint: Optional[str] = None) -> MetricsRecord:
    """Build a MetricsRecord from one-hot predictions (N, L, H, W)."""
    names = {c: CLASS_NAMES[c] for c in classes}
    per_subject = {s: {names[c]: v for c, v in d.items()}
                   for s, d in subject_scores(hard, data.masks, data.subjects, classes, True).items()}
    per_view: Dict[str, Dict[str, Dict[str, float]]] = {}
    for view in VIEWS:
        idx = [i for i, v in enumerate(data.views) if v == view]
        if not idx:
            continue
        sub = [data.subjects[i] for i in idx]
        per_view[view] = {s: {names[c]: v for c, v in d.items()}
                          for s, d in subject_scores(hard[idx], data.masks[idx], sub, classes, True).items()}
    summary = {names[c]: _mean_std([per_subject[s][names[c]] for s in per_subject]) for c in classes}
    by_view = {view: {names[c]: _mean_std([d[s][names[c]] for s in d]) for c in classes}
               for view, d in per_view.items()}
    onehot = losses.one_hot(data.masks, hard.shape[1])
    per_image = {names[c]: _mean_std([losses.dsc_metric(hard[i], onehot[i], c) for i in range(len(hard))])
                 for c in classes}
    fg = [summary[names[c]]["mean"] for c in classes if c in FOREGROUND]
    return MetricsRecord(per_subject, per_view, summary, by_view, float(np.mean(fg)), checkpoint,
                         summary_per_image=per_image)


def evaluate(ckpt: Checkpoint, test_set: SampleSet, manifest: Optional[DatasetManifest] = None) -> MetricsRecord:
    if test_set.masks is None or len(test_set) == 0:
        raise TrainingError("evaluate needs a labeled, non-empty test set")
    audit_split(manifest, ckpt.metadata.get("train_subjects", []), test_set.subject_set())
    net = ckpt.to_model()
    hard = losses.hard_mask(net.predict(test_set.images))
    return score_predictions(hard, test_set, checkpoint=ckpt.digest())
