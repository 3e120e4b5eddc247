"""On-disk phantom datasets: PGM images/masks plus a JSON manifest."""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .phantom import PhantomConfig, Sample, generate_volume, slice_views

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "val", "test")
DEFAULT_SPLIT = (10, 2, 4)


class DatasetError(RuntimeError):
    pass


# -- PGM ---------------------------------------------------------------------

def write_pgm(path, array: np.ndarray, maxval: int) -> None:
    """Binary (P5) PGM; 16-bit samples are big-endian as the format requires."""
    a = np.asarray(array)
    if a.ndim != 2:
        raise ValueError("PGM holds 2D arrays only")
    if maxval > 255:
        body = a.astype(">u2").tobytes()
    else:
        body = a.astype(np.uint8).tobytes()
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(body)


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> Tuple[np.ndarray, int]:
    data = Path(path).read_bytes()
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise DatasetError(f"{path}: malformed PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise DatasetError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1  # single whitespace byte after maxval
    dtype = ">u2" if maxval > 255 else np.uint8
    count = w * h
    need = count * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise DatasetError(f"{path}: truncated PGM body")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(h, w)
    return arr, maxval


def save_image(path, image: np.ndarray) -> None:
    write_pgm(path, np.rint(np.clip(image, 0.0, 1.0) * 65535), 65535)


def load_image(path) -> np.ndarray:
    arr, maxval = read_pgm(path)
    return arr.astype(np.float64) / maxval


def save_mask(path, mask: np.ndarray) -> None:
    write_pgm(path, mask, 255)


def load_mask(path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return arr.astype(np.int64)


# -- manifest ----------------------------------------------------------------

@dataclass
class SampleRef:
    path: str
    mask_path: Optional[str]
    view: str
    subject: str
    slice: int

    @property
    def has_mask(self) -> bool:
        return self.mask_path is not None

    @property
    def key(self) -> str:
        return f"{self.subject}/{self.view}_{self.slice:03d}"


@dataclass
class DatasetManifest:
    labeled_subjects: List[str]
    unlabeled_subjects: List[str]
    split: Dict[str, str]
    samples: List[SampleRef]
    config: Dict = field(default_factory=dict)
    root: Optional[Path] = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for subj in self.unlabeled_subjects:
            if self.split.get(subj, "train") != "train":
                raise DatasetError(f"unlabeled subject {subj} assigned to {self.split[subj]}")
        for ref in self.samples:
            if ref.subject in self.unlabeled_subjects and ref.has_mask:
                raise DatasetError(f"unlabeled subject {ref.subject} has a mask file")
        for subj, part in self.split.items():
            if part not in SPLITS:
                raise DatasetError(f"bad split value {part!r} for {subj}")

    def subjects(self, part: str, labeled: bool = True) -> List[str]:
        pool = self.labeled_subjects if labeled else self.unlabeled_subjects
        return [s for s in pool if self.split.get(s) == part]

    def refs(self, subjects: Iterable[str]) -> List[SampleRef]:
        wanted = set(subjects)
        return [r for r in self.samples if r.subject in wanted]

    @property
    def sample_index(self):
        return [(r.path, r.view, r.subject, r.has_mask) for r in self.samples]

    def to_json(self) -> Dict:
        return {
            "format": 1,
            "config": self.config,
            "subjects": {"labeled": self.labeled_subjects, "unlabeled": self.unlabeled_subjects},
            "split": dict(sorted(self.split.items())),
            "samples": [{"path": r.path, "mask_path": r.mask_path, "view": r.view,
                         "subject": r.subject, "slice": r.slice} for r in self.samples],
        }

    def save(self, root) -> Path:
        path = Path(root) / MANIFEST_NAME
        path.write_text(json.dumps(self.to_json(), indent=1) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        raw = json.loads(path.read_text())
        samples = [SampleRef(s["path"], s["mask_path"], s["view"], s["subject"], int(s["slice"]))
                   for s in raw["samples"]]
        return cls(list(raw["subjects"]["labeled"]), list(raw["subjects"]["unlabeled"]),
                   dict(raw["split"]), samples, raw.get("config", {}), path.parent)

    def load_samples(self, subjects: Iterable[str], with_masks: bool = True,
                     views: Optional[Sequence[str]] = None) -> List[Sample]:
        if self.root is None:
            raise DatasetError("manifest has no root directory")
        out = []
        for r in self.refs(subjects):
            if views is not None and r.view not in views:
                continue
            img = load_image(self.root / r.path)
            mask = None
            if with_masks:
                if not r.has_mask:
                    raise DatasetError(f"{r.key} has no mask")
                mask = load_mask(self.root / r.mask_path)
            out.append(Sample(img, r.view, r.subject, r.slice, mask))
        return out


def labeled_ids(n: int) -> List[str]:
    return [f"L{i:03d}" for i in range(n)]


def unlabeled_ids(n: int) -> List[str]:
    return [f"U{i:03d}" for i in range(n)]


def assign_splits(subjects: Sequence[str], split_spec: Sequence[int], seed: int) -> Dict[str, str]:
    if len(split_spec) != 3 or any(c < 0 for c in split_spec):
        raise DatasetError(f"split_spec must be three non-negative counts, got {split_spec}")
    if sum(split_spec) != len(subjects):
        raise DatasetError(f"split counts {tuple(split_spec)} do not sum to {len(subjects)} labeled subjects")
    order = np.random.default_rng([int(seed), 0x5EED]).permutation(len(subjects))
    out = {}
    bounds = np.cumsum(split_spec)
    for rank, idx in enumerate(order):
        part = SPLITS[int(np.searchsorted(bounds, rank, side="right"))]
        out[subjects[idx]] = part
    return out


def build_dataset(config: PhantomConfig, n_labeled: int = 16, n_unlabeled: int = 32,
                  split_spec: Sequence[int] = DEFAULT_SPLIT, out_dir=".") -> DatasetManifest:
    """Generate all subjects, write PGM slices and ``manifest.json``."""
    root = Path(out_dir)
    lab = labeled_ids(n_labeled)
    unl = unlabeled_ids(n_unlabeled)
    split = assign_splits(lab, split_spec, config.seed)
    for s in unl:
        split[s] = "train"

    refs: List[SampleRef] = []
    for subj in lab + unl:
        labeled = subj in lab
        img_dir = root / "images" / subj
        img_dir.mkdir(parents=True, exist_ok=True)
        if labeled:
            (root / "masks" / subj).mkdir(parents=True, exist_ok=True)
        vol = generate_volume(config, subj)
        for s in slice_views(vol, config.slices_per_view, with_masks=labeled):
            name = f"{s.view}_{s.slice_index:03d}.pgm"
            ipath = f"images/{subj}/{name}"
            save_image(root / ipath, s.image)
            mpath = None
            if labeled:
                mpath = f"masks/{subj}/{name}"
                save_mask(root / mpath, s.mask)
            refs.append(SampleRef(ipath, mpath, s.view, subj, s.slice_index))

    cfg = dict(config.to_dict(), n_labeled=n_labeled, n_unlabeled=n_unlabeled,
               split_spec=list(split_spec))
    manifest = DatasetManifest(lab, unl, split, refs, cfg, root)
    manifest.save(root)
    return manifest


def dataset_exists(out_dir) -> bool:
    return (Path(out_dir) / MANIFEST_NAME).exists()

