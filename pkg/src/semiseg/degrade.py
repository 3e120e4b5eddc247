"""Image deterioration for the restoration pretext task.

Lines along one axis are subsampled and replicated back to full size (the
super-resolution task), whole lines along an axis are permuted (the
pixel-shuffling task), or both.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

MODES = ("SR", "PS", "BOTH")
RATIOS = (4, 6, 8)
AXES = ("rows", "cols")


def _axis_index(axis: str) -> int:
    try:
        return AXES.index(axis)
    except ValueError:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}") from None


def other_axis(axis: str) -> str:
    return AXES[1 - _axis_index(axis)]


@dataclass(frozen=True)
class DegradeSpec:
    mode: str
    ratio: int
    axis: str
    permutation_seed: Optional[int] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        # ratio 1 is the identity, allowed for explicit construction only
        if self.ratio not in RATIOS and self.ratio != 1:
            raise ValueError(f"ratio must be one of {RATIOS}, got {self.ratio}")
        _axis_index(self.axis)
        if self.mode == "SR" and self.permutation_seed is not None:
            raise ValueError("SR mode uses the identity permutation")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RestorationPair:
    degraded: np.ndarray
    original: np.ndarray
    spec: DegradeSpec


def downsample_replicate(image: np.ndarray, axis: str, ratio: int) -> np.ndarray:
    """Keep every ``ratio``-th line along ``axis`` and repeat each kept line ``ratio`` times.

    Trailing lines that do not fill a full group are dropped before
    subsampling; the tail of the output repeats the last kept line.
    """
    image = np.asarray(image)
    ax = _axis_index(axis)
    extent = image.shape[ax]
    if ratio == 1:
        return image.copy()
    if ratio < 1 or ratio > extent:
        raise ValueError(f"ratio {ratio} invalid for extent {extent}")
    usable = (extent // ratio) * ratio
    kept = np.arange(0, usable, ratio)
    src = np.repeat(kept, ratio)
    if usable < extent:
        src = np.concatenate([src, np.full(extent - usable, kept[-1])])
    return np.take(image, src, axis=ax)


def line_permutation(n: int, permutation_seed: Optional[int]) -> np.ndarray:
    """Seeded uniform permutation of ``n`` lines; ``None`` gives the identity."""
    if permutation_seed is None:
        return np.arange(n)
    # Generator.permutation is a Fisher-Yates shuffle
    return np.random.default_rng(permutation_seed).permutation(n)


def shuffle_axis(image: np.ndarray, axis: str, permutation_seed: Optional[int]) -> np.ndarray:
    image = np.asarray(image)
    ax = _axis_index(axis)
    perm = line_permutation(image.shape[ax], permutation_seed)
    return np.take(image, perm, axis=ax)


def unshuffle_axis(image: np.ndarray, axis: str, permutation_seed: Optional[int]) -> np.ndarray:
    ax = _axis_index(axis)
    perm = line_permutation(image.shape[ax], permutation_seed)
    return np.take(image, np.argsort(perm), axis=ax)


def degrade(image: np.ndarray, spec: DegradeSpec) -> RestorationPair:
    original = np.asarray(image)
    if spec.mode == "SR":
        out = downsample_replicate(original, spec.axis, spec.ratio)
    elif spec.mode == "PS":
        out = shuffle_axis(original, spec.axis, spec.permutation_seed)
    else:
        out = downsample_replicate(original, spec.axis, spec.ratio)
        out = shuffle_axis(out, other_axis(spec.axis), spec.permutation_seed)
    return RestorationPair(out, original.copy(), spec)


def sample_spec(rng: np.random.Generator, mode: str) -> DegradeSpec:
    """Draw ratio, axis and permutation seed.

    The same three draws are consumed in every mode, so one stream yields
    aligned spec sequences across task ablations.
    """
    ratio = int(RATIOS[rng.integers(len(RATIOS))])
    axis = AXES[int(rng.integers(len(AXES)))]
    seed = int(rng.integers(0, 2**63 - 1))
    return DegradeSpec(mode, ratio, axis, None if mode == "SR" else seed)
