"""Seeded synthetic pelvic phantoms.

Each subject is a cubic volume with two labeled organ analogues:

* bladder-analog (label 2): bright, nearly homogeneous ellipsoid with a
  crisp boundary;
* uterus-analog (label 1): mid-intensity ellipsoid whose radius carries a
  sinusoidal perturbation, with internal texture and a blurred edge.

The background is smooth value noise under a low-frequency bias field, with
unlabeled distractor blobs of uterus-like intensity. Geometry comes from a
per-subject stream derived by hashing ``(seed, subject_id)``, so subjects can
be generated in any order.
"""
from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

BACKGROUND, UTERUS, BLADDER = 0, 1, 2
CLASS_NAMES = {BACKGROUND: "background", UTERUS: "uterus", BLADDER: "bladder"}
VIEWS = ("axial", "coronal", "sagittal")
VIEW_AXIS = {"axial": 0, "coronal": 1, "sagittal": 2}
MAX_PLACEMENT_TRIES = 50


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    volume_side: int = 64
    noise_sigma: float = 0.03
    bias_strength: float = 0.15
    slices_per_view: int = 10
    seed: int = 0
    distractors: int = 2
    organ_count: int = 2

    def __post_init__(self):
        if self.volume_side < 16:
            raise ValueError("volume_side must be >= 16")
        if not 1 <= self.slices_per_view <= self.volume_side:
            raise ValueError("slices_per_view must be in [1, volume_side]")
        if self.organ_count != 2:
            raise ValueError("organ_count is fixed at 2")
        if self.noise_sigma < 0 or self.bias_strength < 0:
            raise ValueError("noise_sigma and bias_strength must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class Ellipsoid:
    center: Tuple[float, float, float]
    radii: Tuple[float, float, float]
    angle: float = 0.0          # rotation about axis 0, radians
    wobble_amp: float = 0.0     # relative radius perturbation
    wobble_freq: Tuple[int, int] = (0, 0)
    wobble_phase: Tuple[float, float] = (0.0, 0.0)

    def normalized_radius(self, z, y, x):
        """Ellipsoidal radius of points divided by the (perturbed) boundary radius."""
        dz = z - self.center[0]
        dy = y - self.center[1]
        dx = x - self.center[2]
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * dy + s * dx
        v = -s * dy + c * dx
        q = np.sqrt((dz / self.radii[0]) ** 2 + (u / self.radii[1]) ** 2 + (v / self.radii[2]) ** 2)
        if self.wobble_amp:
            theta = np.arctan2(v / self.radii[2], u / self.radii[1])
            phi = np.arctan2(dz / self.radii[0], np.hypot(u / self.radii[1], v / self.radii[2]))
            # continuous on the sphere: the azimuthal term fades out at the poles
            bound = 1.0 + self.wobble_amp * (
                np.sin(self.wobble_freq[0] * theta + self.wobble_phase[0]) * np.cos(phi)
                + 0.5 * np.sin(2 * self.wobble_freq[1] * phi + self.wobble_phase[1]))
            q = q / bound
        return q

    def contains(self, z, y, x):
        return self.normalized_radius(z, y, x) <= 1.0


@dataclass
class PhantomVolume:
    intensity: np.ndarray
    labels: np.ndarray
    subject_id: str
    organs: Dict[int, Ellipsoid] = field(default_factory=dict)

    def __post_init__(self):
        if self.intensity.shape != self.labels.shape:
            raise ValueError("intensity and labels must share a shape")


@dataclass
class Sample:
    image: np.ndarray
    view: str
    subject_id: str
    slice_index: int
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ValueError(f"unknown view {self.view!r}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError("mask shape differs from image shape")
            if not set(np.unique(self.mask)).issubset({0, 1, 2}):
                raise ValueError("mask ids must be in {0, 1, 2}")

    @property
    def key(self) -> str:
        return f"{self.subject_id}/{self.view}_{self.slice_index:03d}"


def subject_rng(seed: int, subject_id: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}:{subject_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def _grid(side: int):
    return np.meshgrid(*(np.arange(side, dtype=np.float64),) * 3, indexing="ij")


def _value_noise(rng, side: int, cells: int) -> np.ndarray:
    coarse = rng.uniform(0.0, 1.0, size=(cells,) * 3)
    fine = ndimage.zoom(coarse, side / cells, order=3, mode="reflect", grid_mode=True)
    return fine[:side, :side, :side]


def _bias_field(rng, side: int) -> np.ndarray:
    z, y, x = [a / (side - 1) for a in _grid(side)]
    field_ = np.zeros((side,) * 3)
    for _ in range(3):
        k = rng.uniform(0.3, 1.0, size=3) * np.pi
        ph = rng.uniform(0, 2 * np.pi)
        field_ += rng.uniform(-1, 1) * np.cos(k[0] * z + k[1] * y + k[2] * x + ph)
    peak = np.abs(field_).max()
    return field_ / peak if peak > 0 else field_


def _draw_organs(rng, side: int):
    c = (side - 1) / 2.0
    s = side / 64.0
    # organs sit on opposite sides of the center along a body diagonal, so
    # both can cut all three central planes without touching
    signs = rng.choice([-1.0, 1.0], size=3)
    off = rng.uniform(8.5, 10.0, size=3) * s
    bladder = Ellipsoid(
        center=tuple(float(v) for v in c - signs * off),
        radii=tuple(float(v) for v in rng.uniform(11.0, 13.5, size=3) * s),
        angle=float(rng.uniform(0, np.pi)),
    )
    off = rng.uniform(8.5, 10.0, size=3) * s
    uterus = Ellipsoid(
        center=tuple(float(v) for v in c + signs * off),
        radii=(float(rng.uniform(12.0, 14.0) * s), float(rng.uniform(9.5, 12.0) * s),
               float(rng.uniform(9.5, 12.0) * s)),
        angle=float(rng.uniform(0, np.pi)),
        wobble_amp=float(rng.uniform(0.10, 0.18)),
        wobble_freq=(int(rng.integers(3, 6)), int(rng.integers(2, 4))),
        wobble_phase=(float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi))),
    )
    return bladder, uterus


def _draw_distractor(rng, side: int) -> Ellipsoid:
    s = side / 64.0
    return Ellipsoid(
        center=tuple(rng.uniform(0.15, 0.85, size=3) * (side - 1)),
        radii=tuple(rng.uniform(3.0, 6.0, size=3) * s),
        angle=float(rng.uniform(0, np.pi)),
    )


def organ_labels(side: int, organs: Dict[int, Ellipsoid]) -> np.ndarray:
    z, y, x = _grid(side)
    labels = np.zeros((side,) * 3, dtype=np.uint8)
    for cls, ell in organs.items():
        labels[ell.contains(z, y, x)] = cls
    return labels


def generate_volume(config: PhantomConfig, subject_id: str) -> PhantomVolume:
    side = config.volume_side
    rng = subject_rng(config.seed, subject_id)
    z, y, x = _grid(side)
    c = (side - 1) / 2.0

    for _ in range(MAX_PLACEMENT_TRIES):
        bladder, uterus = _draw_organs(rng, side)
        in_b = bladder.contains(z, y, x)
        in_u = uterus.contains(z, y, x)
        if (in_b & in_u).any():
            continue
        # both organs must cut the three central planes
        ok = all(m.take(int(round(c)), axis=a).any() for m in (in_b, in_u) for a in range(3))
        fracs = (in_b.mean(), in_u.mean())
        if ok and all(0.01 <= f <= 0.25 for f in fracs):
            break
    else:
        raise GenerationError(f"organ placement failed for subject {subject_id!r} (seed={config.seed})")

    distract = np.zeros_like(in_b)
    placed = 0
    for _ in range(MAX_PLACEMENT_TRIES * max(config.distractors, 1)):
        if placed >= config.distractors:
            break
        d = _draw_distractor(rng, side)
        m = d.contains(z, y, x)
        grown = ndimage.binary_dilation(in_b | in_u, iterations=2)
        if (m & grown).any():
            continue
        distract |= m
        placed += 1

    labels = np.zeros((side,) * 3, dtype=np.uint8)
    labels[in_u] = UTERUS
    labels[in_b] = BLADDER

    background = 0.22 + 0.18 * _value_noise(rng, side, 6)
    texture = _value_noise(rng, side, 16) - 0.5
    soft_u = ndimage.gaussian_filter(in_u.astype(np.float64), 1.0)
    soft_d = ndimage.gaussian_filter(distract.astype(np.float64), 1.0)
    u_level = rng.uniform(0.50, 0.58)
    img = background
    img = img * (1 - soft_d) + soft_d * (u_level + rng.uniform(-0.04, 0.04))
    img = img * (1 - soft_u) + soft_u * (u_level + 0.25 * texture)
    img = np.where(in_b, rng.uniform(0.82, 0.9) + 0.01 * texture, img)
    if config.bias_strength:
        img = img * (1.0 + config.bias_strength * _bias_field(rng, side))
    if config.noise_sigma:
        img = img + rng.normal(0.0, config.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return PhantomVolume(img, labels, subject_id, {BLADDER: bladder, UTERUS: uterus})


def slice_indices(side: int, n: int) -> List[int]:
    """``n`` evenly spaced slice positions centered in ``[0, side)``."""
    if not 1 <= n <= side:
        raise ValueError("slices_per_view must be in [1, volume_side]")
    return [int((2 * k + 1) * side // (2 * n)) for k in range(n)]


def slice_views(volume: PhantomVolume, slices_per_view: int, with_masks: bool = True) -> List[Sample]:
    side = volume.intensity.shape[0]
    out = []
    for view in VIEWS:
        ax = VIEW_AXIS[view]
        for idx in slice_indices(side, slices_per_view):
            img = np.take(volume.intensity, idx, axis=ax)
            mask = np.take(volume.labels, idx, axis=ax) if with_masks else None
            out.append(Sample(np.ascontiguousarray(img), view, volume.subject_id, idx,
                              None if mask is None else np.ascontiguousarray(mask)))
    return out
