import hashlib
from pathlib import Path

import numpy as np
import pytest

from semiseg.dataset import (DatasetError, DatasetManifest, assign_splits, build_dataset, load_image,
                             load_mask, read_pgm, save_image, save_mask, write_pgm)
from semiseg.phantom import (BLADDER, UTERUS, VIEWS, PhantomConfig, Sample, _grid, generate_volume,
                             slice_indices, slice_views)


@pytest.fixture(scope="module")
def vol17():
    return generate_volume(PhantomConfig(seed=17), "L000")


def test_noiseless_labels_match_ellipsoids():
    vol = generate_volume(PhantomConfig(volume_side=32, noise_sigma=0, bias_strength=0, seed=3), "S1")
    z, y, x = _grid(32)
    expect = np.zeros_like(vol.labels)
    expect[vol.organs[UTERUS].contains(z, y, x)] = UTERUS
    expect[vol.organs[BLADDER].contains(z, y, x)] = BLADDER
    assert np.array_equal(vol.labels, expect)


def test_volume_determinism():
    cfg = PhantomConfig(volume_side=32, seed=5)
    a, b = generate_volume(cfg, "X"), generate_volume(cfg, "X")
    assert np.array_equal(a.intensity, b.intensity) and np.array_equal(a.labels, b.labels)
    c = generate_volume(cfg, "Y")
    assert not np.array_equal(a.intensity, c.intensity)


def test_seed17_fractions(vol17):
    for cls in (UTERUS, BLADDER):
        frac = (vol17.labels == cls).sum() / vol17.labels.size
        assert 0.01 <= frac <= 0.25
    assert vol17.intensity.min() >= 0 and vol17.intensity.max() <= 1


def test_bladder_brighter_than_uterus(vol17):
    assert vol17.intensity[vol17.labels == BLADDER].mean() > vol17.intensity[vol17.labels == UTERUS].mean() + 0.15


@pytest.mark.parametrize("seed", [0, 1, 2, 17])
def test_central_slices_contain_both_organs(seed):
    vol = generate_volume(PhantomConfig(seed=seed), "L001")
    mid = int(round((64 - 1) / 2))
    for ax in range(3):
        ids = set(np.unique(np.take(vol.labels, mid, axis=ax)))
        assert {UTERUS, BLADDER} <= ids


def test_slice_views_counts(vol17):
    samples = slice_views(vol17, 10)
    assert len(samples) == 30
    assert all(s.image.shape == (64, 64) for s in samples)
    assert [s.view for s in samples[::10]] == list(VIEWS)


def test_full_slicing_reassembles():
    vol = generate_volume(PhantomConfig(volume_side=16, seed=1), "Z")
    samples = slice_views(vol, 16)
    for view_i, view in enumerate(VIEWS):
        stack = np.stack([s.image for s in samples if s.view == view], axis=view_i)
        assert np.array_equal(stack, vol.intensity)
        masks = np.stack([s.mask for s in samples if s.view == view], axis=view_i)
        assert np.array_equal(masks, vol.labels)


def test_slice_indices_centered():
    assert slice_indices(64, 1) == [32]
    assert slice_indices(64, 2) == [16, 48]
    with pytest.raises(ValueError):
        slice_indices(16, 17)


def test_config_validation():
    with pytest.raises(ValueError):
        PhantomConfig(volume_side=8)
    with pytest.raises(ValueError):
        PhantomConfig(volume_side=16, slices_per_view=17)
    with pytest.raises(ValueError):
        PhantomConfig(organ_count=3)


def test_sample_validation():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), "axial", "s", 0, np.full((4, 4), 3))
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), "oblique", "s", 0)


# -- PGM and datasets -------------------------------------------------------------

def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).random((5, 7))
    save_image(tmp_path / "a.pgm", img)
    back = load_image(tmp_path / "a.pgm")
    assert np.abs(back - img).max() <= 0.5 / 65535 + 1e-12
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n7 5\n65535\n") and len(raw) == len(b"P5\n7 5\n65535\n") + 70
    m = np.array([[0, 1], [2, 0]])
    save_mask(tmp_path / "m.pgm", m)
    assert np.array_equal(load_mask(tmp_path / "m.pgm"), m)


def test_pgm_big_endian(tmp_path):
    write_pgm(tmp_path / "b.pgm", np.array([[258]]), 65535)
    assert (tmp_path / "b.pgm").read_bytes().endswith(b"\x01\x02")
    arr, maxval = read_pgm(tmp_path / "b.pgm")
    assert arr[0, 0] == 258 and maxval == 65535


def test_pgm_truncated(tmp_path):
    write_pgm(tmp_path / "c.pgm", np.zeros((4, 4)), 255)
    data = (tmp_path / "c.pgm").read_bytes()
    (tmp_path / "c.pgm").write_bytes(data[:-3])
    with pytest.raises(DatasetError):
        read_pgm(tmp_path / "c.pgm")


def test_assign_splits_partition():
    subs = [f"L{i:03d}" for i in range(16)]
    split = assign_splits(subs, (10, 2, 4), 0)
    assert sorted(split) == subs
    assert [list(split.values()).count(p) for p in ("train", "val", "test")] == [10, 2, 4]
    with pytest.raises(DatasetError):
        assign_splits(subs, (10, 2, 3), 0)


def _hash_tree(root: Path):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_build_dataset_small(tmp_path):
    cfg = PhantomConfig(volume_side=16, slices_per_view=2, seed=4)
    m = build_dataset(cfg, 3, 2, (1, 1, 1), tmp_path / "a")
    build_dataset(cfg, 3, 2, (1, 1, 1), tmp_path / "b")
    assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")
    assert len(m.samples) == 5 * 6
    assert sum(r.has_mask for r in m.samples) == 3 * 6
    assert not list((tmp_path / "a" / "masks").glob("U*"))
    loaded = DatasetManifest.load(tmp_path / "a")
    assert loaded.to_json() == m.to_json()
    parts = {p: set(loaded.subjects(p)) for p in ("train", "val", "test")}
    assert sum(len(v) for v in parts.values()) == 3
    assert set(loaded.unlabeled_subjects) == {"U000", "U001"}
    assert all(loaded.split[u] == "train" for u in loaded.unlabeled_subjects)
    samples = loaded.load_samples(loaded.subjects("test"))
    assert len(samples) == 6 and all(s.mask is not None for s in samples)
    with pytest.raises(DatasetError):
        loaded.load_samples(["U000"], with_masks=True)


def test_default_counts(tmp_path):
    m = build_dataset(PhantomConfig(volume_side=16, slices_per_view=10), 16, 32, (10, 2, 4), tmp_path)
    labeled = [r for r in m.samples if r.has_mask]
    assert len(labeled) == 480 and len(m.samples) - len(labeled) == 960


def test_manifest_rejects_unlabeled_in_test():
    with pytest.raises(DatasetError):
        DatasetManifest(["L0"], ["U0"], {"L0": "train", "U0": "test"}, [])
