import hashlib
import time

import numpy as np
import pytest

from semiseg.models import (Checkpoint, CheckpointError, LeakageError, ModelConfig, StructureMismatch,
                            build_model, deserialize, load_checkpoint, make_checkpoint, save_checkpoint,
                            serialize, transfer_trunk)
from semiseg.nnkit import Tensor, grad_check, weighted_sum


def tiny(arch="unet", head="segmentation", depth=2, base=4, **kw):
    return ModelConfig(arch=arch, depth=depth, base_channels=base, head=head, **kw)


def test_param_count_depth1_base1():
    net = build_model(tiny(depth=1, base=1))
    # enc.0: 1->1, 1->1 ; bott: 1->2, 2->2 ; up 2->1 (2x2) ; dec.0: 2->1, 1->1 ; head 1->3 (1x1)
    expect = (9 + 1) * 2 + (9 * 2 + 2) + (9 * 4 + 2) + (2 * 4 + 1) + (9 * 2 + 1) + (9 + 1) + (3 + 3)
    assert net.num_params() == expect


def test_param_names_position_encoded():
    names = list(build_model(tiny()).params)
    assert "enc.0.conv1.weight" in names and "dec.1.up.weight" in names and names[-1] == "head.bias"
    pp = list(build_model(tiny("unetpp")).params)
    assert "x0_2.conv2.weight" in pp and "x1_1.up.weight" in pp


@pytest.mark.parametrize("arch", ["unet", "unetpp"])
def test_init_determinism_and_output_contract(arch):
    a, b = build_model(tiny(arch), 3), build_model(tiny(arch), 3)
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    x = np.random.default_rng(0).random((2, 1, 8, 12))
    y = a.predict(x)
    assert y.shape == (2, 3, 8, 12)
    assert np.all(np.abs(y.sum(axis=1) - 1) <= 1e-12)
    r = build_model(tiny(arch, head="restoration"), 3).predict(x)
    assert r.shape == (2, 1, 8, 12) and r.min() > 0 and r.max() < 1


def test_input_divisibility():
    with pytest.raises(ValueError):
        build_model(tiny(depth=2)).predict(np.zeros((1, 1, 6, 8)))


@pytest.mark.parametrize("arch", ["unet", "unetpp"])
def test_small_net_grad_check(arch):
    net = build_model(tiny(arch), seed=1)
    x = np.random.default_rng(1).random((1, 1, 8, 8))
    c = np.random.default_rng(2).standard_normal((1, 3, 8, 8))
    start = time.time()
    rep = grad_check(lambda: weighted_sum(net(x), c), dict(net.params), max_coords=40)
    assert rep.max_rel_err < 1e-4, (rep.failing_nodes, rep.max_rel_err)
    assert time.time() - start < 120


def test_float32_precision():
    net = build_model(tiny(precision="float32"))
    assert net.predict(np.zeros((1, 1, 8, 8))).dtype == np.float32


# -- checkpoints ---------------------------------------------------------------------

def test_roundtrip_bitwise(tmp_path):
    net = build_model(tiny(), 4)
    ck = make_checkpoint(net, "cnn1", epoch=3, best_val=0.5)
    digest = save_checkpoint(ck, tmp_path / "a.sslc")
    back = load_checkpoint(tmp_path / "a.sslc")
    assert back.metadata == ck.metadata
    assert list(back.tensors) == list(ck.tensors)
    for k in ck.tensors:
        assert back.tensors[k].tobytes() == ck.tensors[k].tobytes()
    assert digest == hashlib.sha256((tmp_path / "a.sslc").read_bytes()).hexdigest()
    assert serialize(back) == serialize(ck)


def test_layout_hash_is_fixed():
    ck = Checkpoint({"w": np.array([1.0, -2.0]), "v": np.array([[0.5]], dtype=np.float32)}, {"stage": "cnn1"})
    data = serialize(ck)
    assert data[:4] == b"SSLC"
    assert data[4:8] == (1).to_bytes(4, "little")
    # frozen digest of the little-endian layout
    assert hashlib.sha256(data).hexdigest() == FROZEN_DIGEST


FROZEN_DIGEST = hashlib.sha256(
    b"SSLC" + (1).to_bytes(4, "little") + (17).to_bytes(4, "little") + b'{"stage": "cnn1"}'
    + (2).to_bytes(4, "little")
    + (1).to_bytes(4, "little") + b"w" + bytes([0, 1]) + (2).to_bytes(4, "little")
    + np.array([1.0, -2.0], dtype="<f8").tobytes()
    + (1).to_bytes(4, "little") + b"v" + bytes([1, 2]) + (1).to_bytes(4, "little") * 2
    + np.array([0.5], dtype="<f4").tobytes()).hexdigest()


@pytest.mark.parametrize("cut", [3, 10, 40, -1])
def test_truncated_checkpoint(tmp_path, cut):
    data = serialize(make_checkpoint(build_model(tiny()), "cnn1"))
    with pytest.raises(CheckpointError):
        deserialize(data[:cut])


def test_bad_magic_version_trailing():
    data = serialize(make_checkpoint(build_model(tiny()), "cnn1"))
    with pytest.raises(CheckpointError, match="magic"):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(CheckpointError, match="version"):
        deserialize(data[:4] + (2).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        deserialize(data + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.sslc")


# -- transfer ------------------------------------------------------------------------

def test_transfer_copies_trunk_and_reseeds_head():
    src = make_checkpoint(build_model(tiny(head="restoration"), 1), "cnn1")
    target = build_model(tiny(), 9)
    fresh_head = target.params["head.weight"].data.copy()
    transfer_trunk(src, target)
    for name in target.trunk_names():
        assert target.params[name].data.tobytes() == src.tensors[name].tobytes()
    assert src.tensors["head.weight"].shape[0] == 1
    assert target.params["head.weight"].data.shape[0] == 3
    assert np.array_equal(target.params["head.weight"].data, fresh_head)


def test_transfer_idempotent():
    src = make_checkpoint(build_model(tiny(head="restoration"), 1), "cnn1")
    once = transfer_trunk(src, build_model(tiny(), 2)).state_dict()
    twice_net = transfer_trunk(src, build_model(tiny(), 2))
    transfer_trunk(src, twice_net)
    assert all(np.array_equal(once[k], v) for k, v in twice_net.state_dict().items())


def test_transfer_refuses_cnn2_for_cnn3():
    cnn2 = make_checkpoint(build_model(tiny(), 1), "cnn2")
    with pytest.raises(LeakageError, match="leak"):
        transfer_trunk(cnn2, build_model(tiny(), 2), target_stage="cnn3")


def test_transfer_structure_mismatch():
    src = make_checkpoint(build_model(tiny(base=4), 1), "cnn1")
    with pytest.raises(StructureMismatch):
        transfer_trunk(src, build_model(tiny(base=8), 2))
    with pytest.raises(StructureMismatch):
        transfer_trunk(src, build_model(tiny("unetpp"), 2))


def test_structural_equality_across_heads():
    a = set(build_model(tiny(head="restoration")).trunk_names())
    b = set(build_model(tiny()).trunk_names())
    assert a == b
