"""U-Net / U-Net++ graphs, checkpoints and trunk transfer between training stages."""
from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .nnkit import DTYPES, Graph, Tensor
from .nnkit import ops

ARCHS = ("unet", "unetpp")
HEADS = ("restoration", "segmentation")
STAGES = ("cnn1", "cnn2", "cnn3", "baseline")
INIT_SCHEME = "kaiming-normal fan-in (relu gain) for trunk convs, std sqrt(1/fan_in) head, zero biases"

MAGIC = b"SSLC"
VERSION = 1
DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
CODE_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


class CheckpointError(RuntimeError):
    pass


class StructureMismatch(ValueError):
    pass


class LeakageError(ValueError):
    """A checkpoint that has seen validation labels was offered for CNN 3 initialization."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "unet"
    depth: int = 4
    base_channels: int = 16
    in_channels: int = 1
    head: str = "segmentation"
    num_classes: int = 3
    precision: str = "float64"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if self.depth < 1 or self.base_channels < 1:
            raise ValueError("depth and base_channels must be positive")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {tuple(DTYPES)}")

    @property
    def out_channels(self) -> int:
        return 1 if self.head == "restoration" else self.num_classes

    def with_head(self, head: str) -> "ModelConfig":
        return replace(self, head=head)

    def trunk_signature(self) -> Dict:
        return {"arch": self.arch, "depth": self.depth, "base_channels": self.base_channels,
                "in_channels": self.in_channels}

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def _param_rng(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{int(seed)}/{name}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


def is_head(name: str) -> bool:
    return name.startswith("head.")


class SegNet(Graph):
    """Shared machinery for both architectures: parameter creation, blocks, head."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(DTYPES[config.precision])
        self.config = config
        self.seed = int(seed)
        self._build()
        self._conv("head", self._head_in, config.out_channels, k=1, head=True)

    def _build(self):
        raise NotImplementedError

    def _conv(self, prefix, cin, cout, k=3, head=False):
        fan_in = cin * k * k
        std = np.sqrt(1.0 / fan_in) if head else np.sqrt(2.0 / fan_in)
        w = _param_rng(self.seed, prefix + ".weight").standard_normal((cout, cin, k, k)) * std
        self.add_param(prefix + ".weight", w)
        self.add_param(prefix + ".bias", np.zeros(cout))

    def _up(self, prefix, cin, cout):
        std = np.sqrt(2.0 / cin)
        w = _param_rng(self.seed, prefix + ".weight").standard_normal((cin, cout, 2, 2)) * std
        self.add_param(prefix + ".weight", w)
        self.add_param(prefix + ".bias", np.zeros(cout))

    def _block_params(self, prefix, cin, cout):
        self._conv(prefix + ".conv1", cin, cout)
        self._conv(prefix + ".conv2", cout, cout)

    def _apply_conv(self, x, prefix):
        p = self.params
        return ops.conv2d(x, p[prefix + ".weight"], p[prefix + ".bias"], label=prefix)

    def _block(self, x, prefix):
        x = ops.relu(self._apply_conv(x, prefix + ".conv1"), label=prefix + ".relu1")
        return ops.relu(self._apply_conv(x, prefix + ".conv2"), label=prefix + ".relu2")

    def _upsample(self, x, prefix):
        p = self.params
        return ops.conv_transpose2x2(x, p[prefix + ".weight"], p[prefix + ".bias"], label=prefix)

    def _head(self, x):
        logits = self._apply_conv(x, "head")
        if self.config.head == "restoration":
            out = ops.sigmoid(logits, label="head.sigmoid")
        else:
            out = ops.softmax(logits, axis=0, label="head.softmax")
        return ops.to_batch_major(out, label="head.layout")

    def _check_input(self, x: Tensor):
        if x.data.ndim != 4 or x.data.shape[1] != self.config.in_channels:
            raise ValueError(f"expected input (N, {self.config.in_channels}, H, W), got {x.data.shape}")
        step = 2 ** self.config.depth
        h, w = x.data.shape[2:]
        if h % step or w % step:
            raise ValueError(f"input side {h}x{w} not divisible by 2^depth={step}")

    def reinit_head(self):
        for name in [n for n in self.params if is_head(n)]:
            del self.params[name]
        self._conv("head", self._head_in, self.config.out_channels, k=1, head=True)

    def trunk_names(self):
        return [n for n in self.params if not is_head(n)]

    def predict(self, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Forward (N, H, W) or (N, 1, H, W) images without recording gradients."""
        x = np.asarray(images, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        saved = [(p, p.requires_grad) for p in self.params.values()]
        for p, _ in saved:
            p.requires_grad = False
        try:
            outs = [self(x[i:i + batch_size]).data for i in range(0, len(x), batch_size)]
        finally:
            for p, flag in saved:
                p.requires_grad = flag
        return np.concatenate(outs, axis=0)


class UNet(SegNet):
    def _build(self):
        c = self.config
        ch = [c.base_channels * 2 ** i for i in range(c.depth + 1)]
        cin = c.in_channels
        for i in range(c.depth):
            self._block_params(f"enc.{i}", cin, ch[i])
            cin = ch[i]
        self._block_params("bott", ch[c.depth - 1], ch[c.depth])
        for i in reversed(range(c.depth)):
            self._up(f"dec.{i}.up", ch[i + 1], ch[i])
            self._block_params(f"dec.{i}", 2 * ch[i], ch[i])
        self._head_in = ch[0]

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        x = ops.to_channel_major(x, label="input.layout")
        skips = []
        for i in range(self.config.depth):
            x = self._block(x, f"enc.{i}")
            skips.append(x)
            x = ops.maxpool2(x, label=f"enc.{i}.pool")
        x = self._block(x, "bott")
        for i in reversed(range(self.config.depth)):
            up = self._upsample(x, f"dec.{i}.up")
            x = ops.concat([skips[i], up], label=f"dec.{i}.cat")
            x = self._block(x, f"dec.{i}")
        return self._head(x)


class UNetPP(SegNet):
    """Nested U-Net: node (i, j) fuses all same-level predecessors with the upsampled node (i+1, j-1)."""

    def _build(self):
        c = self.config
        ch = [c.base_channels * 2 ** i for i in range(c.depth + 1)]
        self._ch = ch
        for i in range(c.depth + 1):
            self._block_params(f"x{i}_0", c.in_channels if i == 0 else ch[i - 1], ch[i])
        for j in range(1, c.depth + 1):
            for i in range(c.depth + 1 - j):
                self._up(f"x{i}_{j}.up", ch[i + 1], ch[i])
                self._block_params(f"x{i}_{j}", (j + 1) * ch[i], ch[i])
        self._head_in = ch[0]

    def forward(self, x: Tensor) -> Tensor:
        self._check_input(x)
        x = ops.to_channel_major(x, label="input.layout")
        d = self.config.depth
        nodes = {}
        for i in range(d + 1):
            if i > 0:
                x = ops.maxpool2(nodes[(i - 1, 0)], label=f"x{i - 1}_0.pool")
            nodes[(i, 0)] = self._block(x, f"x{i}_0")
        for j in range(1, d + 1):
            for i in range(d + 1 - j):
                up = self._upsample(nodes[(i + 1, j - 1)], f"x{i}_{j}.up")
                cat = ops.concat([nodes[(i, k)] for k in range(j)] + [up], label=f"x{i}_{j}.cat")
                nodes[(i, j)] = self._block(cat, f"x{i}_{j}")
        return self._head(nodes[(0, d)])


def build_model(config: ModelConfig, seed: int = 0) -> SegNet:
    return (UNet if config.arch == "unet" else UNetPP)(config, seed)


# -- checkpoints -------------------------------------------------------------

@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]"
    metadata: Dict = field(default_factory=dict)

    @property
    def stage(self) -> Optional[str]:
        return self.metadata.get("stage")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.metadata["model"])

    def to_model(self) -> SegNet:
        net = build_model(self.model_config(), self.metadata.get("seed", 0))
        net.load_state_dict(self.tensors)
        return net

    def to_bytes(self) -> bytes:
        return serialize(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def make_checkpoint(graph: SegNet, stage: str, **extra) -> Checkpoint:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    meta = {
        "stage": stage,
        "arch": graph.config.arch,
        "model": asdict(graph.config),
        "config_hash": graph.config.config_hash(),
        "seed": graph.seed,
        "init": INIT_SCHEME,
        "epoch": extra.pop("epoch", 0),
        "best_val": extra.pop("best_val", None),
    }
    meta.update(extra)
    return Checkpoint(graph.state_dict(), meta)


def serialize(ckpt: Checkpoint) -> bytes:
    meta = json.dumps(ckpt.metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr)
        le = a.dtype.newbyteorder("<")
        if le not in DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {a.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", DTYPE_CODES[le], a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.astype(le, copy=False).tobytes())
    return b"".join(parts)


def deserialize(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {pos}, file has {len(view)}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic: not an SSLC checkpoint")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = bytes(take(nlen)).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = CODE_DTYPES[code]
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(n * dt.itemsize)), dtype=dt).reshape(dims)
        tensors[name] = arr.astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after tensor table")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> str:
    """Write atomically; returns the sha256 of the file bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = serialize(ckpt)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return deserialize(data)


def transfer_trunk(source: Checkpoint, target: SegNet, head_policy: str = "reinit_head",
                   target_stage: Optional[str] = None) -> SegNet:
    """Copy every non-head tensor of ``source`` into ``target`` and re-seed the head.

    ``target_stage='cnn3'`` enforces that only a restoration-pretrained
    (cnn1) checkpoint may initialize the semi-supervised network: a cnn2
    checkpoint was selected on validation labels and would leak them.
    """
    if head_policy != "reinit_head":
        raise ValueError(f"unknown head policy {head_policy!r}")
    if target_stage == "cnn3" and source.stage != "cnn1":
        raise LeakageError(
            f"CNN 3 must be initialized from the cnn1 (restoration) checkpoint, got stage "
            f"{source.stage!r}: a cnn2 checkpoint was selected on validation labels, so using it "
            f"would leak validation data into CNN 3")
    src_sig = ModelConfig(**source.metadata["model"]).trunk_signature()
    if src_sig != target.config.trunk_signature():
        raise StructureMismatch(f"trunk mismatch: source {src_sig} vs target {target.config.trunk_signature()}")
    trunk = [n for n in target.params if not is_head(n)]
    src_trunk = [n for n in source.tensors if not is_head(n)]
    if set(trunk) != set(src_trunk):
        raise StructureMismatch("parameter name sets differ outside the head")
    for name in trunk:
        arr = source.tensors[name]
        if arr.shape != target.params[name].data.shape:
            raise StructureMismatch(f"shape mismatch for {name}")
        target.params[name].data = np.array(arr, dtype=target.dtype, copy=True)
    target.reinit_head()
    return target
