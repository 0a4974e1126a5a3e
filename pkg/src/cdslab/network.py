"""Staged backbones with tap points, auxiliary attachments and checkpoints.

A backbone is a sequence of K stages followed by a pooled linear classifier.
Each stage is a list of blocks; the boundaries between blocks are the
positions where projection heads (contrastive supervision) or auxiliary
classifiers (classic deep supervision) can be attached. A position is a
``(stage, block)`` pair, both 1-based; ``(i, len(stage_i))`` is the end of
stage ``i``.
"""

from __future__ import annotations

import copy
import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, DimensionError
from .nn import BasicBlock, BatchNorm2d, Conv2d, ConvBNReLU, Linear, Module, ModuleList
from .tensor import Tensor

FAMILIES = ("plain-cnn", "small-resnet")
SCHEMES = ("uniform", "downsampling", "shallow", "deep")


@dataclass
class ArchSpec:
    family: str = "small-resnet"
    K: int = 4
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    num_classes: int = 10
    blocks: int = 1
    in_channels: int = 3
    input_size: int = 32

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown architecture family {self.family!r}; expected one of {FAMILIES}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if len(self.widths) != self.K:
            raise ConfigError(f"widths has {len(self.widths)} entries but K={self.K}")
        if self.blocks < 1 or self.num_classes < 2:
            raise ConfigError("blocks must be >= 1 and num_classes >= 2")
        if self.input_size % (2 ** (self.K - 1)):
            raise ConfigError(f"input size {self.input_size} is not divisible by 2^(K-1)")


class Stage(Module):
    def __init__(self, blocks: Sequence[Module]):
        super().__init__()
        self.blocks = ModuleList(blocks)

    def __len__(self):
        return len(self.blocks)


class Backbone(Module):
    """Feature stages f_1..f_K plus the final classifier g (pool + linear)."""

    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        super().__init__()
        spec.validate()
        self.spec = spec
        stages = []
        cin = spec.in_channels
        for i, width in enumerate(spec.widths):
            stride = 1 if i == 0 else 2
            blocks: list[Module] = []
            if spec.family == "plain-cnn":
                for b in range(spec.blocks):
                    blocks.append(ConvBNReLU(cin if b == 0 else width, width, rng, stride=stride if b == 0 else 1))
            else:
                if i == 0:
                    blocks.append(ConvBNReLU(cin, width, rng))
                    cin = width
                for b in range(spec.blocks):
                    blocks.append(BasicBlock(cin if b == 0 else width, width, rng,
                                             stride=stride if b == 0 else 1))
            stages.append(Stage(blocks))
            cin = width
        self.stages = ModuleList(stages)
        self.fc = Linear(spec.widths[-1], spec.num_classes, rng)
        self.stage_out_channels = list(spec.widths)
        self.stage_out_spatial = [spec.input_size // 2 ** i for i in range(spec.K)]

    def classify(self, feat: Tensor) -> Tensor:
        return self.fc(T.global_avg_pool(feat))


class ProjectionHead(Module):
    """conv-BN-ReLU, global pool, FC-ReLU-FC, then row normalization."""

    def __init__(self, cin: int, embed_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.conv = ConvBNReLU(cin, 2 * cin, rng)
        self.fc1 = Linear(2 * cin, hidden_dim, rng)
        self.fc2 = Linear(hidden_dim, embed_dim, rng)
        self.in_channels, self.embed_dim, self.hidden_dim = cin, embed_dim, hidden_dim

    def __call__(self, feat: Tensor) -> Tensor:
        h = T.global_avg_pool(self.conv(feat))
        return T.l2_normalize(self.fc2(T.relu(self.fc1(h))))


class AuxClassifier(Module):
    def __init__(self, cin: int, num_classes: int, rng: np.random.Generator):
        super().__init__()
        self.fc = Linear(cin, num_classes, rng)
        self.in_channels = cin

    def __call__(self, feat: Tensor) -> Tensor:
        return self.fc(T.global_avg_pool(feat))


@dataclass
class TapOutputs:
    final_logits: Tensor
    stage_features: list[Tensor]
    aux_logits: list[Tensor]
    aux_embeddings: list[Tensor]


class StagedNetwork(Module):
    """A backbone plus training-time attachments.

    ``heads`` and ``aux`` are parallel to ``head_positions``/``aux_positions``.
    Attachments never feed back into the backbone, so the final logits depend
    on backbone weights only.
    """

    def __init__(self, backbone: Backbone, heads=(), head_positions=(), aux=(), aux_positions=()):
        super().__init__()
        self.backbone = backbone
        self.heads = ModuleList(heads)
        self.aux = ModuleList(aux)
        object.__setattr__(self, "head_positions", [tuple(p) for p in head_positions])
        object.__setattr__(self, "aux_positions", [tuple(p) for p in aux_positions])

    @property
    def spec(self) -> ArchSpec:
        return self.backbone.spec

    @property
    def K(self) -> int:
        return self.backbone.spec.K

    def stage_lengths(self) -> list[int]:
        return [len(s) for s in self.backbone.stages]

    def backbone_parameters(self):
        return self.backbone.parameters()

    def head_parameters(self):
        return self.heads.parameters() + self.aux.parameters()

    def position_channels(self, pos: tuple[int, int]) -> int:
        stage, block = pos
        blocks = self.backbone.stages[stage - 1].blocks
        if not (1 <= block <= len(blocks)):
            raise ConfigError(f"no block {block} in stage {stage}")
        return self.backbone.stage_out_channels[stage - 1]

    def forward(self, x: Tensor, mode: str = "eval") -> Tensor:
        """Final logits only; attachments are not evaluated."""
        self.set_bn_mode(mode)
        self._check_input(x)
        h = x
        for stage in self.backbone.stages:
            for block in stage.blocks:
                h = block(h)
        return self.backbone.classify(h)

    __call__ = forward

    def _check_input(self, x: Tensor) -> None:
        s = self.spec
        want = (s.in_channels, s.input_size, s.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise DimensionError(f"input shape {x.shape} does not match [N x {want[0]} x {want[1]} x {want[2]}]")

    def describe_attachments(self) -> list[dict]:
        out = []
        for head, pos in zip(self.heads, self.head_positions):
            out.append({"kind": "projection", "stage": pos[0], "block": pos[1],
                        "embed_dim": head.embed_dim, "hidden_dim": head.hidden_dim})
        for pos in self.aux_positions:
            out.append({"kind": "classifier", "stage": pos[0], "block": pos[1]})
        return out


def build_backbone(arch: ArchSpec | dict, seed: int = 0) -> StagedNetwork:
    if isinstance(arch, dict):
        arch = ArchSpec(**arch)
    arch = copy.deepcopy(arch)
    arch.validate()
    return StagedNetwork(Backbone(arch, np.random.default_rng(seed)))


def _spread(items: list, count: int) -> list:
    m = len(items)
    idx = [int(np.floor((j + 1) * (m + 1) / (count + 1) + 0.5)) - 1 for j in range(count)]
    return [items[i] for i in idx]


def head_positions(net: StagedNetwork, scheme: str, count: int) -> list[tuple[int, int]]:
    """Tap positions chosen by a placement scheme.

    uniform: evenly spaced stage ends among 1..K-1; counts above K-1 add
    evenly spaced mid-stage block boundaries. downsampling: ends of stages
    followed by a stride-2 stage. shallow: stage ends 1..count. deep: stage
    ends K-count..K-1.
    """
    if scheme not in SCHEMES:
        raise ConfigError(f"unknown head scheme {scheme!r}; expected one of {SCHEMES}")
    lengths = net.stage_lengths()
    K = len(lengths)
    ends = [(i, lengths[i - 1]) for i in range(1, K)]
    mids = [(i, b) for i in range(1, K + 1) for b in range(1, lengths[i - 1])]
    if scheme == "uniform":
        available = len(ends) + len(mids)
    elif scheme == "downsampling":
        # every stage after the first opens with a stride-2 block
        available = len(ends)
    else:
        available = len(ends)
    if count < 1 or count > available:
        raise ConfigError(f"cannot place {count} heads with scheme {scheme!r}: {available} positions available")
    if scheme == "uniform":
        if count <= len(ends):
            return _spread(ends, count)
        return sorted(ends + _spread(mids, count - len(ends)))
    if scheme == "downsampling":
        return _spread(ends, count)
    if scheme == "shallow":
        return ends[:count]
    return ends[len(ends) - count:]


def attach_heads(net: StagedNetwork, kind: str = "projection", scheme: str = "uniform",
                 count: int | None = None, embed_dim: int = 128, hidden_dim: int = 256,
                 seed: int = 0, positions: Sequence[tuple[int, int]] | None = None) -> StagedNetwork:
    """Return a network sharing ``net``'s backbone with new attachments of ``kind``.

    Existing attachments of the other kind are kept; those of the same kind
    are replaced.
    """
    if kind not in ("projection", "classifier"):
        raise ConfigError(f"unknown attachment kind {kind!r}")
    if positions is None:
        positions = head_positions(net, scheme, net.K - 1 if count is None else count)
    positions = [tuple(p) for p in positions]
    rng = np.random.default_rng([seed, 7919 if kind == "projection" else 104729])
    dtype = net.backbone.fc.weight.dtype
    modules = []
    for pos in positions:
        cin = net.position_channels(pos)
        if kind == "projection":
            m = ProjectionHead(cin, embed_dim, hidden_dim, rng)
        else:
            m = AuxClassifier(cin, net.spec.num_classes, rng)
        modules.append(m.astype(dtype))
    if kind == "projection":
        return StagedNetwork(net.backbone, modules, positions, list(net.aux), net.aux_positions)
    return StagedNetwork(net.backbone, list(net.heads), net.head_positions, modules, positions)


def head_discard(net: StagedNetwork) -> StagedNetwork:
    """The inference network: same backbone, no attachments."""
    return StagedNetwork(net.backbone)


def forward_tapped(net: StagedNetwork, batch: Tensor, mode: str = "train") -> TapOutputs:
    """Run the backbone and every attachment.

    ``mode`` selects batch-norm behaviour: ``train`` (batch statistics, update
    running averages), ``eval`` (running averages) or ``batch`` (batch
    statistics without updating anything).
    """
    net.set_bn_mode(mode)
    net._check_input(batch)
    head_at: dict[tuple, list[int]] = {}
    for j, pos in enumerate(net.head_positions):
        head_at.setdefault(pos, []).append(j)
    aux_at: dict[tuple, list[int]] = {}
    for j, pos in enumerate(net.aux_positions):
        aux_at.setdefault(pos, []).append(j)
    embeds: list[Tensor | None] = [None] * len(net.heads)
    aux_logits: list[Tensor | None] = [None] * len(net.aux)
    stage_features = []
    h = batch
    for i, stage in enumerate(net.backbone.stages, start=1):
        for b, block in enumerate(stage.blocks, start=1):
            h = block(h)
            for j in head_at.get((i, b), ()):
                embeds[j] = net.heads[j](h)
            for j in aux_at.get((i, b), ()):
                aux_logits[j] = net.aux[j](h)
        stage_features.append(h)
    return TapOutputs(net.backbone.classify(h), stage_features, aux_logits, embeds)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# little-endian layout:
#   b"CDSC" | u16 version | u32 header length | header (UTF-8 JSON)
#   u32 array count | per array: u16 name length, name, u8 dtype tag,
#   u8 ndim, u32 dims..., raw values | u32 CRC-32 of all preceding bytes

MAGIC = b"CDSC"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_TAGS = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int64"): 3}


def encode_checkpoint(arrays: dict[str, np.ndarray], header: dict) -> bytes:
    hdr = json.dumps(header, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hdr)), hdr, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        tag = _TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    try:
        if len(blob) < 14 or blob[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError("checkpoint checksum mismatch (file corrupted)")
        version, hlen = struct.unpack_from("<HI", body, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        header = json.loads(body[off:off + hlen].decode())
        off += hlen
        (count,) = struct.unpack_from("<I", body, off)
        off += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            tag, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dt = _DTYPES[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(shape).copy()
            off += nbytes
        if off != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return arrays, header
    except CheckpointError:
        raise
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def atomic_write(path: str, data: bytes | str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str, net: StagedNetwork, meta: dict | None = None) -> None:
    header = {"arch": asdict(net.spec), "attachments": net.describe_attachments(), "meta": meta or {}}
    atomic_write(path, encode_checkpoint(net.state_arrays(), header))


def network_from_header(header: dict) -> StagedNetwork:
    net = build_backbone(ArchSpec(**header["arch"]))
    proj = [a for a in header["attachments"] if a["kind"] == "projection"]
    cls = [a for a in header["attachments"] if a["kind"] == "classifier"]
    if proj:
        net = attach_heads(net, "projection", positions=[(a["stage"], a["block"]) for a in proj],
                           embed_dim=proj[0]["embed_dim"], hidden_dim=proj[0]["hidden_dim"])
    if cls:
        net = attach_heads(net, "classifier", positions=[(a["stage"], a["block"]) for a in cls])
    return net


def load_checkpoint(path: str, expect_arch: ArchSpec | None = None) -> tuple[StagedNetwork, dict]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    arrays, header = decode_checkpoint(blob)
    if expect_arch is not None and asdict(expect_arch) != header["arch"]:
        raise CheckpointError(f"architecture mismatch: checkpoint has {header['arch']}, expected {asdict(expect_arch)}")
    try:
        net = network_from_header(header)
        net.astype(arrays[next(iter(arrays))].dtype if arrays else np.float32)
        net.load_arrays(arrays)
    except (KeyError, TypeError, ValueError, ConfigError) as exc:
        raise CheckpointError(f"checkpoint does not match its header: {exc}") from exc
    return net, header.get("meta", {})
