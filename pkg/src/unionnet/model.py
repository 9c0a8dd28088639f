"""Multi-branch additive-fusion CNN: branches, blocks, full network, reporting, weight IO.

Structure overview
------------------
A *conv unit* is conv(3x3, no bias) -> batch norm -> ReLU.  A *branch* is a
chain of 1..4 conv units; deeper chains see wider receptive fields (2d+1).
A *block* runs four branches of depths 1,2,3,4 over the same input and sums
their outputs elementwise; block 1 max-pools the sum.  The network stacks
three blocks, adds their outputs (skip fusion U1+U2+U3), applies one final
conv unit, global average pooling, and a linear classifier.

All convolutions output `width` channels, so every fusion is shape-valid
without projections.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError, StaleCacheError, ValidationError
from .kernels import (
    BatchNormParams,
    ConvParams,
    _batch_stats,
    add_fuse,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    global_average_pool_backward,
    global_average_pool_forward,
    maxpool2x2_backward,
    maxpool2x2_forward,
    relu_forward,
)

BRANCH_DEPTHS = (1, 2, 3, 4)
WIDTH_CAP = 128
WEIGHTS_MAGIC = b"UNET1"
WEIGHTS_VERSION = 1


def receptive_field(branch_depth: int) -> int:
    """Effective receptive field of a stacked-3x3 branch: 2*depth + 1."""
    if branch_depth not in BRANCH_DEPTHS:
        raise ValidationError(f"branch depth must be in {BRANCH_DEPTHS}, got {branch_depth}")
    return 2 * branch_depth + 1


@dataclass
class ConvUnit:
    """One conv -> batch norm -> ReLU stage."""

    conv: ConvParams
    bn: BatchNormParams


@dataclass
class UnionBranch:
    """A chain of conv units; len(units) is the branch depth."""

    units: list[ConvUnit]

    @property
    def depth(self) -> int:
        return len(self.units)


@dataclass
class UnionBlock:
    """Four parallel branches (depths 1..4) fused by elementwise addition."""

    branches: list[UnionBranch]
    pool_after: bool
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if tuple(b.depth for b in self.branches) != BRANCH_DEPTHS:
            raise ValidationError(
                f"a block needs branches of depths {BRANCH_DEPTHS}, "
                f"got {tuple(b.depth for b in self.branches)}"
            )


@dataclass
class UnionNet:
    """Three fused blocks + skip fusion + final conv unit + GAP + linear classifier."""

    blocks: list[UnionBlock]
    final: ConvUnit
    classifier_weight: np.ndarray  # (width, num_classes)
    classifier_bias: np.ndarray  # (num_classes,)
    width: int
    num_classes: int
    in_channels: int = 3
    _serial: int = field(default=0, repr=False)

    @staticmethod
    def create(
        width: int = 128,
        num_classes: int = 10,
        in_channels: int = 3,
        seed: int = 0,
        dtype=np.float32,
    ) -> "UnionNet":
        """Build a fresh network with fan-in-scaled normal conv weights.

        BN starts as the identity map (gamma 1, beta 0, running mean 0 /
        var 1); the classifier weight uses a 1/sqrt(width) normal and the
        bias starts at zero.  Deterministic for a given seed.
        """
        if not 1 <= width <= WIDTH_CAP:
            raise ValidationError(f"width must be in [1, {WIDTH_CAP}], got {width}")
        if num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {num_classes}")
        rng = np.random.default_rng(seed)

        def conv_unit(cin: int, cout: int) -> ConvUnit:
            std = np.sqrt(2.0 / (cin * 9))
            w = rng.normal(0.0, std, size=(cout, cin, 3, 3)).astype(dtype)
            return ConvUnit(
                conv=ConvParams(weights=w),
                bn=BatchNormParams(
                    gamma=np.ones(cout, dtype=dtype),
                    beta=np.zeros(cout, dtype=dtype),
                    running_mean=np.zeros(cout, dtype=dtype),
                    running_var=np.ones(cout, dtype=dtype),
                ),
            )

        def block(cin: int) -> UnionBlock:
            branches = [
                UnionBranch(units=[conv_unit(cin if j == 0 else width, width) for j in range(d)])
                for d in BRANCH_DEPTHS
            ]
            return UnionBlock(
                branches=branches, pool_after=False, in_channels=cin, out_channels=width
            )

        blocks = [block(in_channels), block(width), block(width)]
        blocks[0].pool_after = True
        cw = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, num_classes)).astype(dtype)
        return UnionNet(
            blocks=blocks,
            final=conv_unit(width, width),
            classifier_weight=cw,
            classifier_bias=np.zeros(num_classes, dtype=dtype),
            width=width,
            num_classes=num_classes,
            in_channels=in_channels,
        )

    def _units(self):
        """Yield (name_prefix, ConvUnit) over all 31 conv units in canonical order."""
        for i, blk in enumerate(self.blocks, start=1):
            for branch in blk.branches:
                for j, unit in enumerate(branch.units):
                    yield f"block{i}.branch{branch.depth}.unit{j}", unit
        yield "final", self.final

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the arrays are live (updates apply in place)."""
        out = {}
        for prefix, unit in self._units():
            out[f"{prefix}.conv.weights"] = unit.conv.weights
            out[f"{prefix}.bn.gamma"] = unit.bn.gamma
            out[f"{prefix}.bn.beta"] = unit.bn.beta
        out["classifier.weight"] = self.classifier_weight
        out["classifier.bias"] = self.classifier_bias
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        """Non-trainable state (BN running statistics), live references."""
        out = {}
        for prefix, unit in self._units():
            out[f"{prefix}.bn.running_mean"] = unit.bn.running_mean
            out[f"{prefix}.bn.running_var"] = unit.bn.running_var
        return out

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """All arrays (parameters + buffers) in the canonical serialization order."""
        out = []
        for prefix, unit in self._units():
            out.append((f"{prefix}.conv.weights", unit.conv.weights))
            out.append((f"{prefix}.bn.gamma", unit.bn.gamma))
            out.append((f"{prefix}.bn.beta", unit.bn.beta))
            out.append((f"{prefix}.bn.running_mean", unit.bn.running_mean))
            out.append((f"{prefix}.bn.running_var", unit.bn.running_var))
        out.append(("classifier.weight", self.classifier_weight))
        out.append(("classifier.bias", self.classifier_bias))
        return out

    def astype(self, dtype) -> "UnionNet":
        """Deep copy with every array converted to dtype (for high-precision checks)."""
        clone = UnionNet.create(
            self.width, self.num_classes, self.in_channels, seed=0, dtype=dtype
        )
        src = dict(self.named_arrays())
        for name, arr in clone.named_arrays():
            arr[...] = src[name].astype(dtype)
        return clone


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


@dataclass
class _UnitCache:
    x: np.ndarray  # conv input
    conv_out: np.ndarray  # batch-norm input
    y: np.ndarray  # unit output (post-ReLU)
    stats: tuple | None = None  # batch (mean, var) of conv_out (training forwards only)


@dataclass
class _BlockCache:
    unit_caches: list[list[_UnitCache]]  # per branch, per unit
    pool_argmax: np.ndarray | None


@dataclass
class _NetCache:
    net: UnionNet
    serial: int
    training: bool
    block_caches: list[_BlockCache]
    final_cache: _UnitCache
    features: np.ndarray  # (N, width) flattened GAP output


def _unit_forward(x, unit: ConvUnit, training: bool):
    conv_out = conv2d_forward(x, unit.conv)
    stats = _batch_stats(conv_out) if training else None
    y = relu_forward(batchnorm_forward(conv_out, unit.bn, training, stats))
    return y, _UnitCache(x=x, conv_out=conv_out, y=y, stats=stats)


def _unit_backward(cache: _UnitCache, unit: ConvUnit, grad_y, training: bool,
                   need_input_grad: bool = True):
    # y = relu(bn_out), so y > 0 exactly where bn_out > 0
    grad_bn_out = grad_y * (cache.y > 0)
    grad_conv_out, bn_grads = batchnorm_backward(
        cache.conv_out, unit.bn, grad_bn_out, training, cache.stats
    )
    grad_x, conv_grads = conv2d_backward(
        cache.x, unit.conv, grad_conv_out, need_grad_x=need_input_grad
    )
    grads = {
        "conv.weights": conv_grads["weights"],
        "bn.gamma": bn_grads["gamma"],
        "bn.beta": bn_grads["beta"],
    }
    return grad_x, grads


def branch_forward(x: np.ndarray, branch: UnionBranch, training: bool = False) -> np.ndarray:
    """Apply the branch's conv units in sequence."""
    out, _ = _branch_forward_cached(x, branch, training)
    return out


def _branch_forward_cached(x, branch: UnionBranch, training: bool):
    caches = []
    out = x
    for unit in branch.units:
        out, cache = _unit_forward(out, unit, training)
        caches.append(cache)
    return out, caches


def _branch_backward(caches: list[_UnitCache], branch: UnionBranch, grad_out, training: bool,
                     need_input_grad: bool = True):
    grads = {}
    g = grad_out
    for j in range(branch.depth - 1, -1, -1):
        g, unit_grads = _unit_backward(
            caches[j], branch.units[j], g, training,
            need_input_grad=need_input_grad or j > 0,
        )
        for key, val in unit_grads.items():
            grads[f"unit{j}.{key}"] = val
    return g, grads


def union_block_forward(x: np.ndarray, blk: UnionBlock, training: bool = False) -> np.ndarray:
    """Sum the four branch outputs; max-pool the sum when the block asks for it."""
    out, _ = _union_block_forward_cached(x, blk, training)
    return out


def _union_block_forward_cached(x, blk: UnionBlock, training: bool):
    unit_caches = []
    outputs = []
    for branch in blk.branches:
        out, caches = _branch_forward_cached(x, branch, training)
        unit_caches.append(caches)
        outputs.append(out)
    fused = add_fuse(outputs)
    argmax = None
    if blk.pool_after:
        fused, argmax = maxpool2x2_forward(fused)
    return fused, _BlockCache(unit_caches=unit_caches, pool_argmax=argmax)


def _union_block_backward(cache: _BlockCache, blk: UnionBlock, grad_out, training: bool,
                          need_input_grad: bool = True):
    """Returns (grad wrt block input, grads keyed branch{d}.unit{j}.*)."""
    if blk.pool_after:
        grad_out = maxpool2x2_backward(grad_out, cache.pool_argmax)
    grads = {}
    grad_x = None
    for branch, caches in zip(blk.branches, cache.unit_caches):
        g, branch_grads = _branch_backward(
            caches, branch, grad_out, training, need_input_grad=need_input_grad
        )
        if need_input_grad:
            grad_x = g if grad_x is None else grad_x + g
        for key, val in branch_grads.items():
            grads[f"branch{branch.depth}.{key}"] = val
    return grad_x, grads


def unionnet_forward(
    x: np.ndarray, net: UnionNet, training: bool = False
) -> tuple[np.ndarray, _NetCache]:
    """Full forward pass; returns (logits, cache) with cache feeding unionnet_backward."""
    if x.ndim != 4 or x.shape[1] != net.in_channels:
        raise ShapeError(
            f"input must be (N, {net.in_channels}, H, W), got shape {x.shape}"
        )
    net._serial += 1
    u1, c1 = _union_block_forward_cached(x, net.blocks[0], training)
    u2, c2 = _union_block_forward_cached(u1, net.blocks[1], training)
    u3, c3 = _union_block_forward_cached(u2, net.blocks[2], training)
    union = add_fuse([u1, u2, u3])
    final_out, cf = _unit_forward(union, net.final, training)
    features = global_average_pool_forward(final_out)
    flat = features.reshape(features.shape[0], net.width)
    logits = flat @ net.classifier_weight + net.classifier_bias
    cache = _NetCache(
        net=net,
        serial=net._serial,
        training=training,
        block_caches=[c1, c2, c3],
        final_cache=cf,
        features=flat,
    )
    return logits, cache


def unionnet_backward(cache: _NetCache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients for every trainable array, keyed like UnionNet.parameters().

    The skip fusion makes U1's gradient the sum of the direct Union-path
    term and the path through block 2 (likewise U2 through block 3).
    """
    net = cache.net
    if cache.serial != net._serial:
        raise StaleCacheError(
            f"cache from forward #{cache.serial} but the latest forward is #{net._serial}"
        )
    n = cache.features.shape[0]
    if grad_logits.shape != (n, net.num_classes):
        raise ShapeError(
            f"grad_logits must be ({n}, {net.num_classes}), got {grad_logits.shape}"
        )
    training = cache.training
    grads = {
        "classifier.weight": cache.features.T @ grad_logits,
        "classifier.bias": grad_logits.sum(axis=0),
    }
    grad_features = (grad_logits @ net.classifier_weight.T).reshape(n, net.width, 1, 1)
    h, w = cache.final_cache.y.shape[2:]
    grad_final_out = global_average_pool_backward(grad_features, h, w)
    grad_union, final_grads = _unit_backward(cache.final_cache, net.final, grad_final_out, training)
    for key, val in final_grads.items():
        grads[f"final.{key}"] = val

    grad_u3 = grad_union
    grad_u2_from_b3, b3_grads = _union_block_backward(
        cache.block_caches[2], net.blocks[2], grad_u3, training
    )
    grad_u2 = grad_union + grad_u2_from_b3
    grad_u1_from_b2, b2_grads = _union_block_backward(
        cache.block_caches[1], net.blocks[1], grad_u2, training
    )
    grad_u1 = grad_union + grad_u1_from_b2
    _, b1_grads = _union_block_backward(
        cache.block_caches[0], net.blocks[0], grad_u1, training, need_input_grad=False
    )

    for i, block_grads in ((1, b1_grads), (2, b2_grads), (3, b3_grads)):
        for key, val in block_grads.items():
            grads[f"block{i}.{key}"] = val
    return grads


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


@dataclass
class ModelReport:
    parameter_count: int
    physical_conv_count: int
    composite_depth: int
    receptive_fields: tuple[int, int, int, int]
    serialized_size_bytes: int


def parameter_count_closed_form(width: int, num_classes: int, in_channels: int = 3) -> int:
    """Trainable parameter total for the fixed 3-block topology.

    Per block: 4 entry convs (in->w) + 6 internal convs (w->w), each with
    a 2w-parameter batch norm; plus the final conv unit and the linear
    classifier.  Collapses to 243*w^2 + 36*cin*w + 62*w + w*K + K.
    """
    w, k, cin = width, num_classes, in_channels
    return 243 * w * w + 36 * cin * w + 62 * w + w * k + k


def model_report(net: UnionNet) -> ModelReport:
    """Architecture accounting: counts from the closed form, not by enumeration."""
    count = parameter_count_closed_form(net.width, net.num_classes, net.in_channels)
    return ModelReport(
        parameter_count=count,
        physical_conv_count=31,
        composite_depth=4,
        receptive_fields=tuple(receptive_field(d) for d in BRANCH_DEPTHS),
        serialized_size_bytes=4 * count,
    )


# ---------------------------------------------------------------------------
# Weight file IO
# ---------------------------------------------------------------------------
#
# Layout: magic "UNET1" | u32 version | u32 width | u32 num_classes |
# u32 array-count | per array (canonical order): u8 rank, u32 dims[rank],
# f32 values | u32 CRC-32 of every preceding byte.  All integers little-endian.


def _u32(value: int) -> bytes:
    return int(value).to_bytes(4, "little")


def serialize_weights(net: UnionNet) -> bytes:
    arrays = net.named_arrays()
    parts = [
        WEIGHTS_MAGIC,
        _u32(WEIGHTS_VERSION),
        _u32(net.width),
        _u32(net.num_classes),
        _u32(len(arrays)),
    ]
    for _, arr in arrays:
        parts.append(bytes([arr.ndim]))
        for dim in arr.shape:
            parts.append(_u32(dim))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = b"".join(parts)
    return payload + _u32(zlib.crc32(payload))


def save_weights(net: UnionNet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(net))


class _Reader:
    """Byte-stream cursor whose errors carry the failing offset."""

    def __init__(self, data: bytes, label: str):
        self.data = data
        self.off = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise FormatError(
                f"{self.label}: truncated at byte {self.off} "
                f"(needed {n} more bytes, have {len(self.data) - self.off})"
            )
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def u8(self) -> int:
        return self.take(1)[0]


def parse_weights_section(rd: _Reader) -> UnionNet:
    """Parse one weight section at the reader's cursor, CRC included.

    Leaves the cursor just past the section's checksum so a container
    format can append further sections.
    """
    start = rd.off
    magic = rd.take(len(WEIGHTS_MAGIC))
    if magic != WEIGHTS_MAGIC:
        raise FormatError(
            f"{rd.label}: bad magic {magic!r} at byte {start}, expected {WEIGHTS_MAGIC!r}"
        )
    version_off = rd.off
    version = rd.u32()
    if version != WEIGHTS_VERSION:
        raise FormatError(f"{rd.label}: unsupported version {version} at byte {version_off}")
    width = rd.u32()
    num_classes = rd.u32()
    count_off = rd.off
    count = rd.u32()
    net = UnionNet.create(width=width, num_classes=num_classes)
    arrays = net.named_arrays()
    if count != len(arrays):
        raise FormatError(
            f"{rd.label}: array count {count} at byte {count_off} does not match "
            f"the {len(arrays)} arrays of a width-{width} model"
        )
    for name, arr in arrays:
        rec_off = rd.off
        rank = rd.u8()
        if rank != arr.ndim:
            raise FormatError(
                f"{rd.label}: array {name!r} at byte {rec_off} has rank {rank}, "
                f"expected {arr.ndim}"
            )
        dims = tuple(rd.u32() for _ in range(rank))
        if dims != arr.shape:
            raise FormatError(
                f"{rd.label}: array {name!r} at byte {rec_off} has shape {dims}, "
                f"expected {arr.shape}"
            )
        raw = rd.take(4 * arr.size)
        arr[...] = np.frombuffer(raw, dtype="<f4").reshape(arr.shape)
    crc_off = rd.off
    crc_stored = rd.u32()
    crc_actual = zlib.crc32(rd.data[start:crc_off])
    if crc_stored != crc_actual:
        raise FormatError(
            f"{rd.label}: checksum mismatch at byte {crc_off} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})"
        )
    return net


def deserialize_weights(data: bytes, label: str = "weights") -> UnionNet:
    rd = _Reader(data, label)
    net = parse_weights_section(rd)
    if rd.off != len(data):
        raise FormatError(
            f"{label}: {len(data) - rd.off} unexpected trailing bytes at byte {rd.off}"
        )
    return net


def load_weights(path) -> UnionNet:
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_weights(data, label=str(path))
