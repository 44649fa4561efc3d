"""Network assembly, training step, and checkpoint serialization.

The stack is two conv+pool stages followed by a two-layer classifier:

    Conv(2->c1, 3x3, pad 1) -> ReLU -> Pool
    Conv(c1->c2, 3x3, pad 1) -> ReLU -> Pool
    Flatten -> FC(fc_width) -> ReLU -> FC(2)

Convolutions are regular or deformable and the pool is vanilla / stacked /
residual according to the config, which yields the six ablation variants:

    1 regular+vanilla   2 deformable+vanilla   3 deformable+stacked
    4 deformable+residual (the full network)   5 regular+stacked
    6 regular+residual

Main kernels are He-initialised (normal, std sqrt(2/fan_in)), biases are
zero, and offset branches start at zero so a deformable network is exactly
its regular twin until training moves the offsets.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import layers
from .errors import (
    ArgumentError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
    TrainingDivergedError,
)
from .tensor import Rng, rng_normal

CONV_TYPES = ("regular", "deformable")
POOL_TYPES = ("vanilla", "stacked", "residual")

# Flag combinations of the six ablation variants, keyed by row number.
VARIANTS = {
    1: ("regular", "vanilla"),
    2: ("deformable", "vanilla"),
    3: ("deformable", "stacked"),
    4: ("deformable", "residual"),
    5: ("regular", "stacked"),
    6: ("regular", "residual"),
}

_MAGIC = b"DRN1"
_VERSION = 1


@dataclass
class NetworkConfig:
    patch_size: int = 9
    conv_type: str = "regular"
    pool_type: str = "vanilla"
    s: int = 4
    c1: int = 16
    c2: int = 32
    fc_width: int = 64
    classes: int = 2

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.conv_type not in CONV_TYPES:
            raise ConfigError(f"conv_type must be one of {CONV_TYPES}")
        if self.pool_type not in POOL_TYPES:
            raise ConfigError(f"pool_type must be one of {POOL_TYPES}")
        if self.patch_size < 5 or self.patch_size % 2 == 0:
            raise ConfigError(
                f"patch_size must be odd and >= 5, got {self.patch_size}"
            )
        if self.s < 1:
            raise ConfigError(f"subset count must be >= 1, got {self.s}")
        if self.classes != 2:
            raise ConfigError("only binary classification is supported")
        if self.pool_type == "residual":
            for c in (self.c1, self.c2):
                if c % self.s != 0:
                    raise ConfigError(f"{c} not divisible by {self.s}")

    @property
    def spatial_sizes(self) -> tuple[int, int, int]:
        p0 = self.patch_size
        p1 = (p0 + 1) // 2
        p2 = (p1 + 1) // 2
        return p0, p1, p2

    @property
    def flat_features(self) -> int:
        return self.c2 * self.spatial_sizes[2] ** 2


def variant_config(row: int, s: int = 4, **overrides) -> NetworkConfig:
    """Config for one ablation-table row (1..6)."""
    if row not in VARIANTS:
        raise ConfigError(f"variant row must be 1..6, got {row}")
    conv_type, pool_type = VARIANTS[row]
    return NetworkConfig(conv_type=conv_type, pool_type=pool_type, s=s, **overrides)


# ---------------------------------------------------------------------------
# layer stages (thin adapters over the functional ops)
# ---------------------------------------------------------------------------

class _ConvStage:
    def __init__(self, name: str, layer: layers.ConvLayer):
        self.name = name
        self.layer = layer

    def params(self):
        return {
            f"{self.name}.kernels": self.layer.kernels,
            f"{self.name}.bias": self.layer.bias,
        }

    def forward(self, x):
        out, cache = layers.conv2d_forward_cached(self.layer, x)
        return out, (x, cache)

    def backward(self, ctx, grad_out):
        x, cache = ctx
        gx, gk, gb = layers.conv2d_backward(self.layer, x, grad_out, cache=cache)
        return gx, {f"{self.name}.kernels": gk, f"{self.name}.bias": gb}


class _DeformConvStage:
    def __init__(self, name: str, layer: layers.DeformableConvLayer):
        self.name = name
        self.layer = layer

    def params(self):
        return {
            f"{self.name}.kernels": self.layer.main.kernels,
            f"{self.name}.bias": self.layer.main.bias,
            f"{self.name}.offset.kernels": self.layer.offset_branch.kernels,
            f"{self.name}.offset.bias": self.layer.offset_branch.bias,
        }

    def forward(self, x):
        out, cache = layers.deformable_conv_forward_cached(self.layer, x)
        return out, (x, cache)

    def backward(self, ctx, grad_out):
        x, cache = ctx
        g = layers.deformable_conv_backward(self.layer, x, grad_out, cache=cache)
        return g.grad_x, {
            f"{self.name}.kernels": g.grad_main_kernels,
            f"{self.name}.bias": g.grad_bias,
            f"{self.name}.offset.kernels": g.grad_offset_kernels,
            f"{self.name}.offset.bias": g.grad_offset_bias,
        }


class _VanillaPoolStage:
    def params(self):
        return {}

    def forward(self, x):
        out, amap = layers.maxpool_forward(x, kernel=2, stride=2)
        return out, (amap, x.shape)

    def backward(self, ctx, grad_out):
        amap, x_shape = ctx
        return layers.maxpool_backward(amap, grad_out, x_shape), {}


class _StackedPoolStage:
    def params(self):
        return {}

    def forward(self, x):
        return layers.stacked_pool_forward(x)

    def backward(self, ctx, grad_out):
        return layers.stacked_pool_backward(ctx, grad_out), {}


class _ResidualPoolStage:
    def __init__(self, s: int):
        self.residual = layers.ResidualPoolLayer(s)

    def params(self):
        return {}

    def forward(self, x):
        return layers.residual_pool_forward(self.residual, x)

    def backward(self, ctx, grad_out):
        return layers.residual_pool_backward(self.residual, ctx, grad_out), {}


class _ReluStage:
    def params(self):
        return {}

    def forward(self, x):
        return layers.relu_forward(x)

    def backward(self, ctx, grad_out):
        return layers.relu_backward(ctx, grad_out), {}


class _FlattenStage:
    def params(self):
        return {}

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, ctx, grad_out):
        return grad_out.reshape(ctx), {}


class _FCStage:
    def __init__(self, name: str, layer: layers.FCLayer):
        self.name = name
        self.layer = layer

    def params(self):
        return {
            f"{self.name}.weight": self.layer.weight,
            f"{self.name}.bias": self.layer.bias,
        }

    def forward(self, x):
        return layers.fc_forward(self.layer, x), x

    def backward(self, ctx, grad_out):
        gx, gw, gb = layers.fc_backward(self.layer, ctx, grad_out)
        return gx, {f"{self.name}.weight": gw, f"{self.name}.bias": gb}


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class Network:
    """Layer stack plus a name-addressable view of every learnable array."""

    def __init__(self, config: NetworkConfig, stages, dtype):
        self.config = config
        self.stages = stages
        self.dtype = dtype

    @property
    def params(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for stage in self.stages:
            out.update(stage.params())
        return out

    def forward(self, batch: np.ndarray) -> np.ndarray:
        return self.forward_with_ctx(batch)[0]

    def forward_with_ctx(self, batch: np.ndarray):
        batch = np.asarray(batch)
        p = self.config.patch_size
        if batch.ndim != 4 or batch.shape[1:] != (2, p, p):
            raise ShapeError(
                f"batch must be (B, 2, {p}, {p}), got {batch.shape}"
            )
        if batch.dtype != self.dtype:
            raise ArgumentError(
                f"batch dtype {batch.dtype} does not match network dtype {self.dtype}"
            )
        ctxs = []
        x = batch
        for stage in self.stages:
            x, ctx = stage.forward(x)
            ctxs.append(ctx)
        return x, ctxs

    def backward(self, ctxs, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        grads: dict[str, np.ndarray] = {}
        g = grad_logits
        for stage, ctx in zip(reversed(self.stages), reversed(ctxs)):
            g, stage_grads = stage.backward(ctx, g)
            grads.update(stage_grads)
        return grads


def _make_pool(config: NetworkConfig):
    if config.pool_type == "vanilla":
        return _VanillaPoolStage()
    if config.pool_type == "stacked":
        return _StackedPoolStage()
    return _ResidualPoolStage(config.s)


def _he_conv(rng: Rng, out_c: int, in_c: int, k: int, dtype) -> layers.ConvLayer:
    std = np.sqrt(2.0 / (in_c * k * k))
    kernels = rng_normal(rng, (out_c, in_c, k, k), 0.0, std, dtype=dtype)
    return layers.ConvLayer(kernels, np.zeros(out_c, dtype=dtype), stride=1,
                            pad=(k - 1) // 2)


def _zero_offset_branch(in_c: int, k: int, dtype) -> layers.ConvLayer:
    out_c = 2 * k * k
    return layers.ConvLayer(
        np.zeros((out_c, in_c, 3, 3), dtype=dtype),
        np.zeros(out_c, dtype=dtype),
        stride=1,
        pad=1,
    )


def _conv_stage(name: str, config: NetworkConfig, rng: Rng, in_c: int, out_c: int,
                dtype):
    main = _he_conv(rng, out_c, in_c, 3, dtype)
    if config.conv_type == "deformable":
        layer = layers.DeformableConvLayer(_zero_offset_branch(in_c, 3, dtype), main)
        return _DeformConvStage(name, layer)
    return _ConvStage(name, main)


def build(config: NetworkConfig, rng: Rng, dtype=np.float32) -> Network:
    """Fresh network; weight draws consume the rng in a fixed order
    (conv1, conv2, fc1, fc2) independent of conv/pool type."""
    config.validate()
    stages = [
        _conv_stage("conv1", config, rng, 2, config.c1, dtype),
        _ReluStage(),
        _make_pool(config),
        _conv_stage("conv2", config, rng, config.c1, config.c2, dtype),
        _ReluStage(),
        _make_pool(config),
        _FlattenStage(),
    ]
    flat = config.flat_features
    w1 = rng_normal(
        rng, (config.fc_width, flat, 1, 1), 0.0, np.sqrt(2.0 / flat), dtype=dtype
    )[:, :, 0, 0]
    stages.append(_FCStage("fc1", layers.FCLayer(w1, np.zeros(config.fc_width,
                                                              dtype=dtype))))
    stages.append(_ReluStage())
    w2 = rng_normal(
        rng,
        (config.classes, config.fc_width, 1, 1),
        0.0,
        np.sqrt(2.0 / config.fc_width),
        dtype=dtype,
    )[:, :, 0, 0]
    stages.append(_FCStage("fc2", layers.FCLayer(w2, np.zeros(config.classes,
                                                              dtype=dtype))))
    return Network(config, stages, dtype)


@dataclass
class MomentumSGD:
    """v <- mu*v - lr*g;  theta <- theta + v."""

    lr: float = 1e-3
    momentum: float = 0.9
    velocities: dict = field(default_factory=dict)
    step_count: int = 0

    def apply(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        for name, p in params.items():
            g = grads[name]
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p)
                self.velocities[name] = v
            v *= self.momentum
            v -= self.lr * g.astype(p.dtype)
            p += v
        self.step_count += 1


def train_step(net: Network, batch: np.ndarray, labels: np.ndarray,
               optimizer: MomentumSGD) -> float:
    """One forward/backward/update pass; returns the pre-update mean loss."""
    logits, ctxs = net.forward_with_ctx(batch)
    loss, grad_logits = layers.softmax_xent(logits, labels)
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at step {optimizer.step_count}",
            step=optimizer.step_count,
        )
    grads = net.backward(ctxs, grad_logits)
    optimizer.apply(net.params, grads)
    return loss


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CONV_CODES = {name: i for i, name in enumerate(CONV_TYPES)}
_POOL_CODES = {name: i for i, name in enumerate(POOL_TYPES)}


def _param_shape4(arr: np.ndarray) -> tuple[int, int, int, int]:
    dims = list(arr.shape) + [1] * (4 - arr.ndim)
    return tuple(dims)


def save(net: Network, path) -> None:
    """Write the checkpoint: magic, version u16 LE, config block, then
    length-prefixed parameter records with four u32 dims and f32 LE values."""
    params = net.params
    blob = bytearray()
    blob += _MAGIC
    blob += struct.pack("<H", _VERSION)
    cfg = net.config
    blob += struct.pack(
        "<IBBIIIII",
        cfg.patch_size,
        _CONV_CODES[cfg.conv_type],
        _POOL_CODES[cfg.pool_type],
        cfg.s,
        cfg.c1,
        cfg.c2,
        cfg.fc_width,
        cfg.classes,
    )
    blob += struct.pack("<I", len(params))
    for name, arr in params.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<IIII", *_param_shape4(arr))
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(bytes(blob))
        os.replace(tmp, os.fspath(path))
    except BaseException:
        os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated while reading {what}", offset=self.pos
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load(path) -> Network:
    """Read a checkpoint written by :func:`save`; the result is float32."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointMagicError(f"bad magic {magic!r}, expected {_MAGIC!r}",
                                   offset=0)
    (version,) = r.unpack("<H", "version")
    if version != _VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version}, expected {_VERSION}",
            offset=4,
        )
    patch, conv_code, pool_code, s, c1, c2, fc_width, classes = r.unpack(
        "<IBBIIIII", "config"
    )
    conv_types = {v: k for k, v in _CONV_CODES.items()}
    pool_types = {v: k for k, v in _POOL_CODES.items()}
    if conv_code not in conv_types or pool_code not in pool_types:
        raise CheckpointShapeError(
            f"unknown conv/pool codes ({conv_code}, {pool_code})"
        )
    try:
        config = NetworkConfig(
            patch_size=patch,
            conv_type=conv_types[conv_code],
            pool_type=pool_types[pool_code],
            s=s,
            c1=c1,
            c2=c2,
            fc_width=fc_width,
            classes=classes,
        )
    except ConfigError as exc:
        raise CheckpointShapeError(f"invalid config in checkpoint: {exc}") from exc
    (n_params,) = r.unpack("<I", "parameter count")
    net = build(config, Rng(0, 0), dtype=np.float32)
    params = net.params
    if n_params != len(params):
        raise CheckpointShapeError(
            f"checkpoint declares {n_params} parameters, config implies {len(params)}"
        )
    for expected_name, target in params.items():
        (name_len,) = r.unpack("<H", "parameter name length")
        name = r.take(name_len, "parameter name").decode("utf-8")
        if name != expected_name:
            raise CheckpointShapeError(
                f"layer {expected_name}: found record {name!r} instead"
            )
        dims = r.unpack("<IIII", f"shape of {name}")
        if dims != _param_shape4(target):
            raise CheckpointShapeError(
                f"layer {name}: shape {dims} does not match config "
                f"{_param_shape4(target)}"
            )
        count = dims[0] * dims[1] * dims[2] * dims[3]
        raw = r.take(4 * count, f"values of {name}")
        values = np.frombuffer(raw, dtype="<f4").reshape(target.shape)
        target[...] = values
    if r.pos != len(data):
        raise CheckpointShapeError("trailing bytes after last parameter",
                                   offset=r.pos)
    return net
