"""Multi-scale subtraction segmentation network.

Pipeline: plain 5-stage conv encoder -> per-level 3x3 channel reduction ->
triangular grid of subtraction units -> per-level complementarity-enhanced
aggregation -> FPN-style top-down decoder -> 1x1 head -> sigmoid.

Parameters live in an ordered ``dict[str, Tensor]``. The insertion order of
:func:`param_shapes` is the canonical order used by checkpoints:

    enc{s}_{j}   s=1..5, j=1..2   encoder convs (the "backbone" group)
    red{i}       i=1..5           channel reduction
    su{i}_{n}    i=1..5, n=2..min(d, 6-i)   unit producing MS^i_n
    ce{i}        i=1..5           aggregation conv
    dec{i}       i=1..4           decoder refinement
    head                          1x1 conv to one logit channel

each name contributing ``<name>.weight`` then ``<name>.bias``.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LEVELS = 5
FUSION_MODES = ("subtract", "add")
CHECKPOINT_MAGIC = b"MSNETCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    channels: int = 16
    pyramid_depth: int = 5
    fusion_mode: str = "subtract"
    lossnet_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.input_size <= 0 or self.input_size % 32:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if self.channels <= 0:
            raise ValueError(f"channels must be positive, got {self.channels}")
        if not 1 <= self.pyramid_depth <= LEVELS:
            raise ValueError(f"pyramid_depth must be in 1..5, got {self.pyramid_depth}")
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"fusion_mode must be one of {FUSION_MODES}, got {self.fusion_mode!r}")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")

    def to_dict(self) -> dict:
        return asdict(self)


def encoder_widths(channels: int) -> list[int]:
    return [min(channels * m, 4 * channels) for m in (1, 1, 2, 2, 4)]


def grid_rows(depth: int) -> list[int]:
    """Number of MS maps per level at the given depth."""
    return [min(depth, LEVELS + 1 - i) for i in range(1, LEVELS + 1)]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    c = config.channels
    shapes: dict[str, tuple[int, ...]] = {}

    def conv(name, cout, cin, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    widths = encoder_widths(c)
    cin = 3
    for s, width in enumerate(widths, start=1):
        conv(f"enc{s}_1", width, cin, 3)
        conv(f"enc{s}_2", width, width, 3)
        cin = width
    for i, width in enumerate(widths, start=1):
        conv(f"red{i}", c, width, 3)
    for i, row in enumerate(grid_rows(config.pyramid_depth), start=1):
        for n in range(2, row + 1):
            conv(f"su{i}_{n}", c, c, 3)
    for i in range(1, LEVELS + 1):
        conv(f"ce{i}", c, c, 3)
    for i in range(1, LEVELS):
        conv(f"dec{i}", c, c, 3)
    conv("head", 1, c, 1)
    return shapes


def is_backbone(name: str) -> bool:
    return name.startswith("enc")


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """He-normal weights (fan-in scaled), zero biases.

    Each tensor draws from its own stream keyed by (seed, name), so parameters
    shared between configurations of different depth or fusion mode start
    identical.
    """
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            rng = np.random.default_rng([config.seed, zlib.crc32(name.encode())])
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(data, requires_grad=True)
    return params


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in params.values()))


def _conv_relu(x: Tensor, params, name: str, padding: int = 1) -> Tensor:
    return ad.relu(ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], 1, padding))


def encode(image: Tensor, params, config: ModelConfig, strict: bool = True) -> list[Tensor]:
    """Five feature levels, level i at ``S / 2**i``.

    ``strict=False`` accepts any side that is a multiple of 32 (multi-scale
    training); otherwise the side must equal ``config.input_size``.
    """
    if image.data.ndim != 4 or image.shape[1] != 3:
        raise ad.ShapeError(f"encode: expected N x 3 x S x S image, got {image.shape}")
    s = image.shape[2]
    if image.shape[3] != s:
        raise ad.ShapeError(f"encode: image must be square, got {image.shape[2:]}")
    if strict and s != config.input_size:
        raise ad.ShapeError(f"encode: image side {s} does not match input_size {config.input_size}")
    if s % 32:
        raise ad.ShapeError(f"encode: image side {s} is not a multiple of 32")
    levels = []
    x = image
    for stage in range(1, LEVELS + 1):
        x = _conv_relu(x, params, f"enc{stage}_1")
        x = _conv_relu(x, params, f"enc{stage}_2")
        x = ad.maxpool2(x)
        levels.append(x)
    return levels


def reduce_channels(pyramid: list[Tensor], params) -> list[Tensor]:
    return [_conv_relu(f, params, f"red{i}") for i, f in enumerate(pyramid, start=1)]


def subtraction_unit(fa: Tensor, fb: Tensor, weight: Tensor, bias: Tensor,
                     fusion_mode: str = "subtract") -> Tensor:
    """conv3x3 -> relu over |fa - fb| (or fa + fb in ``add`` mode)."""
    if fa.shape != fb.shape:
        raise ad.ShapeError(f"subtraction_unit: operand shapes differ: {fa.shape} vs {fb.shape}")
    if fusion_mode == "subtract":
        mixed = ad.sub_abs(fa, fb)
    elif fusion_mode == "add":
        mixed = ad.add(fa, fb)
    else:
        raise ValueError(f"unknown fusion_mode {fusion_mode!r}")
    return ad.relu(ad.conv2d(mixed, weight, bias, 1, 1))


def build_ms_grid(reduced: list[Tensor], depth: int, fusion_mode: str, params) -> list[list[Tensor]]:
    """Triangular grid: ``grid[i-1][n-1]`` holds MS^i_n.

    MS^i_1 is the reduced level-i feature; MS^i_{n+1} combines MS^i_n with the
    upsampled MS^{i+1}_n, so every extra column widens the span of levels a
    feature has been differenced against.
    """
    if not 1 <= depth <= LEVELS:
        raise ValueError(f"depth must be in 1..5, got {depth}")
    grid = [[f] for f in reduced]
    for n in range(1, depth):
        for i in range(1, LEVELS + 1 - n):
            fine, coarse = grid[i - 1][n - 1], grid[i][n - 1]
            name = f"su{i}_{n + 1}"
            grid[i - 1].append(subtraction_unit(fine, ad.upsample2(coarse), params[f"{name}.weight"],
                                                params[f"{name}.bias"], fusion_mode))
    return grid


def complementarity_enhance(grid: list[list[Tensor]], params) -> list[Tensor]:
    out = []
    for i, row in enumerate(grid, start=1):
        total = row[0]
        for m in row[1:]:
            total = ad.add(total, m)
        out.append(_conv_relu(total, params, f"ce{i}"))
    return out


def decode(ce: list[Tensor], params) -> Tensor:
    """Top-down decoder returning full-resolution logits (N x 1 x S x S)."""
    if len(ce) != LEVELS:
        raise ValueError(f"decode expects {LEVELS} levels, got {len(ce)}")
    d = ce[-1]
    for i in range(LEVELS - 1, 0, -1):
        d = _conv_relu(ad.add(ce[i - 1], ad.upsample2(d)), params, f"dec{i}")
    logits = ad.conv2d(d, params["head.weight"], params["head.bias"], 1, 0)
    return ad.upsample2(logits)


def forward_logits(image: Tensor, config: ModelConfig, params, strict: bool = True) -> Tensor:
    pyramid = reduce_channels(encode(image, params, config, strict), params)
    grid = build_ms_grid(pyramid, config.pyramid_depth, config.fusion_mode, params)
    return decode(complementarity_enhance(grid, params), params)


def forward(image: Tensor, config: ModelConfig, params, strict: bool = True) -> Tensor:
    """Foreground probabilities, N x 1 x S x S."""
    return ad.sigmoid(forward_logits(image, config, params, strict))


def predict(images: np.ndarray, config: ModelConfig, params) -> np.ndarray:
    """Graph-free inference on an N x 3 x S x S array."""
    with ad.no_grad():
        return forward(Tensor(images), config, params).data


# ---------------------------------------------------------------------------
# checkpoints: little-endian; magic, version, config block, tensor count,
# then per tensor (rank u32, extents u32 * rank, float64 * prod(extents))

_CONFIG_FMT = "<IIIBBQ"


def checkpoint_bytes(config: ModelConfig, params) -> bytes:
    shapes = param_shapes(config)
    if list(shapes) != list(params):
        raise CheckpointError("parameter names do not match the configuration")
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
             struct.pack(_CONFIG_FMT, config.input_size, config.channels, config.pyramid_depth,
                         FUSION_MODES.index(config.fusion_mode), int(config.lossnet_enabled),
                         config.seed),
             struct.pack("<I", len(shapes))]
    for name in shapes:
        data = params[name].data
        parts.append(struct.pack(f"<I{data.ndim}I", data.ndim, *data.shape))
        parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def save_params(path, config: ModelConfig, params) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(config, params))
    tmp.replace(path)


def _unpack(fmt: str, buf: bytes, offset: int, what: str):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise CheckpointError(f"truncated checkpoint: {what} needs {size} bytes at offset {offset}, "
                              f"file has {len(buf)}")
    return struct.unpack_from(fmt, buf, offset), offset + size


def parse_checkpoint(buf: bytes) -> tuple[ModelConfig, dict[str, Tensor]]:
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic at offset 0: expected {CHECKPOINT_MAGIC!r}, "
                              f"got {buf[:len(CHECKPOINT_MAGIC)]!r}")
    off = len(CHECKPOINT_MAGIC)
    (version,), off = _unpack("<I", buf, off, "version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fields, off = _unpack(_CONFIG_FMT, buf, off, "config block")
    size, chans, depth, mode, lossnet, seed = fields
    if mode >= len(FUSION_MODES) or lossnet > 1:
        raise CheckpointError(f"invalid config block: fusion={mode} lossnet={lossnet}")
    try:
        config = ModelConfig(size, chans, depth, FUSION_MODES[mode], bool(lossnet), seed)
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}") from None
    shapes = param_shapes(config)
    (count,), off = _unpack("<I", buf, off, "tensor count")
    if count != len(shapes):
        raise CheckpointError(f"checkpoint holds {count} tensors, config implies {len(shapes)}")
    params = {}
    for name, shape in shapes.items():
        (rank,), off = _unpack("<I", buf, off, f"rank of {name}")
        extents, off = _unpack(f"<{rank}I", buf, off, f"extents of {name}")
        if tuple(extents) != shape:
            raise CheckpointError(f"{name}: stored shape {tuple(extents)} != expected {shape} "
                                  f"(offset {off})")
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated checkpoint: {name} needs {nbytes} bytes at offset {off}")
        data = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=off).astype(np.float64)
        params[name] = Tensor(data.reshape(shape), requires_grad=True)
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes after offset {off}")
    return config, params


def load_params(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    return parse_checkpoint(Path(path).read_bytes())
