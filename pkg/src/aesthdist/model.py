"""Theme-aware score-distribution network on padded canvases.

Pipeline (default widths)::

    canvas N x 3 x S x S
      -> conv3x3/2 (16) -> ReLU -> conv3x3/1 (32) -> ReLU        stem, stride 2
      -> ROI max pool to 32 x 32 over each image's region         padding cut off here
      -> conv3x3 (64) -> ReLU -> maxpool 2
      -> conv3x3 (64) -> ReLU -> maxpool 2
      -> conv3x3 (128) -> ReLU -> adaptive max pool 4 x 4        2048-d visual feature
    theme id -> one-hot -> affine -> ReLU                         16-d theme feature
    [visual | theme] -> affine -> ReLU -> affine                  K logits
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import roi_ops
from .roi_ops import RoiPoolSpec
from .tensor_core import (
    DimensionError,
    UsageError,
    affine_backward,
    affine_forward,
    concat,
    concat_backward,
    conv2d_backward,
    conv2d_forward,
    conv_out_extent,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    softmax,
)

MODES = ("pad_roi_theme", "pad_roi", "resize", "resized_pad", "random_crop")
ROI_MODES = ("pad_roi_theme", "pad_roi")


def check_variant(variant: str) -> str:
    if variant not in MODES:
        raise ValueError(f"unknown model variant {variant!r}; expected one of {MODES}")
    return variant


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    stem_widths: tuple = (16, 32)
    stem_strides: tuple = (2, 1)
    roi_out: int = 32
    backbone_widths: tuple = (64, 64, 128)
    adaptive_out: int = 4
    n_themes: int = 4
    theme_width: int = 256
    head_hidden: int = 128  # 0 gives a single affine layer after fusion
    n_bins: int = 10
    pool: str = "max"  # "max" (ROI pooling) or "align"
    samples_per_bin: int = 2
    init_gain: float = 2.449  # uniform bound is init_gain / sqrt(fan_in)

    def __post_init__(self):
        object.__setattr__(self, "stem_widths", tuple(self.stem_widths))
        object.__setattr__(self, "stem_strides", tuple(self.stem_strides))
        object.__setattr__(self, "backbone_widths", tuple(self.backbone_widths))
        if len(self.stem_widths) != len(self.stem_strides):
            raise ValueError("stem_widths and stem_strides differ in length")
        if self.pool not in ("max", "align"):
            raise ValueError(f"pool must be 'max' or 'align', got {self.pool!r}")
        if min(self.roi_out, self.adaptive_out, self.n_themes, self.n_bins) < 1:
            raise ValueError(f"invalid model config {self}")

    @property
    def downsample(self) -> int:
        return int(np.prod(self.stem_strides))

    @property
    def visual_dim(self) -> int:
        return self.backbone_widths[-1] * self.adaptive_out ** 2

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("stem_widths", "stem_strides", "backbone_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {}
    cin = cfg.in_channels
    for i, c in enumerate(cfg.stem_widths):
        shapes[f"stem{i}.w"], shapes[f"stem{i}.b"] = (c, cin, 3, 3), (c,)
        cin = c
    for i, c in enumerate(cfg.backbone_widths):
        shapes[f"conv{i}.w"], shapes[f"conv{i}.b"] = (c, cin, 3, 3), (c,)
        cin = c
    shapes["theme.w"], shapes["theme.b"] = (cfg.n_themes, cfg.theme_width), (cfg.theme_width,)
    fused = cfg.visual_dim + cfg.theme_width
    if cfg.head_hidden:
        shapes["head0.w"], shapes["head0.b"] = (fused, cfg.head_hidden), (cfg.head_hidden,)
        fused = cfg.head_hidden
    shapes["head1.w"], shapes["head1.b"] = (fused, cfg.n_bins), (cfg.n_bins,)
    return shapes


def is_head_param(name: str) -> bool:
    """Fully connected parameters (theme encoder and output head)."""
    return name.startswith(("theme.", "head"))


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]
    generation: int = field(default=0, compare=False)

    def bump(self) -> None:
        self.generation += 1

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()}, self.generation)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Weights ~ U(-g/sqrt(fan_in), g/sqrt(fan_in)) with g = ``init_gain``; biases zero."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = config.init_gain / np.sqrt(fan_in)
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(config, tensors)


def theme_encode(t: int, n_themes: int) -> np.ndarray:
    if not 0 <= t < n_themes:
        raise IndexError(f"theme {t} outside [0, {n_themes})")
    v = np.zeros(n_themes)
    v[t] = 1.0
    return v


def theme_onehot(themes: Sequence[int], n_themes: int) -> np.ndarray:
    return np.stack([theme_encode(int(t), n_themes) for t in themes]) if len(themes) else np.zeros((0, n_themes))


@dataclass
class Cache:
    generation: int
    params_id: int
    variant: str
    layers: list = field(default_factory=list)
    head: list = field(default_factory=list)
    visual_shape: tuple = ()
    split: int = 0
    use_theme: bool = False
    theme_ctx: object = None
    theme_mask: np.ndarray = None


def _stem_pad() -> int:
    return 1


def forward(params: ModelParams, batch, variant: str = "pad_roi_theme"):
    """Logits ``(N, K)`` for a padded batch, plus the activation cache.

    ``batch`` needs ``canvas`` (N x C x S x S), ``regions`` and ``themes``.
    ROI variants pool each sample's region; the fixed-size baselines pool the
    whole stem map adaptively. Only ``pad_roi_theme`` feeds the theme feature
    to the head; every other variant sees zeros in its place.
    """
    check_variant(variant)
    cfg, p = params.config, params.tensors
    x = np.asarray(batch.canvas, dtype=np.float64)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"canvas shape {x.shape} does not match {cfg.in_channels} input channels")
    n = x.shape[0]
    regions = list(batch.regions)
    if len(regions) != n or len(batch.themes) != n:
        raise UsageError("batch has mismatched canvas / regions / themes counts")
    for r in regions:
        if r.x0 < 0 or r.y0 < 0 or r.x1 > x.shape[3] or r.y1 > x.shape[2] or r.x1 <= r.x0 or r.y1 <= r.y0:
            raise UsageError(f"region {r} does not fit the {x.shape[2]}x{x.shape[3]} canvas")

    cache = Cache(params.generation, id(params), variant)
    L = cache.layers
    h = x
    if variant in ROI_MODES:
        # A zero margin lets the stem see every position an image pixel can
        # reach, so the smaller of two canvases never truncates a footprint.
        m = stem_margin(cfg)
        h = np.pad(x, ((0, 0), (0, 0), (0, m), (0, m)))
    for i, s in enumerate(cfg.stem_strides):
        bias = p[f"stem{i}.b"]
        h, ctx = conv2d_forward(h, p[f"stem{i}.w"], bias, stride=s, pad=_stem_pad())
        L.append(("conv", f"stem{i}", ctx, i > 0))
        h, mask = relu_forward(h)
        L.append(("relu", mask))

    if variant in ROI_MODES:
        spec = RoiPoolSpec(cfg.downsample, cfg.roi_out, cfg.roi_out)
        if cfg.pool == "align":
            h, ctx = roi_ops.roi_align_forward(h, regions, spec, cfg.samples_per_bin)
            L.append(("align", ctx))
        else:
            h, ctx = roi_ops.roi_maxpool_forward(h, regions, spec)
            L.append(("roipool", ctx))
    else:
        h, ctx = roi_ops.adaptive_maxpool_forward(h, cfg.roi_out, cfg.roi_out)
        L.append(("roipool", ctx))

    last = len(cfg.backbone_widths) - 1
    for i in range(len(cfg.backbone_widths)):
        h, ctx = conv2d_forward(h, p[f"conv{i}.w"], p[f"conv{i}.b"], stride=1, pad=1)
        L.append(("conv", f"conv{i}", ctx, True))
        h, mask = relu_forward(h)
        L.append(("relu", mask))
        if i < last:
            h, ctx = maxpool2d_forward(h, 2, 2)
            L.append(("maxpool", ctx))
    h, ctx = roi_ops.adaptive_maxpool_forward(h, cfg.adaptive_out, cfg.adaptive_out)
    L.append(("roipool", ctx))
    visual = h.reshape(n, -1)
    cache.visual_shape = h.shape

    onehot = theme_onehot(batch.themes, cfg.n_themes)
    t, cache.theme_ctx = affine_forward(onehot, p["theme.w"], p["theme.b"])
    t, cache.theme_mask = relu_forward(t)
    cache.use_theme = variant == "pad_roi_theme"
    if not cache.use_theme:
        t = np.zeros_like(t)

    z = concat(visual, t)
    cache.split = visual.shape[1]
    if cfg.head_hidden:
        z, ctx = affine_forward(z, p["head0.w"], p["head0.b"])
        z, mask = relu_forward(z)
        cache.head.append(("head0", ctx, mask))
    logits, ctx = affine_forward(z, p["head1.w"], p["head1.b"])
    cache.head.append(("head1", ctx, None))
    return logits, cache


def backward(params: ModelParams, cache: Cache, grad_logits) -> dict[str, np.ndarray]:
    """Parameter gradients for an upstream gradient on the logits."""
    if cache is None or cache.generation != params.generation or cache.params_id != id(params):
        raise UsageError("activation cache is stale: parameters changed since the forward pass")
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    g = np.asarray(grad_logits, dtype=np.float64)
    for name, ctx, mask in reversed(cache.head):
        if mask is not None:
            g = relu_backward(mask, g)
        g, grads[f"{name}.w"], grads[f"{name}.b"] = affine_backward(ctx, g)
    g_visual, g_theme = concat_backward(cache.split, g)
    if cache.use_theme:
        g_theme = relu_backward(cache.theme_mask, g_theme)
        _, grads["theme.w"], grads["theme.b"] = affine_backward(cache.theme_ctx, g_theme)

    g = g_visual.reshape(cache.visual_shape)
    for layer in reversed(cache.layers):
        kind = layer[0]
        if kind == "relu":
            g = relu_backward(layer[1], g)
        elif kind == "conv":
            _, name, ctx, need_dx = layer
            g, grads[f"{name}.w"], grads[f"{name}.b"] = conv2d_backward(ctx, g, need_input_grad=need_dx)
        elif kind == "maxpool":
            g = maxpool2d_backward(layer[1], g)
        elif kind == "roipool":
            g = roi_ops.roi_maxpool_backward(layer[1], g)
        elif kind == "align":
            g = roi_ops.roi_align_backward(layer[1], g)
    return grads


def predict_distribution(params: ModelParams, batch, variant: str = "pad_roi_theme") -> np.ndarray:
    logits, _ = forward(params, batch, variant)
    return softmax(logits)


def stem_reach(config: ModelConfig, x1: int) -> int:
    """One past the last input column (or row) that can influence the pooled
    features of a region ending at image coordinate ``x1``.

    Padding pixels at or beyond this index never reach the ROI output.
    """
    fx1, _ = roi_ops.map_coords(x1, x1, config.downsample)
    if config.pool == "align":
        fx1 = int(np.ceil(x1 / config.downsample))
    last = fx1 - 1
    for s in reversed(config.stem_strides):
        last = s * last - _stem_pad() + 2
    return last + 1


def stem_margin(config: ModelConfig) -> int:
    """Receptive-field radius of the stem in input pixels."""
    return sum(int(np.prod(config.stem_strides[:i])) for i in range(len(config.stem_strides)))


def feature_extent(config: ModelConfig, canvas: int, roi: bool = False) -> int:
    n = canvas + (stem_margin(config) if roi else 0)
    for s in config.stem_strides:
        n = conv_out_extent(n, 3, s, _stem_pad())
    return n


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"AESTHCKP"
VERSION = 1


def config_digest(meta: dict) -> str:
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> str:
    """Write ``params`` to ``path``; returns the config digest stored in the header.

    Layout (little-endian): magic, u32 version, 32-byte SHA-256 of the
    canonical metadata JSON, u32 JSON length + JSON, u32 tensor count, then
    per tensor: u16 name length + UTF-8 name, u8 ndim, u32 extents, f64 data.
    """
    meta = dict(meta or {})
    meta["model"] = params.config.to_dict()
    digest = config_digest(meta)
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(bytes.fromhex(digest))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name in sorted(params.tensors):
        arr = params.tensors[name]
        bname = name.encode()
        buf.write(struct.pack("<H", len(bname)))
        buf.write(bname)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())
    return digest


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[ModelParams, dict, str]:
    with open(path, "rb") as fh:
        data = fh.read()
    try:
        return _parse_checkpoint(path, data)
    except (struct.error, ValueError, KeyError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from None


def _parse_checkpoint(path, data: bytes) -> tuple[ModelParams, dict, str]:
    view = memoryview(data)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", view, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = bytes(view[12:44]).hex()
    (mlen,) = struct.unpack_from("<I", view, 44)
    off = 48
    meta = json.loads(bytes(view[off : off + mlen]).decode())
    off += mlen
    if config_digest(meta) != digest:
        raise CheckpointError(f"{path}: header digest does not match stored config")
    (count,) = struct.unpack_from("<I", view, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, off)
        off += 2
        name = bytes(view[off : off + nlen]).decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", view, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", view, off)
        off += 4 * ndim
        size = int(np.prod(shape)) * 8
        if off + size > len(data):
            raise CheckpointError(f"{path}: truncated tensor record '{name}'")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=off).astype(np.float64).reshape(shape)
        off += size
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    config = ModelConfig.from_dict(meta["model"])
    expected = param_shapes(config)
    if {k: tuple(v.shape) for k, v in tensors.items()} != expected:
        raise CheckpointError(f"{path}: tensor shapes do not match the stored config")
    return ModelParams(config, tensors), meta, digest


def with_config(config: ModelConfig, **changes) -> ModelConfig:
    return replace(config, **changes)
