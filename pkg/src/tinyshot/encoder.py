"""Tiny vision encoder: sequential layer graph with float and INT8 kernels.

The graph covers the MobileNetV2-style vocabulary (plain / depthwise /
pointwise convolutions, inverted-residual blocks, global average pooling,
linear head) plus standalone activations. Tensors are H x W x C row-major;
the float path upcasts to float64, the integer path quantizes weights
per output channel and activations per tensor from calibration maxima,
accumulates in 32-bit integers, and requantizes between layers with a
double-precision multiplier and half-away rounding.

Graphs serialize to a "TVG1" container that embeds each weight tensor as a
TVT1 record and ends with a whole-file CRC32.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AccumulatorOverflow,
    BadMagic,
    ChecksumMismatch,
    DegenerateActivation,
    NotCalibrated,
    ShapeMismatch,
    TruncatedFile,
    UnresolvedShapes,
    UnsupportedVersion,
)
from .tensor import INT32_MAX, round_half_away, Tensor, _read_tensor_record, pack_tensor

_MAGIC = b"TVG1"
_VERSION = 1


# -- layer descriptors ------------------------------------------------------

@dataclass(frozen=True)
class ConvLayer:
    """k x k convolution, weight (kh, kw, in_c, out_c), optional fused ReLU6."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    relu6: bool = False


@dataclass(frozen=True)
class DepthwiseConvLayer:
    """Per-channel k x k convolution, weight (kh, kw, c)."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    relu6: bool = False


@dataclass(frozen=True)
class PointwiseConvLayer:
    """1x1 convolution, weight (in_c, out_c)."""

    weight: np.ndarray
    bias: np.ndarray | None = None
    relu6: bool = False


@dataclass(frozen=True)
class InvertedResidualLayer:
    """Expand (1x1 + ReLU6), depthwise (k x k + ReLU6), project (1x1, linear).

    The residual add is implied by stride 1 and equal in/out channels.
    """

    expand_w: np.ndarray
    dw_w: np.ndarray
    project_w: np.ndarray
    expand_b: np.ndarray | None = None
    dw_b: np.ndarray | None = None
    project_b: np.ndarray | None = None
    stride: int = 1
    padding: int = 1

    @property
    def in_channels(self) -> int:
        return int(self.expand_w.shape[0])

    @property
    def out_channels(self) -> int:
        return int(self.project_w.shape[1])

    @property
    def has_residual(self) -> bool:
        return self.stride == 1 and self.in_channels == self.out_channels


@dataclass(frozen=True)
class GlobalAvgPoolLayer:
    pass


@dataclass(frozen=True)
class LinearLayer:
    """Dense layer on the flattened input, weight (in_f, out_f)."""

    weight: np.ndarray
    bias: np.ndarray | None = None


@dataclass(frozen=True)
class ReLU6Layer:
    pass


@dataclass(frozen=True)
class TanhLayer:
    pass


Layer = (
    ConvLayer
    | DepthwiseConvLayer
    | PointwiseConvLayer
    | InvertedResidualLayer
    | GlobalAvgPoolLayer
    | LinearLayer
    | ReLU6Layer
    | TanhLayer
)

# calibration stat tags, per layer: simple layers record "out"; inverted
# residuals record each internal tensor plus "out" when the skip add exists
_STAT_TAGS = ("out", "expand", "dw", "project")


@dataclass(frozen=True)
class CalibStats:
    """Max-abs activation statistics gathered over calibration samples."""

    input_max: float
    layer_maxes: tuple[dict, ...]


@dataclass(frozen=True)
class LayerGraph:
    """Sequential encoder description; immutable once built."""

    layers: tuple
    input_shape: tuple[int, int, int]
    output_dim: int
    calib: CalibStats | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if len(self.input_shape) != 3 or any(e <= 0 for e in self.input_shape):
            raise UnresolvedShapes(f"bad input shape {self.input_shape}")
        if not self.layers or not isinstance(self.layers[-1], LinearLayer):
            raise UnresolvedShapes("graph must end with a Linear layer")
        if int(self.layers[-1].weight.shape[1]) != self.output_dim:
            raise UnresolvedShapes("final Linear width disagrees with output_dim")
        layer_shapes(self)  # fails fast on incompatible layers

    @property
    def calibrated(self) -> bool:
        return self.calib is not None


def _conv_out(extent: int, k: int, stride: int, padding: int) -> int:
    padded = extent + 2 * padding
    if padded < k:
        raise UnresolvedShapes(f"kernel {k} larger than padded extent {padded}")
    return (padded - k) // stride + 1


def layer_shapes(g: LayerGraph) -> list[tuple[tuple, tuple]]:
    """(input shape, output shape) per layer; raises UnresolvedShapes."""
    shapes = []
    cur: tuple = tuple(g.input_shape)
    for idx, layer in enumerate(g.layers):
        if isinstance(layer, (ConvLayer, DepthwiseConvLayer, PointwiseConvLayer,
                              InvertedResidualLayer, GlobalAvgPoolLayer)):
            if len(cur) != 3:
                raise UnresolvedShapes(f"layer {idx} needs an H x W x C input, got {cur}")
        if isinstance(layer, ConvLayer):
            kh, kw, in_c, out_c = layer.weight.shape
            if in_c != cur[2]:
                raise UnresolvedShapes(f"layer {idx}: expects {in_c} channels, got {cur[2]}")
            nxt = (_conv_out(cur[0], kh, layer.stride, layer.padding),
                   _conv_out(cur[1], kw, layer.stride, layer.padding), out_c)
        elif isinstance(layer, DepthwiseConvLayer):
            kh, kw, ch = layer.weight.shape
            if ch != cur[2]:
                raise UnresolvedShapes(f"layer {idx}: depthwise over {ch} channels, got {cur[2]}")
            nxt = (_conv_out(cur[0], kh, layer.stride, layer.padding),
                   _conv_out(cur[1], kw, layer.stride, layer.padding), ch)
        elif isinstance(layer, PointwiseConvLayer):
            in_c, out_c = layer.weight.shape
            if in_c != cur[2]:
                raise UnresolvedShapes(f"layer {idx}: expects {in_c} channels, got {cur[2]}")
            nxt = (cur[0], cur[1], out_c)
        elif isinstance(layer, InvertedResidualLayer):
            if layer.expand_w.shape[0] != cur[2]:
                raise UnresolvedShapes(f"layer {idx}: expects {layer.expand_w.shape[0]} channels")
            hidden = layer.expand_w.shape[1]
            if layer.dw_w.shape[2] != hidden or layer.project_w.shape[0] != hidden:
                raise UnresolvedShapes(f"layer {idx}: inconsistent hidden width")
            kh = layer.dw_w.shape[0]
            nxt = (_conv_out(cur[0], kh, layer.stride, layer.padding),
                   _conv_out(cur[1], kh, layer.stride, layer.padding),
                   layer.out_channels)
        elif isinstance(layer, GlobalAvgPoolLayer):
            nxt = (cur[2],)
        elif isinstance(layer, LinearLayer):
            in_f, out_f = layer.weight.shape
            flat = int(np.prod(cur))
            if flat != in_f:
                raise UnresolvedShapes(f"layer {idx}: Linear expects {in_f} inputs, got {flat}")
            nxt = (out_f,)
        elif isinstance(layer, (ReLU6Layer, TanhLayer)):
            nxt = cur
        else:
            raise UnresolvedShapes(f"unknown layer type {type(layer).__name__}")
        shapes.append((cur, nxt))
        cur = nxt
    return shapes


# -- float kernels ----------------------------------------------------------

def _patches(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((padding, padding), (padding, padding), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(0, 1))
    return win[::stride, ::stride]  # (H', W', C, kh, kw)


def _conv2d_f(x, w, stride, padding):
    win = _patches(x, w.shape[0], w.shape[1], stride, padding)
    return np.einsum("hwcij,ijco->hwo", win, w, optimize=True)


def _depthwise_f(x, w, stride, padding):
    win = _patches(x, w.shape[0], w.shape[1], stride, padding)
    return np.einsum("hwcij,ijc->hwc", win, w, optimize=True)


def _relu6(x):
    return np.clip(x, 0.0, 6.0)


def forward_f32(g: LayerGraph, x: np.ndarray | Tensor, _record: list | None = None) -> np.ndarray:
    """Float reference forward pass; returns the unnormalized embedding.

    ``_record`` collects (layer index, tag, max-abs) triples for calibration.
    """
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(g.input_shape):
        raise ShapeMismatch(f"input shape {x.shape} != graph input {g.input_shape}")

    def note(idx, tag, t):
        if _record is not None:
            _record.append((idx, tag, float(np.max(np.abs(t))) if t.size else 0.0))

    for idx, layer in enumerate(g.layers):
        if isinstance(layer, ConvLayer):
            w = layer.weight.astype(np.float64)
            x = _conv2d_f(x, w, layer.stride, layer.padding)
            if layer.bias is not None:
                x = x + layer.bias.astype(np.float64)
            if layer.relu6:
                x = _relu6(x)
        elif isinstance(layer, DepthwiseConvLayer):
            x = _depthwise_f(x, layer.weight.astype(np.float64), layer.stride, layer.padding)
            if layer.bias is not None:
                x = x + layer.bias.astype(np.float64)
            if layer.relu6:
                x = _relu6(x)
        elif isinstance(layer, PointwiseConvLayer):
            x = x @ layer.weight.astype(np.float64)
            if layer.bias is not None:
                x = x + layer.bias.astype(np.float64)
            if layer.relu6:
                x = _relu6(x)
        elif isinstance(layer, InvertedResidualLayer):
            skip = x
            h = x @ layer.expand_w.astype(np.float64)
            if layer.expand_b is not None:
                h = h + layer.expand_b.astype(np.float64)
            h = _relu6(h)
            note(idx, "expand", h)
            h = _depthwise_f(h, layer.dw_w.astype(np.float64), layer.stride, layer.padding)
            if layer.dw_b is not None:
                h = h + layer.dw_b.astype(np.float64)
            h = _relu6(h)
            note(idx, "dw", h)
            y = h @ layer.project_w.astype(np.float64)
            if layer.project_b is not None:
                y = y + layer.project_b.astype(np.float64)
            note(idx, "project", y)
            x = y + skip if layer.has_residual else y
        elif isinstance(layer, GlobalAvgPoolLayer):
            x = x.mean(axis=(0, 1))
        elif isinstance(layer, LinearLayer):
            x = x.ravel() @ layer.weight.astype(np.float64)
            if layer.bias is not None:
                x = x + layer.bias.astype(np.float64)
        elif isinstance(layer, ReLU6Layer):
            x = _relu6(x)
        elif isinstance(layer, TanhLayer):
            x = np.tanh(x)
        note(idx, "out", x)
    return x


# -- calibration ------------------------------------------------------------

def calibrate(g: LayerGraph, samples: list) -> LayerGraph:
    """Collect per-tensor max-abs activation statistics over float forwards.

    Returns a new graph carrying the statistics; scales for a given integer
    range are derived from them at inference time (max / qmax).
    """
    if not samples:
        raise ValueError("calibration needs at least one sample")
    input_max = 0.0
    maxes: list[dict] = [dict() for _ in g.layers]
    for sample in samples:
        arr = sample.data if isinstance(sample, Tensor) else np.asarray(sample, dtype=np.float64)
        input_max = max(input_max, float(np.max(np.abs(arr))))
        rec: list = []
        forward_f32(g, arr, _record=rec)
        for idx, tag, m in rec:
            maxes[idx][tag] = max(maxes[idx].get(tag, 0.0), m)
    if input_max == 0.0:
        raise DegenerateActivation("input is all-zero across calibration samples")
    for idx, stats in enumerate(maxes):
        for tag, m in stats.items():
            if m == 0.0:
                raise DegenerateActivation(
                    f"layer {idx} tensor {tag!r} is all-zero across calibration samples"
                )
    return replace(g, calib=CalibStats(input_max=input_max, layer_maxes=tuple(maxes)))


# -- int8 kernels -----------------------------------------------------------

def _quantize_weight(w: np.ndarray, qmax: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-output-channel symmetric codes; channels run along the last axis."""
    w = np.asarray(w, dtype=np.float64)
    flat = np.abs(w.reshape(-1, w.shape[-1]))
    wmax = flat.max(axis=0)
    scales = np.where(wmax > 0, wmax / qmax, 1.0)
    q = np.clip(round_half_away(w / scales), -qmax, qmax)
    return q.astype(np.int64), scales


def _check_acc(acc: np.ndarray, check: bool):
    if check and acc.size and np.max(np.abs(acc)) > INT32_MAX:
        raise AccumulatorOverflow("conv accumulator exceeded 32-bit range")


def _requant(acc: np.ndarray, mult: np.ndarray | float, qmax: int,
             relu6_cap: int | None = None) -> np.ndarray:
    y = round_half_away(acc.astype(np.float64) * mult)
    y = np.clip(y, -qmax, qmax)
    if relu6_cap is not None:
        y = np.clip(y, 0, relu6_cap)
    return y.astype(np.int64)


def _relu6_cap(s_out: float, qmax: int) -> int:
    return int(min(qmax, round_half_away(6.0 / s_out)))


def forward_i8(g: LayerGraph, x: np.ndarray | Tensor, qmax: int = 127,
               check_overflow: bool = True) -> np.ndarray:
    """Integer forward pass on a calibrated graph; returns a float embedding.

    ``qmax`` widens or narrows the symmetric code range for both weights and
    activations (127 is the deployed int8 setting; tests sweep it to verify
    the error shrinks with more levels).
    """
    if g.calib is None:
        raise NotCalibrated("run calibrate() before the integer forward pass")
    if isinstance(x, Tensor):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.shape != tuple(g.input_shape):
        raise ShapeMismatch(f"input shape {x.shape} != graph input {g.input_shape}")

    s_in = g.calib.input_max / qmax
    q = np.clip(round_half_away(x / s_in), -qmax, qmax).astype(np.int64)

    for idx, layer in enumerate(g.layers):
        stats = g.calib.layer_maxes[idx]
        is_last = idx == len(g.layers) - 1
        if isinstance(layer, (ConvLayer, DepthwiseConvLayer)):
            qw, sw = _quantize_weight(layer.weight, qmax)
            win = _patches(q, qw.shape[0], qw.shape[1], layer.stride, layer.padding)
            if isinstance(layer, ConvLayer):
                acc = np.einsum("hwcij,ijco->hwo", win, qw, optimize=True)
            else:
                acc = np.einsum("hwcij,ijc->hwc", win, qw, optimize=True)
            _check_acc(acc, check_overflow)
            if layer.bias is not None:
                acc = acc + round_half_away(
                    layer.bias.astype(np.float64) / (s_in * sw)).astype(np.int64)
            s_out = stats["out"] / qmax
            cap = _relu6_cap(s_out, qmax) if layer.relu6 else None
            q = _requant(acc, s_in * sw / s_out, qmax, cap)
            s_in = s_out
        elif isinstance(layer, PointwiseConvLayer):
            qw, sw = _quantize_weight(layer.weight, qmax)
            acc = q @ qw
            _check_acc(acc, check_overflow)
            if layer.bias is not None:
                acc = acc + round_half_away(
                    layer.bias.astype(np.float64) / (s_in * sw)).astype(np.int64)
            s_out = stats["out"] / qmax
            cap = _relu6_cap(s_out, qmax) if layer.relu6 else None
            q = _requant(acc, s_in * sw / s_out, qmax, cap)
            s_in = s_out
        elif isinstance(layer, InvertedResidualLayer):
            q_skip, s_skip = q, s_in
            # expand
            qw, sw = _quantize_weight(layer.expand_w, qmax)
            acc = q @ qw
            _check_acc(acc, check_overflow)
            if layer.expand_b is not None:
                acc = acc + round_half_away(
                    layer.expand_b.astype(np.float64) / (s_in * sw)).astype(np.int64)
            s_exp = stats["expand"] / qmax
            q = _requant(acc, s_in * sw / s_exp, qmax, _relu6_cap(s_exp, qmax))
            s_in = s_exp
            # depthwise
            qw, sw = _quantize_weight(layer.dw_w, qmax)
            win = _patches(q, qw.shape[0], qw.shape[1], layer.stride, layer.padding)
            acc = np.einsum("hwcij,ijc->hwc", win, qw, optimize=True)
            _check_acc(acc, check_overflow)
            if layer.dw_b is not None:
                acc = acc + round_half_away(
                    layer.dw_b.astype(np.float64) / (s_in * sw)).astype(np.int64)
            s_dw = stats["dw"] / qmax
            q = _requant(acc, s_in * sw / s_dw, qmax, _relu6_cap(s_dw, qmax))
            s_in = s_dw
            # project (linear bottleneck)
            qw, sw = _quantize_weight(layer.project_w, qmax)
            acc = q @ qw
            _check_acc(acc, check_overflow)
            if layer.project_b is not None:
                acc = acc + round_half_away(
                    layer.project_b.astype(np.float64) / (s_in * sw)).astype(np.int64)
            s_proj = stats["project"] / qmax
            q = _requant(acc, s_in * sw / s_proj, qmax)
            s_in = s_proj
            if layer.has_residual:
                s_out = stats["out"] / qmax
                blended = (q.astype(np.float64) * (s_proj / s_out)
                           + q_skip.astype(np.float64) * (s_skip / s_out))
                q = np.clip(round_half_away(blended), -qmax, qmax).astype(np.int64)
                s_in = s_out
        elif isinstance(layer, GlobalAvgPoolLayer):
            count = q.shape[0] * q.shape[1]
            acc = q.sum(axis=(0, 1))
            _check_acc(acc, check_overflow)
            s_out = stats["out"] / qmax
            q = _requant(acc, s_in / (count * s_out), qmax)
            s_in = s_out
        elif isinstance(layer, LinearLayer):
            qw, sw = _quantize_weight(layer.weight, qmax)
            acc = q.ravel() @ qw
            _check_acc(acc, check_overflow)
            if layer.bias is not None:
                acc = acc + round_half_away(
                    layer.bias.astype(np.float64) / (s_in * sw)).astype(np.int64)
            if is_last:
                return acc.astype(np.float64) * (s_in * sw)
            s_out = stats["out"] / qmax
            q = _requant(acc, s_in * sw / s_out, qmax)
            s_in = s_out
        elif isinstance(layer, ReLU6Layer):
            s_out = stats["out"] / qmax
            q = _requant(q, s_in / s_out, qmax, _relu6_cap(s_out, qmax))
            s_in = s_out
        elif isinstance(layer, TanhLayer):
            raise NotCalibrated("tanh has no integer kernel; use the float path")
    raise UnresolvedShapes("graph did not terminate in a Linear layer")


def i8_error_bound(g: LayerGraph, qmax: int = 127) -> float:
    """Analytic per-element bound on |forward_i8 - forward_f32|.

    Valid on inputs whose activations stay within the calibration maxima
    (in particular, on the calibration samples themselves). Propagates the
    worst case of weight rounding, activation rounding, and requantization
    through each layer.
    """
    if g.calib is None:
        raise NotCalibrated("error bound needs calibration statistics")
    shapes = layer_shapes(g)

    def wmax_l1(w):
        flat = w.reshape(-1, w.shape[-1]).astype(np.float64)
        l1 = np.abs(flat).sum(axis=0).max()
        wm = np.abs(flat).max(axis=0).max()
        return l1, wm, flat.shape[0]

    def conv_step(e_in, w, x_max, s_in, s_out_or_none, fan_mult=1):
        # fan_mult: spatial taps sharing each weight column (depthwise=1 via shape)
        l1, wm, fan = wmax_l1(w)
        fan *= fan_mult
        sw = wm / qmax
        x_cap = s_in * qmax if x_max is None else x_max
        e = l1 * e_in + (sw / 2.0) * fan * (x_cap + e_in) + s_in * sw / 2.0
        if s_out_or_none is not None:
            e += s_out_or_none / 2.0
        return e

    s_in = g.calib.input_max / qmax
    err = s_in / 2.0
    for idx, layer in enumerate(g.layers):
        stats = g.calib.layer_maxes[idx]
        is_last = idx == len(g.layers) - 1
        if isinstance(layer, ConvLayer):
            s_out = stats["out"] / qmax
            # weight tensor (kh,kw,in,oc): flatten gives fan = kh*kw*in
            err = conv_step(err, layer.weight, None, s_in, s_out)
            if layer.relu6:
                err += s_out / 2.0
            s_in = s_out
        elif isinstance(layer, DepthwiseConvLayer):
            s_out = stats["out"] / qmax
            kh, kw, ch = layer.weight.shape
            w2 = layer.weight.reshape(kh * kw, 1, ch).reshape(kh * kw, ch)
            # per-channel fan-in is kh*kw
            l1 = np.abs(w2).sum(axis=0).max()
            wm = np.abs(w2).max()
            sw = wm / qmax
            err = (l1 * err + (sw / 2.0) * kh * kw * (s_in * qmax + err)
                   + s_in * sw / 2.0 + s_out / 2.0)
            if layer.relu6:
                err += s_out / 2.0
            s_in = s_out
        elif isinstance(layer, PointwiseConvLayer):
            s_out = stats["out"] / qmax
            err = conv_step(err, layer.weight, None, s_in, s_out)
            if layer.relu6:
                err += s_out / 2.0
            s_in = s_out
        elif isinstance(layer, InvertedResidualLayer):
            e_skip, s_skip = err, s_in
            s_exp = stats["expand"] / qmax
            err = conv_step(err, layer.expand_w, None, s_in, s_exp) + s_exp / 2.0
            s_in = s_exp
            s_dw = stats["dw"] / qmax
            kh, kw, ch = layer.dw_w.shape
            w2 = layer.dw_w.reshape(kh * kw, ch)
            l1 = np.abs(w2).sum(axis=0).max()
            wm = np.abs(w2).max()
            sw = wm / qmax
            err = (l1 * err + (sw / 2.0) * kh * kw * (s_in * qmax + err)
                   + s_in * sw / 2.0 + s_dw / 2.0 + s_dw / 2.0)
            s_in = s_dw
            s_proj = stats["project"] / qmax
            err = conv_step(err, layer.project_w, None, s_in, s_proj)
            s_in = s_proj
            if layer.has_residual:
                s_out = stats["out"] / qmax
                err = err + e_skip + s_out / 2.0
                s_in = s_out
        elif isinstance(layer, GlobalAvgPoolLayer):
            s_out = stats["out"] / qmax
            err = err + s_out / 2.0
            s_in = s_out
        elif isinstance(layer, LinearLayer):
            s_out = None if is_last else stats["out"] / qmax
            err = conv_step(err, layer.weight, None, s_in, s_out)
            if not is_last:
                s_in = s_out
        elif isinstance(layer, ReLU6Layer):
            s_out = stats["out"] / qmax
            err = err + s_out / 2.0 + s_out / 2.0
            s_in = s_out
        elif isinstance(layer, TanhLayer):
            raise NotCalibrated("tanh has no integer kernel; no bound defined")
    del shapes
    return float(err)


# -- size accounting --------------------------------------------------------

def _layer_weight_arrays(layer) -> list[tuple[np.ndarray, bool]]:
    """(array, is_bias) pairs for every parameter tensor of one layer."""
    out = []
    if isinstance(layer, (ConvLayer, DepthwiseConvLayer, PointwiseConvLayer)):
        out.append((layer.weight, False))
        if layer.bias is not None:
            out.append((layer.bias, True))
    elif isinstance(layer, InvertedResidualLayer):
        for w, b in ((layer.expand_w, layer.expand_b), (layer.dw_w, layer.dw_b),
                     (layer.project_w, layer.project_b)):
            out.append((w, False))
            if b is not None:
                out.append((b, True))
    elif isinstance(layer, LinearLayer):
        out.append((layer.weight, False))
        if layer.bias is not None:
            out.append((layer.bias, True))
    return out


def parameter_count(g: LayerGraph) -> int:
    return sum(int(a.size) for layer in g.layers for a, _ in _layer_weight_arrays(layer))


def _weight_scale_count(layer) -> int:
    if isinstance(layer, (ConvLayer, PointwiseConvLayer, LinearLayer)):
        return int(layer.weight.shape[-1])
    if isinstance(layer, DepthwiseConvLayer):
        return int(layer.weight.shape[-1])
    if isinstance(layer, InvertedResidualLayer):
        return (int(layer.expand_w.shape[-1]) + int(layer.dw_w.shape[-1])
                + int(layer.project_w.shape[-1]))
    return 0


def _activation_scale_count(layer) -> int:
    if isinstance(layer, InvertedResidualLayer):
        return 4 if layer.has_residual else 3
    return 1


def quant_overhead_bytes(g: LayerGraph) -> int:
    """Bytes of f32 scale metadata the int8 deployment carries."""
    n_w = sum(_weight_scale_count(layer) for layer in g.layers)
    n_a = 1 + sum(_activation_scale_count(layer) for layer in g.layers)
    return 4 * (n_w + n_a)


def model_size_bytes(g: LayerGraph, precision: str = "i8") -> int:
    """Deployed weight-storage size: parameters at the precision plus, for
    the integer path, int32 biases and f32 scale overhead."""
    n_w = sum(int(a.size) for layer in g.layers
              for a, is_b in _layer_weight_arrays(layer) if not is_b)
    n_b = sum(int(a.size) for layer in g.layers
              for a, is_b in _layer_weight_arrays(layer) if is_b)
    if precision == "f32":
        return 4 * (n_w + n_b)
    if precision == "f16":
        return 2 * (n_w + n_b)
    if precision == "i8":
        return n_w + 4 * n_b + quant_overhead_bytes(g)
    raise ValueError(f"unknown precision {precision!r}")


# -- preprocessing ----------------------------------------------------------

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centered bilinear resample of an H x W x C float array."""
    img = np.asarray(img, dtype=np.float64)
    in_h, in_w = img.shape[0], img.shape[1]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0, in_h - 1)
    xs = np.clip(xs, 0, in_w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def preprocess(image: np.ndarray | Tensor, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Resize to the graph input and map uint8 pixels into [-1, 1].

    Float inputs already shaped like the graph input pass through untouched.
    """
    if isinstance(image, Tensor):
        image = image.data
    image = np.asarray(image)
    h, w, c = input_shape
    if image.ndim == 2:
        image = image[:, :, None]
    if image.ndim != 3:
        raise ShapeMismatch(f"expected an H x W x C image, got shape {image.shape}")
    if image.dtype == np.uint8:
        x = (image.astype(np.float64) - 127.5) / 127.5
    else:
        x = image.astype(np.float64)
        if x.shape == (h, w, c):
            return x
    if x.shape[2] != c:
        raise ShapeMismatch(f"image has {x.shape[2]} channels, graph wants {c}")
    return bilinear_resize(x, h, w)


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval <= 255) into a uint8 H x W x 3 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise TruncatedFile("PPM header truncated")
        ch = data[pos : pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise TruncatedFile("PPM comment runs off the file")
            pos += 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end : end + 1].isspace():
                end += 1
            fields.append(data[pos:end])
            pos = end
    if fields[0] != b"P6":
        raise BadMagic("not a binary PPM (P6) file")
    width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval > 255:
        raise UnsupportedVersion("16-bit PPM not supported")
    pos += 1  # single whitespace after maxval
    need = width * height * 3
    raw = data[pos : pos + need]
    if len(raw) < need:
        raise TruncatedFile("PPM pixel data truncated")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width, 3).copy()


# -- graph builders ---------------------------------------------------------

def _round8(x: float) -> int:
    return max(8, int(round_half_away(x / 8.0)) * 8)


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


def _make_ir(rng, in_c, out_c, expansion, stride, kernel=3, bias=False):
    hidden = in_c * expansion
    layer = InvertedResidualLayer(
        expand_w=_he(rng, (in_c, hidden), in_c),
        dw_w=_he(rng, (kernel, kernel, hidden), kernel * kernel),
        project_w=_he(rng, (hidden, out_c), hidden),
        expand_b=np.zeros(hidden, dtype=np.float32) if bias else None,
        dw_b=np.zeros(hidden, dtype=np.float32) if bias else None,
        project_b=np.zeros(out_c, dtype=np.float32) if bias else None,
        stride=stride,
        padding=kernel // 2,
    )
    return layer


def desk_graph(seed: int = 42, input_size: int = 32, output_dim: int = 64,
               bias: bool = False) -> LayerGraph:
    """Default test vehicle: stem conv + 3 inverted-residual stages (~100K params)."""
    rng = np.random.default_rng(seed)
    layers: list = [
        ConvLayer(weight=_he(rng, (3, 3, 3, 16), 27),
                  bias=np.zeros(16, dtype=np.float32) if bias else None,
                  stride=1, padding=1, relu6=True),
    ]
    in_c = 16
    for out_c in (24, 48, 96):
        layers.append(_make_ir(rng, in_c, out_c, expansion=6, stride=2, bias=bias))
        if out_c < 96:
            layers.append(_make_ir(rng, out_c, out_c, expansion=6, stride=1, bias=bias))
        in_c = out_c
    layers.append(GlobalAvgPoolLayer())
    layers.append(LinearLayer(
        weight=_he(rng, (in_c, output_dim), in_c),
        bias=np.zeros(output_dim, dtype=np.float32) if bias else None,
    ))
    return LayerGraph(layers=tuple(layers), input_shape=(input_size, input_size, 3),
                      output_dim=output_dim)


# MobileNetV2 inverted-residual schedule: (expansion, channels, repeats, stride)
_MNV2_SCHEDULE = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


def mobilenet_graph(alpha: float = 0.35, input_size: int = 128, output_dim: int = 256,
                    seed: int = 42) -> LayerGraph:
    """Full-scale backbone with width multiplier applied to every channel count
    (nearest multiple of 8, floored at 8), pooled and projected to the
    embedding dimension."""
    rng = np.random.default_rng(seed)
    stem_c = _round8(32 * alpha)
    layers: list = [ConvLayer(weight=_he(rng, (3, 3, 3, stem_c), 27),
                              stride=2, padding=1, relu6=True)]
    in_c = stem_c
    for expansion, channels, repeats, stride in _MNV2_SCHEDULE:
        out_c = _round8(channels * alpha)
        for i in range(repeats):
            layers.append(_make_ir(rng, in_c, out_c, expansion=expansion,
                                   stride=stride if i == 0 else 1))
            in_c = out_c
    head_c = _round8(1280 * alpha)
    layers.append(PointwiseConvLayer(weight=_he(rng, (in_c, head_c), in_c), relu6=True))
    layers.append(GlobalAvgPoolLayer())
    layers.append(LinearLayer(weight=_he(rng, (head_c, output_dim), head_c)))
    return LayerGraph(layers=tuple(layers), input_shape=(input_size, input_size, 3),
                      output_dim=output_dim)


# -- TVG1 container ---------------------------------------------------------

_KIND_IDS = {
    ConvLayer: 0,
    DepthwiseConvLayer: 1,
    PointwiseConvLayer: 2,
    InvertedResidualLayer: 3,
    GlobalAvgPoolLayer: 4,
    LinearLayer: 5,
    ReLU6Layer: 6,
    TanhLayer: 7,
}
_STAT_IDS = {tag: i for i, tag in enumerate(_STAT_TAGS)}


def _emit_tensor(out: bytearray, arr: np.ndarray | None):
    if arr is None:
        out += b"\x00"
    else:
        out += b"\x01"
        out += pack_tensor(Tensor(np.asarray(arr, dtype=np.float32)))


def pack_graph(g: LayerGraph) -> bytes:
    """Serialize a graph (and calibration stats, if any) to TVG1 bytes."""
    out = bytearray()
    out += _MAGIC
    out += struct.pack("<H", _VERSION)
    out += struct.pack("<3I", *g.input_shape)
    out += struct.pack("<I", g.output_dim)
    out += struct.pack("<B", 1 if g.calibrated else 0)
    out += struct.pack("<H", len(g.layers))
    for layer in g.layers:
        out += struct.pack("<B", _KIND_IDS[type(layer)])
        if isinstance(layer, ConvLayer):
            kh, kw, in_c, out_c = layer.weight.shape
            out += struct.pack("<HHBBBB", in_c, out_c, kh, layer.stride,
                               layer.padding, int(layer.relu6))
            _emit_tensor(out, layer.weight)
            _emit_tensor(out, layer.bias)
        elif isinstance(layer, DepthwiseConvLayer):
            kh, kw, ch = layer.weight.shape
            out += struct.pack("<HBBBB", ch, kh, layer.stride, layer.padding,
                               int(layer.relu6))
            _emit_tensor(out, layer.weight)
            _emit_tensor(out, layer.bias)
        elif isinstance(layer, PointwiseConvLayer):
            in_c, out_c = layer.weight.shape
            out += struct.pack("<HHB", in_c, out_c, int(layer.relu6))
            _emit_tensor(out, layer.weight)
            _emit_tensor(out, layer.bias)
        elif isinstance(layer, InvertedResidualLayer):
            in_c = layer.expand_w.shape[0]
            hidden = layer.expand_w.shape[1]
            out_c = layer.project_w.shape[1]
            kh = layer.dw_w.shape[0]
            out += struct.pack("<HHHBBB", in_c, hidden, out_c, kh, layer.stride,
                               layer.padding)
            for arr in (layer.expand_w, layer.expand_b, layer.dw_w, layer.dw_b,
                        layer.project_w, layer.project_b):
                _emit_tensor(out, arr)
        elif isinstance(layer, LinearLayer):
            in_f, out_f = layer.weight.shape
            out += struct.pack("<HH", in_f, out_f)
            _emit_tensor(out, layer.weight)
            _emit_tensor(out, layer.bias)
        # GAP / ReLU6 / Tanh carry no parameters
    if g.calibrated:
        out += struct.pack("<f", g.calib.input_max)
        for stats in g.calib.layer_maxes:
            items = sorted(stats.items(), key=lambda kv: _STAT_IDS[kv[0]])
            out += struct.pack("<B", len(items))
            for tag, value in items:
                out += struct.pack("<Bf", _STAT_IDS[tag], value)
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes, offset: int):
        self.buf = buf
        self.off = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.buf):
            raise TruncatedFile("TVG1 record truncated")
        vals = struct.unpack_from(fmt, self.buf, self.off)
        self.off += size
        return vals if len(vals) > 1 else vals[0]

    def tensor(self) -> np.ndarray | None:
        present = self.take("<B")
        if not present:
            return None
        t, end = _read_tensor_record(self.buf, self.off)
        self.off = end
        return t.data


def unpack_graph(blob: bytes) -> LayerGraph:
    """Parse TVG1 bytes, verifying structure and the trailing CRC32."""
    if len(blob) < 4 or blob[:4] != _MAGIC:
        raise BadMagic("not a TVG1 graph container")
    if len(blob) < 8:
        raise TruncatedFile("TVG1 header truncated")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise ChecksumMismatch("TVG1 checksum mismatch")
    r = _Reader(blob, 4)
    version = r.take("<H")
    if version != _VERSION:
        raise UnsupportedVersion(f"TVG1 version {version} not supported")
    input_shape = tuple(r.take("<3I"))
    output_dim = r.take("<I")
    calibrated = r.take("<B")
    n_layers = r.take("<H")
    layers: list = []
    for _ in range(n_layers):
        kind = r.take("<B")
        if kind == 0:
            in_c, out_c, k, stride, pad, act = r.take("<HHBBBB")
            w, b = r.tensor(), r.tensor()
            layers.append(ConvLayer(weight=w, bias=b, stride=stride, padding=pad,
                                    relu6=bool(act)))
        elif kind == 1:
            ch, k, stride, pad, act = r.take("<HBBBB")
            w, b = r.tensor(), r.tensor()
            layers.append(DepthwiseConvLayer(weight=w, bias=b, stride=stride,
                                             padding=pad, relu6=bool(act)))
        elif kind == 2:
            in_c, out_c, act = r.take("<HHB")
            w, b = r.tensor(), r.tensor()
            layers.append(PointwiseConvLayer(weight=w, bias=b, relu6=bool(act)))
        elif kind == 3:
            in_c, hidden, out_c, k, stride, pad = r.take("<HHHBBB")
            ew, eb = r.tensor(), r.tensor()
            dw, db = r.tensor(), r.tensor()
            pw, pb = r.tensor(), r.tensor()
            layers.append(InvertedResidualLayer(expand_w=ew, dw_w=dw, project_w=pw,
                                                expand_b=eb, dw_b=db, project_b=pb,
                                                stride=stride, padding=pad))
        elif kind == 4:
            layers.append(GlobalAvgPoolLayer())
        elif kind == 5:
            in_f, out_f = r.take("<HH")
            w, b = r.tensor(), r.tensor()
            layers.append(LinearLayer(weight=w, bias=b))
        elif kind == 6:
            layers.append(ReLU6Layer())
        elif kind == 7:
            layers.append(TanhLayer())
        else:
            raise TruncatedFile(f"unknown TVG1 layer kind {kind}")
    calib = None
    if calibrated:
        input_max = r.take("<f")
        layer_maxes = []
        for _ in range(n_layers):
            n_stats = r.take("<B")
            stats = {}
            for _ in range(n_stats):
                tag_id, value = r.take("<Bf")
                if tag_id >= len(_STAT_TAGS):
                    raise TruncatedFile(f"unknown TVG1 stat tag {tag_id}")
                stats[_STAT_TAGS[tag_id]] = float(np.float32(value))
            layer_maxes.append(stats)
        calib = CalibStats(input_max=float(np.float32(input_max)),
                           layer_maxes=tuple(layer_maxes))
    if r.off != len(blob) - 4:
        raise TruncatedFile("trailing bytes inside TVG1 container")
    return LayerGraph(layers=tuple(layers), input_shape=input_shape,
                      output_dim=output_dim, calib=calib)


def save_graph(g: LayerGraph, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pack_graph(g))


def load_graph(path) -> LayerGraph:
    with open(path, "rb") as fh:
        return unpack_graph(fh.read())
