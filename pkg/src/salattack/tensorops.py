"""Dense tensor primitives: layer forward/backward passes and gradient scaling.

All tensors are plain ``numpy.float64`` arrays in channels-height-width layout,
row-major. Every operation here is a pure function: nothing mutates its inputs,
so the primitives are safe to call from concurrent workers on disjoint data.

Backward passes are hand-derived and are checked against central finite
differences in the test suite; they must stay independent of any autograd
framework so that check stays meaningful.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Array = np.ndarray


class ShapeMismatchError(ValueError):
    """Input tensor shape does not match a layer's declaration."""


def require_finite(name: str, arr: Array) -> None:
    """Raise if ``arr`` contains NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")


# ---------------------------------------------------------------------------
# Layer primitives
# ---------------------------------------------------------------------------

LAYER_KINDS = ("conv2d", "relu", "sigmoid", "maxpool", "upsample", "concat")


@dataclass(frozen=True)
class LayerPrimitive:
    """One node of a layer graph.

    ``sources`` wires the graph: indices of earlier layers feeding this one,
    with -1 meaning the model input image. ``None`` defaults to the previous
    layer. ``concat`` requires two or more sources sharing spatial dims.
    """

    kind: str
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    in_channels: int = 0
    out_channels: int = 0
    sources: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "maxpool"):
            if self.kernel < 1 or self.stride < 1 or self.padding < 0:
                raise ValueError(
                    f"{self.kind}: kernel >= 1, stride >= 1, padding >= 0 required, "
                    f"got k={self.kernel} s={self.stride} p={self.padding}"
                )
        if self.kind == "conv2d" and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError("conv2d needs positive channel counts")
        if self.kind == "concat":
            if self.sources is None or len(self.sources) < 2:
                raise ValueError("concat needs at least two source layers")

    def describe(self) -> str:
        if self.kind == "conv2d":
            return (f"conv2d({self.in_channels}->{self.out_channels}, "
                    f"k={self.kernel}, s={self.stride}, p={self.padding})")
        if self.kind == "maxpool":
            return f"maxpool(k={self.kernel}, s={self.stride})"
        if self.kind == "concat":
            return f"concat{self.sources}"
        return self.kind


def conv2d(in_channels: int, out_channels: int, kernel: int = 3, stride: int = 1,
           padding: int = 1, sources: tuple[int, ...] | None = None) -> LayerPrimitive:
    return LayerPrimitive("conv2d", kernel=kernel, stride=stride, padding=padding,
                          in_channels=in_channels, out_channels=out_channels,
                          sources=sources)


def relu() -> LayerPrimitive:
    return LayerPrimitive("relu")


def sigmoid() -> LayerPrimitive:
    return LayerPrimitive("sigmoid")


def maxpool(kernel: int = 2, stride: int = 2,
            sources: tuple[int, ...] | None = None) -> LayerPrimitive:
    return LayerPrimitive("maxpool", kernel=kernel, stride=stride, sources=sources)


def upsample() -> LayerPrimitive:
    """Nearest-neighbour upsampling by a fixed factor of 2."""
    return LayerPrimitive("upsample")


def concat(sources: tuple[int, ...]) -> LayerPrimitive:
    return LayerPrimitive("concat", sources=tuple(sources))


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple[int, int]:
    """Standard convolution/pooling output arithmetic."""
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeMismatchError(
            f"spatial dims {h}x{w} too small for k={kernel} s={stride} p={padding}")
    return oh, ow


def output_shape(layer: LayerPrimitive, input_shapes) -> tuple[int, int, int]:
    """Statically predicted output shape for one layer.

    ``input_shapes`` is a single (c, h, w) tuple, or a list of them for concat.
    """
    if layer.kind == "concat":
        shapes = list(input_shapes)
        hw = {s[1:] for s in shapes}
        if len(hw) != 1:
            raise ShapeMismatchError(
                f"{layer.describe()}: sources disagree on spatial dims: {sorted(hw)}")
        return (sum(s[0] for s in shapes),) + shapes[0][1:]
    c, h, w = input_shapes
    if layer.kind == "conv2d":
        if c != layer.in_channels:
            raise ShapeMismatchError(
                f"{layer.describe()}: expected {layer.in_channels} input channels, "
                f"got shape {(c, h, w)}")
        oh, ow = conv_output_hw(h, w, layer.kernel, layer.stride, layer.padding)
        return (layer.out_channels, oh, ow)
    if layer.kind == "maxpool":
        oh, ow = conv_output_hw(h, w, layer.kernel, layer.stride, 0)
        return (c, oh, ow)
    if layer.kind == "upsample":
        return (c, 2 * h, 2 * w)
    return (c, h, w)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _check_input(layer: LayerPrimitive, x: Array) -> None:
    if x.ndim != 3:
        raise ShapeMismatchError(f"{layer.describe()}: expected 3-d input, got {x.shape}")
    if layer.kind == "conv2d" and x.shape[0] != layer.in_channels:
        raise ShapeMismatchError(
            f"{layer.describe()}: expected {layer.in_channels} input channels, "
            f"got shape {tuple(x.shape)}")


def _im2col(x_pad: Array, kernel: int, stride: int, oh: int, ow: int) -> Array:
    # Strided view (c, k, k, oh, ow); no copy until the contraction.
    c = x_pad.shape[0]
    s0, s1, s2 = x_pad.strides
    shape = (c, kernel, kernel, oh, ow)
    strides = (s0, s1, s2, s1 * stride, s2 * stride)
    return np.lib.stride_tricks.as_strided(x_pad, shape=shape, strides=strides)


def _pad(x: Array, padding: int) -> Array:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (padding, padding), (padding, padding)))


def _conv2d_forward(layer: LayerPrimitive, weights: tuple[Array, Array], x: Array) -> Array:
    w, b = weights
    oh, ow = conv_output_hw(x.shape[1], x.shape[2], layer.kernel, layer.stride, layer.padding)
    cols = _im2col(_pad(x, layer.padding), layer.kernel, layer.stride, oh, ow)
    out = np.tensordot(w, cols, axes=([1, 2, 3], [0, 1, 2]))
    out += b[:, None, None]
    return out


def _pool_windows(x: Array, kernel: int, stride: int, oh: int, ow: int) -> Array:
    c = x.shape[0]
    s0, s1, s2 = x.strides
    shape = (c, oh, ow, kernel, kernel)
    strides = (s0, s1 * stride, s2 * stride, s1, s2)
    return np.lib.stride_tricks.as_strided(x, shape=shape, strides=strides)


def _sigmoid(x: Array) -> Array:
    # Split by sign to avoid overflow in exp.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(layer: LayerPrimitive, weights, x):
    """Run one layer forward.

    ``weights`` is a (kernel, bias) pair for conv2d and None otherwise.
    ``x`` is a single array, or a list of arrays for concat.
    """
    if layer.kind == "concat":
        shapes = [tuple(a.shape) for a in x]
        output_shape(layer, shapes)  # validates spatial agreement
        return np.concatenate(list(x), axis=0)
    _check_input(layer, x)
    if layer.kind == "conv2d":
        return _conv2d_forward(layer, weights, x)
    if layer.kind == "relu":
        return np.maximum(x, 0.0)
    if layer.kind == "sigmoid":
        return _sigmoid(x)
    if layer.kind == "maxpool":
        oh, ow = conv_output_hw(x.shape[1], x.shape[2], layer.kernel, layer.stride, 0)
        win = _pool_windows(x, layer.kernel, layer.stride, oh, ow)
        return win.reshape(x.shape[0], oh, ow, -1).max(axis=3)
    if layer.kind == "upsample":
        return x.repeat(2, axis=1).repeat(2, axis=2)
    raise AssertionError(layer.kind)


# ---------------------------------------------------------------------------
# Backward passes
# ---------------------------------------------------------------------------

def _conv2d_backward(layer, weights, x, grad_out, with_weight_grad):
    w, _b = weights
    k, s, p = layer.kernel, layer.stride, layer.padding
    out_c, oh, ow = grad_out.shape
    x_pad = _pad(x, p)

    grad_wb = None
    if with_weight_grad:
        cols = _im2col(x_pad, k, s, oh, ow)
        grad_w = np.tensordot(grad_out, cols, axes=([1, 2], [3, 4]))
        grad_wb = (grad_w, grad_out.sum(axis=(1, 2)))

    if s == 1:
        # For unit stride the input gradient is itself a convolution: correlate
        # the zero-padded output gradient with the 180-degree-flipped kernels.
        gpad = np.pad(grad_out, ((0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        cols_g = _im2col(gpad, k, 1, oh + k - 1, ow + k - 1)
        grad_xpad = np.tensordot(w_flip, cols_g, axes=([1, 2, 3], [0, 1, 2]))
    else:
        go2 = grad_out.reshape(out_c, oh * ow)
        grad_xpad = np.zeros_like(x_pad)
        for ki in range(k):
            for kj in range(k):
                gslice = w[:, :, ki, kj].T @ go2
                grad_xpad[:, ki:ki + s * oh:s, kj:kj + s * ow:s] += \
                    gslice.reshape(-1, oh, ow)
    h, wd = x.shape[1], x.shape[2]
    grad_x = grad_xpad[:, p:p + h, p:p + wd] if p else grad_xpad
    return grad_x, grad_wb


def _maxpool_backward(layer, x, grad_out):
    k, s = layer.kernel, layer.stride
    c, oh, ow = grad_out.shape
    win = _pool_windows(x, k, s, oh, ow).reshape(c, oh, ow, k * k)
    # np.argmax takes the first occurrence, i.e. row-major tie-breaking.
    arg = win.argmax(axis=3)
    rows = (np.arange(oh)[None, :, None] * s + arg // k)
    cols = (np.arange(ow)[None, None, :] * s + arg % k)
    chan = np.broadcast_to(np.arange(c)[:, None, None], arg.shape)
    grad_x = np.zeros_like(x)
    if s >= k:
        # Disjoint windows: no index can repeat, plain fancy assignment works.
        grad_x[chan, rows, cols] = grad_out
    else:
        np.add.at(grad_x, (chan, rows, cols), grad_out)
    return grad_x


def backward(layer: LayerPrimitive, weights, cached_input, grad_output,
             with_weight_grad: bool = True):
    """Backpropagate one layer.

    ``cached_input`` must be the exact tensor passed to the matching forward
    call (a list of tensors for concat). Returns ``(grad_input, grad_weights)``
    where ``grad_weights`` is a (kernel, bias) grad pair for conv2d and None
    otherwise; for concat, ``grad_input`` is a list, one entry per source.
    """
    if layer.kind == "concat":
        splits = np.cumsum([a.shape[0] for a in cached_input])[:-1]
        return [np.ascontiguousarray(g) for g in np.split(grad_output, splits, axis=0)], None
    _check_input(layer, cached_input)
    expected = output_shape(layer, tuple(cached_input.shape))
    if tuple(grad_output.shape) != expected:
        raise ShapeMismatchError(
            f"{layer.describe()}: grad-output shape {tuple(grad_output.shape)} does not "
            f"match forward output shape {expected}")
    if layer.kind == "conv2d":
        return _conv2d_backward(layer, weights, cached_input, grad_output, with_weight_grad)
    if layer.kind == "relu":
        return grad_output * (cached_input > 0), None
    if layer.kind == "sigmoid":
        sig = _sigmoid(cached_input)
        return grad_output * sig * (1.0 - sig), None
    if layer.kind == "maxpool":
        return _maxpool_backward(layer, cached_input, grad_output), None
    if layer.kind == "upsample":
        c, h, w = cached_input.shape
        return grad_output.reshape(c, h, 2, w, 2).sum(axis=(2, 4)), None
    raise AssertionError(layer.kind)


# ---------------------------------------------------------------------------
# Gradient scaling used by the attack update rule
# ---------------------------------------------------------------------------

def minmax_normalize(raw_grad: Array, gamma: float, epsilon: float) -> Array:
    """Rescale a raw gradient into [0, gamma] by min-max normalization.

    The epsilon in the divisor keeps a constant gradient well-defined: the
    result is then all zeros.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lo = raw_grad.min()
    hi = raw_grad.max()
    return gamma * (raw_grad - lo) / (hi - lo + epsilon)


def signed_normalize(raw_grad: Array, gamma: float, epsilon: float) -> Array:
    """Rescale a raw gradient into [-gamma, gamma], preserving signs.

    Unlike :func:`minmax_normalize` this keeps zero-gradient entries at zero,
    so the accumulated perturbation stays sparse where the loss is flat.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return gamma * raw_grad / (np.abs(raw_grad).max() + epsilon)


# ---------------------------------------------------------------------------
# SFT1 tensor files
# ---------------------------------------------------------------------------

SFT1_MAGIC = b"SFT1"


def write_sft1(path, arr: Array) -> None:
    """Write a tensor as SFT1: ASCII header line, then little-endian float64."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 1:
        raise ValueError("SFT1 tensors must have at least one dimension")
    header = " ".join(["SFT1", str(arr.ndim)] + [str(d) for d in arr.shape])
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii") + b"\n")
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_sft1(path) -> Array:
    """Read an SFT1 tensor file written by :func:`write_sft1`."""
    with open(path, "rb") as fh:
        header = bytearray()
        while True:
            ch = fh.read(1)
            if not ch:
                raise ValueError(f"{path}: truncated SFT1 header")
            if ch == b"\n":
                break
            header.extend(ch)
        parts = header.decode("ascii").split()
        if not parts or parts[0] != "SFT1":
            raise ValueError(f"{path}: not an SFT1 file")
        ndim = int(parts[1])
        dims = [int(d) for d in parts[2:]]
        if len(dims) != ndim or any(d < 1 for d in dims):
            raise ValueError(f"{path}: bad SFT1 dimensions {parts[1:]}")
        count = int(np.prod(dims))
        data = fh.read(8 * count)
        if len(data) != 8 * count:
            raise ValueError(f"{path}: expected {count} float64 values")
        arr = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    require_finite(f"{path}", arr)
    return arr
