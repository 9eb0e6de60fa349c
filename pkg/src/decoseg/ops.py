"""Differentiable numeric ops on :class:`~decoseg.engine.Tensor`.

Maps use the batch x channel x height x width layout, matrices are
rows x cols. Every op validates shapes, computes its forward value with
numpy and records a backward closure on the active graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Tensor, as_tensor, emit

__all__ = [
    "SwitchMap",
    "conv2d",
    "deconv2d",
    "maxpool2d",
    "unpool2d",
    "relu",
    "gate",
    "sigmoid",
    "fully_connected",
    "flatten",
    "reshape",
    "concat_channels",
    "slice_channels",
    "softmax_channels",
    "scale",
    "sum_all",
    "sigmoid_cross_entropy",
    "pixelwise_softmax_loss",
    "conv_output_size",
    "deconv_output_size",
]


def _req(t: Tensor) -> bool:
    return isinstance(t, Tensor) and t.requires_grad


def _check_rank(t: Tensor, rank: int, what: str) -> None:
    if t.ndim != rank:
        raise ValueError(f"{what} must have rank {rank}, got shape {t.shape}")


# --------------------------------------------------------------------------
# convolution helpers (pure numpy)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def deconv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size - 1) * stride - 2 * pad + k


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    """Contiguous b x (c k k) x (oh ow) patch matrix."""
    b, c = x.shape[:2]
    xp = _pad(x, pad)
    cols = np.empty((b, c, k, k, oh, ow))
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i : i + hs : stride, j : j + ws : stride]
    return cols.reshape(b, c * k * k, oh * ow)


def _col2im(cols: np.ndarray, c: int, k: int, stride: int, pad: int, oh: int, ow: int,
            in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back onto the plane."""
    b = cols.shape[0]
    h, w = in_hw
    cols = cols.reshape(b, c, k, k, oh, ow)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    hs, ws = stride * (oh - 1) + 1, stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, :, i, j]
    if pad:
        dxp = dxp[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(dxp)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride, pad)
    ow = conv_output_size(x.shape[3], k, stride, pad)
    cols = _im2col(x, k, stride, pad, oh, ow)
    out = np.matmul(w.reshape(co, ci * k * k), cols)  # b co (oh ow)
    return out.reshape(x.shape[0], co, oh, ow)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, pad: int,
                     in_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of ``_conv_forward`` w.r.t. its input (col2im)."""
    b, co, oh, ow = g.shape
    ci, k = w.shape[1], w.shape[2]
    cols = np.matmul(w.reshape(co, ci * k * k).T, g.reshape(b, co, oh * ow))
    return _col2im(cols, ci, k, stride, pad, oh, ow, in_hw)


def _conv_weight_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    b, co, oh, ow = g.shape
    ci = x.shape[1]
    cols = _im2col(x, k, stride, pad, oh, ow)
    dw = np.matmul(g.reshape(b, co, oh * ow), cols.transpose(0, 2, 1)).sum(axis=0)
    return dw.reshape(co, ci, k, k)


def _check_conv_args(x: Tensor, w: Tensor, b: Tensor, stride: int, pad: int,
                     in_axis: int, out_axis: int, name: str) -> None:
    _check_rank(x, 4, f"{name} input")
    _check_rank(w, 4, f"{name} weight")
    if stride < 1:
        raise ValueError(f"{name}: stride must be positive, got {stride}")
    if pad < 0:
        raise ValueError(f"{name}: pad must be nonnegative, got {pad}")
    if w.shape[2] != w.shape[3]:
        raise ValueError(f"{name}: kernel must be square, got {w.shape[2]}x{w.shape[3]}")
    if x.shape[1] != w.shape[in_axis]:
        raise ValueError(
            f"{name}: input channels {x.shape[1]} do not match weight dimension "
            f"{in_axis} ({w.shape[in_axis]})")
    if b.shape != (w.shape[out_axis],):
        raise ValueError(
            f"{name}: bias shape {b.shape} does not match output channels {w.shape[out_axis]}")


# --------------------------------------------------------------------------
# convolution ops


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded cross-correlation. ``weight`` is c_out x c_in x k x k."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_conv_args(x, weight, bias, stride, pad, 1, 0, "conv2d")
    k = weight.shape[2]
    h, w = x.shape[2], x.shape[3]
    if k > h + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} exceeds padded height {h + 2 * pad}")
    if k > w + 2 * pad:
        raise ValueError(f"conv2d: kernel {k} exceeds padded width {w + 2 * pad}")

    out = _conv_forward(x.data, weight.data, stride, pad)
    out += bias.data[None, :, None, None]

    def backward(g):
        dx = _conv_input_grad(g, weight.data, stride, pad, (h, w)) if _req(x) else None
        dw = _conv_weight_grad(x.data, g, k, stride, pad) if _req(weight) else None
        db = g.sum(axis=(0, 2, 3)) if _req(bias) else None
        return dx, dw, db

    return emit("conv2d", (x, weight, bias), out, backward)


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution, the exact adjoint of :func:`conv2d`.

    ``weight`` is c_in x c_out x k x k, i.e. the weight of the convolution
    this op transposes. Output size is ``(h - 1) * stride - 2 * pad + k``.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_conv_args(x, weight, bias, stride, pad, 0, 1, "deconv2d")
    k = weight.shape[2]
    oh = deconv_output_size(x.shape[2], k, stride, pad)
    ow = deconv_output_size(x.shape[3], k, stride, pad)
    if oh < 1 or ow < 1:
        raise ValueError(f"deconv2d: padding {pad} leaves an empty output ({oh}x{ow})")

    out = _conv_input_grad(x.data, weight.data, stride, pad, (oh, ow))
    out += bias.data[None, :, None, None]

    def backward(g):
        dx = _conv_forward(g, weight.data, stride, pad) if _req(x) else None
        dw = _conv_weight_grad(g, x.data, k, stride, pad) if _req(weight) else None
        db = g.sum(axis=(0, 2, 3)) if _req(bias) else None
        return dx, dw, db

    return emit("deconv2d", (x, weight, bias), out, backward)


# --------------------------------------------------------------------------
# pooling


@dataclass(frozen=True)
class SwitchMap:
    """Argmax locations recorded by max-pooling.

    ``indices[b, c, i, j]`` is the flat (row-major) index into the pooled
    input plane of size ``input_hw`` that won window ``(i, j)``.
    """

    indices: np.ndarray
    input_hw: tuple[int, int]
    kernel: int
    stride: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indices.shape

    def take(self, batch_index) -> "SwitchMap":
        """Select (and possibly repeat) batch entries."""
        return SwitchMap(self.indices[np.asarray(batch_index)], self.input_hw,
                         self.kernel, self.stride)


def _scatter(values: np.ndarray, idx: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    b, c = values.shape[:2]
    plane = hw[0] * hw[1]
    flat = idx.reshape(b * c, -1) + (np.arange(b * c) * plane)[:, None]
    out = np.bincount(flat.ravel(), weights=values.ravel(), minlength=b * c * plane)
    return out.reshape(b, c, hw[0], hw[1])


def _gather(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b, c = g.shape[:2]
    picked = np.take_along_axis(g.reshape(b * c, -1), idx.reshape(b * c, -1), axis=1)
    return picked.reshape(idx.shape)


def maxpool2d(x: Tensor, k: int = 2, stride: int | None = None) -> tuple[Tensor, SwitchMap]:
    """Max-pool with switch recording; ties go to the smallest flat index."""
    x = as_tensor(x)
    _check_rank(x, 4, "maxpool2d input")
    stride = k if stride is None else stride
    h, w = x.shape[2], x.shape[3]
    if k < 1 or stride < 1:
        raise ValueError(f"maxpool2d: kernel and stride must be positive, got {k}, {stride}")
    if k > h or k > w:
        raise ValueError(f"maxpool2d: kernel {k} larger than input {h}x{w}")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    b, c = x.shape[:2]
    win = _im2col(x.data, k, stride, 0, oh, ow).reshape(b, c, k * k, oh, ow)
    local = win.argmax(axis=2)
    out = np.take_along_axis(win, local[:, :, None], axis=2)[:, :, 0]
    rows = np.arange(oh)[:, None] * stride + local // k
    cols = np.arange(ow)[None, :] * stride + local % k
    switches = SwitchMap(rows * w + cols, (h, w), k, stride)

    def backward(g):
        return (_scatter(g, switches.indices, (h, w)),)

    return emit("maxpool2d", (x,), out, backward), switches


def unpool2d(x: Tensor, switches: SwitchMap, out_h: int, out_w: int) -> Tensor:
    """Place each value at its switch location; every other cell is zero."""
    x = as_tensor(x)
    _check_rank(x, 4, "unpool2d input")
    if switches.shape != x.shape:
        raise ValueError(f"unpool2d: switch shape {switches.shape} does not match input {x.shape}")
    if switches.input_hw != (out_h, out_w):
        raise ValueError(
            f"unpool2d: switches were recorded on a {switches.input_hw} map, "
            f"asked to unpool to {(out_h, out_w)}")
    out = _scatter(x.data, switches.indices, (out_h, out_w))

    def backward(g):
        return (_gather(g, switches.indices),)

    return emit("unpool2d", (x,), out, backward)


# --------------------------------------------------------------------------
# elementwise and shape ops


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return emit("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def gate(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a fixed 0/1 mask; relu with a frozen activation pattern."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != x.shape:
        raise ValueError(f"gate: mask shape {mask.shape} does not match input {x.shape}")
    return emit("gate", (x,), x.data * mask, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` of shape out x in."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    _check_rank(x, 2, "fully_connected input")
    _check_rank(weight, 2, "fully_connected weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"fully_connected: input width {x.shape[1]} does not match weight columns "
            f"{weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise ValueError(f"fully_connected: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return (
            g @ weight.data if _req(x) else None,
            g.T @ x.data if _req(weight) else None,
            g.sum(axis=0) if _req(bias) else None,
        )

    return emit("fully_connected", (x, weight, bias), out, backward)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)
    return emit("reshape", (x,), out, lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    """Collapse everything but the batch axis."""
    return reshape(x, (x.shape[0], -1))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_rank(a, 4, "concat_channels first input")
    _check_rank(b, 4, "concat_channels second input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(
            f"concat_channels: batch/spatial dims differ: {a.shape} vs {b.shape}")
    ca = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return emit("concat_channels", (a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    _check_rank(x, 4, "slice_channels input")
    if not 0 <= start < stop <= x.shape[1]:
        raise ValueError(f"slice_channels: bad range [{start}, {stop}) for {x.shape[1]} channels")
    src = x.shape

    def backward(g):
        dx = np.zeros(src)
        dx[:, start:stop] = g
        return (dx,)

    return emit("slice_channels", (x,), x.data[:, start:stop].copy(), backward)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1, independently at every pixel."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError(f"softmax_channels needs a channel axis, got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return emit("softmax_channels", (x,), p, backward)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = float(factor)
    return emit("scale", (x,), x.data * factor, lambda g: (g * factor,))


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return emit("sum_all", (x,), np.asarray(x.data.sum()), lambda g: (np.full(src, float(g)),))


# --------------------------------------------------------------------------
# losses


def _labels_array(labels, shape, what: str) -> np.ndarray:
    y = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64)
    if y.shape != shape:
        raise ValueError(f"{what} shape {y.shape} does not match {shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"{what} must be binary (0/1)")
    return y


def sigmoid_cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(scores)`` against 0/1 labels.

    Uses ``max(s, 0) - s*y + log1p(exp(-|s|))`` so large logits are safe.
    """
    scores = as_tensor(scores)
    _check_rank(scores, 2, "sigmoid_cross_entropy scores")
    y = _labels_array(labels, scores.shape, "labels")
    s = scores.data
    n = s.size
    loss = (np.maximum(s, 0.0) - s * y + np.log1p(np.exp(-np.abs(s)))).sum() / n

    def backward(g):
        return ((_sigmoid(s) - y) * (float(g) / n),)

    return emit("sigmoid_cross_entropy", (scores,), np.asarray(loss), backward)


def pixelwise_softmax_loss(logits: Tensor, mask) -> Tensor:
    """Mean per-pixel softmax loss for figure/ground logits.

    Channel 0 is foreground, channel 1 background; ``mask`` is 1 on
    foreground pixels.
    """
    logits = as_tensor(logits)
    _check_rank(logits, 4, "pixelwise_softmax_loss logits")
    if logits.shape[1] != 2:
        raise ValueError(f"pixelwise_softmax_loss expects 2 channels, got {logits.shape[1]}")
    b, _, h, w = logits.shape
    m = _labels_array(mask, (b, h, w), "mask")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = (zmax + np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)))[:, 0]
    true_logit = np.where(m == 1, z[:, 0], z[:, 1])
    n = b * h * w
    loss = (lse - true_logit).sum() / n

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[:, 0] -= m
        p[:, 1] -= 1.0 - m
        return (p * (float(g) / n),)

    return emit("pixelwise_softmax_loss", (logits,), np.asarray(loss), backward)
