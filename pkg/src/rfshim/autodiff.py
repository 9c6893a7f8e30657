"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`TapeTensor` holds a value, a gradient slot of the same shape, and
links to its parents. :func:`backward` walks the graph once in reverse
topological order, so shared subexpressions accumulate gradient from every
consumer exactly once.

The primitive set is exactly what the network builders need: 2-D convolution
(1x1 or 3x3, stride 1 or 2, "same" padding), ReLU, elementwise add,
per-channel affine, global average pooling, a dense layer, and the logistic
function. Feature maps are laid out ``(batch, channels, height, width)``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError


class TapeTensor:
    """Array value plus gradient slot and parent links for the reverse pass."""

    __slots__ = ("values", "grad", "parents")

    def __init__(self, values, parents=()):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        # parents: tuple of (TapeTensor, pull) where pull(grad_out) returns
        # this node's gradient contribution to that parent.
        self.parents = tuple(parents)

    @property
    def shape(self):
        return self.values.shape


def leaf(values) -> TapeTensor:
    """Graph input (parameter or data); gradients accumulate here."""
    return TapeTensor(values)


def backward(output: TapeTensor, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients of ``output`` into every reachable node.

    ``seed`` defaults to ones (the usual choice for a scalar loss). Each node
    is visited exactly once, in reverse topological order.
    """
    if seed is None:
        seed = np.ones_like(output.values)
    seed = np.asarray(seed, dtype=np.float64)
    if seed.shape != output.values.shape:
        raise InvalidArgumentError("seed shape must match the output shape")

    order: list[TapeTensor] = []
    visited: set[int] = set()
    stack: list[tuple[TapeTensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    for node in order:
        node.grad = np.zeros_like(node.values)
    output.grad = seed.copy()
    for node in reversed(order):
        if not node.parents:
            continue
        g = node.grad
        for parent, pull in node.parents:
            parent.grad += pull(g)


def add(x: TapeTensor, y: TapeTensor) -> TapeTensor:
    if x.values.shape != y.values.shape:
        raise InvalidArgumentError(
            f"add shapes differ: {x.values.shape} vs {y.values.shape}"
        )
    return TapeTensor(
        x.values + y.values,
        parents=((x, lambda g: g), (y, lambda g: g)),
    )


def relu(x: TapeTensor) -> TapeTensor:
    keep = x.values > 0
    return TapeTensor(
        np.where(keep, x.values, 0.0),
        parents=((x, lambda g: g * keep),),
    )


def sigmoid(x: TapeTensor) -> TapeTensor:
    out = sigmoid_values(x.values)
    return TapeTensor(out, parents=((x, lambda g: g * out * (1.0 - out)),))


def sigmoid_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic."""
    pos = x >= 0
    out = np.empty_like(x, dtype=np.float64)
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _conv_geometry(x_shape, k_shape, stride):
    b, cin, h, w = x_shape
    cout, cin_k, kh, kw = k_shape
    if cin != cin_k:
        raise InvalidArgumentError(
            f"conv input has {cin} channels but kernels expect {cin_k}"
        )
    if kh != kw or kh not in (1, 3):
        raise InvalidArgumentError("kernels must be 1x1 or 3x3")
    if stride not in (1, 2):
        raise InvalidArgumentError("stride must be 1 or 2")
    pad = kh // 2
    hout = (h + 2 * pad - kh) // stride + 1
    wout = (w + 2 * pad - kw) // stride + 1
    if hout < 1 or wout < 1:
        raise InvalidArgumentError("input too small for this convolution")
    return pad, hout, wout


def conv2d_values(x: np.ndarray, kernels: np.ndarray, stride: int = 1) -> np.ndarray:
    """Forward convolution on plain arrays (shared with fast inference).

    Accumulates in (Cout, B, H, W) layout so every partial sum is a
    contiguous BLAS product; one transpose at the end restores (B, Cout, ...).
    """
    pad, hout, wout = _conv_geometry(x.shape, kernels.shape, stride)
    b, cin, h, w = x.shape
    cout, _, kh, kw = kernels.shape
    if pad:
        xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = x
    acc = np.zeros((cout, b, hout, wout), dtype=x.dtype)
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[
                :, :, dy : dy + stride * (hout - 1) + 1 : stride,
                dx : dx + stride * (wout - 1) + 1 : stride,
            ]
            # (Cout, Cin) x (B, Cin, Hout, Wout) -> (Cout, B, Hout, Wout)
            acc += np.tensordot(kernels[:, :, dy, dx], sl, axes=(1, 1))
    return np.ascontiguousarray(acc.transpose(1, 0, 2, 3))


def conv2d(x: TapeTensor, kernels: TapeTensor, stride: int = 1) -> TapeTensor:
    """2-D convolution with "same" padding; stride 2 halves the map (round up)."""
    pad, hout, wout = _conv_geometry(x.values.shape, kernels.values.shape, stride)
    b, cin, h, w = x.values.shape
    cout, _, kh, kw = kernels.values.shape
    if pad:
        xp = np.zeros((b, cin, h + 2 * pad, w + 2 * pad))
        xp[:, :, pad : pad + h, pad : pad + w] = x.values
    else:
        xp = x.values
    kv = kernels.values
    out = np.zeros((b, cout, hout, wout))
    for dy in range(kh):
        for dx in range(kw):
            sl = xp[
                :, :, dy : dy + stride * (hout - 1) + 1 : stride,
                dx : dx + stride * (wout - 1) + 1 : stride,
            ]
            out += np.tensordot(kv[:, :, dy, dx], sl, axes=(1, 1)).transpose(1, 0, 2, 3)

    def pull_x(g):
        gxp = np.zeros_like(xp)
        for dy in range(kh):
            for dx in range(kw):
                gxp[
                    :, :, dy : dy + stride * (hout - 1) + 1 : stride,
                    dx : dx + stride * (wout - 1) + 1 : stride,
                ] += np.tensordot(kv[:, :, dy, dx], g, axes=(0, 1)).transpose(1, 0, 2, 3)
        if pad:
            return gxp[:, :, pad : pad + h, pad : pad + w]
        return gxp

    def pull_k(g):
        gk = np.zeros_like(kv)
        for dy in range(kh):
            for dx in range(kw):
                sl = xp[
                    :, :, dy : dy + stride * (hout - 1) + 1 : stride,
                    dx : dx + stride * (wout - 1) + 1 : stride,
                ]
                gk[:, :, dy, dx] = np.tensordot(g, sl, axes=([0, 2, 3], [0, 2, 3]))
        return gk

    return TapeTensor(out, parents=((x, pull_x), (kernels, pull_k)))


def affine_channel(x: TapeTensor, scale: TapeTensor, bias: TapeTensor) -> TapeTensor:
    """Per-channel ``x * scale + bias`` on (B, C, H, W) maps."""
    b, c, h, w = x.values.shape
    if scale.values.shape != (c,) or bias.values.shape != (c,):
        raise InvalidArgumentError("scale and bias must be (channels,)")
    sv = scale.values[None, :, None, None]
    out = x.values * sv + bias.values[None, :, None, None]
    return TapeTensor(
        out,
        parents=(
            (x, lambda g: g * sv),
            (scale, lambda g: np.einsum("bchw,bchw->c", g, x.values)),
            (bias, lambda g: g.sum(axis=(0, 2, 3))),
        ),
    )


def flatten(x: TapeTensor) -> TapeTensor:
    """(B, C, H, W) -> (B, C*H*W), preserving batch order."""
    if x.values.ndim != 4:
        raise InvalidArgumentError("flatten expects (B, C, H, W)")
    shape = x.values.shape
    out = x.values.reshape(shape[0], -1)
    return TapeTensor(out, parents=((x, lambda g: g.reshape(shape)),))


def global_avg_pool(x: TapeTensor) -> TapeTensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    if x.values.ndim != 4:
        raise InvalidArgumentError("global_avg_pool expects (B, C, H, W)")
    b, c, h, w = x.values.shape
    out = x.values.mean(axis=(2, 3))

    def pull(g):
        return np.broadcast_to(g[:, :, None, None] / (h * w), (b, c, h, w)).copy()

    return TapeTensor(out, parents=((x, pull),))


def dense(x: TapeTensor, weight: TapeTensor, bias: TapeTensor) -> TapeTensor:
    """(B, Din) x (Dout, Din)^T + (Dout,) -> (B, Dout)."""
    if x.values.ndim != 2 or weight.values.ndim != 2:
        raise InvalidArgumentError("dense expects (B, Din) input and (Dout, Din) weight")
    if x.values.shape[1] != weight.values.shape[1]:
        raise InvalidArgumentError(
            f"dense input width {x.values.shape[1]} != weight width "
            f"{weight.values.shape[1]}"
        )
    if bias.values.shape != (weight.values.shape[0],):
        raise InvalidArgumentError("dense bias must be (Dout,)")
    out = x.values @ weight.values.T + bias.values
    return TapeTensor(
        out,
        parents=(
            (x, lambda g: g @ weight.values),
            (weight, lambda g: g.T @ x.values),
            (bias, lambda g: g.sum(axis=0)),
        ),
    )
