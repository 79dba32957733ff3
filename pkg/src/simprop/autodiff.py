"""Dense float32 tensors with tape-based reverse-mode autodiff.

A Tensor is both the value carrier and its tape node: it records parent
tensors plus a closure that pushes the output gradient back to them.
Calling backward() on a scalar root seeds 1.0 and walks the tape in
reverse topological order, accumulating gradients additively over all
paths. Only the operations the segmentation model needs are provided;
the convolution kernels are delegated to simprop.kernels (compiled or
numpy backend).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

COSINE_EPS = np.float32(1e-6)
INSTANCE_NORM_EPS = np.float32(1e-5)
MASKED_POOL_EPS = np.float32(1e-6)

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float32 array plus its reverse-mode tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return self.data.item()

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_f32(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _node(a.data + b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _node(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"div: shape mismatch {a.shape} vs {b.shape}")
    y = a.data / b.data

    def bw(g):
        if a.requires_grad:
            a._accum(g / b.data)
        if b.requires_grad:
            b._accum(-g * y / b.data)

    return _node(y, (a, b), bw)


def add_scalar(a: Tensor, s: float) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g)

    return _node(a.data + np.float32(s), (a,), bw)


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s32 = np.float32(s)

    def bw(g):
        if a.requires_grad:
            a._accum(g * s32)

    return _node(a.data * s32, (a,), bw)


def relu(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _node(np.maximum(a.data, 0), (a,), bw)


def sum_all(a: Tensor) -> Tensor:
    def bw(g):
        if a.requires_grad:
            a._accum(np.full_like(a.data, np.float32(g)))

    return _node(a.data.sum(dtype=np.float32), (a,), bw)


# ---------------------------------------------------------------------------
# convolution and pooling
# ---------------------------------------------------------------------------


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d convolution: x (Cin,H,W), w (Cout,Cin,k,k), b (Cout,)."""
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ValueError("conv2d: expected x (Cin,H,W) and w (Cout,Cin,k,k)")
    cout, cin, k, k2 = w.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"conv2d: kernel must be square with odd size, got {k}x{k2}")
    if stride < 1 or dilation < 1:
        raise ValueError("conv2d: stride and dilation must be >= 1")
    if x.shape[0] != cin:
        raise ValueError(f"conv2d: input has {x.shape[0]} channels, kernel expects {cin}")
    ho = (x.shape[1] + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    wo = (x.shape[2] + 2 * padding - dilation * (k - 1) - 1) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: non-positive output size {ho}x{wo}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {b.shape} != ({cout},)")

    y = kernels.conv2d_forward(x.data, w.data, stride, dilation, padding)
    if b is not None:
        y += b.data[:, None, None]

    def bw(g):
        g = _as_f32(g)
        if x.requires_grad:
            x._accum(kernels.conv2d_backward_input(g, w.data, x.shape, stride, dilation, padding))
        if w.requires_grad:
            w._accum(kernels.conv2d_backward_weight(g, x.data, w.shape, stride, dilation, padding))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(1, 2), dtype=np.float32))

    parents = (x, w) if b is None else (x, w, b)
    return _node(y, parents, bw)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping size x size average pooling (stride == size)."""
    c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"avg_pool2d: {h}x{w} not divisible by {size}")
    y = x.data.reshape(c, h // size, size, w // size, size).mean(axis=(2, 4), dtype=np.float32)
    inv = np.float32(1.0 / (size * size))

    def bw(g):
        gx = np.repeat(np.repeat(g * inv, size, axis=1), size, axis=2)
        x._accum(gx)

    return _node(y, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(C,h,w) -> (C,): per-channel mean over all spatial positions."""
    if x.data.ndim != 3:
        raise ValueError("global_avg_pool: expected (C,h,w)")
    c, h, w = x.shape
    inv = np.float32(1.0 / (h * w))

    def bw(g):
        x._accum(np.broadcast_to((g * inv)[:, None, None], x.shape).astype(np.float32))

    return _node(x.data.mean(axis=(1, 2), dtype=np.float32), (x,), bw)


def masked_avg_pool(x: Tensor, weights: np.ndarray, eps: float = MASKED_POOL_EPS) -> Tensor:
    """Weighted spatial mean of x (C,h,w) with constant weights (h,w) in [0,1].

    out[c] = sum_ij x[c,i,j] * weights[i,j] / (sum_ij weights[i,j] + eps),
    so an all-zero weight map yields the zero vector.
    """
    if x.data.ndim != 3 or weights.shape != x.shape[1:]:
        raise ValueError(f"masked_avg_pool: weights {weights.shape} vs features {x.shape}")
    wt = _as_f32(weights)
    denom = np.float32(wt.sum(dtype=np.float32) + np.float32(eps))
    y = np.tensordot(x.data, wt, axes=([1, 2], [0, 1])) / denom

    def bw(g):
        x._accum(np.multiply.outer(_as_f32(g) / denom, wt))

    return _node(y, (x,), bw)


# ---------------------------------------------------------------------------
# resize / concat / normalization
# ---------------------------------------------------------------------------


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Corner-aligned interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float32)
    for o in range(n_out):
        if n_out == 1:
            src = (n_in - 1) / 2.0
        else:
            src = o * (n_in - 1) / (n_out - 1)
        i0 = int(np.floor(src))
        if i0 >= n_in - 1:
            i0, t = n_in - 1, 0.0
        else:
            t = src - i0
        m[o, i0] += np.float32(1.0 - t)
        if t > 0.0:
            m[o, i0 + 1] += np.float32(t)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Corner-aligned bilinear resize of (C,h,w) to (C,out_h,out_w)."""
    if x.data.ndim != 3:
        raise ValueError("bilinear_resize: expected (C,h,w)")
    if out_h < 1 or out_w < 1:
        raise ValueError("bilinear_resize: output size must be >= 1")
    _, h, w = x.shape
    mh = _resize_matrix(h, out_h)
    mw = _resize_matrix(w, out_w)
    # y[c,o,p] = sum_ij mh[o,i] mw[p,j] x[c,i,j]
    t = np.tensordot(x.data, mh, axes=([1], [1]))  # (C, w, out_h)
    y = np.ascontiguousarray(np.tensordot(t, mw, axes=([1], [1])))  # (C, out_h, out_w)

    def bw(g):
        t2 = np.tensordot(_as_f32(g), mh, axes=([1], [0]))  # (C, out_w, h)
        x._accum(np.ascontiguousarray(np.tensordot(t2, mw, axes=([1], [0]))))  # (C, h, w)

    return _node(y, (x,), bw)


def concat_channels(*xs: Tensor) -> Tensor:
    """Stack operands along the channel axis.

    Accepts (C,h,w) maps, (h,w) single-channel maps, and (C,) vectors; vectors
    are broadcast to (C,h,w) with a constant value per spatial position.
    """
    if not xs:
        raise ValueError("concat_channels: no operands")
    spatial = None
    for x in xs:
        if x.data.ndim == 3:
            spatial = x.shape[1:]
            break
        if x.data.ndim == 2 and spatial is None:
            spatial = x.shape
    if spatial is None:
        raise ValueError("concat_channels: at least one operand must carry spatial dims")
    parts = []
    kinds = []
    for x in xs:
        if x.data.ndim == 3:
            if x.shape[1:] != spatial:
                raise ValueError(f"concat_channels: spatial mismatch {x.shape[1:]} vs {spatial}")
            parts.append(x.data)
            kinds.append(("map", x.shape[0]))
        elif x.data.ndim == 2:
            if x.shape != spatial:
                raise ValueError(f"concat_channels: spatial mismatch {x.shape} vs {spatial}")
            parts.append(x.data[None])
            kinds.append(("plane", 1))
        elif x.data.ndim == 1:
            parts.append(np.broadcast_to(x.data[:, None, None], (x.shape[0],) + spatial))
            kinds.append(("vector", x.shape[0]))
        else:
            raise ValueError(f"concat_channels: unsupported ndim {x.data.ndim}")
    y = np.ascontiguousarray(np.concatenate(parts, axis=0))

    def bw(g):
        off = 0
        for x, (kind, nch) in zip(xs, kinds):
            gp = g[off : off + nch]
            off += nch
            if not x.requires_grad:
                continue
            if kind == "map":
                x._accum(gp)
            elif kind == "plane":
                x._accum(gp[0])
            else:
                x._accum(gp.sum(axis=(1, 2), dtype=np.float32))

    return _node(y, xs, bw)


def instance_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = INSTANCE_NORM_EPS) -> Tensor:
    """Per-channel spatial standardization of (C,h,w) with affine gamma/beta."""
    c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("instance_norm: gamma/beta must have shape (C,)")
    n = h * w
    mu = x.data.mean(axis=(1, 2), keepdims=True, dtype=np.float32)
    var = x.data.var(axis=(1, 2), keepdims=True, dtype=np.float32)
    inv = np.float32(1.0) / np.sqrt(var + np.float32(eps))
    xhat = (x.data - mu) * inv
    y = gamma.data[:, None, None] * xhat + beta.data[:, None, None]

    def bw(g):
        g = _as_f32(g)
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(1, 2), dtype=np.float32))
        if beta.requires_grad:
            beta._accum(g.sum(axis=(1, 2), dtype=np.float32))
        if x.requires_grad:
            gm = g.mean(axis=(1, 2), keepdims=True, dtype=np.float32)
            gxm = (g * xhat).mean(axis=(1, 2), keepdims=True, dtype=np.float32)
            x._accum(gamma.data[:, None, None] * inv * (g - gm - xhat * gxm))

    return _node(y, (x, gamma, beta), bw)


def cosine_sim_map(x: Tensor, z: Tensor, eps: float = COSINE_EPS) -> Tensor:
    """Per-position cosine similarity between feature columns of x (C,h,w) and z (C,)."""
    if x.data.ndim != 3 or z.data.ndim != 1 or x.shape[0] != z.shape[0]:
        raise ValueError(f"cosine_sim_map: features {x.shape} vs probe {z.shape}")
    s = np.tensordot(z.data, x.data, axes=1)  # (h,w)
    nu = np.sqrt((x.data * x.data).sum(axis=0, dtype=np.float32))
    nz = np.float32(np.sqrt((z.data * z.data).sum(dtype=np.float32)))
    d = nu * nz + np.float32(eps)
    y = s / d

    def bw(g):
        g = _as_f32(g)
        nu_safe = np.maximum(nu, np.float32(1e-12))
        nz_safe = max(nz, np.float32(1e-12))
        if x.requires_grad:
            a = g / d
            bcoef = g * s * nz / (nu_safe * d * d)
            x._accum(z.data[:, None, None] * a[None] - x.data * bcoef[None])
        if z.requires_grad:
            a = g / d
            zcoef = np.float32((g * s * nu / (d * d)).sum(dtype=np.float32) / nz_safe)
            z._accum(np.tensordot(x.data, a, axes=([1, 2], [0, 1])) - z.data * zcoef)

    return _node(y, (x, z), bw)


def softmax_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean pixelwise cross-entropy of 2-channel logits against a binary target mask."""
    if logits.data.ndim != 3 or logits.shape[0] != 2:
        raise ValueError("softmax_cross_entropy: expected logits (2,H,W)")
    if target.shape != logits.shape[1:]:
        raise ValueError(f"softmax_cross_entropy: target {target.shape} vs logits {logits.shape}")
    t = np.asarray(target)
    if not np.isin(t, (0, 1)).all():
        raise ValueError("softmax_cross_entropy: target values must be 0 or 1")
    t = t.astype(np.intp)
    n = t.size
    m = logits.data.max(axis=0)
    e = np.exp(logits.data - m[None])
    se = e.sum(axis=0, dtype=np.float32)
    lse = np.log(se) + m
    picked = np.take_along_axis(logits.data, t[None], axis=0)[0]
    loss = np.float32((lse - picked).sum(dtype=np.float32) / n)

    def bw(g):
        probs = e / se[None]
        onehot = np.stack([t == 0, t == 1]).astype(np.float32)
        logits._accum((probs - onehot) * np.float32(g / n))

    return _node(loss, (logits,), bw)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def sgd_step(params: Iterable[Tensor], grads: Iterable[np.ndarray], lr: float) -> None:
    """Plain SGD: p <- p - lr * g, in place. No momentum, no weight decay."""
    lr32 = np.float32(lr)
    for p, g in zip(params, grads, strict=True):
        g = np.asarray(g)
        if g.shape != p.data.shape:
            raise ValueError(f"sgd_step: grad shape {g.shape} != param shape {p.data.shape}")
        p.data -= lr32 * g.astype(np.float32)
