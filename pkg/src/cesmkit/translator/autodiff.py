"""Reverse-mode automatic differentiation over numpy arrays.

Only the operations the translator and the toy adversarial step need are
provided: 2-D convolution (any kernel/stride), ReLU, sigmoid, 2x2 max
pooling, nearest-neighbor 2x upsampling, channel concatenation, dropout,
dense matmul, means, log/clamp/abs elementwise, and the L1/L2 and
cross-entropy losses.  Ops build the graph eagerly; ``backward()`` on a
scalar accumulates gradients into every reachable leaf created with
``requires_grad=True``.

Arrays stay in whatever float dtype the leaves carry: float32 for
training, float64 for gradient checking.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    """Array node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_vjps")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._vjps: tuple = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every requiring leaf's ``.grad``."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in order:
            g = node.grad
            if g is None:
                continue
            for parent, vjp in node._vjps:
                pg = vjp(g)
                parent.grad = pg if parent.grad is None else parent.grad + pg

    # Light arithmetic sugar for loss assembly.
    def __add__(self, other):
        return add(self, _ensure(other, self.dtype))

    def __radd__(self, other):
        return add(_ensure(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _ensure(other, self.dtype))

    def __rsub__(self, other):
        return sub(_ensure(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _ensure(other, self.dtype))

    def __rmul__(self, other):
        return mul(_ensure(other, self.dtype), self)

    def __neg__(self):
        return mul(self, _ensure(-1.0, self.dtype))


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=requires_grad)


def _ensure(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, vjps) -> Tensor:
    live = tuple((p, fn) for p, fn in vjps if p.requires_grad)
    out = Tensor(data, requires_grad=bool(live))
    out._vjps = live
    return out


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._vjps:
            stack.append((parent, False))
    order.reverse()  # root first
    return order


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --- elementwise -------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(g, b.data.shape))],
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.data.shape)), (b, lambda g: _unbroadcast(-g, b.data.shape))],
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _node(
        a.data * b.data,
        [
            (a, lambda g: _unbroadcast(g * b.data, a.data.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.data.shape)),
        ],
    )


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0), [(x, lambda g: g * keep)])


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    return _node(y, [(x, lambda g: g * y * (1.0 - y))])


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), [(x, lambda g: g / x.data)])


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _node(np.clip(x.data, lo, hi), [(x, lambda g: g * inside)])


def abs_(x: Tensor) -> Tensor:
    return _node(np.abs(x.data), [(x, lambda g: g * np.sign(x.data))])


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return _node(
        np.asarray(x.data.mean(), dtype=x.dtype),
        [(x, lambda g: np.full_like(x.data, g / n))],
    )


def spatial_mean(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes of an (N, C, H, W) tensor."""
    N, C, H, W = x.data.shape
    return _node(
        x.data.mean(axis=(2, 3)),
        [(x, lambda g: np.broadcast_to(g[:, :, None, None] / (H * W), x.data.shape).astype(x.dtype, copy=True))],
    )


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving units scaled by 1/(1-p)."""
    keep = (rng.random(x.data.shape) >= p).astype(x.dtype) / np.asarray(1.0 - p, dtype=x.dtype)
    return _node(x.data * keep, [(x, lambda g: g * keep)])


# --- structural --------------------------------------------------------

def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * data.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return _node(data, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; gradient routes to the first maximum."""
    N, C, H, W = x.data.shape
    if H % 2 or W % 2:
        raise ValueError(f"maxpool2 needs even spatial dims, got {H}x{W}")
    win = x.data.reshape(N, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(N, C, H // 2, W // 2, 4)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        z = np.zeros_like(flat)
        np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
        return (
            z.reshape(N, C, H // 2, W // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(N, C, H, W)
        )

    return _node(out, [(x, vjp)])


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x upsampling on the spatial axes."""
    N, C, H, W = x.data.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return _node(out, [(x, lambda g: g.reshape(N, C, H, 2, W, 2).sum(axis=(3, 5)))])


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N, C, H, W) with (F, C, kh, kw) filters."""
    N, C, H, W = x.data.shape
    F, C2, kh, kw = w.data.shape
    if C2 != C:
        raise ValueError(f"conv2d channel mismatch: input {C}, filters {C2}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    Ho, Wo = win.shape[2], win.shape[3]
    # (N, L, C*kh*kw) patch matrix
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(N, Ho * Wo, C * kh * kw)
    wm = w.data.reshape(F, C * kh * kw)
    out = (cols @ wm.T).transpose(0, 2, 1).reshape(N, F, Ho, Wo)
    if b is not None:
        out = out + b.data.reshape(1, F, 1, 1)

    def vjp_w(g):
        gm = g.reshape(N, F, Ho * Wo)
        return np.einsum("nfl,nlk->fk", gm, cols).reshape(F, C, kh, kw)

    def vjp_x(g):
        gm = g.reshape(N, F, Ho * Wo).transpose(0, 2, 1)  # (N, L, F)
        dcols = (gm @ wm).reshape(N, Ho, Wo, C, kh, kw).transpose(0, 3, 4, 5, 1, 2)
        dxp = np.zeros_like(xp)
        for ky in range(kh):
            for kx in range(kw):
                dxp[:, :, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride] += dcols[
                    :, :, ky, kx
                ]
        if padding:
            return dxp[:, :, padding:-padding, padding:-padding]
        return dxp

    vjps = [(x, vjp_x), (w, vjp_w)]
    if b is not None:
        vjps.append((b, lambda g: g.sum(axis=(0, 2, 3))))
    return _node(out, vjps)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    return _node(
        x.data @ w.data,
        [(x, lambda g: g @ w.data.T), (w, lambda g: x.data.T @ g)],
    )


# --- losses ------------------------------------------------------------

def l1_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean absolute error; subgradient 0 at exact zeros."""
    diff = pred.data - target
    n = diff.size
    return _node(
        np.asarray(np.abs(diff).mean(), dtype=pred.dtype),
        [(pred, lambda g: (g / n) * np.sign(diff))],
    )


def l2_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error."""
    diff = pred.data - target
    n = diff.size
    return _node(
        np.asarray((diff * diff).mean(), dtype=pred.dtype),
        [(pred, lambda g: (g / n) * 2.0 * diff)],
    )


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer class labels."""
    z = logits.data
    n = z.shape[0]
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    loss = (lse - z[np.arange(n), labels]).mean()

    def vjp(g):
        p = np.exp(z - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return (g / n) * p

    return _node(np.asarray(loss, dtype=logits.dtype), [(logits, vjp)])
