"""Small reverse-mode autodiff over numpy arrays.

Every op records a closure that maps the output gradient to gradients of its
parents. ``Tensor.backward`` walks the graph in reverse topological order.
Only what the model needs is here; broadcasting follows numpy and gradients
are summed back to the operand shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

NEG_INF = -np.inf


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, name=None):
        self.data = np.asarray(data, dtype=np.float64) if not isinstance(data, np.ndarray) or data.dtype != np.float64 else data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every tensor that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def _make(data, parents, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward)
    return Tensor(data)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _make(np.maximum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _make(np.minimum(a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(g * pick_a, sa), _unbroadcast(g * ~pick_a, sb)))


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(np.where(cond, a.data, b.data), (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)))


# ---------------------------------------------------------------- reductions / shape

def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return sum_(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def take(a, idx) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(a.data[idx], (a,), backward)


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(tensors: Sequence[Tensor], axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes (if any) are treated as a batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward)


def masked_softmax(logits, additive_mask) -> Tensor:
    """Softmax over the last axis of ``logits + additive_mask``.

    ``additive_mask`` holds 0 or -inf. Rows masked everywhere fall back to the
    unmasked softmax of that row.
    """
    logits = as_tensor(logits)
    mask = np.asarray(additive_mask.data if isinstance(additive_mask, Tensor) else additive_mask, dtype=np.float64)
    mask = np.broadcast_to(mask, logits.shape)
    dead = np.all(np.isneginf(mask), axis=-1, keepdims=True)
    if dead.any():
        mask = np.where(dead, 0.0, mask)
    z = logits.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (logits,), backward)


def softmax(logits) -> Tensor:
    return masked_softmax(logits, np.zeros(1))


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match last axis {c}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward)


# ---------------------------------------------------------------- spatial ops

def conv2d(x, w, b, padding: int = 1) -> Tensor:
    """Stride-1 convolution of an H x W x Cin grid with a kh x kw x Cin x Cout kernel."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 3 or w.ndim != 4 or x.shape[2] != w.shape[2] or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: input {x.shape}, kernel {w.shape}, bias {b.shape} are inconsistent")
    H, W, cin = x.shape
    kh, kw, _, cout = w.shape
    xp = np.pad(x.data, ((padding, padding), (padding, padding), (0, 0)))
    Ho, Wo = xp.shape[0] - kh + 1, xp.shape[1] - kw + 1
    # cols[y, x, i, j, c] = xp[y+i, x+j, c]
    cols = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 4, 2)).reshape(Ho * Wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat + b.data).reshape(Ho, Wo, cout)

    def backward(g):
        g2 = g.reshape(Ho * Wo, cout)
        gw = (cols.T @ g2).reshape(w.shape)
        gb = g2.sum(axis=0)
        gcols = (g2 @ wmat.T).reshape(Ho, Wo, kh, kw, cin)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[i:i + Ho, j:j + Wo] += gcols[:, :, i, j]
        gx = gxp[padding:padding + H, padding:padding + W] if padding else gxp
        return gx, gw, gb

    return _make(out, (x, w, b), backward)


def avg_pool(x, s: int) -> Tensor:
    """Non-overlapping s x s average pooling of an H x W x C grid."""
    x = as_tensor(x)
    if s == 1:
        return x
    H, W, C = x.shape
    if H % s or W % s:
        raise ShapeError(f"avg_pool: extents {H}x{W} not divisible by {s}")
    r = x.reshape(H // s, s, W // s, s, C)
    return mean(r, axis=(1, 3))


def bilinear_sample(field, points) -> Tensor:
    """Sample an H x W x C field at N continuous (x, y) points, clamped to the grid.

    Differentiable in both the field values and the point coordinates.
    """
    field, points = as_tensor(field), as_tensor(points)
    H, W, C = field.shape
    px = np.clip(points.data[:, 0], 0.0, W - 1)
    py = np.clip(points.data[:, 1], 0.0, H - 1)
    # non-finite points index cell 0 and poison the output through the weights
    x0 = np.floor(np.nan_to_num(px)).astype(int)
    y0 = np.floor(np.nan_to_num(py)).astype(int)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = (px - x0)[:, None]
    wy = (py - y0)[:, None]
    f = field.data
    f00, f01, f10, f11 = f[y0, x0], f[y0, x1], f[y1, x0], f[y1, x1]
    top = f00 * (1 - wx) + f01 * wx
    bot = f10 * (1 - wx) + f11 * wx
    out = top * (1 - wy) + bot * wy
    # clamped coordinates carry no gradient
    in_x = ((points.data[:, 0] >= 0) & (points.data[:, 0] <= W - 1))[:, None]
    in_y = ((points.data[:, 1] >= 0) & (points.data[:, 1] <= H - 1))[:, None]

    def backward(g):
        gf = np.zeros_like(f)
        np.add.at(gf, (y0, x0), g * (1 - wx) * (1 - wy))
        np.add.at(gf, (y0, x1), g * wx * (1 - wy))
        np.add.at(gf, (y1, x0), g * (1 - wx) * wy)
        np.add.at(gf, (y1, x1), g * wx * wy)
        dx = ((f01 - f00) * (1 - wy) + (f11 - f10) * wy) * g * in_x
        dy = (bot - top) * g * in_y
        gp = np.stack([dx.sum(axis=1), dy.sum(axis=1)], axis=1)
        return gf, gp

    return _make(out, (field, points), backward)


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.op_name:<32s} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} {status}"


def grad_check(op: Callable[..., Tensor], inputs: Sequence, h: float = 1e-6, tol: float = 1e-5,
               name: str | None = None, seed: int = 0, wrt: Sequence[int] | None = None) -> GradCheckReport:
    """Compare the analytic gradient of ``op`` with central differences.

    The op output is reduced to a scalar through a fixed random weighting so
    that structural cancellations (softmax rows sum to one) do not hide errors.
    The relative error per element is |a - n| / max(|a|, |n|, 1e-8).
    """
    name = name or getattr(op, "__name__", "op")
    if not 0 < h <= 1e-3:
        raise ValueError(f"h must lie in (0, 1e-3], got {h}")
    arrays = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise ValueError(f"{name}: grad_check inputs must be finite")
    wrt = range(len(arrays)) if wrt is None else wrt

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*leaves)
    weights = np.random.default_rng(seed).uniform(0.5, 1.5, size=out.shape)
    (out * weights).sum().backward()

    worst = 0.0
    for k in wrt:
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arrays[k])
        if not np.all(np.isfinite(analytic)):
            return GradCheckReport(name, float("inf"), tol, False)
        numeric = np.zeros_like(arrays[k])
        flat = arrays[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            # copies: an op may hand back a view of its input
            plus = np.array(op(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig - h
            minus = np.array(op(*[Tensor(a) for a in arrays]).data)
            flat[i] = orig
            # difference before reduction keeps round-off local to each output
            numeric.reshape(-1)[i] = np.sum(weights * (plus - minus)) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
        err = np.max(np.abs(analytic - numeric) / denom) if analytic.size else 0.0
        worst = max(worst, float(err))
    return GradCheckReport(name, worst, tol, worst <= tol)
