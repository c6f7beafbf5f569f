"""A small reverse-mode autodiff engine over numpy arrays.

Every operation builds a node holding the forward value and a closure that
scatters the node's gradient into its parents. `Tensor.backward()` walks the
graph once in reverse topological order. The op set is deliberately minimal:
exactly what a pillar encoder, a per-pixel sequence decoder, and a focal +
smooth-L1 loss need.

All arithmetic is double precision. Reductions use numpy's row-major order,
so repeated runs on identical inputs are bitwise identical.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError

_NO_OP = None


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """An array plus an optional gradient slot and a backward rule.

    Leaves created with requires_grad=True accumulate into `.grad` across
    backward calls (cleared via `zero_grad` or by the owning store).
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        if self.data.ndim > 4:
            raise ShapeMismatchError(f"tensors are limited to 4 dims, got shape {self.data.shape}")
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = _NO_OP
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A constant view of this value; gradients stop here."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's .grad.

        Seeds with ones, so a non-scalar root computes the gradient of its
        elementwise sum.
        """
        topo = _toposort(self)
        for node in topo:
            if node._parents or node.grad is None:
                # C-contiguous so backward rules may scatter into reshaped views
                node.grad = np.zeros(node.data.shape)
        self.grad = self.grad + np.ones(self.data.shape)
        for node in reversed(topo):
            if node._backward is not _NO_OP:
                node._backward()

    # Operator sugar. Scalars and ndarrays are wrapped as constants.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_wrap(other), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor-by-tensor division is not part of the op set")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data)


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x))


def _node(data, parents) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
    return out


def _toposort(root: Tensor):
    """Parents-first ordering of the subgraph that requires gradients."""
    order = []
    seen = set()
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


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data + b.data, (a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        out._backward = bw
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = _node(a.data * b.data, (a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
        out._backward = bw
    return out


def relu(t: Tensor) -> Tensor:
    out = _node(np.maximum(t.data, 0.0), (t,))
    if out.requires_grad:
        mask = t.data > 0.0
        def bw():
            t.grad += out.grad * mask
        out._backward = bw
    return out


def exp(t: Tensor) -> Tensor:
    out = _node(np.exp(t.data), (t,))
    if out.requires_grad:
        def bw():
            t.grad += out.grad * out.data
        out._backward = bw
    return out


def log(t: Tensor) -> Tensor:
    """Natural log; the gradient denominator is floored to stay finite."""
    out = _node(np.log(t.data), (t,))
    if out.requires_grad:
        def bw():
            t.grad += out.grad / np.maximum(t.data, 1e-300)
        out._backward = bw
    return out


def pow_const(t: Tensor, k: float) -> Tensor:
    """t ** k for constant k. Non-integer k requires positive inputs."""
    k = float(k)
    out = _node(t.data ** k, (t,))
    if out.requires_grad and k != 0.0:
        def bw():
            t.grad += out.grad * k * t.data ** (k - 1.0)
        out._backward = bw
    return out


def clip_value(t: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp; gradient passes through inside [lo, hi], zero outside."""
    out = _node(np.clip(t.data, lo, hi), (t,))
    if out.requires_grad:
        mask = (t.data >= lo) & (t.data <= hi)
        def bw():
            t.grad += out.grad * mask
        out._backward = bw
    return out


def atan2(y: Tensor, x: Tensor) -> Tensor:
    y, x = _wrap(y), _wrap(x)
    out = _node(np.arctan2(y.data, x.data), (y, x))
    if out.requires_grad:
        denom = y.data * y.data + x.data * x.data
        def bw():
            if y.requires_grad:
                y.grad += out.grad * x.data / denom
            if x.requires_grad:
                x.grad += out.grad * (-y.data) / denom
        out._backward = bw
    return out


def huber(t: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise smooth-L1: quadratic within ±delta, linear beyond."""
    delta = float(delta)
    a = np.abs(t.data)
    data = np.where(a <= delta, 0.5 * t.data * t.data, delta * (a - 0.5 * delta))
    out = _node(data, (t,))
    if out.requires_grad:
        slope = np.clip(t.data, -delta, delta)
        def bw():
            t.grad += out.grad * slope
        out._backward = bw
    return out


def tsum(t: Tensor) -> Tensor:
    """Sum of all elements (row-major accumulation)."""
    out = _node(t.data.sum(), (t,))
    if out.requires_grad:
        def bw():
            t.grad += out.grad
        out._backward = bw
    return out


def mean(t: Tensor) -> Tensor:
    if t.data.size == 0:
        raise ShapeMismatchError("mean of an empty tensor")
    return mul(tsum(t), 1.0 / t.data.size)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------

def reshape(t: Tensor, shape) -> Tensor:
    out = _node(t.data.reshape(shape), (t,))
    if out.requires_grad:
        def bw():
            t.grad += out.grad.reshape(t.data.shape)
        out._backward = bw
    return out


def concat(parts, axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = _node(np.concatenate([p.data for p in parts], axis=axis), (*parts,))
    if out.requires_grad:
        sizes = [p.data.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]
        def bw():
            pieces = np.split(out.grad, splits, axis=axis)
            for p, piece in zip(parts, pieces):
                if p.requires_grad:
                    p.grad += piece
        out._backward = bw
    return out


def take_rows(t: Tensor, idx) -> Tensor:
    """Select rows of a 2-D tensor; gradient scatter-adds back."""
    idx = np.asarray(idx, dtype=np.int64)
    if t.data.ndim != 2:
        raise ShapeMismatchError(f"take_rows needs a 2-D tensor, got shape {t.data.shape}")
    out = _node(t.data[idx], (t,))
    if out.requires_grad:
        def bw():
            np.add.at(t.grad, idx, out.grad)
        out._backward = bw
    return out


def take_col(t: Tensor, j: int) -> Tensor:
    """Column j of a 2-D tensor as a 1-D tensor."""
    if t.data.ndim != 2:
        raise ShapeMismatchError(f"take_col needs a 2-D tensor, got shape {t.data.shape}")
    out = _node(t.data[:, j].copy(), (t,))
    if out.requires_grad:
        def bw():
            t.grad[:, j] += out.grad
        out._backward = bw
    return out


def take_per_row(t: Tensor, cols) -> Tensor:
    """Pick element (i, cols[i]) from each row of a 2-D tensor."""
    cols = np.asarray(cols, dtype=np.int64)
    if t.data.ndim != 2 or cols.shape != (t.data.shape[0],):
        raise ShapeMismatchError(
            f"take_per_row needs (N,K) tensor and (N,) indices, got {t.data.shape} and {cols.shape}")
    rows = np.arange(t.data.shape[0])
    out = _node(t.data[rows, cols].copy(), (t,))
    if out.requires_grad:
        def bw():
            np.add.at(t.grad, (rows, cols), out.grad)
        out._backward = bw
    return out


# ---------------------------------------------------------------------------
# Linear algebra and network layers
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = _node(a.data @ b.data, (a, b))
    if out.requires_grad:
        def bw():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        out._backward = bw
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map along the last axis: y[..., o] = sum_i x[..., i] w[i, o] + b[o]."""
    cin, cout = w.data.shape
    if x.data.shape[-1] != cin or b.data.shape != (cout,):
        raise ShapeMismatchError(
            f"linear: input {x.data.shape}, weights {w.data.shape}, bias {b.data.shape}")
    x2 = x.data.reshape(-1, cin)
    y = (x2 @ w.data + b.data).reshape(x.data.shape[:-1] + (cout,))
    out = _node(y, (x, w, b))
    if out.requires_grad:
        def bw():
            g2 = out.grad.reshape(-1, cout)
            if x.requires_grad:
                x.grad += (g2 @ w.data.T).reshape(x.data.shape)
            if w.requires_grad:
                w.grad += x2.T @ g2
            if b.requires_grad:
                b.grad += g2.sum(axis=0)
        out._backward = bw
    return out


def _patches_3x3(x: np.ndarray) -> np.ndarray:
    """im2col for stride-1, zero-padded 3x3 windows: (H,W,Cin) -> (H*W, 9*Cin)."""
    h, w, cin = x.shape
    padded = np.zeros((h + 2, w + 2, cin))
    padded[1:-1, 1:-1] = x
    cols = [padded[di:di + h, dj:dj + w, :] for di in range(3) for dj in range(3)]
    return np.concatenate(cols, axis=-1).reshape(h * w, 9 * cin)


def conv2d_3x3(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, channels-last.

    x: (H, W, Cin); k: (3, 3, Cin, Cout); b: (Cout,).
    """
    if x.data.ndim != 3 or k.data.ndim != 4 or k.data.shape[:2] != (3, 3):
        raise ShapeMismatchError(f"conv2d_3x3: input {x.data.shape}, kernel {k.data.shape}")
    h, w, cin = x.data.shape
    if k.data.shape[2] != cin or b.data.shape != (k.data.shape[3],):
        raise ShapeMismatchError(
            f"conv2d_3x3: input {x.data.shape}, kernel {k.data.shape}, bias {b.data.shape}")
    cout = k.data.shape[3]
    patches = _patches_3x3(x.data)
    y = (patches @ k.data.reshape(9 * cin, cout) + b.data).reshape(h, w, cout)
    out = _node(y, (x, k, b))
    if out.requires_grad:
        def bw():
            g2 = out.grad.reshape(h * w, cout)
            if k.requires_grad:
                k.grad += (patches.T @ g2).reshape(3, 3, cin, cout)
            if b.requires_grad:
                b.grad += g2.sum(axis=0)
            if x.requires_grad:
                # Input gradient is a full correlation of the output gradient
                # with the kernel flipped in both spatial dims and transposed
                # in channels.
                kf = k.data[::-1, ::-1].transpose(0, 1, 3, 2).reshape(9 * cout, cin)
                x.grad += (_patches_3x3(out.grad) @ kf).reshape(h, w, cin)
        out._backward = bw
    return out


def softmax(t: Tensor) -> Tensor:
    """Probabilities along the last axis, stabilized by max subtraction."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _node(s, (t,))
    if out.requires_grad:
        def bw():
            dot = (out.grad * s).sum(axis=-1, keepdims=True)
            t.grad += s * (out.grad - dot)
        out._backward = bw
    return out


def log_softmax(t: Tensor) -> Tensor:
    """log(softmax) along the last axis, computed stably."""
    z = t.data - t.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    data = z - lse
    out = _node(data, (t,))
    if out.requires_grad:
        s = np.exp(data)
        def bw():
            t.grad += out.grad - s * out.grad.sum(axis=-1, keepdims=True)
        out._backward = bw
    return out


def bilinear_sample(m: Tensor, points: np.ndarray) -> Tensor:
    """Sample a (H, W, C) map at continuous (row, col) points, zero outside.

    Integer coordinates land exactly on cell centers. `points` is an (N, 2)
    array of plain values: sample locations are constants of the graph, so
    gradients flow into the map only.
    """
    pts = np.asarray(points, dtype=np.float64)
    if m.data.ndim != 3 or pts.ndim != 2 or pts.shape[1] != 2:
        raise ShapeMismatchError(f"bilinear_sample: map {m.data.shape}, points {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise ValueError("bilinear_sample: non-finite sample coordinates")
    h, w, c = m.data.shape
    r0 = np.floor(pts[:, 0]).astype(np.int64)
    c0 = np.floor(pts[:, 1]).astype(np.int64)
    fr = pts[:, 0] - r0
    fc = pts[:, 1] - c0
    flat = m.data.reshape(h * w, c)
    corners = []
    for dr, dc, wt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr, cc = r0 + dr, c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        idx = np.where(valid, rr * w + cc, 0)
        corners.append((idx, wt * valid))
    data = np.zeros((pts.shape[0], c))
    for idx, wt in corners:
        data += flat[idx] * wt[:, None]
    out = _node(data, (m,))
    if out.requires_grad:
        def bw():
            gflat = m.grad.reshape(h * w, c)
            for idx, wt in corners:
                np.add.at(gflat, idx, out.grad * wt[:, None])
        out._backward = bw
    return out
