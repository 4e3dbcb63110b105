"""Dense float32 tensors with reverse-mode automatic differentiation.

A module-global tape records every operation whose inputs require gradients;
``backward`` walks the tape once in reverse execution order. The op set is
exactly what the footprint networks need: 2-D convolution, batch norm, ReLU,
sigmoid, 2x2 max pooling, nearest-neighbor upsampling, and the elementwise /
reduction arithmetic the losses are built from.

Heavy kernels dispatch through ``freg.kernels`` (compiled core or numpy
fallback). Reductions accumulate in float64 and store float32 results.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class UninitializedStatsError(RuntimeError):
    """Eval-mode batch norm was called before any training step."""


class Tensor:
    """A float32 n-d array plus an optional gradient buffer and tape handle."""

    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = arr.copy(order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A tape-free view sharing this tensor's storage."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._node = None
        return out

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; non-Tensor operands are constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return rsub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("out", "parents", "bw")

    def __init__(self, out, parents, bw):
        self.out = out
        self.parents = parents
        self.bw = bw


@dataclass
class Graph:
    """Ordered record of executed operations; execution order is the
    topological order, and backward traverses it exactly once in reverse."""

    nodes: list = field(default_factory=list)

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)


_GRAPH = Graph()
_GRAD_ENABLED = True


def graph() -> Graph:
    return _GRAPH


def clear_graph() -> None:
    """Drop all recorded nodes. Invalidates pending backward calls."""
    _GRAPH.clear()


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _record(out: Tensor, parents: tuple, bw) -> None:
    if not _GRAD_ENABLED:
        return
    if not any(p.requires_grad for p in parents):
        return
    out.requires_grad = True
    node = _Node(out, parents, bw)
    out._node = node
    _GRAPH.nodes.append(node)


def _persist(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float32, copy=True)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor that
    contributed to ``loss``. Repeated calls accumulate additively."""
    if loss.data.size != 1:
        raise ShapeError("backward", f"loss must be scalar, got shape {loss.data.shape}")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        if loss.requires_grad:
            _persist(loss, seed)
        return
    nodes = _GRAPH.nodes
    try:
        start = nodes.index(loss._node)
    except ValueError:
        raise RuntimeError("backward: loss graph was cleared") from None
    flows: dict[int, np.ndarray] = {id(loss): seed}
    holders: dict[int, Tensor] = {id(loss): loss}
    for i in range(start, -1, -1):
        node = nodes[i]
        g = flows.pop(id(node.out), None)
        if g is None:
            continue
        holders.pop(id(node.out), None)
        _persist(node.out, g)
        for parent, pg in zip(node.parents, node.bw(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg
                holders[key] = parent
    for key, g in flows.items():
        _persist(holders[key], g)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


def _const(x, op: str) -> np.ndarray:
    try:
        return np.asarray(x, dtype=np.float32)
    except (TypeError, ValueError) as exc:
        raise ShapeError(op, f"operand is not numeric: {x!r}") from exc


def _binary_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    # constants may broadcast, but never change the output shape
    if np.broadcast_shapes(a.shape, b.shape) != a.shape:
        raise ShapeError(op, f"operand shape {b.shape} does not fit {a.shape}")


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError("add", f"{a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data + b.data)
        _record(out, (a, b), lambda g: (g, g))
        return out
    c = _const(b, "add")
    _binary_shapes("add", a.data, c)
    out = Tensor(a.data + c)
    _record(out, (a,), lambda g: (g,))
    return out


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError("sub", f"{a.data.shape} vs {b.data.shape}")
        out = Tensor(a.data - b.data)
        _record(out, (a, b), lambda g: (g, -g))
        return out
    c = _const(b, "sub")
    _binary_shapes("sub", a.data, c)
    out = Tensor(a.data - c)
    _record(out, (a,), lambda g: (g,))
    return out


def rsub(a: Tensor, b) -> Tensor:
    """b - a with b constant."""
    c = _const(b, "rsub")
    _binary_shapes("rsub", a.data, c)
    out = Tensor(c - a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def neg(a: Tensor) -> Tensor:
    out = Tensor(-a.data)
    _record(out, (a,), lambda g: (-g,))
    return out


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError("mul", f"{a.data.shape} vs {b.data.shape}")
        ad, bd = a.data, b.data
        out = Tensor(ad * bd)
        _record(out, (a, b), lambda g: (g * bd, g * ad))
        return out
    c = _const(b, "mul")
    _binary_shapes("mul", a.data, c)
    out = Tensor(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def div(a: Tensor, b) -> Tensor:
    if isinstance(b, Tensor):
        if a.data.shape != b.data.shape:
            raise ShapeError("div", f"{a.data.shape} vs {b.data.shape}")
        ad, bd = a.data, b.data
        out = Tensor(ad / bd)
        _record(out, (a, b), lambda g: (g / bd, -g * ad / (bd * bd)))
        return out
    c = _const(b, "div")
    _binary_shapes("div", a.data, c)
    out = Tensor(a.data / c)
    _record(out, (a,), lambda g: (g / c,))
    return out


def log(a: Tensor) -> Tensor:
    ad = a.data
    out = Tensor(np.log(ad))
    _record(out, (a,), lambda g: (g / ad,))
    return out


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes through inside the interval."""
    ad = a.data
    out = Tensor(np.clip(ad, lo, hi))
    mask = ((ad >= lo) & (ad <= hi)).astype(np.float32)
    _record(out, (a,), lambda g: (g * mask,))
    return out


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, v); subgradient 0 at v == 0. NaN propagates."""
    out = Tensor(np.maximum(a.data, np.float32(0.0)))
    fmask = (a.data > 0).astype(np.float32)
    _record(out, (a,), lambda g: (g * fmask,))
    return out


def sigmoid(a: Tensor) -> Tensor:
    """Numerically stable logistic; saturates to (0, 1) without NaN."""
    x = a.data
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(np.float32)
    out = Tensor(y)
    _record(out, (a,), lambda g: (g * y * (1.0 - y),))
    return out


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor) -> Tensor:
    shape = a.data.shape
    out = Tensor(np.float32(a.data.sum(dtype=np.float64)))
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape),))
    return out


def tmean(a: Tensor) -> Tensor:
    shape = a.data.shape
    n = a.data.size
    out = Tensor(np.float32(a.data.mean(dtype=np.float64)))
    _record(out, (a,), lambda g: (np.broadcast_to(g / n, shape),))
    return out


def sum_per_sample(a: Tensor) -> Tensor:
    """Reduce all but the leading (batch) axis: (N, ...) -> (N,)."""
    shape = a.data.shape
    axes = tuple(range(1, a.data.ndim))
    out = Tensor(a.data.sum(axis=axes, dtype=np.float64).astype(np.float32))
    expand = (shape[0],) + (1,) * (len(shape) - 1)

    def bw(g):
        return (np.broadcast_to(g.reshape(expand), shape),)

    _record(out, (a,), bw)
    return out


def mean_per_sample(a: Tensor) -> Tensor:
    shape = a.data.shape
    axes = tuple(range(1, a.data.ndim))
    count = int(np.prod(shape[1:])) if len(shape) > 1 else 1
    out = Tensor(a.data.mean(axis=axes, dtype=np.float64).astype(np.float32))
    expand = (shape[0],) + (1,) * (len(shape) - 1)

    def bw(g):
        return (np.broadcast_to(g.reshape(expand) / count, shape),)

    _record(out, (a,), bw)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    old = a.data.shape
    out = Tensor(a.data.reshape(shape))
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


# ---------------------------------------------------------------------------
# network layers


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Same-padding stride-1 cross-correlation with an odd square kernel.

    x: (N, C, H, W); kernel: (K, C, kh, kh) with kh in {1, 3}; bias: (K,).
    """
    xd, kd, bd = x.data, kernel.data, bias.data
    if xd.ndim != 4 or kd.ndim != 4:
        raise ShapeError("conv2d", f"need 4-d input and kernel, got {xd.shape}, {kd.shape}")
    n, c, h, w = xd.shape
    k, kc, kh, kw = kd.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError("conv2d", f"kernel must be odd square, got {kh}x{kw}")
    if kc != c:
        raise ShapeError("conv2d", f"input has {c} channels, kernel expects {kc}")
    if bd.shape != (k,):
        raise ShapeError("conv2d", f"bias shape {bd.shape} != ({k},)")

    if kh == 3:
        xp = np.pad(xd, ((0, 0), (0, 0), (1, 1), (1, 1)))
        out_data = kernels.conv3x3_forward(xp, kd, bd)

        def bw(g):
            g = np.ascontiguousarray(g)
            dbias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            dk = kernels.conv3x3_kernel_grad(xp, g) if kernel.requires_grad else None
            dx = None
            if x.requires_grad:
                kt = np.ascontiguousarray(kd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
                gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
                dx = kernels.conv3x3_forward(gp, kt, np.zeros(c, np.float32))
            return (dx, dk, dbias)

    else:  # 1x1: a pointwise channel mix
        kmat = kd[:, :, 0, 0]
        out_data = np.tensordot(kmat, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
        out_data = np.ascontiguousarray(out_data)
        out_data += bd.reshape(1, k, 1, 1)

        def bw(g):
            dbias = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
            dk = None
            if kernel.requires_grad:
                dk = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3])).reshape(k, c, 1, 1)
                dk = dk.astype(np.float32)
            dx = None
            if x.requires_grad:
                dx = np.tensordot(kmat, g, axes=([0], [1])).transpose(1, 0, 2, 3)
                dx = np.ascontiguousarray(dx)
            return (dx, dk, dbias)

    out = Tensor(out_data)
    _record(out, (x, kernel, bias), bw)
    return out


@dataclass
class BNState:
    """Running statistics for one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5
    batches_seen: int = 0

    @classmethod
    def for_channels(cls, c: int, momentum: float = 0.9, eps: float = 1e-5) -> "BNState":
        return cls(np.zeros(c, np.float32), np.ones(c, np.float32), momentum, eps)

    @property
    def initialized(self) -> bool:
        return self.batches_seen > 0


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, training: bool) -> Tensor:
    """Per-channel normalization over (N, H, W) with affine transform.

    Train mode normalizes by batch statistics (biased variance) and updates
    the running stats; eval mode uses the running stats and requires at
    least one prior training batch.
    """
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("batch_norm", f"need (N,C,H,W), got {xd.shape}")
    n, c, h, w = xd.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError("batch_norm", f"affine params must have shape ({c},)")
    m = n * h * w

    if training:
        if m < 2:
            raise ShapeError("batch_norm", f"train mode needs N*H*W >= 2, got {m}")
        mu = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = xd.var(axis=(0, 2, 3), dtype=np.float64)
        mu32 = mu.astype(np.float32)
        inv = (1.0 / np.sqrt(var + state.eps)).astype(np.float32)
        state.mean = (state.momentum * state.mean + (1.0 - state.momentum) * mu32).astype(np.float32)
        state.var = (state.momentum * state.var + (1.0 - state.momentum) * var.astype(np.float32)).astype(np.float32)
        state.batches_seen += 1
    else:
        if not state.initialized:
            raise UninitializedStatsError("batch_norm: eval mode before any training batch")
        mu32 = state.mean
        inv = (1.0 / np.sqrt(state.var.astype(np.float64) + state.eps)).astype(np.float32)

    xhat = (xd - mu32.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    gd = gamma.data
    out = Tensor(gd.reshape(1, c, 1, 1) * xhat + beta.data.reshape(1, c, 1, 1))

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dbeta = g.sum(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
        dx = None
        if x.requires_grad:
            coef = (gd * inv).reshape(1, c, 1, 1)
            if training:
                dx = coef / m * (
                    m * g
                    - dbeta.reshape(1, c, 1, 1)
                    - xhat * dgamma.reshape(1, c, 1, 1)
                )
                dx = dx.astype(np.float32)
            else:
                dx = g * coef
        return (dx, dgamma, dbeta)

    _record(out, (x, gamma, beta), bw)
    return out


def max_pool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max; gradient routes to the first max in scan order."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("max_pool2", f"need (N,C,H,W), got {xd.shape}")
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise ShapeError("max_pool2", f"spatial dims must be even, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = xd.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = win.argmax(axis=-1)  # first occurrence: window scan order (0,0),(0,1),(1,0),(1,1)
    out = Tensor(np.take_along_axis(win, arg[..., None], axis=-1)[..., 0])

    def bw(g):
        dwin = np.zeros((n, c, h2, w2, 4), np.float32)
        np.put_along_axis(dwin, arg[..., None], g[..., None].astype(np.float32), axis=-1)
        dx = dwin.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (np.ascontiguousarray(dx),)

    _record(out, (x,), bw)
    return out


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x replication; gradient sums each 2x2 block."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("upsample2", f"need (N,C,H,W), got {xd.shape}")
    n, c, h, w = xd.shape
    out = Tensor(np.repeat(np.repeat(xd, 2, axis=2), 2, axis=3))

    def bw(g):
        dx = g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5), dtype=np.float64)
        return (dx.astype(np.float32),)

    _record(out, (x,), bw)
    return out


def record_custom(out_data: np.ndarray, parents: tuple, bw) -> Tensor:
    """Extension point for ops defined outside this module (affinity product)."""
    out = Tensor(out_data)
    _record(out, parents, bw)
    return out
