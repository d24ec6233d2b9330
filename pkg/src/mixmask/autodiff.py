"""Reverse-mode automatic differentiation over dense float64 arrays.

Everything the actor-critic networks and their objectives need lives here:
a `Tensor` wrapper around a numpy array that records the producing op and
its parents, a scalar `backward` that accumulates gradients into leaves,
and a `ParameterRegistry` that partitions trainable parameters into named
groups so objective terms can be routed to exactly the parameters they are
allowed to update.

Gradients accumulate additively across multiple uses of a tensor. Graphs
are built eagerly and dropped once the loss bundle goes out of scope after
an optimizer step; there is no support for higher-order derivatives.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_triangular


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's contract."""


class GraphError(RuntimeError):
    """Raised when backward is invoked on an invalid root."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (rollout/eval fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over axes that were broadcast so it matches `shape`."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array participating in a reverse-mode graph.

    `grad` is lazily allocated and always matches `data`'s shape once
    backward has touched this tensor. Leaves created with
    ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = parents
        self._backward_fn = backward_fn
        self.op = op

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph plumbing ------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        """Constant view of this tensor's value, cut out of the graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # -- operator sugar --------------------------------------------------
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, key):
        return tslice(self, key)

    def __pow__(self, p):
        return powc(self, float(p))

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn, op) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn, op=op)
    return Tensor(data, op=op)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into every reachable leaf's grad.

    Requires a scalar root (shape product 1). Iterative topological order
    keeps deep graphs off the Python stack and is deterministic: parents
    are visited in recorded order.
    """
    if root.size != 1:
        raise GraphError(f"backward requires a scalar root, got shape {root.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn(node.grad)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out, (a, b), bw, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), bw, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * s)

    return _make(a.data * s, (a,), bw, "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _make(out, (a, b), bw, "matmul")


def concat(tensors, axis=-1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g):
        pieces = np.split(g, offsets, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(out, tuple(tensors), bw, "concat")


def stack_channels(tensors, axis=-2) -> Tensor:
    """Stack same-shape tensors along a new axis (default: channel axis -2)."""
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack-channels: inputs must share a shape, got {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    pos = axis if axis >= 0 else out.ndim + axis

    def bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=pos))

    return _make(out, tuple(tensors), bw, "stack-channels")


def transpose_last_two(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise ShapeError(f"transpose-last-two: needs ndim >= 2, got {a.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, -1, -2))

    return _make(np.swapaxes(a.data, -1, -2), (a,), bw, "transpose-last-two")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.shape))

    return _make(out, (a,), bw, "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * (1.0 - out * out))

    return _make(out, (a,), bw, "tanh")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * out)

    return _make(out, (a,), bw, "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out, (a,), bw, "log")


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent."""
    out = a.data ** p

    def bw(g):
        if a.requires_grad:
            a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(out, (a,), bw, "pow")


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis, max-shifted for stability."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        if a.requires_grad:
            inner = (g * out).sum(axis=-1, keepdims=True)
            a._accumulate(out * (g - inner))

    return _make(out, (a,), bw, "softmax-last-axis")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def bw(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g / count, a.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg / count, a.shape).copy())

    return _make(out, (a,), bw, "mean")


def tslice(a: Tensor, key) -> Tensor:
    out = a.data[key]

    def bw(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accumulate(full)

    return _make(out, (a,), bw, "slice")


def conv1d_2ch(x: Tensor, w: Tensor) -> Tensor:
    """1-D cross-correlation of a two-channel signal with one (2, k) kernel.

    Stride 1, zero padding preserving length, odd kernel width. Input is
    (..., 2, n) and the output collapses the channel axis to (..., n).
    """
    if x.ndim < 2 or x.shape[-2] != 2:
        raise ShapeError(f"conv1d-2ch: input must be (..., 2, n), got {x.shape}")
    if w.shape[0] != 2 or w.ndim != 2 or w.shape[1] % 2 != 1:
        raise ShapeError(f"conv1d-2ch: kernel must be (2, odd k), got {w.shape}")
    n = x.shape[-1]
    k = w.shape[1]
    pad = (k - 1) // 2
    pad_spec = [(0, 0)] * (x.ndim - 1) + [(pad, pad)]
    xp = np.pad(x.data, pad_spec)
    out = np.zeros(x.shape[:-2] + (n,))
    for j in range(k):
        out += (xp[..., :, j:j + n] * w.data[:, j][:, None]).sum(axis=-2)

    def bw(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[..., :, j:j + n] += g[..., None, :] * w.data[:, j][:, None]
            x._accumulate(gxp[..., :, pad:pad + n])
        if w.requires_grad:
            gw = np.zeros_like(w.data)
            for j in range(k):
                prod = g[..., None, :] * xp[..., :, j:j + n]
                gw[:, j] = prod.sum(axis=(*range(prod.ndim - 2), prod.ndim - 1))
            w._accumulate(gw)

    return _make(out, (x, w), bw, "conv1d-2ch")


def tri_solve(L: Tensor, b: Tensor, trans: bool = False) -> Tensor:
    """Solve L u = b (or L^T u = b when trans) for lower-triangular L.

    b may be a vector (n,) or matrix (n, m). Used by the Gaussian penalty
    measures; gradients flow into both L and b.
    """
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"tri-solve: L must be square 2-D, got {L.shape}")
    if b.shape[0] != L.shape[0]:
        raise ShapeError(f"tri-solve: L {L.shape} incompatible with b {b.shape}")
    tchar = "T" if trans else "N"
    u = solve_triangular(L.data, b.data, lower=True, trans=tchar)
    tril_mask = np.tril(np.ones_like(L.data))

    def bw(g):
        gb = solve_triangular(L.data, g, lower=True, trans="N" if trans else "T")
        if b.requires_grad:
            b._accumulate(gb)
        if L.requires_grad:
            u2 = u if u.ndim == 2 else u[:, None]
            gb2 = gb if gb.ndim == 2 else gb[:, None]
            gL = -(u2 @ gb2.T) if trans else -(gb2 @ u2.T)
            L._accumulate(gL * tril_mask)

    return _make(u, (L, b), bw, "tri-solve")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise log(exp(a) + exp(b)), max-shifted; composite of primitives."""
    m = Tensor(np.maximum(a.data, b.data))
    return add(log(add(exp(a - m), exp(b - m))), m)


def log_softmax(a: Tensor) -> Tensor:
    """Log of softmax over the last axis via a stop-gradient max shift."""
    m = Tensor(a.data.max(axis=-1, keepdims=True))
    shifted = a - m
    lse = log(tsum(exp(shifted), axis=-1, keepdims=True))
    return shifted - lse


_PRIMITIVES = {
    "matmul": lambda inputs, attrs: matmul(*inputs),
    "add": lambda inputs, attrs: add(*inputs),
    "mul": lambda inputs, attrs: mul(*inputs),
    "concat": lambda inputs, attrs: concat(inputs, axis=attrs.get("axis", -1)),
    "transpose-last-two": lambda inputs, attrs: transpose_last_two(*inputs),
    "relu": lambda inputs, attrs: relu(*inputs),
    "tanh": lambda inputs, attrs: tanh(*inputs),
    "exp": lambda inputs, attrs: exp(*inputs),
    "log": lambda inputs, attrs: log(*inputs),
    "softmax-last-axis": lambda inputs, attrs: softmax(*inputs),
    "sum": lambda inputs, attrs: tsum(*inputs, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "mean": lambda inputs, attrs: tmean(*inputs, axis=attrs.get("axis"), keepdims=attrs.get("keepdims", False)),
    "slice": lambda inputs, attrs: tslice(*inputs, attrs["key"]),
    "stack-channels": lambda inputs, attrs: stack_channels(inputs, axis=attrs.get("axis", -2)),
    "conv1d-2ch": lambda inputs, attrs: conv1d_2ch(*inputs),
    "scale": lambda inputs, attrs: scale(*inputs, attrs["factor"]),
    "pow": lambda inputs, attrs: powc(*inputs, attrs["exponent"]),
    "reshape": lambda inputs, attrs: reshape(*inputs, attrs["shape"]),
    "tri-solve": lambda inputs, attrs: tri_solve(*inputs, trans=attrs.get("trans", False)),
}


def primitive_forward(op_kind: str, inputs, attrs=None) -> Tensor:
    """Dispatch a primitive by name; records a graph edge when differentiable."""
    if op_kind not in _PRIMITIVES:
        raise KeyError(f"unknown primitive op kind: {op_kind!r}")
    return _PRIMITIVES[op_kind]([_as_tensor(t) for t in inputs], attrs or {})


# ---------------------------------------------------------------------------
# parameter registry
# ---------------------------------------------------------------------------

GROUPS = ("policy", "value", "backbone", "mechanism", "bilinear", "momentum")

# Momentum copies are blended, never stepped by gradients.
TRAINABLE_GROUPS = ("policy", "value", "backbone", "mechanism", "bilinear")


class ParameterRegistry:
    """Named parameter tensors partitioned into disjoint routing groups.

    Groups: `policy` and `value` hold the head-specific trunk parameters,
    `backbone` the shared trunk of backbone-style architectures,
    `mechanism` the mix/mask parameters (including covariance heads),
    `bilinear` the contrastive similarity matrix, and `momentum` the
    blended mechanism copies used as contrastive targets.

    `grad_vector` flattens a group's gradients row-major in registration
    order, so the layout is reproducible across calls.
    """

    def __init__(self):
        self._names: dict[str, Tensor] = {}
        self._groups: dict[str, list[str]] = {g: [] for g in GROUPS}

    def register(self, group: str, name: str, tensor: Tensor) -> Tensor:
        if group not in self._groups:
            raise KeyError(f"unknown parameter group: {group!r}")
        if name in self._names:
            raise ValueError(f"duplicate parameter name: {name!r}")
        tensor.requires_grad = group != "momentum"
        self._names[name] = tensor
        self._groups[group].append(name)
        return tensor

    def group(self, group: str) -> list[tuple[str, Tensor]]:
        if group not in self._groups:
            raise KeyError(f"unknown parameter group: {group!r}")
        return [(n, self._names[n]) for n in self._groups[group]]

    def tensors(self, group: str) -> list[Tensor]:
        return [t for _, t in self.group(group)]

    def get(self, name: str) -> Tensor:
        return self._names[name]

    def names(self) -> list[str]:
        return list(self._names)

    def trainable(self) -> list[tuple[str, Tensor]]:
        out = []
        for g in TRAINABLE_GROUPS:
            out.extend(self.group(g))
        return out

    def grad_vector(self, group: str) -> np.ndarray:
        parts = []
        for _, t in self.group(group):
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            parts.append(g.ravel())
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts)

    def set_grad_from_vector(self, group: str, vec: np.ndarray) -> None:
        offset = 0
        for _, t in self.group(group):
            n = t.size
            t.grad = vec[offset:offset + n].reshape(t.shape).copy()
            offset += n
        if offset != vec.size:
            raise ShapeError(f"grad vector length {vec.size} != group size {offset}")

    def zero_grad(self) -> None:
        for t in self._names.values():
            t.grad = None

    def state_copy(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._names.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            t = self._names[n]
            if t.shape != arr.shape:
                raise ShapeError(f"state shape mismatch for {n}: {t.shape} vs {arr.shape}")
            t.data = arr.copy()
