"""Dense tensors with define-by-run reverse-mode differentiation.

Every op takes :class:`Node` inputs and returns a new :class:`Node` whose
``_backward`` closure maps the output gradient to one gradient per parent.
Nodes that do not depend on any ``requires_grad`` leaf keep no parents, so
frozen sub-graphs are never traversed by :func:`backward`.

Values are float32 by default. Ops preserve the dtype of their inputs, which
lets finite-difference oracles run the exact same graph in float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

# masked attention logits; finite so fully-masked rows stay NaN-free
_NEG_INF = -1e9


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(ValueError):
    """An op precondition on values (not shapes) was violated."""


class Node:
    """A value in the compute graph plus its accumulated gradient."""

    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(value)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.value: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Node, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def grad_or_zeros(self) -> np.ndarray:
        if self.grad is None:
            return np.zeros_like(self.value)
        return self.grad

    def backward(self) -> None:
        backward(self)

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: Node) -> Node:
        return add(self, other)

    def __sub__(self, other: Node) -> Node:
        return sub(self, other)

    def __mul__(self, other: Node) -> Node:
        return mul(self, other)

    def __matmul__(self, other: Node) -> Node:
        return matmul(self, other)

    def __neg__(self) -> Node:
        return scale(self, -1.0)


def tensor(data, requires_grad: bool = False, name: str | None = None, dtype=None) -> Node:
    """Create a leaf node; integer/list input is cast to ``dtype`` (float32)."""
    arr = np.array(data, dtype=dtype or DEFAULT_DTYPE)
    return Node(arr, requires_grad=requires_grad, name=name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else tensor(x)


def _result(value: np.ndarray, parents: Sequence[Node], backward_fn) -> Node:
    out = Node(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topological(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in reversed(node._parents):
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into every reachable ``requires_grad`` leaf.

    Leaves accumulate, so two calls without ``zero_grad`` double the stored
    gradient. Interior nodes get their gradient for this pass assigned.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(_topological(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def _check_same_shape(op: str, a: Node, b: Node) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _sum64(x: np.ndarray, axis=None, keepdims: bool = False, dtype=None) -> np.ndarray:
    return np.sum(x, axis=axis, keepdims=keepdims, dtype=np.float64).astype(dtype or x.dtype)


# --------------------------------------------------------------------------- #
# elementwise and linear ops
# --------------------------------------------------------------------------- #


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.value, b.value

    def _bw(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _result(av @ bv, (a, b), _bw)


def transpose(x: Node) -> Node:
    if x.value.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D input, got {x.shape}")
    return _result(x.value.T, (x,), lambda g: (g.T,))


def reshape(x: Node, shape: tuple[int, ...]) -> Node:
    src = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _result(out, (x,), lambda g: (g.reshape(src),))


def add(a: Node, b: Node) -> Node:
    _check_same_shape("add", a, b)
    return _result(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _check_same_shape("sub", a, b)
    return _result(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a: Node, b: Node) -> Node:
    _check_same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _result(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(x: Node, c: float) -> Node:
    c = x.value.dtype.type(c)
    return _result(x.value * c, (x,), lambda g: (g * c,))


def add_bias(x: Node, b: Node) -> Node:
    """``x[i, :] + b`` for every row; the only broadcast the library allows."""
    if x.value.ndim != 2 or b.value.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _result(x.value + b.value, (x, b), lambda g: (g, _sum64(g, axis=0)))


def linear(x: Node, w: Node, b: Node | None = None) -> Node:
    out = matmul(x, w)
    return out if b is None else add_bias(out, b)


def relu(x: Node) -> Node:
    mask = x.value > 0
    return _result(np.where(mask, x.value, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def total(x: Node) -> Node:
    """Sum of all entries, accumulated in float64."""
    shape = x.shape
    return _result(
        _sum64(x.value).reshape(()), (x,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),)
    )


def mean(x: Node) -> Node:
    return scale(total(x), 1.0 / x.value.size)


# --------------------------------------------------------------------------- #
# normalisation and probabilities
# --------------------------------------------------------------------------- #


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax(x: Node, axis: int = -1) -> Node:
    y = _softmax_np(x.value, axis)

    def _bw(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _result(y, (x,), _bw)


def log_softmax(x: Node, axis: int = -1) -> Node:
    z = x.value - np.max(x.value, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def _bw(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), _bw)


def cross_entropy(logits: Node, targets: np.ndarray, ignore_index: int = -100) -> Node:
    """Mean negative log-likelihood over rows whose target is not ignored."""
    if logits.value.ndim != 2 or len(targets) != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {np.shape(targets)}")
    targets = np.asarray(targets)
    keep = targets != ignore_index
    n = int(keep.sum())
    if n == 0:
        raise ContractError("cross_entropy: every target is ignored")
    rows = np.nonzero(keep)[0]
    cols = targets[keep]
    z = logits.value - np.max(logits.value, axis=1, keepdims=True)
    e = np.exp(z)
    s = np.sum(e, axis=1, keepdims=True)
    logp = z[rows, cols] - np.log(s[rows, 0])
    loss = -np.sum(logp, dtype=np.float64) / n
    probs = e / s

    def _bw(g):
        grad = np.zeros_like(logits.value)
        grad[rows] = probs[rows]
        grad[rows, cols] -= 1.0
        return (grad * (g / n),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), _bw)


def entropy(p: Node, reduction: str = "sum", tol: float = 1e-3) -> Node:
    """Shannon entropy (nats) of a stack of distributions ``[W x C]``.

    ``reduction="sum"`` adds the per-row entropies; ``"mean"`` divides by W.
    Rows must be on the simplex; ``0 * log 0`` is taken as 0.
    """
    if p.value.ndim != 2:
        raise ShapeError(f"entropy: expected [W x C] probabilities, got {p.shape}")
    if reduction not in ("sum", "mean"):
        raise ValueError(f"entropy: unknown reduction {reduction!r}")
    pv = p.value
    if pv.size and (np.any(pv < -tol) or np.max(np.abs(pv.sum(axis=1, dtype=np.float64) - 1.0)) > tol):
        raise ContractError("entropy: rows are not probability distributions")
    tiny = np.finfo(pv.dtype).tiny
    safe = np.maximum(pv, tiny)
    logp = np.log(safe)
    h = -np.sum(np.where(pv > 0, pv * logp, 0.0), dtype=np.float64)
    denom = 1.0 if reduction == "sum" else max(pv.shape[0], 1)

    def _bw(g):
        return (-(logp + 1.0) * (g / denom),)

    return _result(np.asarray(h / denom, dtype=pv.dtype), (p,), _bw)


def layer_norm(x: Node, gain: Node, shift: Node, eps: float = 1e-5) -> Node:
    if x.value.ndim != 2 or gain.shape != (x.shape[1],) or shift.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm: x {x.shape}, gain {gain.shape}, shift {shift.shape}")
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    d = xv.shape[1]

    def _bw(g):
        dxhat = g * gv
        dx = inv / d * (d * dxhat - dxhat.sum(axis=1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=1, keepdims=True))
        return (dx.astype(xv.dtype), _sum64(g * xhat, axis=0), _sum64(g, axis=0))

    return _result((xhat * gv + shift.value).astype(xv.dtype), (x, gain, shift), _bw)


# --------------------------------------------------------------------------- #
# indexing
# --------------------------------------------------------------------------- #


def embedding(table: Node, ids: np.ndarray) -> Node:
    """Gather rows of ``table`` for a flat array of integer ids."""
    ids = np.asarray(ids).reshape(-1)
    if table.value.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: ids outside [0, {table.shape[0]})")

    def _bw(g):
        grad = np.zeros_like(table.value)
        np.add.at(grad, ids, g)
        return (grad,)

    return _result(table.value[ids], (table,), _bw)


def take_rows(x: Node, rows: np.ndarray) -> Node:
    """Select rows of a 2-D node (e.g. word-initial positions)."""
    rows = np.asarray(rows, dtype=np.int64).reshape(-1)
    n = x.shape[0]

    def _bw(g):
        grad = np.zeros_like(x.value)
        np.add.at(grad, rows, g)
        return (grad,)

    if rows.size and (rows.min() < 0 or rows.max() >= n):
        raise ContractError(f"take_rows: row index outside [0, {n})")
    return _result(x.value[rows], (x,), _bw)


# --------------------------------------------------------------------------- #
# mixing ops used by adapter ensembles and fusion
# --------------------------------------------------------------------------- #


def mix(xs: Sequence[Node], weights: Node) -> Node:
    """Convex-style combination ``sum_i weights[i] * xs[i]`` with a shared weight vector."""
    if weights.value.ndim != 1 or weights.shape[0] != len(xs) or not xs:
        raise ShapeError(f"mix: {len(xs)} inputs but weights of shape {weights.shape}")
    for x in xs[1:]:
        _check_same_shape("mix", xs[0], x)
    w = weights.value
    vals = [x.value for x in xs]
    out = vals[0] * w[0]
    for i in range(1, len(vals)):
        out = out + vals[i] * w[i]

    def _bw(g):
        gw = np.array([np.sum(g * v, dtype=np.float64) for v in vals], dtype=w.dtype)
        return [g * w[i] for i in range(len(vals))] + [gw]

    return _result(out, (*xs, weights), _bw)


def row_mix(xs: Sequence[Node], weights: Node) -> Node:
    """Per-row combination ``out[n] = sum_i weights[n, i] * xs[i][n]``."""
    if not xs or weights.value.ndim != 2 or weights.shape != (xs[0].shape[0], len(xs)):
        raise ShapeError(f"row_mix: {len(xs)} inputs of {xs[0].shape if xs else None}, weights {weights.shape}")
    for x in xs[1:]:
        _check_same_shape("row_mix", xs[0], x)
    w = weights.value
    vals = [x.value for x in xs]
    out = sum(vals[i] * w[:, i : i + 1] for i in range(len(vals)))

    def _bw(g):
        gw = np.stack([np.sum(g * v, axis=1) for v in vals], axis=1).astype(w.dtype)
        return [g * w[:, i : i + 1] for i in range(len(vals))] + [gw]

    return _result(out, (*xs, weights), _bw)


def row_dots(q: Node, ks: Sequence[Node]) -> Node:
    """Scores ``out[n, i] = <q[n], ks[i][n]>``, shape ``[N x R]``."""
    for k in ks:
        _check_same_shape("row_dots", q, k)
    qv = q.value
    kv = [k.value for k in ks]
    out = np.stack([np.sum(qv * k, axis=1) for k in kv], axis=1)

    def _bw(g):
        gq = sum(g[:, i : i + 1] * kv[i] for i in range(len(kv)))
        return [gq] + [g[:, i : i + 1] * qv for i in range(len(kv))]

    return _result(out, (q, *ks), _bw)


# --------------------------------------------------------------------------- #
# attention
# --------------------------------------------------------------------------- #


def attention(q: Node, k: Node, v: Node, n_heads: int, batch: int, key_mask: np.ndarray) -> Node:
    """Multi-head scaled dot-product attention over a padded batch.

    ``q``, ``k``, ``v`` are ``[batch*L x d]`` with sentences laid out
    contiguously; ``key_mask`` is ``[batch x L]`` with True on real tokens.
    Returns the concatenated head outputs, ``[batch*L x d]``.
    """
    _check_same_shape("attention", q, k)
    _check_same_shape("attention", q, v)
    n, d = q.shape
    if d % n_heads or n % batch:
        raise ShapeError(f"attention: width {d} / heads {n_heads}, rows {n} / batch {batch}")
    L = n // batch
    dh = d // n_heads
    key_mask = np.asarray(key_mask, dtype=bool).reshape(batch, L)
    dtype = q.dtype

    def split(x):
        return x.reshape(batch, L, n_heads, dh).transpose(0, 2, 1, 3)

    def merge(x):
        return x.transpose(0, 2, 1, 3).reshape(n, d)

    Q, K, V = split(q.value), split(k.value), split(v.value)
    c = dtype.type(1.0 / np.sqrt(dh))
    S = np.matmul(Q, K.transpose(0, 1, 3, 2)) * c
    S = np.where(key_mask[:, None, None, :], S, dtype.type(_NEG_INF))
    P = _softmax_np(S, axis=-1)
    out = merge(np.matmul(P, V))

    def _bw(g):
        G = split(g)
        dV = np.matmul(P.transpose(0, 1, 3, 2), G)
        dP = np.matmul(G, V.transpose(0, 1, 3, 2))
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * c
        dQ = np.matmul(dS, K)
        dK = np.matmul(dS.transpose(0, 1, 3, 2), Q)
        return (merge(dQ), merge(dK), merge(dV))

    return _result(out, (q, k, v), _bw)


def parameters_requiring_grad(nodes: Iterable[Node]) -> list[Node]:
    return [n for n in nodes if n.requires_grad]
