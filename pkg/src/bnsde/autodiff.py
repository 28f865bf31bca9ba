"""Reverse-mode automatic differentiation on dense float64 arrays.

Graphs are built define-by-run: every operation computes its value at
construction time and records a backward closure. The supported operation
set is deliberately small -- elementwise arithmetic, tanh/softplus/exp/log/
square, sum, logsumexp, an affine layer, a batched matrix-vector product and
a few structural ops -- which is enough to express an unrolled
Euler-Maruyama chain through small MLPs and a Gaussian mixture likelihood.

Shape discipline is strict: combining two variable nodes requires equal
shapes (or one side scalar). Plain numpy constants may broadcast against a
node as long as the result keeps the node's shape; anything else raises at
construction time rather than broadcasting silently.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "GradError",
    "ShapeError",
    "NonFiniteLossError",
    "Node",
    "ParamSet",
    "constant",
    "add",
    "sub",
    "mul",
    "matvec",
    "affine",
    "tanh",
    "softplus",
    "exp",
    "log",
    "square",
    "ssum",
    "logsumexp",
    "logmeanexp",
    "concat_const",
    "scatter_tril",
    "scatter_diag",
    "reshape_last",
    "forward",
    "backward",
    "finite_diff_check",
]


class GradError(Exception):
    """Base error for graph construction and differentiation problems."""


class ShapeError(GradError):
    """Operand shapes are incompatible (raised at construction time)."""


class NonFiniteLossError(GradError):
    """A loss evaluation produced a non-finite value."""

    def __init__(self, message: str, param_index: int | None = None):
        super().__init__(message)
        self.param_index = param_index


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the expression graph, with its backward rule.

    ``value`` is always a float64 ndarray (0-d for scalars). ``grad`` is
    populated by :func:`backward`. Leaf nodes carry the ParamSet key they
    were created from; constants carry neither parents nor a key.
    """

    __slots__ = ("value", "grad", "leaf_key", "_parents", "_backward")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Node", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        leaf_key: str | None = None,
    ):
        self.value = value
        self.grad: np.ndarray | None = None
        self.leaf_key = leaf_key
        self._parents = parents
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        kind = "leaf" if self.leaf_key else ("const" if not self._parents else "op")
        return f"Node({kind}, shape={self.shape})"


def constant(x) -> Node:
    """Wrap a plain array as a graph constant (no gradient flows into it)."""
    return Node(_as_value(x))


class ParamSet:
    """Named blocks of learnable float64 arrays plus a parallel gradient buffer.

    Block order is fixed at construction and defines the layout of the
    flattened parameter vector used by the SGLD update and the
    finite-difference checker.
    """

    def __init__(self, blocks: dict[str, np.ndarray]):
        if not blocks:
            raise ValueError("ParamSet needs at least one block")
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, arr in blocks.items():
            a = np.array(arr, dtype=np.float64)
            self.values[name] = a
            self.grads[name] = np.zeros_like(a)
        self._names = list(self.values)
        offsets = {}
        pos = 0
        for name in self._names:
            n = self.values[name].size
            offsets[name] = slice(pos, pos + n)
            pos += n
        self._slices = offsets
        self._size = pos

    @property
    def names(self) -> list[str]:
        return list(self._names)

    @property
    def n_params(self) -> int:
        return self._size

    def block_slice(self, name: str) -> slice:
        return self._slices[name]

    def block_names(self, prefix: str) -> list[str]:
        return [n for n in self._names if n == prefix or n.startswith(prefix + ".")]

    def leaf(self, name: str) -> Node:
        """Create a leaf node bound to a parameter block."""
        if name not in self.values:
            raise KeyError(f"unknown parameter block {name!r}")
        return Node(self.values[name], leaf_key=name)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def flat(self) -> np.ndarray:
        return np.concatenate([self.values[n].ravel() for n in self._names])

    def grad_flat(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in self._names])

    def set_flat(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self._size,):
            raise ShapeError(f"expected flat vector of length {self._size}, got {vec.shape}")
        for name in self._names:
            sl = self._slices[name]
            self.values[name][...] = vec[sl].reshape(self.values[name].shape)

    def copy(self) -> "ParamSet":
        return ParamSet({n: self.values[n] for n in self._names})

    def __repr__(self):
        return f"ParamSet({self._size} params in {len(self._names)} blocks)"


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _coerce_pair(a: Node, b) -> tuple[Node, np.ndarray | None]:
    """Return (node, const_value) where const_value is None if b is a Node."""
    if isinstance(b, Node):
        return b, None
    return a, _as_value(b)


def _check_pair_shapes(a: Node, b: Node, op: str) -> None:
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcast)")


def _check_const_shape(a: Node, c: np.ndarray, op: str) -> None:
    try:
        out = np.broadcast_shapes(a.shape, c.shape)
    except ValueError:
        raise ShapeError(f"{op}: constant shape {c.shape} incompatible with {a.shape}") from None
    if out != a.shape and a.shape != ():
        raise ShapeError(f"{op}: constant shape {c.shape} would widen node shape {a.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (used for scalar operands of elementwise ops)."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape == () else np.broadcast_to(g, shape)


def add(a: Node, b) -> Node:
    b_node, const = _coerce_pair(a, b)
    if const is None:
        _check_pair_shapes(a, b_node, "add")
        out = Node(a.value + b_node.value, (a, b_node))

        def back(g):
            a._accumulate(_reduce_to(g, a.shape))
            b_node._accumulate(_reduce_to(g, b_node.shape))

    else:
        _check_const_shape(a, const, "add")
        out = Node(a.value + const, (a,))

        def back(g):
            a._accumulate(_reduce_to(g, a.shape))

    out._backward = back
    return out


def sub(a: Node, b) -> Node:
    b_node, const = _coerce_pair(a, b)
    if const is None:
        _check_pair_shapes(a, b_node, "sub")
        out = Node(a.value - b_node.value, (a, b_node))

        def back(g):
            a._accumulate(_reduce_to(g, a.shape))
            b_node._accumulate(_reduce_to(-g, b_node.shape))

    else:
        _check_const_shape(a, const, "sub")
        out = Node(a.value - const, (a,))

        def back(g):
            a._accumulate(_reduce_to(g, a.shape))

    out._backward = back
    return out


def mul(a: Node, b) -> Node:
    b_node, const = _coerce_pair(a, b)
    if const is None:
        _check_pair_shapes(a, b_node, "mul")
        out = Node(a.value * b_node.value, (a, b_node))

        def back(g):
            a._accumulate(_reduce_to(g * b_node.value, a.shape))
            b_node._accumulate(_reduce_to(g * a.value, b_node.shape))

    else:
        _check_const_shape(a, const, "mul")
        c = const
        out = Node(a.value * c, (a,))

        def back(g):
            a._accumulate(_reduce_to(g * c, a.shape))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matvec(m: Node, v) -> Node:
    """Batched matrix-vector product: (..., D, P) x (..., P) -> (..., D)."""
    v_node, const = _coerce_pair(m, v)
    v_val = v_node.value if const is None else const
    if m.value.ndim < 2 or v_val.ndim < 1:
        raise ShapeError("matvec needs a (...,D,P) matrix and a (...,P) vector")
    if m.shape[:-2] != v_val.shape[:-1] or m.shape[-1] != v_val.shape[-1]:
        raise ShapeError(f"matvec: matrix {m.shape} does not match vector {v_val.shape}")
    val = np.einsum("...dp,...p->...d", m.value, v_val)
    if const is None:
        out = Node(val, (m, v_node))

        def back(g):
            m._accumulate(g[..., :, None] * v_val[..., None, :])
            v_node._accumulate(np.einsum("...dp,...d->...p", m.value, g))

    else:
        out = Node(val, (m,))

        def back(g):
            m._accumulate(g[..., :, None] * v_val[..., None, :])

    out._backward = back
    return out


def affine(x: Node, w: Node, b: Node) -> Node:
    """Dense layer x @ w.T + b for x (..., I), w (O, I), b (O,)."""
    if w.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeError("affine expects weight (O, I) and bias (O,)")
    o, i = w.shape
    if b.shape != (o,):
        raise ShapeError(f"affine: bias {b.shape} does not match weight rows {o}")
    if x.value.ndim < 1 or x.shape[-1] != i:
        raise ShapeError(f"affine: input {x.shape} does not match weight cols {i}")
    out = Node(x.value @ w.value.T + b.value, (x, w, b))

    def back(g):
        x._accumulate(g @ w.value)
        g2 = g.reshape(-1, o)
        x2 = x.value.reshape(-1, i)
        w._accumulate(g2.T @ x2)
        b._accumulate(g2.sum(axis=0))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    out = Node(y, (x,))

    def back(g):
        x._accumulate(g * (1.0 - y * y))

    out._backward = back
    return out


def _sigmoid(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def softplus(x: Node) -> Node:
    out = Node(np.logaddexp(0.0, x.value), (x,))

    def back(g):
        x._accumulate(g * _sigmoid(x.value))

    out._backward = back
    return out


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    out = Node(y, (x,))

    def back(g):
        x._accumulate(g * y)

    out._backward = back
    return out


def log(x: Node) -> Node:
    out = Node(np.log(x.value), (x,))

    def back(g):
        x._accumulate(g / x.value)

    out._backward = back
    return out


def square(x: Node) -> Node:
    out = Node(x.value * x.value, (x,))

    def back(g):
        x._accumulate(g * (2.0 * x.value))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# reductions


def ssum(x: Node, axis: int | None = None) -> Node:
    out = Node(np.sum(x.value, axis=axis), (x,))

    def back(g):
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.shape))
        else:
            x._accumulate(np.broadcast_to(np.expand_dims(g, axis), x.shape))

    out._backward = back
    return out


def _log_reduce_exp(x: Node, axis: int, divisor: float) -> Node:
    v = x.value
    m = np.max(v, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        s = np.sum(np.exp(v - m_safe), axis=axis, keepdims=True)
        lse = m_safe + np.log(s / divisor)
    out = Node(np.squeeze(lse, axis=axis), (x,))
    # reference kept with the divisor folded back in so the gradient is the
    # plain softmax of the summands in both variants
    ref = m_safe + np.log(s) if divisor != 1.0 else lse

    def back(g):
        with np.errstate(invalid="ignore"):
            soft = np.exp(v - ref)
        soft = np.where(np.isfinite(ref), soft, 0.0)
        x._accumulate(np.expand_dims(g, axis) * soft)

    out._backward = back
    return out


def logsumexp(x: Node, axis: int = -1) -> Node:
    """log(sum(exp(x))) along one axis, stable for large-magnitude inputs.

    Rows that are entirely -inf produce -inf with zero gradient.
    """
    return _log_reduce_exp(x, axis, 1.0)


def logmeanexp(x: Node, axis: int = -1) -> Node:
    """logsumexp(x) - log(n) with the normalization folded into the log.

    Folding makes the identity exact when all entries along the axis are
    equal (sum(exp(0)) / n == 1), which plain subtraction of log(n) is not.
    """
    return _log_reduce_exp(x, axis, x.shape[axis])


# ---------------------------------------------------------------------------
# structural ops


def concat_const(x: Node, c, axis: int = -1) -> Node:
    """Append a constant block along `axis` (gradient slices it back off)."""
    c_val = _as_value(c)
    if c_val.ndim != x.value.ndim:
        raise ShapeError(f"concat_const: rank {c_val.ndim} vs node rank {x.value.ndim}")
    out = Node(np.concatenate([x.value, c_val], axis=axis), (x,))
    n = x.shape[axis]

    def back(g):
        idx = [slice(None)] * g.ndim
        idx[axis] = slice(0, n)
        x._accumulate(g[tuple(idx)])

    out._backward = back
    return out


def scatter_tril(packed: Node, dim: int) -> Node:
    """Unpack (..., dim*(dim+1)//2) row-major lower-triangle entries into
    (..., dim, dim) matrices with zeros above the diagonal."""
    k = dim * (dim + 1) // 2
    if packed.shape[-1] != k:
        raise ShapeError(f"scatter_tril: expected last dim {k} for dim={dim}, got {packed.shape[-1]}")
    rows, cols = np.tril_indices(dim)
    val = np.zeros(packed.shape[:-1] + (dim, dim), dtype=np.float64)
    val[..., rows, cols] = packed.value
    out = Node(val, (packed,))

    def back(g):
        packed._accumulate(g[..., rows, cols])

    out._backward = back
    return out


def scatter_diag(x: Node) -> Node:
    """Embed (..., D) vectors as (..., D, D) diagonal matrices."""
    d = x.shape[-1]
    idx = np.arange(d)
    val = np.zeros(x.shape + (d,), dtype=np.float64)
    val[..., idx, idx] = x.value
    out = Node(val, (x,))

    def back(g):
        x._accumulate(g[..., idx, idx])

    out._backward = back
    return out


def reshape_last(x: Node, shape: Sequence[int]) -> Node:
    """Reshape the trailing axis into `shape` (e.g. (..., D*P) -> (..., D, P))."""
    shape = tuple(shape)
    if int(np.prod(shape)) != x.shape[-1]:
        raise ShapeError(f"reshape_last: cannot reshape {x.shape[-1]} into {shape}")
    new_shape = x.shape[:-1] + shape
    out = Node(x.value.reshape(new_shape), (x,))

    def back(g):
        x._accumulate(g.reshape(x.shape))

    out._backward = back
    return out


# ---------------------------------------------------------------------------
# graph evaluation


def forward(root: Node) -> float:
    """Return the cached terminal value of a scalar graph.

    Values are computed eagerly at construction, so this only validates that
    the graph really terminates in a scalar.
    """
    if root.value.shape != ():
        raise GradError(f"graph must terminate in a scalar, got shape {root.value.shape}")
    return float(root.value)


def _topo_order(root: Node) -> list[Node]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, params: ParamSet) -> None:
    """Backpropagate d(root)/d(leaf) into the ParamSet gradient buffer.

    The buffer is zeroed first; parameters absent from the graph therefore
    end up with an exact zero gradient. Repeated leaves of the same block
    accumulate.
    """
    forward(root)  # validates scalar terminal
    params.zero_grads()
    order = _topo_order(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    for node in order:
        if node.leaf_key is not None and node.grad is not None:
            params.grads[node.leaf_key] += node.grad


def finite_diff_check(
    loss_fn: Callable[[ParamSet], Node],
    params: ParamSet,
    step: float = 1e-5,
) -> float:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic given the parameters (all noise
    pre-drawn and fixed). Returns ``max_p |analytic_p - numeric_p| /
    max(1, |analytic_p|)``. Raises :class:`NonFiniteLossError` naming the
    parameter index whose perturbation produced a non-finite loss.
    """
    base = params.flat()
    root = loss_fn(params)
    if not np.isfinite(root.value):
        raise NonFiniteLossError("loss is non-finite at the evaluation point")
    backward(root, params)
    analytic = params.grad_flat()

    numeric = np.empty_like(analytic)
    vec = base.copy()
    try:
        for i in range(vec.size):
            orig = vec[i]
            vec[i] = orig + step
            params.set_flat(vec)
            hi = float(loss_fn(params).value)
            vec[i] = orig - step
            params.set_flat(vec)
            lo = float(loss_fn(params).value)
            vec[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteLossError(
                    f"non-finite loss while perturbing parameter index {i}", param_index=i
                )
            numeric[i] = (hi - lo) / (2.0 * step)
    finally:
        params.set_flat(base)
    denom = np.maximum(1.0, np.abs(analytic))
    return float(np.max(np.abs(analytic - numeric) / denom))
