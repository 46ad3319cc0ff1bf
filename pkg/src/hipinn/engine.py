"""Array-valued computation graphs with reverse-mode differentiation.

Every :class:`Node` holds a numpy array computed eagerly when the node is
created, plus the vector-Jacobian products needed to push gradients back to
its parents. Derivatives with respect to the *inputs* of a network are not
obtained by differentiating the graph; they are carried forward explicitly
inside a :class:`Jet` (value, input gradient, Laplacian), whose components are
themselves graph nodes. Reverse-mode differentiation with respect to the
parameters therefore applies on top of input derivatives without any
higher-order machinery.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Node",
    "ParamNode",
    "ParameterStore",
    "FrozenParameterError",
    "UnboundParameterError",
    "Jet",
    "DerivativeBundle",
    "constant",
    "sin",
    "cos",
    "tanh",
    "exp",
    "concat",
    "concat_jets",
    "affine",
    "evaluate",
    "input_derivatives",
    "parameter_gradient",
    "per_sample_gradient_norms",
    "backward",
]


class UnboundParameterError(KeyError):
    """A parameter name that is not part of the store's layout."""


class FrozenParameterError(RuntimeError):
    """Attempt to mutate a frozen parameter store."""


class _SliceGrad:
    # Sparse gradient contribution: ``g`` belongs at ``index`` of the parent.
    __slots__ = ("index", "g")

    def __init__(self, index, g):
        self.index = index
        self.g = g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Node:
    """A graph node holding an eagerly computed array.

    ``edges`` holds ``(parent, vjp, per_sample_vjp)`` triples for parents that
    require gradients; constants carry no edges.
    """

    __slots__ = ("value", "edges", "requires_grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, value, edges=()):
        self.value = value
        self.edges = tuple(e for e in edges if e[0].requires_grad)
        self.requires_grad = bool(self.edges)

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = _as_node(other)
        a, b = self.value, other.value
        return Node(
            a + b,
            (
                (self, lambda g: _unbroadcast(g, a.shape), None),
                (other, lambda g: _unbroadcast(g, b.shape), None),
            ),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_node(other)
        a, b = self.value, other.value
        return Node(
            a - b,
            (
                (self, lambda g: _unbroadcast(g, a.shape), None),
                (other, lambda g: -_unbroadcast(g, b.shape), None),
            ),
        )

    def __rsub__(self, other):
        return _as_node(other) - self

    def __mul__(self, other):
        other = _as_node(other)
        a, b = self.value, other.value
        return Node(
            a * b,
            (
                (self, lambda g: _unbroadcast(g * b, a.shape), None),
                (other, lambda g: _unbroadcast(g * a, b.shape), None),
            ),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_node(other)
        a, b = self.value, other.value
        out = a / b
        return Node(
            out,
            (
                (self, lambda g: _unbroadcast(g / b, a.shape), None),
                (other, lambda g: _unbroadcast(-g * out / b, b.shape), None),
            ),
        )

    def __rtruediv__(self, other):
        return _as_node(other) / self

    def __neg__(self):
        return Node(-self.value, ((self, lambda g: -g, None),))

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("only constant exponents are supported")
        a = self.value
        p = float(p)
        return Node(a**p, ((self, lambda g: g * p * a ** (p - 1.0), None),))

    def __matmul__(self, other):
        return affine(self, _as_node(other))

    def __getitem__(self, index):
        a = self.value
        return Node(a[index], ((self, lambda g: _SliceGrad(index, g), None),))

    # reductions and reshaping ---------------------------------------------
    def sum(self, axis=None):
        a = self.value
        out = a.sum(axis=axis)

        def vjp(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, a.shape)

        return Node(out, ((self, vjp, None),))

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / count)

    def reshape(self, *shape):
        a = self.value
        return Node(a.reshape(*shape), ((self, lambda g: g.reshape(a.shape), None),))

    def item(self):
        return float(self.value)


class ParamNode(Node):
    """Leaf referencing a named region of a :class:`ParameterStore`."""

    __slots__ = ("store", "name")

    def __init__(self, store, name):
        super().__init__(store.view(name))
        self.requires_grad = True
        self.store = store
        self.name = name


def constant(value) -> Node:
    return Node(np.asarray(value, dtype=float))


def _as_node(x):
    return x if isinstance(x, Node) else Node(np.asarray(x, dtype=float))


def sin(x: Node) -> Node:
    a = x.value
    return Node(np.sin(a), ((x, lambda g: g * np.cos(a), None),))


def cos(x: Node) -> Node:
    a = x.value
    return Node(np.cos(a), ((x, lambda g: -g * np.sin(a), None),))


def tanh(x: Node) -> Node:
    out = np.tanh(x.value)
    return Node(out, ((x, lambda g: g * (1.0 - out * out), None),))


def exp(x: Node) -> Node:
    out = np.exp(x.value)
    return Node(out, ((x, lambda g: g * out, None),))


def concat(nodes: Sequence[Node], axis: int = -1) -> Node:
    nodes = [_as_node(n) for n in nodes]
    vals = [n.value for n in nodes]
    out = np.concatenate(vals, axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])
    edges = []
    for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
        idx = (slice(None),) * ax + (slice(lo, hi),)
        edges.append((n, lambda g, idx=idx: g[idx], None))
    return Node(out, edges)


def affine(x: Node, w: Node, b: Node | None = None, bias_rows: int | None = None) -> Node:
    """``x @ w + b`` for ``x`` of shape ``(..., N, in)``.

    With ``bias_rows=k`` the bias is added only to the first ``k`` entries of
    axis 0, which is how a jet adds a bias to its value row alone.
    """
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        if bias_rows is None:
            out = out + b.value
        else:
            out[:bias_rows] += b.value
    flat_in = xv.reshape(-1, xv.shape[-1])

    def vjp_x(g):
        return g @ wv.T

    def vjp_w(g):
        return flat_in.T @ g.reshape(-1, g.shape[-1])

    def ps_vjp_w(g):
        # per-sample weight gradients; samples live on axis -2
        if xv.ndim == 1:
            return np.multiply.outer(xv, g)[None]
        xs = xv.reshape(-1, *xv.shape[-2:])
        gs = g.reshape(-1, *g.shape[-2:])
        return np.matmul(xs.transpose(1, 2, 0), gs.transpose(1, 0, 2))

    edges = [(x, vjp_x, None), (w, vjp_w, ps_vjp_w)]
    if b is not None:
        rows = slice(None) if bias_rows is None else slice(0, bias_rows)

        def vjp_b(g):
            return _unbroadcast(g[rows], b.value.shape)

        def ps_vjp_b(g):
            gr = g[rows]
            if gr.ndim == 1:
                return gr[None]
            gr = gr.reshape(-1, *gr.shape[-2:]).sum(axis=0)
            return gr.reshape(gr.shape[0], *b.value.shape)

        edges.append((b, vjp_b, ps_vjp_b))
    return Node(out, edges)


# ---------------------------------------------------------------------------
# reverse sweep


def _topo_order(root: Node):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _, _ in node.edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _accumulate(grads, owned, node, contrib, shape):
    key = id(node)
    cur = grads.get(key)
    if isinstance(contrib, _SliceGrad):
        if cur is None:
            cur = np.zeros(shape)
        elif key not in owned:
            cur = np.array(cur)
        grads[key] = cur
        owned.add(key)
        cur[contrib.index] += contrib.g
        return
    if cur is None:
        grads[key] = contrib
    else:
        grads[key] = cur + contrib
        owned.add(key)


def backward(root: Node, seed=None, per_sample: bool = False):
    """Run the reverse sweep from ``root``.

    Returns ``(leaf_grads, generic)`` where ``leaf_grads`` lists
    ``(ParamNode, gradient)`` pairs. In per-sample mode parameter gradients
    carry a leading sample axis, and ``generic`` reports whether some
    parameter was reached through an operation without a per-sample rule.
    """
    if seed is None:
        seed = np.ones_like(root.value)
    grads = {id(root): np.asarray(seed, dtype=float)}
    owned: set[int] = set()
    ps_grads: dict[int, np.ndarray] = {}
    leaves: dict[int, ParamNode] = {}
    generic = False
    for node in _topo_order(root):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if isinstance(node, ParamNode):
            leaves[id(node)] = node
            if not per_sample:
                ps_grads[id(node)] = g
            continue
        for parent, vjp, ps_vjp in node.edges:
            if per_sample and isinstance(parent, ParamNode):
                leaves[id(parent)] = parent
                if ps_vjp is None:
                    generic = True
                    continue
                contrib = ps_vjp(g)
                prev = ps_grads.get(id(parent))
                ps_grads[id(parent)] = contrib if prev is None else prev + contrib
                continue
            _accumulate(grads, owned, parent, vjp(g), parent.value.shape)
    out = [(leaf, ps_grads[k]) for k, leaf in leaves.items() if k in ps_grads]
    return out, generic


def parameter_gradient(loss: Node, params: "ParameterStore") -> np.ndarray:
    """Gradient of a scalar ``loss`` with respect to every entry of ``params``."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ValueError(f"loss must be scalar, got shape {loss.value.shape}")
    flat = np.zeros_like(params.values)
    if not loss.requires_grad:
        return flat
    leaf_grads, _ = backward(loss)
    for leaf, g in leaf_grads:
        if leaf.store is params:
            flat[params.slice(leaf.name)] += np.reshape(g, -1)
    return flat


def per_sample_gradient_norms(residuals, params: "ParameterStore") -> np.ndarray:
    """Squared parameter-gradient norm of each residual entry.

    ``residuals`` is a vector node (one entry per sample) or a list of scalar
    nodes. Samples must not interact through the graph; every network built
    from :func:`affine` layers satisfies this.
    """
    if isinstance(residuals, (list, tuple)):
        for r in residuals:
            if r.value.size != 1:
                raise ValueError("per-sample residuals must be scalar")
        residuals = concat([r.reshape(1) for r in residuals], axis=0)
    if residuals.value.ndim != 1:
        raise ValueError("residuals must be a vector of per-sample scalars")
    n = residuals.value.shape[0]
    if not residuals.requires_grad:
        return np.zeros(n)
    leaf_grads, generic = backward(residuals, per_sample=True)
    if generic:
        return _per_sample_norms_loop(residuals, params)
    flat = np.zeros((n, params.size))
    for leaf, g in leaf_grads:
        if leaf.store is params:
            flat[:, params.slice(leaf.name)] += g.reshape(n, -1)
    return np.einsum("ij,ij->i", flat, flat)


def _per_sample_norms_loop(residuals: Node, params) -> np.ndarray:
    n = residuals.value.shape[0]
    out = np.empty(n)
    for i in range(n):
        seed = np.zeros(n)
        seed[i] = 1.0
        flat = np.zeros(params.size)
        leaf_grads, _ = backward(residuals, seed=seed)
        for leaf, g in leaf_grads:
            if leaf.store is params:
                flat[params.slice(leaf.name)] += np.reshape(g, -1)
        out[i] = flat @ flat
    return out


# ---------------------------------------------------------------------------
# parameter storage


class ParameterStore:
    """Flat parameter vector with a named layout.

    Parameters
    ----------
    layout : sequence of (name, shape)
        Regions in storage order; they tile the flat array without gaps.
    values : array, optional
        Initial flat values, zeros when omitted.
    """

    def __init__(self, layout, values=None, frozen: bool = False):
        self.layout = [(str(name), tuple(int(s) for s in shape)) for name, shape in layout]
        self._slices = {}
        offset = 0
        for name, shape in self.layout:
            if name in self._slices:
                raise ValueError(f"duplicate parameter name {name!r}")
            size = int(np.prod(shape, dtype=int))
            self._slices[name] = (slice(offset, offset + size), shape)
            offset += size
        self.size = offset
        if values is None:
            self.values = np.zeros(offset)
        else:
            self.values = np.array(values, dtype=float).reshape(-1)
            if self.values.size != offset:
                raise ValueError(f"expected {offset} values, got {self.values.size}")
        self.frozen = frozen

    def __len__(self):
        return self.size

    def names(self):
        return [name for name, _ in self.layout]

    def slice(self, name) -> slice:
        try:
            return self._slices[name][0]
        except KeyError:
            raise UnboundParameterError(name) from None

    def view(self, name) -> np.ndarray:
        try:
            sl, shape = self._slices[name]
        except KeyError:
            raise UnboundParameterError(name) from None
        return self.values[sl].reshape(shape)

    def node(self, name) -> Node:
        """Graph reference to a parameter region; constant when frozen."""
        if self.frozen:
            return Node(self.view(name).copy())
        return ParamNode(self, name)

    def freeze(self):
        self.frozen = True
        return self

    def unfreeze(self):
        self.frozen = False
        return self

    def copy(self):
        return ParameterStore(self.layout, self.values.copy(), self.frozen)

    def assign(self, values):
        if self.frozen:
            raise FrozenParameterError("cannot assign to a frozen parameter store")
        self.values[:] = values


# ---------------------------------------------------------------------------
# input jets


class Jet:
    """A field together with its input gradient and Laplacian.

    The underlying node stacks, along axis 0, the value (row 0), then one row
    per input direction for the gradient (when ``order >= 1``), then the
    Laplacian (when ``order == 2``). Remaining axes are ``(N, *features)``.
    """

    __slots__ = ("node", "n", "order")

    def __init__(self, node: Node, n: int, order: int):
        self.node = node
        self.n = n
        self.order = order

    @classmethod
    def from_input(cls, x, order: int = 2) -> "Jet":
        x = np.asarray(x, dtype=float)
        if x.ndim != 2:
            raise ValueError("inputs must have shape (N, n)")
        N, n = x.shape
        rows = [x[None]]
        if order >= 1:
            eye = np.zeros((n, N, n))
            for k in range(n):
                eye[k, :, k] = 1.0
            rows.append(eye)
        if order >= 2:
            rows.append(np.zeros((1, N, n)))
        return cls(Node(np.concatenate(rows, axis=0)), n, order)

    @classmethod
    def constant_field(cls, value, n: int, order: int) -> "Jet":
        value = np.asarray(value, dtype=float)
        k = cls.rows_for(n, order)
        stacked = np.zeros((k,) + value.shape)
        stacked[0] = value
        return cls(Node(stacked), n, order)

    @staticmethod
    def rows_for(n: int, order: int) -> int:
        return 1 + (n if order >= 1 else 0) + (1 if order >= 2 else 0)

    # component access ------------------------------------------------------
    @property
    def value(self) -> Node:
        return self.node[0]

    @property
    def grad(self) -> Node:
        if self.order < 1:
            raise ValueError("jet carries no gradient")
        return self.node[1 : 1 + self.n]

    @property
    def lap(self) -> Node:
        if self.order < 2:
            raise ValueError("jet carries no Laplacian")
        return self.node[1 + self.n]

    @property
    def shape(self):
        return self.node.value.shape[1:]

    def _wrap(self, node):
        return Jet(node, self.n, self.order)

    def _stack(self, value, grad=None, lap=None):
        parts = [value.reshape(1, *value.shape)]
        if self.order >= 1:
            parts.append(grad)
        if self.order >= 2:
            parts.append(lap.reshape(1, *lap.shape))
        return self._wrap(concat(parts, axis=0))

    def _check(self, other):
        if other.n != self.n or other.order != self.order:
            raise ValueError("jets differ in input dimension or order")

    # linear operations act on the stacked node directly ----------------------
    def __add__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return self._wrap(self.node + other.node)
        return self._wrap(self.node + self._pad(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Jet):
            self._check(other)
            return self._wrap(self.node - other.node)
        return self._wrap(self.node - self._pad(other))

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        return self._wrap(-self.node)

    def _pad(self, c):
        # constant offset: only the value row moves
        c = np.asarray(c, dtype=float)
        k = self.node.value.shape[0]
        padded = np.zeros((k,) + np.broadcast_shapes(c.shape, self.shape))
        padded[0] = c
        return Node(padded)

    def __mul__(self, other):
        if not isinstance(other, Jet):
            other = np.asarray(other, dtype=float) if not isinstance(other, Node) else other
            return self._wrap(self.node * other)
        self._check(other)
        a, b = self.value, other.value
        if self.order == 0:
            return self._wrap(self.node * other.node)
        ga, gb = self.grad, other.grad
        grad = a * gb + b * ga
        lap = None
        if self.order >= 2:
            lap = a * other.lap + b * self.lap + 2.0 * (ga * gb).sum(axis=0)
        return self._stack(a * b, grad, lap)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Jet):
            return self * other.reciprocal()
        return self * (1.0 / np.asarray(other, dtype=float))

    def __rtruediv__(self, other):
        return self.reciprocal() * other

    def reciprocal(self):
        return self**-1.0

    def __getitem__(self, index):
        if not isinstance(index, tuple):
            index = (index,)
        return self._wrap(self.node[(slice(None), slice(None)) + index])

    def affine(self, w: Node, b: Node | None = None) -> "Jet":
        return self._wrap(affine(self.node, w, b, bias_rows=1))

    def sum(self, axis=-1):
        if axis < 0:
            axis = len(self.shape) + axis
        return self._wrap(self.node.sum(axis=axis + 1))

    # nonlinear maps ---------------------------------------------------------
    def apply(self, derivs) -> "Jet":
        """Compose with a scalar function.

        ``derivs(v)`` returns the function and its first three derivatives
        evaluated at ``v``; the third is needed by the reverse sweep.
        """
        return self._wrap(_jet_unary(self.node, self.n, self.order, derivs))

    def tanh(self):
        return self.apply(_tanh_derivs)

    def sin(self):
        return self.apply(_sin_derivs)

    def cos(self):
        return self.apply(_cos_derivs)

    def exp(self):
        return self.apply(_exp_derivs)

    def __pow__(self, p):
        p = float(p)

        def derivs(v):
            return (
                v**p,
                p * v ** (p - 1),
                p * (p - 1) * v ** (p - 2),
                p * (p - 1) * (p - 2) * v ** (p - 3),
            )

        return self.apply(derivs)


def _tanh_derivs(v):
    s = np.tanh(v)
    d1 = 1.0 - s * s
    d2 = -2.0 * s * d1
    d3 = -2.0 * d1 * (d1 - 2.0 * s * s)
    return s, d1, d2, d3


def _sin_derivs(v):
    s, c = np.sin(v), np.cos(v)
    return s, c, -s, -c


def _cos_derivs(v):
    s, c = np.sin(v), np.cos(v)
    return c, -s, -c, s


def _exp_derivs(v):
    e = np.exp(v)
    return e, e, e, e


def _jet_unary(node: Node, n: int, order: int, derivs) -> Node:
    # chain rule on a stacked jet: f(v); f'(v) G; f'(v) L + f''(v) |G|^2
    J = node.value
    f0, f1, f2, f3 = derivs(J[0])
    out = np.empty_like(J)
    out[0] = f0
    if order >= 1:
        G = J[1 : 1 + n]
        out[1 : 1 + n] = f1 * G
    if order >= 2:
        L = J[1 + n]
        sq = (G * G).sum(axis=0)
        out[1 + n] = f1 * L + f2 * sq

    def vjp(g):
        dJ = np.empty_like(J)
        dv = g[0] * f1
        if order >= 1:
            gG = g[1 : 1 + n]
            dJ[1 : 1 + n] = gG * f1
            dv += f2 * (gG * G).sum(axis=0)
        if order >= 2:
            gL = g[1 + n]
            dJ[1 + n] = gL * f1
            dJ[1 : 1 + n] += (2.0 * gL * f2) * G
            dv += gL * (f2 * L + f3 * sq)
        dJ[0] = dv
        return dJ

    return Node(out, ((node, vjp, None),))


def concat_jets(jets: Sequence[Jet], axis: int = -1) -> Jet:
    first = jets[0]
    for j in jets[1:]:
        first._check(j)
    node_axis = axis if axis < 0 else axis + 1
    return Jet(concat([j.node for j in jets], axis=node_axis), first.n, first.order)


# ---------------------------------------------------------------------------
# pointwise evaluation API

Builder = Callable[[Jet, "ParameterStore | None"], Jet]


@dataclass
class DerivativeBundle:
    """Value, input gradient and Laplacian at one or many points."""

    value: np.ndarray
    grad_x: np.ndarray
    laplacian: np.ndarray


def _as_batch(x, input_dim=None):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None]
    if x.ndim != 2:
        raise ValueError(f"expected a point or an (N, n) batch, got shape {x.shape}")
    if input_dim is not None and x.shape[1] != input_dim:
        raise ValueError(f"input dimension {x.shape[1]} does not match {input_dim}")
    return x, single


def _scalar_rows(jet: Jet) -> np.ndarray:
    out = jet.node.value
    if out.ndim == 3 and out.shape[-1] == 1:
        out = out[..., 0]
    if out.ndim != 2:
        raise ValueError(f"expression is not scalar-valued (shape {out.shape[1:]})")
    return out


def evaluate(builder: Builder, x, params=None):
    """Value of a scalar expression at a point or a batch of points."""
    xb, single = _as_batch(x, getattr(builder, "input_dim", None))
    vals = _scalar_rows(builder(Jet.from_input(xb, order=0), params))[0]
    return float(vals[0]) if single else vals


def input_derivatives(builder: Builder, x, params=None) -> DerivativeBundle:
    """Value, gradient and Laplacian with respect to the input."""
    xb, single = _as_batch(x, getattr(builder, "input_dim", None))
    n = xb.shape[1]
    rows = _scalar_rows(builder(Jet.from_input(xb, order=2), params))
    value, grad, lap = rows[0], rows[1 : 1 + n].T, rows[1 + n]
    if single:
        return DerivativeBundle(float(value[0]), grad[0].copy(), float(lap[0]))
    return DerivativeBundle(value, np.ascontiguousarray(grad), lap)
