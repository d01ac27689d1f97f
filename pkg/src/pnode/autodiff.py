"""Reverse-mode automatic differentiation on a linear tape.

The primitive set is deliberately tiny: constant, add, scale, matvec,
tanh, dot, square. Anything richer (slicing, concatenation) is composed
from these with constant selector matrices. Nonsmooth library pieces
(manifold projection, the stabilization force, constraint residuals)
enter the tape as custom nodes carrying their own vector-Jacobian rule,
so the backward pass never differentiates through an inner Newton loop.

Forward values are computed eagerly at record time and stored on the
tape; a tape is single-threaded, but independent tapes are independent.
"""

import numpy as np

# opcodes
_CONST = 0
_ADD = 1
_SCALE = 2
_MATVEC = 3
_TANH = 4
_DOT = 5
_SQUARE = 6
_CUSTOM = 7

_OP_NAMES = {
    "constant": _CONST, "add": _ADD, "scale": _SCALE, "matvec": _MATVEC,
    "tanh": _TANH, "dot": _DOT, "square": _SQUARE,
}


def _shape(v):
    return np.shape(v)


class Tape:
    """Append-only record of primitive operations with eager forward values."""

    def __init__(self):
        self.ops = []       # opcode per node
        self.parents = []   # tuple of parent node ids
        self.values = []    # forward value per node (float or ndarray)
        self.aux = []       # per-op payload (scale factor, custom vjp)

    def __len__(self):
        return len(self.ops)

    def value(self, node):
        return self.values[node]

    def _append(self, op, parents, value, aux=None):
        self.ops.append(op)
        self.parents.append(parents)
        self.values.append(value)
        self.aux.append(aux)
        return len(self.ops) - 1

    def _check(self, *nodes):
        n = len(self.ops)
        for node in nodes:
            if not 0 <= node < n:
                raise ValueError(f"node {node} is not on this tape")

    # -- primitives ------------------------------------------------------

    def constant(self, value):
        if np.isscalar(value):
            return self._append(_CONST, (), float(value))
        return self._append(_CONST, (), np.asarray(value, dtype=float))

    def add(self, a, b):
        self._check(a, b)
        va, vb = self.values[a], self.values[b]
        if _shape(va) != _shape(vb):
            raise ValueError(f"add shape mismatch: {_shape(va)} vs {_shape(vb)}")
        return self._append(_ADD, (a, b), va + vb)

    def scale(self, a, alpha):
        self._check(a)
        return self._append(_SCALE, (a,), self.values[a] * alpha, float(alpha))

    def matvec(self, a, x):
        self._check(a, x)
        va, vx = self.values[a], self.values[x]
        if np.ndim(va) != 2 or np.ndim(vx) != 1 or va.shape[1] != vx.shape[0]:
            raise ValueError(f"matvec shape mismatch: {_shape(va)} vs {_shape(vx)}")
        return self._append(_MATVEC, (a, x), va @ vx)

    def tanh(self, a):
        self._check(a)
        return self._append(_TANH, (a,), np.tanh(self.values[a]))

    def dot(self, a, b):
        self._check(a, b)
        va, vb = self.values[a], self.values[b]
        if np.ndim(va) != 1 or _shape(va) != _shape(vb):
            raise ValueError(f"dot shape mismatch: {_shape(va)} vs {_shape(vb)}")
        return self._append(_DOT, (a, b), float(va @ vb))

    def square(self, a):
        self._check(a)
        v = self.values[a]
        return self._append(_SQUARE, (a,), v * v)

    def custom(self, value, parent_nodes, vjp):
        """Record an opaque operation with an explicit backward rule.

        ``vjp(cotangent)`` must return one cotangent per parent, in order.
        """
        self._check(*parent_nodes)
        return self._append(_CUSTOM, tuple(parent_nodes), value, vjp)

    def record(self, op, inputs, aux=None):
        """Name-based entry point mirroring the primitive list."""
        if op == "constant":
            return self.constant(aux)
        if op == "scale":
            return self.scale(inputs[0], aux)
        if op in ("add", "dot"):
            return getattr(self, op)(inputs[0], inputs[1])
        if op == "matvec":
            return self.matvec(inputs[0], inputs[1])
        if op in ("tanh", "square"):
            return getattr(self, op)(inputs[0])
        raise ValueError(f"unknown primitive {op!r}")

    # -- reverse pass ----------------------------------------------------

    def backward(self, seed_node, cotangent=1.0):
        """Accumulate d(cotangent . value[seed]) / d(leaf) for every node.

        Returns a list indexed by node id; entries are None for nodes the
        seed does not reach. Leaf (constant) gradients are the useful part.
        """
        self._check(seed_node)
        seed_val = self.values[seed_node]
        if _shape(cotangent) != _shape(seed_val):
            cotangent = np.broadcast_to(np.asarray(cotangent, dtype=float), _shape(seed_val))
        adj = [None] * len(self.ops)
        adj[seed_node] = cotangent if np.isscalar(seed_val) else np.array(cotangent, dtype=float)
        ops, parents, values, aux = self.ops, self.parents, self.values, self.aux
        for i in range(seed_node, -1, -1):
            g = adj[i]
            if g is None:
                continue
            op = ops[i]
            if op == _CONST:
                continue
            par = parents[i]
            if op == _ADD:
                _acc(adj, par[0], g)
                _acc(adj, par[1], g)
            elif op == _SCALE:
                _acc(adj, par[0], g * aux[i])
            elif op == _MATVEC:
                a, x = par
                _acc(adj, a, np.outer(g, values[x]))
                _acc(adj, x, values[a].T @ g)
            elif op == _TANH:
                y = values[i]
                _acc(adj, par[0], g * (1.0 - y * y))
            elif op == _DOT:
                a, b = par
                _acc(adj, a, g * values[b])
                _acc(adj, b, g * values[a])
            elif op == _SQUARE:
                _acc(adj, par[0], 2.0 * g * values[par[0]])
            elif op == _CUSTOM:
                pulls = aux[i](g)
                for p, pull in zip(par, pulls):
                    if pull is not None:
                        _acc(adj, p, pull)
        return adj

    def gradients(self, seed_node, leaf_nodes, cotangent=1.0):
        """Gradients of the seed w.r.t. the given leaves (zeros if unreached)."""
        adj = self.backward(seed_node, cotangent)
        out = []
        for leaf in leaf_nodes:
            g = adj[leaf]
            if g is None:
                v = self.values[leaf]
                g = 0.0 if np.isscalar(v) else np.zeros_like(v)
            out.append(g)
        return out


def _acc(adj, node, g):
    cur = adj[node]
    adj[node] = g if cur is None else cur + g
