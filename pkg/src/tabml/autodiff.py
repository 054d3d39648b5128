"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records primitive operations in execution order; node ids are
plain integers, so the recording is topologically ordered by construction.
``backward`` sweeps the nodes once in reverse and returns the adjoint of every
leaf.

The primitive set is deliberately small.  Besides the elementwise and
reduction primitives there is ``slice`` (view a flat segment as a shaped
array), ``bias_add`` (row-broadcast of a vector) and the fused ``lstm``
sequence primitive, whose recurrence runs in :mod:`tabml.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name):
    def register(cls):
        PRIMITIVES[name] = Primitive(cls.forward, cls.vjp)
        return cls

    return register


def _same_shape(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")


@primitive("matmul")
class _MatMul:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return a @ b, None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        a, b = vals
        return g @ b.T, a.T @ g


@primitive("add")
class _Add:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _same_shape("add", a, b)
        return a + b, None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return g, g


@primitive("mul")
class _Mul:
    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _same_shape("mul", a, b)
        return a * b, None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        a, b = vals
        return g * b, g * a


@primitive("scale")
class _Scale:
    @staticmethod
    def forward(vals, attrs):
        return attrs["c"] * vals[0], None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (attrs["c"] * g,)


@primitive("bias_add")
class _BiasAdd:
    @staticmethod
    def forward(vals, attrs):
        x, b = vals
        if b.ndim != 1 or x.ndim != 2 or x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias_add: cannot add {b.shape} to rows of {x.shape}")
        return x + b, None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return g, g.sum(axis=0)


@primitive("tanh")
class _Tanh:
    @staticmethod
    def forward(vals, attrs):
        return np.tanh(vals[0]), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g * (1.0 - out * out),)


@primitive("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(vals, attrs):
        return kernels._sigmoid(np.asarray(vals[0], dtype=np.float64)), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g * out * (1.0 - out),)


@primitive("softplus")
class _Softplus:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        return np.logaddexp(0.0, x), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g * kernels._sigmoid(np.asarray(vals[0], dtype=np.float64)),)


@primitive("exp")
class _Exp:
    @staticmethod
    def forward(vals, attrs):
        return np.exp(vals[0]), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g * out,)


@primitive("log")
class _Log:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        if np.any(x <= 0):
            raise ValueError("log: non-positive input")
        return np.log(x), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g / vals[0],)


@primitive("concat")
class _Concat:
    @staticmethod
    def forward(vals, attrs):
        axis = attrs["axis"]
        ref = vals[0].shape
        for v in vals[1:]:
            if v.ndim != len(ref) or any(
                v.shape[k] != ref[k] for k in range(len(ref)) if k != axis % len(ref)
            ):
                raise ShapeError(f"concat: shapes {[x.shape for x in vals]} disagree off axis {axis}")
        return np.concatenate(vals, axis=axis), [v.shape[axis] for v in vals]

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        cuts = np.cumsum(ctx)[:-1]
        return tuple(np.split(g, cuts, axis=attrs["axis"]))


@primitive("gather")
class _Gather:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        idx = attrs["idx"]
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ShapeError(f"gather: index out of range for {x.shape[0]} rows")
        return x[idx], None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        gx = np.zeros_like(vals[0])
        np.add.at(gx, attrs["idx"], g)
        return (gx,)


@primitive("sum")
class _Sum:
    @staticmethod
    def forward(vals, attrs):
        return np.asarray(vals[0].sum()), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (np.full(vals[0].shape, float(g)),)


@primitive("mean")
class _Mean:
    @staticmethod
    def forward(vals, attrs):
        return np.asarray(vals[0].mean()), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        n = vals[0].size
        return (np.full(vals[0].shape, float(g) / n),)


@primitive("dropout")
class _Dropout:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        mask = attrs["mask"]
        if mask.shape != x.shape:
            raise ShapeError(f"dropout: mask {mask.shape} vs input {x.shape}")
        keep = 1.0 - attrs["rate"]
        return x * mask / keep, None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        return (g * attrs["mask"] / (1.0 - attrs["rate"]),)


@primitive("slice")
class _Slice:
    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        off, shape = attrs["offset"], attrs["shape"]
        n = int(np.prod(shape))
        if x.ndim != 1 or off + n > x.shape[0]:
            raise ShapeError(f"slice: [{off}:{off + n}] outside flat array {x.shape}")
        return x[off : off + n].reshape(shape), None

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        gx = np.zeros_like(vals[0])
        off = attrs["offset"]
        gx[off : off + g.size] = g.ravel()
        return (gx,)


@primitive("lstm")
class _LSTM:
    """Final hidden state of a unidirectional LSTM over padded sequences.

    inputs: x (B, T, D), w_x (D, 4H), w_h (H, 4H), b (4H,)
    attrs: lengths (B,) ints, reverse (bool)
    """

    @staticmethod
    def forward(vals, attrs):
        x, w_x, w_h, b = vals
        lengths = attrs["lengths"]
        if x.ndim != 3 or w_x.ndim != 2 or w_x.shape[0] != x.shape[2]:
            raise ShapeError(f"lstm: input {x.shape} incompatible with W_x {w_x.shape}")
        G = w_x.shape[1]
        if G % 4 or w_h.shape != (G // 4, G) or b.shape != (G,):
            raise ShapeError(f"lstm: W_h {w_h.shape} / b {b.shape} do not match W_x {w_x.shape}")
        if lengths.shape != (x.shape[0],):
            raise ShapeError(f"lstm: lengths {lengths.shape} vs batch {x.shape[0]}")
        B, T, D = x.shape
        xproj = x.reshape(B * T, D) @ w_x
        xproj += b
        xproj = xproj.reshape(B, T, G)
        return kernels.lstm_forward(xproj, lengths, w_h, attrs.get("reverse", False))

    @staticmethod
    def vjp(g, vals, out, ctx, attrs):
        x, w_x, w_h, _ = vals
        B, T, D = x.shape
        G = w_x.shape[1]
        d_xproj, d_w_h = kernels.lstm_backward(
            g, attrs["lengths"], w_h, ctx, attrs.get("reverse", False)
        )
        dp = d_xproj.reshape(B * T, G)
        d_x = (dp @ w_x.T).reshape(B, T, D) if attrs["needs"][0] else None
        d_w_x = x.reshape(B * T, D).T @ dp
        return d_x, d_w_x, d_w_h, dp.sum(axis=0)


class Tape:
    """Single-owner recording of a computation.

    >>> tape = Tape()
    >>> x = tape.leaf(np.array([3.0]))
    >>> loss = tape.sum(tape.mul(x, x))
    >>> tape.backward(loss)[x]
    array([6.])
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.kinds: list[str] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list[dict] = []
        self._ctx: list = []
        self._live: list[bool] = []
        self.adjoints: dict[int, np.ndarray] = {}
        self.backward_visits = 0

    def __len__(self):
        return len(self.values)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def leaf(self, value) -> int:
        arr = np.array(value, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"leaf: empty shape {arr.shape}")
        return self._append("leaf", (), {}, arr, None)

    def const(self, value) -> int:
        """Like :meth:`leaf` but never differentiated (data, noise, masks)."""
        arr = np.array(value, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"const: empty shape {arr.shape}")
        return self._append("const", (), {}, arr, None)

    def _append(self, kind, inputs, attrs, value, ctx) -> int:
        self._live.append(kind == "leaf" or any(self._live[i] for i in inputs))
        self.values.append(value)
        self.kinds.append(kind)
        self._inputs.append(tuple(inputs))
        self._attrs.append(attrs)
        self._ctx.append(ctx)
        return len(self.values) - 1

    def record(self, kind: str, inputs, **attrs) -> int:
        if kind not in PRIMITIVES:
            raise KeyError(f"unknown primitive {kind!r}")
        n = len(self.values)
        for i in inputs:
            if not 0 <= i < n:
                raise IndexError(f"{kind}: input node {i} is not on the tape")
        prim = PRIMITIVES[kind]
        attrs["needs"] = tuple(self._live[i] for i in inputs)
        vals = [self.values[i] for i in inputs]
        out, ctx = prim.forward(vals, attrs)
        return self._append(kind, inputs, attrs, np.asarray(out, dtype=np.float64), ctx)

    # thin wrappers so model code reads naturally
    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("add", (a, self.record("scale", (b,), c=-1.0)))

    def mul(self, a, b):
        return self.record("mul", (a, b))

    def scale(self, a, c: float):
        return self.record("scale", (a,), c=float(c))

    def bias_add(self, x, b):
        return self.record("bias_add", (x, b))

    def tanh(self, a):
        return self.record("tanh", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def softplus(self, a):
        return self.record("softplus", (a,))

    def exp(self, a):
        return self.record("exp", (a,))

    def log(self, a):
        return self.record("log", (a,))

    def concat(self, nodes, axis=-1):
        return self.record("concat", tuple(nodes), axis=axis)

    def gather(self, x, idx):
        return self.record("gather", (x,), idx=np.asarray(idx, dtype=np.int64))

    def sum(self, a):
        return self.record("sum", (a,))

    def mean(self, a):
        return self.record("mean", (a,))

    def dropout(self, a, mask, rate: float):
        return self.record("dropout", (a,), mask=np.asarray(mask, dtype=np.float64), rate=float(rate))

    def slice(self, flat, offset: int, shape):
        return self.record("slice", (flat,), offset=int(offset), shape=tuple(shape))

    def lstm(self, x, w_x, w_h, b, lengths, reverse=False):
        return self.record(
            "lstm", (x, w_x, w_h, b), lengths=np.asarray(lengths, dtype=np.int64), reverse=bool(reverse)
        )

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Accumulate adjoints from scalar node ``loss``; return leaf gradients."""
        out = self.values[loss]
        if out.size != 1:
            raise ShapeError(f"backward: loss node {loss} has shape {out.shape}, expected a scalar")
        adj: dict[int, np.ndarray] = {loss: np.ones_like(out)}
        for node in range(loss, -1, -1):
            self.backward_visits += 1
            g = adj.get(node)
            if g is None or not self._inputs[node]:
                continue
            ins = self._inputs[node]
            grads = PRIMITIVES[self.kinds[node]].vjp(
                g, [self.values[i] for i in ins], self.values[node], self._ctx[node], self._attrs[node]
            )
            for i, gi in zip(ins, grads):
                if not self._live[i]:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = np.asarray(gi, dtype=np.float64)
        self.adjoints = adj
        return {
            i: adj.get(i, np.zeros_like(self.values[i]))
            for i in range(loss + 1)
            if self.kinds[i] == "leaf"
        }


def finite_diff_check(builder, params, step: float = 1e-4, grad=None) -> float:
    """Largest relative error between the tape gradient and central differences.

    ``builder(tape, leaf_id) -> loss_node`` must be deterministic: the same
    ``params`` have to produce the same loss on every call.  The error per
    coordinate is ``|analytic - fd| / max(1, |fd|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = np.array(params, dtype=np.float64)

    def evaluate(p):
        tape = Tape()
        leaf = tape.leaf(p)
        return tape, leaf, builder(tape, leaf)

    tape, leaf, loss = evaluate(params)
    again = evaluate(params)
    if float(again[0].value(again[2])) != float(tape.value(loss)):
        raise RuntimeError("builder is not deterministic: two forward passes disagree")
    if grad is None:
        grad = tape.backward(loss)[leaf]
    flat = params.ravel()
    analytic = np.asarray(grad).ravel()
    worst = 0.0
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        t1, _, l1 = evaluate(flat.reshape(params.shape))
        fp = float(t1.value(l1))
        flat[k] = old - step
        t2, _, l2 = evaluate(flat.reshape(params.shape))
        fm = float(t2.value(l2))
        flat[k] = old
        fd = (fp - fm) / (2.0 * step)
        worst = max(worst, abs(analytic[k] - fd) / max(1.0, abs(fd)))
    return worst
