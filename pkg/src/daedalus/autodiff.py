"""Define-then-run reverse-mode differentiation over numpy arrays.

A :class:`TapeBuilder` records primitive operations into an immutable
:class:`Tape`. Evaluating the tape on a binding of named inputs returns a
:class:`Forward` record holding every intermediate buffer; the backward pass
reads those buffers, so one tape can be evaluated concurrently on different
inputs.

Example::

    tb = TapeBuilder()
    x = tb.input("x", (3,))
    y = tb.sum(tb.sigmoid(x))
    tape = tb.build(y=y)
    fwd = tape.eval({"x": np.zeros(3)})
    fwd.gradient("y", "x")   # -> [0.25, 0.25, 0.25]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

__all__ = [
    "ShapeError",
    "Var",
    "Node",
    "Tape",
    "TapeBuilder",
    "Forward",
    "OPS",
    "check_gradient",
]


class ShapeError(ValueError):
    """Raised when an operand or bound input has an inconsistent shape."""

    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass(frozen=True)
class Node:
    id: int
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    attrs: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class OpRule:
    forward: Callable  # (values, attrs) -> (out, aux)
    backward: Callable  # (g, values, out, aux, attrs, need) -> list of grads
    shape: Callable  # (shapes, attrs) -> out shape


OPS: dict[str, OpRule] = {}


def _register(kind, shape):
    def deco(cls_fns):
        fwd, bwd = cls_fns()
        OPS[kind] = OpRule(fwd, bwd, shape)
        return cls_fns

    return deco


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    nlead = g.ndim - len(shape)
    if nlead:
        g = g.sum(axis=tuple(range(nlead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bshape(shapes, attrs):
    return tuple(np.broadcast_shapes(*shapes))


def _same(shapes, attrs):
    return shapes[0]


# -- elementwise binary ------------------------------------------------------


@_register("add", _bshape)
def _add():
    def f(v, a):
        return v[0] + v[1], None

    def b(g, v, out, aux, a, need):
        return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]

    return f, b


@_register("sub", _bshape)
def _sub():
    def f(v, a):
        return v[0] - v[1], None

    def b(g, v, out, aux, a, need):
        return [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]

    return f, b


@_register("mul", _bshape)
def _mul():
    def f(v, a):
        return v[0] * v[1], None

    def b(g, v, out, aux, a, need):
        return [
            _unbroadcast(g * v[1], v[0].shape) if need[0] else None,
            _unbroadcast(g * v[0], v[1].shape) if need[1] else None,
        ]

    return f, b


@_register("div", _bshape)
def _div():
    def f(v, a):
        return v[0] / v[1], None

    def b(g, v, out, aux, a, need):
        return [
            _unbroadcast(g / v[1], v[0].shape) if need[0] else None,
            _unbroadcast(-g * out / v[1], v[1].shape) if need[1] else None,
        ]

    return f, b


# -- elementwise unary -------------------------------------------------------


@_register("exp", _same)
def _exp():
    return (lambda v, a: (np.exp(v[0]), None)), (
        lambda g, v, out, aux, a, need: [g * out]
    )


@_register("log", _same)
def _log():
    return (lambda v, a: (np.log(v[0]), None)), (
        lambda g, v, out, aux, a, need: [g / v[0]]
    )


def _sigmoid_fwd(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@_register("sigmoid", _same)
def _sigmoid():
    return (lambda v, a: (_sigmoid_fwd(v[0]), None)), (
        lambda g, v, out, aux, a, need: [g * out * (1.0 - out)]
    )


@_register("tanh", _same)
def _tanh():
    return (lambda v, a: (np.tanh(v[0]), None)), (
        lambda g, v, out, aux, a, need: [g * (1.0 - out * out)]
    )


@_register("relu", _same)
def _relu():
    return (lambda v, a: (np.maximum(v[0], 0.0), None)), (
        lambda g, v, out, aux, a, need: [g * (v[0] > 0)]
    )


@_register("leaky_relu", _same)
def _leaky_relu():
    def f(v, a):
        x = v[0]
        return np.where(x > 0, x, a["slope"] * x), None

    def b(g, v, out, aux, a, need):
        return [np.where(v[0] > 0, g, a["slope"] * g)]

    return f, b


@_register("square", _same)
def _square():
    return (lambda v, a: (v[0] * v[0], None)), (
        lambda g, v, out, aux, a, need: [2.0 * g * v[0]]
    )


@_register("sqrt", _same)
def _sqrt():
    return (lambda v, a: (np.sqrt(v[0]), None)), (
        lambda g, v, out, aux, a, need: [0.5 * g / out]
    )


@_register("clip", _same)
def _clip():
    # clip-by-mask: gradient passes only where the input was not clipped
    def f(v, a):
        x = v[0]
        return np.clip(x, a["lo"], a["hi"]), None

    def b(g, v, out, aux, a, need):
        x = v[0]
        return [g * ((x >= a["lo"]) & (x <= a["hi"]))]

    return f, b


# -- reductions --------------------------------------------------------------


def _axis_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _reduce_shape(shapes, a):
    shape = shapes[0]
    axes = _axis_tuple(a["axis"], len(shape))
    if a["keepdims"]:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def _expand_like(g, shape, axis, keepdims):
    if not keepdims:
        for ax in sorted(_axis_tuple(axis, len(shape))):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


@_register("sum", _reduce_shape)
def _sum():
    def f(v, a):
        return np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]), None

    def b(g, v, out, aux, a, need):
        return [_expand_like(g, v[0].shape, a["axis"], a["keepdims"])]

    return f, b


@_register("mean", _reduce_shape)
def _mean():
    def f(v, a):
        return np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]), None

    def b(g, v, out, aux, a, need):
        shape = v[0].shape
        count = int(np.prod([shape[i] for i in _axis_tuple(a["axis"], len(shape))]))
        return [_expand_like(g, shape, a["axis"], a["keepdims"]) / count]

    return f, b


def _max_shape(shapes, a):
    return _reduce_shape(shapes, {"axis": a["axis"], "keepdims": a["keepdims"]})


@_register("max", _max_shape)
def _max():
    # ties route the whole subgradient to the first maximal element
    def f(v, a):
        x = v[0]
        axis = a["axis"]
        if axis is None:
            idx = np.argmax(x)
            return np.asarray(x.flat[idx]).reshape(_reduce_shape([x.shape], a)), idx
        idx = np.argmax(x, axis=axis)
        out = np.take_along_axis(x, np.expand_dims(idx, axis), axis=axis)
        if not a["keepdims"]:
            out = np.squeeze(out, axis=axis)
        return out, idx

    def b(g, v, out, idx, a, need):
        x = v[0]
        gx = np.zeros_like(x)
        axis = a["axis"]
        if axis is None:
            gx.flat[idx] = np.asarray(g).reshape(-1)[0]
            return [gx]
        gk = g if a["keepdims"] else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gk, axis=axis)
        return [gx]

    return f, b


@_register("softmax", _same)
def _softmax():
    def f(v, a):
        x = v[0]
        z = x - np.max(x, axis=a["axis"], keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=a["axis"], keepdims=True), None

    def b(g, v, out, aux, a, need):
        dot = np.sum(g * out, axis=a["axis"], keepdims=True)
        return [out * (g - dot)]

    return f, b


# -- structural --------------------------------------------------------------


@_register("reshape", lambda shapes, a: a["shape"])
def _reshape():
    return (lambda v, a: (v[0].reshape(a["shape"]), None)), (
        lambda g, v, out, aux, a, need: [g.reshape(v[0].shape)]
    )


def _concat_shape(shapes, a):
    axis = a["axis"] % len(shapes[0])
    out = list(shapes[0])
    out[axis] = sum(s[axis] for s in shapes)
    return tuple(out)


@_register("concat", _concat_shape)
def _concat():
    def f(v, a):
        return np.concatenate(v, axis=a["axis"]), None

    def b(g, v, out, aux, a, need):
        splits = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
        return list(np.split(g, splits, axis=a["axis"]))

    return f, b


@_register("slice", lambda shapes, a: np.empty(shapes[0], dtype=np.int8)[a["key"]].shape)
def _slice():
    def f(v, a):
        return v[0][a["key"]], None

    def b(g, v, out, aux, a, need):
        gx = np.zeros_like(v[0])
        gx[a["key"]] = g
        return [gx]

    return f, b


def _gather_shape(shapes, a):
    src, idx, w = shapes
    if idx != w:
        raise ValueError(f"gather index shape {idx} != weight shape {w}")
    return tuple(idx[:-1]) + tuple(src[1:])


@_register("gather", _gather_shape)
def _gather():
    # out[..., :] = sum_j w[..., j] * src[idx[..., j], :]
    def f(v, a):
        src, idx, w = v
        picked = src[idx]
        return np.einsum("...j,...jc->...c", w, picked), picked

    def b(g, v, out, picked, a, need):
        src, idx, w = v
        gsrc = gw = None
        if need[0]:
            contrib = w[..., None] * g[..., None, :]
            flat_idx = idx.reshape(-1)
            contrib = contrib.reshape(-1, src.shape[1])
            gsrc = np.stack(
                [
                    np.bincount(flat_idx, weights=contrib[:, c], minlength=src.shape[0])
                    for c in range(src.shape[1])
                ],
                axis=1,
            )
        if need[2]:
            gw = np.einsum("...jc,...c->...j", picked, g)
        return [gsrc, None, gw]

    return f, b


# -- convolution -------------------------------------------------------------


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _conv_shape(shapes, a):
    (n, h, w, c), (kh, kw, cin, cout) = shapes
    if c != cin:
        raise ValueError(f"conv2d channel mismatch: input {c}, kernel {cin}")
    s, p = a["stride"], a["pad"]
    return (n, _conv_out(h, kh, s, p), _conv_out(w, kw, s, p), cout)


def _im2col(xp, kh, kw, stride, ho, wo):
    n, _, _, c = xp.shape
    s0, s1, s2, s3 = xp.strides
    win = as_strided(
        xp,
        shape=(n, ho, wo, kh, kw, c),
        strides=(s0, s1 * stride, s2 * stride, s1, s2, s3),
        writeable=False,
    )
    return win.reshape(n * ho * wo, kh * kw * c)


@_register("conv2d", _conv_shape)
def _conv2d():
    # NHWC input, (kh, kw, cin, cout) kernel, cross-correlation
    def f(v, a):
        x, w = v
        s, p = a["stride"], a["pad"]
        kh, kw, cin, cout = w.shape
        n, h, wd, _ = x.shape
        ho, wo = _conv_out(h, kh, s, p), _conv_out(wd, kw, s, p)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = _im2col(np.ascontiguousarray(xp), kh, kw, s, ho, wo)
        out = cols @ w.reshape(-1, cout)
        return out.reshape(n, ho, wo, cout), cols

    def b(g, v, out, cols, a, need):
        x, w = v
        s, p = a["stride"], a["pad"]
        kh, kw, cin, cout = w.shape
        n, h, wd, _ = x.shape
        _, ho, wo, _ = g.shape
        g2 = g.reshape(-1, cout)
        gx = gw = None
        if need[1]:
            gw = (cols.T @ g2).reshape(w.shape)
        if need[0]:
            dcols = (g2 @ w.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros((n, h + 2 * p, wd + 2 * p, cin))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + h, p : p + wd, :] if p else gxp
        return [gx, gw]

    return f, b


# -- graph containers --------------------------------------------------------


class Var:
    """Handle to a node inside a :class:`TapeBuilder`."""

    __slots__ = ("tb", "id")
    __array_ufunc__ = None  # make numpy operands defer to Var operators

    def __init__(self, tb: "TapeBuilder", node_id: int):
        self.tb = tb
        self.id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tb.nodes[self.id].shape

    def __add__(self, other):
        return self.tb.add(self, other)

    def __radd__(self, other):
        return self.tb.add(other, self)

    def __sub__(self, other):
        return self.tb.sub(self, other)

    def __rsub__(self, other):
        return self.tb.sub(other, self)

    def __mul__(self, other):
        return self.tb.mul(self, other)

    def __rmul__(self, other):
        return self.tb.mul(other, self)

    def __truediv__(self, other):
        return self.tb.div(self, other)

    def __rtruediv__(self, other):
        return self.tb.div(other, self)

    def __neg__(self):
        return self.tb.mul(self, -1.0)

    def __getitem__(self, key):
        return self.tb.slice(self, key)

    def __repr__(self):
        node = self.tb.nodes[self.id]
        return f"Var({node.id}, {node.kind}, shape={node.shape})"


class TapeBuilder:
    """Records primitive operations; call :meth:`build` to freeze a tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: dict[str, int] = {}

    def _push(self, kind, inputs=(), attrs=None, shape=None) -> Var:
        node_id = len(self.nodes)
        attrs = attrs or {}
        if shape is None:
            try:
                shape = OPS[kind].shape([self.nodes[i].shape for i in inputs], attrs)
            except ValueError as exc:
                raise ShapeError(node_id, str(exc)) from None
        self.nodes.append(Node(node_id, kind, tuple(inputs), tuple(shape), attrs))
        return Var(self, node_id)

    def _lift(self, x) -> Var:
        if isinstance(x, Var):
            if x.tb is not self:
                raise ValueError("Var belongs to a different TapeBuilder")
            return x
        return self.const(x)

    # leaves
    def input(self, name: str, shape: Sequence[int], dtype=np.float64) -> Var:
        if name in self.input_ids:
            raise ValueError(f"duplicate input name {name!r}")
        v = self._push("input", attrs={"name": name, "dtype": np.dtype(dtype)}, shape=tuple(shape))
        self.input_ids[name] = v.id
        return v

    def const(self, value) -> Var:
        value = np.asarray(value, dtype=np.float64)
        return self._push("const", attrs={"value": value}, shape=value.shape)

    # ops
    def add(self, a, b):
        return self._push("add", (self._lift(a).id, self._lift(b).id))

    def sub(self, a, b):
        return self._push("sub", (self._lift(a).id, self._lift(b).id))

    def mul(self, a, b):
        return self._push("mul", (self._lift(a).id, self._lift(b).id))

    def div(self, a, b):
        return self._push("div", (self._lift(a).id, self._lift(b).id))

    def exp(self, x):
        return self._push("exp", (x.id,))

    def log(self, x):
        return self._push("log", (x.id,))

    def sigmoid(self, x):
        return self._push("sigmoid", (x.id,))

    def tanh(self, x):
        return self._push("tanh", (x.id,))

    def relu(self, x):
        return self._push("relu", (x.id,))

    def leaky_relu(self, x, slope=0.1):
        return self._push("leaky_relu", (x.id,), {"slope": float(slope)})

    def square(self, x):
        return self._push("square", (x.id,))

    def sqrt(self, x):
        return self._push("sqrt", (x.id,))

    def clip(self, x, lo=0.0, hi=1.0):
        return self._push("clip", (x.id,), {"lo": float(lo), "hi": float(hi)})

    def softmax(self, x, axis=-1):
        return self._push("softmax", (x.id,), {"axis": axis})

    def sum(self, x, axis=None, keepdims=False):
        return self._push("sum", (x.id,), {"axis": axis, "keepdims": keepdims})

    def mean(self, x, axis=None, keepdims=False):
        return self._push("mean", (x.id,), {"axis": axis, "keepdims": keepdims})

    def max(self, x, axis=None, keepdims=False):
        return self._push("max", (x.id,), {"axis": axis, "keepdims": keepdims})

    def minimum(self, a, b):
        """Elementwise min expressed as ``a - relu(a - b)``."""
        a, b = self._lift(a), self._lift(b)
        return a - self.relu(a - b)

    def reshape(self, x, shape):
        shape = tuple(int(s) for s in shape)
        if int(np.prod(shape)) != int(np.prod(x.shape)):
            raise ShapeError(len(self.nodes), f"cannot reshape {x.shape} to {shape}")
        return self._push("reshape", (x.id,), {"shape": shape})

    def concat(self, xs, axis=0):
        return self._push("concat", tuple(x.id for x in xs), {"axis": axis})

    def slice(self, x, key):
        if not isinstance(key, tuple):
            key = (key,)
        return self._push("slice", (x.id,), {"key": key})

    def gather(self, src, index, weights):
        return self._push("gather", (src.id, index.id, weights.id))

    def conv2d(self, x, w, stride=1, pad=0):
        return self._push("conv2d", (x.id, w.id), {"stride": int(stride), "pad": int(pad)})

    def build(self, **outputs: Var) -> "Tape":
        return Tape(tuple(self.nodes), dict(self.input_ids), {k: v.id for k, v in outputs.items()})


class Tape:
    """Immutable, topologically ordered list of primitive nodes."""

    def __init__(self, nodes, input_ids, output_ids):
        self.nodes: tuple[Node, ...] = nodes
        self.input_ids: dict[str, int] = input_ids
        self.output_ids: dict[str, int] = output_ids
        live = np.zeros(len(nodes), dtype=bool)
        for i in output_ids.values():
            live[i] = True
        for node in reversed(nodes):
            if live[node.id]:
                for i in node.inputs:
                    live[i] = True
        self._live = tuple(n for n in nodes if live[n.id])
        self._grad_plans: dict[frozenset, frozenset] = {}

    def __len__(self):
        return len(self.nodes)

    def eval(self, inputs: Mapping[str, Any]) -> "Forward":
        """Run the forward pass; returns a record holding all buffers."""
        values: list[Any] = [None] * len(self.nodes)
        aux: dict[int, Any] = {}
        for node in self._live:
            kind = node.kind
            if kind == "input":
                name = node.attrs["name"]
                if name not in inputs:
                    raise KeyError(f"input {name!r} not bound")
                val = np.asarray(inputs[name], dtype=node.attrs["dtype"])
                if val.shape != node.shape:
                    raise ShapeError(node.id, f"input {name!r} has shape {val.shape}, expected {node.shape}")
                values[node.id] = val
                continue
            if kind == "const":
                values[node.id] = node.attrs["value"]
                continue
            rule = OPS[kind]
            out, a = rule.forward([values[i] for i in node.inputs], node.attrs)
            out = np.asarray(out)
            if out.shape != node.shape:
                raise ShapeError(node.id, f"{kind} produced {out.shape}, declared {node.shape}")
            values[node.id] = out
            if a is not None:
                aux[node.id] = a
        return Forward(self, values, aux)

    def _grad_plan(self, wrt: frozenset) -> frozenset:
        plan = self._grad_plans.get(wrt)
        if plan is None:
            reach = set(self.input_ids[name] for name in wrt)
            for node in self.nodes:
                if any(i in reach for i in node.inputs):
                    reach.add(node.id)
            plan = frozenset(reach)
            self._grad_plans[wrt] = plan
        return plan


class Forward:
    """Forward buffers of one evaluation of a tape."""

    def __init__(self, tape: Tape, values, aux):
        self.tape = tape
        self.values = values
        self.aux = aux

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[self.tape.output_ids[name]]

    def value(self, var: Var | int) -> np.ndarray:
        return self.values[var if isinstance(var, int) else var.id]

    def gradient(self, output: str | int, wrt: str | Sequence[str]):
        """Gradient of a scalar output w.r.t. one or several named inputs."""
        tape = self.tape
        out_id = tape.output_ids[output] if isinstance(output, str) else int(output)
        if int(np.prod(tape.nodes[out_id].shape)) != 1:
            raise ValueError(f"node {out_id} is not scalar: shape {tape.nodes[out_id].shape}")
        return self.vjp({out_id: np.ones(tape.nodes[out_id].shape)}, wrt)

    def vjp(self, cotangents: Mapping[str | int, np.ndarray], wrt: str | Sequence[str]):
        """Pull cotangents of (possibly non-scalar) outputs back to named inputs."""
        tape = self.tape
        names = [wrt] if isinstance(wrt, str) else list(wrt)
        for name in names:
            if name not in tape.input_ids:
                raise KeyError(f"unknown input {name!r}")
        plan = tape._grad_plan(frozenset(names))
        grads: dict[int, np.ndarray] = {}
        for key, g in cotangents.items():
            nid = tape.output_ids[key] if isinstance(key, str) else int(key)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != tape.nodes[nid].shape:
                raise ShapeError(nid, f"cotangent shape {g.shape} != {tape.nodes[nid].shape}")
            grads[nid] = grads[nid] + g if nid in grads else g
        top = max(grads) if grads else -1
        for node in reversed(tape.nodes[: top + 1]):
            if node.kind in ("input", "const"):
                continue
            g = grads.pop(node.id, None)
            if g is None:
                continue
            need = tuple(i in plan for i in node.inputs)
            if not any(need):
                continue
            vals = [self.values[i] for i in node.inputs]
            parts = OPS[node.kind].backward(
                g, vals, self.values[node.id], self.aux.get(node.id), node.attrs, need
            )
            for i, gi, wanted in zip(node.inputs, parts, need):
                if not wanted or gi is None:
                    continue
                grads[i] = grads[i] + gi if i in grads else gi
        result = {}
        for name in names:
            nid = tape.input_ids[name]
            g = grads.get(nid)
            result[name] = np.zeros(tape.nodes[nid].shape) if g is None else np.array(g, dtype=np.float64)
        return result[names[0]] if isinstance(wrt, str) else result


def check_gradient(
    tape: Tape,
    inputs: Mapping[str, Any],
    wrt: str,
    output: str,
    epsilon: float = 1e-4,
    samples: int = 100,
    seed: int = 0,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly (without replacement) from the flattened
    input unless ``coords`` is given. The per-coordinate error is
    ``|a - d| / max(|a|, |d|, 1e-12)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    base = {k: np.asarray(v) for k, v in inputs.items()}
    x0 = np.array(base[wrt], dtype=np.float64)
    analytic = tape.eval(base).gradient(output, wrt).reshape(-1)
    if coords is None:
        rng = np.random.default_rng(seed)
        coords = rng.choice(x0.size, size=min(samples, x0.size), replace=False)
    worst = 0.0
    for c in coords:
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[c] += epsilon
        xm[c] -= epsilon
        fp = float(tape.eval({**base, wrt: xp.reshape(x0.shape)})[output].reshape(-1)[0])
        fm = float(tape.eval({**base, wrt: xm.reshape(x0.shape)})[output].reshape(-1)[0])
        d = (fp - fm) / (2 * epsilon)
        a = analytic[c]
        err = abs(a - d) / max(abs(a), abs(d), 1e-12)
        worst = max(worst, err)
    return worst
