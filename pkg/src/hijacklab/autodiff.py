"""Dense reverse-mode automatic differentiation over float64 numpy arrays.

A :class:`Graph` is built once (define-then-run) and can be evaluated many
times with different bindings.  Node kinds form a closed set; building any
other kind raises :class:`GraphError`.

    g = Graph()
    x = g.param("x", (2,))
    y = g.norm(x)
    g.forward({"x": np.array([3.0, 4.0])})   # y -> 5.0
    g.backward(y)["x"]                        # -> [0.6, 0.8]
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

KINDS = frozenset(
    {
        "add",
        "sub",
        "mul",
        "div",
        "matmul",
        "tanh",
        "concat",
        "sum",
        "mean",
        "sqnorm",
        "norm",
        "abs",
        "scale",
        "detach",
    }
)
LEAF_KINDS = frozenset({"input", "param", "const"})


class GraphError(ValueError):
    """Raised for malformed graphs: shape mismatches, unknown kinds, bad bindings."""


class NonFiniteError(FloatingPointError):
    def __init__(self, name: str, message: str | None = None):
        self.name = name
        super().__init__(message or f"non-finite values in {name!r}")


@dataclass
class GraphNode:
    kind: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    name: str | None = None
    attrs: dict = field(default_factory=dict)


class Node:
    """Handle to a node in a :class:`Graph`; supports ``+ - * / @``."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.graph.nodes[self.id].shape

    @property
    def value(self) -> np.ndarray:
        return self.graph.value(self)

    def _lift(self, other) -> "Node":
        if isinstance(other, Node):
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.add(self, self._lift(other))

    def __radd__(self, other):
        return self.graph.add(self._lift(other), self)

    def __sub__(self, other):
        return self.graph.sub(self, self._lift(other))

    def __rsub__(self, other):
        return self.graph.sub(self._lift(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.mul(self, self._lift(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, 1.0 / float(other))
        return self.graph.div(self, self._lift(other))

    def __matmul__(self, other):
        return self.graph.matmul(self, self._lift(other))

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __repr__(self):
        n = self.graph.nodes[self.id]
        return f"Node({self.id}, {n.kind}, shape={n.shape})"


def _broadcast_shape(kind: str, nid: int, a: tuple, b: tuple) -> tuple[int, ...]:
    try:
        return tuple(np.broadcast_shapes(a, b))
    except ValueError:
        raise GraphError(f"node {nid} ({kind}): incompatible shapes {a} and {b}") from None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _reduced_shape(shape: tuple[int, ...], axis: int | None) -> tuple[int, ...]:
    if axis is None:
        return ()
    return shape[:axis] + shape[axis + 1 :]


def _expand(grad: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    """Broadcast the gradient of a reduction back to the reduced input's shape."""
    if axis is None:
        return np.broadcast_to(grad, shape)
    return np.broadcast_to(np.expand_dims(grad, axis), shape)


class Graph:
    """Topologically ordered list of nodes; one instance per concurrent evaluation."""

    def __init__(self):
        self.nodes: list[GraphNode] = []
        self.param_ids: dict[str, int] = {}
        self.input_ids: dict[str, int] = {}
        self.detached_ids: set[int] = set()
        self._values: list[np.ndarray] | None = None

    # -- construction -------------------------------------------------------

    def _push(self, kind, inputs, shape, name=None, **attrs) -> Node:
        if kind not in KINDS and kind not in LEAF_KINDS:
            raise GraphError(f"unsupported operation kind {kind!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"node {len(self.nodes)} ({kind}): input {i} does not precede it")
        self.nodes.append(GraphNode(kind, tuple(inputs), tuple(shape), name, attrs))
        self._values = None
        return Node(self, len(self.nodes) - 1)

    def _id(self, node: Node) -> int:
        if not isinstance(node, Node) or node.graph is not self:
            raise GraphError(f"{node!r} is not a node of this graph")
        return node.id

    def input(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.input_ids or name in self.param_ids:
            raise GraphError(f"duplicate leaf name {name!r}")
        n = self._push("input", (), shape, name)
        self.input_ids[name] = n.id
        return n

    def param(self, name: str, shape: Sequence[int]) -> Node:
        if name in self.input_ids or name in self.param_ids:
            raise GraphError(f"duplicate leaf name {name!r}")
        n = self._push("param", (), shape, name)
        self.param_ids[name] = n.id
        return n

    def const(self, value) -> Node:
        arr = np.array(value, dtype=np.float64)
        return self._push("const", (), arr.shape, value=arr)

    def _binary(self, kind, a, b) -> Node:
        ia, ib = self._id(a), self._id(b)
        shape = _broadcast_shape(kind, len(self.nodes), self.nodes[ia].shape, self.nodes[ib].shape)
        return self._push(kind, (ia, ib), shape)

    def add(self, a: Node, b: Node) -> Node:
        return self._binary("add", a, b)

    def sub(self, a: Node, b: Node) -> Node:
        return self._binary("sub", a, b)

    def mul(self, a: Node, b: Node) -> Node:
        return self._binary("mul", a, b)

    def div(self, a: Node, b: Node) -> Node:
        return self._binary("div", a, b)

    def matmul(self, a: Node, b: Node) -> Node:
        ia, ib = self._id(a), self._id(b)
        sa, sb = self.nodes[ia].shape, self.nodes[ib].shape
        nid = len(self.nodes)
        if not (1 <= len(sa) <= 2 and 1 <= len(sb) <= 2):
            raise GraphError(f"node {nid} (matmul): operands must be 1-D or 2-D, got {sa} and {sb}")
        if sa[-1] != sb[0]:
            raise GraphError(f"node {nid} (matmul): inner dimensions differ, {sa} @ {sb}")
        return self._push("matmul", (ia, ib), sa[:-1] + sb[1:])

    def tanh(self, a: Node) -> Node:
        ia = self._id(a)
        return self._push("tanh", (ia,), self.nodes[ia].shape)

    def abs(self, a: Node) -> Node:
        ia = self._id(a)
        return self._push("abs", (ia,), self.nodes[ia].shape)

    def scale(self, a: Node, c: float) -> Node:
        ia = self._id(a)
        return self._push("scale", (ia,), self.nodes[ia].shape, c=float(c))

    def detach(self, a: Node) -> Node:
        ia = self._id(a)
        n = self._push("detach", (ia,), self.nodes[ia].shape)
        self.detached_ids.add(n.id)
        return n

    def concat(self, parts: Sequence[Node], axis: int = -1) -> Node:
        ids = [self._id(p) for p in parts]
        if not ids:
            raise GraphError("concat of zero tensors")
        shapes = [self.nodes[i].shape for i in ids]
        nd = len(shapes[0])
        ax = axis % nd if nd else 0
        nid = len(self.nodes)
        for s in shapes:
            if len(s) != nd or s[:ax] + s[ax + 1 :] != shapes[0][:ax] + shapes[0][ax + 1 :]:
                raise GraphError(f"node {nid} (concat): incompatible shapes {shapes} along axis {ax}")
        out = list(shapes[0])
        out[ax] = sum(s[ax] for s in shapes)
        return self._push("concat", ids, out, axis=ax)

    def _reduce(self, kind, a, axis) -> Node:
        ia = self._id(a)
        shape = self.nodes[ia].shape
        if axis is not None:
            if not shape:
                raise GraphError(f"node {len(self.nodes)} ({kind}): axis given for a scalar")
            axis = axis % len(shape)
        return self._push(kind, (ia,), _reduced_shape(shape, axis), axis=axis)

    def sum(self, a: Node, axis: int | None = None) -> Node:
        return self._reduce("sum", a, axis)

    def mean(self, a: Node, axis: int | None = None) -> Node:
        return self._reduce("mean", a, axis)

    def sqnorm(self, a: Node, axis: int | None = None) -> Node:
        return self._reduce("sqnorm", a, axis)

    def norm(self, a: Node, axis: int | None = None) -> Node:
        return self._reduce("norm", a, axis)

    # -- evaluation ---------------------------------------------------------

    def forward(self, bindings: Mapping[str, np.ndarray]) -> list[np.ndarray]:
        """Evaluate every node in order; returns the per-node values."""
        vals: list[np.ndarray] = []
        for nid, n in enumerate(self.nodes):
            k = n.kind
            if k in ("input", "param"):
                if n.name not in bindings:
                    raise GraphError(f"node {nid} ({k}): no binding for {n.name!r}")
                v = np.asarray(bindings[n.name], dtype=np.float64)
                if v.shape != n.shape:
                    raise GraphError(
                        f"node {nid} ({k} {n.name!r}): bound shape {v.shape} != declared {n.shape}"
                    )
            elif k == "const":
                v = n.attrs["value"]
            else:
                x = [vals[i] for i in n.inputs]
                if k == "add":
                    v = x[0] + x[1]
                elif k == "sub":
                    v = x[0] - x[1]
                elif k == "mul":
                    v = x[0] * x[1]
                elif k == "div":
                    v = x[0] / x[1]
                elif k == "matmul":
                    v = x[0] @ x[1]
                elif k == "tanh":
                    v = np.tanh(x[0])
                elif k == "abs":
                    v = np.abs(x[0])
                elif k == "scale":
                    v = x[0] * n.attrs["c"]
                elif k == "detach":
                    v = x[0]
                elif k == "concat":
                    v = np.concatenate(x, axis=n.attrs["axis"])
                elif k == "sum":
                    v = np.sum(x[0], axis=n.attrs["axis"])
                elif k == "mean":
                    v = np.mean(x[0], axis=n.attrs["axis"])
                elif k == "sqnorm":
                    v = np.sum(x[0] * x[0], axis=n.attrs["axis"])
                elif k == "norm":
                    v = np.sqrt(np.sum(x[0] * x[0], axis=n.attrs["axis"]))
                else:  # pragma: no cover - guarded at build time
                    raise GraphError(f"node {nid}: unsupported kind {k!r}")
                v = np.asarray(v, dtype=np.float64)
            vals.append(v)
        self._values = vals
        return vals

    def value(self, node: Node) -> np.ndarray:
        if self._values is None:
            raise GraphError("forward has not been evaluated")
        return self._values[self._id(node)]

    def backward(self, output: Node) -> dict[str, np.ndarray]:
        """Gradient of the scalar ``output`` w.r.t. every param node.

        Detach nodes pass nothing upstream, so whatever feeds only through
        them receives an exact zero gradient.
        """
        if self._values is None:
            raise GraphError("backward called before forward")
        out = self._id(output)
        if self.nodes[out].shape != ():
            raise GraphError(f"backward needs a scalar output, node {out} has shape {self.nodes[out].shape}")
        vals = self._values
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[out] = np.ones((), dtype=np.float64)

        def acc(i, g):
            g = _unbroadcast(np.asarray(g, dtype=np.float64), self.nodes[i].shape)
            grads[i] = g.copy() if grads[i] is None else grads[i] + g

        for nid in range(out, -1, -1):
            g = grads[nid]
            n = self.nodes[nid]
            if g is None or n.kind in LEAF_KINDS or n.kind == "detach":
                continue
            ins = n.inputs
            k = n.kind
            if k == "add":
                acc(ins[0], g)
                acc(ins[1], g)
            elif k == "sub":
                acc(ins[0], g)
                acc(ins[1], -g)
            elif k == "mul":
                acc(ins[0], g * vals[ins[1]])
                acc(ins[1], g * vals[ins[0]])
            elif k == "div":
                b = vals[ins[1]]
                acc(ins[0], g / b)
                acc(ins[1], -g * vals[ins[0]] / (b * b))
            elif k == "matmul":
                a, b = vals[ins[0]], vals[ins[1]]
                a2 = a if a.ndim == 2 else a[None, :]
                b2 = b if b.ndim == 2 else b[:, None]
                g2 = g.reshape(a2.shape[0], b2.shape[1])
                acc(ins[0], (g2 @ b2.T).reshape(a.shape))
                acc(ins[1], (a2.T @ g2).reshape(b.shape))
            elif k == "tanh":
                t = vals[nid]
                acc(ins[0], g * (1.0 - t * t))
            elif k == "abs":
                acc(ins[0], g * np.sign(vals[ins[0]]))
            elif k == "scale":
                acc(ins[0], g * n.attrs["c"])
            elif k == "concat":
                ax = n.attrs["axis"]
                start = 0
                for i in ins:
                    width = self.nodes[i].shape[ax]
                    idx = [slice(None)] * g.ndim
                    idx[ax] = slice(start, start + width)
                    acc(i, g[tuple(idx)])
                    start += width
            elif k in ("sum", "mean", "sqnorm", "norm"):
                ax = n.attrs["axis"]
                x = vals[ins[0]]
                ge = _expand(g, x.shape, ax)
                if k == "sum":
                    acc(ins[0], ge)
                elif k == "mean":
                    count = x.size if ax is None else x.shape[ax]
                    acc(ins[0], ge / count)
                elif k == "sqnorm":
                    acc(ins[0], 2.0 * ge * x)
                else:
                    r = _expand(vals[nid], x.shape, ax)
                    safe = np.where(r > 0, r, 1.0)
                    acc(ins[0], np.where(r > 0, ge * x / safe, 0.0))
        return {
            name: (grads[i] if grads[i] is not None else np.zeros(self.nodes[i].shape))
            for name, i in self.param_ids.items()
        }

    def frozen(self) -> "Graph":
        """Copy of this graph with every detach node replaced by a constant
        holding its current forward value (the frozen-constant surrogate)."""
        if self._values is None:
            raise GraphError("frozen() needs a prior forward evaluation")
        g = Graph()
        for nid, n in enumerate(self.nodes):
            if n.kind == "detach":
                g.nodes.append(GraphNode("const", (), n.shape, attrs={"value": self._values[nid].copy()}))
            else:
                g.nodes.append(GraphNode(n.kind, n.inputs, n.shape, n.name, dict(n.attrs)))
        g.param_ids = dict(self.param_ids)
        g.input_ids = dict(self.input_ids)
        return g


def finite_diff_check(
    graph: Graph,
    output: Node,
    bindings: Mapping[str, np.ndarray],
    params: Iterable[str] | None = None,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between backward gradients and central differences.

    Graphs containing detach nodes are differenced through their frozen
    surrogate, so detached values stay pinned at the unperturbed point.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    bindings = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}
    graph.forward(bindings)
    analytic = graph.backward(output)
    oracle = graph.frozen() if graph.detached_ids else graph
    names = list(params) if params is not None else list(graph.param_ids)
    worst = 0.0
    for name in names:
        base = bindings[name]
        flat = base.reshape(-1)
        num = np.empty_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + epsilon
            fp = float(oracle.forward(bindings)[output.id])
            flat[j] = orig - epsilon
            fm = float(oracle.forward(bindings)[output.id])
            flat[j] = orig
            num[j] = (fp - fm) / (2.0 * epsilon)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        if flat.size:
            worst = max(worst, float(np.max(np.abs(a - num) / denom)))
    graph.forward(bindings)
    return worst


# -- optimizer --------------------------------------------------------------


@dataclass
class OptState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.01,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], OptState]:
    """One decoupled-weight-decay Adam step.

    Only parameters that appear in ``grads`` move; the rest are returned
    untouched (this is how a frozen sub-network is expressed).
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    b1, b2 = betas
    if not (0 <= b1 < 1 and 0 <= b2 < 1):
        raise ValueError(f"betas must lie in [0, 1), got {betas}")
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(name, f"non-finite gradient for parameter {name!r}")

    t = state.step + 1
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        mk = m.get(name, np.zeros_like(p))
        vk = v.get(name, np.zeros_like(p))
        mk = b1 * mk + (1.0 - b1) * g
        vk = b2 * vk + (1.0 - b2) * (g * g)
        update = (mk / c1) / (np.sqrt(vk / c2) + eps)
        new_params[name] = p * (1.0 - lr * weight_decay) - lr * update
        m[name], v[name] = mk, vk
    return new_params, OptState(m, v, t)


# -- checkpoint I/O ---------------------------------------------------------

MAGIC = b"FHCK0001"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write tensors in the FHCK0001 binary layout (all integers u64 little-endian)."""
    buf = bytearray(MAGIC)
    buf += struct.pack("<Q", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        buf += struct.pack("<Q", len(raw)) + raw
        buf += struct.pack("<Q", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(buf))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {data[:8]!r})")
    off = 8

    def u64():
        nonlocal off
        (x,) = struct.unpack_from("<Q", data, off)
        off += 8
        return x

    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(u64()):
            n = u64()
            name = data[off : off + n].decode("utf-8")
            off += n
            rank = u64()
            dims = tuple(u64() for _ in range(rank))
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            out[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes")
    return out
