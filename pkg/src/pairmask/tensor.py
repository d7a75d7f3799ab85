"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is a tape: a Graph holds an append-only list of nodes, each
recording its operation tag, input node ids, and the cached output Tensor.
Insertion order is topological order by construction (an op can only consume
ids that already exist), so the backward pass is a single reverse sweep over
node ids. Graphs are single-use: build, run forward_backward, discard.

Every completed operation checks its output for NaN/Inf and raises
NumericError naming the node, so numeric trouble is never silent.
"""

from __future__ import annotations

import json
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError

_LOG_CLAMP = 1e-12  # floor applied inside entropy's log only


class Tensor:
    """A shaped array of 64-bit reals, optionally tracking a gradient.

    `grad` exists only when `requires_grad` is set; forward_backward
    overwrites it on every call (no accumulation across calls).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def tensor_to_dict(t: Tensor) -> dict:
    """Checkpoint form: {shape, data}. json round-trips float64 losslessly."""
    return {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}


def tensor_from_dict(d: dict) -> Tensor:
    try:
        shape = tuple(int(s) for s in d["shape"])
        data = np.asarray(d["data"], dtype=np.float64).reshape(shape)
    except (KeyError, TypeError, ValueError) as exc:
        raise ContractError(f"malformed tensor checkpoint: {exc}") from exc
    return Tensor(data)


def save_tensor(t: Tensor, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(tensor_to_dict(t), fh)


def load_tensor(path) -> Tensor:
    with open(path, encoding="utf-8") as fh:
        return tensor_from_dict(json.load(fh))


class _Node:
    __slots__ = ("op", "inputs", "out", "backward", "needs_grad")

    def __init__(self, op, inputs, out, backward, needs_grad):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.needs_grad = needs_grad


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


class Graph:
    """Append-only computation tape. Confined to one thread of execution.

    Methods return integer node ids. `value(i)` exposes the cached output
    Tensor of node i; ops compute forward eagerly at insertion time.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def value(self, nid: int) -> Tensor:
        return self.nodes[nid].out

    def data(self, nid: int) -> np.ndarray:
        return self.nodes[nid].out.data

    # -- node plumbing -------------------------------------------------

    def leaf(self, tensor: Tensor | np.ndarray | float) -> int:
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        self.nodes.append(_Node("leaf", (), tensor, None, tensor.requires_grad))
        return len(self.nodes) - 1

    def _emit(self, op: str, inputs: tuple[int, ...], data: np.ndarray,
              backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> int:
        nid = len(self.nodes)
        if not np.all(np.isfinite(data)):
            raise NumericError(f"non-finite values produced by node {nid} ({op})")
        needs = any(self.nodes[i].needs_grad for i in inputs)
        self.nodes.append(_Node(op, inputs, Tensor(data), backward, needs))
        return nid

    def _dat(self, nid: int, op: str) -> np.ndarray:
        if not isinstance(nid, (int, np.integer)):
            raise ContractError(f"{op}: expected a node id, got {type(nid).__name__}")
        return self.nodes[nid].out.data

    # -- elementwise arithmetic (numpy broadcasting allowed) -----------

    def add(self, a: int, b: int) -> int:
        x, y = self._dat(a, "add"), self._dat(b, "add")
        out = self._broadcast_op("add", x, y, lambda: x + y)
        return self._emit("add", (a, b), out, lambda g: (
            _unbroadcast(g, x.shape), _unbroadcast(g, y.shape)))

    def sub(self, a: int, b: int) -> int:
        x, y = self._dat(a, "sub"), self._dat(b, "sub")
        out = self._broadcast_op("sub", x, y, lambda: x - y)
        return self._emit("sub", (a, b), out, lambda g: (
            _unbroadcast(g, x.shape), _unbroadcast(-g, y.shape)))

    def mul(self, a: int, b: int) -> int:
        x, y = self._dat(a, "mul"), self._dat(b, "mul")
        out = self._broadcast_op("mul", x, y, lambda: x * y)
        return self._emit("mul", (a, b), out, lambda g: (
            _unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    def _broadcast_op(self, op, x, y, f):
        try:
            return f()
        except ValueError as exc:
            raise ContractError(f"{op}: shapes {x.shape} and {y.shape} do not broadcast") from exc

    def smul(self, a: int, c: float) -> int:
        x = self._dat(a, "smul")
        c = float(c)
        return self._emit("smul", (a,), c * x, lambda g: (c * g,))

    # -- linear algebra -------------------------------------------------

    def matmul(self, a: int, b: int) -> int:
        x, y = self._dat(a, "matmul"), self._dat(b, "matmul")
        if x.ndim < 2 or y.ndim < 2:
            raise ContractError(f"matmul: operands must be >= 2-D, got {x.shape} @ {y.shape}")
        try:
            out = np.matmul(x, y)
        except ValueError as exc:
            raise ContractError(f"matmul: incompatible shapes {x.shape} @ {y.shape}") from exc

        def backward(g):
            return (_unbroadcast(np.matmul(g, _swap(y)), x.shape),
                    _unbroadcast(np.matmul(_swap(x), g), y.shape))

        return self._emit("matmul", (a, b), out, backward)

    def transpose(self, a: int) -> int:
        """Swap the last two axes."""
        x = self._dat(a, "transpose")
        if x.ndim < 2:
            raise ContractError(f"transpose: needs >= 2-D, got shape {x.shape}")
        return self._emit("transpose", (a,), _swap(x), lambda g: (_swap(g),))

    def reshape(self, a: int, shape: tuple[int, ...]) -> int:
        x = self._dat(a, "reshape")
        try:
            out = x.reshape(shape)
        except ValueError as exc:
            raise ContractError(f"reshape: cannot view {x.shape} as {shape}") from exc
        return self._emit("reshape", (a,), out, lambda g: (g.reshape(x.shape),))

    def gather(self, table: int, indices) -> int:
        """Row lookup: table is (V, d), indices any int array; out idx.shape + (d,)."""
        x = self._dat(table, "gather")
        if x.ndim != 2:
            raise ContractError(f"gather: table must be 2-D, got shape {x.shape}")
        idx = np.asarray(indices)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ContractError("gather: indices must be integers")
        if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
            raise ContractError(
                f"gather: index out of range for table with {x.shape[0]} rows")
        out = x[idx]

        def backward(g):
            gx = np.zeros_like(x)
            np.add.at(gx, idx.reshape(-1), g.reshape(-1, x.shape[1]))
            return (gx,)

        return self._emit("gather", (table,), out, backward)

    # -- reductions -----------------------------------------------------

    def sum(self, a: int, axis: int | None = None) -> int:
        x = self._dat(a, "sum")
        axis = self._check_axis(x, axis, "sum")
        out = x.sum(axis=axis)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

        return self._emit("sum", (a,), out, backward)

    def mean(self, a: int, axis: int | None = None) -> int:
        x = self._dat(a, "mean")
        axis = self._check_axis(x, axis, "mean")
        count = x.size if axis is None else x.shape[axis]
        out = x.mean(axis=axis)

        def backward(g):
            if axis is None:
                return (np.broadcast_to(g / count, x.shape).copy(),)
            return (np.broadcast_to(np.expand_dims(g, axis) / count, x.shape).copy(),)

        return self._emit("mean", (a,), out, backward)

    @staticmethod
    def _check_axis(x, axis, op):
        if axis is None:
            return None
        if not -x.ndim <= axis < x.ndim:
            raise ContractError(f"{op}: axis {axis} out of range for shape {x.shape}")
        return axis % x.ndim

    # -- nonlinearities ---------------------------------------------------

    def exp(self, a: int) -> int:
        out = np.exp(self._dat(a, "exp"))
        return self._emit("exp", (a,), out, lambda g: (g * out,))

    def log(self, a: int) -> int:
        x = self._dat(a, "log")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return self._emit("log", (a,), out, lambda g: (g / x,))

    def relu(self, a: int) -> int:
        x = self._dat(a, "relu")
        return self._emit("relu", (a,), np.maximum(x, 0.0),
                          lambda g: (g * (x > 0.0),))

    def sigmoid(self, a: int) -> int:
        x = self._dat(a, "sigmoid")
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return self._emit("sigmoid", (a,), out, lambda g: (g * out * (1.0 - out),))

    def softmax(self, a: int) -> int:
        """Softmax over the last axis, computed with max-subtraction."""
        x = self._dat(a, "softmax")
        shifted = x - x.max(axis=-1, keepdims=True)
        ex = np.exp(shifted)
        out = ex / ex.sum(axis=-1, keepdims=True)

        def backward(g):
            return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

        return self._emit("softmax", (a,), out, backward)

    # -- structure ------------------------------------------------------

    def concat(self, ids: Sequence[int], axis: int = 0) -> int:
        if not ids:
            raise ContractError("concat: empty input list")
        xs = [self._dat(i, "concat") for i in ids]
        try:
            out = np.concatenate(xs, axis=axis)
        except ValueError as exc:
            raise ContractError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
        ax = axis % out.ndim
        sizes = [x.shape[ax] for x in xs]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

        return self._emit("concat", tuple(ids), out, backward)

    # -- loss-style heads -------------------------------------------------

    def entropy(self, a: int) -> int:
        """Shannon entropy of a probability vector, in nats.

        Uses the 0 * ln 0 = 0 convention by clamping the argument of the
        log at 1e-12; the probabilities themselves are left untouched.
        """
        p = self._dat(a, "entropy")
        if p.ndim != 1:
            raise ContractError(f"entropy: expected a probability vector, got shape {p.shape}")
        if p.min() < 0.0:
            raise ContractError("entropy: negative probability entry")
        if abs(p.sum() - 1.0) > 1e-6:
            raise ContractError(f"entropy: probabilities sum to {p.sum():.9f}, not 1")
        clamped = np.maximum(p, _LOG_CLAMP)
        logs = np.log(clamped)
        out = -np.sum(p * logs)

        def backward(g):
            return (-g * (logs + (p > _LOG_CLAMP)),)

        return self._emit("entropy", (a,), out, backward)

    def cross_entropy(self, logits: int, labels) -> int:
        """-ln softmax(logits)[label]; for 2-D logits, the mean over rows."""
        x = self._dat(logits, "cross_entropy")
        if x.ndim == 1:
            if not isinstance(labels, (int, np.integer)):
                raise ContractError("cross_entropy: 1-D logits take a single integer label")
            lab = np.asarray([labels], dtype=np.int64)
            rows = x[None, :]
        elif x.ndim == 2:
            lab = np.asarray(labels, dtype=np.int64).reshape(-1)
            if lab.shape[0] != x.shape[0]:
                raise ContractError(
                    f"cross_entropy: {x.shape[0]} logit rows but {lab.shape[0]} labels")
            rows = x
        else:
            raise ContractError(f"cross_entropy: logits must be 1-D or 2-D, got {x.shape}")
        n, c = rows.shape
        if lab.min() < 0 or lab.max() >= c:
            raise ContractError(f"cross_entropy: label out of range [0, {c})")
        shifted = rows - rows.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1))
        picked = shifted[np.arange(n), lab]
        out = np.float64((lse - picked).mean())
        probs = np.exp(shifted - lse[:, None])

        def backward(g):
            gx = probs.copy()
            gx[np.arange(n), lab] -= 1.0
            gx *= g / n
            return (gx if x.ndim == 2 else gx[0],)

        return self._emit("cross_entropy", (logits,), out, backward)


def forward_backward(graph: Graph, loss_node: int) -> dict[int, Tensor]:
    """Backpropagate from a scalar loss; returns grads for requires_grad leaves.

    Also overwrites `.grad` on each requires_grad leaf Tensor. Cached node
    values are never mutated, so calling twice is bit-identical.
    """
    loss = graph.nodes[loss_node].out
    if loss.data.shape != ():
        raise ContractError(f"loss node must be scalar, got shape {loss.data.shape}")

    grads: dict[int, np.ndarray] = {loss_node: np.ones((), dtype=np.float64)}
    for nid in range(loss_node, -1, -1):
        node = graph.nodes[nid]
        g = grads.pop(nid, None)
        if g is None or not node.needs_grad:
            continue
        if node.backward is None:  # requires_grad leaf
            grads[nid] = g
            continue
        for iid, gin in zip(node.inputs, node.backward(g)):
            if gin is None or not graph.nodes[iid].needs_grad:
                continue
            if not np.all(np.isfinite(gin)):
                raise NumericError(f"non-finite gradient at node {nid} ({node.op})")
            acc = grads.get(iid)
            grads[iid] = gin if acc is None else acc + gin

    result: dict[int, Tensor] = {}
    for nid, node in enumerate(graph.nodes):
        if node.backward is None and node.out.requires_grad:
            g = grads.get(nid)
            g = np.zeros_like(node.out.data) if g is None else np.asarray(g, dtype=np.float64)
            g = g.reshape(node.out.data.shape)
            node.out.grad = g
            result[nid] = Tensor(g)
    return result
