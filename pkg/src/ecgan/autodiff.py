"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Tensors record the operation that produced them; calling ``backward`` on a
scalar walks the recorded graph in reverse topological order. A :class:`Graph`
can additionally be used to capture an explicit tape of a computation defined
by a Python function, which is what :func:`forward`, :func:`backward` and
:func:`finite_diff_check` operate on.
"""
from __future__ import annotations

import contextlib
import math
from collections import namedtuple
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "Graph", "Node", "ShapeError", "NumericError", "GraphStateError",
    "no_grad", "is_grad_enabled", "as_tensor",
    "add", "sub", "mul", "matmul", "conv1d", "instance_norm", "relu", "tanh",
    "sigmoid", "global_avg_pool", "concat", "slice_", "reshape", "mean", "sum_",
    "l1_loss", "softmax_cross_entropy", "softmax",
    "forward", "backward", "finite_diff_check",
]


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class GraphStateError(RuntimeError):
    pass


_grad_enabled = True
_active_graphs: list["Graph"] = []


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise ShapeError(f"tensor dimensions must be positive, got {arr.shape}")
        _check_finite("tensor", arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf that requires grad."""
        _run_backward(_topo_order(self), self, grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(op: str, arr: np.ndarray) -> None:
    # the sum is non-finite whenever any element is; confirm before raising
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NumericError(f"{op}: non-finite value produced")


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    _check_finite(op, data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    for g in _active_graphs:
        g._record(op, parents, out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g


def _accumulate_at(t: Tensor, index, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros(t.shape)
    t.grad[index] += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _run_backward(order: Sequence[Tensor], root: Tensor, grad=None) -> None:
    if grad is None:
        if root.size != 1:
            raise ShapeError(f"backward: output must be scalar, got shape {root.shape}")
        grad = np.ones(root.shape)
    if not root.requires_grad:
        return
    _check_finite("backward", np.asarray(grad))
    intermediates = [t for t in order if not t.is_leaf]
    if not root.is_leaf:
        root.grad = None
    _accumulate(root, np.asarray(grad, dtype=np.float64))
    try:
        for t in reversed(order):
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)
    finally:
        for t in intermediates:
            t.grad = None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("add", np.add, a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("sub", np.subtract, a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _make("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary("mul", np.multiply, a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make("mul", out, (a, b), bw)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0

    def bw(g):
        _accumulate(x, g * mask)

    return _make("relu", x.data * mask, (x,), bw)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)

    def bw(g):
        _accumulate(x, g * (1.0 - y * y))

    return _make("tanh", y, (x,), bw)


def _stable_sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _stable_sigmoid(x.data)

    def bw(g):
        _accumulate(x, g * y * (1.0 - y))

    return _make("sigmoid", y, (x,), bw)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics, including batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if ka != kb:
        raise ShapeError(f"matmul: inner dimensions differ, shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ad = a.data[None, :] if a.ndim == 1 else a.data
        bd = b.data[:, None] if b.ndim == 1 else b.data
        g2 = g
        if a.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if b.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        if a.requires_grad:
            ga = np.matmul(g2, np.swapaxes(bd, -1, -2))
            if a.ndim == 1:
                ga = ga[..., 0, :]
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(ad, -1, -2), g2)
            if b.ndim == 1:
                gb = gb[..., 0]
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make("matmul", out, (a, b), bw)


def _same_padding(k: int) -> tuple[int, int]:
    left = (k - 1) // 2
    return left, k - 1 - left


def conv1d(x, w, bias=None) -> Tensor:
    """Stride-1 cross-correlation with zero "same" padding.

    ``x`` is (batch, in_channels, n), ``w`` is (out_channels, in_channels, k).
    For even ``k`` the extra pad goes on the right, so tap ``(k - 1) // 2`` is
    the centre.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError(f"conv1d: expected 3-d input and weight, got {x.shape} and {w.shape}")
    batch, cin, n = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels, weight expects {wcin}")
    left, right = _same_padding(k)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    cols = np.stack([xp[:, :, j:j + n] for j in range(k)], axis=2).reshape(batch, cin * k, n)
    w2 = w.data.reshape(cout, cin * k)
    out = np.matmul(w2, cols)
    parents = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv1d: bias shape {bias.shape} does not match {cout} channels")
        out = out + bias.data[:, None]
        parents.append(bias)

    def bw(g):
        if w.requires_grad:
            gw = np.matmul(g, np.swapaxes(cols, 1, 2)).sum(axis=0)
            _accumulate(w, gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g.sum(axis=(0, 2)))
        if x.requires_grad:
            gcols = np.matmul(w2.T, g).reshape(batch, cin, k, n)
            gxp = np.zeros((batch, cin, n + k - 1))
            for j in range(k):
                gxp[:, :, j:j + n] += gcols[:, :, j]
            _accumulate(x, gxp[:, :, left:left + n])

    return _make("conv1d", out, parents, bw)


def instance_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise each row along the last axis to zero mean and unit variance."""
    x = as_tensor(x)
    n = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gs = g.sum(axis=-1, keepdims=True)
        gx = (n * g - gs - xhat * (g * xhat).sum(axis=-1, keepdims=True)) * (inv / n)
        _accumulate(x, gx)

    return _make("instance_norm", xhat, (x,), bw)


# ---------------------------------------------------------------- reductions / shape

def sum_(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _make("sum", np.asarray(out, dtype=np.float64), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.mean(axis=axis)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(x, np.broadcast_to(g / count, x.shape))

    return _make("mean", np.asarray(out, dtype=np.float64), (x,), bw)


def global_avg_pool(x) -> Tensor:
    """Mean over the last (time) axis: (..., C, n) -> (..., C)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"global_avg_pool: expected at least 2-d input, got {x.shape}")
    n = x.shape[-1]

    def bw(g):
        _accumulate(x, np.broadcast_to(g[..., None] / n, x.shape))

    return _make("global_avg_pool", x.data.mean(axis=-1), (x,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no tensors given")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make("concat", out, tensors, bw)


def slice_(x, index) -> Tensor:
    """Basic (view) indexing; gradients scatter back into the sliced region."""
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {x.shape}") from exc
    if out.size == 0:
        raise ShapeError(f"slice: index {index!r} selects nothing from shape {x.shape}")

    def bw(g):
        _accumulate_at(x, index, g)

    return _make("slice", np.array(out, dtype=np.float64), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None

    def bw(g):
        _accumulate(x, g.reshape(x.shape))

    return _make("reshape", out, (x,), bw)


# ---------------------------------------------------------------- losses

def l1_loss(x, target) -> Tensor:
    """Mean absolute error; the subgradient at zero residual is 0."""
    x, target = as_tensor(x), as_tensor(target)
    if x.shape != target.shape:
        raise ShapeError(f"l1_loss: shapes differ, {x.shape} vs {target.shape}")
    diff = x.data - target.data
    sign = np.sign(diff)
    count = diff.size

    def bw(g):
        _accumulate(x, g * sign / count)
        _accumulate(target, -g * sign / count)

    return _make("l1_loss", np.asarray(np.abs(diff).mean()), (x, target), bw)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of integer class ``targets`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape} and targets {targets.shape} disagree"
        )
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError("softmax_cross_entropy: target class out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(len(targets))
    loss = (logsum - z[rows, targets]).mean()
    probs = np.exp(z - logsum[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, targets] -= 1.0
        _accumulate(logits, g * d / len(targets))

    return _make("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------- explicit graphs

Node = namedtuple("Node", "op inputs output")


class Graph:
    """A recorded computation.

    ``fn`` receives the bound inputs as keyword arguments and returns either a
    Tensor (exposed as ``"output"``) or a mapping of named Tensors. The graph
    is dynamic: every :func:`forward` call re-runs ``fn`` and re-records the
    tape. ``nodes`` lists ``(op, input_ids, output_id)`` in execution order,
    which is a valid topological order.
    """

    def __init__(self, fn: Callable[..., Tensor | Mapping[str, Tensor]]):
        self.fn = fn
        self.nodes: list[Node] = []
        self.inputs: dict[str, Tensor] = {}
        self.outputs: dict[str, Tensor] | None = None
        self._values: list[Tensor] = []
        self._ids: dict[int, int] = {}

    def _id_of(self, t: Tensor) -> int:
        key = id(t)
        if key not in self._ids:
            self._ids[key] = len(self._values)
            self._values.append(t)
        return self._ids[key]

    def _record(self, op: str, parents: Sequence[Tensor], out: Tensor) -> None:
        ins = tuple(self._id_of(p) for p in parents)
        self.nodes.append(Node(op, ins, self._id_of(out)))

    def _reset(self) -> None:
        self.nodes = []
        self._values = []
        self._ids = {}
        self.outputs = None


def forward(graph: Graph, inputs: Mapping[str, Tensor]) -> dict[str, Tensor]:
    graph._reset()
    graph.inputs = {k: as_tensor(v) for k, v in inputs.items()}
    for t in graph.inputs.values():
        graph._id_of(t)
    _active_graphs.append(graph)
    try:
        result = graph.fn(**graph.inputs)
    finally:
        _active_graphs.remove(graph)
    if isinstance(result, Tensor):
        result = {"output": result}
    graph.outputs = dict(result)
    return graph.outputs


def backward(graph: Graph, output: Tensor | str = "output") -> dict[str, np.ndarray]:
    """Back-propagate from a scalar output; returns gradients of named inputs."""
    if graph.outputs is None:
        raise GraphStateError("backward called before forward")
    if isinstance(output, str):
        if output not in graph.outputs:
            raise GraphStateError(f"graph has no output named {output!r}")
        output = graph.outputs[output]
    if output.size != 1:
        raise ShapeError(f"backward: output must be scalar, got shape {output.shape}")
    if id(output) not in graph._ids:
        raise GraphStateError("output was not produced by this graph's forward pass")
    order = [t for t in graph._values if t.requires_grad]
    # restrict to the output's ancestry so unrelated branches stay untouched
    reach = {id(t) for t in _topo_order(output)}
    order = [t for t in order if id(t) in reach]
    _run_backward(order, output)
    return {k: t.grad for k, t in graph.inputs.items() if t.requires_grad and t.grad is not None}


def finite_diff_check(
    graph: Graph,
    inputs: Mapping[str, Tensor],
    wrt: Iterable[str | Tensor] | None = None,
    epsilon: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``wrt`` names graph inputs or passes Tensors the graph closes over (layer
    parameters); by default every input with ``requires_grad`` is checked.
    Perturbations are applied in place and restored afterwards.
    """
    if not 0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    outputs = forward(graph, inputs)
    if len(outputs) != 1:
        raise GraphStateError("finite_diff_check needs a single scalar output")
    (out,) = outputs.values()
    if wrt is None:
        targets = [t for t in graph.inputs.values() if t.requires_grad]
    else:
        targets = [graph.inputs[w] if isinstance(w, str) else w for w in wrt]
    for t in targets:
        t.grad = None
    _run_backward([t for t in graph._values if t.requires_grad], out)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in targets]

    def value() -> float:
        with no_grad():
            (o,) = forward(graph, inputs).values()
        return float(o.data)

    worst = 0.0
    for t, a in zip(targets, analytic):
        if not t.data.flags.c_contiguous:
            t.data = np.ascontiguousarray(t.data)
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = value()
            flat[i] = orig - epsilon
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            denom = max(abs(af[i]), abs(num), 1e-12)
            worst = max(worst, abs(af[i] - num) / denom)
        t.grad = None
    return worst
