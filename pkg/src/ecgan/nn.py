"""Layers and optimisers built on :mod:`ecgan.autodiff`."""
from __future__ import annotations

import math
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor

GATES = ("i", "f", "o", "c")
INSTANCE_NORM_EPS = 1e-5


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered in attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = _uniform(rng, (in_features, out_features), in_features)
        self.bias = _zeros((out_features,))

    def __call__(self, x) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


class LstmCell(Module):
    """Single LSTM layer.

    The four gate blocks are stored fused along the last axis in the order
    input, forget, output, candidate; ``W_i``/``U_f``/``b_c``-style properties
    expose writable views of each block.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        if input_size < 1 or hidden_size < 1:
            raise ValueError("LSTM sizes must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.W = _uniform(rng, (input_size, 4 * hidden_size), input_size)
        self.U = _uniform(rng, (hidden_size, 4 * hidden_size), hidden_size)
        self.b = _zeros((4 * hidden_size,))
        self.b_f[:] = 1.0

    def _block(self, arr: np.ndarray, gate: str) -> np.ndarray:
        k = GATES.index(gate)
        h = self.hidden_size
        return arr[..., k * h:(k + 1) * h]

    def __getattr__(self, name: str):
        # W_i, U_o, b_f, ... as views into the fused storage
        if len(name) == 3 and name[1] == "_" and name[0] in "WUb" and name[2] in GATES:
            return self._block(getattr(self, name[0]).data, name[2])
        raise AttributeError(name)

    def step_projected(self, xw: Tensor, h_prev: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
        """One step given the precomputed input projection ``x @ W + b``."""
        h = self.hidden_size
        pre = xw + ad.matmul(h_prev, self.U)
        sig = ad.sigmoid(pre[..., : 3 * h])
        cand = ad.tanh(pre[..., 3 * h:])
        i, f, o = sig[..., :h], sig[..., h:2 * h], sig[..., 2 * h:]
        c = f * c_prev + i * cand
        return o * ad.tanh(c), c

    def project(self, x) -> Tensor:
        return ad.matmul(x, self.W) + self.b


def lstm_step(cell: LstmCell, x_t, h_prev, c_prev) -> tuple[Tensor, Tensor]:
    x_t, h_prev, c_prev = ad.as_tensor(x_t), ad.as_tensor(h_prev), ad.as_tensor(c_prev)
    if x_t.shape[-1] != cell.input_size:
        raise ShapeError(f"lstm_step: input width {x_t.shape[-1]} != {cell.input_size}")
    if h_prev.shape[-1] != cell.hidden_size or c_prev.shape != h_prev.shape:
        raise ShapeError(
            f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} "
            f"do not match hidden size {cell.hidden_size}"
        )
    return cell.step_projected(cell.project(x_t), h_prev, c_prev)


def unroll_steps(
    stack: Sequence[LstmCell],
    steps: Sequence[Tensor],
    h0: Tensor | Sequence[Tensor] | None = None,
) -> list[Tensor]:
    """Run a layer stack over a list of per-step (batch, d) inputs.

    Repeated step objects (the same Tensor appearing at several positions)
    share a single input projection.
    """
    if not steps:
        raise ShapeError("lstm_unroll: empty sequence")
    batch = steps[0].shape[0]
    if h0 is None or isinstance(h0, Tensor):
        h0s = [h0] * len(stack)
    else:
        h0s = list(h0)
        if len(h0s) != len(stack):
            raise ShapeError(f"lstm_unroll: {len(h0s)} initial states for {len(stack)} layers")
    seq = list(steps)
    for cell, h_init in zip(stack, h0s):
        if seq[0].shape[-1] != cell.input_size:
            raise ShapeError(f"lstm_unroll: input width {seq[0].shape[-1]} != {cell.input_size}")
        c = Tensor(np.zeros((batch, cell.hidden_size)))
        h = c if h_init is None else h_init
        if h.shape != (batch, cell.hidden_size):
            raise ShapeError(f"lstm_unroll: initial state shape {h.shape}")
        cache: dict[int, Tensor] = {}
        outs = []
        for x_t in seq:
            xw = cache.get(id(x_t))
            if xw is None:
                xw = cache[id(x_t)] = cell.project(x_t)
            h, c = cell.step_projected(xw, h, c)
            outs.append(h)
        seq = outs
    return seq


def lstm_unroll(stack: Sequence[LstmCell], sequence, h0=None) -> Tensor:
    """Unroll ``stack`` over ``sequence`` of shape (T, d) or (batch, T, d).

    Returns the top layer's hidden states with the same leading layout,
    i.e. (T, hidden) or (batch, T, hidden).
    """
    sequence = ad.as_tensor(sequence)
    unbatched = sequence.ndim == 2
    if unbatched:
        sequence = ad.reshape(sequence, (1,) + sequence.shape)
        if h0 is not None:
            h0 = [ad.reshape(h, (1, -1)) for h in ([h0] if isinstance(h0, Tensor) else h0)]
    if sequence.ndim != 3 or sequence.shape[1] < 1:
        raise ShapeError(f"lstm_unroll: expected (T, d) or (batch, T, d), got {sequence.shape}")
    steps = [sequence[:, t, :] for t in range(sequence.shape[1])]
    outs = unroll_steps(stack, steps, h0)
    batch, hidden = outs[0].shape
    stacked = ad.concat([ad.reshape(h, (batch, 1, hidden)) for h in outs], axis=1)
    return ad.reshape(stacked, stacked.shape[1:]) if unbatched else stacked


class Conv1dBlock(Module):
    """Convolution (same padding) -> instance norm -> affine -> ReLU.

    No convolution bias: the per-channel instance normalisation removes it
    exactly, which would leave a parameter with identically zero gradient.
    With ``affine=False`` gamma/beta stay fixed at 1/0 and are not parameters.
    """

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 kernel_size: int = 6, affine: bool = True):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.affine = affine
        self.weight = _uniform(rng, (out_channels, in_channels, kernel_size),
                               in_channels * kernel_size)
        self.gamma = Tensor(np.ones((out_channels, 1)), requires_grad=affine)
        self.beta = Tensor(np.zeros((out_channels, 1)), requires_grad=affine)

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        unbatched = x.ndim == 2
        if unbatched:
            x = ad.reshape(x, (1,) + x.shape)
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"conv_block: expected {self.in_channels} input channels, got {x.shape}")
        y = ad.instance_norm(ad.conv1d(x, self.weight), INSTANCE_NORM_EPS)
        if self.affine:
            y = y * self.gamma + self.beta
        y = ad.relu(y)
        return ad.reshape(y, y.shape[1:]) if unbatched else y


def conv_block(block: Conv1dBlock, x) -> Tensor:
    return block(x)


def global_avg_pool(x) -> Tensor:
    return ad.global_avg_pool(x)


class EmbeddingTable(Module):
    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        self.num_classes = num_classes
        self.dim = dim
        self.rows = Tensor(rng.normal(0.0, scale, size=(num_classes, dim)), requires_grad=True)

    def __call__(self, labels) -> Tensor:
        labels = np.atleast_1d(np.asarray(labels))
        if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= self.num_classes:
            raise ValueError(f"unknown label(s) {labels!r} for {self.num_classes} classes")
        onehot = np.zeros((labels.size, self.num_classes))
        onehot[np.arange(labels.size), labels] = 1.0
        return ad.matmul(Tensor(onehot), self.rows)


# ---------------------------------------------------------------- optimisers

class Optimizer:
    kind = ""

    def __init__(self, params: Mapping[str, Tensor], learning_rate: float):
        self.params = dict(params)
        self.learning_rate = float(learning_rate)
        self.t = 0

    def step(self, grads: Mapping[str, np.ndarray] | None = None) -> None:
        """Descend along ``grads`` (defaults to each parameter's ``.grad``).

        Parameters without a gradient are treated as having zero gradient.
        """
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape for {k!r}")
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {k!r}")
        self.t += 1
        for k, p in self.params.items():
            g = grads.get(k)
            self._update(k, p, np.zeros(p.shape) if g is None else g)

    def _update(self, key: str, p: Tensor, g: np.ndarray) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    kind = "adam"

    def __init__(self, params, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, learning_rate)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def _update(self, key, p, g):
        m, v = self.m[key], self.v[key]
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1 ** self.t)
        vhat = v / (1 - self.beta2 ** self.t)
        p.data -= self.learning_rate * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self):
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k] = np.array(state[f"m/{k}"], dtype=np.float64).reshape(self.params[k].shape)
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64).reshape(self.params[k].shape)


class RMSProp(Optimizer):
    kind = "rmsprop"

    def __init__(self, params, learning_rate=5e-5, decay=0.9, eps=1e-8):
        super().__init__(params, learning_rate)
        self.decay, self.eps = decay, eps
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def _update(self, key, p, g):
        v = self.v[key]
        v *= self.decay
        v += (1 - self.decay) * g * g
        p.data -= self.learning_rate * g / (np.sqrt(v) + self.eps)

    def state_dict(self):
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state_dict(self, state):
        self.t = int(state["t"][0])
        for k in self.params:
            self.v[k] = np.array(state[f"v/{k}"], dtype=np.float64).reshape(self.params[k].shape)


def optimizer_step(state: Optimizer, grads: Mapping[str, np.ndarray] | None = None) -> None:
    state.step(grads)


def clip_params(params: Mapping[str, Tensor] | Sequence[Tensor], c: float) -> None:
    """Clamp every parameter into [-c, c] in place."""
    if c <= 0:
        raise ValueError(f"clip window must be positive, got {c}")
    values = params.values() if isinstance(params, Mapping) else params
    for p in values:
        np.clip(p.data, -c, c, out=p.data)
