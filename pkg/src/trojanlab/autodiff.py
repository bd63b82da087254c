"""
Reverse-Mode Automatic Differentiation
======================================

A small dense-tensor autodiff engine used by the trajectory models and by
trigger learning. Values are float64 numpy arrays. Operations executed while
a :class:`Tape` is active, on at least one tensor that requires a gradient,
are recorded; :func:`backward` replays the tape once in reverse.

Only trailing-axis broadcasting is supported: for a binary op the shape of
one operand must equal a suffix of the other operand's shape.
"""

import logging
import math
import struct
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from trojanlab.errors import (
    DimensionError,
    FormatError,
    NonFiniteError,
    TapeError,
    TrainingError,
    UsageError,
)

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
CHECKPOINT_MAGIC = b'TLTN'
CHECKPOINT_VERSION = 1

ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence]


class Tensor:
    """
    Dense float64 tensor with an optional gradient.

    Args:
        values: Anything ``numpy.array`` accepts
        shape: Optional shape to reshape ``values`` into
        requires_grad: Whether backward should populate ``grad``
    """

    def __init__(self, values, shape: Optional[Sequence[int]] = None, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        if shape is not None:
            if int(np.prod(shape, dtype=np.int64)) != data.size:
                raise DimensionError(f"cannot view {data.size} values as shape {tuple(shape)}")
            data = data.reshape(tuple(shape))
        if any(extent <= 0 for extent in data.shape):
            raise DimensionError(f"tensor extents must be positive, got {data.shape}")
        _check_finite(data, "tensor creation")
        self.data = data
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional['Tape'] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> 'Tensor':
        out = cls.__new__(cls)
        _check_finite(data, "operation output")
        out.data = data
        out.requires_grad = False
        out.grad = None
        out._tape = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def values(self) -> np.ndarray:
        """Flat view of the payload."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single value, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values at {where}")


def as_tensor(value: ArrayLike) -> Tensor:
    """Wrap constants; tensors pass through untouched."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    op: str
    output: Tensor
    inputs: Tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


_local = threading.local()


def _tape_stack() -> List['Tape']:
    stack = getattr(_local, 'stack', None)
    if stack is None:
        stack = []
        _local.stack = stack
    return stack


def active_tape() -> Optional['Tape']:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """
    Ordered record of differentiable operations.

    Use as a context manager; every recorded node's inputs were created
    before it, so the node list is already topologically sorted. A tape can
    be replayed by :func:`backward` exactly once.
    """

    def __init__(self):
        self.nodes: List[_Node] = []
        self.consumed = False

    def __enter__(self) -> 'Tape':
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, op: str, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already replayed")
        output.requires_grad = True
        output._tape = self
        self.nodes.append(_Node(op, output, tuple(inputs), backward_fn))


def _emit(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """
    Populate ``grad`` on every gradient-requiring tensor reachable from ``loss``.

    Gradients accumulate additively into existing ``grad`` arrays.

    Args:
        loss: Single-valued tensor produced on a tape

    Raises:
        UsageError: If ``loss`` is not a scalar or was not recorded
        TapeError: If the tape was already replayed
    """
    if loss.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not produced on an active tape")
    if tape.consumed:
        raise TapeError("tape already replayed; record the forward pass again")
    tape.consumed = True

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: Dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g_out = grads.get(id(node.output))
        if g_out is None:
            continue
        input_grads = node.backward_fn(g_out)
        for tensor, g in zip(node.inputs, input_grads):
            if g is None or not tensor.requires_grad:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.array(g, dtype=np.float64).reshape(tensor.shape)
                seen[key] = tensor

    for key, tensor in seen.items():
        g = grads[key]
        tensor.grad = g.copy() if tensor.grad is None else tensor.grad + g


# ---------------------------------------------------------------------------
# Broadcasting helpers
# ---------------------------------------------------------------------------

def _result_shape(a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(b) <= len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise DimensionError(f"shapes {a} and {b} are not trailing-broadcast compatible")


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

_GELU_C = math.sqrt(2.0 / math.pi)

BINARY_OPS = ('add', 'sub', 'mul', 'div')
UNARY_OPS = ('relu', 'gelu', 'tanh', 'square', 'sqrt', 'abs')


def _gelu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    value = 0.5 * x * (1.0 + t)
    slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
    return value, slope


def elementwise(op: str, a: ArrayLike, b: Optional[ArrayLike] = None) -> Tensor:
    """
    Apply an elementwise operator.

    Args:
        op: One of ``add, sub, mul, div, relu, gelu, tanh, square, sqrt, abs``
        a: First operand
        b: Second operand for binary operators

    Returns:
        Result tensor, broadcast along trailing axes for binary operators
    """
    a = as_tensor(a)
    if op in BINARY_OPS:
        if b is None:
            raise UsageError(f"{op} needs two operands")
        b = as_tensor(b)
        shape = _result_shape(a.shape, b.shape)
        x, y = a.data, b.data
        if op == 'add':
            data = x + y
            fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
        elif op == 'sub':
            data = x - y
            fn = lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
        elif op == 'mul':
            data = x * y
            fn = lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape))
        else:
            data = x / y
            fn = lambda g: (_unbroadcast(g / y, a.shape), _unbroadcast(-g * x / (y * y), b.shape))
        return _emit(op, np.broadcast_to(data, shape).copy(), (a, b), fn)

    if op not in UNARY_OPS:
        raise UsageError(f"unknown elementwise operator {op!r}")
    if b is not None:
        raise UsageError(f"{op} takes a single operand")
    x = a.data
    if op == 'relu':
        data = np.maximum(x, 0.0)
        slope = (x > 0).astype(np.float64)
    elif op == 'gelu':
        data, slope = _gelu(x)
    elif op == 'tanh':
        data = np.tanh(x)
        slope = 1.0 - data ** 2
    elif op == 'square':
        data = x * x
        slope = 2.0 * x
    elif op == 'abs':
        data = np.abs(x)
        slope = np.sign(x)
    else:
        if (x < 0).any():
            raise UsageError("sqrt of negative values")
        data = np.sqrt(x)
        with np.errstate(divide='ignore'):
            slope = np.where(data > 0, 0.5 / np.where(data > 0, data, 1.0), 0.0)
    return _emit(op, data, (a,), lambda g: (g * slope,))


def add(a, b) -> Tensor:
    return elementwise('add', a, b)


def sub(a, b) -> Tensor:
    return elementwise('sub', a, b)


def mul(a, b) -> Tensor:
    return elementwise('mul', a, b)


def div(a, b) -> Tensor:
    return elementwise('div', a, b)


def relu(a) -> Tensor:
    return elementwise('relu', a)


def gelu(a) -> Tensor:
    return elementwise('gelu', a)


def tanh(a) -> Tensor:
    return elementwise('tanh', a)


def square(a) -> Tensor:
    return elementwise('square', a)


def sqrt(a) -> Tensor:
    return elementwise('sqrt', a)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops
# ---------------------------------------------------------------------------

def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
    Matrix product over the last two axes.

    ``a`` may carry leading batch axes; ``b`` is either a plain ``k×n``
    matrix or carries the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    x, y = a.data, b.data
    data = np.matmul(x, y)

    def fn(g):
        ga = np.matmul(g, np.swapaxes(y, -1, -2))
        if y.ndim == 2:
            gb = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(x, -1, -2), g)
        return ga, gb

    return _emit('matmul', data, (a, b), fn)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    return _emit('reshape', a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit('transpose', np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def sum(a: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001 - mirrors numpy
    """Sum over one axis, or over everything when ``axis`` is None."""
    if axis is None:
        data = np.array(a.data.sum())
        return _emit('sum', data, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))
    axis = axis % a.ndim
    data = a.data.sum(axis=axis)
    return _emit('sum', data, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    return mul(sum(a), 1.0 / a.size)


def stack(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack needs equal shapes, got {sorted(shapes)}")
    data = np.stack([t.data for t in tensors], axis=axis)
    axis = axis % data.ndim

    def fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _emit('stack', data, tensors, fn)


def index_select(a: Tensor, axis: int, indices: Sequence[int]) -> Tensor:
    """Gather entries along ``axis``; repeated indices scatter-add on backward."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % a.ndim
    data = np.take(a.data, indices, axis=axis)

    def fn(g):
        full = np.zeros_like(a.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return _emit('index_select', data, (a,), fn)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Look up rows of ``table`` (shape ``n×d``) for an integer id array."""
    ids = np.asarray(ids, dtype=np.int64)
    data = table.data[ids]

    def fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return _emit('embedding', data, (table,), fn)


def overwrite(base: Tensor, flat_index: Sequence[int], src: Tensor) -> Tensor:
    """
    Replace entries of ``base`` (by flat index) with the entries of ``src``.

    The gradient of ``base`` is zero at overwritten entries; ``src`` receives
    the upstream gradient of the entries it was written to.
    """
    flat_index = np.asarray(flat_index, dtype=np.int64)
    if flat_index.size != src.size:
        raise DimensionError(f"overwrite of {flat_index.size} entries from {src.size} values")
    if len(set(flat_index.tolist())) != flat_index.size:
        raise UsageError("overwrite indices must be distinct")
    data = base.data.copy().reshape(-1)
    data[flat_index] = src.data.reshape(-1)

    def fn(g):
        g_flat = g.reshape(-1)
        g_base = g_flat.copy()
        g_base[flat_index] = 0.0
        return g_base.reshape(base.shape), g_flat[flat_index].reshape(src.shape)

    return _emit('overwrite', data.reshape(base.shape), (base, src), fn)


def clip(a: Tensor, low: ArrayLike, high: ArrayLike) -> Tensor:
    """Clamp values; gradient passes only where the value was not clamped."""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    data = np.clip(a.data, low, high)
    inside = ((a.data >= low) & (a.data <= high)).astype(np.float64)
    return _emit('clip', data, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# Model building blocks
# ---------------------------------------------------------------------------

def softmax_causal(scores: Tensor, key_mask: Optional[np.ndarray] = None) -> Tensor:
    """
    Row softmax over the last axis restricted to non-future positions.

    Args:
        scores: Tensor of shape ``batch×heads×T×T`` (any leading axes)
        key_mask: Optional boolean ``batch×T`` array, False marks padded keys.
            A query always keeps itself so no row is empty.

    Returns:
        Attention weights; future and masked keys get exactly zero weight
    """
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise DimensionError(f"softmax_causal needs square trailing axes, got {scores.shape}")
    T = scores.shape[-1]
    allowed = np.tril(np.ones((T, T), dtype=bool))
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        if key_mask.shape != (scores.shape[0], T):
            raise DimensionError(f"key mask shape {key_mask.shape} does not match scores {scores.shape}")
        shape = (scores.shape[0],) + (1,) * (scores.ndim - 3) + (1, T)
        allowed = (allowed & key_mask.reshape(shape)) | np.eye(T, dtype=bool)
    allowed = np.broadcast_to(allowed, scores.shape)
    masked = np.where(allowed, scores.data, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    exps = np.where(allowed, np.exp(shifted), 0.0)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def fn(g):
        return (probs * (g - (g * probs).sum(axis=-1, keepdims=True)),)

    return _emit('softmax_causal', probs, (scores,), fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    data = xhat * gain.data + bias.data

    def fn(g):
        g_xhat = g * gain.data
        gx = inv_std * (
            g_xhat
            - g_xhat.mean(axis=-1, keepdims=True)
            - xhat * (g_xhat * xhat).mean(axis=-1, keepdims=True)
        )
        g_gain = (g * xhat).reshape(-1, d).sum(axis=0)
        g_bias = g.reshape(-1, d).sum(axis=0)
        return gx, g_gain, g_bias

    return _emit('layer_norm', data, (x, gain, bias), fn)


def depthwise_conv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """
    Causal depthwise convolution along the time axis.

    ``x`` is ``batch×T×d`` and ``kernel`` is ``w×d``; the input is left-padded
    with ``w−1`` zeros and ``kernel[w−1]`` weighs the current position.
    """
    if x.ndim != 3 or kernel.ndim != 2 or kernel.shape[1] != x.shape[2]:
        raise DimensionError(f"depthwise_conv1d shapes {x.shape} and {kernel.shape} do not match")
    w = kernel.shape[0]
    B, T, d = x.shape
    padded = np.concatenate([np.zeros((B, w - 1, d)), x.data], axis=1)
    data = np.zeros((B, T, d))
    for j in range(w):
        data += padded[:, j:j + T, :] * kernel.data[j]

    def fn(g):
        g_padded = np.zeros_like(padded)
        g_kernel = np.zeros_like(kernel.data)
        for j in range(w):
            g_padded[:, j:j + T, :] += g * kernel.data[j]
            g_kernel[j] = (padded[:, j:j + T, :] * g).sum(axis=(0, 1))
        return g_padded[:, w - 1:, :], g_kernel

    return _emit('depthwise_conv1d', data, (x, kernel), fn)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout; the identity outside training mode."""
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise UsageError("dropout in training mode needs a random generator")
    keep = (rng.random(x.shape) >= rate).astype(np.float64) / (1.0 - rate)
    return _emit('dropout', x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimState:
    """Adam moments and hyperparameters for a named parameter set."""

    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-4
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def global_grad_norm(grads: Mapping[str, Optional[np.ndarray]]) -> float:
    total = 0.0
    for g in grads.values():
        if g is not None:
            total += float(np.sum(g * g))
    return math.sqrt(total)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]],
              state: OptimState, clip_norm: float, lr_scale: float = 1.0) -> float:
    """
    Apply one clipped, bias-corrected Adam update with decoupled weight decay.

    Args:
        params: Named parameter tensors, updated in place
        grads: Gradient per parameter name (missing or None counts as zero)
        state: Moments and hyperparameters, advanced by one step
        clip_norm: Global gradient norm ceiling
        lr_scale: Multiplier on the learning rate (warmup schedules)

    Returns:
        Global gradient norm before clipping
    """
    if clip_norm <= 0:
        raise UsageError(f"clip_norm must be positive, got {clip_norm}")
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {name!r}", step=state.step_count + 1)

    norm = global_grad_norm(grads)
    scale = clip_norm / norm if norm > clip_norm else 1.0
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate * lr_scale
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t

    for name, param in params.items():
        g = grads.get(name)
        g = np.zeros_like(param.data) if g is None else g * scale
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        if state.weight_decay:
            param.data = param.data - lr * state.weight_decay * param.data
        param.data = param.data - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps_adam)
        if not np.isfinite(param.data).all():
            raise TrainingError(f"parameter {name!r} became non-finite", step=t)
    return norm


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
              floor: float = 1e-4) -> float:
    """
    Compare reverse-mode gradients against central finite differences.

    Args:
        fn: Zero-argument callable building a scalar loss from ``inputs``
        inputs: Tensors to differentiate; their ``requires_grad`` is set
        h: Finite difference step
        floor: Lower bound of the relative error denominator

    Returns:
        Largest relative error over every input entry
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.grad = None
    with Tape():
        loss = fn()
    backward(loss)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        grad_flat = grad.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            plus = fn().item()
            flat[i] = original - h
            minus = fn().item()
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)
            denom = max(abs(numeric), abs(grad_flat[i]), floor)
            worst = max(worst, abs(numeric - grad_flat[i]) / denom)
    return worst


# ---------------------------------------------------------------------------
# Binary tensor files
# ---------------------------------------------------------------------------

class ByteReader:
    """Cursor over a bytes buffer that raises FormatError on truncation."""

    def __init__(self, buffer: bytes, source: str = '<buffer>'):
        self.buffer = buffer
        self.offset = 0
        self.source = source

    def take(self, count: int) -> bytes:
        end = self.offset + count
        if count < 0 or end > len(self.buffer):
            raise FormatError(f"{self.source}: truncated at byte {self.offset}")
        chunk = self.buffer[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack('<I')
        start = self.offset
        try:
            return self.take(length).decode('utf-8')
        except UnicodeDecodeError:
            raise FormatError(f"{self.source}: invalid UTF-8 string at byte {start}") from None

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype='<f8').astype(np.float64)

    def at_end(self) -> bool:
        return self.offset == len(self.buffer)


def pack_string(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<I', len(raw)) + raw


def pack_floats(values: np.ndarray) -> bytes:
    return np.ascontiguousarray(values, dtype='<f8').tobytes()


def tensors_to_bytes(tensors: Mapping[str, Union[Tensor, np.ndarray]], metadata: str = '') -> bytes:
    """
    Encode named tensors.

    Layout: magic, version, metadata string, tensor count; per tensor the
    name, rank, extents and little-endian float64 payload; then a CRC-32 of
    all payload bytes.
    """
    parts = [CHECKPOINT_MAGIC, struct.pack('<I', CHECKPOINT_VERSION), pack_string(metadata),
             struct.pack('<I', len(tensors))]
    crc = 0
    for name, tensor in tensors.items():
        data = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
        payload = pack_floats(data)
        crc = zlib.crc32(payload, crc)
        parts.append(pack_string(name))
        parts.append(struct.pack('<B', data.ndim))
        parts.append(struct.pack(f'<{data.ndim}I', *data.shape))
        parts.append(payload)
    parts.append(struct.pack('<I', crc & 0xFFFFFFFF))
    return b''.join(parts)


def tensors_from_bytes(buffer: bytes, source: str = '<buffer>') -> Tuple[Dict[str, np.ndarray], str]:
    """Decode :func:`tensors_to_bytes` output into arrays plus the metadata string."""
    reader = ByteReader(buffer, source)
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{source}: not a trojanlab tensor file")
    (version,) = reader.unpack('<I')
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{source}: unsupported format version {version}")
    metadata = reader.string()
    (count,) = reader.unpack('<I')
    tensors: Dict[str, np.ndarray] = {}
    crc = 0
    for _ in range(count):
        name = reader.string()
        (rank,) = reader.unpack('<B')
        extents = reader.unpack(f'<{rank}I') if rank else ()
        size = int(np.prod(extents, dtype=np.int64))
        start = reader.offset
        values = reader.floats(size)
        crc = zlib.crc32(reader.buffer[start:reader.offset], crc)
        tensors[name] = values.reshape(extents)
    (stored,) = reader.unpack('<I')
    if stored != (crc & 0xFFFFFFFF):
        raise FormatError(f"{source}: payload checksum mismatch")
    if not reader.at_end():
        raise FormatError(f"{source}: trailing bytes after checksum")
    return tensors, metadata


def save_tensors(path: str, tensors: Mapping[str, Union[Tensor, np.ndarray]], metadata: str = '') -> None:
    with open(path, 'wb') as f:
        f.write(tensors_to_bytes(tensors, metadata))
    logger.debug(f"Wrote {len(tensors)} tensors to {path}")


def load_tensors(path: str) -> Tuple[Dict[str, np.ndarray], str]:
    with open(path, 'rb') as f:
        buffer = f.read()
    return tensors_from_bytes(buffer, source=path)
