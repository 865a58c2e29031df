"""
Dense double-precision tensors with tape-based reverse-mode differentiation.

Every differentiable operation appends one record to the active tape of the
calling thread. ``Tape.backward`` walks the records in reverse, which is a
topological order because records are appended in execution order.

Broadcasting is limited to missing *leading* dimensions: two operands must
either share a shape or one shape must be a trailing suffix of the other.
Gradients are summed over the missing leading axes.
"""

import itertools
import logging
import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field

from backend.core.errors import AutodiffError, NumericError, ShapeError

logger = logging.getLogger(__name__)

_ids = itertools.count(1)
_local = threading.local()

MASK_VALUE = -1e9
LAYER_NORM_EPS = 1e-9
_GELU_C = math.sqrt(2.0 / math.pi)

BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


class Tensor:
    """
    A dense array of float64 values that can take part in differentiation.

    Shape ``()`` is a scalar; every other dimension must be positive.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        if any(dim <= 0 for dim in self.data.shape):
            raise ShapeError("tensor", self.data.shape)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

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
        return slice_tensor(self, index)


TensorLike = Union[Tensor, np.ndarray, float, int]


@dataclass
class TapeRecord:
    op_id: str
    inputs: Tuple[int, ...]
    output: int
    backward: BackwardFn
    tensors: Tuple[Tensor, ...]
    value: np.ndarray


class Tape:
    """
    Ordered log of differentiable operations for one forward pass.

    A tape may be consumed by exactly one backward pass. Recording a new
    operation onto a consumed tape starts a fresh recording.
    """

    def __init__(self):
        self.records: List[TapeRecord] = []
        self._outputs: set = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    @property
    def consumed(self) -> bool:
        return self._consumed

    def reset(self) -> None:
        self.records.clear()
        self._outputs.clear()
        self._consumed = False

    def record(self, op_id: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        if self._consumed:
            self.reset()
        self.records.append(
            TapeRecord(
                op_id=op_id,
                inputs=tuple(t.node_id for t in inputs),
                output=output.node_id,
                backward=backward,
                tensors=tuple(inputs),
                value=output.data,
            )
        )
        self._outputs.add(output.node_id)

    def nonfinite_origin(self) -> Optional[str]:
        """Op id of the first recorded output holding a NaN or Inf, if any."""
        for record in self.records:
            if not np.isfinite(record.value).all():
                return record.op_id
        return None

    def _propagate(self, loss: Tensor) -> Tuple[Dict[int, np.ndarray], Dict[int, Tensor]]:
        if self._consumed:
            raise AutodiffError("Tape already consumed by a backward pass; call reset()")
        if not isinstance(loss, Tensor):
            raise AutodiffError("backward expects a Tensor")
        if loss.data.size != 1:
            raise AutodiffError(f"backward expects a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            origin = self.nonfinite_origin() or "input"
            logger.error(f"Loss is not finite; first non-finite value produced by {origin}")
            raise NumericError("Loss is not finite", op_id=origin)
        if loss.node_id not in self._outputs and not loss.requires_grad:
            raise AutodiffError("Loss was not recorded on this tape")

        grads: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: Dict[int, Tensor] = {}
        if loss.node_id not in self._outputs:
            leaves[loss.node_id] = loss

        for record in reversed(self.records):
            upstream = grads.get(record.output)
            if upstream is None:
                continue
            input_grads = record.backward(upstream)
            for tensor, grad in zip(record.tensors, input_grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if not np.all(np.isfinite(grad)):
                    logger.error(f"Non-finite gradient produced by {record.op_id}")
                    raise NumericError("Non-finite gradient", op_id=record.op_id)
                previous = grads.get(tensor.node_id)
                grads[tensor.node_id] = grad if previous is None else previous + grad
                if tensor.node_id not in self._outputs:
                    leaves[tensor.node_id] = tensor

        self._consumed = True
        return grads, leaves

    def backward(self, loss: Tensor) -> Dict[int, np.ndarray]:
        """
        Back-propagate from a scalar loss and accumulate ``.grad`` on every
        leaf tensor that requires gradients.

        Returns:
            Dict[int, np.ndarray]: gradient per node id reached.
        Raises:
            AutodiffError: non-scalar loss, or the tape was already consumed.
            NumericError: a NaN/Inf appeared, naming the originating op.
        """
        grads, leaves = self._propagate(loss)
        for node_id, tensor in leaves.items():
            grad = grads[node_id]
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        return grads

    def gradients(self, loss: Tensor, params: Sequence[Tensor]) -> List[np.ndarray]:
        """
        Back-propagate without touching ``.grad``; safe when several threads
        share the same parameter tensors on their own tapes.
        """
        grads, _ = self._propagate(loss)
        return [
            grads[p.node_id] if p.node_id in grads else np.zeros_like(p.data)
            for p in params
        ]


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = [Tape()]
    return _local.stack


def current_tape() -> Tape:
    return _tape_stack()[-1]


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


def backward(loss: Tensor) -> Dict[int, np.ndarray]:
    return current_tape().backward(loss)


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def apply_op(op_id: str, value: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    Wrap a forward value as a Tensor and record how to differentiate it.

    ``backward_fn`` receives the upstream gradient and returns one gradient
    (or None) per input, each shaped like that input.
    """
    requires = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=requires)
    if requires:
        current_tape().record(op_id, inputs, out, backward_fn)
    return out


def _broadcast_shape(op: str, a: Tuple[int, ...], b: Tuple[int, ...]) -> Tuple[int, ...]:
    if a == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    raise ShapeError(op, a, b)


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    return grad


def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a.shape, b.shape)
    return apply_op(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a.shape, b.shape)
    return apply_op(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a.shape, b.shape)
    return apply_op(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    """
    Matrix product over the last two axes.

    ``b`` is either a 2-D matrix shared across all leading axes of ``a``, or
    has exactly the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2:
        k, n = b.shape

        def backward_shared(g):
            grad_a = g @ b.data.T
            grad_b = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            return grad_a, grad_b

        return apply_op("matmul", a.data @ b.data, (a, b), backward_shared)

    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward_batched(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return apply_op("matmul", a.data @ b.data, (a, b), backward_batched)


def transpose(x: TensorLike, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose{axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return apply_op(
        "transpose",
        np.transpose(x.data, axes),
        (x,),
        lambda g: (np.transpose(g, inverse),),
    )


def swap_last(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x: TensorLike, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError("reshape", x.shape, tuple(shape)) from e
    return apply_op("reshape", value, (x,), lambda g: (g.reshape(x.shape),))


def slice_tensor(x: TensorLike, index) -> Tensor:
    x = as_tensor(x)
    try:
        value = np.array(x.data[index])
    except IndexError as e:
        raise ShapeError(f"slice[{index}]", x.shape) from e

    def backward_slice(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return apply_op("slice", value, (x,), backward_slice)


def concat(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat")
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError("concat", *(t.shape for t in tensors)) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_concat(g):
        return tuple(np.split(g, bounds, axis=axis))

    return apply_op("concat", value, tensors, backward_concat)


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return apply_op(
        "sum",
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),),
    )


def mean(x: TensorLike, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod(
        [x.shape[a] for a in np.atleast_1d(axis)]
    )
    return apply_op(
        "mean",
        np.mean(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,),
    )


def square(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    return apply_op("square", x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def sqrt(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    value = np.sqrt(x.data)
    return apply_op("sqrt", value, (x,), lambda g: (0.5 * g / value,))


def exp(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    value = np.exp(x.data)
    return apply_op("exp", value, (x,), lambda g: (g * value,))


def max_with_zero(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    active = x.data > 0.0
    return apply_op(
        "max_with_zero",
        np.where(active, x.data, 0.0),
        (x,),
        lambda g: (g * active,),
    )


def softmax(x: TensorLike) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / np.sum(e, axis=-1, keepdims=True)

    def backward_softmax(g):
        return (value * (g - np.sum(g * value, axis=-1, keepdims=True)),)

    return apply_op("softmax", value, (x,), backward_softmax)


def layer_norm(
    x: TensorLike,
    gamma: Optional[Tensor] = None,
    beta: Optional[Tensor] = None,
    eps: float = LAYER_NORM_EPS,
) -> Tensor:
    """
    Normalise over the last axis, then apply the optional affine parameters.
    """
    x = as_tensor(x)
    width = x.shape[-1]
    for param in (gamma, beta):
        if param is not None and param.shape != (width,):
            raise ShapeError("layer_norm", x.shape, param.shape)

    centred = x.data - np.mean(x.data, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(np.mean(centred * centred, axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    scale = gamma.data if gamma is not None else 1.0
    shift = beta.data if beta is not None else 0.0
    inputs = [x] + [p for p in (gamma, beta) if p is not None]

    def backward_layer_norm(g):
        g_normed = g * scale
        grad_x = inv_std * (
            g_normed
            - np.mean(g_normed, axis=-1, keepdims=True)
            - normed * np.mean(g_normed * normed, axis=-1, keepdims=True)
        )
        grads = [grad_x]
        if gamma is not None:
            grads.append(_reduce_to(g * normed, (width,)))
        if beta is not None:
            grads.append(_reduce_to(g, (width,)))
        return tuple(grads)

    return apply_op("layer_norm", normed * scale + shift, inputs, backward_layer_norm)


def gelu(x: TensorLike) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    inner = _GELU_C * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)
    value = 0.5 * x.data * (1.0 + t)

    def backward_gelu(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return apply_op("gelu", value, (x,), backward_gelu)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    if table.ndim != 2 or indices.size == 0 or indices.min() < 0 or indices.max() >= table.shape[0]:
        raise ShapeError("embedding_lookup", table.shape, indices.shape)

    def backward_lookup(g):
        full = np.zeros_like(table.data)
        np.add.at(full, indices, g)
        return (full,)

    return apply_op("embedding_lookup", table.data[indices], (table,), backward_lookup)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(keep))


def causal_mask(length: int) -> np.ndarray:
    """Additive mask: position t may attend to positions <= t only."""
    return np.triu(np.full((length, length), MASK_VALUE), k=1)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: Optional[TensorLike] = None
) -> Tensor:
    """
    softmax(q k^T / sqrt(d) + mask) v over the last two axes.

    ``mask`` is additive, shaped ``(L_q, L_k)`` or with the full leading axes.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled_dot_product_attention", q.shape, k.shape, v.shape)
    scores = mul(matmul(q, swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = add(scores, mask)
    return matmul(softmax(scores), v)


class GradCheckReport(BaseModel):
    errors: Dict[str, float] = Field(..., description="Max relative error per parameter")
    tolerance: float = Field(..., gt=0.0)
    checked: int = Field(..., ge=0, description="Coordinates compared")
    passed: bool

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params: Union[Dict[str, Tensor], Sequence[Tensor]],
    eps: float = 1e-6,
    tolerance: float = 1e-5,
    coordinates: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-12,
) -> GradCheckReport:
    """
    Compare tape gradients of ``f`` against central finite differences.

    Args:
        f: zero-argument callable that re-evaluates the scalar loss from the
            current values of ``params``.
        params: tensors to check, by name or positionally.
        eps (float): perturbation in [1e-7, 1e-3].
        tolerance (float): maximum accepted relative error.
        coordinates (int, optional): check a seeded random subset of this many
            scalar coordinates across all parameters instead of all of them.
        floor (float): lower bound of the relative-error denominator.
    Returns:
        GradCheckReport: per-parameter maximum relative error.
    Raises:
        NumericError: if ``f`` is not finite at a perturbed point.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    named = params if isinstance(params, dict) else {f"param{i}": p for i, p in enumerate(params)}
    names = list(named)
    tensors = [named[n] for n in names]

    with Tape() as tape:
        loss = f()
        analytic = tape.gradients(loss, tensors)

    sizes = [t.data.size for t in tensors]
    flat = [(i, j) for i, size in enumerate(sizes) for j in range(size)]
    if coordinates is not None and coordinates < len(flat):
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(flat), size=coordinates, replace=False)
        flat = [flat[p] for p in sorted(picks)]

    for tensor in tensors:
        if not tensor.data.flags.c_contiguous:
            tensor.data = np.ascontiguousarray(tensor.data)

    errors = {name: 0.0 for name in names}
    with no_grad():
        for i, j in flat:
            tensor = tensors[i]
            view = tensor.data.reshape(-1)
            original = view[j]
            view[j] = original + eps
            plus = f().item()
            view[j] = original - eps
            minus = f().item()
            view[j] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NumericError(f"f is not finite when perturbing {names[i]}[{j}]")
            numeric = (plus - minus) / (2.0 * eps)
            exact = float(analytic[i].reshape(-1)[j])
            rel = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            errors[names[i]] = max(errors[names[i]], rel)

    passed = all(err < tolerance for err in errors.values())
    logger.info(
        f"Gradient check over {len(flat)} coordinates: max relative error "
        f"{max(errors.values(), default=0.0):.3e} ({'pass' if passed else 'fail'})"
    )
    return GradCheckReport(errors=errors, tolerance=tolerance, checked=len(flat), passed=passed)
