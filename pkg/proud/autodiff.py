# proud/autodiff.py
"""
Minimal dense-tensor arithmetic with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays.  Every primitive is a ``Function`` subclass
with a ``forward`` over raw arrays and a ``backward`` that maps the gradient of
the output to one gradient per input.  The graph is rebuilt on every forward
pass (define-by-run) and released once ``backward`` has walked it.

Binary primitives only broadcast a scalar against a tensor; everything else
must match shapes exactly.
"""

from __future__ import annotations

import contextlib
import logging
import threading
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Type, Union

import numpy as np

from proud.errors import (
    DegenerateVectorError,
    InvalidArgumentError,
    NumericDomainError,
    ShapeError,
)

logger = logging.getLogger(__name__)

DTYPE = np.float64
NORM_FLOOR = 1e-12
TARGET_TOLERANCE = 1e-6

ArrayLike = Union[np.ndarray, float, int, Sequence]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (per thread)."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


# ------------------------------------------------------------------ #
#  TENSOR
# ------------------------------------------------------------------ #
class Tensor:
    """Dense float64 array node; carries a gradient once ``backward`` ran."""

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        _ctx: Optional["Function"] = None,
    ):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    # arithmetic sugar
    def __add__(self, other: ArrayLike) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self.__mul__(other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis=axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis=axis)

    def relu(self) -> "Tensor":
        return relu(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self) -> "Tensor":
        return log(self)

    def backward(self, retain_graph: bool = False) -> "GradientMap":
        return backward(self, retain_graph=retain_graph)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


class GradientMap(dict):
    """Parameter tensor -> gradient array (keys compare by identity)."""

    def for_params(self, params: Iterable[Tensor]) -> List[np.ndarray]:
        return [self[p] for p in params]


# ------------------------------------------------------------------ #
#  FUNCTION BASE
# ------------------------------------------------------------------ #
class Function:
    kind: str = ""
    arity: Optional[int] = None  # None = variadic

    def __init__(self, *parents: Tensor, **params):
        self.parents = parents
        self.params = params
        self.saved: Tuple = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"forward not implemented for {self.kind}")

    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError(f"backward not implemented for {self.kind}")

    @classmethod
    def apply(cls, *inputs: Union[Tensor, ArrayLike], **params) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        if cls.arity is not None and len(tensors) != cls.arity:
            raise ShapeError(f"{cls.kind}: expected {cls.arity} inputs, got {len(tensors)}")
        fn = cls(*tensors, **params)
        out = fn.forward(*(t.data for t in tensors))
        requires_grad = is_grad_enabled() and any(t.requires_grad for t in tensors)
        return Tensor(out, requires_grad=requires_grad, _ctx=fn if requires_grad else None)


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0 or a.size == 1 and a.ndim <= 1


def _check_pointwise(kind: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum(), dtype=DTYPE).reshape(shape)


def stable_softmax(values: np.ndarray, temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    """Softmax with max-subtraction; shared by the graph op and numpy callers."""
    if not temperature > 0:
        raise InvalidArgumentError(f"softmax temperature must be positive, got {temperature}")
    z = np.asarray(values, dtype=DTYPE) / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def stable_log_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    z = values - values.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ------------------------------------------------------------------ #
#  PRIMITIVES
# ------------------------------------------------------------------ #
class MatMul(Function):
    kind = "matmul"
    arity = 2

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
        self.saved = (a, b)
        return a @ b

    def backward(self, grad):
        a, b = self.saved
        return grad @ b.T, a.T @ grad


class Add(Function):
    kind = "add"
    arity = 2

    def forward(self, a, b):
        _check_pointwise(self.kind, a, b)
        self.saved = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Sub(Function):
    kind = "sub"
    arity = 2

    def forward(self, a, b):
        _check_pointwise(self.kind, a, b)
        self.saved = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.saved
        return _unbroadcast(grad, sa), _unbroadcast(-grad, sb)


class Mul(Function):
    kind = "mul"
    arity = 2

    def forward(self, a, b):
        _check_pointwise(self.kind, a, b)
        self.saved = (a, b)
        return a * b

    def backward(self, grad):
        a, b = self.saved
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class Scale(Function):
    kind = "scale"
    arity = 1

    def forward(self, a):
        return a * float(self.params["factor"])

    def backward(self, grad):
        return (grad * float(self.params["factor"]),)


class ReLU(Function):
    kind = "relu"
    arity = 1

    def forward(self, a):
        mask = a > 0
        self.saved = (mask,)
        return np.where(mask, a, 0.0)

    def backward(self, grad):
        (mask,) = self.saved
        return (np.where(mask, grad, 0.0),)


class Exp(Function):
    kind = "exp"
    arity = 1

    def forward(self, a):
        out = np.exp(a)
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        return (grad * out,)


class Log(Function):
    kind = "log"
    arity = 1

    def forward(self, a):
        if np.any(a <= 0):
            raise NumericDomainError(f"log: non-positive entry (min {a.min()!r})")
        self.saved = (a,)
        return np.log(a)

    def backward(self, grad):
        (a,) = self.saved
        return (grad / a,)


class Sum(Function):
    kind = "sum"
    arity = 1

    def forward(self, a):
        self.saved = (a.shape,)
        return np.asarray(a.sum(axis=self.params.get("axis")), dtype=DTYPE)

    def backward(self, grad):
        (shape,) = self.saved
        axis = self.params.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(),)


class Mean(Function):
    kind = "mean"
    arity = 1

    def forward(self, a):
        axis = self.params.get("axis")
        self.saved = (a.shape, a.size if axis is None else a.shape[axis])
        return np.asarray(a.mean(axis=axis), dtype=DTYPE)

    def backward(self, grad):
        shape, count = self.saved
        axis = self.params.get("axis")
        if axis is not None:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad / count, shape).copy(),)


class ConcatRows(Function):
    kind = "concat"
    arity = None

    def forward(self, *arrays):
        if not arrays:
            raise ShapeError("concat: no inputs")
        trailing = {a.shape[1:] for a in arrays}
        if len(trailing) != 1 or arrays[0].ndim != 2:
            raise ShapeError(f"concat: incompatible row shapes {[a.shape for a in arrays]}")
        self.saved = (np.cumsum([a.shape[0] for a in arrays])[:-1],)
        return np.concatenate(arrays, axis=0)

    def backward(self, grad):
        (splits,) = self.saved
        return tuple(np.split(grad, splits, axis=0))


class SelectRows(Function):
    kind = "select"
    arity = 1

    def forward(self, a):
        index = np.asarray(self.params["index"], dtype=np.intp)
        if a.ndim != 2 or (index.size and (index.min() < 0 or index.max() >= a.shape[0])):
            raise ShapeError(f"select: index out of range for shape {a.shape}")
        self.saved = (a.shape, index)
        return a[index]

    def backward(self, grad):
        shape, index = self.saved
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, grad)
        return (out,)


class Transpose(Function):
    kind = "transpose"
    arity = 1

    def forward(self, a):
        if a.ndim != 2:
            raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
        return a.T.copy()

    def backward(self, grad):
        return (grad.T.copy(),)


class Softmax(Function):
    kind = "softmax"
    arity = 1

    def forward(self, a):
        out = stable_softmax(a, self.params.get("temperature", 1.0))
        self.saved = (out,)
        return out

    def backward(self, grad):
        (out,) = self.saved
        temperature = self.params.get("temperature", 1.0)
        inner = (grad * out).sum(axis=-1, keepdims=True)
        return (out * (grad - inner) / temperature,)


class L2Normalize(Function):
    kind = "l2_normalize"
    arity = 1

    def forward(self, a):
        axis = self.params.get("axis", -1)
        norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
        if np.any(norm < NORM_FLOOR):
            raise DegenerateVectorError(
                f"l2_normalize: slice norm below {NORM_FLOOR} in shape {a.shape}"
            )
        out = a / norm
        self.saved = (out, norm)
        return out

    def backward(self, grad):
        out, norm = self.saved
        axis = self.params.get("axis", -1)
        inner = (grad * out).sum(axis=axis, keepdims=True)
        return ((grad - out * inner) / norm,)


class CrossEntropy(Function):
    """Mean (or sum) over rows of -sum_k t_k log softmax(z)_k; targets are constants."""

    kind = "cross_entropy"
    arity = 1

    def forward(self, logits):
        targets = np.asarray(self.params["targets"], dtype=DTYPE)
        if logits.ndim != 2 or targets.shape != logits.shape:
            raise ShapeError(
                f"cross_entropy: logits {logits.shape} and targets {targets.shape} differ"
            )
        if np.any(targets < 0) or np.any(np.abs(targets.sum(axis=1) - 1.0) > TARGET_TOLERANCE):
            raise InvalidArgumentError("cross_entropy: target rows must be non-negative and sum to 1")
        log_probs = stable_log_softmax(logits)
        per_row = -(targets * log_probs).sum(axis=1)
        self.saved = (np.exp(log_probs), targets, logits.shape[0])
        if self.params.get("reduction", "mean") == "sum":
            return np.asarray(per_row.sum(), dtype=DTYPE)
        return np.asarray(per_row.mean(), dtype=DTYPE)

    def backward(self, grad):
        probs, targets, n = self.saved
        local = probs * targets.sum(axis=1, keepdims=True) - targets
        if self.params.get("reduction", "mean") != "sum":
            local = local / n
        return (grad * local,)


PRIMITIVES: Dict[str, Type[Function]] = {
    fn.kind: fn
    for fn in (
        MatMul, Add, Sub, Mul, Scale, ReLU, Exp, Log, Mean, Sum,
        ConcatRows, SelectRows, Transpose, Softmax, L2Normalize, CrossEntropy,
    )
}


def apply_primitive(kind: str, *inputs: Union[Tensor, ArrayLike], **params) -> Tensor:
    fn = PRIMITIVES.get(kind)
    if fn is None:
        raise InvalidArgumentError(f"unknown primitive {kind!r}")
    return fn.apply(*inputs, **params)


# ------------------------------------------------------------------ #
#  FUNCTIONAL API
# ------------------------------------------------------------------ #
def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(a, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def relu(a) -> Tensor:
    return ReLU.apply(a)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def reduce_sum(a, axis: Optional[int] = None) -> Tensor:
    return Sum.apply(a, axis=axis)


def reduce_mean(a, axis: Optional[int] = None) -> Tensor:
    return Mean.apply(a, axis=axis)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    return ConcatRows.apply(*tensors)


def select_rows(a, index) -> Tensor:
    return SelectRows.apply(a, index=index)


def transpose(a) -> Tensor:
    return Transpose.apply(a)


def softmax(values, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise InvalidArgumentError(f"softmax temperature must be positive, got {temperature}")
    return Softmax.apply(values, temperature=temperature)


def l2_normalize(v, axis: int = -1) -> Tensor:
    return L2Normalize.apply(v, axis=axis)


def cosine_distance(a, b) -> Tensor:
    """1 - cos(a, b) for two vectors of equal length."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_distance: expected equal-length vectors, got {a.shape} and {b.shape}")
    return sub(1.0, reduce_sum(mul(l2_normalize(a), l2_normalize(b))))


def pairwise_cosine_distance(a, b) -> Tensor:
    """n x m matrix of cosine distances between the rows of a (n x d) and b (m x d)."""
    return sub(1.0, matmul(l2_normalize(a, axis=1), transpose(l2_normalize(b, axis=1))))


def cross_entropy(logits, targets: ArrayLike, reduction: str = "mean") -> Tensor:
    if reduction not in ("mean", "sum"):
        raise InvalidArgumentError(f"unknown reduction {reduction!r}")
    return CrossEntropy.apply(logits, targets=targets, reduction=reduction)


def one_hot(labels: ArrayLike, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.shape[0], num_classes), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


# ------------------------------------------------------------------ #
#  BACKWARD
# ------------------------------------------------------------------ #
def _topological_order(root: Tensor) -> List[Tensor]:
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor, retain_graph: bool = False) -> GradientMap:
    """Gradients of a scalar loss with respect to every reachable leaf."""
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    result = GradientMap()
    if not loss.requires_grad:
        return result

    order = _topological_order(loss)
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node._ctx is None:
            node.grad = grad
            result[node] = grad
            continue
        for parent, parent_grad in zip(node._ctx.parents, node._ctx.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    if not retain_graph:
        for node in order:
            node._ctx = None
    return result


# ------------------------------------------------------------------ #
#  SGD
# ------------------------------------------------------------------ #
def sgd_step(
    params: Sequence[Tensor],
    grads: GradientMap,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[Dict[Tensor, np.ndarray]] = None,
) -> Dict[Tensor, np.ndarray]:
    """
    In-place update  v <- momentum*v + grad + weight_decay*p ;  p <- p - lr*v.

    Returns the velocity map so callers can thread it through steps.
    """
    if lr < 0 or not 0 <= momentum < 1 or weight_decay < 0:
        raise InvalidArgumentError(
            f"sgd: need lr >= 0, momentum in [0, 1), weight_decay >= 0 "
            f"(got {lr}, {momentum}, {weight_decay})"
        )
    if set(map(id, grads)) != set(map(id, params)):
        raise InvalidArgumentError("sgd: gradients must cover exactly the given parameters")

    velocity = {} if velocity is None else velocity
    for p in params:
        grad = grads[p]
        if grad.shape != p.data.shape:
            raise ShapeError(f"sgd: gradient shape {grad.shape} != parameter shape {p.data.shape}")
        v = grad + weight_decay * p.data
        if p in velocity:
            v = momentum * velocity[p] + v
        p.data -= lr * v
        velocity[p] = v
    return velocity


class SGD:
    """Stateful wrapper keeping the velocity between ``sgd_step`` calls."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: Dict[Tensor, np.ndarray] = {}

    def step(self, grads: GradientMap) -> None:
        sgd_step(self.params, grads, self.lr, self.momentum, self.weight_decay, self.velocity)
