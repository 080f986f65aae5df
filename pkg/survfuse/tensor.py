"""Dense float64 tensors with a reverse-mode differentiation tape

Operations record themselves on the active `Tape` (entered with `with Tape()`)
whenever one of their inputs requires a gradient. Without an active tape,
operations are plain numpy computations, which is how inference runs.

Only scalar-tensor broadcasting is supported: a shape-`()` operand combines
with any shape, everything else must match exactly. Use `repeat_rows`,
`reshape` and `transpose` for explicit shape coercions.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence, Union

import numpy as np
from scipy.special import expit

from .defaults import GRAD_CHECK_FLOOR, LOG_FLOOR
from .errors import (
    ContractError,
    DimensionError,
    DomainError,
    ParameterError,
    PreconditionError,
)

Number = Union[int, float]
Backward = Callable[[np.ndarray], Sequence[Union[np.ndarray, None]]]

_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "survfuse_active_tape",
    default=None,
)


class Tensor:
    """A dense row-major float64 array with a gradient buffer

    Args:
        values: Anything numpy can turn into a float64 array. It is copied.
        requires_grad: Whether gradients should flow into this tensor.
            Parameters and inputs under attribution set this.
        name: An optional name, used in error messages and checkpoints
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "name")

    def __init__(
        self,
        values,
        requires_grad: bool = False,
        name: str | None = None,
    ) -> None:
        self.values = np.array(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray) -> Tensor:
        """Wrap an array without copying it"""
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = np.zeros_like(out.values)
        out.requires_grad = False
        out.node_id = None
        out.name = None
        return out

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return len(self.values)

    def __repr__(self) -> str:
        name = f" {self.name!r}" if self.name else ""
        return f"<Tensor{name} shape={self.shape} node={self.node_id}>"

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(
                f"Only single-element tensors convert to float, got {self.shape}"
            )
        return float(self.values.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.values)

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def backward(self) -> None:
        backward(self)

    def __add__(self, other) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other) -> Tensor:
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other) -> Tensor:
        return add(as_tensor(other), neg(self))

    def __mul__(self, other) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return neg(self)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    """Turn numbers and arrays into constant tensors, pass tensors through"""
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


@dataclass
class Node:
    op: str
    output: Tensor
    inputs: tuple
    backward: Backward


class Tape:
    """Ordered record of the operations of one forward pass

    Nodes are appended as operations run, so the list is already in
    topological order; `backward` replays it in exact reverse.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> Tape:
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        op: str,
        output: Tensor,
        inputs: tuple,
        backward_fn: Backward,
    ) -> Tensor:
        output.node_id = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(Node(op, output, inputs, backward_fn))
        return output

    def tensors(self) -> Iterator[Tensor]:
        """All distinct tensors touched by the tape, in first-seen order"""
        seen = set()
        for node in self.nodes:
            for tensor in (*node.inputs, node.output):
                if id(tensor) not in seen:
                    seen.add(id(tensor))
                    yield tensor

    def zero_grads(self) -> None:
        for tensor in self.tensors():
            tensor.zero_grad()

    def reset(self) -> None:
        """Zero every gradient seen by the tape and forget the nodes"""
        self.zero_grads()
        for node in self.nodes:
            node.output.node_id = None
        self.nodes.clear()

    def backward(self, loss: Tensor) -> None:
        """Populate `.grad` of every tensor reachable from `loss`

        Gradients of all tensors on the tape are zeroed first, so replaying
        the same tape twice gives identical gradients. Fan-out accumulates
        additively.
        """
        if loss.size != 1:
            raise ContractError(
                f"backward needs a scalar loss, got shape {loss.shape}"
            )
        self.zero_grads()
        if loss.node_id is None:
            # constant with respect to everything on the tape
            return
        if (
            loss.node_id >= len(self.nodes)
            or self.nodes[loss.node_id].output is not loss
        ):
            raise ContractError("The loss was not recorded on this tape")

        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes[: loss.node_id + 1]):
            out_grad = node.output.grad
            if not out_grad.any():
                continue
            for tensor, grad in zip(node.inputs, node.backward(out_grad)):
                if grad is not None and tensor.requires_grad:
                    tensor.grad += grad


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def backward(loss: Tensor) -> None:
    """Run backward for `loss` on the active tape"""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        raise ContractError("backward needs an active tape")
    tape.backward(loss)


def _result(
    op: str,
    values: np.ndarray,
    inputs: tuple,
    backward_fn: Backward,
) -> Tensor:
    out = Tensor._wrap(values)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(op, out, inputs, backward_fn)
    return out


def _check_binary(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Undo scalar-tensor broadcasting in the backward pass"""
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# Binary ops
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("add", a, b)
    return _result(
        "add",
        a.values + b.values,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary("mul", a, b)
    return _result(
        "mul",
        a.values * b.values,
        (a, b),
        lambda g: (
            _reduce_to(g * b.values, a.shape),
            _reduce_to(g * a.values, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [m x k] and b [k x n]"""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _result(
        "matmul",
        a.values @ b.values,
        (a, b),
        lambda g: (g @ b.values.T, a.values.T @ g),
    )


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """W x + b for a vector x [in], or X W^T + b row-wise for X [M x in]

    weight is [out x in] and bias [out]. One node instead of the four a
    matmul/transpose/reshape/add chain would record.
    """
    if (
        weight.ndim != 2
        or bias.shape != weight.shape[:1]
        or x.ndim not in (1, 2)
        or x.shape[-1] != weight.shape[1]
    ):
        raise DimensionError(
            f"affine: cannot apply {weight.shape} weight and {bias.shape} bias "
            f"to {x.shape}"
        )
    W, xv = weight.values, x.values
    if x.ndim == 1:
        return _result(
            "affine",
            W @ xv + bias.values,
            (x, weight, bias),
            lambda g: (W.T @ g, np.outer(g, xv), g),
        )
    return _result(
        "affine",
        xv @ W.T + bias.values,
        (x, weight, bias),
        lambda g: (g @ W, g.T @ xv, g.sum(axis=0)),
    )


# Unary ops
def unary(
    op: str,
    x: Tensor,
    fn: Callable[[np.ndarray], np.ndarray],
    dfn: Callable[[np.ndarray, np.ndarray], np.ndarray],
) -> Tensor:
    """Record an elementwise op given its value and its derivative

    `dfn(x, y)` receives the input values and the output values and returns
    dy/dx elementwise.
    """
    x = as_tensor(x)
    y = fn(x.values)
    return _result(op, y, (x,), lambda g: (g * dfn(x.values, y),))


def neg(x) -> Tensor:
    return unary("neg", x, np.negative, lambda x, y: -np.ones_like(x))


def tanh(x) -> Tensor:
    return unary("tanh", x, np.tanh, lambda x, y: 1.0 - y * y)


def sigmoid(x) -> Tensor:
    return unary("sigmoid", x, expit, lambda x, y: y * (1.0 - y))


def relu(x) -> Tensor:
    return unary(
        "relu",
        x,
        lambda v: np.maximum(v, 0.0),
        lambda x, y: (x > 0).astype(np.float64),
    )


def exp(x) -> Tensor:
    return unary("exp", x, np.exp, lambda x, y: y)


def log(x, floor: float | None = LOG_FLOOR) -> Tensor:
    """Natural log, with inputs clamped to [floor, inf)

    The clamp has zero derivative where it is active.
    """
    x = as_tensor(x)
    clamped = x.values if floor is None else np.maximum(x.values, floor)
    if np.isnan(clamped).any() or (clamped <= 0).any():
        raise DomainError(f"log of non-positive values (floor={floor})")
    active = (
        np.ones_like(x.values) if floor is None else (x.values >= floor) * 1.0
    )
    return _result(
        "log",
        np.log(clamped),
        (x,),
        lambda g: (g * active / clamped,),
    )


ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "relu": relu,
    "exp": exp,
    "log": log,
    "neg": neg,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch an elementwise op by name"""
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ParameterError(
            f"Unknown elementwise op {op!r}, expected one of {list(ELEMENTWISE)}"
        ) from None
    return fn(*args)


# Reductions and structure
def softmax(x: Tensor) -> Tensor:
    """Softmax of a vector, computed with max-subtraction"""
    if x.ndim != 1:
        raise DimensionError(f"softmax expects a vector, got {x.shape}")
    if x.size == 0:
        raise PreconditionError("softmax of an empty vector")
    e = np.exp(x.values - x.values.max())
    s = e / e.sum()
    return _result("softmax", s, (x,), lambda g: (s * (g - np.dot(g, s)),))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return _result(
        "sum",
        np.asarray(x.values.sum()),
        (x,),
        lambda g: (np.full(x.shape, float(g)),),
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    return _result(
        "reshape",
        x.values.reshape(shape),
        (x,),
        lambda g: (g.reshape(x.shape),),
    )


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {x.shape}")
    return _result("transpose", x.values.T.copy(), (x,), lambda g: (g.T,))


def repeat_rows(x: Tensor, m: int) -> Tensor:
    """Stack a vector [n] m times into a matrix [m x n]"""
    if x.ndim != 1:
        raise DimensionError(f"repeat_rows expects a vector, got {x.shape}")
    return _result(
        "repeat_rows",
        np.tile(x.values, (m, 1)),
        (x,),
        lambda g: (g.sum(axis=0),),
    )


def concat(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate vectors"""
    xs = [as_tensor(x) for x in xs]
    if any(x.ndim != 1 for x in xs):
        raise DimensionError(
            f"concat expects vectors, got {[x.shape for x in xs]}"
        )
    bounds = np.cumsum([0] + [x.size for x in xs])

    def _backward(g):
        return [g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    return _result(
        "concat",
        np.concatenate([x.values for x in xs]),
        tuple(xs),
        _backward,
    )


def slice_(x: Tensor, start: int, stop: int) -> Tensor:
    """A contiguous sub-vector x[start:stop]"""
    if x.ndim != 1 or not 0 <= start < stop <= x.size:
        raise DimensionError(f"slice [{start}:{stop}] out of range for {x.shape}")

    def _backward(g):
        out = np.zeros(x.shape)
        out[start:stop] = g
        return (out,)

    return _result("slice", x.values[start:stop].copy(), (x,), _backward)


def take(x: Tensor, index: int) -> Tensor:
    """The scalar x[index] of a vector"""
    if x.ndim != 1 or not -x.size <= index < x.size:
        raise DimensionError(f"index {index} out of range for {x.shape}")

    def _backward(g):
        out = np.zeros(x.shape)
        out[index] = g
        return (out,)

    return _result("take", np.asarray(x.values[index]), (x,), _backward)


def outer(u: Tensor, v: Tensor) -> Tensor:
    """Outer product of vectors u [n] and v [m] -> [n x m]"""
    if u.ndim != 1 or v.ndim != 1:
        raise DimensionError(f"outer expects vectors, got {u.shape}, {v.shape}")
    return _result(
        "outer",
        np.outer(u.values, v.values),
        (u, v),
        lambda g: (g @ v.values, g.T @ u.values),
    )


def cumprod(x: Tensor) -> Tensor:
    """Running product of a vector, differentiable where entries are zero"""
    if x.ndim != 1:
        raise DimensionError(f"cumprod expects a vector, got {x.shape}")
    n = x.size

    def _backward(g):
        # d out_r / d x_u = prod_{k <= r, k != u} x_k  for u <= r
        out = np.zeros(n)
        for u in range(n):
            others = x.values.copy()
            others[u] = 1.0
            out[u] = np.dot(g[u:], np.cumprod(others)[u:])
        return (out,)

    return _result("cumprod", np.cumprod(x.values), (x,), _backward)


# Checking
def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
) -> float:
    """Compare analytic gradients of a scalar function with central differences

    Returns:
        max_i |analytic_i - numeric_i| / max(1e-8, |analytic_i| + |numeric_i|)
    """
    if not 0 < eps <= 1e-3:
        raise ParameterError(f"eps must be in (0, 1e-3], got {eps}")

    var = Tensor(x.values, requires_grad=True)
    with Tape() as tape:
        tape.backward(f(var))
    analytic = var.grad.reshape(-1).copy()

    base = x.values.reshape(-1)
    numeric = np.zeros(base.size)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        fplus = f(Tensor(plus.reshape(x.shape))).item()
        fminus = f(Tensor(minus.reshape(x.shape))).item()
        numeric[i] = (fplus - fminus) / (2.0 * eps)

    if base.size == 0:
        return 0.0
    denom = np.maximum(GRAD_CHECK_FLOOR, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
