"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Operations executed while a
:class:`Tape` is active append records (inputs, output, backward rule) in
execution order; :func:`backward` replays them in reverse to populate
``grad`` on every tensor that requires it.

Conventions: activations are N x H x W x C, kernels Kh x Kw x Cin x Cout.
There is no broadcasting beyond tensor-vs-scalar.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "recording",
    "active_tape",
    "elementwise",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "matmul",
    "tensor_sum",
    "backward",
    "grad_check",
]


class Tensor:
    """A dense n-d array that can participate in gradient recording."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; scalar operands route through scale/shift rules.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, so the list is already a
    topological order of the graph. A tape can be consumed by
    :func:`backward` exactly once.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        self.records.append(_Record(out, inputs, backward_fn))

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def recording() -> Tape:
    """Open a fresh tape; use as ``with recording() as tape:``."""
    return Tape()


def record_op(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Register a backward rule if a tape is active and any input needs grad.

    ``backward_fn(g)`` receives the upstream gradient (ndarray co-shaped
    with ``out``) and must return one ndarray-or-None per input.
    """
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if np.isscalar(b):
        out = Tensor(a.data + b)
        return record_op(out, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    return record_op(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if np.isscalar(b):
        out = Tensor(a.data - b)
        return record_op(out, (a,), lambda g: (g,))
    b = _as_tensor(b)
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    return record_op(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = _as_tensor(b)
    _check_same_shape("mul", a, b)
    out = Tensor(a.data * b.data)
    return record_op(out, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    out = Tensor(a.data * s)
    return record_op(out, (a,), lambda g: (g * s,))


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0))
    mask = a.data > 0
    return record_op(out, (a,), lambda g: (g * mask,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale, "relu": relu}


def elementwise(op: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name; ``relu`` is unary, ``scale`` takes a scalar."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    if op == "relu":
        if b is not None:
            raise ContractError("relu takes no second operand")
        return fn(a)
    return fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree, {a.shape} vs {b.shape}")
    out = Tensor(a.data @ b.data)
    return record_op(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def tensor_sum(a: Tensor) -> Tensor:
    """Sum of all elements, as a rank-0 tensor."""
    a = _as_tensor(a)
    out = Tensor(a.data.sum())
    return record_op(out, (a,), lambda g: (np.full(a.shape, g, dtype=a.data.dtype),))


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be a scalar produced on ``tape``; a tape can only be
    consumed once.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise ContractError("tape already consumed; record a fresh graph before calling backward again")
    if not any(rec.out is loss for rec in tape.records):
        raise ContractError("loss was not produced on this tape (detached or foreign)")
    tape.consumed = True

    loss.accumulate_grad(np.ones_like(loss.data))
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is not None and t.requires_grad:
                t.accumulate_grad(gi)


def grad_check(f, x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor. Relative error per element is
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    x = Tensor(np.asarray(x.data, dtype=np.float64), requires_grad=True)
    with recording() as tape:
        out = f(x)
    if out.size != 1:
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
    backward(out, tape)
    analytic = x.grad.copy()

    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(Tensor(x.data)).data.item()
        flat[i] = orig - step
        lo = f(Tensor(x.data)).data.item()
        flat[i] = orig
        num_flat[i] = (hi - lo) / (2.0 * step)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max())
