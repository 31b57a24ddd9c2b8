"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations only record onto a tape while one is active::

    with Tape() as tape:
        loss = F.sum(F.multiply(x, x))
        grads = tape.backward(loss)

Outside a tape every result is a constant, so frozen-parameter inference never
allocates graph state.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "DomainError",
    "GradCheckError",
    "backward",
    "grad_check",
    "active_tape",
]

NORM_FLOOR = 1e-12


class ShapeError(ValueError):
    """Operand shapes do not conform to the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = [tuple(s) for s in shapes]
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class DomainError(ValueError):
    pass


class GradCheckError(ValueError):
    pass


_ids = itertools.count(1)
_local = threading.local()


def _tape_stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array that may participate in differentiation.

    ``node_id`` is assigned to every tensor that requires a gradient; constants
    carry ``None``.
    """

    __slots__ = ("data", "requires_grad", "node_id", "grad")

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(())
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_ids) if requires_grad else None
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", node_id={self.node_id}" if self.node_id is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the functional module holds the real definitions
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    def __sub__(self, other):
        from . import functional as F
        return F.subtract(self, other)

    def __mul__(self, other):
        from . import functional as F
        if isinstance(other, (int, float)):
            return F.scale(self, float(other))
        return F.multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import functional as F
        return F.matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    kind: str
    out_id: int
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered log of differentiable operations.

    Records are appended in execution order, which is already a topological
    order, so the backward sweep is a single reverse pass.
    """

    records: list = field(default_factory=list)
    _closed: bool = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, kind: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self.records.append(_Record(kind, out.node_id, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) to every recorded node.

        Leaf tensors that require gradients get ``.grad`` set (accumulated if
        already present). Returns the full ``node_id -> gradient`` mapping.
        """
        if loss.data.size != 1 or loss.ndim != 0:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.node_id is None:
            raise ValueError("loss is not on the tape (no input requires a gradient)")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones((), dtype=np.float64)}
        produced = {r.out_id for r in self.records}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            g = grads.get(rec.out_id)
            if g is None:
                continue
            parts = rec.backward(g)
            for inp, part in zip(rec.inputs, parts):
                if part is None or not inp.requires_grad:
                    continue
                if inp.node_id not in produced:
                    leaves[inp.node_id] = inp
                prev = grads.get(inp.node_id)
                grads[inp.node_id] = part if prev is None else prev + part
        for nid, leaf in leaves.items():
            g = grads[nid]
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        return grads


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    tape = active_tape()
    if tape is None:
        raise ValueError("backward called with no active tape")
    return tape.backward(loss)


def grad_check(f: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives one Tensor per input and must return a scalar Tensor. The
    error at each coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = f(*params)
        tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def evaluate(k, flat_idx, value):
        probe = [a.copy() for a in arrays]
        probe[k].reshape(-1)[flat_idx] = value
        try:
            return f(*[Tensor(a) for a in probe]).item()
        except DomainError as exc:
            raise GradCheckError(f"input {k}, coordinate {flat_idx}: {exc}") from exc

    worst = 0.0
    for k, a in enumerate(arrays):
        ga = analytic[k].reshape(-1)
        flat = a.reshape(-1)
        for i in range(a.size):
            # divide by the step actually taken after rounding, not the nominal 2 * eps
            up, down = flat[i] + eps, flat[i] - eps
            num = (evaluate(k, i, up) - evaluate(k, i, down)) / (up - down)
            if not (np.isfinite(num) and np.isfinite(ga[i])):
                raise GradCheckError(f"non-finite value at input {k}, coordinate {i}")
            err = abs(ga[i] - num) / max(1.0, abs(ga[i]))
            worst = max(worst, err)
    return worst
