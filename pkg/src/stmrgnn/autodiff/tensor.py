"""Dense fp64 tensors with a reverse-mode gradient tape.

The engine is deliberately small: a ``Tensor`` wraps a float64 numpy array,
ops (see :mod:`stmrgnn.autodiff.ops`) record nodes onto the innermost active
``Tape``, and ``backward`` replays the tape in reverse. Recording only happens
inside a ``with Tape() as tape:`` block, so evaluation-mode forward passes pay
no graph bookkeeping. Tapes are tracked per thread: independent workers that
each own their tape never share mutable state.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

from stmrgnn.errors import ContractError, NumericError

_STATE = threading.local()

# When enabled, every op output is checked for NaN/Inf. Off by default; the
# training loop checks the loss scalar instead.
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def debug_checks_enabled() -> bool:
    return _DEBUG_CHECKS


def _tape_stack() -> list:
    stack = getattr(_STATE, "tapes", None)
    if stack is None:
        stack = []
        _STATE.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost open tape of the current thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A dense float64 n-d array, optionally participating in a tape.

    ``grad`` is populated by :func:`backward` and has the same shape as
    ``data``. Values are treated as immutable during a forward pass; only the
    optimizer mutates ``data`` in place, between passes.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        """Internal constructor for op outputs; skips the finite check unless
        debug checks are on."""
        if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
            raise NumericError("op produced non-finite values")
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic dunders are attached by stmrgnn.autodiff.ops at import time.


class TapeNode:
    """One recorded op: input tensors, output tensor, and a backward rule.

    ``backward_fn`` maps the output gradient (ndarray) to a tuple of input
    gradients aligned with ``inputs``; entries for inputs that do not need a
    gradient are None.
    """

    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor,
                 backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of op nodes for one forward pass.

    Nodes are appended in execution order, which is topological by
    construction (an op's inputs exist before the op runs). ``backward``
    traverses the list once, in reverse.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape context exited out of order")
        stack.pop()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.nodes.append(TapeNode(inputs, output, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    requires_grad leaves that were recorded as op inputs but received no
    gradient flow are zero-filled, so callers can treat ``.grad`` as total.
    """
    if loss.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ContractError("backward called on an empty tape")

    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.backward_fn(g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if inp.grad is None:
                # Take ownership of freshly allocated arrays; copy views (a
                # rule may return the incoming gradient itself or a reshape
                # of it, which must not be aliased into two accumulators).
                if gi is g or not (gi.flags.owndata and gi.flags.writeable):
                    gi = np.array(gi, dtype=np.float64)
                inp.grad = gi
            else:
                inp.grad += gi

    seen: set[int] = set()
    for node in tape.nodes:
        for inp in node.inputs:
            if inp.requires_grad and inp.grad is None and id(inp) not in seen:
                seen.add(id(inp))
                inp.grad = np.zeros_like(inp.data)
