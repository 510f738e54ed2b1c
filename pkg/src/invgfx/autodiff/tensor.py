"""Reverse-mode automatic differentiation over dense float64 tensors.

A :class:`Tape` records every differentiable operation executed while it is
active as the thread's tape. Calling :meth:`Tape.backward` on a scalar loss
sweeps the recorded operations in reverse, accumulating adjoints. A tape and
the tensors recorded on it form a single-threaded unit of work; independent
tapes may live on different threads.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import UsageError

_LOCAL = threading.local()


def active_tape() -> Optional["Tape"]:
    """The tape currently recording on this thread, if any."""
    return getattr(_LOCAL, "tape", None)


class Tensor:
    """Dense n-dimensional array of float64 with an optional gradient buffer.

    Leaf tensors created with ``requires_grad=True`` act as parameters: after
    a backward pass their ``grad`` holds dLoss/dTensor, and successive
    backward passes accumulate. Tensors produced by operations while a tape
    is active carry the tape handle and node id of the recording.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.tape: Optional[Tape] = None
        self.node_id: Optional[int] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError("item() requires a single-element tensor, got shape %s"
                             % (self.shape,))
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A constant copy, severed from any tape."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        tag = self.name or ("node%d" % self.node_id if self.node_id is not None else "const")
        return "Tensor(%s, shape=%s%s)" % (tag, self.shape,
                                           ", grad" if self.grad is not None else "")

    # Arithmetic sugar; heavy lifting lives in invgfx.autodiff.ops.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops

        return ops.div(other, self)

    def __neg__(self):
        from . import ops

        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def reshape(self, shape):
        from . import ops

        return ops.reshape(self, shape)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """A trainable leaf tensor."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=False, name=name)


def lift(x) -> Tensor:
    """Wrap python scalars / arrays as constant tensors; pass tensors through."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _Node:
    __slots__ = ("op", "out", "inputs", "backward_fn")

    def __init__(self, op: str, out: Tensor, inputs: Sequence[Tensor],
                 backward_fn: Callable[[np.ndarray], Iterable[Tuple[Tensor, np.ndarray]]]):
        self.op = op
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations, traversed in strict reverse for backward.

    Inputs always precede consumers, and re-running the same operations on
    identical inputs replays bit-identically (fixed summation order in every
    kernel). Leaf tensors with ``requires_grad`` encountered during recording
    are collected in the parameter registry.
    """

    def __init__(self):
        self._nodes: List[_Node] = []
        self._params: List[Tensor] = []
        self._param_ids = set()

    def __enter__(self) -> "Tape":
        if active_tape() is not None:
            raise UsageError("a tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.tape = None

    @property
    def num_nodes(self) -> int:
        return len(self._nodes)

    def parameters(self) -> List[Tensor]:
        """Leaf parameters touched while recording, in first-use order."""
        return list(self._params)

    def record(self, op: str, out: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        out.tape = self
        out.node_id = len(self._nodes)
        self._nodes.append(_Node(op, out, inputs, backward_fn))
        for t in inputs:
            if t.requires_grad and t.node_id is None and id(t) not in self._param_ids:
                self._param_ids.add(id(t))
                self._params.append(t)

    def is_tracked(self, t: Tensor) -> bool:
        if t.requires_grad:
            return True
        return t.tape is self and t.node_id is not None

    def backward(self, loss: Tensor) -> None:
        """Accumulate dLoss/dLeaf into every tracked leaf's ``grad``.

        Intermediate tensors receive their adjoint from this pass (overwritten
        on repeated calls); leaf gradients accumulate across calls so that a
        backward on a sum of losses equals the sum of separate backwards.
        """
        if loss.tape is not self or loss.node_id is None:
            raise UsageError("loss is not a node of this tape")
        if loss.data.size != 1:
            raise UsageError("backward requires a scalar loss, got shape %s"
                             % (loss.shape,))

        adjoint = {id(loss): np.ones_like(loss.data)}
        leaf_acc = {}
        leaf_ref = {}
        for node in reversed(self._nodes):
            g = adjoint.pop(id(node.out), None)
            if g is None:
                continue
            node.out.grad = g
            for t, gt in node.backward_fn(g):
                if gt is None:
                    continue
                if t.node_id is not None and t.tape is self:
                    key = id(t)
                    if key in adjoint:
                        adjoint[key] = adjoint[key] + gt
                    else:
                        adjoint[key] = gt
                elif t.requires_grad:
                    key = id(t)
                    leaf_ref[key] = t
                    if key in leaf_acc:
                        leaf_acc[key] = leaf_acc[key] + gt
                    else:
                        leaf_acc[key] = gt
        for key, g in leaf_acc.items():
            t = leaf_ref[key]
            t.grad = g if t.grad is None else t.grad + g
