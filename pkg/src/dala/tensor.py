"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array (float32 by default, float64 selectable
for verification runs) and, when gradient recording is enabled, remembers
the operation that produced it as an :class:`OpRecord`.  Calling
:func:`backward` on a scalar result replays the records in reverse
topological order, visiting each node exactly once, and deposits exact
reverse-mode gradients into the ``grad`` buffers of the tensors that
require them.

Every operation validates that its output is finite: NaN/Inf raises
:class:`~dala.exceptions.NumericsError` instead of propagating silently.
Tensors are immutable once written except for their ``grad`` buffers.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import NumericsError, UsageError

__all__ = ["Tensor", "OpRecord", "no_grad", "is_grad_enabled"]

_grad_enabled = True


def is_grad_enabled() -> bool:
    return _grad_enabled


class no_grad:
    """Context manager that suspends recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev


class OpRecord:
    """One executed primitive: its inputs and the rule that maps the
    output gradient back onto each input's gradient."""

    __slots__ = ("name", "inputs", "backward")

    def __init__(
        self,
        name: str,
        inputs: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ):
        self.name = name
        self.inputs = tuple(inputs)
        self.backward = backward


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"{op} produced non-finite values")


class Tensor:
    """N-dimensional real array with optional gradient lineage."""

    __slots__ = ("data", "requires_grad", "grad", "retain_grad", "_record")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.retain_grad = False
        self._record: Optional[OpRecord] = None

    # -- construction -------------------------------------------------

    @classmethod
    def _result(
        cls,
        data: np.ndarray,
        name: str,
        inputs: Sequence["Tensor"],
        backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
    ) -> "Tensor":
        """Wrap an op output, recording lineage when grad mode is on."""
        _check_finite(data, name)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.retain_grad = False
        out.requires_grad = _grad_enabled and any(t.requires_grad for t in inputs)
        out._record = OpRecord(name, inputs, backward) if out.requires_grad else None
        return out

    @classmethod
    def zeros(cls, shape, dtype=np.float32, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    # -- views ---------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same data with no lineage and no gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.retain_grad = False
        out.requires_grad = False
        out._record = None
        return out

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- reverse mode ---------------------------------------------------

    def backward(self) -> None:
        """Populate ``grad`` on every requires-grad tensor reachable from
        this scalar.  Unreachable tensors are untouched.  Repeated calls
        accumulate, matching the usual reverse-mode convention."""
        if self.data.size != 1:
            raise UsageError(f"backward requires a scalar, got shape {tuple(self.shape)}")
        if self._record is None:
            raise UsageError("backward on a tensor with no recorded lineage")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._record is not None:
                for parent in node._record.inputs:
                    if parent.requires_grad and id(parent) not in seen:
                        stack.append((parent, False))

        flows: dict[int, np.ndarray] = {
            id(self): np.ones_like(self.data)
        }
        for node in reversed(order):
            flow = flows.pop(id(node), None)
            if flow is None:
                continue
            if node._record is None or node.retain_grad:
                node.grad = flow if node.grad is None else node.grad + flow
            rec = node._record
            if rec is None:
                continue
            for parent, pgrad in zip(rec.inputs, rec.backward(flow)):
                if pgrad is None or not parent.requires_grad:
                    continue
                if pgrad.dtype != parent.data.dtype:
                    pgrad = pgrad.astype(parent.data.dtype)
                key = id(parent)
                if key in flows:
                    flows[key] = flows[key] + pgrad
                else:
                    flows[key] = pgrad
