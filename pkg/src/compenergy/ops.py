"""Scalar-op-counting numeric primitives.

Every arithmetic primitive used by the executor goes through this module.
When a trace is active (see :func:`tracing`), each primitive appends one
event describing how many scalar operations it actually executed, derived
from the shapes of the operands it received.  Those events are the raw
material of the counting oracle in :mod:`compenergy.flops`.

Tally rules:

* ``muladd``: every multiply (inside a dot product, a fused ``a*b + c``, or a
  bare product), and the element-wise additions of the embedding sum.
* ``exp``: every exponential.
* ``div``: every element-wise division.
* ``cast``: every element converted between half and single precision.

Reductions (row sums, maxima, means), subtractions, masking and square roots
are not tallied.  Residual additions live outside the profiled components and
are not tallied either.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

MULADD = "muladd"
EXP = "exp"
DIV = "div"
CAST = "cast"
OP_KINDS = (MULADD, EXP, DIV, CAST)


@dataclass
class ExecutionTrace:
    """Ordered record of ``(component label, op kind, scalar count)`` events."""

    events: list[tuple[str | None, str, int]] = field(default_factory=list)

    def record(self, op: str, count: int) -> None:
        self.events.append((_SCOPE.get(), op, int(count)))

    def labels(self) -> list[str | None]:
        seen: dict[str | None, None] = {}
        for label, _, _ in self.events:
            seen.setdefault(label)
        return list(seen)

    def restricted_to(self, label: str | None) -> "ExecutionTrace":
        return ExecutionTrace([e for e in self.events if e[0] == label])

    def __len__(self):
        return len(self.events)


_TRACE: contextvars.ContextVar[ExecutionTrace | None] = contextvars.ContextVar(
    "compenergy_trace", default=None
)
_SCOPE: contextvars.ContextVar[str | None] = contextvars.ContextVar(
    "compenergy_scope", default=None
)


@contextlib.contextmanager
def tracing() -> Iterator[ExecutionTrace]:
    """Collect op-count events for everything executed inside the block."""
    trace = ExecutionTrace()
    token = _TRACE.set(trace)
    try:
        yield trace
    finally:
        _TRACE.reset(token)


@contextlib.contextmanager
def component_scope(label: str) -> Iterator[None]:
    """Tag events recorded inside the block with a component label."""
    token = _SCOPE.set(label)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def _tally(op: str, count: int) -> None:
    trace = _TRACE.get()
    if trace is not None and count:
        trace.record(op, count)


# -- half precision ---------------------------------------------------------

def round_half(x: np.ndarray) -> np.ndarray:
    """Round float32 values to the nearest half-precision value (ties to even).

    The result is stored as float32 so later arithmetic accumulates in single
    precision.  Values beyond the half range become +-inf.
    """
    with np.errstate(over="ignore"):
        return np.asarray(x, dtype=np.float32).astype(np.float16).astype(np.float32)


def store(x: np.ndarray, half: bool) -> np.ndarray:
    """Write an op result: float32, rounded to half when ``half`` is set."""
    x = np.ascontiguousarray(x, dtype=np.float32)
    return round_half(x) if half else x


def to_single(x: np.ndarray) -> np.ndarray:
    """Explicit half -> single conversion (tallied as casts)."""
    _tally(CAST, x.size)
    return np.array(x, dtype=np.float32)


def to_half(x: np.ndarray) -> np.ndarray:
    """Explicit single -> half conversion (tallied as casts)."""
    _tally(CAST, x.size)
    return round_half(x)


# -- arithmetic -------------------------------------------------------------

def matmul(a: np.ndarray, b: np.ndarray, half: bool = False) -> np.ndarray:
    """(..., m, k) @ (..., k, n) with single-precision accumulation."""
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = np.matmul(a, b)
    batch = int(np.prod(out.shape[:-2], dtype=np.int64)) if out.ndim > 2 else 1
    _tally(MULADD, batch * a.shape[-2] * a.shape[-1] * b.shape[-1])
    return store(out, half)


def add(a: np.ndarray, b: np.ndarray, half: bool = False) -> np.ndarray:
    """Element-wise sum tallied as one muladd per output element."""
    out = np.add(a, b, dtype=np.float32)
    _tally(MULADD, out.size)
    return store(out, half)


def mul(a, b, half: bool = False) -> np.ndarray:
    out = np.multiply(a, b, dtype=np.float32)
    _tally(MULADD, out.size)
    return store(out, half)


def fma(a, b, c, half: bool = False) -> np.ndarray:
    """``a*b + c`` element-wise; one muladd per output element."""
    out = np.add(np.multiply(a, b, dtype=np.float32), c, dtype=np.float32)
    _tally(MULADD, out.size)
    return store(out, half)


def div(a, b, half: bool = False) -> np.ndarray:
    out = np.divide(a, b, dtype=np.float32)
    _tally(DIV, out.size)
    return store(out, half)


def exp(x: np.ndarray, half: bool = False) -> np.ndarray:
    with np.errstate(over="ignore"):
        out = np.exp(x, dtype=np.float32)
    _tally(EXP, out.size)
    return store(out, half)


def row_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-row inner product over the last axis, keeping the axis."""
    out = np.einsum("...i,...i->...", a, b, dtype=np.float32)[..., None]
    _tally(MULADD, a.size)
    return np.ascontiguousarray(out, dtype=np.float32)
