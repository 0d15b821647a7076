"""Dense tensors plus a byte-accurate ledger of live training memory.

The ledger models algorithmic liveness: a tensor is registered when it is
created inside a tracked region and freed when the algorithm is done with it.
The backing numpy buffer may outlive its ledger entry while Python references
remain (tests read values after release); the accounting is the measurement,
not the allocator.

Parameters (``is_param=True``) are deliberately not tracked: activation,
saved-state and gradient memory is what the split-gradient comparison is
about. Parameter storage is reported separately.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools

import numpy as np

DTYPES = {"f32": np.float32, "f64": np.float64}
_DTYPE_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}

_next_tensor_id = itertools.count(1).__next__


class NonFiniteError(ArithmeticError):
    """An op produced or consumed NaN/inf. Hard error, never propagated."""


class Tensor:
    """Immutable row-major dense array with an identity for memory tracking."""

    __slots__ = ("data", "tid", "is_param")

    def __init__(self, data, dtype=None, *, is_param: bool = False, check: bool = True):
        if dtype is not None:
            dtype = DTYPES.get(dtype, dtype)
        elif not (isinstance(data, np.ndarray) and data.dtype in _DTYPE_NAMES):
            dtype = np.float32  # training default; ndarrays keep their precision
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _DTYPE_NAMES:
            arr = arr.astype(np.float32)
        if check and not np.isfinite(arr.sum()):
            # fast test: any nan/inf poisons the sum; overflow of a finite
            # array also lands here, so confirm before raising
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError("tensor contains non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.tid = _next_tensor_id()
        self.is_param = is_param
        ledger = _LEDGER.get()
        if ledger is not None and not is_param:
            ledger.register(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def nbytes(self) -> int:
        return self.data.nbytes

    @property
    def dtype_name(self) -> str:
        return _DTYPE_NAMES[self.data.dtype]

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        kind = "param" if self.is_param else "tensor"
        return f"<{kind} #{self.tid} {self.dtype_name}{list(self.shape)}>"


class MemoryLedger:
    """Running byte count of live tracked tensors, with per-phase peaks.

    Phases nest; an allocation bumps the peak of every phase on the stack.
    Re-entering a phase label keeps the running maximum across entries.
    Forward op executions are counted per phase as well (backward kernels do
    not go through the op dispatcher, so the counts are forward-only).
    """

    def __init__(self):
        self.current_bytes = 0
        self.peak_bytes = 0
        self.phase_peaks: dict[str, int] = {}
        self.phase_op_counts: dict[str, int] = {}
        self.total_ops = 0
        self._live: dict[int, int] = {}
        self._phase_stack: list[str] = []

    def register(self, tensor: Tensor) -> None:
        if tensor.tid in self._live:
            raise ValueError(f"tensor #{tensor.tid} already tracked")
        self._live[tensor.tid] = tensor.nbytes
        self.current_bytes += tensor.nbytes
        self._bump()

    def free(self, tensor: Tensor) -> None:
        nbytes = self._live.pop(tensor.tid, None)
        if nbytes is None:
            raise ValueError(f"tensor #{tensor.tid} is not tracked (double free?)")
        self.current_bytes -= nbytes

    def is_live(self, tensor: Tensor) -> bool:
        return tensor.tid in self._live

    def _bump(self) -> None:
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes
        for label in self._phase_stack:
            if self.current_bytes > self.phase_peaks[label]:
                self.phase_peaks[label] = self.current_bytes

    def count_op(self) -> None:
        self.total_ops += 1
        for label in self._phase_stack:
            self.phase_op_counts[label] = self.phase_op_counts.get(label, 0) + 1

    @contextlib.contextmanager
    def phase(self, label: str):
        self.phase_peaks[label] = max(self.phase_peaks.get(label, 0), self.current_bytes)
        self.phase_op_counts.setdefault(label, 0)
        self._phase_stack.append(label)
        try:
            yield self
        finally:
            self._phase_stack.pop()

    def peak_memory(self, phase: str) -> int:
        """Maximum concurrently live tracked bytes recorded for a phase."""
        if phase not in self.phase_peaks:
            raise KeyError(f"unknown phase {phase!r}; recorded: {sorted(self.phase_peaks)}")
        return self.phase_peaks[phase]


_LEDGER: contextvars.ContextVar[MemoryLedger | None] = contextvars.ContextVar(
    "odp_ledger", default=None
)


def active_ledger() -> MemoryLedger | None:
    return _LEDGER.get()


@contextlib.contextmanager
def track(ledger: MemoryLedger):
    """Install `ledger` as the allocation tracker for the enclosed region."""
    token = _LEDGER.set(ledger)
    try:
        yield ledger
    finally:
        _LEDGER.reset(token)


def free_tensors(tensors) -> None:
    """Free an iterable of tensors from the active (or their) ledger, if tracked."""
    ledger = _LEDGER.get()
    if ledger is None:
        return
    for t in tensors:
        if ledger.is_live(t):
            ledger.free(t)
