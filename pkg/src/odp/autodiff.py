"""Reverse-mode autodiff over an explicit tape.

Every op records what it saves for backward (the retention policy is the
whole point of the memory measurements): sigmoid/tanh/log_softmax keep their
output, matmul/mul keep their inputs, shape ops keep metadata only.

Backward walks the tape once in reverse, accumulates per-tensor gradients,
and frees each activation and consumed gradient as soon as nothing later in
the walk can need it, so the tracked peak sits at the start of backward like
it would in a real training runtime.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field

import numpy as np

from .tensor import MemoryLedger, Tensor, active_ledger


@dataclass
class Node:
    op: str
    input_ids: tuple[int, ...]
    output_id: int
    saved: dict
    attrs: dict = field(default_factory=dict)


class Tape:
    """Topologically ordered op records plus ownership of their outputs."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False
        self._tensors: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        self._token = _TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _TAPE.reset(self._token)
        return False

    def adopt(self, tensor: Tensor) -> Tensor:
        """Take ownership of a leaf so release() covers it."""
        self._tensors[tensor.tid] = tensor
        return tensor

    def record(self, op: str, inputs, output: Tensor, saved: dict, attrs: dict) -> None:
        self.nodes.append(Node(op, tuple(t.tid for t in inputs), output.tid, saved, attrs))
        self._tensors[output.tid] = output

    def release(self, keep=()) -> None:
        """Free every owned tensor except `keep` (ownership of kept passes to caller)."""
        kept = {t.tid for t in keep}
        ledger = active_ledger()
        for tid, t in self._tensors.items():
            if tid not in kept and ledger is not None and ledger.is_live(t):
                ledger.free(t)
        self._tensors = {tid: t for tid, t in self._tensors.items() if tid in kept}

    def _drop(self, tid: int) -> None:
        t = self._tensors.pop(tid, None)
        if t is not None:
            ledger = active_ledger()
            if ledger is not None and ledger.is_live(t):
                ledger.free(t)


_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("odp_tape", default=None)


def active_tape() -> Tape | None:
    return _TAPE.get()


def leaf(data, dtype=None) -> Tensor:
    """Create an input tensor and hand ownership to the active tape, if any."""
    t = Tensor(data, dtype)
    tape = _TAPE.get()
    if tape is not None:
        tape.adopt(t)
    return t


# --- op rules ---------------------------------------------------------------
#
# Each rule: forward(datas, attrs) -> ndarray,
#            save(inputs, out, attrs) -> dict,
#            backward(g, saved, attrs) -> list of ndarrays aligned with inputs
#            (a None entry means no gradient flows to that input).


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def _fwd_matmul(d, attrs):
    a, b = d
    _require(1 <= a.ndim <= 2 and 1 <= b.ndim <= 2, "matmul expects 1-D or 2-D inputs")
    _require(a.shape[-1] == b.shape[0], f"matmul mismatch {a.shape} @ {b.shape}")
    return a @ b


def _bwd_matmul(g, saved, attrs):
    a, b = saved["a"].data, saved["b"].data
    if a.ndim == 2 and b.ndim == 2:
        return [g @ b.T, a.T @ g]
    if a.ndim == 1 and b.ndim == 2:
        return [b @ g, np.outer(a, g)]
    if a.ndim == 2 and b.ndim == 1:
        return [np.outer(g, b), a.T @ g]
    return [g * b, g * a]  # dot product, g is scalar


def _fwd_add(d, attrs):
    a, b = d
    _require(a.shape == b.shape, f"add shape mismatch {a.shape} vs {b.shape}")
    return a + b


def _fwd_mul(d, attrs):
    a, b = d
    _require(a.shape == b.shape, f"mul shape mismatch {a.shape} vs {b.shape}")
    return a * b


def _fwd_sigmoid(d, attrs):
    (x,) = d
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fwd_tanh(d, attrs):
    (x,) = d
    return np.tanh(x)


def _fwd_log_softmax(d, attrs):
    (x,) = d
    _require(x.ndim >= 1, "log_softmax needs at least one axis")
    m = np.max(x, axis=-1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _bwd_log_softmax(g, saved, attrs):
    y = saved["out"].data
    return [g - np.exp(y) * np.sum(g, axis=-1, keepdims=True)]


def _fwd_concat(d, attrs):
    _require(len(d) >= 1, "concat needs inputs")
    _require(all(x.ndim == d[0].ndim and x.shape[1:] == d[0].shape[1:] for x in d),
             "concat inputs must match beyond axis 0")
    return np.concatenate(d, axis=0)


def _bwd_concat(g, saved, attrs):
    return np.split(g, np.cumsum(saved["sizes"])[:-1], axis=0)


def _fwd_slice(d, attrs):
    (x,) = d
    start, stop = attrs["start"], attrs["stop"]
    _require(0 <= start < stop <= x.shape[0], f"slice [{start}:{stop}] out of range for {x.shape}")
    out = x[start:stop]
    if attrs.get("squeeze"):
        _require(stop - start == 1, "squeeze requires a single-row slice")
        out = out[0]
    return out


def _bwd_slice(g, saved, attrs):
    gx = np.zeros(saved["in_shape"], dtype=g.dtype)
    start, stop = attrs["start"], attrs["stop"]
    gx[start:stop] = g[None] if attrs.get("squeeze") else g
    return [gx]


def _fwd_stack(d, attrs):
    _require(all(x.shape == d[0].shape for x in d), "stack inputs must share a shape")
    return np.stack(d, axis=0)


def _bwd_stack(g, saved, attrs):
    return [g[i] for i in range(saved["n"])]


def _fwd_stack_frames(d, attrs):
    (x,) = d
    k, stride = attrs["k"], attrs["stride"]
    _require(x.ndim == 2, "stack_frames expects [frames, dim]")
    _require(x.shape[0] >= 1, "stack_frames: empty input")
    _require(k >= 1 and stride >= 1, "stack_frames: k and stride must be positive")
    t, dim = x.shape
    n_out = -(-t // stride)  # ceil
    out = np.empty((n_out, k * dim), dtype=x.dtype)
    for j in range(n_out):
        for i in range(k):
            out[j, i * dim:(i + 1) * dim] = x[min(j * stride + i, t - 1)]
    return out


def _bwd_stack_frames(g, saved, attrs):
    k, stride = attrs["k"], attrs["stride"]
    t, dim = saved["in_shape"]
    gx = np.zeros((t, dim), dtype=g.dtype)
    for j in range(g.shape[0]):
        for i in range(k):
            gx[min(j * stride + i, t - 1)] += g[j, i * dim:(i + 1) * dim]
    return [gx]


def _fwd_sum(d, attrs):
    (x,) = d
    return np.asarray(x.sum(), dtype=x.dtype)


def _fwd_outer_add(d, attrs):
    a, b = d
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[1],
             f"outer_add expects [T,D] and [U,D], got {a.shape} and {b.shape}")
    return a[:, None, :] + b[None, :, :]


def _fwd_add_rows(d, attrs):
    a, b = d
    _require(a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0],
             f"add_rows expects [N,D] and [D], got {a.shape} and {b.shape}")
    return a + b[None, :]


def _fwd_reshape(d, attrs):
    (x,) = d
    shape = attrs["shape"]
    _require(int(np.prod(shape)) == x.size, f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


_PASS = lambda inputs, out, attrs: {}
_SAVE_AB = lambda inputs, out, attrs: {"a": inputs[0], "b": inputs[1]}
_SAVE_OUT = lambda inputs, out, attrs: {"out": out}


@dataclass(frozen=True)
class OpRule:
    forward: callable
    save: callable
    backward: callable


OPS: dict[str, OpRule] = {
    "matmul": OpRule(_fwd_matmul, _SAVE_AB, _bwd_matmul),
    "add": OpRule(_fwd_add, _PASS, lambda g, s, a: [g, g]),
    "mul": OpRule(_fwd_mul, _SAVE_AB, lambda g, s, a: [g * s["b"].data, g * s["a"].data]),
    "sigmoid": OpRule(_fwd_sigmoid, _SAVE_OUT,
                      lambda g, s, a: [g * s["out"].data * (1.0 - s["out"].data)]),
    "tanh": OpRule(_fwd_tanh, _SAVE_OUT, lambda g, s, a: [g * (1.0 - s["out"].data ** 2)]),
    "log_softmax": OpRule(_fwd_log_softmax, _SAVE_OUT, _bwd_log_softmax),
    "concat": OpRule(_fwd_concat,
                     lambda inputs, out, attrs: {"sizes": [t.shape[0] for t in inputs]},
                     _bwd_concat),
    "slice": OpRule(_fwd_slice,
                    lambda inputs, out, attrs: {"in_shape": inputs[0].shape},
                    _bwd_slice),
    "stack": OpRule(_fwd_stack, lambda inputs, out, attrs: {"n": len(inputs)}, _bwd_stack),
    "stack_frames": OpRule(_fwd_stack_frames,
                           lambda inputs, out, attrs: {"in_shape": inputs[0].shape},
                           _bwd_stack_frames),
    "sum": OpRule(_fwd_sum,
                  lambda inputs, out, attrs: {"in_shape": inputs[0].shape},
                  lambda g, s, a: [np.full(s["in_shape"], g, dtype=g.dtype)]),
    "outer_add": OpRule(_fwd_outer_add, _PASS,
                        lambda g, s, a: [g.sum(axis=1), g.sum(axis=0)]),
    "add_rows": OpRule(_fwd_add_rows, _PASS, lambda g, s, a: [g, g.sum(axis=0)]),
    "reshape": OpRule(_fwd_reshape,
                      lambda inputs, out, attrs: {"in_shape": inputs[0].shape},
                      lambda g, s, a: [g.reshape(s["in_shape"])]),
}


def apply_op(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Run one op, record it on the active tape, and track its output."""
    rule = OPS.get(kind)
    if rule is None:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}")
    dtypes = {t.data.dtype for t in inputs}
    if len(dtypes) > 1:
        raise ValueError(f"{kind}: mixed input dtypes {sorted(map(str, dtypes))}")
    out_data = rule.forward([t.data for t in inputs], attrs)
    out = Tensor(out_data)  # raises NonFiniteError on bad values
    ledger = active_ledger()
    if ledger is not None:
        ledger.count_op()
    tape = _TAPE.get()
    if tape is not None:
        tape.record(kind, inputs, out, rule.save(inputs, out, attrs), attrs)
    return out


def record_external(op: str, inputs, out_data, saved: dict) -> Tensor:
    """Record an externally computed op (used by the transducer loss node).

    `op` must be registered in OPS with a backward rule; forward already ran.
    """
    out = Tensor(out_data)
    ledger = active_ledger()
    if ledger is not None:
        ledger.count_op()
    tape = _TAPE.get()
    if tape is not None:
        tape.record(op, inputs, out, saved, {})
    return out


def matmul(a, b):
    return apply_op("matmul", a, b)


def add(a, b):
    return apply_op("add", a, b)


def mul(a, b):
    return apply_op("mul", a, b)


def sigmoid(x):
    return apply_op("sigmoid", x)


def tanh(x):
    return apply_op("tanh", x)


def log_softmax(x):
    return apply_op("log_softmax", x)


def concat(*xs):
    return apply_op("concat", *xs)


def row(x, i, *, squeeze=True):
    return apply_op("slice", x, start=i, stop=i + 1, squeeze=squeeze)


def slice_rows(x, start, stop):
    return apply_op("slice", x, start=start, stop=stop)


def stack(*xs):
    return apply_op("stack", *xs)


def stack_frames(x, k, stride):
    return apply_op("stack_frames", x, k=k, stride=stride)


def tsum(x):
    return apply_op("sum", x)


def outer_add(a, b):
    return apply_op("outer_add", a, b)


def add_rows(a, b):
    return apply_op("add_rows", a, b)


def reshape(x, shape):
    return apply_op("reshape", x, shape=tuple(shape))


# --- backward ----------------------------------------------------------------


def _free(t: Tensor) -> None:
    ledger = active_ledger()
    if ledger is not None and ledger.is_live(t):
        ledger.free(t)


def backward(tape: Tape, loss: Tensor | None = None, *, seeds=None, wrt=()) -> dict[int, Tensor]:
    """Gradients of a scalar loss (or explicit seeds) w.r.t. the `wrt` tensors.

    Returns {tensor id -> gradient Tensor}; tensors in `wrt` not reached by
    any gradient path get zeros. Seed tensors are consumed (freed). The tape
    is single-use.
    """
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward")
    tape.consumed = True
    wrt = list(wrt)
    if loss is not None:
        if loss.data.size != 1:
            raise ValueError(f"loss must be scalar, got shape {loss.shape}")
        if loss.tid not in tape._tensors:
            raise ValueError("loss is not a node output on this tape")
        seeds = [(loss, np.ones(loss.shape, dtype=loss.data.dtype))]
    if not seeds:
        raise ValueError("backward needs a loss or explicit seeds")

    needed = {t.tid for t in wrt}
    for node in tape.nodes:
        if node.output_id in needed or any(i in needed for i in node.input_ids):
            needed.add(node.output_id)

    grads: dict[int, Tensor] = {}
    for t, seed in seeds:
        if t.tid not in tape._tensors:
            raise ValueError("seed target is not on this tape")
        g = seed if isinstance(seed, Tensor) else Tensor(np.asarray(seed, dtype=t.data.dtype))
        if g.shape != t.shape:
            raise ValueError(f"seed shape {g.shape} != tensor shape {t.shape}")
        grads[t.tid] = g

    ledger = active_ledger()
    phase = ledger.phase("backward") if ledger is not None else contextlib.nullcontext()
    with phase:
        for node in reversed(tape.nodes):
            g_out = grads.pop(node.output_id, None)
            if g_out is None:
                tape._drop(node.output_id)
                continue
            contribs = OPS[node.op].backward(g_out.data, node.saved, node.attrs)
            for tid, contrib in zip(node.input_ids, contribs):
                if contrib is None or tid not in needed:
                    continue
                c = Tensor(contrib, check=False)
                old = grads.get(tid)
                if old is None:
                    grads[tid] = c
                else:
                    grads[tid] = Tensor(old.data + c.data, check=False)
                    _free(old)
                    _free(c)
            _free(g_out)
            tape._drop(node.output_id)

    out: dict[int, Tensor] = {}
    for t in wrt:
        g = grads.pop(t.tid, None)
        if g is None:
            g = Tensor(np.zeros(t.shape, dtype=t.data.dtype), check=False)
        out[t.tid] = g
    for g in grads.values():  # stray seeds for pruned subgraphs
        _free(g)
    return out


# --- finite-difference oracle -------------------------------------------------


def finite_difference(f, arrays, eps=1e-5):
    """Central-difference gradients of scalar f(arrays) w.r.t. each f64 array."""
    grads = []
    for k, base in enumerate(arrays):
        base = np.asarray(base, dtype=np.float64)
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            hi = [a.copy() if i == k else a for i, a in enumerate(arrays)]
            lo = [a.copy() if i == k else a for i, a in enumerate(arrays)]
            hi[k][idx] += eps
            lo[k][idx] -= eps
            g[idx] = (f(hi) - f(lo)) / (2.0 * eps)
            it.iternext()
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / denom))
