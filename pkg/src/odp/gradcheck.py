"""Randomized finite-difference verification of every differentiable op,
a small composed network, and the transducer loss gradient."""

from __future__ import annotations

import numpy as np

from .autodiff import (Tape, apply_op, backward, finite_difference, leaf,
                       max_relative_error, mul, tsum)
from .rnnt_loss import rnnt_loss
from .tensor import Tensor

TOLERANCE = 1e-4

CHECKED_OPS = ("matmul", "add", "mul", "sigmoid", "tanh", "log_softmax",
               "concat", "slice", "stack", "stack_frames", "sum",
               "outer_add", "add_rows", "reshape")


def _case(kind: str, rng: np.random.Generator):
    """Random inputs + attrs for one op instance (f64, small shapes)."""
    def arr(*shape):
        return rng.normal(size=shape)

    if kind == "matmul":
        m, k, n = rng.integers(1, 5, size=3)
        variants = [
            ([arr(m, k), arr(k, n)], {}),
            ([arr(k), arr(k, n)], {}),
            ([arr(m, k), arr(k)], {}),
            ([arr(k), arr(k)], {}),
        ]
        return variants[int(rng.integers(0, 4))]
    if kind in ("add", "mul"):
        shape = tuple(rng.integers(1, 5, size=int(rng.integers(1, 3))))
        return [arr(*shape), arr(*shape)], {}
    if kind in ("sigmoid", "tanh"):
        return [arr(*rng.integers(1, 5, size=2))], {}
    if kind == "log_softmax":
        if rng.integers(0, 2):
            return [arr(int(rng.integers(2, 6)))], {}
        return [arr(int(rng.integers(1, 4)), int(rng.integers(2, 6)))], {}
    if kind == "concat":
        cols = int(rng.integers(1, 4))
        parts = [arr(int(rng.integers(1, 4)), cols) for _ in range(int(rng.integers(2, 4)))]
        return parts, {}
    if kind == "slice":
        n = int(rng.integers(2, 6))
        start = int(rng.integers(0, n - 1))
        stop = int(rng.integers(start + 1, n + 1))
        squeeze = bool(rng.integers(0, 2)) and stop == start + 1
        return [arr(n, int(rng.integers(1, 4)))], {"start": start, "stop": stop, "squeeze": squeeze}
    if kind == "stack":
        shape = tuple(rng.integers(1, 4, size=2))
        return [arr(*shape) for _ in range(int(rng.integers(2, 4)))], {}
    if kind == "stack_frames":
        t, d = int(rng.integers(1, 7)), int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        return [arr(t, d)], {"k": k, "stride": stride}
    if kind == "sum":
        return [arr(*rng.integers(1, 5, size=2))], {}
    if kind == "outer_add":
        t, u, d = rng.integers(1, 5, size=3)
        return [arr(t, d), arr(u, d)], {}
    if kind == "add_rows":
        n, d = rng.integers(1, 5, size=2)
        return [arr(n, d), arr(d)], {}
    if kind == "reshape":
        n, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        return [arr(n, d)], {"shape": (d * n,) if rng.integers(0, 2) else (d, n)}
    raise ValueError(f"no gradcheck case for {kind!r}")


def check_op(kind: str, trials: int = 100, seed: int = 0) -> float:
    """Max relative error of tape gradients vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        arrays, attrs = _case(kind, rng)
        probe = rng.normal(size=apply_op(kind, *[Tensor(a, "f64") for a in arrays],
                                         **attrs).shape)

        def scalar(arrs):
            out = apply_op(kind, *[Tensor(a, "f64") for a in arrs], **attrs)
            return float((out.data * probe).sum())

        inputs = [Tensor(a, "f64") for a in arrays]
        with Tape() as tape:
            out = apply_op(kind, *inputs, **attrs)
            loss = tsum(mul(out, leaf(probe)))
        grads = backward(tape, loss, wrt=inputs)
        fd = finite_difference(scalar, arrays)
        for t, fd_g in zip(inputs, fd):
            worst = max(worst, max_relative_error(grads[t.tid].data, fd_g))
    return worst


def check_two_layer_net(trials: int = 20, seed: int = 0) -> float:
    """Composed sanity case: sigmoid/tanh MLP, every grad vs central FD."""
    from .autodiff import add, matmul, sigmoid, tanh
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d0, d1, d2 = rng.integers(2, 5, size=3)
        arrays = [rng.normal(size=s) for s in [(d0,), (d0, d1), (d1,), (d1, d2), (d2,)]]

        def scalar(arrs):
            x, w1, b1, w2, b2 = [Tensor(a, "f64") for a in arrs]
            h = sigmoid(add(matmul(x, w1), b1))
            return float(tsum(tanh(add(matmul(h, w2), b2))).data)

        tensors = [Tensor(a, "f64") for a in arrays]
        x, w1, b1, w2, b2 = tensors
        with Tape() as tape:
            h = sigmoid(add(matmul(x, w1), b1))
            loss = tsum(tanh(add(matmul(h, w2), b2)))
        grads = backward(tape, loss, wrt=tensors)
        fd = finite_difference(scalar, arrays)
        for t, fd_g in zip(tensors, fd):
            worst = max(worst, max_relative_error(grads[t.tid].data, fd_g))
    return worst


def check_rnnt_grad(trials: int = 30, seed: int = 0) -> float:
    """Transducer loss analytic gradient vs central differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        t_len = int(rng.integers(1, 5))
        u_len = int(rng.integers(0, 4))
        vocab = int(rng.integers(1, 6))
        lp = np.log(rng.dirichlet(np.ones(vocab + 1), size=(t_len, u_len + 1)))
        labels = [int(y) for y in rng.integers(0, vocab, size=u_len)]
        _, grad = rnnt_loss(lp, labels)
        fd = finite_difference(lambda a: rnnt_loss(a[0], labels)[0], [lp])
        worst = max(worst, max_relative_error(grad, fd[0]))
    return worst


def run_gradcheck(trials: int = 100, seed: int = 0) -> dict:
    """Full suite; `passed` requires every max relative error <= 1e-4."""
    report: dict = {"tolerance": TOLERANCE, "ops": {}}
    worst = 0.0
    for kind in CHECKED_OPS:
        err = check_op(kind, trials, seed)
        report["ops"][kind] = err
        worst = max(worst, err)
    report["two_layer_net"] = check_two_layer_net(max(5, trials // 5), seed)
    report["rnnt_loss"] = check_rnnt_grad(max(5, trials // 3), seed)
    worst = max(worst, report["two_layer_net"], report["rnnt_loss"])
    report["max_rel_err"] = worst
    report["passed"] = worst <= TOLERANCE
    return report
