"""Transducer negative log-likelihood over the [T, U+1] alignment lattice.

Alignments interleave U label emissions with T blank emissions; the final
emission is always the blank taken at cell (T-1, U), so a lattice admits
C(T+U-1, U) complete paths. Forward/backward recursions run in log space
(float64 internally) and the gradient w.r.t. the log-prob grid comes out of
the usual occupancy algebra: each allowed transition contributes
-exp(alpha + logp + beta_next - loglik).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import OPS, OpRule, active_tape, record_external
from .tensor import Tensor

NEG_INF = -np.inf


def _validate(log_probs: np.ndarray, labels) -> tuple[int, int, int]:
    if log_probs.ndim != 3:
        raise ValueError(f"log_probs must be [T, U+1, V+1], got shape {log_probs.shape}")
    t_len, u_rows, n_out = log_probs.shape
    if t_len < 1:
        raise ValueError("need at least one time frame (T >= 1)")
    if u_rows != len(labels) + 1:
        raise ValueError(f"log_probs has {u_rows} label rows but {len(labels)} labels given")
    return t_len, len(labels), n_out - 1


def _check_labels(labels, n_symbols: int, blank: int) -> None:
    for y in labels:
        if not 0 <= y <= n_symbols:
            raise ValueError(f"label {y} outside output range [0, {n_symbols}]")
        if y == blank:
            raise ValueError("labels must not contain the blank symbol")


@dataclass
class Lattice:
    """Alignment grid with its forward/backward log-sums, for inspection."""

    log_probs: np.ndarray
    labels: tuple[int, ...]
    blank: int
    log_alpha: np.ndarray
    log_beta: np.ndarray

    @property
    def loglik(self) -> float:
        t_len, u_len = self.log_alpha.shape[0], len(self.labels)
        return float(self.log_alpha[t_len - 1, u_len]
                     + self.log_probs[t_len - 1, u_len, self.blank])


def rnnt_forward_backward(log_probs, labels, blank: int | None = None) -> Lattice:
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, u_len, vocab = _validate(lp, labels)
    if blank is None:
        blank = vocab
    _check_labels(labels, vocab, blank)

    alpha = np.full((t_len, u_len + 1), NEG_INF)
    alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u_len + 1):
            if t == 0 and u == 0:
                continue
            acc = NEG_INF
            if t > 0:
                acc = alpha[t - 1, u] + lp[t - 1, u, blank]
            if u > 0:
                acc = np.logaddexp(acc, alpha[t, u - 1] + lp[t, u - 1, labels[u - 1]])
            alpha[t, u] = acc

    beta = np.full((t_len, u_len + 1), NEG_INF)
    beta[t_len - 1, u_len] = lp[t_len - 1, u_len, blank]
    for t in range(t_len - 1, -1, -1):
        for u in range(u_len, -1, -1):
            if t == t_len - 1 and u == u_len:
                continue
            acc = NEG_INF
            if t < t_len - 1:
                acc = lp[t, u, blank] + beta[t + 1, u]
            if u < u_len:
                acc = np.logaddexp(acc, lp[t, u, labels[u]] + beta[t, u + 1])
            beta[t, u] = acc

    return Lattice(lp, tuple(labels), blank, alpha, beta)


def rnnt_loss(log_probs, labels, blank: int | None = None):
    """Negative log-likelihood and its gradient w.r.t. the log-prob grid."""
    lat = rnnt_forward_backward(log_probs, labels, blank)
    lp, alpha, beta = lat.log_probs, lat.log_alpha, lat.log_beta
    t_len, u_len = alpha.shape[0], len(lat.labels)
    loglik = lat.loglik

    grad = np.zeros_like(lp)
    for t in range(t_len):
        for u in range(u_len + 1):
            if not np.isfinite(alpha[t, u]):
                continue
            if t < t_len - 1:
                occ = alpha[t, u] + lp[t, u, lat.blank] + beta[t + 1, u]
                grad[t, u, lat.blank] -= math.exp(occ - loglik)
            elif u == u_len:
                occ = alpha[t, u] + lp[t, u, lat.blank]
                grad[t, u, lat.blank] -= math.exp(occ - loglik)
            if u < u_len:
                occ = alpha[t, u] + lp[t, u, lat.labels[u]] + beta[t, u + 1]
                grad[t, u, lat.labels[u]] -= math.exp(occ - loglik)
    return -loglik, grad


def enumerate_path_logprobs(log_probs, labels, blank: int | None = None) -> list[float]:
    """Log-probability of every complete alignment, by explicit enumeration."""
    lp = np.asarray(log_probs, dtype=np.float64)
    t_len, u_len, vocab = _validate(lp, labels)
    if blank is None:
        blank = vocab
    _check_labels(labels, vocab, blank)
    if t_len + u_len > 12:
        raise ValueError(f"instance too large to enumerate (T+U={t_len + u_len} > 12)")

    totals: list[float] = []

    def walk(t: int, u: int, acc: float) -> None:
        if u < u_len:
            walk(t, u + 1, acc + lp[t, u, labels[u]])
        if t < t_len - 1:
            walk(t + 1, u, acc + lp[t, u, blank])
        if t == t_len - 1 and u == u_len:
            totals.append(acc + lp[t, u, blank])

    walk(0, 0, 0.0)
    return totals


def brute_force_loss(log_probs, labels, blank: int | None = None) -> float:
    """NLL by summing all C(T+U-1, U) alignment paths. Verification only."""
    totals = enumerate_path_logprobs(log_probs, labels, blank)
    m = max(totals)
    return -(m + math.log(sum(math.exp(x - m) for x in totals)))


def alignment_path_count(t_len: int, u_len: int) -> int:
    """Number of complete alignments of U labels against T frames."""
    return math.comb(t_len + u_len - 1, u_len)


OPS["rnnt_nll"] = OpRule(
    forward=None,
    save=None,
    backward=lambda g, saved, attrs: [g * saved["grad"].data],
)


def rnnt_loss_node(lattice: Tensor, labels, blank: int | None = None) -> Tensor:
    """Attach the transducer loss to the active tape as a single node.

    The analytic gradient is computed up front and saved for backward, which
    is what keeps the boundary contract of split execution a plain tensor.
    """
    nll, grad = rnnt_loss(lattice.data, labels, blank)
    saved_grad = Tensor(grad.astype(lattice.data.dtype))
    tape = active_tape()
    if tape is not None:
        tape.adopt(saved_grad)
    out_data = np.asarray(nll, dtype=lattice.data.dtype)
    return record_external("rnnt_nll", [lattice], out_data, {"grad": saved_grad})
