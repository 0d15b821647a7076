"""Two-phase gradient computation over a partitioned training graph.

The graph splits at an encoder boundary into a prefix (input stacking plus
the first `boundary_layer` encoder layers) and a suffix (remaining encoder
layers, label encoder, joint, loss). One training step runs:

  split-1  forward the prefix, keep only the boundary activations
  split-2  forward + backward the suffix: suffix-param grads and the
           gradient at the boundary
  split-3  re-run the prefix forward with intermediates retained, then
           backward from the boundary gradient for the prefix-param grads

Gradient contributions accumulate per parameter in the same per-utterance
order as a single-tape backward, so the result is bit-identical to
combined_backward, while each phase's tracked peak stays below the
combined peak.
"""

from __future__ import annotations

import hashlib
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, backward, leaf
from .model import ModelConfig, ParamGroup, RnnTransducer
from .rnnt_loss import rnnt_loss_node
from .tensor import DTYPES, MemoryLedger, Tensor, track

SPLIT_PHASES = ("split-1", "split-2", "split-3")


@dataclass(frozen=True)
class SplitPlan:
    """Partition of the training graph at an encoder layer boundary.

    `boundary_layer` counts encoder layers in the prefix; 0 degenerates to
    combined execution. `spill` round-trips the boundary tensors (and the
    boundary gradient) through a temp file between phases.
    """

    boundary_layer: int
    spill: bool = False

    def validate(self, config: ModelConfig) -> None:
        if not 0 <= self.boundary_layer <= config.enc_layers:
            raise ValueError(
                f"boundary {self.boundary_layer} outside 0..{config.enc_layers}")

    def prefix_names(self, trainable) -> list[str]:
        return [n for n in trainable
                if n.startswith("enc.") and int(n.split(".")[1]) < self.boundary_layer]


@dataclass
class BackwardRun:
    grads: dict[str, Tensor]
    loss: float
    ledger: MemoryLedger
    fingerprint: str
    param_bytes: int
    param_swap_events: int
    forward_ops: dict[str, int] = field(default_factory=dict)

    def free_grads(self) -> None:
        for g in self.grads.values():
            if self.ledger.is_live(g):
                self.ledger.free(g)


def _trainable_names(model: RnnTransducer, trainable) -> list[str]:
    if trainable is None:
        return list(model.params)
    if isinstance(trainable, ParamGroup):
        trainable = trainable.param_names
    names = list(trainable)
    for n in names:
        if n not in model.params:
            raise KeyError(f"unknown parameter {n!r}")
    # keep model order so gradient accumulation order is reproducible
    wanted = set(names)
    return [n for n in model.params if n in wanted]


def _fingerprint(model: RnnTransducer, batch, trainable_names, reduction: str) -> str:
    h = hashlib.sha256()
    h.update(model.config.to_json().encode())
    h.update(reduction.encode())
    h.update(",".join(trainable_names).encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(model.params[name].data.tobytes())
    for feats, labels in batch:
        h.update(np.ascontiguousarray(feats).tobytes())
        h.update(bytes(labels))
    return h.hexdigest()


def _mean_loss(model: RnnTransducer, losses, reduction: str) -> Tensor:
    from .autodiff import add, mul
    total = losses[0]
    for l in losses[1:]:
        total = add(total, l)
    if reduction == "mean":
        scale = leaf(np.asarray(1.0 / len(losses), dtype=DTYPES[model.dtype]))
        total = mul(total, scale)
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    return total


def _backward_from_layer(model, items, from_layer, trainable_names, ledger,
                         reduction, phase_label):
    """Forward + backward in one tape from `from_layer` boundary inputs."""
    with track(ledger), ledger.phase(phase_label):
        with Tape() as tape:
            losses = []
            for boundary_arr, labels in items:
                x = leaf(np.asarray(boundary_arr, dtype=DTYPES[model.dtype]))
                lattice = model.lattice_from_boundary(x, from_layer, labels)
                losses.append(rnnt_loss_node(lattice, labels, model.config.blank))
            loss = _mean_loss(model, losses, reduction)
        wrt = [model.params[n] for n in trainable_names]
        grads_by_tid = backward(tape, loss, wrt=wrt)
        loss_val = float(loss.data)
        tape.release()
    grads = {n: grads_by_tid[model.params[n].tid] for n in trainable_names}
    return grads, loss_val


def combined_backward(model: RnnTransducer, batch, trainable=None, *,
                      ledger: MemoryLedger | None = None,
                      reduction: str = "mean") -> BackwardRun:
    """Single-tape forward + backward over the whole training graph."""
    if not batch:
        raise ValueError("empty batch")
    names = _trainable_names(model, trainable)
    ledger = ledger if ledger is not None else MemoryLedger()
    grads, loss_val = _backward_from_layer(
        model, batch, 0, names, ledger, reduction, "combined")
    return BackwardRun(grads, loss_val, ledger,
                       _fingerprint(model, batch, names, reduction),
                       model.param_bytes(), param_swap_events=1,
                       forward_ops={"combined": ledger.phase_op_counts.get("combined", 0)})


class _SavedOut:
    """Tensors moved out of tracked working memory between phases.

    Default mode only adjusts the ledger (the swap is counted, not
    performed); spill mode round-trips the values through a temp file.
    """

    def __init__(self, tensors: list[Tensor], ledger: MemoryLedger, spill: bool, tag: str):
        self._ledger = ledger
        self._path = None
        self._tensors = tensors
        if spill:
            fd, self._path = tempfile.mkstemp(prefix=f"odp-{tag}-", suffix=".npz")
            os.close(fd)
            np.savez(self._path, *[t.data for t in tensors])
        for t in tensors:
            if ledger.is_live(t):
                ledger.free(t)

    def restore(self) -> list[Tensor]:
        if self._path is None:
            for t in self._tensors:
                self._ledger.register(t)
            return self._tensors
        try:
            with np.load(self._path) as archive:
                return [Tensor(archive[f"arr_{i}"]) for i in range(len(self._tensors))]
        finally:
            os.unlink(self._path)


def split_backward(model: RnnTransducer, batch, plan: SplitPlan, trainable=None, *,
                   ledger: MemoryLedger | None = None,
                   reduction: str = "mean") -> BackwardRun:
    """Sequential split execution; grads match combined_backward bit-exactly."""
    if not batch:
        raise ValueError("empty batch")
    plan.validate(model.config)
    names = _trainable_names(model, trainable)
    ledger = ledger if ledger is not None else MemoryLedger()
    boundary = plan.boundary_layer

    prefix_names = plan.prefix_names(names)
    suffix_names = [n for n in names if n not in set(prefix_names)]
    swaps = 1

    if boundary == 0:
        grads, loss_val = _backward_from_layer(
            model, batch, 0, names, ledger, reduction, "split-2")
        for ph in ("split-1", "split-3"):
            ledger.phase_peaks.setdefault(ph, 0)
            ledger.phase_op_counts.setdefault(ph, 0)
        return BackwardRun(grads, loss_val, ledger,
                           _fingerprint(model, batch, names, reduction),
                           model.param_bytes(), swaps,
                           {ph: ledger.phase_op_counts.get(ph, 0) for ph in SPLIT_PHASES})

    with track(ledger):
        with ledger.phase("split-1"):
            with Tape() as t1:
                boundaries = []
                for feats, _labels in batch:
                    x = leaf(np.asarray(feats, dtype=DTYPES[model.dtype]))
                    boundaries.append(model.encoder_prefix(x, boundary))
                t1.release(keep=boundaries)
        if plan.spill:
            boundaries = _SavedOut(boundaries, ledger, True, "boundary").restore()
        swaps += 1

        with ledger.phase("split-2"):
            with Tape() as t2:
                losses = []
                for h1, (_feats, labels) in zip(boundaries, batch):
                    lattice = model.lattice_from_boundary(h1, boundary, labels)
                    losses.append(rnnt_loss_node(lattice, labels, model.config.blank))
                loss = _mean_loss(model, losses, reduction)
            wrt = [model.params[n] for n in suffix_names]
            if prefix_names:
                wrt += boundaries
            grads_by_tid = backward(t2, loss, wrt=wrt)
            loss_val = float(loss.data)
            t2.release()
            for h1 in boundaries:
                if ledger.is_live(h1):
                    ledger.free(h1)
        suffix_grads = [grads_by_tid[model.params[n].tid] for n in suffix_names]

        if prefix_names:
            # sub-graph 2 is swapped out before the recompute: its gradients
            # leave working memory and return with the final result
            seeds_in = [grads_by_tid[h1.tid] for h1 in boundaries]
            saved_suffix = _SavedOut(suffix_grads, ledger, plan.spill, "suffix-grads")
            if plan.spill:
                seeds_in = _SavedOut(seeds_in, ledger, True, "boundary-grad").restore()
            swaps += 1
            with ledger.phase("split-3"):
                with Tape() as t3:
                    recomputed = []
                    for feats, _labels in batch:
                        x = leaf(np.asarray(feats, dtype=DTYPES[model.dtype]))
                        recomputed.append(model.encoder_prefix(x, boundary))
                g3 = backward(t3, seeds=list(zip(recomputed, seeds_in)),
                              wrt=[model.params[n] for n in prefix_names])
                t3.release()
            suffix_grads = saved_suffix.restore()
            grads = dict(zip(suffix_names, suffix_grads))
            grads.update({n: g3[model.params[n].tid] for n in prefix_names})
        else:
            grads = dict(zip(suffix_names, suffix_grads))
            ledger.phase_peaks.setdefault("split-3", 0)
            ledger.phase_op_counts.setdefault("split-3", 0)
            for h1 in boundaries:
                g = grads_by_tid.get(h1.tid)
                if g is not None and ledger.is_live(g):
                    ledger.free(g)

    grads = {n: grads[n] for n in names}
    return BackwardRun(grads, loss_val, ledger,
                       _fingerprint(model, batch, names, reduction),
                       model.param_bytes(), swaps,
                       {ph: ledger.phase_op_counts.get(ph, 0) for ph in SPLIT_PHASES})


def memory_report(combined: BackwardRun, split: BackwardRun) -> dict:
    """Peaks, reduction ratio and recompute overhead for a matched pair of runs."""
    if combined.fingerprint != split.fingerprint:
        raise ValueError("runs are not comparable: different model, batch, or trainable set")
    combined_peak = combined.ledger.peak_memory("combined")
    split_peaks = {ph: split.ledger.phase_peaks.get(ph, 0) for ph in SPLIT_PHASES}
    combined_ops = combined.forward_ops.get("combined", 0)
    split_ops = sum(split.forward_ops.get(ph, 0) for ph in SPLIT_PHASES)
    extra = split_ops - combined_ops
    max_split = max(split_peaks.values())
    return {
        "combined_peak_bytes": combined_peak,
        "split_phase_peaks": split_peaks,
        "reduction_ratio": 1.0 - max_split / combined_peak if combined_peak else 0.0,
        "extra_forward_ops": extra,
        "recompute_overhead": extra / combined_ops if combined_ops else 0.0,
        "param_swap_events": split.param_swap_events,
        "param_bytes": combined.param_bytes,
    }
