"""Session-driven personalization loop, synthetic speaker-shift data, and
evaluation metrics.

The synthetic task stands in for real impaired-speech recordings: each
grapheme has a fixed feature prototype, an utterance emits a run of noisy
prototype frames per label, and a "speaker shift" applies an affine
transform plus noise to the features only. A model fit on the base
distribution then shows the personalization gap on shifted data.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .cache import Schedule
from .model import (ModelConfig, RnnTransducer, dequantize_int8,
                    frozen_prefix_layers, quantize_int8, select_trainable)
from .rnnt_loss import rnnt_loss
from .splitgrad import SplitPlan, _backward_from_layer, combined_backward, split_backward
from .tensor import DTYPES, MemoryLedger, Tensor

_PROTOTYPE_SEED = 8093  # shared by base and shifted tasks for a given (vocab, dim)


# --- optimizer -----------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-4
    momentum: float = 0.9


def momentum_step(param: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
                  lr: float, momentum: float):
    """Classic momentum: v <- m*v + g; theta <- theta - lr*v."""
    if param.shape != grad.shape or param.shape != velocity.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {grad.shape}, "
                         f"velocity {velocity.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    v = momentum * velocity + grad
    return param - lr * v, v


class MomentumOptimizer:
    """Holds velocity for exactly the trainable set; frozen params have none."""

    def __init__(self, config: OptimizerConfig, trainable_names):
        self.config = config
        self.trainable = tuple(trainable_names)
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> None:
        missing = [n for n in self.trainable if n not in grads]
        extra = [n for n in grads if n not in self.trainable]
        if missing or extra:
            raise ValueError(f"grads must cover exactly the trainable set "
                             f"(missing {missing}, extra {extra})")
        for name in self.trainable:
            p = params[name]
            v = self.velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            new_data, v = momentum_step(p.data, grads[name].data, v,
                                        self.config.lr, self.config.momentum)
            self.velocity[name] = v
            params[name] = Tensor(new_data, is_param=True)


# --- synthetic speaker-shift task ------------------------------------------------


@dataclass(frozen=True)
class SyntheticTaskSpec:
    seed: int
    vocab: int = 8
    feature_dim: int = 4
    mean_labels: int = 3
    frames_per_label: int = 6
    shift_scale: float = 1.0
    shift_offset: float = 0.0
    noise: float = 0.0


def label_prototypes(vocab: int, feature_dim: int) -> np.ndarray:
    """Per-grapheme feature templates, fixed for a given task geometry."""
    rng = np.random.default_rng(_PROTOTYPE_SEED + 1000 * vocab + feature_dim)
    return 1.5 * rng.normal(size=(vocab, feature_dim))


def synth_generate(spec: SyntheticTaskSpec, n: int):
    """n utterances of (float32 features [T, dim], label tuple).

    Content draws (lengths, labels, base frame noise) and shift noise use
    separate generators, so datasets that differ only in the speaker shift
    contain the same underlying utterances.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(spec.seed)
    shift_rng = np.random.default_rng(spec.seed + 0x5EED)
    protos = label_prototypes(spec.vocab, spec.feature_dim)
    out = []
    for _ in range(n):
        u_len = max(1, int(rng.integers(spec.mean_labels - 1, spec.mean_labels + 2)))
        labels = tuple(int(y) for y in rng.integers(0, spec.vocab, size=u_len))
        frames = np.repeat(protos[list(labels)], spec.frames_per_label, axis=0)
        frames = frames + 0.15 * rng.normal(size=frames.shape)
        frames = spec.shift_scale * frames + spec.shift_offset
        if spec.noise:
            frames = frames + spec.noise * shift_rng.normal(size=frames.shape)
        out.append((frames.astype(np.float32), labels))
    return out


def shifted(spec: SyntheticTaskSpec, scale: float, offset: float, noise: float = 0.0,
            seed: int | None = None) -> SyntheticTaskSpec:
    return replace(spec, shift_scale=scale, shift_offset=offset, noise=noise,
                   seed=spec.seed if seed is None else seed)


# --- metrics ---------------------------------------------------------------------


def edit_distance(reference, hypothesis) -> int:
    ref, hyp = list(reference), list(hypothesis)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[len(hyp)]


def wer(reference, hypothesis) -> float:
    """(substitutions + insertions + deletions) / reference length; may exceed 1."""
    reference = list(reference)
    if not reference:
        raise ValueError("empty reference")
    return edit_distance(reference, hypothesis) / len(reference)


def evaluate(model: RnnTransducer, eval_set) -> tuple[float, float]:
    """Mean utterance NLL and corpus-level decode WER on held-out data."""
    losses = []
    dist = 0
    ref_len = 0
    for feats, labels in eval_set:
        lattice = model.lattice_from_boundary(Tensor(feats, model.dtype), 0, labels)
        nll, _ = rnnt_loss(lattice.data, labels, model.config.blank)
        losses.append(nll)
        hyp = model.greedy_decode(feats)
        dist += edit_distance(labels, hyp)
        ref_len += len(labels)
    return float(np.mean(losses)), dist / ref_len


# --- frozen-prefix feature cache ---------------------------------------------------


class FrozenFeatureCache:
    """Boundary activations of the frozen encoder prefix, keyed by example id.

    Optionally runs the prefix through int8-quantized weights, mimicking
    reuse of the compressed inference model for the static features.
    """

    def __init__(self, model: RnnTransducer, group: str, quantize: bool = False):
        self.prefix_layers = frozen_prefix_layers(model.config, group)
        self.quantize = quantize
        self.hits = 0
        self.misses = 0
        self._store: dict[int, np.ndarray] = {}
        if quantize:
            params = dict(model.params)
            for l in range(self.prefix_layers):
                for w in ("wx", "wh", "b", "wp"):
                    name = f"enc.{l}.{w}"
                    q, scale = quantize_int8(params[name].data)
                    params[name] = Tensor(dequantize_int8(q, scale, model.dtype),
                                          is_param=True)
            self._prefix_model = RnnTransducer(model.config, params, dtype=model.dtype)
        else:
            self._prefix_model = model

    def features(self, example_id: int, raw_features: np.ndarray) -> np.ndarray:
        cached = self._store.get(example_id)
        if cached is not None:
            self.hits += 1
            return cached
        self.misses += 1
        x = Tensor(raw_features, self._prefix_model.dtype)
        out = self._prefix_model.encoder_prefix(x, self.prefix_layers).data
        self._store[example_id] = out
        return out


# --- personalization loop -----------------------------------------------------------


@dataclass(frozen=True)
class SessionMetrics:
    session: int
    examples_seen: int
    train_loss: float
    holdout_loss: float
    holdout_wer: float


@dataclass
class PersonalizationResult:
    initial_holdout_loss: float
    initial_holdout_wer: float
    sessions: list[SessionMetrics] = field(default_factory=list)
    optimizer_steps: int = 0
    cache_hits: int = 0
    cache_misses: int = 0

    def final_holdout_loss(self) -> float:
        return self.sessions[-1].holdout_loss if self.sessions else self.initial_holdout_loss


def run_personalization(model: RnnTransducer, schedule: Schedule, group_name: str,
                        dataset, eval_set, *,
                        optimizer: OptimizerConfig = OptimizerConfig(),
                        split_plan: SplitPlan | None = None,
                        feature_cache: bool = False, cache_quantize: bool = False,
                        ledger: MemoryLedger | None = None,
                        reduction: str = "mean") -> PersonalizationResult:
    """Train `group_name` over the schedule, evaluating after every session.

    The model is updated in place. With `split_plan`, every step uses split
    execution; with `feature_cache`, frozen-prefix outputs are computed once
    per example and reused.
    """
    if split_plan is not None and feature_cache:
        raise ValueError("split_plan and feature_cache are mutually exclusive")
    needed = max((i for *_ , ids in schedule.iter_steps() for i in ids), default=-1)
    if needed >= len(dataset):
        raise ValueError(f"schedule references example {needed} but dataset has {len(dataset)}")
    group = select_trainable(model.config, group_name)
    opt = MomentumOptimizer(optimizer, group.param_names)
    ledger = ledger if ledger is not None else MemoryLedger()
    cache = FrozenFeatureCache(model, group_name, cache_quantize) if feature_cache else None

    init_loss, init_wer = evaluate(model, eval_set)
    result = PersonalizationResult(init_loss, init_wer)

    for session in schedule.sessions:
        step_losses = []
        for epoch in session.epochs:
            for ids in epoch:
                if cache is not None:
                    items = [(cache.features(i, dataset[i][0]), dataset[i][1]) for i in ids]
                    grads, loss_val = _backward_from_layer(
                        model, items, cache.prefix_layers, list(group.param_names),
                        ledger, reduction, "cached-step")
                    run_grads = grads
                else:
                    batch = [dataset[i] for i in ids]
                    if split_plan is not None:
                        run = split_backward(model, batch, split_plan, group,
                                             ledger=ledger, reduction=reduction)
                    else:
                        run = combined_backward(model, batch, group,
                                                ledger=ledger, reduction=reduction)
                    run_grads, loss_val = run.grads, run.loss
                opt.step(model.params, run_grads)
                for g in run_grads.values():
                    if ledger.is_live(g):
                        ledger.free(g)
                step_losses.append(loss_val)
                result.optimizer_steps += 1
        hold_loss, hold_wer = evaluate(model, eval_set)
        cfg = schedule.config
        result.sessions.append(SessionMetrics(
            session=session.index,
            examples_seen=cfg.window_size + (session.index - 1) * cfg.window_shift,
            train_loss=float(np.mean(step_losses)),
            holdout_loss=hold_loss,
            holdout_wer=hold_wer,
        ))
    if cache is not None:
        result.cache_hits, result.cache_misses = cache.hits, cache.misses
    return result


def train_basic(model: RnnTransducer, dataset, *, epochs: int, batch_size: int,
                optimizer: OptimizerConfig, group_name: str = "All",
                reduction: str = "mean") -> list[float]:
    """Plain multi-epoch training (no windowing); returns per-epoch mean loss."""
    group = select_trainable(model.config, group_name)
    opt = MomentumOptimizer(optimizer, group.param_names)
    ledger = MemoryLedger()
    history = []
    for _ in range(epochs):
        losses = []
        for i in range(0, len(dataset), batch_size):
            run = combined_backward(model, dataset[i:i + batch_size], group,
                                    ledger=ledger, reduction=reduction)
            opt.step(model.params, run.grads)
            run.free_grads()
            losses.append(run.loss)
        history.append(float(np.mean(losses)))
    return history


# --- metric serialization -------------------------------------------------------------


def metrics_to_jsonl(result: PersonalizationResult) -> str:
    lines = [json.dumps(asdict(s), sort_keys=True) for s in result.sessions]
    return "\n".join(lines) + "\n" if lines else ""


def metrics_to_csv(result: PersonalizationResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["session", "examples_seen", "train_loss", "holdout_loss", "holdout_wer"])
    for s in result.sessions:
        writer.writerow([s.session, s.examples_seen, repr(s.train_loss),
                         repr(s.holdout_loss), repr(s.holdout_wer)])
    return buf.getvalue()
