"""Sliding-window consumption of an on-device training cache.

Example ids are acquisition order; the window keeps the newest `window_size`
ids and advances by `window_shift` per session, which doubles as oldest-out
eviction. Within a session each epoch covers the window exactly once, split
sequentially into mini-batches (opt-in seeded shuffle permutes the window
per epoch).
"""

from __future__ import annotations

import csv
import io
import random
from dataclasses import dataclass
from fractions import Fraction


@dataclass(frozen=True)
class CacheConfig:
    window_size: int        # max cached examples
    window_shift: int       # new examples per session
    batch_size: int
    epochs_per_session: int = 1

    def __post_init__(self):
        if not 1 <= self.window_shift <= self.window_size:
            raise ValueError("need 1 <= window_shift <= window_size")
        if not 1 <= self.batch_size <= self.window_size:
            raise ValueError("need 1 <= batch_size <= window_size")
        if self.epochs_per_session < 1:
            raise ValueError("epochs_per_session must be >= 1")


def effective_epoch(cfg: CacheConfig) -> Fraction:
    """Times an interior example is used across all sessions, exact."""
    return Fraction(cfg.epochs_per_session * cfg.window_size, cfg.window_shift)


def session_window(session: int, cfg: CacheConfig) -> tuple[int, int]:
    """[start, end) of 1-indexed session `session`."""
    if session < 1:
        raise ValueError("sessions are 1-indexed")
    start = (session - 1) * cfg.window_shift
    return start, start + cfg.window_size


@dataclass(frozen=True)
class Session:
    index: int                                   # 1-based
    window: tuple[int, int]
    epochs: tuple[tuple[tuple[int, ...], ...], ...]  # epochs -> batches -> ids


@dataclass(frozen=True)
class Schedule:
    config: CacheConfig
    total_examples: int
    sessions: tuple[Session, ...]

    def iter_steps(self):
        """Yields (session, epoch, minibatch, ids), all 1-indexed."""
        for s in self.sessions:
            for e, epoch in enumerate(s.epochs, start=1):
                for b, ids in enumerate(epoch, start=1):
                    yield s.index, e, b, ids

    def usage_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for _, _, _, ids in self.iter_steps():
            for i in ids:
                counts[i] = counts.get(i, 0) + 1
        return counts

    def n_steps(self) -> int:
        return sum(len(epoch) for s in self.sessions for epoch in s.epochs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["session", "epoch", "minibatch", "ids"])
        for session, epoch, batch, ids in self.iter_steps():
            writer.writerow([session, epoch, batch, " ".join(map(str, ids))])
        return buf.getvalue()


def _epoch_batches(ids: list[int], batch_size: int) -> tuple[tuple[int, ...], ...]:
    # final batch may be short: no drop, no wrap, coverage stays exact
    return tuple(tuple(ids[i:i + batch_size]) for i in range(0, len(ids), batch_size))


def generate_schedule(total_examples: int, cfg: CacheConfig, *, shuffle: bool = False,
                      seed: int = 0, allow_partial: bool = False) -> Schedule:
    """Materialize the full session/epoch/mini-batch plan.

    Sessions advance until the window would run past `total_examples`. A
    corpus smaller than one window is an error unless `allow_partial`, which
    yields a single truncated session.
    """
    if total_examples < cfg.window_size and not allow_partial:
        raise ValueError(
            f"window never fills: total_examples={total_examples} < "
            f"window_size={cfg.window_size} (pass allow_partial to truncate)")

    windows: list[tuple[int, int]] = []
    s = 1
    while True:
        start, end = session_window(s, cfg)
        if end > total_examples:
            break
        windows.append((start, end))
        s += 1
    if not windows and allow_partial:
        windows.append((0, total_examples))

    sessions = []
    for idx, (start, end) in enumerate(windows, start=1):
        epochs = []
        for e in range(cfg.epochs_per_session):
            ids = list(range(start, end))
            if shuffle:
                random.Random((seed, idx, e)).shuffle(ids)
            epochs.append(_epoch_batches(ids, cfg.batch_size))
        sessions.append(Session(idx, (start, end), tuple(epochs)))
    return Schedule(cfg, total_examples, tuple(sessions))


def window_cover_count(example_id: int, cfg: CacheConfig, n_sessions: int) -> int:
    """How many of the first `n_sessions` windows contain `example_id`."""
    return sum(1 for s in range(1, n_sessions + 1)
               if session_window(s, cfg)[0] <= example_id < session_window(s, cfg)[1])
