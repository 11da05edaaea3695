"""Historical context assembly: three-term memory window, first-frame anchor,
token budgets, relative temporal indices and prompt interpolation.

The history tensor is laid out long-term, mid-term, short-term, oldest to newest
inside each term, so the anchor frame sits at temporal position 0.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .latent import DimensionError, check_latent

Kernel = tuple[int, int, int]

# Long-term, mid-term, short-term: order of the terms inside the history tensor.
_LAYOUT = (2, 1, 0)


class TaskMode(str, Enum):
    T2V = "T2V"
    I2V = "I2V"
    V2V = "V2V"


@dataclass(frozen=True)
class MemoryPlan:
    """Term lengths (short, mid, long) in frames and one patch kernel (p_t, p_h, p_w) per term."""

    term_lengths: tuple[int, int, int]
    kernels: tuple[Kernel, Kernel, Kernel]
    height: int
    width: int

    def __post_init__(self):
        object.__setattr__(self, "term_lengths", tuple(int(t) for t in self.term_lengths))
        object.__setattr__(self, "kernels", tuple(tuple(int(p) for p in k) for k in self.kernels))
        if len(self.term_lengths) != 3 or len(self.kernels) != 3:
            raise ValueError("a memory plan has exactly three terms")
        for n, (pt, ph, pw) in zip(self.term_lengths, self.kernels):
            if n <= 0:
                raise ValueError(f"term lengths must be positive, got {self.term_lengths}")
            if min(pt, ph, pw) < 1:
                raise ValueError(f"kernel entries must be >= 1, got {(pt, ph, pw)}")
            if n % pt:
                raise ValueError(f"term length {n} not divisible by temporal kernel {pt}")
            if self.height % ph or self.width % pw:
                raise ValueError(
                    f"latent grid {(self.height, self.width)} not divisible by kernel {(ph, pw)}"
                )

    @property
    def window(self) -> int:
        return sum(self.term_lengths)

    def term_slices(self) -> list[tuple[int, slice]]:
        """(term index, frame slice) pairs in tensor order (long, mid, short)."""
        out, start = [], 0
        for i in _LAYOUT:
            out.append((i, slice(start, start + self.term_lengths[i])))
            start += self.term_lengths[i]
        return out

    def temporal_slots(self, i: int) -> int:
        return self.term_lengths[i] // self.kernels[i][0]

    @property
    def hist_temporal_positions(self) -> int:
        return sum(self.temporal_slots(i) for i in range(3))


def paper_plan(height: int = 48, width: int = 80) -> MemoryPlan:
    """Short 2 frames at (1,2,2), mid 2 at (2,4,4), long 16 at (4,8,8): the cost-analysis plan."""
    return MemoryPlan((2, 2, 16), ((1, 2, 2), (2, 4, 4), (4, 8, 8)), height, width)


def toy_plan(height: int = 8, width: int = 8, terms: tuple[int, int, int] = (2, 2, 4)) -> MemoryPlan:
    """Desk-scale plan: short term at full token density, long term most compressed."""
    return MemoryPlan(terms, ((1, 2, 2), (2, 4, 4), (4, 8, 8)), height, width)


def token_budget(plan: MemoryPlan) -> tuple[Fraction, Fraction, Fraction, Fraction]:
    """Exact (L_short, L_mid, L_long, L_total) history token counts."""
    hw = plan.height * plan.width
    terms = [
        Fraction(n * hw, pt * ph * pw) for n, (pt, ph, pw) in zip(plan.term_lengths, plan.kernels)
    ]
    return terms[0], terms[1], terms[2], sum(terms, Fraction(0))


@dataclass(frozen=True)
class HistoryContext:
    """Assembled history window.

    ``mask[i]`` is True when slot ``i`` was zero-filled; ``sources[i]`` is the
    global frame index copied into slot ``i`` (-1 for zero-filled slots).
    """

    frames: np.ndarray
    anchor_present: bool
    mask: np.ndarray
    sources: np.ndarray = field(default=None)

    def __post_init__(self):
        check_latent(self.frames)
        if self.sources is None:
            object.__setattr__(self, "sources", np.where(self.mask, -1, 0).astype(np.int64))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[2]


def build_history(
    frames: Optional[np.ndarray],
    first_frame: Optional[np.ndarray],
    plan: MemoryPlan,
    *,
    start_index: int = 0,
    batch: int = 1,
    channels: int = 4,
) -> HistoryContext:
    """Assemble the three-term history from the most recent frames.

    Args:
        frames: recent frames ``(B, C, n, H, W)``; only the newest ``plan.window``
            are used. ``None`` or ``n == 0`` means no generated frames yet.
        first_frame: the global first frame ``(B, C, 1, H, W)`` or ``None``.
        start_index: global index of ``frames[:, :, 0]``.
    """
    window = plan.window
    if frames is not None and check_latent(frames).shape[2] > 0:
        b, c = frames.shape[:2]
        dtype = frames.dtype
    elif first_frame is not None:
        b, c = check_latent(first_frame).shape[:2]
        dtype = first_frame.dtype
    else:
        b, c, dtype = batch, channels, np.float32
    out = np.zeros((b, c, window, plan.height, plan.width), dtype=dtype)
    sources = np.full(window, -1, dtype=np.int64)

    n = 0 if frames is None else frames.shape[2]
    if n:
        if frames.shape[3:] != (plan.height, plan.width):
            raise DimensionError(f"frame grid {frames.shape[3:]} does not match plan")
        keep = min(n, window)
        # Newest frames land in the last slots: short term first, zero padding at the oldest end.
        out[:, :, window - keep:] = frames[:, :, n - keep:]
        sources[window - keep:] = np.arange(start_index + n - keep, start_index + n)

    total = start_index + n
    anchor = first_frame is not None and total > window
    if anchor:
        out[:, :, 0] = first_frame[:, :, 0]
        sources[0] = 0
    return HistoryContext(frames=out, anchor_present=anchor, mask=sources < 0, sources=sources)


class RollingHistory:
    """Bounded buffer of the newest frames plus the global first frame.

    Memory stays at ``plan.window + 1`` frames however long the video gets.
    """

    def __init__(self, plan: MemoryPlan, first_frame: Optional[np.ndarray] = None,
                 batch: int = 1, channels: int = 4):
        self.plan = plan
        self.batch = batch
        self.channels = channels
        self.first_frame = first_frame
        self.total = 0
        self._buf: deque = deque(maxlen=plan.window)
        if first_frame is not None:
            self.push(first_frame)

    def push(self, section: np.ndarray) -> None:
        section = check_latent(section)
        if self.first_frame is None and section.shape[2]:
            self.first_frame = section[:, :, :1].copy()
        for i in range(section.shape[2]):
            self._buf.append(section[:, :, i])
        self.total += section.shape[2]

    def context(self) -> HistoryContext:
        frames = np.stack(list(self._buf), axis=2) if self._buf else None
        start = self.total - len(self._buf)
        return build_history(frames, self.first_frame, self.plan, start_index=start,
                             batch=self.batch, channels=self.channels)


def task_mode(history: HistoryContext) -> TaskMode:
    nonzero = np.any(history.frames != 0, axis=(0, 1, 3, 4))
    if not nonzero.any():
        return TaskMode.T2V
    if nonzero[-1] and not nonzero[:-1].any():
        return TaskMode.I2V
    return TaskMode.V2V


DEFAULT_MODE_PROBS = (0.3, 0.3, 0.4)


def zero_out_history(
    history: HistoryContext,
    mode_probs: Sequence[float] = DEFAULT_MODE_PROBS,
    rng: Optional[np.random.Generator] = None,
) -> tuple[HistoryContext, TaskMode]:
    """Sample a task mode (T2V, I2V, V2V) and zero the history accordingly."""
    p = np.asarray(mode_probs, dtype=np.float64)
    if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"mode probabilities must be 3 non-negative values summing to 1, got {mode_probs}")
    mode = list(TaskMode)[int(rng.choice(3, p=p))]
    if mode is TaskMode.V2V:
        return history, mode
    frames = np.zeros_like(history.frames)
    sources = np.full_like(history.sources, -1)
    if mode is TaskMode.I2V:
        frames[:, :, -1] = history.frames[:, :, -1]
        sources[-1] = history.sources[-1]
    return HistoryContext(frames, False, sources < 0, sources), mode


def rope_indices(plan: MemoryPlan, t_noisy: int, temporal: str = "post") -> tuple[np.ndarray, np.ndarray]:
    """Temporal RoPE positions for history and noisy context.

    History occupies ``0 .. T_hist - 1`` and the noisy frames ``T_hist .. T_hist + t_noisy - 1``
    regardless of how many sections have been generated. ``temporal`` selects
    whether ``T_hist`` counts patchified slots (``"post"``) or raw frames (``"pre"``).
    """
    if temporal == "post":
        t_hist = plan.hist_temporal_positions
    elif temporal == "pre":
        t_hist = plan.window
    else:
        raise ValueError(f"temporal must be 'post' or 'pre', got {temporal!r}")
    return np.arange(t_hist), np.arange(t_hist, t_hist + t_noisy)


def interpolate_prompts(e1: np.ndarray, e2: np.ndarray, m: int) -> list[np.ndarray]:
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise DimensionError(f"prompt shapes differ: {e1.shape} vs {e2.shape}")
    if m < 2:
        raise ValueError("need at least two interpolation points")
    out = []
    for j in range(m):
        lam = j / (m - 1)
        out.append((1.0 - lam) * e1 + lam * e2)
    out[0], out[-1] = e1.copy(), e2.copy()
    return out


def with_frames(history: HistoryContext, frames: np.ndarray) -> HistoryContext:
    return replace(history, frames=frames)
