"""History corruption for robust training and the streaming drift detector used at inference."""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .context import HistoryContext
from .latent import SectionStats, resize_area, resize_nearest

BRANCHES = ("noise", "downup", "exposure", "clean")


@dataclass(frozen=True)
class CorruptionPolicy:
    """Per-frame branch probabilities and the parameter range of each branch.

    ``p_noise`` adds ``b * eps`` with ``b ~ U[noise_range]``; ``p_downup`` shrinks the
    grid by fraction ``c ~ U[downup_range]`` and scales back; ``p_exposure`` multiplies
    by ``a ~ U[exposure_range]``; ``p_clean`` leaves the frame untouched.
    """

    p_noise: float = 0.0
    p_downup: float = 0.0
    p_exposure: float = 0.0
    p_clean: float = 1.0
    exposure_range: tuple[float, float] = (0.3, 1.7)
    noise_range: tuple[float, float] = (0.0, 0.1)
    downup_range: tuple[float, float] = (0.0, 0.1)

    def __post_init__(self):
        p = self.probs
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"branch probabilities must be non-negative and sum to 1, got {tuple(p)}")
        for name in ("exposure_range", "noise_range", "downup_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be ordered, got {(lo, hi)}")
        if self.noise_range[0] < 0 or not 0 <= self.downup_range[0] <= self.downup_range[1] < 1:
            raise ValueError("noise levels must be >= 0 and shrink fractions in [0, 1)")

    @property
    def probs(self) -> np.ndarray:
        return np.array([self.p_noise, self.p_downup, self.p_exposure, self.p_clean])


def stage1_policy() -> CorruptionPolicy:
    return CorruptionPolicy(p_noise=0.0, p_downup=0.8, p_exposure=0.1, p_clean=0.1,
                            exposure_range=(0.3, 1.7), noise_range=(0.0, 0.33), downup_range=(0.0, 0.1))


def stage3_policy() -> CorruptionPolicy:
    return CorruptionPolicy(p_noise=0.4, p_downup=0.4, p_exposure=0.0, p_clean=0.2,
                            exposure_range=(0.3, 1.7), noise_range=(0.0, 0.33), downup_range=(0.0, 0.1))


def _downup(frame: np.ndarray, c: float) -> np.ndarray:
    h, w = frame.shape[-2:]
    nh, nw = max(1, int(round(h * (1.0 - c)))), max(1, int(round(w * (1.0 - c))))
    if (nh, nw) == (h, w):
        return frame
    small = resize_area(frame[:, :, None], nh, nw)
    return resize_nearest(small, h, w)[:, :, 0]


def corrupt_frames(frames: np.ndarray, policy: CorruptionPolicy, rng: np.random.Generator,
                   eligible: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt eligible temporal slots of ``frames`` (B, C, T, H, W) independently.

    Returns the new frames and the chosen branch index per slot (-1 where exempt).
    """
    out = frames.copy()
    choice = np.full(frames.shape[2], -1, dtype=np.int64)
    p = policy.probs
    for i in np.flatnonzero(eligible):
        br = int(rng.choice(4, p=p))
        choice[i] = br
        f = frames[:, :, i]
        if br == 0:
            b = rng.uniform(*policy.noise_range)
            out[:, :, i] = f + b * rng.standard_normal(f.shape)
        elif br == 1:
            out[:, :, i] = _downup(f, rng.uniform(*policy.downup_range))
        elif br == 2:
            out[:, :, i] = f * rng.uniform(*policy.exposure_range)
    return out, choice


def _eligible(history: HistoryContext) -> np.ndarray:
    elig = ~np.asarray(history.mask, dtype=bool)
    if history.anchor_present:
        elig[0] = False
    return elig


def corrupt_history(history: HistoryContext, policy: CorruptionPolicy,
                    rng: np.random.Generator) -> HistoryContext:
    """Independent per-frame corruption; the anchor slot and zero-filled slots are left alone."""
    frames, _ = corrupt_frames(history.frames, policy, rng, _eligible(history))
    return replace(history, frames=frames.astype(history.frames.dtype))


@dataclass(frozen=True)
class DriftTracker:
    """EMA of per-channel section mean and variance."""

    rho_mean: float = 0.9
    rho_var: float = 0.9
    delta_mean: float = 0.1
    delta_var: float = 0.1
    mean: Optional[np.ndarray] = None
    var: Optional[np.ndarray] = None
    count: int = 0

    def __post_init__(self):
        if not (0 < self.rho_mean < 1 and 0 < self.rho_var < 1):
            raise ValueError("smoothing factors must lie in (0, 1)")
        if self.delta_mean <= 0 or self.delta_var <= 0:
            raise ValueError("thresholds must be positive")


def update_tracker(tracker: DriftTracker, stats: SectionStats) -> DriftTracker:
    mu = np.asarray(stats.mean, dtype=np.float64)
    var = np.asarray(stats.variance, dtype=np.float64)
    if tracker.count == 0:
        return replace(tracker, mean=mu.copy(), var=var.copy(), count=1)
    return replace(
        tracker,
        mean=tracker.rho_mean * tracker.mean + (1.0 - tracker.rho_mean) * mu,
        var=tracker.rho_var * tracker.var + (1.0 - tracker.rho_var) * var,
        count=tracker.count + 1,
    )


def drift_triggered(tracker: DriftTracker, stats: SectionStats) -> bool:
    """Both the mean and the variance must stray beyond their thresholds.

    Call with the tracker already updated by ``stats`` (update-then-compare);
    passing the pre-update tracker gives the compare-then-update variant.
    """
    if tracker.count == 0:
        return False
    dm = np.linalg.norm(np.asarray(stats.mean, dtype=np.float64) - tracker.mean)
    dv = np.linalg.norm(np.asarray(stats.variance, dtype=np.float64) - tracker.var)
    return bool(dm > tracker.delta_mean and dv > tracker.delta_var)


def observe(tracker: DriftTracker, stats: SectionStats, compare_first: bool = False):
    """One detector step; returns ``(new_tracker, flag)``."""
    if compare_first:
        flag = drift_triggered(tracker, stats)
        return update_tracker(tracker, stats), flag
    new = update_tracker(tracker, stats)
    return new, drift_triggered(new, stats)


def adaptive_corrupt(history: HistoryContext, flag: bool, policy: CorruptionPolicy,
                     rng: np.random.Generator, section_frames) -> HistoryContext:
    """Corrupt only the history slots whose source frame belongs to the flagged section.

    ``section_frames`` is the set (or range) of global frame indices of that section.
    """
    if not flag:
        return history
    targets = np.isin(history.sources, np.asarray(list(section_frames), dtype=np.int64))
    elig = targets & _eligible(history)
    frames, _ = corrupt_frames(history.frames, policy, rng, elig)
    return replace(history, frames=frames.astype(history.frames.dtype))
