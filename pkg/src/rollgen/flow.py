"""Multi-scale flow matching: stage schedules, interpolation paths, velocity targets and loss.

Within stage ``k`` the path runs from the clean level ``x^k`` (lambda = 0) to the
upsampled coarser level ``Up(x^{k-1})`` (lambda = 1); stage 1 starts from noise.
The learned field targets ``Up(x^{k-1}) - x^k`` so that ``x_t - lambda * u``
recovers ``x^k`` exactly and integrating from lambda = 1 down to 0 lands on it.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .latent import DimensionError, check_latent, downsample_area, upsample_nearest


@dataclass(frozen=True)
class StageSchedule:
    """Pyramid layout: ``stages`` levels, each halving the resolution of the next.

    ``boundaries`` are the timesteps ``T_0 = 1000 > T_1 > ... > T_K = 0``;
    stage ``k`` (1-based) owns ``[T_k, T_{k-1}]``.
    """

    stages: int = 3
    steps: tuple[int, ...] = (17, 17, 16)
    boundaries: Optional[tuple[float, ...]] = None
    shift: float = 1.0
    height: int = 8
    width: int = 8

    def __post_init__(self):
        k = self.stages
        if k < 1:
            raise ValueError("need at least one stage")
        steps = tuple(int(n) for n in self.steps)
        if len(steps) != k or min(steps) < 1:
            raise ValueError(f"steps must list {k} positive counts, got {self.steps}")
        object.__setattr__(self, "steps", steps)
        if self.boundaries is None:
            object.__setattr__(self, "boundaries", tuple(1000.0 * (k - i) / k for i in range(k + 1)))
        b = tuple(float(t) for t in self.boundaries)
        if len(b) != k + 1 or b[0] != 1000.0 or b[-1] != 0.0:
            raise ValueError(f"boundaries must run from 1000 to 0 with {k + 1} entries, got {b}")
        if any(b[i] <= b[i + 1] for i in range(k)):
            raise ValueError(f"boundaries must be strictly decreasing, got {b}")
        object.__setattr__(self, "boundaries", b)
        if self.shift <= 0:
            raise ValueError("shift must be positive")
        f = 2 ** (k - 1)
        if self.height % f or self.width % f:
            raise DimensionError(f"grid {(self.height, self.width)} not divisible by {f}")

    @property
    def total_steps(self) -> int:
        return sum(self.steps)

    def resolution(self, stage: int) -> tuple[int, int]:
        f = 2 ** (self.stages - stage)
        return self.height // f, self.width // f

    def with_steps(self, steps: Sequence[int]) -> "StageSchedule":
        return StageSchedule(self.stages, tuple(steps), self.boundaries, self.shift, self.height, self.width)


def shift_lambda(lam_hat, s: float):
    """Rational time warp ``s*l / (1 + (s-1)*l)``; identity for ``s = 1``."""
    lam_hat = np.asarray(lam_hat, dtype=np.float64)
    # same map, arranged so that 0 and 1 are fixed exactly in floating point
    num = s * lam_hat
    return num / (num + (1.0 - lam_hat))


def token_shift(n_tokens: int, base_tokens: int = 48, base_shift: float = 1.0) -> float:
    """Shift that grows with the square root of the token count relative to a base size."""
    return base_shift * float(np.sqrt(n_tokens / base_tokens))


def lambda_of_timestep(t: float, stage: int, schedule: StageSchedule) -> float:
    hi = schedule.boundaries[stage - 1]
    lo = schedule.boundaries[stage]
    if not lo <= t <= hi:
        raise ValueError(f"timestep {t} outside stage {stage} interval [{lo}, {hi}]")
    return float(shift_lambda((t - lo) / (hi - lo), schedule.shift))


def stage_timesteps(schedule: StageSchedule, stage: int) -> np.ndarray:
    hi = schedule.boundaries[stage - 1]
    lo = schedule.boundaries[stage]
    return np.linspace(hi, lo, schedule.steps[stage - 1] + 1)


def stage_lambdas(schedule: StageSchedule, stage: int) -> np.ndarray:
    """Decreasing lambda grid ``1 = l_0 > ... > l_N = 0`` for one stage."""
    ts = stage_timesteps(schedule, stage)
    lams = np.array([lambda_of_timestep(t, stage, schedule) for t in ts])
    lams[0], lams[-1] = 1.0, 0.0
    return lams


def make_pyramid(x0: np.ndarray, stages: int) -> list[np.ndarray]:
    """``[x^1, ..., x^K]`` from coarse to fine, ``x^K = x0``."""
    x0 = check_latent(x0)
    f = 2 ** (stages - 1)
    if x0.shape[3] % f or x0.shape[4] % f:
        raise DimensionError(f"spatial dims {x0.shape[3:]} not divisible by {f}")
    levels = [x0]
    for _ in range(stages - 1):
        levels.append(downsample_area(levels[-1], 2))
    return levels[::-1]


def _lam(lam, x):
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1:
        lam = lam.reshape((-1,) + (1,) * (x.ndim - 1))
    return lam


def sample_path_point(x_k, x_km1_up, lam):
    if np.shape(x_k) != np.shape(x_km1_up):
        raise DimensionError("path endpoints differ in shape")
    lam = _lam(lam, np.asarray(x_k))
    return (1.0 - lam) * x_k + lam * x_km1_up


def target_velocity(x_k, x_km1_up):
    if np.shape(x_k) != np.shape(x_km1_up):
        raise DimensionError("path endpoints differ in shape")
    return np.asarray(x_km1_up, dtype=np.float64) - x_k


def recover_clean(x_t, lam, u):
    """``x_t - lambda * u``: the clean endpoint implied by a velocity prediction."""
    return x_t - _lam(lam, np.asarray(x_t)) * u


def flow_loss(u_pred, v_star) -> float:
    diff = np.asarray(u_pred, dtype=np.float64) - np.asarray(v_star, dtype=np.float64)
    return float(np.mean(diff * diff))


def flow_loss_grad(u_pred, v_star) -> np.ndarray:
    diff = np.asarray(u_pred, dtype=np.float64) - np.asarray(v_star, dtype=np.float64)
    return 2.0 * diff / diff.size


@dataclass
class PathSample:
    stage: int
    lam: np.ndarray
    x_t: np.ndarray
    v_star: np.ndarray
    levels: list = field(repr=False, default_factory=list)


def sample_training_point(x0, schedule: StageSchedule, rng: np.random.Generator,
                          stage: Optional[int] = None) -> PathSample:
    """Draw a stage uniformly, a per-sample lambda, and the matching path point and target."""
    x0 = check_latent(x0).astype(np.float64)
    k = int(rng.integers(1, schedule.stages + 1)) if stage is None else stage
    levels = make_pyramid(x0, schedule.stages)
    x_k = levels[k - 1]
    if k == 1:
        start = rng.standard_normal(x_k.shape)
    else:
        start = upsample_nearest(levels[k - 2], 2)
    lam = shift_lambda(rng.uniform(0.0, 1.0, size=x0.shape[0]), schedule.shift)
    return PathSample(k, lam, sample_path_point(x_k, start, lam), target_velocity(x_k, start), levels)
