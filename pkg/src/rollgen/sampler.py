"""Coarse-to-fine sampling: per-stage multistep integration, stage transitions,
classifier-free guidance and the analytical token/FLOP cost model.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Optional

import numpy as np

from .context import MemoryPlan, token_budget
from .flow import StageSchedule, stage_lambdas
from .latent import make_rng, upsample_nearest

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


@dataclass
class SamplerState:
    """Integration state for one generation stream.

    ``buffer`` holds ``(lambda, u)`` pairs from the current stage only; it is
    emptied at every stage transition because predictions change shape.
    """

    x: np.ndarray
    stage: int = 1
    step: int = 0
    buffer: list = field(default_factory=list)
    capacity: int = 1


def pc_step(state: SamplerState, u_eval: VelocityFn, t_prev: float, t_next: float,
            trace: Optional[list] = None) -> SamplerState:
    """Advance from ``t_prev`` to ``t_next`` (stage-local lambda, decreasing).

    The first step of a stage is a plain Euler update. Later steps extrapolate
    the velocity linearly from the buffered prediction to the interval midpoint
    (variable-step second-order multistep).
    """
    if not (0.0 <= t_next < t_prev <= 1.0):
        raise ValueError(f"need 0 <= t_next < t_prev <= 1 inside the stage, got {t_prev} -> {t_next}")
    u = np.asarray(u_eval(state.x, t_prev), dtype=np.float64)
    h = t_next - t_prev
    if state.buffer:
        lam_old, u_old, stage_old = state.buffer[-1]
        if stage_old != state.stage:
            raise RuntimeError("prediction buffer holds an entry from another stage")
        u_use = u + (u - u_old) * (0.5 * h) / (t_prev - lam_old)
    else:
        u_use = u
    if trace is not None:
        trace.append(dict(stage=state.stage, lam=t_prev,
                          buffer_stages=[e[2] for e in state.buffer]))
    buf = (state.buffer + [(t_prev, u, state.stage)])[-state.capacity:] if state.capacity else []
    return replace(state, x=state.x + u_use * h, step=state.step + 1, buffer=buf)


def renoise_gamma(var_up: float, var_target: float) -> float:
    """Noise scale that lifts per-element variance from ``var_up`` to ``var_target``."""
    return float(np.sqrt(max(0.0, var_target - var_up)))


def stage_transition(state: SamplerState, next_stage: int, rng: Optional[np.random.Generator],
                     gamma: float = 0.0) -> SamplerState:
    x = upsample_nearest(state.x, 2).astype(np.float64)
    if gamma > 0.0:
        x = x + gamma * rng.standard_normal(x.shape)
    return SamplerState(x=x, stage=next_stage, step=state.step, buffer=[], capacity=state.capacity)


def cfg_combine(u_cond, u_uncond, scale: float):
    return u_uncond + scale * (np.asarray(u_cond) - u_uncond)


def guided(model, history, text, cfg_scale: float, null_text=None):
    """Bind history and prompt into a ``(x, lam, stage) -> u`` callable with optional CFG."""

    def fn(x, lam, stage):
        u_cond = model(x, history, text, lam, stage)
        if cfg_scale == 1.0:
            return u_cond
        u_unc = model(x, history, null_text, lam, stage)
        return cfg_combine(u_cond, u_unc, cfg_scale)

    return fn


def run_stages(velocity, x_start: np.ndarray, schedule: StageSchedule, *,
               rng: Optional[np.random.Generator] = None, renoise: float = 0.0,
               order: int = 2, trace: Optional[list] = None,
               record: Optional[list] = None) -> np.ndarray:
    """Integrate all stages from ``x_start`` at the coarsest resolution.

    ``velocity(x, lam, stage)``; ``record`` collects each stage's terminal state.
    """
    state = SamplerState(x=np.asarray(x_start, dtype=np.float64), stage=1,
                         capacity=max(0, order - 1))
    for k in range(1, schedule.stages + 1):
        if k > 1:
            state = stage_transition(state, k, rng, renoise)
        lams = stage_lambdas(schedule, k)
        fn = lambda x, lam, _k=k: velocity(x, lam, _k)
        for t_prev, t_next in zip(lams[:-1], lams[1:]):
            state = pc_step(state, fn, float(t_prev), float(t_next), trace)
        if record is not None:
            record.append(state.x.copy())
    return state.x


def initial_noise(schedule: StageSchedule, batch: int, channels: int, t_noisy: int, seed: int):
    h, w = schedule.resolution(1)
    return make_rng(seed).standard_normal((batch, channels, t_noisy, h, w))


def sample_section(model, history, text, schedule: StageSchedule, seed: int, cfg_scale: float = 1.0,
                   *, batch: int = 1, channels: int = 4, t_noisy: int = 3, renoise: float = 0.0,
                   null_text=None, trace: Optional[list] = None, record: Optional[list] = None):
    """Generate one full-resolution section from seeded low-resolution noise.

    ``model(x, history, text, lam, stage)`` returns a velocity; ``null_text``
    (default: no prompt) feeds the unconditional branch when ``cfg_scale != 1``.
    """
    rng = make_rng(seed)
    h, w = schedule.resolution(1)
    z = rng.standard_normal((batch, channels, t_noisy, h, w))
    fn = guided(model, history, text, cfg_scale, null_text)
    out = run_stages(fn, z, schedule, rng=rng, renoise=renoise, trace=trace, record=record)
    return out.astype(np.float32)


# -- cost model --------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    layers: int = 40
    hidden: int = 5120
    batch: int = 1
    alpha: Fraction = Fraction(1)
    beta: Fraction = Fraction(1)
    gamma: Fraction = Fraction(1)

    def __post_init__(self):
        if min(self.layers, self.hidden, self.batch) <= 0 or min(self.alpha, self.beta, self.gamma) <= 0:
            raise ValueError("cost model coefficients must be positive")

    def flops(self, tokens) -> Fraction:
        l = Fraction(tokens)
        b, d = self.batch, self.hidden
        return self.layers * (Fraction(self.alpha) * b * l * d * d + Fraction(self.beta) * b * l * l * d)

    def attention_flops(self, tokens) -> Fraction:
        l = Fraction(tokens)
        return self.layers * Fraction(self.beta) * self.batch * l * l * self.hidden

    def activation_memory(self, tokens) -> Fraction:
        return Fraction(self.gamma) * self.layers * self.batch * Fraction(tokens) * self.hidden


BASELINE_KERNEL = (1, 2, 2)


def pyramid_noisy_tokens(height: int, width: int, stages: int, steps: int) -> Fraction:
    per_pass = sum(Fraction(height * width, 4 ** k) for k in range(stages))
    return per_pass * Fraction(steps, stages)


def cost_report(schedule: StageSchedule, plan: MemoryPlan, cm: CostModel, steps: Optional[int] = None) -> dict:
    """Exact token counts and FLOP ratios for history compression and pyramid sampling."""
    n = schedule.total_steps if steps is None else steps
    hw = plan.height * plan.width
    *_, hist = token_budget(plan)
    pt, ph, pw = BASELINE_KERNEL
    hist_base = Fraction(plan.window * hw, pt * ph * pw)
    noisy = pyramid_noisy_tokens(plan.height, plan.width, schedule.stages, n)
    noisy_base = Fraction(n * hw)
    return {
        "history_tokens": hist,
        "history_tokens_baseline": hist_base,
        "history_token_ratio": hist_base / hist,
        "history_attention_ratio": cm.attention_flops(hist_base) / cm.attention_flops(hist),
        "history_activation_ratio": cm.activation_memory(hist_base) / cm.activation_memory(hist),
        "noisy_tokens": noisy,
        "noisy_tokens_baseline": noisy_base,
        "noisy_token_factor": noisy / noisy_base,
        "noisy_token_ratio": noisy_base / noisy,
        "noisy_attention_ratio": (noisy_base / noisy) ** 2,
        "history_flops": cm.flops(hist),
        "history_flops_baseline": cm.flops(hist_base),
    }
