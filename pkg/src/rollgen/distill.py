"""Few-step distillation of a pyramid teacher into a student that takes one step per stage.

Pieces: teacher-forced sample assembly, staged backward simulation with a replayable
tape, dynamic re-noise levels, the distribution-matching signal, patch-level GAN heads
with an approximate R1 penalty, the fake/generator alternation, ODE-pair initialization,
and a small end-to-end loop that ties them together.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .context import HistoryContext, MemoryPlan, build_history
from .drift import CorruptionPolicy, corrupt_history
from .flow import StageSchedule, stage_lambdas
from .latent import DimensionError, check_latent, downsample_area, make_rng, upsample_nearest, write_latent
from .nn import layers as L
from .nn.dit import DitConfig, ToyDiT
from .optim import AdamW, ema_update
from .sampler import guided, run_stages
from .synth import Dataset, prompt_embedding

__all__ = [
    "DistillConfig", "GanHeads", "TTUR", "assemble_teacher_forced_sample", "staged_backward_simulation",
    "SimTape", "dynamic_renoise", "renoise_concentration", "dmd_generator_grad", "gan_losses",
    "ttur_step", "generate_ode_pairs", "save_ode_pairs", "ema_update", "reward_weighted_dmd",
    "Distiller",
]


@dataclass(frozen=True)
class DistillConfig:
    cfg_weight: float = 3.0
    lambda_d: float = 100.0
    sigma_d: float = 0.1
    w_g: float = 5e-2
    w_d: float = 1e-2
    ttur_ratio: int = 5
    beta_a0: float = 3.0
    beta_steps: int = 500
    ema_decay: float = 0.99
    ema_start: int = 0
    gan_taps: tuple[int, ...] = (0, 1)
    head_dim: int = 16
    gan_start: int = 0
    crop_frac: float = 0.5
    multiscale_scoring: bool = False

    def __post_init__(self):
        pos = (self.cfg_weight, self.lambda_d, self.w_g, self.w_d, self.beta_a0, self.beta_steps,
               self.head_dim, self.crop_frac)
        if min(pos) <= 0 or self.sigma_d < 0:
            raise ValueError("distillation weights, scales and counts must be positive")
        if self.ttur_ratio < 1:
            raise ValueError("TTUR ratio must be >= 1")
        if not 0 < self.ema_decay < 1 or not 0 < self.crop_frac <= 1:
            raise ValueError("EMA decay must lie in (0, 1) and crop fraction in (0, 1]")
        if len(set(self.gan_taps)) != len(self.gan_taps):
            raise ValueError("GAN taps must sit at distinct layers")


# -- data --------------------------------------------------------------------------

def assemble_teacher_forced_sample(clip: np.ndarray, plan: MemoryPlan, policy: Optional[CorruptionPolicy],
                                   rng: np.random.Generator, t_noisy: int = 3):
    """Ground-truth history and the single target section that follows it.

    The section start is drawn from ``[min(window, T - t_noisy), T - t_noisy]`` so every
    sample needs exactly one generated section.
    """
    clip = check_latent(clip)
    t = clip.shape[2]
    if t < t_noisy + 1:
        raise DimensionError(f"clip of {t} frames is too short for a {t_noisy}-frame section with history")
    hi = t - t_noisy
    lo = min(plan.window, hi)
    s = int(rng.integers(lo, hi + 1))
    hist = build_history(clip[:, :, :s], clip[:, :, :1], plan)
    if policy is not None:
        hist = corrupt_history(hist, policy, rng)
    return hist, clip[:, :, s:s + t_noisy]


def stack_histories(hs: Sequence[HistoryContext]) -> np.ndarray:
    return np.concatenate([h.frames for h in hs], axis=0).astype(np.float64)


# -- staged backward simulation ----------------------------------------------------

@dataclass
class SimTape:
    """Recorded student calls: (stage, lam, lam_next, forward cache) in execution order."""

    entries: list = field(default_factory=list)
    stage_outputs: list = field(default_factory=list)
    calls: int = 0


def staged_backward_simulation(student: ToyDiT, z: np.ndarray, schedule: StageSchedule, history=None,
                               text=None, steps_per_stage: Optional[Sequence[int]] = None):
    """Unroll the student from low-resolution noise, estimating the clean level at every step.

    Each step predicts ``x0 = x - lam * u`` and re-embeds it on the stage's line toward
    its starting point at the next lambda. Returns ``(per-stage x0 list, tape)``.
    """
    sched = schedule if steps_per_stage is None else schedule.with_steps(steps_per_stage)
    tape = SimTape()
    start = np.asarray(z, dtype=np.float64)
    x0 = start
    for k in range(1, sched.stages + 1):
        if k > 1:
            start = upsample_nearest(x0, 2)
        lams = stage_lambdas(sched, k)
        x = start
        for n in range(len(lams) - 1):
            lam, lam_next = float(lams[n]), float(lams[n + 1])
            u, cache, _ = student.forward(x, history, text, lam, k)
            tape.calls += 1
            x0 = x - lam * u
            tape.entries.append((k, lam, lam_next, cache))
            x = (1.0 - lam_next) * x0 + lam_next * start
        tape.stage_outputs.append(x0)
    return list(tape.stage_outputs), tape


def simulation_backward(student: ToyDiT, tape: SimTape, g_out: np.ndarray):
    """Back-propagate dL/d(final x0) through every recorded student call.

    Returns ``(param_grads, d_z)``.
    """
    grads = {k: np.zeros_like(v) for k, v in student.params.items()}
    entries = list(tape.entries)
    stages = sorted({e[0] for e in entries}, reverse=True)
    g_stage_out = np.asarray(g_out, dtype=np.float64)
    g_start = None
    for k in stages:
        g_x = g_stage_out
        g_start = np.zeros_like(g_x)
        for (kk, lam, lam_next, cache) in reversed([e for e in entries if e[0] == k]):
            g_x0 = (1.0 - lam_next) * g_x
            g_start += lam_next * g_x
            pg, g_in = student.backward(-lam * g_x0, cache)
            for name, g in pg.items():
                grads[name] += g
            g_x = g_x0 + g_in
        g_start += g_x
        # Adjoint of nearest-neighbour upsampling: sum over each 2x2 block.
        g_stage_out = downsample_area(g_start, 2) * 4.0 if k > 1 else None
    return grads, g_start


# -- re-noise and DMD ----------------------------------------------------------------

def renoise_concentration(step: int, cfg: DistillConfig) -> float:
    frac = min(step / cfg.beta_steps, 1.0)
    return 1.0 + (cfg.beta_a0 - 1.0) * (1.0 + np.cos(np.pi * frac)) / 2.0


def dynamic_renoise(step: int, cfg: DistillConfig, rng: np.random.Generator, size=None):
    """Noise level ``tau ~ Beta(a(step), 1)``; ``a`` decays from ``a0`` to 1 on a cosine."""
    if step < 0:
        raise ValueError("step must be >= 0")
    return rng.beta(renoise_concentration(step, cfg), 1.0, size=size)


def _tau(tau, x):
    tau = np.asarray(tau, dtype=np.float64)
    return tau.reshape((-1,) + (1,) * (x.ndim - 1)) if tau.ndim == 1 else tau


def dmd_generator_grad(x0, real_score_fn: Callable, fake_score_fn: Callable, cfg_w: float, tau,
                       rng: np.random.Generator, eps=None):
    """Distribution-matching signal on ``x0``.

    The score functions take ``(x_tau, tau, conditional: bool)`` and return clean-sample
    estimates; score differences are proportional to differences of these estimates.
    Returns ``(normalized, unnormalized)``; both are constants w.r.t. the estimators.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = _tau(tau, x0)
    x_tau = (1.0 - t) * x0 + t * eps
    real = real_score_fn(x_tau, tau, True)
    if cfg_w != 1.0:
        real_u = real_score_fn(x_tau, tau, False)
        real = real_u + cfg_w * (np.asarray(real) - real_u)
    fake = fake_score_fn(x_tau, tau, True)
    raw = np.asarray(fake, dtype=np.float64) - real
    axes = tuple(range(1, x0.ndim))
    norm = np.mean(np.abs(x0 - real), axis=axes, keepdims=True)
    return raw / np.maximum(norm, 1e-12), raw


def reward_weighted_dmd(dmd_loss, reward, beta: float):
    if beta <= 0:
        raise ValueError("beta must be positive")
    return dmd_loss * np.exp(np.asarray(reward, dtype=np.float64) / beta)


# -- adversarial heads ---------------------------------------------------------------

class GanHeads:
    """One two-layer perceptron per tapped block, mapping each patch token to a logit."""

    def __init__(self, taps: Sequence[int], d_model: int, head_dim: int, seed: int = 0):
        rng = make_rng(seed)
        self.taps = tuple(taps)
        self.params = {}
        for t in self.taps:
            self.params[f"{t}.w1"] = rng.standard_normal((d_model, head_dim)) / np.sqrt(d_model)
            self.params[f"{t}.b1"] = np.zeros(head_dim)
            self.params[f"{t}.w2"] = rng.standard_normal((head_dim, 1)) / np.sqrt(head_dim)
            self.params[f"{t}.b2"] = np.zeros(1)

    def forward(self, acts: dict):
        logits, caches = {}, {}
        for t in self.taps:
            a = acts[t]
            h = a @ self.params[f"{t}.w1"] + self.params[f"{t}.b1"]
            s = L.silu(h)
            logits[t] = (s @ self.params[f"{t}.w2"] + self.params[f"{t}.b2"])[..., 0]
            caches[t] = (a, h, s)
        return logits, caches

    def backward(self, g_logits: dict, caches: dict):
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        g_acts = {}
        for t in self.taps:
            a, h, s = caches[t]
            g = g_logits[t][..., None]
            gs, grads[f"{t}.w2"], grads[f"{t}.b2"] = L.linear_backward(g, s, self.params[f"{t}.w2"])
            gh = L.silu_backward(gs, h)
            g_acts[t], grads[f"{t}.w1"], grads[f"{t}.b1"] = L.linear_backward(gh, a, self.params[f"{t}.w1"])
        return grads, g_acts


def crop_mask(n_tokens_grid: tuple[int, int, int], frac: float, rng: np.random.Generator) -> np.ndarray:
    """Boolean token mask selecting a random spatial window of ``frac`` of each side, all frames."""
    tt, hh, ww = n_tokens_grid
    ch, cw = max(1, int(round(hh * frac))), max(1, int(round(ww * frac)))
    y, x = int(rng.integers(0, hh - ch + 1)), int(rng.integers(0, ww - cw + 1))
    m = np.zeros((tt, hh, ww), dtype=bool)
    m[:, y:y + ch, x:x + cw] = True
    return m.reshape(-1)


@dataclass
class GanTerms:
    loss_d: float
    loss_g: float
    r1: float
    g_real: dict = field(default_factory=dict)
    g_real_pert: dict = field(default_factory=dict)
    g_fake_d: dict = field(default_factory=dict)
    g_fake_g: dict = field(default_factory=dict)


def gan_losses(logits_real: dict, logits_real_pert: dict, logits_fake: dict, mask: np.ndarray,
               cfg: DistillConfig) -> GanTerms:
    """Non-saturating pair on patch logits plus the perturbation-consistency penalty.

    ``L_D = softplus(-D(real)) + softplus(D(fake)) + lambda_D * (D(real) - D(real + sigma eps))^2``
    and ``L_G = softplus(-D(fake))``, each averaged over cropped tokens and taps. Gradients
    are w.r.t. the logits; the fake input is treated as detached inside ``L_D``.
    """
    taps = list(logits_real)
    n = len(taps)
    out = GanTerms(0.0, 0.0, 0.0)
    for t in taps:
        lr, lp, lf = logits_real[t], logits_real_pert[t], logits_fake[t]
        if lr.shape != lf.shape or lr.shape != lp.shape:
            raise DimensionError("real and fake logits differ in shape")
        m = np.broadcast_to(mask, lr.shape).astype(np.float64)
        cnt = m.sum() * n
        diff = lr - lp
        out.loss_d += float(np.sum(m * (L.softplus(-lr) + L.softplus(lf))) / cnt)
        r1 = float(np.sum(m * diff * diff) / cnt)
        out.r1 += r1
        out.loss_d += cfg.lambda_d * r1
        out.loss_g += float(np.sum(m * L.softplus(-lf)) / cnt)
        out.g_real[t] = m * (-L.sigmoid(-lr) + 2.0 * cfg.lambda_d * diff) / cnt
        out.g_real_pert[t] = m * (-2.0 * cfg.lambda_d * diff) / cnt
        out.g_fake_d[t] = m * L.sigmoid(lf) / cnt
        out.g_fake_g[t] = m * (-L.sigmoid(-lf)) / cnt
    return out


# -- schedule ---------------------------------------------------------------------------

class TTUR(str, Enum):
    UPDATE_FAKE = "fake"
    UPDATE_GENERATOR = "generator"


def ttur_step(step: int, ratio: int = 5) -> TTUR:
    if step < 0:
        raise ValueError("step must be >= 0")
    return TTUR.UPDATE_GENERATOR if step % (ratio + 1) == ratio else TTUR.UPDATE_FAKE


# -- ODE pairs -----------------------------------------------------------------------

@dataclass
class OdePair:
    seed: int
    noise: np.ndarray
    history: np.ndarray
    text: np.ndarray
    stage_entries: list
    stage_outputs: list


def generate_ode_pairs(teacher: ToyDiT, n: int, schedule: StageSchedule, seeds: Sequence[int],
                       dataset: Dataset, plan: MemoryPlan, t_noisy: int = 3, cfg_scale: float = 1.0,
                       batch: int = 8) -> list[OdePair]:
    """Run the teacher's full sampler from seeded noise with teacher-forced history.

    Pair ``i`` draws its clip, history start and noise from ``seeds[i]`` alone, so any
    subset can be regenerated independently. Samples are integrated in batches.
    """
    if len(seeds) < n:
        raise ValueError("need one seed per pair")
    metas = []
    for s in seeds[:n]:
        rng = make_rng(int(s))
        ci = int(rng.integers(len(dataset)))
        hist, _ = assemble_teacher_forced_sample(dataset.clips[ci], plan, None, rng, t_noisy)
        h1, w1 = schedule.resolution(1)
        z = rng.standard_normal((1, teacher.cfg.channels, t_noisy, h1, w1))
        txt = prompt_embedding(dataset.colors[ci], text_len=4, text_dim=teacher.cfg.text_dim)
        metas.append((int(s), z, hist.frames.astype(np.float64), txt))
    pairs = []
    for i in range(0, n, batch):
        chunk = metas[i:i + batch]
        z = np.concatenate([m[1] for m in chunk])
        hist = np.concatenate([m[2] for m in chunk])
        txt = np.stack([m[3] for m in chunk])
        fn = guided(teacher, hist, txt, cfg_scale)
        record: list = []
        run_stages(fn, z, schedule, record=record)
        entries = [z] + [upsample_nearest(r, 2) for r in record[:-1]]
        for j, (s, zz, hh, tt) in enumerate(chunk):
            pairs.append(OdePair(s, zz, hh, tt, [e[j:j + 1] for e in entries], [r[j:j + 1] for r in record]))
    return pairs


def save_ode_pairs(pairs: Sequence[OdePair], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, p in enumerate(pairs):
        items = [("noise", 0, p.noise), ("history", 0, p.history)]
        items += [("solution", k + 1, x) for k, x in enumerate(p.stage_outputs)]
        for role, stage, arr in items:
            name = f"pair_{i:05d}_{role}{stage if role == 'solution' else ''}.hlat"
            write_latent(arr.astype(np.float32), out / name)
            rows.append((p.seed, stage, role, name))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(("seed", "stage", "role", "file"))
        wr.writerows(rows)
    return out / "manifest.tsv"


# -- end-to-end loop ------------------------------------------------------------------

def _digest(params: dict) -> str:
    h = hashlib.sha1()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.hexdigest()


def _estimator_x0(model: ToyDiT, x_tau, tau, history, text):
    u = model(x_tau, history, text, tau, 1)
    return x_tau - _tau(tau, x_tau) * u


@dataclass
class DistillLog:
    rows: list = field(default_factory=list)
    fake_updates: int = 0
    generator_updates: int = 0
    isolation_checks: int = 0

    def write(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
            wr.writerow(("step", "phase", "update", "loss_main", "loss_adv", "endpoint_mse"))
            for r in self.rows:
                wr.writerow(r)


class Distiller:
    """Owns student, teacher, the two score estimators and the GAN heads.

    The teacher is a pyramid model sampled with its full schedule; the estimators are
    single-scale velocity models on ``x_tau = (1 - tau) x0 + tau eps``. The real
    estimator is fitted to teacher samples and then frozen; the fake estimator starts
    as its copy and tracks the student.
    """

    def __init__(self, teacher: ToyDiT, dataset: Dataset, plan: MemoryPlan, schedule: StageSchedule,
                 cfg: DistillConfig = DistillConfig(), seed: int = 0, t_noisy: int = 3,
                 batch: int = 8, lr_student: float = 1e-3, lr_fake: float = 2e-3,
                 lr_generator: float = 2e-5, policy: Optional[CorruptionPolicy] = None):
        self.teacher, self.dataset, self.plan = teacher, dataset, plan
        self.schedule = schedule
        self.cfg, self.seed, self.t_noisy, self.batch = cfg, seed, t_noisy, batch
        self.policy = policy
        self.rng = make_rng(seed)
        self.student = teacher.copy()
        est_cfg = DitConfig(**{**teacher.cfg.__dict__, "stages": 1})
        self.real = ToyDiT(est_cfg, plan, seed=seed + 1)
        self.fake: Optional[ToyDiT] = None
        self.heads = GanHeads(cfg.gan_taps, est_cfg.d_model, cfg.head_dim, seed=seed + 2)
        self.opt_student = AdamW(self.student.params, lr=lr_student)
        self.opt_real = AdamW(self.real.params, lr=lr_fake)
        self.lr_fake, self.lr_generator = lr_fake, lr_generator
        self.ema = {k: v.copy() for k, v in self.student.params.items()}
        self.log = DistillLog()
        self.three_step = schedule.with_steps((1,) * schedule.stages)

    # data
    def _batch(self, rng):
        hs, targets, texts = [], [], []
        for _ in range(self.batch):
            ci = int(rng.integers(len(self.dataset)))
            h, tgt = assemble_teacher_forced_sample(self.dataset.clips[ci], self.plan, self.policy, rng, self.t_noisy)
            hs.append(h)
            targets.append(tgt)
            texts.append(prompt_embedding(self.dataset.colors[ci], 4, self.teacher.cfg.text_dim))
        return stack_histories(hs), np.concatenate(targets).astype(np.float64), np.stack(texts)

    def _noise(self, rng, b):
        h1, w1 = self.schedule.resolution(1)
        return rng.standard_normal((b, self.teacher.cfg.channels, self.t_noisy, h1, w1))

    # evaluation
    def eval_set(self, n: int = 8, seed: int = 10_000):
        pairs = generate_ode_pairs(self.teacher, n, self.schedule, range(seed, seed + n),
                                   self.dataset, self.plan, self.t_noisy)
        return dict(z=np.concatenate([p.noise for p in pairs]), hist=np.concatenate([p.history for p in pairs]),
                    text=np.stack([p.text for p in pairs]),
                    target=np.concatenate([p.stage_outputs[-1] for p in pairs]))

    def endpoint_mse(self, ev, params: Optional[dict] = None) -> float:
        model = self.student if params is None else ToyDiT(self.student.cfg, self.plan, params)
        outs, _ = staged_backward_simulation(model, ev["z"], self.three_step, ev["hist"], ev["text"])
        return float(np.mean((outs[-1] - ev["target"]) ** 2))

    # phase 1: regress each stage's single step onto teacher ODE solutions
    def ode_init(self, pairs: Sequence[OdePair], steps: int, rng, on_step=None) -> list[float]:
        losses = []
        k_max = self.schedule.stages
        for _ in range(steps):
            idx = rng.choice(len(pairs), size=min(self.batch, len(pairs)), replace=False)
            sel = [pairs[i] for i in idx]
            hist = np.concatenate([p.history for p in sel])
            text = np.stack([p.text for p in sel])
            grads = {k: np.zeros_like(v) for k, v in self.student.params.items()}
            total = 0.0
            for k in range(1, k_max + 1):
                x_in = np.concatenate([p.stage_entries[k - 1] for p in sel])
                target = np.concatenate([p.stage_outputs[k - 1] for p in sel])
                u, cache, _ = self.student.forward(x_in, hist, text, 1.0, k)
                diff = x_in - u - target
                total += float(np.mean(diff * diff))
                pg, _ = self.student.backward(-2.0 * diff / diff.size, cache)
                for n_, g in pg.items():
                    grads[n_] += g
            self.opt_student.step(grads)
            losses.append(total)
            if on_step is not None:
                on_step(len(losses), total)
        return losses

    def fit_real_estimator(self, pairs: Sequence[OdePair], steps: int, rng) -> list[float]:
        """Flow-match the single-scale real estimator to teacher samples; it is frozen afterwards."""
        losses = []
        for _ in range(steps):
            idx = rng.choice(len(pairs), size=min(self.batch, len(pairs)), replace=False)
            sel = [pairs[i] for i in idx]
            x0 = np.concatenate([p.stage_outputs[-1] for p in sel])
            hist = np.concatenate([p.history for p in sel])
            text = np.stack([p.text for p in sel])
            # Drop the prompt half of the time so the unconditional branch is meaningful.
            if rng.uniform() < 0.5:
                text = None
            losses.append(self._flow_step(self.real, self.opt_real, x0, hist, text, rng)[0])
        return losses

    def _flow_step(self, model, opt, x0, hist, text, rng, tau=None, extra_grads=None):
        b = x0.shape[0]
        tau = rng.uniform(0.02, 0.98, size=b) if tau is None else tau
        eps = rng.standard_normal(x0.shape)
        t = _tau(tau, x0)
        x_tau = (1.0 - t) * x0 + t * eps
        u, cache, _ = model.forward(x_tau, hist, text, tau, 1)
        diff = u - (eps - x0)
        loss = float(np.mean(diff * diff))
        grads, _ = model.backward(2.0 * diff / diff.size, cache)
        if extra_grads:
            for k, g in extra_grads.items():
                grads[k] = grads[k] + g
        if opt is not None:
            opt.step(grads)
        return loss, grads

    def _disc(self, x, tau, hist, text, taps):
        _, cache, acts = self.fake.forward(x, hist, text, tau, 1, taps=taps)
        logits, hc = self.heads.forward(acts)
        return logits, cache, hc

    def _token_grid(self):
        pt, ph, pw = self.fake.cfg.patch
        return (self.t_noisy // pt, self.plan.height // ph, self.plan.width // pw)

    # phase 2 updates
    def fake_update(self, step: int, rng) -> tuple[float, float]:
        cfg = self.cfg
        hist, real_x, text = self._batch(rng)
        z = self._noise(rng, real_x.shape[0])
        outs, _ = staged_backward_simulation(self.student, z, self.three_step, hist, text)
        x_fake = outs[-1]  # detached: no tape replay on this path
        tau = np.clip(dynamic_renoise(step, cfg, rng, size=x_fake.shape[0]), 0.02, 0.98)
        loss_adv = 0.0
        extra = None
        head_grads = None
        if step >= cfg.gan_start:
            t = _tau(tau, x_fake)
            fake_tau = (1.0 - t) * x_fake + t * rng.standard_normal(x_fake.shape)
            real_tau = (1.0 - t) * real_x + t * rng.standard_normal(real_x.shape)
            pert = real_tau + cfg.sigma_d * rng.standard_normal(real_x.shape)
            mask = crop_mask(self._token_grid(), cfg.crop_frac, rng)
            taps = cfg.gan_taps
            lr_, cr, hr = self._disc(real_tau, tau, hist, text, taps)
            lp, cp, hp = self._disc(pert, tau, hist, text, taps)
            lf, cf, hf = self._disc(fake_tau, tau, hist, text, taps)
            terms = gan_losses(lr_, lp, lf, mask, cfg)
            loss_adv = terms.loss_d
            extra = {k: np.zeros_like(v) for k, v in self.fake.params.items()}
            head_grads = {k: np.zeros_like(v) for k, v in self.heads.params.items()}
            for g_log, cache, hc in ((terms.g_real, cr, hr), (terms.g_real_pert, cp, hp), (terms.g_fake_d, cf, hf)):
                hg, g_acts = self.heads.backward({t_: cfg.w_d * g for t_, g in g_log.items()}, hc)
                for k, g in hg.items():
                    head_grads[k] += g
                pg, _ = self.fake.backward(None, cache, g_acts)
                for k, g in pg.items():
                    extra[k] += g
        loss_flow, grads = self._flow_step(self.fake, None, x_fake, hist, text, rng, tau, extra)
        all_g = {**{"fake." + k: g for k, g in grads.items()},
                 **({"head." + k: g for k, g in head_grads.items()} if head_grads else {})}
        self.opt_fake.step({k: all_g.get(k, np.zeros_like(v)) for k, v in self.opt_fake.params.items()})
        return loss_flow, loss_adv

    def generator_update(self, step: int, rng) -> tuple[float, float]:
        cfg = self.cfg
        hist, _, text = self._batch(rng)
        z = self._noise(rng, hist.shape[0])
        outs, tape = staged_backward_simulation(self.student, z, self.three_step, hist, text)
        x0 = outs[-1]
        tau = np.clip(dynamic_renoise(step, cfg, rng, size=x0.shape[0]), 0.02, 0.98)
        eps = rng.standard_normal(x0.shape)

        def real_fn(x_tau, tau_, cond):
            return _estimator_x0(self.real, x_tau, tau_, hist, text if cond else None)

        def fake_fn(x_tau, tau_, cond):
            return _estimator_x0(self.fake, x_tau, tau_, hist, text if cond else None)

        signal, _ = dmd_generator_grad(x0, real_fn, fake_fn, cfg.cfg_weight, tau, rng, eps)
        loss_dmd = 0.5 * float(np.mean(signal * signal))
        g_x0 = signal / signal.size
        loss_g = 0.0
        if step >= cfg.gan_start:
            t = _tau(tau, x0)
            fake_tau = (1.0 - t) * x0 + t * eps
            mask = crop_mask(self._token_grid(), cfg.crop_frac, rng)
            lf, cf, hf = self._disc(fake_tau, tau, hist, text, cfg.gan_taps)
            terms = gan_losses(lf, lf, lf, mask, cfg)
            loss_g = terms.loss_g
            _, g_acts = self.heads.backward({t_: cfg.w_g * g for t_, g in terms.g_fake_g.items()}, hf)
            _, g_in = self.fake.backward(None, cf, g_acts)  # estimator grads discarded
            g_x0 = g_x0 + (1.0 - t) * g_in
        grads, _ = simulation_backward(self.student, tape, g_x0)
        self.opt_gen.step(grads)
        if step >= cfg.ema_start:
            self.ema = ema_update(self.student.params, self.ema, cfg.ema_decay)
        return loss_dmd, loss_g

    def start_adversarial(self):
        self.fake = self.real.copy()
        self.opt_fake = AdamW({**{"fake." + k: v for k, v in self.fake.params.items()},
                               **{"head." + k: v for k, v in self.heads.params.items()}}, **self._adv_opt(self.lr_fake))
        self.opt_gen = AdamW(self.student.params, **self._adv_opt(self.lr_generator))

    @staticmethod
    def _adv_opt(lr: float) -> dict:
        # no first-moment momentum, stronger decay and a loose clip for the adversarial phase
        return dict(lr=lr, betas=(0.0, 0.999), weight_decay=1e-3, clip=10.0)

    def run(self, init_steps: int, adv_steps: int, n_pairs: int = 64, eval_every: int = 0,
            audit: bool = False, ev=None, real_fit_steps: int = 300) -> DistillLog:
        """Fit the real estimator (setup, not counted), then ``init_steps`` of ODE-pair
        regression followed by ``adv_steps`` of alternating fake/generator updates."""
        rng = self.rng
        ev = self.eval_set() if ev is None else ev
        pairs = generate_ode_pairs(self.teacher, n_pairs, self.schedule,
                                   range(self.seed * 100_000, self.seed * 100_000 + n_pairs),
                                   self.dataset, self.plan, self.t_noisy)
        self.real_fit_losses = self.fit_real_estimator(pairs, real_fit_steps, rng)
        self.log.rows.append((0, "start", "-", "", "", f"{self.endpoint_mse(ev):.6e}"))

        def record(i, loss):
            mse = f"{self.endpoint_mse(ev):.6e}" if eval_every and i % eval_every == 0 else ""
            self.log.rows.append((i, "ode_init", "student", f"{loss:.6e}", "", mse))

        self.ode_init(pairs, init_steps, rng, record)
        self.start_adversarial()
        for s in range(adv_steps):
            kind = ttur_step(s, self.cfg.ttur_ratio)
            before = (_digest(self.student.params), _digest(self.fake.params), _digest(self.heads.params),
                      _digest(self.real.params)) if audit else None
            if kind is TTUR.UPDATE_FAKE:
                main, adv = self.fake_update(s, rng)
                self.log.fake_updates += 1
            else:
                main, adv = self.generator_update(s, rng)
                self.log.generator_updates += 1
            if audit:
                after = (_digest(self.student.params), _digest(self.fake.params), _digest(self.heads.params),
                         _digest(self.real.params))
                if after[3] != before[3]:
                    raise AssertionError("real estimator changed during distillation")
                if kind is TTUR.UPDATE_FAKE and after[0] != before[0]:
                    raise AssertionError("fake-estimator update touched the student")
                if kind is TTUR.UPDATE_GENERATOR and (after[1] != before[1] or after[2] != before[2]):
                    raise AssertionError("generator update touched the estimator or heads")
                self.log.isolation_checks += 1
            mse = f"{self.endpoint_mse(ev):.6e}" if eval_every and (s + 1) % eval_every == 0 else ""
            self.log.rows.append((init_steps + s + 1, "adversarial", kind.value, f"{main:.6e}", f"{adv:.6e}", mse))
        self.log.rows.append((init_steps + adv_steps, "end", "-", "", "", f"{self.endpoint_mse(ev):.6e}"))
        return self.log
