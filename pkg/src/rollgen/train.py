"""Flow-matching training of the toy DiT on teacher-forced synthetic clips."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .context import DEFAULT_MODE_PROBS, MemoryPlan, zero_out_history
from .distill import assemble_teacher_forced_sample
from .drift import CorruptionPolicy
from .flow import StageSchedule, flow_loss, flow_loss_grad, sample_training_point
from .latent import make_rng
from .nn.dit import ToyDiT, save_checkpoint
from .optim import AdamW, ema_update
from .synth import Dataset, prompt_embedding


@dataclass
class TrainConfig:
    steps: int = 500
    batch: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    clip: float = 1.0
    text_dropout: float = 0.1
    mode_probs: tuple[float, float, float] = DEFAULT_MODE_PROBS
    ema_decay: float = 0.99
    t_noisy: int = 3
    checkpoint_every: int = 0


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    stages: list = field(default_factory=list)
    modes: list = field(default_factory=list)
    ema: dict = field(default_factory=dict)

    def write_log(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
            wr.writerow(("step", "stage", "modes", "loss"))
            for i, (l, k, m) in enumerate(zip(self.losses, self.stages, self.modes), 1):
                wr.writerow((i, k, m, f"{l:.9e}"))


def moving_average(x: Sequence[float], window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if window < 1 or window > x.size:
        raise ValueError("window must lie in 1..len(x)")
    c = np.cumsum(np.concatenate([[0.0], x]))
    return (c[window:] - c[:-window]) / window


def train_flow(model: ToyDiT, dataset: Dataset, plan: MemoryPlan, schedule: StageSchedule,
               cfg: TrainConfig = TrainConfig(), seed: int = 0, policy: Optional[CorruptionPolicy] = None,
               out_dir: Optional[Path] = None) -> TrainResult:
    """Minimize the pyramid flow loss with corrupted, mode-dropped ground-truth history.

    Each step draws one stage for the batch, per-sample lambdas, per-sample task modes
    and prompt dropout. The model is updated in place; the EMA copy is returned.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if schedule.stages != model.cfg.stages:
        raise ValueError("schedule and model disagree on the number of stages")
    rng = make_rng(seed)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay, clip=cfg.clip)
    ema = {k: v.copy() for k, v in model.params.items()}
    res = TrainResult()
    for step in range(1, cfg.steps + 1):
        hists, targets, texts, modes = [], [], [], []
        for _ in range(cfg.batch):
            ci = int(rng.integers(len(dataset)))
            h, tgt = assemble_teacher_forced_sample(dataset.clips[ci], plan, policy, rng, cfg.t_noisy)
            h, mode = zero_out_history(h, cfg.mode_probs, rng)
            hists.append(h.frames)
            targets.append(tgt)
            modes.append(mode.value)
            txt = prompt_embedding(dataset.colors[ci], 4, model.cfg.text_dim)
            texts.append(np.zeros_like(txt) if rng.uniform() < cfg.text_dropout else txt)
        x0 = np.concatenate(targets).astype(np.float64)
        ps = sample_training_point(x0, schedule, rng)
        hist = np.concatenate(hists).astype(np.float64)
        u, cache, _ = model.forward(ps.x_t, hist, np.stack(texts), ps.lam, ps.stage)
        loss = flow_loss(u, ps.v_star)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        grads, _ = model.backward(flow_loss_grad(u, ps.v_star), cache)
        opt.step(grads)
        ema = ema_update(model.params, ema, cfg.ema_decay)
        res.losses.append(loss)
        res.stages.append(ps.stage)
        res.modes.append(",".join(modes))
        if out_dir is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            save_checkpoint(ema, Path(out_dir) / f"ema_{step:06d}.ckpt")
    res.ema = ema
    return res
