"""Command-line driver: generate, train, distill, synth, score, cost."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import bench
from .config import ConfigError, RunConfig, load_config
from .context import RollingHistory, paper_plan, task_mode
from .distill import Distiller
from .drift import adaptive_corrupt, observe, stage1_policy, stage3_policy
from .flow import StageSchedule
from .latent import LatentFormatError, read_latent, section_stats, write_latent
from .nn.dit import CheckpointError, ToyDiT, check_params, init_params, load_checkpoint, save_checkpoint
from .sampler import CostModel, cost_report, sample_section
from .synth import load_dataset, write_dataset
from .train import train_flow

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

GENERATE_MANIFEST = ("section", "file", "mode", "history_tokens", "noisy_tokens", "drift_flag",
                     "corrupted_frames", "buffered_frames", "memory_class")


def _config(args) -> RunConfig:
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["run.seed"] = args.seed
    if getattr(args, "sections", None) is not None:
        overrides["run.sections"] = args.sections
    if getattr(args, "cfg_scale", None) is not None:
        overrides["run.cfg_scale"] = args.cfg_scale
    if getattr(args, "steps", None):
        overrides["schedule.steps"] = args.steps
    return load_config(args.config, overrides)


def _model(cfg: RunConfig, checkpoint: Optional[str], stages: Optional[int] = None) -> ToyDiT:
    mcfg = cfg.model if stages is None else dataclasses.replace(cfg.model, stages=stages)
    model = ToyDiT(mcfg, cfg.plan, seed=cfg.init_seed)
    if checkpoint:
        params = load_checkpoint(checkpoint)
        check_params(params, model.params)
        model.params = params
    return model


def _memory_class(n_bytes: int) -> int:
    """Power-of-two bucket of the peak number of bytes held by the frame buffer."""
    return int(math.ceil(math.log2(max(n_bytes, 1))))


def generate(cfg: RunConfig, out: Path, checkpoint: Optional[str] = None, log=print) -> list[dict]:
    """Roll out ``cfg.sections`` sections; writes one latent file per section plus ``manifest.tsv``."""
    model = _model(cfg, checkpoint)
    out.mkdir(parents=True, exist_ok=True)
    c, plan = cfg.model.channels, cfg.plan
    rolling = RollingHistory(plan, batch=1, channels=c)
    if cfg.video:
        rolling.push(read_latent(cfg.base_dir / cfg.video))
    elif cfg.image:
        img = read_latent(cfg.base_dir / cfg.image)
        rolling.push(img[:, :, :1])
    prompts = cfg.prompt_for_sections()
    tracker = cfg.tracker
    flagged: Optional[range] = None
    rng = np.random.Generator(np.random.Philox(cfg.seed ^ 0x5EED))
    hist_tokens = model.hist_token_count()
    pt, ph, pw = cfg.model.patch
    noisy_tokens = (cfg.t_noisy // pt) * (plan.height // ph) * (plan.width // pw)
    frame_bytes = c * plan.height * plan.width * 4
    peak = 0
    rows = []
    for i in range(cfg.sections):
        ctx = rolling.context()
        mode = task_mode(ctx)
        n_corrupt = 0
        if flagged is not None:
            before = ctx.frames
            ctx = adaptive_corrupt(ctx, True, cfg.policy, rng, flagged)
            n_corrupt = int(np.any(ctx.frames != before, axis=(0, 1, 3, 4)).sum())
        section = sample_section(model, ctx, prompts[i], cfg.schedule, cfg.seed * 1_000_003 + i,
                                 cfg.cfg_scale, channels=c, t_noisy=cfg.t_noisy, renoise=cfg.renoise)
        if not np.all(np.isfinite(section)):
            raise FloatingPointError(f"non-finite values in section {i}")
        name = f"section_{i:05d}.hlat"
        write_latent(section, out / name)
        start = rolling.total
        rolling.push(section)
        buffered = len(rolling._buf) + (1 if rolling.first_frame is not None else 0)
        peak = max(peak, buffered * frame_bytes)
        flag = False
        if cfg.drift_enabled:
            tracker, flag = observe(tracker, section_stats(section), cfg.compare_first)
        flagged = range(start, start + section.shape[2]) if flag else None
        rows.append(dict(section=i, file=name, mode=mode.value, history_tokens=hist_tokens,
                         noisy_tokens=noisy_tokens, drift_flag=int(flag), corrupted_frames=n_corrupt,
                         buffered_frames=buffered, memory_class=_memory_class(peak)))
        log(f"section {i}: mode={mode.value} drift={int(flag)}")
    with open(out / "manifest.tsv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, GENERATE_MANIFEST, delimiter="\t", lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return rows


def _policy(cfg: RunConfig):
    return {"stage1": stage1_policy(), "stage3": stage3_policy(), "config": cfg.policy, "none": None}[cfg.train_corrupt]


def cmd_generate(args) -> int:
    cfg = _config(args)
    generate(cfg, Path(args.out), args.checkpoint)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    data = cfg.base_dir / cfg.data_dir
    dataset = load_dataset(data)
    k = cfg.train_stages
    sched = cfg.schedule if k == cfg.schedule.stages else StageSchedule(
        k, (50 // k,) * (k - 1) + (50 - (50 // k) * (k - 1),), None, cfg.schedule.shift, cfg.plan.height, cfg.plan.width)
    model = _model(cfg, args.checkpoint, stages=k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train_flow(model, dataset, cfg.plan, sched, cfg.train, cfg.seed, _policy(cfg), out)
    res.write_log(out / "loss_log.tsv")
    save_checkpoint(model.params, out / "model.ckpt")
    save_checkpoint(res.ema, out / "ema.ckpt")
    print(f"trained {len(res.losses)} steps; first loss {res.losses[0]:.4f}, last loss {res.losses[-1]:.4f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _config(args)
    dataset = load_dataset(cfg.base_dir / cfg.data_dir)
    teacher = _model(cfg, args.checkpoint)
    r = cfg.distill_run
    d = Distiller(teacher, dataset, cfg.plan, cfg.schedule, cfg.distill, seed=cfg.seed, t_noisy=cfg.t_noisy,
                  batch=r["batch"], lr_student=r["lr_student"], lr_fake=r["lr_fake"],
                  lr_generator=r["lr_generator"], policy=stage3_policy())
    log = d.run(r["init_steps"], r["adv_steps"], n_pairs=r["pairs"], eval_every=50,
                real_fit_steps=r["real_fit_steps"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.write(out / "distill_log.tsv")
    save_checkpoint(d.student.params, out / "student.ckpt")
    save_checkpoint(d.ema, out / "student_ema.ckpt")
    print(f"fake updates {log.fake_updates}, generator updates {log.generator_updates}; "
          f"endpoint mse {log.rows[0][5]} -> {log.rows[-1][5]}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out) if args.out else cfg.base_dir / cfg.data_dir
    manifest = write_dataset(out, cfg.data_clips, cfg.seed, frames=cfg.data_frames,
                             height=cfg.plan.height, width=cfg.plan.width, channels=cfg.model.channels)
    print(f"wrote {cfg.data_clips} clips; manifest {manifest}")
    return EXIT_OK


def cmd_score(args) -> int:
    specs = bench.load_specs(args.thresholds) if args.thresholds else bench.load_specs()
    reports = []
    for p in args.paths:
        if not Path(p).exists():
            raise FileNotFoundError(f"score input not found: {p}")
        reports.extend(bench.score_file(p, specs))
    print(bench.format_report(reports))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        bench.write_summary(reports, out / "scores.tsv")
    return EXIT_OK


def cmd_cost(args) -> int:
    cfg = _config(args)
    plan = paper_plan()
    sched = StageSchedule(3, (17, 17, 16), height=plan.height, width=plan.width)
    rep = cost_report(sched, plan, CostModel())
    print("history tokens (compressed / baseline):", rep["history_tokens"], "/", rep["history_tokens_baseline"])
    print(f"history token ratio: {rep['history_token_ratio']} ({float(rep['history_token_ratio']):.2f}x)")
    print(f"history attention FLOP ratio: {rep['history_attention_ratio']} "
          f"({float(rep['history_attention_ratio']):.2f}x)")
    print(f"pyramid noisy-token factor: {rep['noisy_token_factor']}; ratio "
          f"{rep['noisy_token_ratio']} ({float(rep['noisy_token_ratio']):.2f}x)")
    print(f"pyramid noisy attention ratio: {float(rep['noisy_attention_ratio']):.2f}x")
    model = _model(cfg, args.checkpoint)
    rolling = RollingHistory(cfg.plan, channels=cfg.model.channels)
    text = cfg.prompt_for_sections()[0]
    n = 3
    t0 = time.perf_counter()
    for i in range(n):
        sec = sample_section(model, rolling.context(), text, cfg.schedule, cfg.seed + i, cfg.cfg_scale,
                             channels=cfg.model.channels, t_noisy=cfg.t_noisy)
        rolling.push(sec)
    dt = (time.perf_counter() - t0) / n
    print(f"toy engine: {dt * 1000:.1f} ms per section, {cfg.t_noisy / dt:.1f} latent frames/s "
          f"(steps {cfg.schedule.steps}; informational)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rollgen", description="Rolling-context pyramid video latent toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--config", type=Path, default=None, help="INI config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None, required=out_required, help="output directory")
        sp.add_argument("--checkpoint", default=None)
        sp.add_argument("--steps", default=None, help='per-stage step counts, e.g. "17,17,16"')
        sp.add_argument("--cfg-scale", type=float, default=None)
        sp.add_argument("--sections", type=int, default=None)

    for name, fn, need_out in (("generate", cmd_generate, True), ("train", cmd_train, True),
                               ("distill", cmd_distill, True), ("synth", cmd_synth, False),
                               ("cost", cmd_cost, False)):
        sp = sub.add_parser(name)
        common(sp, need_out)
        sp.set_defaults(func=fn)
    sp = sub.add_parser("score")
    sp.add_argument("paths", nargs="+", help="TSV files of video_id<TAB>metric<TAB>raw")
    sp.add_argument("--thresholds", default=None, help="override threshold table")
    sp.add_argument("--out", default=None)
    sp.add_argument("--config", type=Path, default=None)
    sp.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, LatentFormatError, bench.ScoreError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, ZeroDivisionError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
