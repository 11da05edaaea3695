"""INI run configuration. Every key has a default; see docs/config.md for the reference."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .context import MemoryPlan
from .distill import DistillConfig
from .drift import CorruptionPolicy, DriftTracker
from .flow import StageSchedule
from .nn.dit import DitConfig
from .synth import prompt_embedding, random_prompt
from .train import TrainConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "run": {"seed": "0", "sections": "4", "t_noisy": "3", "cfg_scale": "1.0", "renoise": "0.0"},
    "plan": {"short": "2", "mid": "2", "long": "4", "height": "8", "width": "8",
             "kernel_short": "1,2,2", "kernel_mid": "2,4,4", "kernel_long": "4,8,8"},
    "schedule": {"stages": "3", "steps": "17,17,16", "shift": "1.0", "boundaries": ""},
    "model": {"d_model": "32", "n_heads": "4", "n_layers": "2", "text_dim": "16", "time_dim": "16",
              "mlp_ratio": "2", "rope_temporal": "post", "init_seed": "0"},
    "corruption": {"p_noise": "0.4", "p_downup": "0.4", "p_exposure": "0.0", "p_clean": "0.2",
                   "exposure_range": "0.3,1.7", "noise_range": "0.0,0.33", "downup_range": "0.0,0.1"},
    "drift": {"enabled": "true", "rho_mean": "0.9", "rho_var": "0.9", "delta_mean": "0.1",
              "delta_var": "0.1", "compare_first": "false"},
    "prompts": {"initial": "seed:1", "schedule": ""},
    "inputs": {"image": "", "video": ""},
    "data": {"dir": "data", "clips": "32", "frames": "16"},
    "train": {"steps": "500", "batch": "8", "lr": "2e-3", "weight_decay": "1e-4", "clip": "1.0",
              "text_dropout": "0.1", "mode_probs": "0.3,0.3,0.4", "ema_decay": "0.99",
              "checkpoint_every": "0", "stages": "3", "corrupt": "stage1"},
    "distill": {"cfg_weight": "3.0", "lambda_d": "100", "sigma_d": "0.1", "w_g": "5e-2", "w_d": "1e-2",
                "ttur_ratio": "5", "beta_a0": "3.0", "beta_steps": "500", "ema_decay": "0.99",
                "ema_start": "0", "gan_taps": "0,1", "head_dim": "16", "gan_start": "0", "crop_frac": "0.5",
                "init_steps": "300", "adv_steps": "200", "pairs": "64", "real_fit_steps": "300",
                "batch": "8", "lr_student": "1e-3", "lr_fake": "2e-3", "lr_generator": "2e-5"},
}


def _floats(s: str, n: Optional[int] = None) -> tuple[float, ...]:
    vals = tuple(float(x) for x in s.split(",") if x.strip())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {s!r}")
    return vals


def _ints(s: str, n: Optional[int] = None) -> tuple[int, ...]:
    vals = tuple(int(x) for x in s.split(",") if x.strip())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated integers, got {s!r}")
    return vals


@dataclass(frozen=True)
class PromptSwitch:
    section: int
    source: str
    blend: int = 1


def load_prompt(source: str, text_len: int, text_dim: int, base: Path = Path(".")) -> np.ndarray:
    """``seed:N`` (random matrix), ``color:a,b,c,d`` (colour prompt) or ``file:path.npy``."""
    kind, _, arg = source.partition(":")
    if kind == "seed":
        return random_prompt(int(arg), text_len, text_dim)
    if kind == "color":
        return prompt_embedding(_floats(arg), text_len, text_dim)
    if kind == "file":
        arr = np.load(base / arg)
        if arr.shape != (text_len, text_dim):
            raise ConfigError(f"prompt file {arg} has shape {arr.shape}, expected {(text_len, text_dim)}")
        return arr.astype(np.float64)
    raise ConfigError(f"unknown prompt source {source!r}")


@dataclass
class RunConfig:
    seed: int = 0
    sections: int = 4
    t_noisy: int = 3
    cfg_scale: float = 1.0
    renoise: float = 0.0
    plan: MemoryPlan = field(default_factory=lambda: MemoryPlan((2, 2, 4), ((1, 2, 2), (2, 4, 4), (4, 8, 8)), 8, 8))
    schedule: StageSchedule = field(default_factory=StageSchedule)
    model: DitConfig = field(default_factory=DitConfig)
    init_seed: int = 0
    policy: CorruptionPolicy = field(default_factory=CorruptionPolicy)
    tracker: DriftTracker = field(default_factory=DriftTracker)
    drift_enabled: bool = True
    compare_first: bool = False
    initial_prompt: str = "seed:1"
    prompt_schedule: tuple[PromptSwitch, ...] = ()
    image: str = ""
    video: str = ""
    data_dir: str = "data"
    data_clips: int = 32
    data_frames: int = 16
    train: TrainConfig = field(default_factory=TrainConfig)
    train_stages: int = 3
    train_corrupt: str = "stage1"
    distill: DistillConfig = field(default_factory=DistillConfig)
    distill_run: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def prompt_for_sections(self, text_len: int = 4) -> list[np.ndarray]:
        """Unroll the prompt schedule: a switch at section ``s`` with blend ``M`` fills
        sections ``s .. s+M-1`` with the interpolation from the previous prompt."""
        from .context import interpolate_prompts

        d = self.model.text_dim
        current = load_prompt(self.initial_prompt, text_len, d, self.base_dir)
        out = [current] * self.sections
        for sw in sorted(self.prompt_schedule, key=lambda s: s.section):
            target = load_prompt(sw.source, text_len, d, self.base_dir)
            seq = interpolate_prompts(current, target, sw.blend) if sw.blend >= 2 else [target]
            for j in range(sw.section, self.sections):
                out[j] = seq[min(j - sw.section, len(seq) - 1)]
            current = target
        return out


def _parse_schedule(text: str) -> tuple[PromptSwitch, ...]:
    out = []
    for item in filter(None, (t.strip() for t in text.split(";"))):
        parts = item.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"prompt switch must be 'SECTION SOURCE [M]', got {item!r}")
        out.append(PromptSwitch(int(parts[0]), parts[1], int(parts[2]) if len(parts) == 3 else 1))
    return tuple(out)


def load_config(path: Optional[Path] = None, overrides: Optional[dict] = None) -> RunConfig:
    """Read an INI file (or defaults only) and apply ``{"section.key": value}`` overrides."""
    cp = configparser.ConfigParser()
    cp.read_dict(DEFAULTS)
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as fh:
                cp.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        base = path.parent
    for sec in cp.sections():
        if sec not in DEFAULTS:
            raise ConfigError(f"unknown config section [{sec}]")
        unknown = set(cp[sec]) - set(DEFAULTS[sec])
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(sorted(unknown))}")
    for key, value in (overrides or {}).items():
        sec, _, name = key.partition(".")
        cp[sec][name] = str(value)
    try:
        return _build(cp, base)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(cp: configparser.ConfigParser, base: Path) -> RunConfig:
    r, pl, sc, md = cp["run"], cp["plan"], cp["schedule"], cp["model"]
    plan = MemoryPlan((pl.getint("short"), pl.getint("mid"), pl.getint("long")),
                      (_ints(pl["kernel_short"], 3), _ints(pl["kernel_mid"], 3), _ints(pl["kernel_long"], 3)),
                      pl.getint("height"), pl.getint("width"))
    stages = sc.getint("stages")
    bounds = _floats(sc["boundaries"]) or None
    schedule = StageSchedule(stages, _ints(sc["steps"]), bounds, sc.getfloat("shift"), plan.height, plan.width)
    model = DitConfig(d_model=md.getint("d_model"), n_heads=md.getint("n_heads"), n_layers=md.getint("n_layers"),
                      text_dim=md.getint("text_dim"), time_dim=md.getint("time_dim"), stages=stages,
                      mlp_ratio=md.getint("mlp_ratio"), rope_temporal=md["rope_temporal"])
    c = cp["corruption"]
    policy = CorruptionPolicy(c.getfloat("p_noise"), c.getfloat("p_downup"), c.getfloat("p_exposure"),
                              c.getfloat("p_clean"), _floats(c["exposure_range"], 2), _floats(c["noise_range"], 2),
                              _floats(c["downup_range"], 2))
    d = cp["drift"]
    tracker = DriftTracker(d.getfloat("rho_mean"), d.getfloat("rho_var"), d.getfloat("delta_mean"),
                           d.getfloat("delta_var"))
    t = cp["train"]
    train = TrainConfig(steps=t.getint("steps"), batch=t.getint("batch"), lr=t.getfloat("lr"),
                        weight_decay=t.getfloat("weight_decay"), clip=t.getfloat("clip"),
                        text_dropout=t.getfloat("text_dropout"), mode_probs=_floats(t["mode_probs"], 3),
                        ema_decay=t.getfloat("ema_decay"), t_noisy=r.getint("t_noisy"),
                        checkpoint_every=t.getint("checkpoint_every"))
    if t["corrupt"] not in ("stage1", "stage3", "config", "none"):
        raise ConfigError("train.corrupt must be stage1, stage3, config or none")
    ds = cp["distill"]
    distill = DistillConfig(cfg_weight=ds.getfloat("cfg_weight"), lambda_d=ds.getfloat("lambda_d"),
                            sigma_d=ds.getfloat("sigma_d"), w_g=ds.getfloat("w_g"), w_d=ds.getfloat("w_d"),
                            ttur_ratio=ds.getint("ttur_ratio"), beta_a0=ds.getfloat("beta_a0"),
                            beta_steps=ds.getint("beta_steps"), ema_decay=ds.getfloat("ema_decay"),
                            ema_start=ds.getint("ema_start"), gan_taps=_ints(ds["gan_taps"]),
                            head_dim=ds.getint("head_dim"), gan_start=ds.getint("gan_start"),
                            crop_frac=ds.getfloat("crop_frac"))
    run = {k: (float(ds[k]) if k.startswith("lr") else int(ds[k]))
           for k in ("init_steps", "adv_steps", "pairs", "real_fit_steps", "batch",
                     "lr_student", "lr_fake", "lr_generator")}
    sections = r.getint("sections")
    if sections < 1:
        raise ConfigError("run.sections must be >= 1")
    if r.getint("t_noisy") < 1:
        raise ConfigError("run.t_noisy must be >= 1")
    return RunConfig(
        seed=r.getint("seed"), sections=sections, t_noisy=r.getint("t_noisy"),
        cfg_scale=r.getfloat("cfg_scale"), renoise=r.getfloat("renoise"), plan=plan, schedule=schedule,
        model=model, init_seed=md.getint("init_seed"), policy=policy, tracker=tracker,
        drift_enabled=d.getboolean("enabled"), compare_first=d.getboolean("compare_first"),
        initial_prompt=cp["prompts"]["initial"], prompt_schedule=_parse_schedule(cp["prompts"]["schedule"]),
        image=cp["inputs"]["image"], video=cp["inputs"]["video"], data_dir=cp["data"]["dir"],
        data_clips=cp["data"].getint("clips"), data_frames=cp["data"].getint("frames"), train=train,
        train_stages=t.getint("stages"), train_corrupt=t["corrupt"], distill=distill, distill_run=run,
        base_dir=base)
