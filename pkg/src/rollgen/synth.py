"""Synthetic latent clips: one Gaussian blob drifting with constant velocity on a periodic grid."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .latent import make_rng, read_latent, write_latent

MANIFEST_HEADER = ("clip_id", "file", "seed", "y0", "x0", "vy", "vx", "sigma", "color")


@dataclass(frozen=True)
class BlobClip:
    latent: np.ndarray  # (1, C, T, H, W) float32
    start: tuple[float, float]
    velocity: tuple[float, float]
    sigma: float
    color: np.ndarray
    seed: int

    def center(self, t: int) -> tuple[float, float]:
        h, w = self.latent.shape[3:]
        return ((self.start[0] + t * self.velocity[0]) % h, (self.start[1] + t * self.velocity[1]) % w)


def _wrapped_gaussian(n: int, c: float, sigma: float) -> np.ndarray:
    i = np.arange(n)[:, None] + n * np.arange(-2, 3)[None, :]
    return np.exp(-0.5 * ((i - c) / sigma) ** 2).sum(axis=1)


def render_blob(h: int, w: int, center, sigma: float, color) -> np.ndarray:
    """(C, H, W) frame: separable periodic Gaussian times a per-channel amplitude."""
    img = np.outer(_wrapped_gaussian(h, center[0], sigma), _wrapped_gaussian(w, center[1], sigma))
    return np.asarray(color, dtype=np.float64)[:, None, None] * img[None]


def make_clip(seed: int, frames: int = 16, height: int = 8, width: int = 8, channels: int = 4,
              max_speed: float = 1.0, sigma_range=(1.0, 2.0)) -> BlobClip:
    rng = make_rng(seed)
    start = (float(rng.uniform(0, height)), float(rng.uniform(0, width)))
    vel = (float(rng.uniform(-max_speed, max_speed)), float(rng.uniform(-max_speed, max_speed)))
    sigma = float(rng.uniform(*sigma_range))
    color = rng.uniform(-1.0, 1.0, size=channels)
    clip = np.empty((1, channels, frames, height, width))
    for t in range(frames):
        c = ((start[0] + t * vel[0]) % height, (start[1] + t * vel[1]) % width)
        clip[0, :, t] = render_blob(height, width, c, sigma, color)
    return BlobClip(clip.astype(np.float32), start, vel, sigma, color, seed)


def prompt_embedding(color, text_len: int = 4, text_dim: int = 16, seed: int = 7) -> np.ndarray:
    """Deterministic (text_len, text_dim) embedding standing in for an encoded prompt about the colour."""
    color = np.asarray(color, dtype=np.float64)
    proj = make_rng(seed).standard_normal((color.size, text_len * text_dim))
    return np.tanh(color @ proj).reshape(text_len, text_dim)


def random_prompt(seed: int, text_len: int = 4, text_dim: int = 16) -> np.ndarray:
    return make_rng(seed).standard_normal((text_len, text_dim))


def write_dataset(out_dir, n_clips: int, seed: int, **clip_kwargs) -> Path:
    """Write ``n_clips`` HLAT files plus ``manifest.tsv``; clip ``i`` uses seed ``seed + i``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i in range(n_clips):
        clip = make_clip(seed + i, **clip_kwargs)
        name = f"clip_{i:05d}.hlat"
        write_latent(clip.latent, out / name)
        rows.append((i, name, clip.seed, f"{clip.start[0]:.6f}", f"{clip.start[1]:.6f}",
                     f"{clip.velocity[0]:.6f}", f"{clip.velocity[1]:.6f}", f"{clip.sigma:.6f}",
                     ",".join(f"{c:.9g}" for c in clip.color)))
    with open(out / "manifest.tsv", "w", newline="") as fh:
        wr = csv.writer(fh, delimiter="\t", lineterminator="\n")
        wr.writerow(MANIFEST_HEADER)
        wr.writerows(rows)
    return out / "manifest.tsv"


@dataclass
class Dataset:
    clips: list
    colors: list

    def __len__(self):
        return len(self.clips)


def load_dataset(path) -> Dataset:
    """Load a directory (or its manifest) written by :func:`write_dataset`."""
    p = Path(path)
    manifest = p / "manifest.tsv" if p.is_dir() else p
    if not manifest.exists():
        raise FileNotFoundError(f"dataset manifest not found: {manifest}")
    clips, colors = [], []
    with open(manifest) as fh:
        for row in csv.DictReader(fh, delimiter="\t"):
            clips.append(read_latent(manifest.parent / row["file"]))
            colors.append(np.array([float(c) for c in row["color"].split(",")]))
    return Dataset(clips, colors)


def in_memory_dataset(n_clips: int, seed: int, **clip_kwargs) -> Dataset:
    made = [make_clip(seed + i, **clip_kwargs) for i in range(n_clips)]
    return Dataset([c.latent for c in made], [c.color for c in made])
