"""Benchmark scoring: bounded normalization, threshold ratings and tiered weighted totals."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

BASE_METRICS = ("aesthetic", "dynamic", "smoothness", "semantic", "naturalness")
DRIFT_METRICS = ("drift_aesthetic", "drift_smoothness", "drift_semantic", "drift_naturalness")

SHORT_WEIGHTS = {"aesthetic": Fraction(1, 10), "dynamic": Fraction(1, 10), "smoothness": Fraction(1, 10),
                 "semantic": Fraction(35, 100), "naturalness": Fraction(35, 100)}
LONG_WEIGHTS = {"aesthetic": Fraction(3, 100), "dynamic": Fraction(3, 100), "smoothness": Fraction(3, 100),
                "semantic": Fraction(255, 1000), "naturalness": Fraction(255, 1000),
                **{m: Fraction(99, 1000) for m in DRIFT_METRICS}}
THROUGHPUT_WEIGHT = Fraction(1, 10)


class ScoreError(ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    """Direction, normalization bounds (``None`` = use raw values) and nine thresholds."""

    name: str
    higher_better: bool
    bounds: Optional[tuple[float, float]]
    thresholds: tuple[float, ...]

    def __post_init__(self):
        t = tuple(float(x) for x in self.thresholds)
        if len(t) != 9:
            raise ValueError(f"{self.name}: need 9 thresholds, got {len(t)}")
        d = np.diff(t)
        if (self.higher_better and np.any(d >= 0)) or (not self.higher_better and np.any(d <= 0)):
            raise ValueError(f"{self.name}: thresholds not monotone for its direction")
        if self.bounds is not None and not self.bounds[0] < self.bounds[1]:
            raise ValueError(f"{self.name}: bounds must satisfy min < max")
        object.__setattr__(self, "thresholds", t)


def load_specs(path: Optional[Path] = None) -> dict[str, MetricSpec]:
    if path is None:
        text = resources.files(__package__).joinpath("thresholds.tsv").read_text()
    else:
        text = Path(path).read_text()
    specs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 13 or cols[1] not in ("higher", "lower"):
            raise ScoreError(f"threshold file line {lineno}: expected 13 columns with direction higher|lower")
        bounds = None if cols[2] == "-" else (float(cols[2]), float(cols[3]))
        specs[cols[0]] = MetricSpec(cols[0], cols[1] == "higher", bounds, tuple(float(c) for c in cols[4:]))
    return specs


def normalize(s: float, spec: MetricSpec) -> float:
    if spec.bounds is None:
        return float(s)
    lo, hi = spec.bounds
    return min(1.0, max(0.0, (s - lo) / (hi - lo)))


def discretize(s_bar: float, spec: MetricSpec) -> int:
    for i, tau in enumerate(spec.thresholds):
        if (s_bar >= tau) if spec.higher_better else (s_bar <= tau):
            return 10 - i
    return 1


def aggregate(ratings: Mapping[str, int], tier: str, throughput_rating: Optional[int] = None) -> dict:
    """Exact weighted totals. Short tier returns ``total``; long tier returns ``total_star``
    and, when a throughput rating is given, ``total``."""
    weights = {"short": SHORT_WEIGHTS, "long": LONG_WEIGHTS}.get(tier)
    if weights is None:
        raise ValueError(f"tier must be 'short' or 'long', got {tier!r}")
    missing = [m for m in weights if m not in ratings]
    if missing:
        raise ScoreError(f"missing ratings for {tier} tier: {', '.join(missing)}")
    s = sum((w * int(ratings[m]) for m, w in weights.items()), Fraction(0))
    if tier == "short":
        return {"total": s}
    out = {"total_star": s}
    if throughput_rating is not None:
        out["total"] = s + THROUGHPUT_WEIGHT * int(throughput_rating)
    return out


def drift_series_metric(series: Sequence[float]) -> float:
    """Relative change between the mean of the first and last quarter of a per-window series."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty series")
    if x.size < 2:
        raise ValueError("need at least two windows")
    q = max(1, x.size // 4)
    first, last = x[:q].mean(), x[-q:].mean()
    if first == 0:
        raise ZeroDivisionError("first-quarter mean is zero")
    return float(abs(first - last) / abs(first))


@dataclass
class MetricReport:
    video_id: str
    raw: dict = field(default_factory=dict)
    normalized: dict = field(default_factory=dict)
    ratings: dict = field(default_factory=dict)
    totals: dict = field(default_factory=dict)


def score_video(video_id: str, raw: Mapping[str, float], specs: Mapping[str, MetricSpec]) -> MetricReport:
    rep = MetricReport(video_id, dict(raw))
    for m, v in raw.items():
        rep.normalized[m] = normalize(v, specs[m])
        rep.ratings[m] = discretize(rep.normalized[m], specs[m])
    if all(m in rep.ratings for m in BASE_METRICS):
        rep.totals["short"] = aggregate(rep.ratings, "short")["total"]
    if all(m in rep.ratings for m in LONG_WEIGHTS):
        long = aggregate(rep.ratings, "long", rep.ratings.get("throughput"))
        rep.totals["long_star"] = long["total_star"]
        if "total" in long:
            rep.totals["long"] = long["total"]
    return rep


def parse_rows(lines: Iterable[str], specs: Mapping[str, MetricSpec]) -> dict[str, dict[str, float]]:
    videos: dict[str, dict[str, float]] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.rstrip("\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 3:
            raise ScoreError(f"line {lineno}: expected video_id<TAB>metric<TAB>raw, got {len(cols)} fields")
        vid, metric, raw = cols
        if metric not in specs:
            raise ScoreError(f"line {lineno}: unknown metric {metric!r}")
        try:
            value = float(raw)
        except ValueError:
            raise ScoreError(f"line {lineno}: raw value {raw!r} is not a number") from None
        if not np.isfinite(value):
            raise ScoreError(f"line {lineno}: raw value must be finite")
        videos.setdefault(vid, {})[metric] = value
    return videos


def score_file(path, specs: Optional[Mapping[str, MetricSpec]] = None) -> list[MetricReport]:
    specs = load_specs() if specs is None else specs
    with open(path) as fh:
        videos = parse_rows(fh, specs)
    return [score_video(v, raw, specs) for v, raw in videos.items()]


def write_summary(reports: Sequence[MetricReport], path) -> None:
    """Machine-readable summary: one row per video with ratings and totals."""
    metrics = [m for m in (*BASE_METRICS, *DRIFT_METRICS, "throughput")
               if any(m in r.ratings for r in reports)]
    cols = ["video_id", *metrics, "total_short", "total_long_star", "total_long"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(cols)
        for r in reports:
            w.writerow([r.video_id, *(r.ratings.get(m, "") for m in metrics),
                        *(_fmt(r.totals.get(k)) for k in ("short", "long_star", "long"))])


def _fmt(v) -> str:
    return "" if v is None else f"{float(v):.3f}"


def format_report(reports: Sequence[MetricReport]) -> str:
    lines = []
    for r in reports:
        lines.append(f"{r.video_id}")
        for m, rating in r.ratings.items():
            lines.append(f"  {m:<18} raw={r.raw[m]:<10.4g} norm={r.normalized[m]:.4f} rating={rating}")
        for k, v in r.totals.items():
            lines.append(f"  total[{k}] = {float(v):.3f}")
    return "\n".join(lines)
