"""Posterior diagnostics: histogram JS divergence, 1-D KDE, p-boxes, MAP/ranges.

Curves are written as comma-separated text (the numeric source of truth) and
as bare-bones SVG line plots for a quick look.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DomainError


@dataclass
class HistogramGrid:
    """Equal-width bins over fixed per-dimension ranges.

    Samples outside a range are clipped into the edge bin, so every sample is
    counted and the PMF stays normalised.
    """

    ranges: Sequence[tuple]
    bins: int = 100

    def __post_init__(self):
        self.ranges = [tuple(map(float, r)) for r in self.ranges]
        if self.bins < 2:
            raise ConfigError("histogram needs at least 2 bins")
        if any(not hi > lo for lo, hi in self.ranges):
            raise ConfigError("histogram ranges must have hi > lo")

    @property
    def dim(self):
        return len(self.ranges)

    def bin_index(self, samples):
        x = np.atleast_2d(np.asarray(samples, dtype=float))
        if x.shape[1] != self.dim:
            raise ConfigError(f"samples have {x.shape[1]} dims, grid has {self.dim}")
        lo = np.array([r[0] for r in self.ranges])
        hi = np.array([r[1] for r in self.ranges])
        idx = np.floor((x - lo) / (hi - lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def pmf(self, samples):
        """Sparse PMF: (occupied bin index rows, probabilities)."""
        cells, counts = np.unique(self.bin_index(samples), axis=0, return_counts=True)
        return cells, counts / counts.sum()


def js_divergence(a, b, grid: HistogramGrid) -> float:
    """Jensen-Shannon divergence (natural log) between binned sample sets."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ConfigError("js_divergence needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ConfigError("sample sets differ in dimension")
    ca, pa = grid.pmf(a)
    cb, pb = grid.pmf(b)
    cells, inv = np.unique(np.concatenate([ca, cb]), axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    p = np.zeros(len(cells))
    q = np.zeros(len(cells))
    p[inv[: len(ca)]] = pa
    q[inv[len(ca) :]] = pb
    return pmf_js(p, q)


def pmf_js(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    m = 0.5 * (p + q)

    def kl(x):
        nz = x > 0
        return float(np.sum(x[nz] * np.log(x[nz] / m[nz])))

    return float(min(max(0.5 * kl(p) + 0.5 * kl(q), 0.0), math.log(2)))


# ---------------------------------------------------------------------------
# kernel density


@dataclass
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float


def silverman_bandwidth(x):
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1)
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def kde_eval(samples, bandwidth, points):
    samples = np.asarray(samples, dtype=float)
    points = np.asarray(points, dtype=float)
    out = np.zeros(points.shape)
    norm = 1.0 / (samples.size * bandwidth * math.sqrt(2 * math.pi))
    # chunk over samples to bound memory
    for s in range(0, samples.size, 4096):
        z = (points[..., None] - samples[s : s + 4096]) / bandwidth
        out += np.exp(-0.5 * z * z).sum(axis=-1)
    return out * norm


def kde_1d(samples, bandwidth="silverman", n_grid=512) -> KdeCurve:
    """Gaussian KDE on ``n_grid`` points spanning the sample range +-3 bandwidths."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ConfigError("KDE needs at least 2 samples")
    if bandwidth == "silverman":
        h = silverman_bandwidth(x)
    else:
        h = float(bandwidth)
    if not h > 0:
        raise DomainError("samples have zero spread; KDE would be a degenerate spike")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, n_grid)
    return KdeCurve(grid, kde_eval(x, h, grid), h)


# ---------------------------------------------------------------------------
# p-boxes


@dataclass
class PBox:
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    alpha: float

    def __post_init__(self):
        if np.any(self.lower > self.upper + 1e-12):
            raise DomainError("p-box lower CDF exceeds upper CDF")

    def encloses(self, other: "PBox", tol=1e-12):
        return bool(np.all(self.lower <= other.lower + tol) and np.all(self.upper >= other.upper - tol))

    def contains_cdf(self, cdf, tol=1e-12):
        cdf = np.asarray(cdf)
        return bool(np.all(cdf >= self.lower - tol) and np.all(cdf <= self.upper + tol))


def hpd_subset(samples, log_post, alpha):
    """The ceil(alpha*N) samples with the highest log-posterior (stable order)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    n_keep = math.ceil(alpha * len(samples))
    if n_keep == 0:
        raise ConfigError("no samples retained for the p-box")
    order = np.argsort(-np.asarray(log_post, dtype=float), kind="stable")
    return samples[np.sort(order[:n_keep])]


def pbox(samples, log_post, alpha, cdf: Callable, grid) -> PBox:
    """Envelope of ``cdf(hyper, grid)`` over the HPD subset of the chain."""
    grid = np.asarray(grid, dtype=float)
    kept = hpd_subset(samples, log_post, alpha)
    curves = np.array([np.clip(cdf(h, grid), 0.0, 1.0) for h in kept])
    # guard tiny MC/rounding non-monotonicity
    curves = np.maximum.accumulate(curves, axis=1)
    return PBox(grid, curves.min(axis=0), curves.max(axis=0), float(alpha))


# ---------------------------------------------------------------------------
# MAP and reduced ranges


@dataclass
class ReducedRange:
    intervals: list
    multimodal: bool

    @property
    def span(self):
        return (self.intervals[0][0], self.intervals[-1][1])


def _level_intervals(grid, dens, level):
    above = dens >= level
    out = []
    i = 0
    n = len(grid)
    while i < n:
        if not above[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and above[j + 1]:
            j += 1
        left = grid[i]
        if i > 0:
            left = np.interp(level, [dens[i - 1], dens[i]], [grid[i - 1], grid[i]])
        right = grid[j]
        if j < n - 1:
            right = np.interp(level, [dens[j + 1], dens[j]], [grid[j + 1], grid[j]])
        out.append((float(left), float(right)))
        i = j + 1
    return out


def reduced_range(samples, threshold=0.1) -> ReducedRange:
    """Set where the peak-normalised KDE reaches ``threshold``, within the sample range."""
    x = np.asarray(samples, dtype=float).ravel()
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return ReducedRange([(lo, hi)], False)
    if threshold <= 0:
        return ReducedRange([(lo, hi)], False)
    curve = kde_1d(x)
    dens = curve.density / curve.density.max()
    ivs = [(max(a, lo), min(b, hi)) for a, b in _level_intervals(curve.grid, dens, threshold)]
    ivs = [(a, b) for a, b in ivs if b >= a]
    return ReducedRange(ivs, len(ivs) > 1)


def map_and_ranges(samples, log_post, names, threshold=0.1):
    """MAP (highest recorded log-posterior sample) and per-parameter reduced ranges."""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ConfigError("empty chain")
    best = int(np.argmax(np.asarray(log_post, dtype=float)))
    ranges = {n: reduced_range(samples[:, k], threshold) for k, n in enumerate(names)}
    return samples[best].copy(), ranges


# ---------------------------------------------------------------------------
# writers


def write_table(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(v if isinstance(v, str) else repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_curve(path, columns: dict):
    cols = list(columns)
    data = np.column_stack([np.asarray(columns[c], dtype=float) for c in cols])
    return write_table(path, cols, data)


def write_svg(path, x, series: dict, title="", width=480, height=320):
    """Minimal SVG line plot of one or more series over a shared x."""
    x = np.asarray(x, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    allv = np.concatenate(list(ys.values()))
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(allv.min()), float(allv.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    m = 40

    def sx(v):
        return m + (v - x0) / (x1 - x0) * (width - 2 * m)

    def sy(v):
        return height - m - (v - y0) / (y1 - y0) * (height - 2 * m)

    colours = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="{m}" y="{m}" width="{width - 2 * m}" height="{height - 2 * m}" fill="none" stroke="#888"/>',
        f'<text x="{width / 2:.1f}" y="{m / 2:.1f}" text-anchor="middle" font-size="13">{title}</text>',
        f'<text x="{m}" y="{height - m / 3:.1f}" font-size="10">{x0:.4g}</text>',
        f'<text x="{width - m}" y="{height - m / 3:.1f}" font-size="10" text-anchor="end">{x1:.4g}</text>',
    ]
    for i, (name, y) in enumerate(ys.items()):
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        c = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{width - m - 4}" y="{m + 14 * (i + 1)}" font-size="10" text-anchor="end" fill="{c}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    return Path(path)
