"""Toy datasets and CSV persistence."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .core import Rng

__all__ = ["Dataset", "gen_gaussian_mixture", "gen_two_moons", "read_csv", "write_csv"]


@dataclass
class Dataset:
    points: np.ndarray
    name: str = "data"
    generator_config: dict = field(default_factory=dict)
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1 and pts.size == 0:
            pts = pts.reshape(0, 0)
        if pts.ndim != 2:
            raise ValueError("points must be a 2-D array of shape (n, D)")
        if not np.isfinite(pts).all():
            raise ValueError("dataset contains non-finite entries")
        self.points = pts
        if self.labels is not None:
            self.labels = np.asarray(self.labels)
            if self.labels.shape != (pts.shape[0],):
                raise ValueError("labels must have one entry per point")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def gen_gaussian_mixture(k: int, centers, scales, n: int, rng: Rng) -> Dataset:
    """``n`` draws from an equal-weight mixture of ``k`` axis-aligned Gaussians.

    ``scales`` may be a scalar, one value per component, or a ``(k, D)`` array.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    if centers.shape[0] != k:
        raise ValueError(f"expected {k} centers, got {centers.shape[0]}")
    D = centers.shape[1]
    scales = np.asarray(scales, dtype=np.float64)
    if scales.ndim == 0:
        scales = np.full((k, D), float(scales))
    elif scales.ndim == 1:
        if scales.shape[0] != k:
            raise ValueError("need one scale per component")
        scales = np.repeat(scales[:, None], D, axis=1)
    if scales.shape != (k, D) or not (scales > 0).all():
        raise ValueError("scales must be positive with shape (k,) or (k, D)")
    if n < 0:
        raise ValueError("n must be non-negative")
    comp = rng.integers(k, size=n)
    pts = centers[comp] + scales[comp] * rng.standard_normal((n, D))
    cfg = {"kind": "gaussian_mixture", "k": k, "centers": centers.tolist(), "scales": scales.tolist(), "n": n}
    return Dataset(pts, "gaussian_mixture", cfg, comp)


def gen_two_moons(n: int, noise: float, rng: Rng) -> Dataset:
    """Two interleaved unit half-circles.

    The upper arc is centred at the origin, the lower one at ``(1, 0.5)``.
    """
    if n < 0 or noise < 0:
        raise ValueError("n and noise must be non-negative")
    n_upper = (n + 1) // 2
    n_lower = n - n_upper
    t_upper = rng.uniform(n_upper, 0.0, math.pi)
    t_lower = rng.uniform(n_lower, 0.0, math.pi)
    upper = np.stack([np.cos(t_upper), np.sin(t_upper)], axis=1)
    lower = np.stack([1.0 - np.cos(t_lower), 0.5 - np.sin(t_lower)], axis=1)
    pts = np.concatenate([upper, lower]).reshape(n, 2)
    if noise > 0:
        pts = pts + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n_upper, dtype=int), np.ones(n_lower, dtype=int)])
    return Dataset(pts, "two_moons", {"kind": "two_moons", "n": n, "noise": noise}, labels)


def write_csv(ds: Dataset, path) -> None:
    """Header ``x0,...,x{D-1}``; 17 significant digits so floats round-trip."""
    with open(path, "w", newline="") as fh:
        fh.write(",".join(f"x{j}" for j in range(ds.dim)) + "\n")
        for row in ds.points:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")


def read_csv(path, name: str | None = None) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: missing header row") from None
        D = len(header)
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) != D:
                raise ValueError(f"{path}:{reader.line_num}: expected {D} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ValueError(f"{path}:{reader.line_num}: {exc}") from None
    pts = np.array(rows, dtype=np.float64).reshape(len(rows), D)
    return Dataset(pts, name or str(path), {"kind": "csv", "path": str(path)})
