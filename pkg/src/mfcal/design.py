"""Space-filling initial designs over a box of input parameters."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist, pdist, squareform

from .errors import InvalidArgument


@dataclass(frozen=True)
class Hyperrectangle:
    names: tuple[str, ...]
    lo: tuple[float, ...]
    hi: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.names) == len(self.lo) == len(self.hi)):
            raise InvalidArgument("names, lo and hi must have equal length")
        if not 1 <= len(self.names) <= 10:
            raise InvalidArgument("between 1 and 10 dimensions are supported")
        if len(set(self.names)) != len(self.names):
            raise InvalidArgument("dimension names must be unique")
        for name, lo, hi in zip(self.names, self.lo, self.hi):
            if not lo < hi:
                raise InvalidArgument(f"empty interval for {name}: [{lo}, {hi}]")

    @classmethod
    def from_pairs(cls, dims) -> Hyperrectangle:
        """Build from an iterable of ``(name, lo, hi)`` triples."""
        dims = list(dims)
        return cls(
            tuple(str(d[0]) for d in dims),
            tuple(float(d[1]) for d in dims),
            tuple(float(d[2]) for d in dims),
        )

    @property
    def ndim(self) -> int:
        return len(self.names)

    @property
    def width(self) -> np.ndarray:
        return np.asarray(self.hi) - np.asarray(self.lo)

    def to_unit(self, theta) -> np.ndarray:
        return (np.asarray(theta, dtype=float) - np.asarray(self.lo)) / self.width

    def from_unit(self, u) -> np.ndarray:
        return np.asarray(self.lo) + np.asarray(u, dtype=float) * self.width

    def contains(self, theta) -> bool:
        theta = np.asarray(theta, dtype=float)
        return bool(np.all(theta >= self.lo) and np.all(theta <= self.hi))

    def center(self) -> np.ndarray:
        return 0.5 * (np.asarray(self.lo) + np.asarray(self.hi))


@dataclass(frozen=True)
class Design:
    points: np.ndarray
    bounds: Hyperrectangle

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        object.__setattr__(self, "points", pts)
        if pts.shape[1] != self.bounds.ndim:
            raise InvalidArgument("points do not match the dimension of the bounds")
        if not all(self.bounds.contains(p) for p in pts):
            raise InvalidArgument("design point outside bounds")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def unit_points(self) -> np.ndarray:
        return self.bounds.to_unit(self.points)

    def min_distance(self) -> float:
        """Smallest pairwise Euclidean distance in unit-scaled coordinates."""
        if len(self) < 2:
            return float("inf")
        return float(pdist(self.unit_points).min())


def _greedy_farthest(unit: np.ndarray, n: int, first: int) -> list[int]:
    chosen = [first]
    dmin = np.linalg.norm(unit - unit[first], axis=1)
    for _ in range(n - 1):
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, np.linalg.norm(unit - unit[nxt], axis=1))
    return chosen


def maximin_design(
    n: int, bounds: Hyperrectangle, pool_size: int | None = None, seed: int = 0
) -> Design:
    """Greedy maximin selection of ``n`` points from a seeded uniform pool.

    The pool is drawn in unit-scaled coordinates, so for a fixed seed the
    unit coordinates of the result do not depend on the bounds.  Selection
    starts at the pool point farthest from the cube centre and then
    repeatedly adds the candidate whose distance to the chosen set is
    largest.
    """
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    if pool_size is None:
        pool_size = 200 * n
    if n > pool_size:
        raise InvalidArgument(f"n={n} exceeds pool_size={pool_size}")
    rng = np.random.default_rng(seed)
    pool = rng.uniform(size=(pool_size, bounds.ndim))
    first = int(np.argmax(np.linalg.norm(pool - 0.5, axis=1)))
    idx = _greedy_farthest(pool, n, first)
    return Design(bounds.from_unit(pool[idx]), bounds)


def nested_indices(design: Design, m: int) -> list[int]:
    """Indices (ascending) of a greedy maximin subset of size ``m``."""
    n = len(design)
    if not 1 <= m <= n:
        raise InvalidArgument(f"subset size {m} outside [1, {n}]")
    if m == n:
        return list(range(n))
    unit = design.unit_points
    if m == 1:
        centre = unit.mean(axis=0)
        return [int(np.argmin(np.linalg.norm(unit - centre, axis=1)))]
    dist = squareform(pdist(unit))
    i, j = np.unravel_index(int(np.argmax(dist)), dist.shape)
    chosen = [int(i), int(j)]
    dmin = np.minimum(dist[i], dist[j])
    for _ in range(m - 2):
        dmin[chosen] = -1.0
        nxt = int(np.argmax(dmin))
        chosen.append(nxt)
        dmin = np.minimum(dmin, dist[nxt])
    return sorted(chosen)


def nested_subset(design: Design, m: int) -> Design:
    return Design(design.points[nested_indices(design, m)], design.bounds)


def nearest_distance(points, candidates, bounds: Hyperrectangle) -> np.ndarray:
    """Unit-scaled distance from each candidate to its nearest design point."""
    return cdist(bounds.to_unit(candidates), bounds.to_unit(points)).min(axis=1)


def write_design_csv(design: Design, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(design.bounds.names)
        for p in design.points:
            w.writerow([repr(float(v)) for v in p])


def read_design_csv(path, bounds: Hyperrectangle) -> Design:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != bounds.names:
        raise InvalidArgument(f"design header {rows[0]} does not match {bounds.names}")
    pts = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    return Design(pts.reshape(-1, bounds.ndim), bounds)
