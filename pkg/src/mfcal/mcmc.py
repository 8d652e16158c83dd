"""Random-walk Metropolis-Hastings over the input box and posterior summaries."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .design import Hyperrectangle
from .errors import ChainAborted, InsufficientData, InvalidArgument


@dataclass(frozen=True)
class McmcConfig:
    n_chains: int = 5
    n_iter: int = 20000
    burn_in: int = 5000
    proposal_sds: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_iter > 0 and not 0 <= self.burn_in < self.n_iter:
            raise InvalidArgument("burn_in must be smaller than n_iter")
        if self.proposal_sds is not None and any(not s > 0 for s in self.proposal_sds):
            raise InvalidArgument("proposal sds must be positive")


def default_proposal_sds(design_points) -> tuple[float, ...]:
    """One tenth of the per-dimension sd of the initial design."""
    return tuple(float(v) for v in 0.1 * np.std(np.asarray(design_points, dtype=float), axis=0, ddof=1))


@dataclass
class PosteriorChain:
    samples: np.ndarray  # kept (post burn-in) draws, n_kept x d
    log_post: np.ndarray  # log posterior of every kept draw
    accepted: int
    proposed: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.proposed if self.proposed else 0.0


def run_chain(
    log_post: Callable, bounds: Hyperrectangle, sds, n_iter: int, burn_in: int, rng: np.random.Generator, chain: int = 0
) -> PosteriorChain:
    d = bounds.ndim
    sds = np.asarray(sds, dtype=float)
    if n_iter == 0:
        return PosteriorChain(np.zeros((0, d)), np.zeros(0), 0, 0)
    lo, hi = np.asarray(bounds.lo), np.asarray(bounds.hi)
    x = bounds.from_unit(rng.uniform(size=d))
    lp = float(log_post(x))
    for _ in range(1000):
        if np.isfinite(lp):
            break
        x = bounds.from_unit(rng.uniform(size=d))
        lp = float(log_post(x))
    else:
        raise ChainAborted(chain, 0, x, "no start with finite posterior found")
    n_keep = n_iter - burn_in
    samples = np.empty((n_keep, d))
    trace = np.empty(n_keep)
    accepted = 0
    steps = rng.normal(size=(n_iter, d)) * sds
    log_u = np.log(rng.uniform(size=n_iter))
    for i in range(n_iter):
        prop = x + steps[i]
        if np.all(prop >= lo) and np.all(prop <= hi):
            lp_prop = float(log_post(prop))
            if math.isnan(lp_prop):
                raise ChainAborted(chain, i, prop, "posterior returned NaN")
            if log_u[i] < lp_prop - lp:
                x, lp = prop, lp_prop
                accepted += 1
        if i >= burn_in:
            samples[i - burn_in] = x
            trace[i - burn_in] = lp
    return PosteriorChain(samples, trace, accepted, n_iter)


def run_chains(config: McmcConfig, log_post: Callable, bounds: Hyperrectangle, sds=None) -> list[PosteriorChain]:
    """Independent seeded chains from uniform random starting points.

    Proposals leaving the box have zero prior density and are rejected
    without evaluating ``log_post``.
    """
    sds = sds if sds is not None else config.proposal_sds
    if sds is None:
        raise InvalidArgument("proposal sds are required")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    return [
        run_chain(log_post, bounds, sds, config.n_iter, config.burn_in, np.random.default_rng(s), chain=c)
        for c, s in enumerate(seeds)
    ]


def pooled(chains) -> np.ndarray:
    return np.concatenate([c.samples for c in chains], axis=0)


@dataclass
class PosteriorSummary:
    mode: np.ndarray
    intervals: np.ndarray  # d x 2, central 95%
    axes: list[np.ndarray]
    density: np.ndarray  # grid_resolution ** d, normalized to unit mass on the lattice
    n_samples: int
    variances: np.ndarray

    def hpd_threshold(self, level: float = 0.95) -> float:
        """Smallest lattice density inside the highest-density region of given mass."""
        flat = np.sort(self.density.ravel())[::-1]
        k = int(np.searchsorted(np.cumsum(flat), level))
        return float(flat[min(k, flat.size - 1)])

    def density_at(self, point) -> float:
        idx = tuple(int(np.argmin(np.abs(ax - p))) for ax, p in zip(self.axes, point))
        return float(self.density[idx])

    def hpd_contains(self, point, level: float = 0.95) -> bool:
        return self.density_at(point) >= self.hpd_threshold(level)


def kde_grid(samples: np.ndarray, axes: list[np.ndarray], bandwidth: np.ndarray, chunk: int = 20000) -> np.ndarray:
    """Product-Gaussian KDE on the lattice spanned by ``axes`` (unnormalized)."""
    d = samples.shape[1]
    out = np.zeros(tuple(ax.size for ax in axes))
    letters = "abcdefghij"[:d]
    expr = ",".join(f"n{c}" for c in letters) + "->" + letters
    for start in range(0, samples.shape[0], chunk):
        part = samples[start : start + chunk]
        factors = [np.exp(-0.5 * ((part[:, i, None] - axes[i][None, :]) / bandwidth[i]) ** 2) for i in range(d)]
        out += np.einsum(expr, *factors)
    return out


def summarize(chains, bounds: Hyperrectangle, grid_resolution: int = 100) -> PosteriorSummary:
    """Pooled KDE mode, central 95% intervals and per-dimension variances.

    Bandwidth per dimension is ``n ** (-1/(d+4))`` times the sample sd; the
    mode is the first lattice maximizer of the estimate.
    """
    x = pooled(chains) if not isinstance(chains, np.ndarray) else chains
    if x.shape[0] < 100:
        raise InsufficientData(f"{x.shape[0]} pooled samples; at least 100 are needed")
    n, d = x.shape
    axes = [np.linspace(lo, hi, grid_resolution) for lo, hi in zip(bounds.lo, bounds.hi)]
    intervals = np.quantile(x, [0.025, 0.975], axis=0).T
    sd = x.std(axis=0, ddof=1)
    if np.all(sd == 0):
        mode = x[0].copy()
        dens = np.zeros(tuple([grid_resolution] * d))
        dens[tuple(int(np.argmin(np.abs(ax - p))) for ax, p in zip(axes, mode))] = 1.0
        return PosteriorSummary(mode, intervals, axes, dens, n, np.zeros(d))
    # a degenerate dimension still needs a positive bandwidth
    cell = np.asarray(bounds.width) / max(grid_resolution - 1, 1)
    bw = np.maximum(n ** (-1.0 / (d + 4)) * sd, 0.5 * cell)
    dens = kde_grid(x, axes, bw)
    dens /= dens.sum()
    idx = np.unravel_index(int(np.argmax(dens)), dens.shape)
    mode = np.array([axes[i][idx[i]] for i in range(d)])
    return PosteriorSummary(mode, intervals, axes, dens, n, x.var(axis=0, ddof=1))


def write_chains_csv(chains, path) -> None:
    d = chains[0].samples.shape[1] if chains else 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "iter", *[f"theta_{i + 1}" for i in range(d)], "log_post"])
        for c, ch in enumerate(chains):
            for i, (s, lp) in enumerate(zip(ch.samples, ch.log_post)):
                w.writerow([c, i, *[repr(float(v)) for v in s], repr(float(lp))])


def read_chains_csv(path) -> list[PosteriorChain]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    d = len(rows[0]) - 3
    by_chain: dict[int, list] = {}
    for r in rows[1:]:
        by_chain.setdefault(int(r[0]), []).append(r)
    out = []
    for c in sorted(by_chain):
        rr = by_chain[c]
        s = np.array([[float(v) for v in r[2 : 2 + d]] for r in rr])
        lp = np.array([float(r[2 + d]) for r in rr])
        out.append(PosteriorChain(s, lp, 0, 0))
    return out


def write_kde_csv(summary: PosteriorSummary, names, path) -> None:
    grids = np.meshgrid(*summary.axes, indexing="ij")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*names, "density"])
        for idx in np.ndindex(summary.density.shape):
            w.writerow([*[repr(float(g[idx])) for g in grids], repr(float(summary.density[idx]))])
