"""Two-fidelity Lorenz '96 testbed.

The low and high fidelity simulators differ only in the width of a
localized bump added to the usual constant forcing of 8.  Output is the
per-location mean over long windows of a multi-century integration, which
turns a chaotic trajectory into a smooth function of the forcing.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .errors import IntegrationFailure, InvalidArgument

FIDELITIES = ("low", "high")
_PEAK_SHARPNESS = {"low": 1.0, "high": 10.0}


@dataclass(frozen=True)
class L96Config:
    n_vars: int = 40
    step_hours: float = 6.0
    total_years: float = 300.0
    window_years: float = 30.0
    init_seed: int = 0
    # one model time unit is five days
    dt: float = 0.05
    # RK4 sub-steps per output step; 1 diverges near a=2, b=5 at low fidelity
    substeps: int = 2
    days_per_year: float = 365.0

    def __post_init__(self):
        if self.n_vars < 4:
            raise InvalidArgument("n_vars must be at least 4")
        if self.step_hours <= 0 or self.dt <= 0 or self.substeps < 1:
            raise InvalidArgument("step sizes must be positive")
        ratio = self.total_years / self.window_years
        if self.window_years <= 0 or ratio < 1 or abs(ratio - round(ratio)) > 1e-9:
            raise InvalidArgument("total_years must be a positive multiple of window_years")
        if self.steps_per_window * round(ratio) != self.n_steps:
            raise InvalidArgument("window length is not a whole number of steps")

    def _steps(self, years: float) -> int:
        steps = years * self.days_per_year * 24.0 / self.step_hours
        if abs(steps - round(steps)) > 1e-6:
            raise InvalidArgument(f"{years} years is not a whole number of steps")
        return int(round(steps))

    @property
    def n_steps(self) -> int:
        return self._steps(self.total_years)

    @property
    def steps_per_window(self) -> int:
        return self._steps(self.window_years)

    @property
    def n_windows(self) -> int:
        return self.n_steps // self.steps_per_window


@dataclass
class FieldRun:
    fidelity: str
    theta: np.ndarray
    values: np.ndarray  # n_s x n_t

    def __post_init__(self):
        if self.fidelity not in FIDELITIES:
            raise InvalidArgument(f"unknown fidelity {self.fidelity!r}")
        self.theta = np.asarray(self.theta, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InvalidArgument("run values must be a 2-d (location x time) array")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgument("run values must be finite")

    @property
    def n_s(self) -> int:
        return self.values.shape[0]

    @property
    def n_t(self) -> int:
        return self.values.shape[1]


@dataclass
class ObservationSet:
    values: np.ndarray  # n_o x n_t
    locations: np.ndarray  # 1-based grid ids
    tau: float
    truth: np.ndarray | None = None
    seed: int | None = None
    noise_fraction: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.locations = np.asarray(self.locations, dtype=int)
        if self.tau < 0:
            raise InvalidArgument("tau must be non-negative")
        if self.values.shape[0] != self.locations.size:
            raise InvalidArgument("one row of values per observed location is required")


def forcing(fidelity: str, s, theta) -> np.ndarray:
    """Location-dependent forcing ``8 + a + 3ab exp(-c cos(2 pi s/40)) / exp(c)``.

    ``c`` is 1 for the low and 10 for the high fidelity version, so the
    high fidelity bump around ``s = 20`` is much narrower.
    """
    if fidelity not in _PEAK_SHARPNESS:
        raise InvalidArgument(f"unknown fidelity {fidelity!r}")
    c = _PEAK_SHARPNESS[fidelity]
    a, b = float(theta[0]), float(theta[1])
    s = np.asarray(s, dtype=float)
    return 8.0 + a + 3.0 * a * b * np.exp(-c * np.cos(2.0 * np.pi * s / 40.0) - c)


def forcing_profile(fidelity: str, theta, n_vars: int = 40) -> np.ndarray:
    return forcing(fidelity, np.arange(1, n_vars + 1), theta)


@numba.njit(cache=True)
def _tendency(y, F, out):
    n = y.size
    for i in range(n):
        out[i] = (y[(i + 1) % n] - y[(i - 2) % n]) * y[(i - 1) % n] - y[i] + F[i]


@numba.njit(cache=True)
def _rk4_step(y, F, h, k1, k2, k3, k4, tmp):
    n = y.size
    _tendency(y, F, k1)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * h * k1[i]
    _tendency(tmp, F, k2)
    for i in range(n):
        tmp[i] = y[i] + 0.5 * h * k2[i]
    _tendency(tmp, F, k3)
    for i in range(n):
        tmp[i] = y[i] + h * k3[i]
    _tendency(tmp, F, k4)
    for i in range(n):
        y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])


@numba.njit(cache=True)
def _integrate(y0, F, dt, substeps, n_steps, window, store):
    """Returns (trajectory or empty, window means, max |y|, failed step or -1)."""
    n = y0.size
    y = y0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    h = dt / substeps
    traj = np.empty((n, n_steps if store else 0))
    n_win = n_steps // window
    means = np.zeros((n, n_win))
    acc = np.zeros(n)
    ymax = 0.0
    for step in range(n_steps):
        for _ in range(substeps):
            _rk4_step(y, F, h, k1, k2, k3, k4, tmp)
        for i in range(n):
            v = y[i]
            if not np.isfinite(v):
                return traj, means, ymax, step
            acc[i] += v
            if abs(v) > ymax:
                ymax = abs(v)
            if store:
                traj[i, step] = v
        if (step + 1) % window == 0:
            w = (step + 1) // window - 1
            for i in range(n):
                means[i, w] = acc[i] / window
                acc[i] = 0.0
    return traj, means, ymax, -1


def initial_state(config: L96Config) -> np.ndarray:
    return np.random.default_rng(config.init_seed).uniform(0.0, 1.0, size=config.n_vars)


def integrate_state(y0, F, dt: float, n_steps: int, substeps: int = 1) -> np.ndarray:
    """Plain RK4 integration from ``y0``; returns the ``n_vars x n_steps`` path."""
    y0 = np.ascontiguousarray(y0, dtype=float)
    F = np.ascontiguousarray(np.broadcast_to(np.asarray(F, dtype=float), y0.shape))
    traj, _, _, failed = _integrate(y0, F, float(dt), int(substeps), int(n_steps), max(int(n_steps), 1), True)
    if failed >= 0:
        raise IntegrationFailure(int(failed))
    return traj


def integrate(config: L96Config, fidelity: str, theta, y0=None, n_steps=None) -> np.ndarray:
    """Full trajectory sampled every output step (``n_vars x n_steps``).

    Storing a 300-year run takes ~140 MB; :func:`simulate` accumulates the
    window means on the fly instead.
    """
    y0 = initial_state(config) if y0 is None else np.asarray(y0, dtype=float)
    F = forcing_profile(fidelity, theta, config.n_vars)
    n_steps = config.n_steps if n_steps is None else int(n_steps)
    return integrate_state(y0, F, config.dt, n_steps, config.substeps)


def climate_averages(trajectory, config: L96Config, fidelity: str = "high", theta=(0.0, 0.0)) -> FieldRun:
    traj = np.asarray(trajectory, dtype=float)
    if traj.shape[1] != config.n_steps or traj.shape[0] != config.n_vars:
        raise InvalidArgument(
            f"trajectory shape {traj.shape} does not match ({config.n_vars}, {config.n_steps})"
        )
    w = config.steps_per_window
    means = traj.reshape(config.n_vars, config.n_windows, w).mean(axis=2)
    return FieldRun(fidelity, np.asarray(theta, dtype=float), means)


def simulate(config: L96Config, fidelity: str, theta, return_max: bool = False):
    """Run the simulator at ``theta`` and return its window-averaged FieldRun."""
    y0 = initial_state(config)
    F = forcing_profile(fidelity, theta, config.n_vars)
    _, means, ymax, failed = _integrate(
        y0, F, config.dt, config.substeps, config.n_steps, config.steps_per_window, False
    )
    if failed >= 0:
        raise IntegrationFailure(int(failed), f"{fidelity} run at theta={list(theta)} diverged")
    run = FieldRun(fidelity, np.asarray(theta, dtype=float), means)
    return (run, ymax) if return_max else run


def make_observations(run: FieldRun, noise_fraction: float, seed: int, n_obs: int | None = None) -> ObservationSet:
    """Add white noise with sd ``noise_fraction`` times the field's sd.

    Observed locations are the first ``n_obs`` grid points (all by default).
    """
    if run.fidelity != "high":
        raise InvalidArgument("observations are generated from a high fidelity run")
    if noise_fraction < 0:
        raise InvalidArgument("noise_fraction must be non-negative")
    n_obs = run.n_s if n_obs is None else int(n_obs)
    tau = float(noise_fraction * np.std(run.values))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, 1.0, size=(n_obs, run.n_t)) * tau
    return ObservationSet(
        values=run.values[:n_obs] + noise,
        locations=np.arange(1, n_obs + 1),
        tau=tau,
        truth=run.theta.copy(),
        seed=seed,
        noise_fraction=noise_fraction,
    )


# ---------------------------------------------------------------- CSV I/O


def write_run_csv(run: FieldRun, path) -> None:
    d = run.theta.size
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["fidelity", *[f"theta_{i + 1}" for i in range(d)], "s", "t", "value"])
        th = [repr(float(v)) for v in run.theta]
        for s in range(run.n_s):
            for t in range(run.n_t):
                w.writerow([run.fidelity, *th, s + 1, t + 1, repr(float(run.values[s, t]))])


def read_run_csv(path) -> FieldRun:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    d = len(header) - 4
    fid = rows[0][0]
    theta = np.array([float(v) for v in rows[0][1 : 1 + d]])
    s = np.array([int(r[1 + d]) for r in rows])
    t = np.array([int(r[2 + d]) for r in rows])
    vals = np.empty((s.max(), t.max()))
    vals[s - 1, t - 1] = [float(r[3 + d]) for r in rows]
    return FieldRun(fid, theta, vals)


def write_observations(obs: ObservationSet, path, manifest_path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["s", "t", "value"])
        for i, s in enumerate(obs.locations):
            for t in range(obs.values.shape[1]):
                w.writerow([int(s), t + 1, repr(float(obs.values[i, t]))])
    lines = [f"tau={obs.tau!r}", f"seed={obs.seed}", f"noise_fraction={obs.noise_fraction!r}"]
    if obs.truth is not None:
        lines.append("truth=" + ",".join(repr(float(v)) for v in obs.truth))
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_observations(path, manifest_path) -> ObservationSet:
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    s = np.array([int(r[0]) for r in rows])
    t = np.array([int(r[1]) for r in rows])
    locs = np.unique(s)
    vals = np.empty((locs.size, t.max()))
    vals[np.searchsorted(locs, s), t - 1] = [float(r[2]) for r in rows]
    meta = dict(
        line.split("=", 1) for line in Path(manifest_path).read_text(encoding="utf-8").splitlines() if line
    )
    truth = np.array([float(v) for v in meta["truth"].split(",")]) if "truth" in meta else None
    seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
    nf = None if meta.get("noise_fraction") in (None, "None") else float(meta["noise_fraction"])
    return ObservationSet(vals, locs, float(meta["tau"]), truth, seed, nf)
