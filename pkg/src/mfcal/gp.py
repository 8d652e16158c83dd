"""Gaussian-process models for EOF coefficient processes.

Each coefficient process has a linear-in-parameters mean over named
features of ``(theta, t)`` and a separable Matern covariance with the
smoothness fixed at 2.  Hyperparameters are fixed at point estimates:
the mean by least squares, then variance and ranges by maximum likelihood
on the residuals.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, special
from scipy.linalg import cho_factor, cho_solve

from .errors import EstimationFailure, InvalidArgument, SingularDesign

RANGE_BOUNDS = (1e-6, 10.0)
VARIANCE_BOUNDS = (1e-10, 1e6)

SEG_OBS, SEG_HIGH, SEG_LOW = 0, 1, 2


def matern2(h, lam=1.0):
    """Matern correlation with smoothness 2 at lag ``h`` and range ``lam``.

    ``0.5 x^2 K_2(x)`` with ``x = |h|/lam``, where
    ``K_2(x) = K_0(x) + 2 K_1(x)/x``; equal to 1 at ``h = 0``.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise InvalidArgument("Matern range must be positive")
    x = np.abs(np.asarray(h, dtype=float)) / lam
    with np.errstate(invalid="ignore", over="ignore"):
        # x^2 K_2(x) = x^2 K_0(x) + 2 x K_1(x)
        val = 0.5 * (x * x * special.k0(x) + 2.0 * x * special.k1(x))
    val = np.where(x == 0, 1.0, val)
    # k0/k1 underflow to 0 for large x; nan only from 0 * inf at tiny x
    val = np.where(np.isnan(val), 1.0, val)
    return val if val.ndim else float(val)


@dataclass(frozen=True)
class MaternKernel:
    """``variance * prod_i M_2(dtheta_i / range_i)`` in unit-scaled inputs.

    ``time_range`` of ``None`` makes distinct times independent; otherwise
    time enters as one more factor with lag ``(t1 - t2) / n_t``.
    """

    variance: float
    ranges: tuple[float, ...]
    time_range: float | None = None
    nu: float = 2.0

    def __post_init__(self):
        if self.nu != 2.0:
            raise InvalidArgument("only smoothness 2 is supported")
        if not self.variance > 0:
            raise InvalidArgument("kernel variance must be positive")
        if any(not r > 0 for r in self.ranges):
            raise InvalidArgument("kernel ranges must be positive")
        if self.time_range is not None and not self.time_range > 0:
            raise InvalidArgument("time range must be positive")

    @property
    def n_params(self) -> int:
        return 1 + len(self.ranges) + (self.time_range is not None)

    def to_vector(self) -> np.ndarray:
        v = [self.variance, *self.ranges]
        if self.time_range is not None:
            v.append(self.time_range)
        return np.log(np.asarray(v, dtype=float))

    def from_vector(self, logv) -> MaternKernel:
        v = np.exp(np.asarray(logv, dtype=float))
        d = len(self.ranges)
        tr = float(v[1 + d]) if self.time_range is not None else None
        return replace(self, variance=float(v[0]), ranges=tuple(float(x) for x in v[1 : 1 + d]), time_range=tr)


def correlation_matrix(theta1, t1, theta2, t2, kernel: MaternKernel, n_t: int) -> np.ndarray:
    """Correlations between two point sets given as unit-scaled inputs and times."""
    theta1 = np.atleast_2d(np.asarray(theta1, dtype=float))
    theta2 = np.atleast_2d(np.asarray(theta2, dtype=float))
    if theta1.shape[1] != len(kernel.ranges) or theta2.shape[1] != len(kernel.ranges):
        raise InvalidArgument("input dimension does not match the kernel")
    t1 = np.asarray(t1, dtype=float).reshape(-1)
    t2 = np.asarray(t2, dtype=float).reshape(-1)
    C = np.ones((theta1.shape[0], theta2.shape[0]))
    for i, lam in enumerate(kernel.ranges):
        C *= matern2(theta1[:, i, None] - theta2[None, :, i], lam)
    if kernel.time_range is None:
        C *= t1[:, None] == t2[None, :]
    else:
        C *= matern2((t1[:, None] - t2[None, :]) / n_t, kernel.time_range)
    return C


def separable_correlation(p1, p2, kernel: MaternKernel, n_t: int = 1) -> float:
    """Correlation between two ``(unit theta, t)`` points."""
    (th1, t1), (th2, t2) = p1, p2
    th1, th2 = np.atleast_1d(th1), np.atleast_1d(th2)
    if th1.size != th2.size:
        raise InvalidArgument("points have different dimensions")
    return float(correlation_matrix(th1[None], [t1], th2[None], [t2], kernel, n_t)[0, 0])


# ------------------------------------------------------------------ means

_SQRT_PROD = re.compile(r"^(\w+)\*sqrt\((\w+)\)$")


@dataclass(frozen=True)
class MeanBasis:
    """Named features: ``const``, ``<dim>``, ``<dim>*sqrt(<dim>)``, ``cos_t``, ``sin_t``."""

    features: tuple[str, ...]
    dim_names: tuple[str, ...]

    def __post_init__(self):
        for f in self.features:
            self._column(f)  # validate eagerly

    def _column(self, f):
        names = self.dim_names
        if f in ("const", "cos_t", "sin_t"):
            return f, None
        if f in names:
            return "lin", names.index(f)
        m = _SQRT_PROD.match(f)
        if m and m.group(1) in names and m.group(2) in names:
            return "prodsqrt", (names.index(m.group(1)), names.index(m.group(2)))
        raise InvalidArgument(f"unknown mean feature {f!r}")

    def design_matrix(self, theta, t, n_t: int) -> np.ndarray:
        theta = np.atleast_2d(np.asarray(theta, dtype=float))
        t = np.asarray(t, dtype=float).reshape(-1)
        cols = []
        for f in self.features:
            kind, arg = self._column(f)
            if kind == "const":
                cols.append(np.ones(theta.shape[0]))
            elif kind == "lin":
                cols.append(theta[:, arg])
            elif kind == "prodsqrt":
                cols.append(theta[:, arg[0]] * np.sqrt(np.maximum(theta[:, arg[1]], 0.0)))
            elif kind == "cos_t":
                cols.append(np.cos(2 * np.pi * t / n_t))
            else:
                cols.append(np.sin(2 * np.pi * t / n_t))
        return np.column_stack(cols) if cols else np.zeros((theta.shape[0], 0))


def fit_mean_ols(F, y) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares coefficients and residuals; rank-deficient designs raise."""
    F = np.asarray(F, dtype=float)
    y = np.asarray(y, dtype=float)
    if F.shape[1] == 0:
        return np.zeros(0), y.copy()
    if F.shape[0] < F.shape[1] or np.linalg.matrix_rank(F) < F.shape[1]:
        raise SingularDesign(f"mean design matrix of shape {F.shape} is rank deficient")
    gamma, *_ = np.linalg.lstsq(F, y, rcond=None)
    return gamma, y - F @ gamma


# ------------------------------------------------------------ ML fitting


def _groups(t, independent_time: bool):
    if not independent_time:
        return [np.arange(len(t))]
    return [np.flatnonzero(t == tv) for tv in np.unique(t)]


def gaussian_nll(theta_unit, t, resid, kernel: MaternKernel, nugget: float, n_t: int) -> float:
    """Negative log-likelihood of residuals under ``K + nugget I``."""
    theta_unit = np.atleast_2d(theta_unit)
    groups = _groups(np.asarray(t), kernel.time_range is None)
    same = len(groups) > 1 and all(
        g.size == groups[0].size and np.array_equal(theta_unit[g], theta_unit[groups[0]]) for g in groups
    )
    total = 0.0
    cache = None
    for g in groups:
        if cache is None or not same:
            K = kernel.variance * correlation_matrix(theta_unit[g], t[g], theta_unit[g], t[g], kernel, n_t)
            K[np.diag_indices_from(K)] += nugget
            try:
                cache = cho_factor(K, lower=True, check_finite=False)
            except np.linalg.LinAlgError:
                return math.inf
            logdet = 2.0 * np.sum(np.log(np.diag(cache[0])))
        r = resid[g]
        total += 0.5 * (logdet + r @ cho_solve(cache, r, check_finite=False) + g.size * math.log(2 * math.pi))
    return float(total) if np.isfinite(total) else math.inf


def fit_kernel_ml(
    theta_unit,
    t,
    resid,
    template: MaternKernel,
    nugget: float,
    n_t: int,
    seed: int = 0,
    restarts: int = 5,
    maxfev: int = 2000,
    tol: float = 1e-8,
) -> tuple[MaternKernel, float]:
    """Maximum-likelihood variance and ranges by bounded Nelder-Mead restarts.

    Optimizes over log parameters; the first start uses the residual
    variance and unit ranges of 0.5, the others are seeded random draws.
    Returns the best kernel and its negative log-likelihood.
    """
    theta_unit = np.atleast_2d(np.asarray(theta_unit, dtype=float))
    t = np.asarray(t)
    resid = np.asarray(resid, dtype=float)
    if resid.size < 3:
        raise InvalidArgument("at least 3 residuals are needed for ML fitting")
    n_range = template.n_params - 1
    lb = np.log([VARIANCE_BOUNDS[0]] + [RANGE_BOUNDS[0]] * n_range)
    ub = np.log([VARIANCE_BOUNDS[1]] + [RANGE_BOUNDS[1]] * n_range)
    var0 = max(float(np.var(resid)), 1e-8)
    rng = np.random.default_rng(seed)
    starts = [np.r_[math.log(var0), np.full(n_range, math.log(0.5))]]
    for _ in range(restarts - 1):
        starts.append(
            np.r_[math.log(var0) + rng.uniform(-2, 2), rng.uniform(math.log(0.05), math.log(2.0), n_range)]
        )

    def objective(p):
        return gaussian_nll(theta_unit, t, resid, template.from_vector(p), nugget, n_t)

    best_p, best_f = None, math.inf
    for p0 in starts:
        p0 = np.clip(p0, lb, ub)
        res = optimize.minimize(
            objective,
            p0,
            method="Nelder-Mead",
            bounds=list(zip(lb, ub)),
            options={"maxfev": maxfev, "fatol": tol, "xatol": 1e-6},
        )
        if np.isfinite(res.fun) and res.fun < best_f:
            best_p, best_f = res.x, float(res.fun)
    if best_p is None:
        raise EstimationFailure("likelihood not finite at any start")
    return template.from_vector(best_p), best_f


# ------------------------------------------------------------ processes


@dataclass(frozen=True)
class CoefficientGP:
    name: str
    mean: MeanBasis
    gamma: np.ndarray
    kernel: MaternKernel
    n_t: int
    nll: float = float("nan")

    def mean_at(self, theta_raw, t) -> np.ndarray:
        F = self.mean.design_matrix(theta_raw, t, self.n_t)
        return F @ self.gamma if F.shape[1] else np.zeros(F.shape[0])

    def cov(self, theta1_unit, t1, theta2_unit, t2) -> np.ndarray:
        return self.kernel.variance * correlation_matrix(theta1_unit, t1, theta2_unit, t2, self.kernel, self.n_t)


def fit_coefficient_gp(
    name: str,
    theta_raw,
    theta_unit,
    t,
    y,
    mean: MeanBasis,
    n_t: int,
    time_kernel: bool = False,
    nugget_rel: float = 1e-6,
    seed: int = 0,
    restarts: int = 5,
    maxfev: int = 2000,
) -> CoefficientGP:
    """OLS mean followed by ML covariance on the residuals."""
    F = mean.design_matrix(theta_raw, t, n_t)
    gamma, resid = fit_mean_ols(F, y)
    d = np.atleast_2d(theta_unit).shape[1]
    template = MaternKernel(1.0, (0.5,) * d, 0.5 if time_kernel else None)
    nugget = nugget_rel * max(float(np.var(resid)), 1e-12)
    kernel, nll = fit_kernel_ml(theta_unit, np.asarray(t), resid, template, nugget, n_t, seed, restarts, maxfev)
    return CoefficientGP(name, mean, gamma, kernel, n_t, nll)


@dataclass(frozen=True)
class GpHyperParams:
    """All fitted coefficient processes plus the white-noise variances.

    ``low`` are the processes on the first basis (low fidelity EOFs, or the
    high fidelity EOFs in high-only mode), ``disc`` those on the
    discrepancy EOFs (empty in high-only mode).  ``tau_L_sq`` then plays
    the role of the high-run truncation variance.
    """

    low: tuple[CoefficientGP, ...]
    disc: tuple[CoefficientGP, ...]
    tau_sq: float
    tau_L_sq: float
    tau_delta_sq: float

    @property
    def processes(self) -> tuple[CoefficientGP, ...]:
        return self.low + self.disc


@dataclass
class CoefficientSlots:
    """Entries of the stacked coefficient vector: process, input, time, segment."""

    proc: np.ndarray
    theta_raw: np.ndarray
    theta_unit: np.ndarray
    t: np.ndarray
    segment: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.proc.size

    def take(self, idx) -> CoefficientSlots:
        return CoefficientSlots(
            self.proc[idx], self.theta_raw[idx], self.theta_unit[idx], self.t[idx], self.segment[idx]
        )


def check_slot_order(slots: CoefficientSlots) -> None:
    seg = slots.segment
    if np.any(np.diff(seg) < 0):
        raise InvalidArgument("coefficient slots must be ordered observation, high, then low segments")


def slot_mean(params: GpHyperParams, slots: CoefficientSlots) -> np.ndarray:
    mean = np.zeros(len(slots))
    for p, proc in enumerate(params.processes):
        idx = np.flatnonzero(slots.proc == p)
        if idx.size:
            mean[idx] = proc.mean_at(slots.theta_raw[idx], slots.t[idx])
    return mean


def slot_cov(params: GpHyperParams, a: CoefficientSlots, b: CoefficientSlots) -> np.ndarray:
    """Prior covariance between two slot sets (zero across processes)."""
    out = np.zeros((len(a), len(b)))
    for p, proc in enumerate(params.processes):
        ia = np.flatnonzero(a.proc == p)
        ib = np.flatnonzero(b.proc == p)
        if ia.size and ib.size:
            out[np.ix_(ia, ib)] = proc.cov(a.theta_unit[ia], a.t[ia], b.theta_unit[ib], b.t[ib])
    return out


def assemble_sigma_x(params: GpHyperParams, slots: CoefficientSlots) -> tuple[np.ndarray, np.ndarray]:
    """Covariance and mean of the stacked coefficient vector."""
    check_slot_order(slots)
    S = slot_cov(params, slots, slots)
    S = 0.5 * (S + S.T)
    return S, slot_mean(params, slots)


def write_hyperparam_report(params: GpHyperParams, dim_names, path) -> None:
    """Table of mean coefficients, sd and ranges, one row per process."""
    n_gamma = max((p.gamma.size for p in params.processes), default=0)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["process", *[f"gamma_{i}" for i in range(n_gamma)], "sigma", *[f"lambda_{n}" for n in dim_names], "lambda_t"]
        )
        for p in params.processes:
            g = [repr(float(v)) for v in p.gamma] + [""] * (n_gamma - p.gamma.size)
            lt = "" if p.kernel.time_range is None else repr(p.kernel.time_range)
            w.writerow([p.name, *g, repr(math.sqrt(p.kernel.variance)), *[repr(r) for r in p.kernel.ranges], lt])
        w.writerow(["tau_sq", repr(params.tau_sq)])
        w.writerow(["tau_L_sq", repr(params.tau_L_sq)])
        w.writerow(["tau_delta_sq", repr(params.tau_delta_sq)])
