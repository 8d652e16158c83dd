"""Expected-improvement sequential design for the high fidelity simulator."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.stats import norm

from .design import Hyperrectangle
from .errors import InvalidArgument
from .gp import SEG_HIGH, SEG_OBS, CoefficientSlots, slot_cov, slot_mean
from .l96 import FieldRun, ObservationSet
from .model import FittedModel, ModelConfig, fit_model
from .rlik import StackedData, _block_diag, _chol, _segment_pieces


def ei_pointwise(Y, H_hat, sigma, f_min):
    """Closed-form ``E max{f_min - (Y - H)^2, 0}`` for ``H ~ N(H_hat, sigma^2)``.

    Vectorized over broadcastable arguments.  ``sigma = 0`` gives the
    deterministic improvement.
    """
    Y, H_hat, sigma, f_min = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (Y, H_hat, sigma, f_min)))
    scalar = Y.ndim == 0
    Y, H_hat, sigma, f_min = (np.atleast_1d(v) for v in (Y, H_hat, sigma, f_min))
    if np.any(sigma < 0) or np.any(f_min < 0):
        raise InvalidArgument("sigma and f_min must be non-negative")
    d = Y - H_hat
    root = np.sqrt(f_min)
    out = np.maximum(f_min - d * d, 0.0)
    pos = sigma > 0
    if np.any(pos):
        s, dd, r, f = sigma[pos], d[pos], root[pos], f_min[pos]
        qp = (dd + r) / s
        qm = (dd - r) / s
        val = (f - dd * dd - s * s) * (norm.cdf(qp) - norm.cdf(qm)) + s * (
            (r - dd) * norm.pdf(qp) + (r + dd) * norm.pdf(qm)
        )
        out[pos] = np.maximum(val, 0.0)
    return float(out[0]) if scalar else out


def compute_f_min(obs: ObservationSet, high_runs) -> np.ndarray:
    """Smallest squared residual between observations and any high fidelity run."""
    rows = np.asarray(obs.locations) - 1
    res = np.stack([(obs.values - r.values[rows]) ** 2 for r in high_runs])
    return res.min(axis=0)


class HighPredictor:
    """Conditional distribution of high fidelity output given all runs.

    Conditions the EOF coefficients at a new ``(theta, t)`` on the run part
    of the stacked data through its projected coefficients, then maps them
    through the retained EOFs.  The white-noise variance of a high run is
    added to the predictive variance.

    The truncation noise is white in theta, so at the exact setting of a
    completed high fidelity run the prediction is that run with zero
    variance.
    """

    def __init__(self, model: FittedModel):
        self.model = model
        layout, params = model.layout, model.params
        keep = [i for i, s in enumerate(layout.segments) if s.kind != SEG_OBS]
        if not keep:
            raise InvalidArgument("no model runs to condition on")
        segs = [layout.segments[i] for i in keep]
        blocks = [model.data.blocks[i] for i in keep]
        sub = replace(layout, segments=tuple(segs))
        pieces = _segment_pieces(sub, StackedData(tuple(blocks)))
        b, Ainv = [], []
        for seg, (Gf, coef, _) in zip(segs, pieces):
            b.append(coef.ravel(order="F"))
            c = seg.basis.shape[1]
            Ainv.extend([cho_solve(Gf, np.eye(c), check_finite=False) * seg.noise_var] * layout.n_t)
        b = np.concatenate(b)
        Ainv = _block_diag(Ainv)
        slots = sub.slots()
        self.slots = slots
        K = slot_cov(params, slots, slots) + Ainv
        self._cf = _chol(0.5 * (K + K.T), "run coefficient covariance")
        self._w = cho_solve(self._cf, b - slot_mean(params, slots), check_finite=False)
        self.basis = model.full_basis
        self.noise_var = model.high_noise_var
        self.n_proc = self.basis.shape[1]
        self.n_t = layout.n_t
        self._runs = [(s.theta, b) for s, b in zip(segs, blocks) if s.kind == SEG_HIGH]

    def _new_slots(self, theta) -> CoefficientSlots:
        theta = np.asarray(theta, dtype=float)
        n = self.n_proc * self.n_t
        raw = np.broadcast_to(theta, (n, theta.size)).copy()
        return CoefficientSlots(
            np.tile(np.arange(self.n_proc), self.n_t),
            raw,
            self.model.bounds.to_unit(raw),
            np.repeat(np.arange(1, self.n_t + 1), self.n_proc),
            np.full(n, SEG_OBS),
        )

    def coefficients(self, theta) -> tuple[np.ndarray, np.ndarray]:
        """Mean (n_t x c) and covariance (n_t x c x c) of coefficients at theta."""
        params = self.model.params
        new = self._new_slots(theta)
        Kn = slot_cov(params, self.slots, new)
        mean = slot_mean(params, new) + Kn.T @ self._w
        V = solve_triangular(self._cf[0], Kn, lower=True, check_finite=False)
        cov = slot_cov(params, new, new) - V.T @ V
        c = self.n_proc
        mean = mean.reshape(self.n_t, c)
        cov_t = np.stack([cov[t * c : (t + 1) * c, t * c : (t + 1) * c] for t in range(self.n_t)])
        return mean, cov_t

    def predict(self, theta, rows=None) -> tuple[np.ndarray, np.ndarray]:
        """Predictive mean and variance of H at ``theta`` (locations x times)."""
        for theta_i, values in self._runs:
            if np.array_equal(theta_i, np.asarray(theta, dtype=float)):
                H = values if rows is None else values[np.asarray(rows)]
                return H.copy(), np.zeros_like(H)
        B = self.basis if rows is None else self.basis[np.asarray(rows)]
        mean, cov = self.coefficients(theta)
        H = B @ mean.T
        var = np.einsum("sc,tcd,sd->st", B, cov, B) + self.noise_var
        return H, np.maximum(var, 0.0)


def conditional_H(s: int, t: int, theta, model: FittedModel, predictor: HighPredictor | None = None):
    """Conditional mean and variance of H at grid id ``s`` and time ``t`` (1-based)."""
    pred = predictor or HighPredictor(model)
    H, var = pred.predict(theta, rows=[s - 1])
    return float(H[0, t - 1]), float(var[0, t - 1])


@dataclass
class EiSurface:
    axes: list[np.ndarray]
    grid: np.ndarray  # n_points x d, first axis varying slowest
    values: np.ndarray
    argmax: np.ndarray

    def write_csv(self, names, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([*names, "ei"])
            for p, v in zip(self.grid, self.values):
                w.writerow([*[repr(float(x)) for x in p], repr(float(v))])


def lattice(bounds: Hyperrectangle, resolution: int) -> tuple[list[np.ndarray], np.ndarray]:
    if resolution < 1:
        raise InvalidArgument("lattice resolution must be positive")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in zip(bounds.lo, bounds.hi)]
    grid = np.array(list(itertools.product(*axes)))
    return axes, grid


def expected_improvement(predictor: HighPredictor, obs: ObservationSet, f_min: np.ndarray, theta) -> float:
    rows = np.asarray(obs.locations) - 1
    H, var = predictor.predict(theta, rows)
    return float(np.sum(ei_pointwise(obs.values, H, np.sqrt(var), f_min)))


def ei_surface(model: FittedModel, obs: ObservationSet, f_min: np.ndarray, resolution: int, grid=None) -> EiSurface:
    """Summed EI over observed locations and times on a lattice; first maximizer wins."""
    predictor = HighPredictor(model)
    if grid is None:
        axes, grid = lattice(model.bounds, resolution)
    else:
        axes, grid = [], np.atleast_2d(np.asarray(grid, dtype=float))
    if grid.shape[0] == 0:
        raise InvalidArgument("empty lattice")
    values = np.array([expected_improvement(predictor, obs, f_min, th) for th in grid])
    return EiSurface(axes, grid, values, grid[int(np.argmax(values))].copy())


@dataclass
class CalibrationState:
    low_runs: list[FieldRun]
    high_runs: list[FieldRun]
    obs: ObservationSet
    bounds: Hyperrectangle
    config: ModelConfig
    model: FittedModel

    @property
    def f_min(self) -> np.ndarray:
        return compute_f_min(self.obs, self.high_runs)


class StepAborted(RuntimeError):
    pass


def sequential_step(
    state: CalibrationState, simulator: Callable[[str, np.ndarray], FieldRun], resolution: int
) -> tuple[CalibrationState, EiSurface]:
    """Run both fidelities at the EI maximizer and refit everything.

    The input state is never modified; a simulator failure raises
    :class:`StepAborted`.
    """
    surface = ei_surface(state.model, state.obs, state.f_min, resolution)
    theta = surface.argmax
    try:
        low = simulator("low", theta)
        high = simulator("high", theta)
    except Exception as exc:  # noqa: BLE001 - any simulator error aborts the step
        raise StepAborted(f"simulator failed at theta={theta.tolist()}: {exc}") from exc
    low_runs = [*state.low_runs, low]
    high_runs = [*state.high_runs, high]
    model = fit_model(
        low_runs if state.config.mode != "high-only" else [], high_runs, state.obs, state.bounds, state.config
    )
    new = CalibrationState(low_runs, high_runs, state.obs, state.bounds, state.config, model)
    return new, surface


def initial_state(low_runs, high_runs, obs, bounds, config: ModelConfig) -> CalibrationState:
    model = fit_model(low_runs if config.mode != "high-only" else [], high_runs, obs, bounds, config)
    return CalibrationState(list(low_runs), list(high_runs), obs, bounds, config, model)


def run_loop(state: CalibrationState, simulator, resolution: int, steps: int, log=None):
    surfaces = []
    for k in range(steps):
        state, surf = sequential_step(state, simulator, resolution)
        surfaces.append(surf)
        if log:
            log(f"step {k + 1}: theta={surf.argmax.tolist()} ei={surf.values.max():.6g}")
    return state, surfaces

