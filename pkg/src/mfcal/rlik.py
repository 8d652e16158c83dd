"""Reduced-form Gaussian likelihood of stacked observations and runs.

The data vector ``Z`` stacks the observation field, every high fidelity run
and every low fidelity run (each time-major, location-minor).  It is
modelled as ``Z = U x + xi`` with ``U`` block diagonal in EOFs, ``x`` the
stacked EOF coefficients and ``xi`` independent noise whose variance is
constant within a segment.  Only matrices of coefficient dimension are
ever factorized.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .design import Hyperrectangle
from .eof import EofBasis, EofModel
from .errors import InvalidArgument, NumericalFailure
from .gp import SEG_HIGH, SEG_LOW, SEG_OBS, CoefficientSlots, GpHyperParams, assemble_sigma_x, matern2, slot_cov, slot_mean
from .l96 import ObservationSet

LOG2PI = math.log(2.0 * math.pi)
DENSE_CAP = 2000
# EOF blocks with fewer informative rows than columns are rejected
MAX_GRAM_CONDITION = 1e12


@dataclass(frozen=True)
class Segment:
    kind: int
    theta: np.ndarray | None  # None for the observation segment
    basis: np.ndarray  # rows x c, repeated once per time point
    procs: np.ndarray  # process index of each basis column
    noise_var: float


@dataclass(frozen=True)
class BasisLayout:
    segments: tuple[Segment, ...]
    bounds: Hyperrectangle
    n_t: int

    def __post_init__(self):
        kinds = [s.kind for s in self.segments]
        if kinds != sorted(kinds):
            raise InvalidArgument("segments must be ordered observation, high, low")
        for s in self.segments:
            if not s.noise_var > 0:
                raise InvalidArgument(f"segment noise variance must be positive, got {s.noise_var}")
            if s.basis.shape[1] != s.procs.size:
                raise InvalidArgument("basis columns and process labels disagree")

    @property
    def n_data(self) -> int:
        return sum(s.basis.shape[0] for s in self.segments) * self.n_t

    @property
    def n_coef(self) -> int:
        return sum(s.basis.shape[1] for s in self.segments) * self.n_t

    def block_shapes(self) -> list[tuple[int, int]]:
        return [(s.basis.shape[0] * self.n_t, s.basis.shape[1] * self.n_t) for s in self.segments]

    def slots(self, theta0=None) -> CoefficientSlots:
        """Coefficient slots in stacking order; the observation segment sits at ``theta0``."""
        d = self.bounds.ndim
        procs, thetas, ts, segs = [], [], [], []
        for s in self.segments:
            th = s.theta if s.kind != SEG_OBS else (np.full(d, np.nan) if theta0 is None else np.asarray(theta0))
            c = s.procs.size
            for t in range(1, self.n_t + 1):
                procs.append(s.procs)
                thetas.append(np.broadcast_to(th, (c, d)))
                ts.append(np.full(c, t))
                segs.append(np.full(c, s.kind))
        theta_raw = np.concatenate(thetas).astype(float)
        return CoefficientSlots(
            np.concatenate(procs).astype(int),
            theta_raw,
            self.bounds.to_unit(theta_raw),
            np.concatenate(ts).astype(int),
            np.concatenate(segs).astype(int),
        )

    def dense_U(self) -> np.ndarray:
        blocks = [np.kron(np.eye(self.n_t), s.basis) for s in self.segments]
        rows = sum(b.shape[0] for b in blocks)
        cols = sum(b.shape[1] for b in blocks)
        U = np.zeros((rows, cols))
        r = c = 0
        for b in blocks:
            U[r : r + b.shape[0], c : c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        return U

    def noise_diag(self) -> np.ndarray:
        return np.concatenate([np.full(s.basis.shape[0] * self.n_t, s.noise_var) for s in self.segments])


@dataclass(frozen=True)
class StackedData:
    blocks: tuple[np.ndarray, ...]  # one rows x n_t array per segment

    @property
    def Z(self) -> np.ndarray:
        return np.concatenate([b.ravel(order="F") for b in self.blocks])

    @property
    def offsets(self) -> np.ndarray:
        return np.cumsum([0] + [b.size for b in self.blocks])


def _obs_rows(obs: ObservationSet, n_s: int) -> np.ndarray:
    locs = np.asarray(obs.locations)
    if np.any(np.diff(locs) <= 0) or locs.min() < 1 or locs.max() > n_s:
        raise InvalidArgument("observation locations must be increasing grid ids within 1..n_s")
    return locs - 1


def multifidelity_layout(
    eof: EofModel, obs: ObservationSet, high_runs, low_runs, bounds: Hyperrectangle, tau_sq: float
) -> tuple[BasisLayout, StackedData]:
    """Observation, high and low blocks with low+discrepancy EOFs."""
    UL, Ud = eof.low.retained, eof.disc.retained
    nL, nd = UL.shape[1], Ud.shape[1]
    both = np.hstack([UL, Ud])
    procs_both = np.arange(nL + nd)
    tL, td = eof.tau_L_sq, eof.tau_delta_sq
    rows = _obs_rows(obs, UL.shape[0])
    n_t = obs.values.shape[1]
    segs = [Segment(SEG_OBS, None, both[rows], procs_both, tau_sq + tL + td)]
    blocks = [obs.values]
    for r in high_runs:
        segs.append(Segment(SEG_HIGH, r.theta, both, procs_both, tL + td))
        blocks.append(r.values)
    for r in low_runs:
        segs.append(Segment(SEG_LOW, r.theta, UL, np.arange(nL), tL))
        blocks.append(r.values)
    for b in blocks:
        if b.shape[1] != n_t:
            raise InvalidArgument("all fields must share the time axis")
    return BasisLayout(tuple(segs), bounds, n_t), StackedData(tuple(blocks))


def high_only_layout(
    high_basis: EofBasis, obs: ObservationSet, high_runs, bounds: Hyperrectangle, tau_sq: float
) -> tuple[BasisLayout, StackedData]:
    """Observation and high blocks on EOFs of the high fidelity runs alone."""
    high_runs = list(high_runs)
    if not high_runs:
        raise InvalidArgument("high-only layout needs at least one high fidelity run")
    UH = high_basis.retained
    procs = np.arange(UH.shape[1])
    tH = high_basis.residual_var
    rows = _obs_rows(obs, UH.shape[0])
    segs = [Segment(SEG_OBS, None, UH[rows], procs, tau_sq + tH)]
    blocks = [obs.values]
    for r in high_runs:
        segs.append(Segment(SEG_HIGH, r.theta, UH, procs, tH))
        blocks.append(r.values)
    return BasisLayout(tuple(segs), bounds, obs.values.shape[1]), StackedData(tuple(blocks))


def _chol(K: np.ndarray, what: str):
    """Cholesky factor with relative jitter escalation 1e-10 .. 1e-6."""
    try:
        return cho_factor(K, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    scale = float(np.mean(np.diag(K))) or 1.0
    jitter = 1e-10
    while jitter <= 1e-6 * (1 + 1e-9):
        try:
            return cho_factor(K + jitter * scale * np.eye(K.shape[0]), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            jitter *= 10
    cond = np.linalg.cond(K)
    raise NumericalFailure(f"{what} is not positive definite (condition number {cond:.3g})")


def _logdet(cf) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(cf[0]))))


def _check_theta(layout: BasisLayout, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (layout.bounds.ndim,) or not layout.bounds.contains(theta):
        raise InvalidArgument(f"theta {theta} outside the parameter box")
    return theta


def _segment_pieces(layout: BasisLayout, data: StackedData):
    """Per-segment Gram factor, projected coefficients and residual terms."""
    pieces = []
    for seg, block in zip(layout.segments, data.blocks):
        if block.shape != (seg.basis.shape[0], layout.n_t):
            raise InvalidArgument("data block does not match its basis segment")
        G = seg.basis.T @ seg.basis
        cond = np.linalg.cond(G)
        if not cond < MAX_GRAM_CONDITION:
            raise NumericalFailure(f"U' inv(Sigma_xi) U is singular (condition number {cond:.3g})")
        Gf = cho_factor(G, lower=True, check_finite=False)
        proj = seg.basis.T @ block  # c x n_t
        coef = cho_solve(Gf, proj, check_finite=False)
        quad = float(np.sum(block * block) - np.sum(proj * coef)) / seg.noise_var
        pieces.append((Gf, coef, quad))
    return pieces


def reduced_log_likelihood(theta, data: StackedData, layout: BasisLayout, params: GpHyperParams) -> float:
    """Log-likelihood of ``Z`` computed through the basis-coefficient reduction.

    With ``A = U' inv(S_xi) U`` and ``b = inv(A) U' inv(S_xi) (Z - U E x)``,
    the density factorizes into a residual term orthogonal to the basis and
    the density of ``b`` under ``N(0, S_x + inv(A))``.
    """
    theta = _check_theta(layout, theta)
    pieces = _segment_pieces(layout, data)
    log_det_xi = sum(s.basis.shape[0] * layout.n_t * math.log(s.noise_var) for s in layout.segments)
    log_det_A = 0.0
    quad = 0.0
    b, Ainv = [], []
    for seg, (Gf, coef, q) in zip(layout.segments, pieces):
        c = seg.basis.shape[1]
        log_det_A += layout.n_t * (_logdet(Gf) - c * math.log(seg.noise_var))
        quad += q
        b.append(coef.ravel(order="F"))
        Gi = cho_solve(Gf, np.eye(c), check_finite=False) * seg.noise_var
        Ainv.extend([Gi] * layout.n_t)
    slots = layout.slots(theta)
    Sx, Ex = assemble_sigma_x(params, slots)
    r = np.concatenate(b) - Ex
    K = Sx + _block_diag(Ainv)
    cf = _chol(K, "Sigma_x + inv(A)")
    alpha = solve_triangular(cf[0], r, lower=True, check_finite=False)
    n, k = layout.n_data, layout.n_coef
    return (
        -0.5 * log_det_xi
        - 0.5 * log_det_A
        - 0.5 * quad
        - 0.5 * (n - k) * LOG2PI
        - 0.5 * (_logdet(cf) + alpha @ alpha + k * LOG2PI)
    )


def _block_diag(blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        m = b.shape[0]
        out[i : i + m, i : i + m] = b
        i += m
    return out


def dense_log_likelihood(theta, data: StackedData, layout: BasisLayout, params: GpHyperParams) -> float:
    """Direct multivariate normal density of ``Z``; small problems only."""
    theta = _check_theta(layout, theta)
    Z = data.Z
    if Z.size > DENSE_CAP:
        raise InvalidArgument(f"dense likelihood refused for {Z.size} > {DENSE_CAP} data points")
    U = layout.dense_U()
    Sx, Ex = assemble_sigma_x(params, layout.slots(theta))
    C = U @ Sx @ U.T + np.diag(layout.noise_diag())
    cf = cho_factor(C, lower=True)
    r = Z - U @ Ex
    return -0.5 * (_logdet(cf) + r @ cho_solve(cf, r) + Z.size * LOG2PI)


class ReducedLikelihood:
    """Cached evaluator of :func:`reduced_log_likelihood` over ``theta``.

    Everything that does not involve the observation segment is factorized
    once.  For each ``theta`` only the conditional density of the
    observation coefficients given the run coefficients is evaluated, per
    independent time block when no process correlates across time.
    """

    def __init__(self, data: StackedData, layout: BasisLayout, params: GpHyperParams):
        self.layout = layout
        self.params = params
        pieces = _segment_pieces(layout, data)
        n_t = layout.n_t
        log_det_xi = sum(s.basis.shape[0] * n_t * math.log(s.noise_var) for s in layout.segments)
        log_det_A = 0.0
        quad = 0.0
        b, Ainv = [], []
        for seg, (Gf, coef, q) in zip(layout.segments, pieces):
            c = seg.basis.shape[1]
            log_det_A += n_t * (_logdet(Gf) - c * math.log(seg.noise_var))
            quad += q
            b.append(coef.ravel(order="F"))
            Ainv.extend([cho_solve(Gf, np.eye(c), check_finite=False) * seg.noise_var] * n_t)
        n, k = layout.n_data, layout.n_coef
        self._const = -0.5 * log_det_xi - 0.5 * log_det_A - 0.5 * quad - 0.5 * (n - k) * LOG2PI
        self._b = np.concatenate(b)
        self._Ainv = _block_diag(Ainv)

        slots = layout.slots(None)
        is_obs = slots.segment == SEG_OBS
        independent = all(p.kernel.time_range is None for p in params.processes)
        keys = slots.t if independent else np.zeros(len(slots), dtype=int)
        self._groups = []
        self._const_m = 0.0
        for key in np.unique(keys):
            g = keys == key
            m_idx = np.flatnonzero(g & ~is_obs)
            o_idx = np.flatnonzero(g & is_obs)
            self._groups.append(dict(m_idx=m_idx, o_idx=o_idx, m_slots=slots.take(m_idx), o_slots=slots.take(o_idx)))
        self._bounds = layout.bounds
        self._shared = len(self._groups) > 1 and self._groups_identical()
        for i, g in enumerate(self._groups):
            if self._shared and i > 0:
                g["L"], g["logdet"] = self._groups[0]["L"], self._groups[0]["logdet"]
            else:
                self._factor_group(g)
            m_slots = g["m_slots"]
            if g["L"] is not None:
                r_m = self._b[g["m_idx"]] - slot_mean(params, m_slots)
                g["alpha"] = solve_triangular(g["L"], r_m, lower=True, check_finite=False)
                self._const_m += -0.5 * (g["logdet"] + g["alpha"] @ g["alpha"] + r_m.size * LOG2PI)
            g["Ainv_oo"] = self._Ainv[np.ix_(g["o_idx"], g["o_idx"])]
            g["b_o"] = self._b[g["o_idx"]]
        if self._shared:
            g0 = self._groups[0]
            self._alpha = np.column_stack([g["alpha"] for g in self._groups]) if g0["L"] is not None else None
            self._b_o = np.column_stack([g["b_o"] for g in self._groups])
            self._o_proc = g0["o_slots"].proc
            self._o_t = np.column_stack([g["o_slots"].t for g in self._groups])
            m = g0["m_slots"]
            self._m_by_proc = [
                (p, np.flatnonzero(m.proc == p), m.theta_unit[m.proc == p]) for p in range(len(params.processes))
            ]

    def _factor_group(self, g) -> None:
        m_slots = g["m_slots"]
        if g["m_idx"].size == 0:
            g["L"], g["logdet"] = None, 0.0
            return
        Kmm = slot_cov(self.params, m_slots, m_slots) + self._Ainv[np.ix_(g["m_idx"], g["m_idx"])]
        cf = _chol(0.5 * (Kmm + Kmm.T), "run coefficient covariance")
        g["L"], g["logdet"] = cf[0], _logdet(cf)

    def _groups_identical(self) -> bool:
        """True when every time block has the same runs, processes and noise blocks."""
        g0 = self._groups[0]
        for g in self._groups[1:]:
            for key in ("m_idx", "o_idx"):
                if g[key].size != g0[key].size:
                    return False
            a, b = g["m_slots"], g0["m_slots"]
            if not (np.array_equal(a.proc, b.proc) and np.array_equal(a.theta_unit, b.theta_unit)):
                return False
            if not np.array_equal(g["o_slots"].proc, g0["o_slots"].proc):
                return False
            if not (
                np.array_equal(self._Ainv[np.ix_(g["m_idx"], g["m_idx"])], self._Ainv[np.ix_(g0["m_idx"], g0["m_idx"])])
                and np.array_equal(
                    self._Ainv[np.ix_(g["o_idx"], g["o_idx"])], self._Ainv[np.ix_(g0["o_idx"], g0["o_idx"])]
                )
            ):
                return False
        return True

    def _shared_call(self, theta) -> float:
        g0 = self._groups[0]
        n_t = self._b_o.shape[1]
        procs = self.params.processes
        u = self._bounds.to_unit(theta)
        c = self._o_proc.size
        mean = np.empty((c, n_t))
        S = g0["Ainv_oo"].copy()
        for j, p in enumerate(self._o_proc):
            mean[j] = procs[p].mean_at(np.broadcast_to(theta, (n_t, theta.size)), self._o_t[j])
            S[j, j] += procs[p].kernel.variance
        r = self._b_o - mean
        if g0["L"] is not None:
            Kmo = np.zeros((g0["m_idx"].size, c))
            for p, idx, th in self._m_by_proc:
                cols = np.flatnonzero(self._o_proc == p)
                if idx.size == 0 or cols.size == 0:
                    continue
                k = procs[p].kernel
                corr = np.ones(idx.size)
                for i, lam in enumerate(k.ranges):
                    corr *= matern2(th[:, i] - u[i], lam)
                Kmo[np.ix_(idx, cols)] = (k.variance * corr)[:, None]
            W = solve_triangular(g0["L"], Kmo, lower=True, check_finite=False)
            r = r - W.T @ self._alpha
            S = S - W.T @ W
        cf = _chol(0.5 * (S + S.T), "conditional observation covariance")
        z = solve_triangular(cf[0], r, lower=True, check_finite=False)
        return float(self._const + self._const_m - 0.5 * (n_t * _logdet(cf) + np.sum(z * z) + r.size * LOG2PI))

    def _obs_slots(self, tmpl: CoefficientSlots, theta) -> CoefficientSlots:
        n = len(tmpl)
        theta_raw = np.broadcast_to(theta, (n, theta.size)).copy()
        return CoefficientSlots(tmpl.proc, theta_raw, self._bounds.to_unit(theta_raw), tmpl.t, tmpl.segment)

    def __call__(self, theta) -> float:
        theta = _check_theta(self.layout, theta)
        if self._shared:
            return self._shared_call(theta)
        total = self._const + self._const_m
        for g in self._groups:
            if g["o_idx"].size == 0:
                continue
            o = self._obs_slots(g["o_slots"], theta)
            r = g["b_o"] - slot_mean(self.params, o)
            S = slot_cov(self.params, o, o) + g["Ainv_oo"]
            if g["L"] is not None:
                Kmo = slot_cov(self.params, g["m_slots"], o)
                W = solve_triangular(g["L"], Kmo, lower=True, check_finite=False)
                r = r - W.T @ g["alpha"]
                S = S - W.T @ W
            cf = _chol(0.5 * (S + S.T), "conditional observation covariance")
            z = solve_triangular(cf[0], r, lower=True, check_finite=False)
            total += -0.5 * (_logdet(cf) + z @ z + r.size * LOG2PI)
        return float(total)
