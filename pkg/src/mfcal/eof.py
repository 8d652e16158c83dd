"""Empirical orthogonal functions for low fidelity output and discrepancies."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .l96 import FieldRun


@dataclass(frozen=True)
class EofBasis:
    """Left singular vectors of a snapshot matrix and the chosen truncation.

    ``loadings`` holds ``D V'`` restricted to the retained EOFs, one column
    per snapshot (run-major, time-minor), and ``residual_var`` is the mean
    squared truncation residual over all snapshot entries.
    """

    U: np.ndarray
    singular_values: np.ndarray
    truncation: int
    loadings: np.ndarray
    residual_var: float

    @property
    def retained(self) -> np.ndarray:
        return self.U[:, : self.truncation]

    @property
    def variance_fractions(self) -> np.ndarray:
        sq = self.singular_values**2
        total = sq.sum()
        if total == 0:
            return np.ones_like(sq)
        return np.cumsum(sq) / total

    @property
    def n_s(self) -> int:
        return self.U.shape[0]


@dataclass(frozen=True)
class EofModel:
    low: EofBasis
    disc: EofBasis

    @property
    def tau_L_sq(self) -> float:
        return self.low.residual_var

    @property
    def tau_delta_sq(self) -> float:
        return self.disc.residual_var


def snapshot_matrix(fields) -> np.ndarray:
    """Stack ``n_s x n_t`` fields column-wise into ``n_s x (n_runs n_t)``."""
    fields = [np.asarray(f, dtype=float) for f in fields]
    if not fields:
        raise InvalidArgument("at least one field is required")
    shape = fields[0].shape
    if any(f.shape != shape for f in fields):
        raise InvalidArgument("all runs must share the same grid and time axis")
    return np.concatenate(fields, axis=1)


def choose_truncation(singular_values, variance_target: float) -> int:
    sq = np.asarray(singular_values, dtype=float) ** 2
    total = sq.sum()
    if total == 0:
        return 1
    frac = np.cumsum(sq) / total
    # guard against 0.99999999 < 0.99 style round-off at the boundary
    return int(min(np.searchsorted(frac, variance_target - 1e-12) + 1, sq.size))


def basis_from_matrix(X: np.ndarray, variance_target: float, truncation: int | None = None) -> EofBasis:
    """Uncentred SVD of ``X`` truncated at a cumulative variance target.

    A fixed ``truncation`` overrides the target.
    """
    if not 0 < variance_target <= 1:
        raise InvalidArgument("variance_target must lie in (0, 1]")
    U, d, _ = np.linalg.svd(X, full_matrices=False)
    # deterministic sign: largest-magnitude entry of each EOF is positive
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(U.shape[1])])
    flip[flip == 0] = 1.0
    U = U * flip
    k = choose_truncation(d, variance_target)
    if truncation is not None:
        if not 1 <= truncation <= d.size:
            raise InvalidArgument(f"truncation {truncation} outside [1, {d.size}]")
        k = int(truncation)
    loadings = U[:, :k].T @ X
    resid = X - U[:, :k] @ loadings
    return EofBasis(U, d, k, loadings, float(np.mean(resid**2)))


def build_low_basis(low_runs: list[FieldRun], variance_target: float = 0.99, truncation=None) -> EofBasis:
    return basis_from_matrix(snapshot_matrix([r.values for r in low_runs]), variance_target, truncation)


def _colocated(a: FieldRun, b: FieldRun) -> bool:
    return a.theta.shape == b.theta.shape and np.allclose(a.theta, b.theta, rtol=0, atol=1e-12)


def build_disc_basis(paired_runs, variance_target: float = 0.99, truncation=None) -> EofBasis:
    """EOFs of ``H - L`` over (low, high) run pairs sharing an input setting."""
    paired_runs = list(paired_runs)
    if not paired_runs:
        raise InvalidArgument("at least one (low, high) pair is required")
    for lo, hi in paired_runs:
        if not _colocated(lo, hi):
            raise InvalidArgument(f"pair not co-located: {lo.theta} vs {hi.theta}")
    X = snapshot_matrix([hi.values - lo.values for lo, hi in paired_runs])
    return basis_from_matrix(X, variance_target, truncation)


def build_high_basis(high_runs: list[FieldRun], variance_target: float = 0.99, truncation=None) -> EofBasis:
    return basis_from_matrix(snapshot_matrix([r.values for r in high_runs]), variance_target, truncation)


def build_eof_model(
    low_runs, high_runs, low_target=0.99, disc_target=0.99, low_truncation=None, disc_truncation=None
) -> EofModel:
    """Pairs each high run with the low run at the same setting."""
    pairs = [(find_colocated(h, low_runs), h) for h in high_runs]
    return EofModel(
        build_low_basis(low_runs, low_target, low_truncation),
        build_disc_basis(pairs, disc_target, disc_truncation),
    )


def find_colocated(run: FieldRun, candidates: list[FieldRun]) -> FieldRun:
    for c in candidates:
        if _colocated(run, c):
            return c
    raise InvalidArgument(f"no low fidelity run at theta={run.theta}")


def project(basis: EofBasis, field) -> tuple[np.ndarray, float]:
    """Coefficients on the retained EOFs and the mean squared remainder."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != basis.n_s:
        raise InvalidArgument(f"field length {field.shape[0]} != {basis.n_s}")
    Ur = basis.retained
    coef = Ur.T @ field
    resid = field - Ur @ coef
    return coef, float(np.mean(resid**2))


def write_basis(basis: EofBasis, csv_path, manifest_path) -> None:
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"eof_{i + 1}" for i in range(basis.U.shape[1])])
        for row in basis.U:
            w.writerow([repr(float(v)) for v in row])
    lines = [
        f"truncation={basis.truncation}",
        f"residual_var={basis.residual_var!r}",
        "singular_values=" + ",".join(repr(float(v)) for v in basis.singular_values),
        "variance_fractions=" + ",".join(repr(float(v)) for v in basis.variance_fractions),
    ]
    Path(manifest_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
