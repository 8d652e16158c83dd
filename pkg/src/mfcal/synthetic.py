"""Small randomized likelihood instances for testing and oracle checks."""

from __future__ import annotations

import numpy as np

from .design import Hyperrectangle
from .eof import EofBasis, EofModel
from .gp import CoefficientGP, GpHyperParams, MaternKernel, MeanBasis
from .l96 import FieldRun, ObservationSet
from .rlik import high_only_layout, multifidelity_layout


def random_basis(rng, n_s: int, k: int, residual_var: float) -> EofBasis:
    Q, _ = np.linalg.qr(rng.normal(size=(n_s, n_s)))
    sv = np.sort(rng.uniform(0.5, 5.0, n_s))[::-1]
    return EofBasis(Q, sv, k, np.zeros((k, 0)), residual_var)


def random_process(rng, name: str, bounds: Hyperrectangle, n_t: int, time_kernel: bool, features) -> CoefficientGP:
    mean = MeanBasis(tuple(features), bounds.names)
    kernel = MaternKernel(
        float(rng.uniform(0.3, 3.0)),
        tuple(float(r) for r in rng.uniform(0.1, 1.5, bounds.ndim)),
        float(rng.uniform(0.2, 2.0)) if time_kernel else None,
    )
    return CoefficientGP(name, mean, rng.normal(size=len(features)), kernel, n_t)


def random_instance(
    seed: int,
    n_s: int = 5,
    n_t: int = 2,
    n_low: int = 3,
    n_high: int = 2,
    n_L: int = 2,
    n_delta: int = 1,
    n_o: int | None = None,
    time_kernel: bool | None = None,
    high_only: bool = False,
):
    """Random (data, layout, params, bounds) with nested high runs."""
    rng = np.random.default_rng(seed)
    bounds = Hyperrectangle(("a", "b"), (0.0, 0.0), (2.0, 5.0))
    if time_kernel is None:
        time_kernel = bool(rng.integers(2))
    n_o = n_s if n_o is None else n_o
    thetas = bounds.from_unit(rng.uniform(size=(n_low, 2)))
    low = [FieldRun("low", th, rng.normal(size=(n_s, n_t))) for th in thetas]
    high = [FieldRun("high", thetas[i], rng.normal(size=(n_s, n_t))) for i in range(n_high)]
    obs = ObservationSet(rng.normal(size=(n_o, n_t)), np.arange(1, n_o + 1), float(rng.uniform(0.1, 0.5)))
    tau_sq = obs.tau**2
    feats = ["const", "a", "b*sqrt(a)"]
    if high_only:
        basis = random_basis(rng, n_s, n_L, float(rng.uniform(0.05, 0.3)))
        procs = tuple(random_process(rng, f"h{e + 1}", bounds, n_t, time_kernel, feats) for e in range(n_L))
        params = GpHyperParams(procs, (), tau_sq, basis.residual_var, 0.0)
        layout, data = high_only_layout(basis, obs, high, bounds, tau_sq)
        return data, layout, params, bounds
    eof = EofModel(
        random_basis(rng, n_s, n_L, float(rng.uniform(0.05, 0.3))),
        random_basis(rng, n_s, n_delta, float(rng.uniform(0.05, 0.3))),
    )
    vs = tuple(
        random_process(rng, f"v{e + 1}", bounds, n_t, time_kernel, feats if e == 0 else []) for e in range(n_L)
    )
    ws = tuple(
        random_process(rng, f"w{e + 1}", bounds, n_t, time_kernel, ["const"] if e == 0 else [])
        for e in range(n_delta)
    )
    params = GpHyperParams(vs, ws, tau_sq, eof.tau_L_sq, eof.tau_delta_sq)
    layout, data = multifidelity_layout(eof, obs, high, low, bounds, tau_sq)
    return data, layout, params, bounds


def toy_field(fidelity: str, theta, n_s: int = 12, n_t: int = 3) -> FieldRun:
    """Cheap smooth two-fidelity field over a=[0,2], b=[0,5] for fast tests.

    The high fidelity version adds a narrow bump whose height grows with
    ``a * b``.
    """
    a, b = float(theta[0]), float(theta[1])
    s = np.arange(1, n_s + 1)[:, None] / n_s
    t = np.arange(1, n_t + 1)[None, :] / n_t
    low = 8.0 + a + 0.6 * a * b * np.exp(-np.cos(2 * np.pi * s) - 1.0) + 0.1 * np.sin(2 * np.pi * (s + t))
    if fidelity == "low":
        return FieldRun("low", (a, b), low)
    bump = 0.3 * a * b * np.exp(-((s - 0.5) ** 2) / 0.01)
    return FieldRun("high", (a, b), low + bump + 0.02 * b * np.cos(2 * np.pi * t))


def toy_problem(n_low: int = 10, n_high: int = 4, truth=(0.5, 3.0), noise_fraction=0.02, seed: int = 0):
    """Maximin design, nested runs and observations from :func:`toy_field`."""
    from .design import maximin_design, nested_indices
    from .l96 import make_observations

    bounds = Hyperrectangle(("a", "b"), (0.0, 0.0), (2.0, 5.0))
    design = maximin_design(n_low, bounds, seed=seed)
    low = [toy_field("low", p) for p in design.points]
    high = [toy_field("high", design.points[i]) for i in nested_indices(design, n_high)]
    obs = make_observations(toy_field("high", truth), noise_fraction, seed + 1)
    return low, high, obs, bounds
