"""Empirical-Bayes fit of the full calibration model from runs and observations."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .design import Hyperrectangle
from .eof import EofBasis, EofModel, build_eof_model, build_high_basis
from .errors import InvalidArgument
from .gp import CoefficientGP, GpHyperParams, MaternKernel, MeanBasis, fit_coefficient_gp
from .l96 import FieldRun, ObservationSet
from .rlik import BasisLayout, ReducedLikelihood, StackedData, high_only_layout, multifidelity_layout

MODES = ("multifidelity", "high-only")


@dataclass(frozen=True)
class ModelConfig:
    mode: str = "multifidelity"
    low_target: float = 0.99
    disc_target: float = 0.99
    high_target: float = 0.99
    # fixed EOF counts; None defers to the variance targets
    n_low_eofs: int | None = None
    n_disc_eofs: int | None = None
    n_high_eofs: int | None = None
    mean_features: tuple[str, ...] = ("const", "a", "b*sqrt(a)")
    # "all": every process gets mean_features; "first": v1 gets them, w1 a
    # constant, the rest zero mean
    mean_processes: str = "all"
    time_kernel: bool = False
    nugget_rel: float = 1e-6
    fit_seed: int = 0
    restarts: int = 5
    maxfev: int = 2000

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}")
        if self.mean_processes not in ("all", "first"):
            raise InvalidArgument("mean_processes must be 'all' or 'first'")


def _features(cfg: ModelConfig, family: str, e: int) -> tuple[str, ...]:
    if cfg.mean_processes == "all":
        return cfg.mean_features
    if e > 0:
        return ()
    return ("const",) if family == "disc" else cfg.mean_features


def _floor_residual(basis: EofBasis, X_scale: float) -> EofBasis:
    floor = 1e-10 * max(X_scale, 1e-300)
    if basis.residual_var >= floor:
        return basis
    return replace(basis, residual_var=floor)


def _fit_family(
    name: str, family: str, basis: EofBasis, thetas, n_t: int, bounds: Hyperrectangle, cfg: ModelConfig, seed_base: int
) -> tuple[CoefficientGP, ...]:
    theta_raw = np.repeat(np.asarray(thetas, dtype=float), n_t, axis=0)
    t = np.tile(np.arange(1, n_t + 1), len(thetas))
    theta_unit = bounds.to_unit(theta_raw)
    procs = []
    for e in range(basis.truncation):
        mean = MeanBasis(_features(cfg, family, e), bounds.names)
        procs.append(
            fit_coefficient_gp(
                f"{name}{e + 1}",
                theta_raw,
                theta_unit,
                t,
                basis.loadings[e],
                mean,
                n_t,
                time_kernel=cfg.time_kernel,
                nugget_rel=cfg.nugget_rel,
                seed=seed_base + e,
                restarts=cfg.restarts,
                maxfev=cfg.maxfev,
            )
        )
    return tuple(procs)


@dataclass
class FittedModel:
    config: ModelConfig
    bounds: Hyperrectangle
    low_runs: list[FieldRun]
    high_runs: list[FieldRun]
    obs: ObservationSet
    params: GpHyperParams
    layout: BasisLayout
    data: StackedData
    eof: EofModel | None = None
    high_basis: EofBasis | None = None
    _lik: ReducedLikelihood | None = field(default=None, repr=False)

    @property
    def n_t(self) -> int:
        return self.layout.n_t

    @property
    def full_basis(self) -> np.ndarray:
        """EOFs mapping the coefficients at one (theta, t) to a full high fidelity field."""
        if self.config.mode == "high-only":
            return self.high_basis.retained
        return np.hstack([self.eof.low.retained, self.eof.disc.retained])

    @property
    def high_noise_var(self) -> float:
        return self.params.tau_L_sq + self.params.tau_delta_sq

    def log_likelihood(self, theta) -> float:
        if self._lik is None:
            self._lik = ReducedLikelihood(self.data, self.layout, self.params)
        return self._lik(theta)

    def log_posterior(self, theta) -> float:
        """Uniform prior on the box: minus infinity outside it."""
        if not self.bounds.contains(theta):
            return -np.inf
        return self.log_likelihood(theta)


def fit_model(
    low_runs: list[FieldRun],
    high_runs: list[FieldRun],
    obs: ObservationSet,
    bounds: Hyperrectangle,
    config: ModelConfig = ModelConfig(),
) -> FittedModel:
    """EOFs, OLS means, ML kernels and the likelihood layout in one go.

    High-only mode never looks at ``low_runs``.
    """
    if not high_runs:
        raise InvalidArgument("at least one high fidelity run is required")
    n_t = obs.values.shape[1]
    tau_sq = float(obs.tau) ** 2
    if config.mode == "high-only":
        hb = build_high_basis(high_runs, config.high_target, config.n_high_eofs)
        hb = _floor_residual(hb, float(np.mean(np.concatenate([r.values for r in high_runs]) ** 2)))
        procs = _fit_family("h", "low", hb, [r.theta for r in high_runs], n_t, bounds, config, config.fit_seed)
        params = GpHyperParams(procs, (), tau_sq, hb.residual_var, 0.0)
        layout, data = high_only_layout(hb, obs, high_runs, bounds, tau_sq)
        return FittedModel(config, bounds, [], list(high_runs), obs, params, layout, data, high_basis=hb)

    if not low_runs:
        raise InvalidArgument("multi-fidelity mode needs low fidelity runs")
    eof = build_eof_model(
        low_runs, high_runs, config.low_target, config.disc_target, config.n_low_eofs, config.n_disc_eofs
    )
    scale = float(np.mean(np.concatenate([r.values for r in low_runs]) ** 2))
    eof = EofModel(_floor_residual(eof.low, scale), _floor_residual(eof.disc, scale))
    vs = _fit_family("v", "low", eof.low, [r.theta for r in low_runs], n_t, bounds, config, config.fit_seed)
    ws = _fit_family(
        "w", "disc", eof.disc, [r.theta for r in high_runs], n_t, bounds, config, config.fit_seed + 1000
    )
    params = GpHyperParams(vs, ws, tau_sq, eof.tau_L_sq, eof.tau_delta_sq)
    layout, data = multifidelity_layout(eof, obs, high_runs, low_runs, bounds, tau_sq)
    return FittedModel(config, bounds, list(low_runs), list(high_runs), obs, params, layout, data, eof=eof)


# ------------------------------------------------------------ persistence


def _floats(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def model_lines(model: FittedModel) -> list[str]:
    """Key=value description of a fitted model; floats keep full precision."""
    p = model.params
    lines = [f"mode={model.config.mode}", f"n_t={model.n_t}"]
    if model.eof is not None:
        lines += [f"low_truncation={model.eof.low.truncation}", f"disc_truncation={model.eof.disc.truncation}"]
    else:
        lines.append(f"high_truncation={model.high_basis.truncation}")
    lines += [f"tau_sq={p.tau_sq!r}", f"tau_L_sq={p.tau_L_sq!r}", f"tau_delta_sq={p.tau_delta_sq!r}"]
    lines.append("low_processes=" + ",".join(q.name for q in p.low))
    lines.append("disc_processes=" + ",".join(q.name for q in p.disc))
    for q in p.processes:
        k = q.kernel
        lines += [
            f"{q.name}.features=" + ";".join(q.mean.features),
            f"{q.name}.gamma=" + _floats(q.gamma),
            f"{q.name}.variance={k.variance!r}",
            f"{q.name}.ranges=" + _floats(k.ranges),
            f"{q.name}.time_range=" + ("none" if k.time_range is None else repr(k.time_range)),
            f"{q.name}.nll={q.nll!r}",
        ]
    return lines


def _process_from(meta: dict, name: str, bounds: Hyperrectangle, n_t: int) -> CoefficientGP:
    feats = tuple(f for f in meta[f"{name}.features"].split(";") if f)
    gamma = np.array([float(v) for v in meta[f"{name}.gamma"].split(",") if v])
    tr = meta[f"{name}.time_range"]
    kernel = MaternKernel(
        float(meta[f"{name}.variance"]),
        tuple(float(v) for v in meta[f"{name}.ranges"].split(",")),
        None if tr == "none" else float(tr),
    )
    return CoefficientGP(name, MeanBasis(feats, bounds.names), gamma, kernel, n_t, float(meta[f"{name}.nll"]))


def restore_model(
    lines: list[str], low_runs, high_runs, obs: ObservationSet, bounds: Hyperrectangle, config: ModelConfig
) -> FittedModel:
    """Rebuild a fitted model from :func:`model_lines` output and the runs it was fit on."""
    meta = dict(line.split("=", 1) for line in lines if "=" in line)
    if meta.get("mode") != config.mode:
        raise InvalidArgument(f"stored model is {meta.get('mode')!r}, expected {config.mode!r}")
    n_t = int(meta["n_t"])
    names = {k: [n for n in meta[k].split(",") if n] for k in ("low_processes", "disc_processes")}
    low = tuple(_process_from(meta, n, bounds, n_t) for n in names["low_processes"])
    disc = tuple(_process_from(meta, n, bounds, n_t) for n in names["disc_processes"])
    params = GpHyperParams(low, disc, float(meta["tau_sq"]), float(meta["tau_L_sq"]), float(meta["tau_delta_sq"]))
    if config.mode == "high-only":
        hb = build_high_basis(high_runs, config.high_target, int(meta["high_truncation"]))
        hb = replace(hb, residual_var=params.tau_L_sq)
        layout, data = high_only_layout(hb, obs, high_runs, bounds, params.tau_sq)
        return FittedModel(config, bounds, [], list(high_runs), obs, params, layout, data, high_basis=hb)
    eof = build_eof_model(
        low_runs, high_runs, config.low_target, config.disc_target,
        int(meta["low_truncation"]), int(meta["disc_truncation"]),
    )
    eof = EofModel(replace(eof.low, residual_var=params.tau_L_sq), replace(eof.disc, residual_var=params.tau_delta_sq))
    layout, data = multifidelity_layout(eof, obs, high_runs, low_runs, bounds, params.tau_sq)
    return FittedModel(config, bounds, list(low_runs), list(high_runs), obs, params, layout, data, eof=eof)
