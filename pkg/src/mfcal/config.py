"""Flat ``key = value`` pipeline configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .design import Hyperrectangle
from .errors import InvalidArgument
from .gp import MeanBasis
from .l96 import L96Config
from .mcmc import McmcConfig
from .model import MODES, ModelConfig


class ConfigError(InvalidArgument):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run archive needs, with defaults for the sparse L96 set-up."""

    bounds: str = "a:0:2,b:0:5"
    n_low: int = 20
    n_high: int = 5
    design_seed: int = 1
    pool_size: int | None = None
    # simulator
    n_vars: int = 40
    total_years: float = 300.0
    window_years: float = 30.0
    dt: float = 0.05
    substeps: int = 2
    init_seed: int = 0
    # synthetic observations
    truth: tuple[float, ...] = (0.5, 3.0)
    noise_fraction: float = 0.05
    obs_seed: int = 2
    n_obs: int | None = None
    # statistical model
    mode: str = "multifidelity"
    low_target: float = 0.99
    disc_target: float = 0.99
    high_target: float = 0.99
    n_low_eofs: int | None = 2
    n_disc_eofs: int | None = 1
    n_high_eofs: int | None = 2
    mean_features: tuple[str, ...] = ("const", "a", "b*sqrt(a)")
    mean_processes: str = "all"
    time_kernel: bool = False
    nugget_rel: float = 1e-6
    fit_seed: int = 0
    restarts: int = 5
    maxfev: int = 2000
    # sampling and summaries
    n_chains: int = 5
    n_iter: int = 20000
    burn_in: int = 5000
    mcmc_seed: int = 0
    kde_resolution: int = 100
    # sequential design
    lattice: int = 50
    steps: int = 7

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 1 <= self.n_high <= self.n_low:
            raise ConfigError("need 1 <= n_high <= n_low")
        if len(self.truth) != self.box.ndim:
            raise ConfigError("truth must have one value per input dimension")
        if self.lattice < 1 or self.kde_resolution < 1 or self.steps < 0:
            raise ConfigError("lattice and kde_resolution must be positive, steps non-negative")
        try:
            self.simulator(), self.model(), self.mcmc()
            MeanBasis(self.mean_features, self.box.names)
        except ConfigError:
            raise
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None

    @property
    def box(self) -> Hyperrectangle:
        dims = []
        for item in self.bounds.split(","):
            parts = item.strip().split(":")
            if len(parts) != 3:
                raise ConfigError(f"bounds entry {item!r} is not name:lo:hi")
            try:
                dims.append((parts[0], float(parts[1]), float(parts[2])))
            except ValueError as exc:
                raise ConfigError(f"bounds entry {item!r}: {exc}") from None
        try:
            return Hyperrectangle.from_pairs(dims)
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None

    def simulator(self) -> L96Config:
        return L96Config(
            n_vars=self.n_vars,
            total_years=self.total_years,
            window_years=self.window_years,
            dt=self.dt,
            substeps=self.substeps,
            init_seed=self.init_seed,
        )

    def model(self, mode: str | None = None) -> ModelConfig:
        return ModelConfig(
            mode=mode or self.mode,
            low_target=self.low_target,
            disc_target=self.disc_target,
            high_target=self.high_target,
            n_low_eofs=self.n_low_eofs,
            n_disc_eofs=self.n_disc_eofs,
            n_high_eofs=self.n_high_eofs,
            mean_features=self.mean_features,
            mean_processes=self.mean_processes,
            time_kernel=self.time_kernel,
            nugget_rel=self.nugget_rel,
            fit_seed=self.fit_seed,
            restarts=self.restarts,
            maxfev=self.maxfev,
        )

    def mcmc(self) -> McmcConfig:
        return McmcConfig(self.n_chains, self.n_iter, self.burn_in, None, self.mcmc_seed)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={_format(getattr(self, f.name))}" for f in fields(self)]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(name: str, annotation: str, text: str):
    text = text.strip()
    optional = "None" in annotation
    if optional and text.lower() == "none":
        return None
    try:
        if annotation.startswith("tuple[float"):
            return tuple(float(v) for v in text.split(","))
        if annotation.startswith("tuple[str"):
            return tuple(v.strip() for v in text.split(",") if v.strip())
        if annotation.startswith("bool"):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return text.lower() == "true"
        if annotation.startswith("int"):
            return int(text)
        if annotation.startswith("float"):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_config(text: str, overrides: dict | None = None) -> PipelineConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment and unknown keys are errors."""
    known = {f.name: str(f.type) for f in fields(PipelineConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, known[key], val)
    values.update(overrides or {})
    try:
        return PipelineConfig(**values)
    except ConfigError:
        raise
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)


def config_text(cfg: PipelineConfig) -> str:
    return "\n".join(cfg.to_lines()) + "\n"


def with_overrides(cfg: PipelineConfig, **kw) -> PipelineConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in kw.items() if v is not None})
