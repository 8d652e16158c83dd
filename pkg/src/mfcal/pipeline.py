"""File-backed pipeline stages over a run archive directory.

Layout of an archive::

    config.txt              resolved configuration
    manifest.txt            stage log with seeds, then a hash of every file
    design/low.csv, design/high.csv
    runs/low_001.csv ...    one CSV per simulator run, in order of creation
    obs/truth.csv, obs/observations.csv, obs/observations.txt
    <mode>/model.txt        fitted hyperparameters (mode is multifidelity or high-only)
    <mode>/chains.csv, <mode>/summary.txt, <mode>/kde.csv, <mode>/hyperparams.csv
    <mode>/ei.csv           EI surface of the current fit
    loop/ei_001.csv ...     EI surfaces that chose each sequential run
"""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig, config_text, parse_config
from .design import Design, maximin_design, nested_indices, read_design_csv, write_design_csv
from .eof import write_basis
from .gp import write_hyperparam_report
from .l96 import (
    FieldRun,
    make_observations,
    read_observations,
    read_run_csv,
    simulate,
    write_observations,
    write_run_csv,
)
from .mcmc import (
    default_proposal_sds,
    read_chains_csv,
    run_chains,
    summarize,
    write_chains_csv,
    write_kde_csv,
)
from .model import FittedModel, fit_model, model_lines, restore_model
from .seqdesign import CalibrationState, compute_f_min, ei_surface, sequential_step

STAGES = ("design", "simulate", "observe", "fit", "sample", "ei", "loop", "summarize")


class MissingArtifact(FileNotFoundError):
    """An upstream stage has not produced a file this stage needs."""

    def __init__(self, path: Path, stage: str):
        super().__init__(f"missing {path} (run '{stage}' first)")
        self.path = path
        self.stage = stage


@dataclass
class StageRecord:
    name: str
    mode: str | None = None
    seed: int | None = None
    steps: int | None = None

    def line(self) -> str:
        parts = [self.name]
        for key in ("mode", "seed", "steps"):
            val = getattr(self, key)
            if val is not None:
                parts.append(f"{key}:{val}")
        return " ".join(parts)

    @classmethod
    def parse(cls, text: str) -> StageRecord:
        name, *rest = text.split()
        kw = dict(item.split(":", 1) for item in rest)
        return cls(
            name,
            kw.get("mode"),
            int(kw["seed"]) if "seed" in kw else None,
            int(kw["steps"]) if "steps" in kw else None,
        )


def file_hash(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class Archive:
    def __init__(self, root):
        self.root = Path(root)

    # ---------------------------------------------------------- bookkeeping

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    def require(self, rel: str, stage: str) -> Path:
        p = self.path(rel)
        if not p.exists():
            raise MissingArtifact(p, stage)
        return p

    def initialize(self, cfg: PipelineConfig) -> None:
        """Write ``config.txt``, or check it matches an existing one."""
        self.root.mkdir(parents=True, exist_ok=True)
        p = self.path("config.txt")
        text = config_text(cfg)
        if p.exists() and p.read_text(encoding="utf-8") != text:
            raise ConfigError(f"{p} holds a different configuration")
        p.write_text(text, encoding="utf-8")

    def config(self) -> PipelineConfig:
        return parse_config(self.require("config.txt", "design").read_text(encoding="utf-8"))

    def stages(self) -> list[StageRecord]:
        p = self.path("manifest.txt")
        if not p.exists():
            return []
        out = []
        for line in p.read_text(encoding="utf-8").splitlines():
            key, _, val = line.partition("=")
            if key.startswith("stage."):
                out.append(StageRecord.parse(val))
        return out

    def files(self) -> list[str]:
        skip = {"manifest.txt"}
        return sorted(
            str(p.relative_to(self.root)) for p in self.root.rglob("*") if p.is_file() and p.name not in skip
        )

    def record(self, stage: StageRecord) -> None:
        stages = [*self.stages(), stage]
        lines = [f"stage.{i + 1:03d}={s.line()}" for i, s in enumerate(stages)]
        lines += [f"file.{rel}={file_hash(self.path(rel))}" for rel in self.files()]
        self.path("manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    def hashes(self) -> dict[str, str]:
        return {rel: file_hash(self.path(rel)) for rel in self.files()}

    # ------------------------------------------------------------- readers

    def designs(self) -> tuple[Design, Design]:
        box = self.config().box
        low = read_design_csv(self.require("design/low.csv", "design"), box)
        high = read_design_csv(self.require("design/high.csv", "design"), box)
        return low, high

    def runs(self, fidelity: str) -> list[FieldRun]:
        files = sorted(self.path("runs").glob(f"{fidelity}_*.csv"))
        if not files:
            raise MissingArtifact(self.path("runs", f"{fidelity}_001.csv"), "simulate")
        return [read_run_csv(f) for f in files]

    def observations(self):
        return read_observations(
            self.require("obs/observations.csv", "observe"), self.require("obs/observations.txt", "observe")
        )

    def model(self, mode: str) -> FittedModel:
        cfg = self.config()
        lines = self.require(f"{mode}/model.txt", "fit").read_text(encoding="utf-8").splitlines()
        low = self.runs("low") if mode != "high-only" else []
        return restore_model(lines, low, self.runs("high"), self.observations(), cfg.box, cfg.model(mode))

    # ------------------------------------------------------------- writers

    def add_run(self, run: FieldRun) -> Path:
        self.path("runs").mkdir(parents=True, exist_ok=True)
        k = len(list(self.path("runs").glob(f"{run.fidelity}_*.csv"))) + 1
        p = self.path("runs", f"{run.fidelity}_{k:03d}.csv")
        write_run_csv(run, p)
        return p

    def write_model(self, model: FittedModel) -> None:
        d = self.path(model.config.mode)
        d.mkdir(parents=True, exist_ok=True)
        (d / "model.txt").write_text("\n".join(model_lines(model)) + "\n", encoding="utf-8")
        write_hyperparam_report(model.params, model.bounds.names, d / "hyperparams.csv")
        if model.eof is not None:
            write_basis(model.eof.low, d / "eof_low.csv", d / "eof_low.txt")
            write_basis(model.eof.disc, d / "eof_disc.csv", d / "eof_disc.txt")
        else:
            write_basis(model.high_basis, d / "eof_high.csv", d / "eof_high.txt")


# ------------------------------------------------------------------ stages


def stage_design(archive: Archive, seed: int | None = None) -> StageRecord:
    cfg = archive.config()
    seed = cfg.design_seed if seed is None else seed
    low = maximin_design(cfg.n_low, cfg.box, cfg.pool_size, seed)
    high = Design(low.points[nested_indices(low, cfg.n_high)], cfg.box)
    archive.path("design").mkdir(exist_ok=True)
    write_design_csv(low, archive.path("design", "low.csv"))
    write_design_csv(high, archive.path("design", "high.csv"))
    return StageRecord("design", seed=seed)


def stage_simulate(archive: Archive, log=print) -> StageRecord:
    cfg = archive.config()
    low, high = archive.designs()
    if archive.path("runs").exists():
        shutil.rmtree(archive.path("runs"))
    sim = cfg.simulator()
    for fidelity, design in (("low", low), ("high", high)):
        for theta in design.points:
            archive.add_run(simulate(sim, fidelity, theta))
    log(f"simulated {len(low)} low and {len(high)} high fidelity runs")
    return StageRecord("simulate")


def stage_observe(archive: Archive, seed: int | None = None) -> StageRecord:
    cfg = archive.config()
    seed = cfg.obs_seed if seed is None else seed
    truth = simulate(cfg.simulator(), "high", np.asarray(cfg.truth))
    obs = make_observations(truth, cfg.noise_fraction, seed, cfg.n_obs)
    archive.path("obs").mkdir(exist_ok=True)
    write_run_csv(truth, archive.path("obs", "truth.csv"))
    write_observations(obs, archive.path("obs", "observations.csv"), archive.path("obs", "observations.txt"))
    return StageRecord("observe", seed=seed)


def _fit(archive: Archive, mode: str, seed: int | None) -> FittedModel:
    cfg = archive.config()
    mcfg = cfg.model(mode)
    if seed is not None:
        mcfg = replace(mcfg, fit_seed=seed)
    low = archive.runs("low") if mode != "high-only" else []
    return fit_model(low, archive.runs("high"), archive.observations(), cfg.box, mcfg)


def stage_fit(archive: Archive, mode: str | None = None, seed: int | None = None) -> StageRecord:
    cfg = archive.config()
    mode = mode or cfg.mode
    model = _fit(archive, mode, seed)
    archive.write_model(model)
    return StageRecord("fit", mode=mode, seed=cfg.fit_seed if seed is None else seed)


def stage_sample(archive: Archive, mode: str | None = None, seed: int | None = None, log=print) -> StageRecord:
    cfg = archive.config()
    mode = mode or cfg.mode
    model = archive.model(mode)
    low_design, _ = archive.designs()
    mc = cfg.mcmc()
    if seed is not None:
        mc = replace(mc, seed=seed)
    chains = run_chains(mc, model.log_posterior, cfg.box, default_proposal_sds(low_design.points))
    write_chains_csv(chains, archive.path(mode, "chains.csv"))
    rates = " ".join(f"{c.acceptance_rate:.3f}" for c in chains)
    (archive.path(mode, "acceptance.txt")).write_text(f"acceptance={rates}\n", encoding="utf-8")
    log(f"{mode}: {len(chains)} chains, acceptance {rates}")
    return StageRecord("sample", mode=mode, seed=mc.seed)


def stage_ei(archive: Archive, mode: str | None = None) -> StageRecord:
    cfg = archive.config()
    mode = mode or cfg.mode
    model = archive.model(mode)
    surf = ei_surface(model, model.obs, compute_f_min(model.obs, model.high_runs), cfg.lattice)
    surf.write_csv(cfg.box.names, archive.path(mode, "ei.csv"))
    return StageRecord("ei", mode=mode)


def stage_loop(archive: Archive, steps: int | None = None, mode: str | None = None, log=print) -> StageRecord:
    """Sequential EI augmentation; stale fits and samples of every mode are removed."""
    cfg = archive.config()
    mode = mode or cfg.mode
    steps = cfg.steps if steps is None else steps
    model = archive.model(mode)
    state = CalibrationState(archive.runs("low"), archive.runs("high"), model.obs, cfg.box, model.config, model)
    sim = cfg.simulator()
    archive.path("loop").mkdir(exist_ok=True)
    done = len(list(archive.path("loop").glob("ei_*.csv")))
    for k in range(steps):
        state, surf = sequential_step(state, lambda fid, th: simulate(sim, fid, th), cfg.lattice)
        archive.add_run(state.low_runs[-1])
        archive.add_run(state.high_runs[-1])
        surf.write_csv(cfg.box.names, archive.path("loop", f"ei_{done + k + 1:03d}.csv"))
        log(f"step {done + k + 1}: theta={surf.argmax.tolist()} max EI={surf.values.max():.6g}")
    if steps:
        for m in ("multifidelity", "high-only"):
            if archive.path(m).exists():
                shutil.rmtree(archive.path(m))
        archive.write_model(state.model)
    return StageRecord("loop", mode=mode, steps=steps)


def stage_summarize(archive: Archive, mode: str | None = None) -> StageRecord:
    cfg = archive.config()
    mode = mode or cfg.mode
    chains = read_chains_csv(archive.require(f"{mode}/chains.csv", "sample"))
    model = archive.model(mode)
    s = summarize(chains, cfg.box, cfg.kde_resolution)
    names = cfg.box.names
    lines = [
        f"mode={mode}",
        f"n_samples={s.n_samples}",
        "posterior_mode=" + ",".join(repr(float(v)) for v in s.mode),
        "variances=" + ",".join(repr(float(v)) for v in s.variances),
    ]
    for name, (lo, hi) in zip(names, s.intervals):
        lines.append(f"interval_{name}={float(lo)!r},{float(hi)!r}")
    lines.append(f"hpd95_threshold={s.hpd_threshold(0.95)!r}")
    lines.append(f"truth_in_hpd95={s.hpd_contains(model.obs.truth)}" if model.obs.truth is not None else "")
    archive.path(mode, "summary.txt").write_text("\n".join(x for x in lines if x) + "\n", encoding="utf-8")
    write_kde_csv(s, names, archive.path(mode, "kde.csv"))
    write_hyperparam_report(model.params, names, archive.path(mode, "hyperparams.csv"))
    return StageRecord("summarize", mode=mode)


def run_stage(archive: Archive, record: StageRecord, log=print) -> StageRecord:
    """Dispatch on a stage record; used both by the CLI and by replay."""
    name = record.name
    if name == "design":
        return stage_design(archive, record.seed)
    if name == "simulate":
        return stage_simulate(archive, log)
    if name == "observe":
        return stage_observe(archive, record.seed)
    if name == "fit":
        return stage_fit(archive, record.mode, record.seed)
    if name == "sample":
        return stage_sample(archive, record.mode, record.seed, log)
    if name == "ei":
        return stage_ei(archive, record.mode)
    if name == "loop":
        return stage_loop(archive, record.steps, record.mode, log)
    if name == "summarize":
        return stage_summarize(archive, record.mode)
    raise ValueError(f"unknown stage {name!r}")


def replay(source: Archive, target: Archive, log=print) -> list[str]:
    """Re-run every recorded stage of ``source`` into ``target``; returns differing files."""
    if target.root.exists() and any(target.root.iterdir()):
        raise FileExistsError(f"{target.root} is not empty")
    target.initialize(source.config())
    for rec in source.stages():
        log(f"replaying {rec.line()}")
        target.record(run_stage(target, rec, log))
    want, got = source.hashes(), target.hashes()
    return sorted(k for k in set(want) | set(got) if want.get(k) != got.get(k))
