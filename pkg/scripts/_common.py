"""Helpers shared by the experiment scripts."""

from pathlib import Path

from mfcal.config import load_config
from mfcal.mcmc import read_chains_csv, summarize
from mfcal.pipeline import Archive, StageRecord, run_stage

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def open_archive(root, config_name, **overrides):
    cfg = load_config(CONFIGS / config_name, {k: v for k, v in overrides.items() if v is not None})
    archive = Archive(root)
    archive.initialize(cfg)
    return archive


def stage(archive, name, **kw):
    done = run_stage(archive, StageRecord(name, **kw))
    archive.record(done)
    return done


def prepare(archive):
    """Design, simulate and observe unless the archive already has runs."""
    if not archive.path("obs", "observations.csv").exists():
        for name in ("design", "simulate", "observe"):
            stage(archive, name)


def posterior(archive, mode):
    cfg = archive.config()
    return summarize(read_chains_csv(archive.path(mode, "chains.csv")), cfg.box, cfg.kde_resolution)


def describe(label, s):
    lo_hi = ", ".join(f"[{lo:.3f}, {hi:.3f}]" for lo, hi in s.intervals)
    print(f"{label}: mode {s.mode.round(3).tolist()}  variances {s.variances.round(5).tolist()}  95% intervals {lo_hi}")
