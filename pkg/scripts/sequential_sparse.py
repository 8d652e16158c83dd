"""Sparse 20/5 design followed by expected-improvement augmentation.

Prints the posterior before and after the loop and the distance of each
mode from the truth in unit-scaled coordinates.
"""

import argparse

import numpy as np

from _common import describe, open_archive, posterior, prepare, stage


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archive", default="runs/sparse")
    ap.add_argument("--config", default="sparse.cfg")
    ap.add_argument("--steps", type=int, help="number of EI steps (default from config)")
    args = ap.parse_args()

    archive = open_archive(args.archive, args.config, steps=args.steps)
    prepare(archive)
    cfg = archive.config()
    truth = cfg.box.to_unit(np.asarray(cfg.truth))

    for name in ("fit", "sample", "summarize"):
        stage(archive, name, mode="multifidelity")
    before = posterior(archive, "multifidelity")
    stage(archive, "loop", mode="multifidelity", steps=cfg.steps)
    for name in ("sample", "summarize"):
        stage(archive, name, mode="multifidelity")
    after = posterior(archive, "multifidelity")

    for label, s in (("before loop", before), ("after loop", after)):
        describe(label, s)
        print(f"  unit distance to truth {np.linalg.norm(cfg.box.to_unit(s.mode) - truth):.4f}")


if __name__ == "__main__":
    main()
