"""Calibrate the Lorenz '96 forcing parameters from the dense 40/20 design."""

import argparse

import numpy as np

from _common import describe, open_archive, posterior, prepare, stage


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--archive", default="runs/dense", help="output directory")
    ap.add_argument("--config", default="dense.cfg", help="file name under configs/")
    ap.add_argument("--n-iter", type=int, help="override MCMC iterations per chain")
    args = ap.parse_args()

    archive = open_archive(args.archive, args.config, n_iter=args.n_iter)
    prepare(archive)
    for name in ("fit", "sample", "summarize"):
        stage(archive, name, mode="multifidelity")
    s = posterior(archive, "multifidelity")
    truth = np.asarray(archive.config().truth)
    describe("multi-fidelity", s)
    print(f"truth {truth.tolist()} inside 95% HPD region: {s.hpd_contains(truth)}")


if __name__ == "__main__":
    main()
