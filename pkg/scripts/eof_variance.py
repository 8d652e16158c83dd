"""Cumulative variance captured by the low-fidelity and discrepancy EOFs.

Shows which truncation a given variance target selects on an archive's
original design runs.
"""

import argparse

from mfcal.eof import build_eof_model

from _common import open_archive, prepare


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--archive", default="runs/sparse")
    ap.add_argument("--config", default="sparse.cfg")
    ap.add_argument("--target", type=float, default=0.99)
    ap.add_argument("--show", type=int, default=6, help="number of leading EOFs to list")
    args = ap.parse_args()

    archive = open_archive(args.archive, args.config)
    prepare(archive)
    cfg = archive.config()
    low = archive.runs("low")[: cfg.n_low]
    high = archive.runs("high")[: cfg.n_high]
    eof = build_eof_model(low, high, args.target, args.target)
    for label, basis in (("low fidelity", eof.low), ("discrepancy", eof.disc)):
        fracs = " ".join(f"{v:.4f}" for v in basis.variance_fractions[: args.show])
        print(f"{label}: cumulative {fracs}  -> {basis.truncation} EOFs for target {args.target}")


if __name__ == "__main__":
    main()
