"""Compare the posterior from high fidelity runs alone with the multi-fidelity one."""

import argparse

from _common import describe, open_archive, posterior, prepare, stage


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--archive", default="runs/contrast")
    ap.add_argument("--config", default="sparse.cfg")
    ap.add_argument("--n-high-eofs", type=int, help="EOFs kept for the high-only surrogate")
    args = ap.parse_args()

    archive = open_archive(args.archive, args.config, n_high_eofs=args.n_high_eofs)
    prepare(archive)
    for mode in ("high-only", "multifidelity"):
        for name in ("fit", "sample", "summarize"):
            stage(archive, name, mode=mode)
        describe(mode, posterior(archive, mode))


if __name__ == "__main__":
    main()
