"""SA kernel-size and placement ablations on the desk-scale sequence.

Each configuration is trained over the whole sequence; the table reports the
final mean mAP / Rank-1 over seen domains, averaged over the given seeds.
``--placements`` takes semicolon-separated placement strings such as
``all;none;1,5;9`` (conv indices of the tiny backbone).
"""

import argparse
from pathlib import Path

import numpy as np

from dasa.experiment import desk_config, run_sequence

from _common import desk_sequence, pretrained_weights, setup_logging


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kernel-sizes", default="1,3,5,7")
    p.add_argument("--placements", default="all")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--out", default="runs/ablation")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    setup_logging(args.verbose)

    weights = pretrained_weights(Path(args.out) / "pretrained.npz")
    datasets = desk_sequence()
    seeds = [int(s) for s in args.seeds.split(",")]
    configs = [("da", 5, "none")]
    for placement in args.placements.split(";"):
        configs += [("dasa", int(k), placement) for k in args.kernel_sizes.split(",")]

    print(f"{'config':28s} {'mAP':>7s} {'+-':>5s} {'R-1':>7s}")
    for method, k, placement in configs:
        maps, r1s = [], []
        for seed in seeds:
            res = run_sequence(datasets, method, desk_config(args.epochs, seed), pretrained=weights,
                               kernel_size=k, sa_placement=placement)
            maps.append(100 * res.curve()[-1][2])
            r1s.append(100 * res.curve()[-1][3])
        name = "BN only" if method == "da" else f"SA k={k} at {placement}"
        print(f"{name:28s} {np.mean(maps):7.2f} {np.std(maps):5.2f} {np.mean(r1s):7.2f}", flush=True)


if __name__ == "__main__":
    main()
