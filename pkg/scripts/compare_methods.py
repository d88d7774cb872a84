"""Run DASA, BN-only adaptation, the KD baseline and fine-tuning over the desk-scale sequence.

Prints the seen-domain averages after every step and the first domain's
Rank-1 over time (the forgetting curve), and writes each run's artifacts
under --out/<method>_seed<k>/.
"""

import argparse
import json
from pathlib import Path

from dasa.experiment import METHODS, desk_config, run_sequence

from _common import desk_sequence, pretrained_weights, setup_logging


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--seeds", default="0")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--ids", type=int, help="identities per domain")
    p.add_argument("--out", default="runs/compare")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    setup_logging(args.verbose)

    out = Path(args.out)
    weights = pretrained_weights(out / "pretrained.npz")
    datasets = desk_sequence(args.ids)
    summary = []
    for seed in (int(s) for s in args.seeds.split(",")):
        for method in args.methods.split(","):
            res = run_sequence(datasets, method, desk_config(args.epochs, seed), pretrained=weights,
                               out_dir=out / f"{method}_seed{seed}")
            curve = res.curve()
            forgetting = [100 * res.rank1(t, 0) for t in range(len(res.steps))]
            print(f"{method:9s} seed {seed}  mean mAP " + " ".join(f"{100 * c[2]:6.2f}" for c in curve)
                  + "  mean R-1 " + " ".join(f"{100 * c[3]:6.2f}" for c in curve)
                  + "  domain-1 R-1 " + " ".join(f"{v:5.1f}" for v in forgetting) + f"  ({res.seconds:.0f} s)")
            summary.append({"method": method, "seed": seed, "curve": curve, "domain1_rank1": forgetting})
    (out / "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
