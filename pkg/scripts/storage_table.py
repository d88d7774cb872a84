"""Storage of every component for ResNet-50 at the full-scale setting and for the tiny desk backbone."""

import argparse

from dasa.bank import ExemplarPolicy, format_storage, storage_report


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--kernel-size", type=int, default=5)
    args = p.parse_args()

    lines = storage_report("resnet50", args.domains, args.kernel_size)
    print(f"resnet50, {args.domains} domains, 8,026 classes, exemplars (250 ids x 2 images per step)")
    print(format_storage(lines))
    by = {l.component: l for l in lines}
    for name in ("BN(t) affine-only", "BN(t) snapshot"):
        per = by[name].nbytes + by["SA(t)"].nbytes
        print(f"per-domain cost with {name}: {per / 2**20:.3f} MiB = {100 * per / by['backbone'].nbytes:.2f}% "
              f"of the backbone")

    print()
    tiny = storage_report("tiny", 3, args.kernel_size, classifier_dims=(120, 32),
                          exemplar_policy=ExemplarPolicy(3, 40, 2, 64, 32))
    print("tiny desk backbone, 3 domains")
    print(format_storage(tiny))


if __name__ == "__main__":
    main()
