"""Command-line front end: ``dasa <command> ...``.

Commands: synth, pretrain, train-sequence, eval, report-storage, heatmap, plot.
A run is described by an INI file whose sections are [run], [model], [train],
[data] and [synthetic]; command-line flags override it.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .backbone import build_and_partition, insert_sa, load_weights, save_weights
from .bank import Bank, ExemplarPolicy, format_storage, select_snapshot, storage_report
from .datasets import (DatasetSpec, load_reid_directory, read_image, sequence_config, synth_generate,
                       synth_source, write_dataset)
from .evaluation import EvalReport, attention_map, evaluate_domain, read_curve, save_heatmap
from .experiment import METHODS, pretrain_backbone, run_sequence
from .train import TrainConfig

log = logging.getLogger("dasa")

SYNTH_KEYS = {"n_domains": int, "ids_per_domain": int, "images_per_id": int, "cameras_per_domain": int,
              "seed": int}


class CliError(Exception):
    pass


# ---------------------------------------------------------------- config

def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser()
    if path is not None:
        if not cp.read(path):
            raise CliError(f"cannot read config {path}")
        cp.set("DEFAULT", "_base", str(Path(path).resolve().parent))
    return cp


def _get(cp, section, key, flag=None, default=None, cast=str):
    if flag is not None:
        return flag
    if cp.has_section(section) and cp.has_option(section, key):
        return cast(cp.get(section, key))
    return default


def _path(cp, value):
    """Config paths are relative to the config file; flag paths to the working directory."""
    if value is None:
        return None
    p = Path(value)
    base = cp.defaults().get("_base")
    return p if p.is_absolute() or base is None else Path(base) / p


def train_config(cp, seed=None) -> TrainConfig:
    values = {k: v for k, v in cp["train"].items() if k != "_base"} if cp.has_section("train") else {}
    cfg = TrainConfig.from_mapping(values)
    return cfg.replace(seed=seed) if seed is not None else cfg


def resolve_datasets(names, cp, data_root=None) -> list[DatasetSpec]:
    """Look each name up in [data], then under the data root, then among [synthetic] domains."""
    synthetic = None
    out = []
    root = Path(data_root) if data_root else _path(cp, _get(cp, "data", "root"))
    for name in names:
        explicit = _get(cp, "data", name)
        if explicit is not None:
            out.append(load_reid_directory(_path(cp, explicit), name))
        elif root is not None and (root / name).is_dir():
            out.append(load_reid_directory(root / name, name))
        elif cp.has_section("synthetic"):
            if synthetic is None:
                kw = {k: SYNTH_KEYS[k](v) for k, v in cp["synthetic"].items() if k in SYNTH_KEYS}
                synthetic = {d.name: d for d in synth_generate(**kw)}
            if name not in synthetic:
                raise CliError(f"dataset {name!r} is neither configured nor among synthetic {sorted(synthetic)}")
            out.append(synthetic[name])
        else:
            raise CliError(f"cannot resolve dataset {name!r}: add it to [data] or pass --data-root")
    return out


def _dump_effective(cp, args, cfg: TrainConfig, path: Path) -> None:
    eff = configparser.ConfigParser()
    for s in cp.sections():
        eff[s] = {k: v for k, v in cp[s].items() if k != "_base"}
    eff["run"] = {"order": ",".join(args.names), "method": args.method, "seed": str(cfg.seed)}
    eff["model"] = {"arch": args.arch, "kernel_size": str(args.kernel_size), "sa_placement": args.sa_placement,
                    "metric": args.metric, **({"pretrained": str(args.pretrained)} if args.pretrained else {})}
    train = {}
    for k, v in cfg.__dict__.items():
        train[k] = "x".join(str(x) for x in v) if isinstance(v, tuple) else str(v)
    eff["train"] = train
    with open(path, "w") as fh:
        eff.write(fh)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.source:
        ds = synth_source(n_ids=args.ids, images_per_id=args.images, seed=args.seed)
        write_dataset(ds, out / ds.name)
        print(f"wrote {ds.name}: {len(ds.train)} images, {ds.n_ids} identities -> {out / ds.name}")
        return 0
    for ds in synth_generate(args.domains, args.ids, args.images, args.cameras, seed=args.seed):
        write_dataset(ds, out / ds.name)
        print(f"wrote {ds.name}: train {len(ds.train)}, query {len(ds.query)}, gallery {len(ds.gallery)}"
              f" -> {out / ds.name}")
    return 0


def cmd_pretrain(args) -> int:
    cp = read_config(args.config)
    cfg = train_config(cp, args.seed)
    arch = _get(cp, "model", "arch", args.arch, "tiny")
    source = load_reid_directory(args.data)
    weights = pretrain_backbone(source, cfg, arch, seed=cfg.seed)
    save_weights(weights, args.out)
    print(f"saved {len(weights)} arrays to {args.out}")
    return 0


def cmd_train_sequence(args) -> int:
    cp = read_config(args.config)
    args.seed = _get(cp, "run", "seed", args.seed, None, int)
    cfg = train_config(cp, args.seed)
    order = _get(cp, "run", "order", args.order)
    if order is None:
        raise CliError("no sequence order: pass --order or set [run] order")
    args.names = sequence_config(order).names
    args.method = _get(cp, "run", "method", args.method, "dasa")
    if args.method not in METHODS:
        raise CliError(f"unknown method {args.method!r}")
    args.arch = _get(cp, "model", "arch", args.arch, "tiny")
    args.kernel_size = _get(cp, "model", "kernel_size", args.kernel_size, 5, int)
    args.sa_placement = _get(cp, "model", "sa_placement", args.sa_placement, "all")
    args.metric = _get(cp, "model", "metric", args.metric, "cosine")
    args.pretrained = args.pretrained or _path(cp, _get(cp, "model", "pretrained"))
    datasets = resolve_datasets(args.names, cp, args.data_root)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump_effective(cp, args, cfg, out / "config.ini")
    pretrained = load_weights(args.pretrained) if args.pretrained else None
    extra = {"config": "config.ini", "arch": args.arch, "kernel_size": args.kernel_size,
             "sa_placement": args.sa_placement, "metric": args.metric,
             "pretrained": str(Path(args.pretrained).resolve()) if args.pretrained else None}
    res = run_sequence(datasets, args.method, cfg, arch=args.arch, pretrained=pretrained,
                       kernel_size=args.kernel_size, sa_placement=args.sa_placement, metric=args.metric,
                       out_dir=out, manifest_extra=extra)
    print(res.final().format())
    try_plot(out / "curve.csv", out / "curve.png")
    return 0


def _artifact_graph(args, manifest: dict):
    """Rebuild the network an artifact was trained with; conv weights come from its pre-training source."""
    arch = manifest.get("arch", "tiny")
    pretrained = args.pretrained or manifest.get("pretrained")
    seed = manifest.get("seed", 0)
    if args.bank:
        bank = Bank.load(args.bank)
        graph, _ = build_and_partition(bank.arch_id, pretrained=pretrained, seed=seed)
        first = bank.snapshots[0]
        if first.sa_kernels:
            insert_sa(graph, first.sa_layer_indices, first.sa_kernels[0].kernel_size)
        return graph, bank
    graph, _ = build_and_partition(arch, pretrained=args.model, seed=seed)
    return graph, None


def _run_manifest(artifact: Path) -> dict:
    for p in (artifact.parent / "run_manifest.json", artifact / "run_manifest.json"):
        if p.is_file():
            return json.loads(p.read_text())
    return {}


def cmd_eval(args) -> int:
    if bool(args.bank) == bool(args.model):
        raise CliError("pass exactly one of --bank or --model")
    artifact = Path(args.bank or args.model)
    if not artifact.exists():
        raise CliError(f"missing artifact {artifact}")
    manifest = _run_manifest(artifact)
    graph, bank = _artifact_graph(args, manifest)
    cp = read_config(args.config)
    metric = args.metric or manifest.get("metric", "cosine")
    data = Path(args.dataset)
    ds = load_reid_directory(data, args.name) if data.is_dir() else resolve_datasets([args.dataset], cp,
                                                                                      args.data_root)[0]
    if bank is not None and args.domain is not None:
        bank.get(args.domain)  # fail early on an unknown id
    ev = evaluate_domain(graph, ds, bank=bank, domain_id=args.domain, metric=metric)
    report = EvalReport([ev])
    print(report.format())
    if args.out:
        out = Path(args.out)
        if out.suffix != ".json":
            out.mkdir(parents=True, exist_ok=True)
            out = out / f"eval_{ds.name}.json"
        report.write(out)
    return 0


def _parse_size(s: str) -> tuple[int, int]:
    h, w = s.lower().split("x")
    return int(h), int(w)


def cmd_report_storage(args) -> int:
    arch, n, k, placement = args.arch, args.domains, args.kernel_size, args.sa_placement
    if args.bank:
        bank = Bank.load(args.bank)
        arch, n = bank.arch_id, len(bank)
        first = bank.snapshots[0] if len(bank) else None
        if first is not None:
            placement = first.sa_layer_indices
            k = first.sa_kernels[0].kernel_size if first.sa_kernels else k
    h, w = _parse_size(args.exemplar_size)
    policy = ExemplarPolicy(args.exemplar_steps or n, args.exemplar_ids, args.exemplar_images, h, w)
    lines = storage_report(arch, n, k, placement, (args.classes, args.dim), policy)
    print(f"architecture {arch}, {n} domain(s), SA kernel {k}x{k}")
    print(format_storage(lines))
    if args.out:
        Path(args.out).write_text(json.dumps([l.__dict__ | {"mib": l.mib} for l in lines], indent=2))
    return 0


def cmd_heatmap(args) -> int:
    manifest = _run_manifest(Path(args.bank))
    graph, bank = _artifact_graph(args, manifest)
    snap = bank.get(args.domain) if args.domain else bank.latest
    img = read_image(args.image, graph.input_size)
    save_heatmap(attention_map(graph, snap, img), args.out)
    print(f"heat map for {snap.domain_id} -> {args.out}")
    return 0


def try_plot(curve_path, image_path) -> bool:
    """Render the curve file; a missing plotting backend or bad file only logs a warning."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        rows = read_curve(curve_path)
        steps = [r[0] for r in rows]
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(steps, [100 * r[2] for r in rows], marker="o", label="mean mAP")
        ax.plot(steps, [100 * r[3] for r in rows], marker="s", label="mean R-1")
        ax.set_xlabel("training step")
        ax.set_xticks(steps)
        ax.legend()
        fig.tight_layout()
        fig.savefig(image_path, dpi=100)
        plt.close(fig)
        return True
    except Exception as exc:  # rendering is optional
        log.warning("could not render %s: %s", image_path, exc)
        return False


def cmd_plot(args) -> int:
    try_plot(args.curve, args.out)
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dasa", description="Lifelong person re-identification with "
                                "per-domain BN and SA snapshots.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic domains in the benchmark folder layout")
    s.add_argument("--out", required=True)
    s.add_argument("--domains", type=int, default=3)
    s.add_argument("--ids", type=int, default=20)
    s.add_argument("--images", type=int, default=8)
    s.add_argument("--cameras", type=int, default=2)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--source", action="store_true", help="write a training-only pre-training set instead")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="fully train a backbone on a source set")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--arch")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("train-sequence", help="train a method over an ordered sequence of domains")
    s.add_argument("--config")
    s.add_argument("--order")
    s.add_argument("--method", choices=METHODS)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--data-root")
    s.add_argument("--pretrained")
    s.add_argument("--arch")
    s.add_argument("--metric", choices=("cosine", "euclidean"))
    s.add_argument("--kernel-size", type=int)
    s.add_argument("--sa-placement")
    s.set_defaults(func=cmd_train_sequence)

    s = sub.add_parser("eval", help="evaluate a bank or model on one dataset")
    s.add_argument("--bank")
    s.add_argument("--model")
    s.add_argument("--dataset", required=True, help="dataset folder, or a name resolved via --config/--data-root")
    s.add_argument("--name", help="dataset name when --dataset is a folder")
    s.add_argument("--domain", help="force this snapshot instead of camera-based selection")
    s.add_argument("--metric", choices=("cosine", "euclidean"))
    s.add_argument("--pretrained")
    s.add_argument("--config")
    s.add_argument("--data-root")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report-storage", help="storage of every component, per domain and cumulative")
    s.add_argument("--bank")
    s.add_argument("--arch", default="resnet50")
    s.add_argument("--domains", type=int, default=4)
    s.add_argument("--kernel-size", type=int, default=5)
    s.add_argument("--sa-placement", default="all")
    s.add_argument("--classes", type=int, default=8026)
    s.add_argument("--dim", type=int, default=2048)
    s.add_argument("--exemplar-steps", type=int)
    s.add_argument("--exemplar-ids", type=int, default=250)
    s.add_argument("--exemplar-images", type=int, default=2)
    s.add_argument("--exemplar-size", default="256x128")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report_storage)

    s = sub.add_parser("heatmap", help="activation heat map of one image under a snapshot")
    s.add_argument("--bank", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--domain")
    s.add_argument("--pretrained")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_heatmap, model=None)

    s = sub.add_parser("plot", help="render a curve file")
    s.add_argument("--curve", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, FileNotFoundError, KeyError, ValueError, RuntimeError) as exc:
        print(f"dasa {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
