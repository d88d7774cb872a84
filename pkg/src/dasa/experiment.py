"""Lifelong runs over a sequence of domains for DASA and the baselines."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneGraph, backbone_weights, build_and_partition, insert_sa, save_weights
from .bank import Bank
from .evaluation import DomainEval, EvalReport, average_seen, evaluate_domain, write_curve
from .kd import BaselineState, ExemplarBuffer, train_domain_full
from .train import TrainConfig, train_domain

log = logging.getLogger(__name__)

METHODS = ("dasa", "da", "kd", "finetune")


def desk_config(epochs: int = 40, seed: int = 0, base_lr: float = 3.5e-3) -> TrainConfig:
    """Scaled-down schedule for the tiny backbone on 64x32 synthetic data.

    Warmup and decay keep their proportions of the full 80-epoch schedule.
    """
    return TrainConfig(batch_size=32, epochs=epochs, warmup_epochs=max(1, epochs // 8),
                       decay_epoch_first=max(1, epochs * 3 // 8), decay_epoch_rest=max(1, epochs // 8),
                       input_size=(64, 32), pad=4, base_lr=base_lr, warmup_start_lr=base_lr / 10, seed=seed)


# desk-scale synthetic benchmark: source set for pre-training, then a 3-domain sequence
DESK_SOURCE = dict(n_ids=200, images_per_id=8, seed=0)
DESK_SEQUENCE = dict(n_domains=3, ids_per_domain=80, images_per_id=8, cameras_per_domain=2, seed=1)


def pretrain_backbone(source, config: TrainConfig, arch: str = "tiny", seed: int = 0) -> dict:
    """Train a whole backbone on a source set; returns named weights without the neck BN."""
    torch.manual_seed(seed)
    graph, _ = build_and_partition(arch, seed=seed)
    train_domain_full(graph, source, config.replace(seed=seed), replay=False, distill=False)
    neck = [l.index for l in graph.layers if l.kind == "neck-bn"][0]
    return {k: v for k, v in backbone_weights(graph).items() if not k.startswith(f"layer{neck}.")}


@dataclass
class SequenceResult:
    method: str
    names: list[str]
    # per step: evaluations of every domain seen so far
    steps: list[list[DomainEval]] = field(default_factory=list)
    graph: BackboneGraph | None = None
    bank: Bank | None = None
    baseline: BaselineState | None = None
    histories: list = field(default_factory=list)
    seconds: float = 0.0
    manifest_extra: dict = field(default_factory=dict)

    def curve(self) -> list[tuple]:
        return [(i + 1, len(evals), *average_seen(evals)) for i, evals in enumerate(self.steps)]

    def final(self) -> EvalReport:
        return EvalReport(self.steps[-1])

    def rank1(self, step: int, domain: int) -> float:
        return self.steps[step][domain].rank1

    def mAP(self, step: int, domain: int) -> float:
        return self.steps[step][domain].mAP


def build_graph(method: str, arch: str, pretrained, kernel_size: int, sa_placement, seed: int) -> BackboneGraph:
    graph, _ = build_and_partition(arch, pretrained=pretrained, seed=seed)
    if method == "dasa":
        insert_sa(graph, sa_placement, kernel_size)
    return graph


def run_sequence(datasets, method: str, config: TrainConfig, arch: str = "tiny", pretrained=None,
                 kernel_size: int = 5, sa_placement="all", metric: str = "cosine",
                 out_dir=None, lambda_kd: float = 1.0, exemplars: tuple[int, int] = (250, 2),
                 evaluate_all: bool = True, manifest_extra: dict | None = None) -> SequenceResult:
    """Train ``method`` over ``datasets`` in order, evaluating every seen domain after each step.

    ``dasa`` tunes BN + SA per domain into a bank; ``da`` is the same without
    SA; ``kd`` and ``finetune`` carry one full network across domains.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    t0 = time.time()
    torch.manual_seed(config.seed)
    graph = build_graph(method, arch, pretrained, kernel_size, sa_placement, config.seed)
    res = SequenceResult(method, [d.name for d in datasets], graph=graph, manifest_extra=dict(manifest_extra or {}))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if method in ("dasa", "da"):
        res.bank = Bank(arch)
    else:
        res.baseline = BaselineState(buffer=ExemplarBuffer(*exemplars))

    for t, ds in enumerate(datasets):
        hist: list = []
        log_fh = open(out / f"metrics_step{t + 1}.jsonl", "w") if out is not None else None
        try:
            if res.bank is not None:
                train_domain(graph, ds, config, bank=res.bank, history=hist, log_file=log_fh)
            else:
                res.baseline = train_domain_full(
                    graph, ds, config, res.baseline, ordinal=t, lambda_kd=lambda_kd,
                    replay=method == "kd", distill=method == "kd", history=hist, log_file=log_fh)
        finally:
            if log_fh is not None:
                log_fh.close()
        res.histories.append(hist)
        seen = datasets[:t + 1] if evaluate_all else [ds]
        res.steps.append([evaluate_domain(graph, d, bank=res.bank, metric=metric) for d in seen])
        m, r1 = average_seen(res.steps[-1])
        log.info("%s step %d (%s): seen mAP %.2f R-1 %.2f", method, t + 1, ds.name, 100 * m, 100 * r1)
        if out is not None:
            _persist_step(res, out, t, config)
    res.seconds = time.time() - t0
    return res


def _persist_step(res: SequenceResult, out: Path, t: int, config: TrainConfig) -> None:
    if res.bank is not None:
        res.bank.save(out / "bank")
    else:
        save_weights(backbone_weights(res.graph), out / "model.npz")
        if res.baseline.head_weight is not None:
            np.save(out / "classifier.npy", res.baseline.head_weight.numpy())
        if res.method == "kd":
            res.baseline.buffer.save(out / "exemplars")
    write_curve(res.curve(), out / "curve.csv")
    EvalReport(res.steps[-1]).write(out / f"report_step{t + 1}.json")
    manifest_path = out / "run_manifest.json"
    manifest = json.loads(manifest_path.read_text()) if manifest_path.exists() and t > 0 else {
        "method": res.method, "seed": config.seed, "order": res.names,
        "bank": "bank" if res.bank is not None else None,
        "model": None if res.bank is not None else "model.npz", "curve": "curve.csv",
        **res.manifest_extra, "steps": []}
    manifest["steps"].append({"step": t + 1, "dataset": res.names[t],
                              "metrics_log": f"metrics_step{t + 1}.jsonl",
                              "report": f"report_step{t + 1}.json"})
    manifest_path.write_text(json.dumps(manifest, indent=2))
