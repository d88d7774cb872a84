"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Storage, oracle and serialization criteria run in seconds. The desk-scale
sequence criteria (2-4) share one pre-trained tiny backbone and one synthetic
3-domain sequence and take several minutes on a single CPU.
"""

import math
import time

import numpy as np
import pytest
import torch

from dasa.backbone import build_and_partition, extract_features, insert_sa
from dasa.bank import SnapshotFormatError, deserialize, serialize, snapshots_equal, storage_report
from dasa.bn import BnLayerState, bn_forward_eval, bn_forward_train
from dasa.datasets import synth_generate
from dasa.evaluation import average_precision, retrieval_metrics
from dasa.experiment import DESK_SEQUENCE, desk_config, run_sequence
from dasa.kd import kd_loss
from dasa.train import TrainConfig, lr_at_epoch, pk_sample_epoch

from conftest import ACCEPTANCE_LINES
from helpers import random_snapshot
from oracles import brute_force_retrieval, random_instance


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- 1 storage arithmetic

def test_criterion_01_storage_arithmetic():
    t0 = time.perf_counter()
    lines = {l.component: l for l in storage_report("resnet50", 4, 5)}
    elapsed = time.perf_counter() - t0
    ex, sa, bb = lines["exemplars"].mib, lines["SA(t)"].mib, lines["backbone"].mib
    cls, bn = lines["classifier"].mib, lines["BN(t) affine-only"].mib
    checks = [ex == 187.5, rel(sa, 2.533) < 1e-3, rel(bb, 89.684) < 5e-3, rel(cls, 62.703) < 1e-3,
              rel(bn, 0.210) < 0.05, elapsed < 1.0]
    verdict(1, all(checks), f"exemplars {ex:.3f}, SA {sa:.4f}, backbone {bb:.3f}, classifier {cls:.3f}, "
                            f"BN affine {bn:.4f} MiB; {elapsed * 1000:.0f} ms")


# ---------------------------------------------------------------- desk-scale sequence (2-4)

@pytest.fixture(scope="module")
def desk(desk_pretrained):
    datasets = synth_generate(**DESK_SEQUENCE)
    cache = {}

    def run(method, seed=0, k=5):
        key = (method, seed, k)
        if key not in cache:
            torch.manual_seed(seed)
            cache[key] = run_sequence(datasets, method, desk_config(seed=seed), pretrained=desk_pretrained,
                                      kernel_size=k)
        return cache[key]

    return run


def test_criterion_02_zero_forgetting(desk):
    res = desk("dasa")
    first, last = res.steps[0][0], res.steps[2][0]
    same = (first.mAP == last.mAP and first.cmc == last.cmc and first.snapshots == last.snapshots == ["synthA"])
    verdict(2, same and res.seconds < 600,
            f"domain-1 mAP {100 * first.mAP:.2f} -> {100 * last.mAP:.2f}, R-1 {100 * first.rank1:.2f} -> "
            f"{100 * last.rank1:.2f} (bitwise equal: {same}); {res.seconds:.0f} s")


def test_criterion_03_method_ordering(desk):
    runs = {m: desk(m) for m in ("dasa", "kd", "finetune")}
    final = {m: r.curve()[-1][3] for m, r in runs.items()}
    drop = {m: r.rank1(0, 0) - r.rank1(2, 0) for m, r in runs.items()}
    seconds = sum(r.seconds for r in runs.values())
    ok = (final["dasa"] > final["kd"] > final["finetune"] and drop["finetune"] >= 0.10
          and drop["dasa"] == 0.0 and seconds < 45 * 60)
    verdict(3, ok, "final mean R-1 " + ", ".join(f"{m} {100 * v:.2f}" for m, v in final.items())
            + f"; domain-1 R-1 drop finetune {100 * drop['finetune']:.1f}, kd {100 * drop['kd']:.1f}, "
              f"dasa {100 * drop['dasa']:.1f} points; {seconds:.0f} s")


def test_criterion_04_kernel_size_ablation(desk):
    seeds = (0, 1, 2)
    k5, k1, da, seconds = [], [], [], 0.0
    for s in seeds:
        for store, method, k in ((k5, "dasa", 5), (k1, "dasa", 1), (da, "da", 5)):
            r = desk(method, s, k)
            store.append(100 * r.curve()[-1][2])
            seconds += r.seconds
    k1_vs_da = float(np.mean(np.subtract(k1, da)))
    ok = all(a > b for a, b in zip(k5, k1)) and k1_vs_da <= 0.5 and seconds < 90 * 60
    verdict(4, ok, f"final mean mAP per seed k=5 {np.round(k5, 2).tolist()}, k=1 {np.round(k1, 2).tolist()}, "
                   f"BN-only {np.round(da, 2).tolist()}; mean(k=1 - BN-only) {k1_vs_da:+.2f} points; "
                   f"{seconds:.0f} s")


# ---------------------------------------------------------------- 5 identity initialization

def test_criterion_05_identity_initialization(desk_pretrained):
    plain, _ = build_and_partition("tiny", pretrained=desk_pretrained)
    with_sa, _ = build_and_partition("tiny", pretrained=desk_pretrained)
    insert_sa(with_sa, "all", 5)
    imgs = np.random.default_rng(5).integers(0, 256, (100, 64, 32, 3), dtype=np.uint8)
    delta = float(np.abs(extract_features(with_sa, imgs) - extract_features(plain, imgs)).max())
    verdict(5, delta < 1e-6, f"max |feature difference| over 100 inputs = {delta:.2e}")


# ---------------------------------------------------------------- 6 metric oracles

def test_criterion_06_metric_oracles():
    rng = np.random.default_rng(6)
    worst = 0.0
    for _ in range(200):
        dist, qp, gp, qc, gc = random_instance(rng)
        res = retrieval_metrics(dist, qp, gp, qc, gc, max_rank=5)
        m, cmc, _ = brute_force_retrieval(dist, qp, gp, qc, gc, 5)
        worst = max(worst, abs(res.mAP - m), float(np.abs(res.cmc - np.asarray(cmc)).max()))
    ap = average_precision([1, 0, 1])
    verdict(6, worst <= 1e-9 and abs(ap - 5 / 6) < 1e-12 and round(ap, 4) == 0.8333,
            f"max deviation from brute force over 200 instances {worst:.1e}; AP example {ap:.4f}")


# ---------------------------------------------------------------- 7 distillation loss

def test_criterion_07_distillation_loss():
    rng = np.random.default_rng(7)
    ent_err, grad_err = 0.0, 0.0
    for _ in range(50):
        b, n = int(rng.integers(1, 5)), int(rng.integers(2, 8))
        t = torch.from_numpy(rng.normal(0, 2, (b, n)))
        p = torch.softmax(t, 1)
        ent_err = max(ent_err, abs(kd_loss(t, t).item() + (p * torch.log(p)).sum(1).mean().item()))
        s = torch.from_numpy(rng.normal(0, 2, (b, n))).requires_grad_(True)
        kd_loss(t, s).backward()
        fd = torch.zeros_like(s)
        h = 1e-6
        with torch.no_grad():
            for i in range(b):
                for j in range(n):
                    e = torch.zeros_like(s)
                    e[i, j] = h
                    fd[i, j] = (kd_loss(t, s + e) - kd_loss(t, s - e)) / (2 * h)
        grad_err = max(grad_err, ((fd - s.grad).norm() / s.grad.norm()).item())
    hand = kd_loss(torch.tensor([[0.0, 0.0]]), torch.tensor([[math.log(3), 0.0]])).item()
    verdict(7, ent_err < 1e-6 and grad_err < 1e-4 and abs(hand - 0.8370) < 1e-4,
            f"self-loss vs entropy {ent_err:.1e}, gradient rel. err {grad_err:.1e}, hand example {hand:.4f}")


# ---------------------------------------------------------------- 8 batch normalization

def test_criterion_08_batch_normalization():
    rng = np.random.default_rng(8)
    worst_mu, worst_var = 0.0, 0.0
    for _ in range(50):
        c = int(rng.integers(1, 5))
        x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.5, 5), (int(rng.integers(4, 16)), c, 4, 4))
        y, _ = bn_forward_train(BnLayerState.fresh(c, dtype=np.float64), x)
        worst_mu = max(worst_mu, float(np.abs(y.mean(axis=(0, 2, 3))).max()))
        worst_var = max(worst_var, float(np.abs(y.var(axis=(0, 2, 3)) - 1).max()))
    one = lambda v: np.array([v], np.float64)
    y2, _ = bn_forward_train(BnLayerState(one(0), one(1), one(2), one(1)), np.array([1.0, 3.0]).reshape(2, 1, 1, 1))
    _, upd = bn_forward_train(BnLayerState(one(0), one(1), one(1), one(0), momentum=0.1), np.full((4, 1, 2, 2), 10.0))
    y3 = bn_forward_eval(BnLayerState(one(2), one(4), one(3), one(-1), eps=1e-300), np.array([4.0]).reshape(1, 1, 1, 1))
    mean, var = rng.normal(size=3), rng.uniform(0.1, 4, 3)
    xr = rng.normal(size=(2, 3, 4, 4)) * 3
    rec = bn_forward_eval(BnLayerState(mean, var, np.sqrt(var + 1e-5), mean.copy()), xr)
    ok = (worst_mu < 1e-5 and worst_var < 1e-3 and np.allclose(y2.ravel(), [-1, 3], atol=1e-4)
          and abs(upd.running_mean[0] - 1.0) < 1e-12 and abs(y3.item() - 2.0) < 1e-12
          and np.allclose(rec, xr, atol=1e-5))
    verdict(8, ok, f"normalized |mean| <= {worst_mu:.1e}, |var - 1| <= {worst_var:.1e}; hand examples "
                   f"{np.round(y2.ravel(), 4).tolist()}, running mean {upd.running_mean[0]:.3f}, eval {y3.item():.3f}")


# ---------------------------------------------------------------- 9 schedule and sampler

def test_criterion_09_schedule_and_sampler():
    cfg = TrainConfig()
    anchors = (lr_at_epoch(0, cfg), lr_at_epoch(10, cfg), lr_at_epoch(cfg.decay_epoch_first + 1, cfg))
    lr_ok = (math.isclose(anchors[0], 3.5e-5, rel_tol=1e-12) and math.isclose(anchors[1], 3.5e-4, rel_tol=1e-12)
             and math.isclose(anchors[2], 3.5e-5, rel_tol=1e-12))
    labels = np.repeat(np.arange(1, 301), np.random.default_rng(9).integers(2, 9, 300))
    batches = pk_sample_epoch(labels, cfg, rng=np.random.default_rng(0))
    shapes = {(len(np.unique(labels[b])), tuple(sorted(set(np.unique(labels[b], return_counts=True)[1]))))
              for b in batches}
    verdict(9, lr_ok and shapes == {(64, (2,))} and len(batches) > 0,
            f"lr anchors {anchors[0]:.3g}, {anchors[1]:.3g}, {anchors[2]:.3g}; {len(batches)} batches, "
            f"all 64 identities x 2 instances: {shapes == {(64, (2,))}}")


# ---------------------------------------------------------------- 10 serialization

def test_criterion_10_serialization():
    rng = np.random.default_rng(10)
    roundtrips, detected, trials = 0, 0, 0
    for i in range(100):
        s = random_snapshot(rng, f"d{i}", i % 4)
        blob = serialize(s)
        back = deserialize(blob)
        roundtrips += snapshots_equal(s, back) and serialize(back) == blob
        for _ in range(10):
            bad = bytearray(blob)
            bad[rng.integers(len(bad))] ^= int(rng.integers(1, 256))
            trials += 1
            try:
                deserialize(bytes(bad))
            except SnapshotFormatError:
                detected += 1
    verdict(10, roundtrips == 100 and detected == trials,
            f"{roundtrips}/100 bitwise round trips; {detected}/{trials} single-byte corruptions detected")
