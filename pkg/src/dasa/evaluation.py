"""Retrieval evaluation: distances, AP/mAP, CMC, seen-domain averages, heat maps."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneGraph, extract_features, to_tensor


def pairwise_distance(q, g, metric: str = "cosine") -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"feature dims differ: {q.shape[1]} vs {g.shape[1]}")
    if metric == "cosine":
        qn = np.linalg.norm(q, axis=1)
        gn = np.linalg.norm(g, axis=1)
        if np.any(qn == 0) or np.any(gn == 0):
            raise ValueError("zero-norm feature under cosine distance")
        return 1.0 - (q / qn[:, None]) @ (g / gn[:, None]).T
    if metric == "euclidean":
        d2 = (q ** 2).sum(1)[:, None] + (g ** 2).sum(1)[None] - 2 * q @ g.T
        return np.sqrt(np.maximum(d2, 0.0))
    raise ValueError(f"unknown metric {metric!r}")


def average_precision(relevant) -> float:
    """Mean of precision@rank over the ranks of relevant items."""
    rel = np.asarray(relevant, dtype=bool)
    if rel.size == 0:
        raise ValueError("empty ranking")
    hits = np.flatnonzero(rel)
    if hits.size == 0:
        raise ValueError("ranking has no relevant item")
    return float(np.mean(np.arange(1, hits.size + 1) / (hits + 1)))


def cmc_curve(rankings, max_rank: int | None = None) -> np.ndarray:
    """Fraction of queries whose first relevant item is within the top k, k = 1..max_rank."""
    firsts = []
    longest = 0
    for r in rankings:
        r = np.asarray(r, dtype=bool)
        longest = max(longest, r.size)
        hits = np.flatnonzero(r)
        if hits.size:
            firsts.append(hits[0])
    max_rank = max_rank or longest
    if not firsts:
        return np.zeros(max_rank)
    firsts = np.asarray(firsts)
    return np.array([(firsts < k).mean() for k in range(1, max_rank + 1)])


@dataclass
class RetrievalResult:
    mAP: float
    cmc: np.ndarray
    n_valid: int
    n_skipped: int

    @property
    def rank1(self) -> float:
        return float(self.cmc[0]) if self.cmc.size else 0.0


def ranked_relevance(distmat, q_pids, g_pids, q_cams, g_cams) -> list[np.ndarray | None]:
    """Per query: relevance flags in ranked order after junk removal (None if no valid match).

    Junk = same identity and same camera as the query. Ties break by gallery index.
    """
    out = []
    for i in range(distmat.shape[0]):
        order = np.argsort(distmat[i], kind="stable")
        keep = ~((g_pids[order] == q_pids[i]) & (g_cams[order] == q_cams[i]))
        rel = g_pids[order][keep] == q_pids[i]
        out.append(rel if rel.any() else None)
    return out


def retrieval_metrics(distmat, q_pids, g_pids, q_cams, g_cams, max_rank: int = 50) -> RetrievalResult:
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_cams, g_cams = np.asarray(q_cams), np.asarray(g_cams)
    rels = ranked_relevance(np.asarray(distmat), q_pids, g_pids, q_cams, g_cams)
    valid = [r for r in rels if r is not None]
    skipped = len(rels) - len(valid)
    if not valid:
        return RetrievalResult(0.0, np.zeros(max_rank), 0, skipped)
    aps = [average_precision(r) for r in valid]
    return RetrievalResult(float(np.mean(aps)), cmc_curve(valid, max_rank), len(valid), skipped)


@dataclass
class DomainEval:
    name: str
    mAP: float
    cmc: list
    n_valid: int
    n_skipped: int
    snapshots: list = field(default_factory=list)

    @property
    def rank1(self) -> float:
        return self.cmc[0]


def _features(graph: BackboneGraph, dataset, split, bank=None, domain_id=None):
    images = getattr(dataset, split).load(graph.input_size)
    if bank is None:
        return extract_features(graph, images), ["live"]
    from .bank import select_snapshot

    cams = getattr(dataset, split).camids
    keys = [dataset.camera_key(c) for c in cams]
    chosen = [select_snapshot(bank, camera_id=k, domain_id=domain_id) for k in keys]
    feats = np.zeros((len(images), graph.feature_dim), np.float32)
    used = []
    for snap in {id(s): s for s in chosen}.values():
        mask = np.array([s is snap for s in chosen])
        feats[mask] = extract_features(graph, images[mask], snapshot=snap)
        used.append(snap.domain_id)
    return feats, used


def evaluate_domain(graph: BackboneGraph, dataset, bank=None, domain_id=None, metric: str = "cosine",
                    max_rank: int = 50) -> DomainEval:
    """Cross-camera retrieval on a dataset's query/gallery split.

    With a bank, every image is embedded under the snapshot its camera maps
    to (unknown cameras fall back to the latest snapshot); without one, the
    graph's live state is used.
    """
    qf, used_q = _features(graph, dataset, "query", bank, domain_id)
    gf, used_g = _features(graph, dataset, "gallery", bank, domain_id)
    dist = pairwise_distance(qf, gf, metric)
    res = retrieval_metrics(dist, dataset.query.pids, dataset.gallery.pids,
                            dataset.query.camids, dataset.gallery.camids, max_rank)
    return DomainEval(dataset.name, res.mAP, res.cmc.tolist(), res.n_valid, res.n_skipped,
                      sorted(set(used_q) | set(used_g)))


def average_seen(reports) -> tuple[float, float]:
    reports = list(reports)
    if not reports:
        raise ValueError("no reports to average")
    return (float(np.mean([r.mAP for r in reports])), float(np.mean([r.rank1 for r in reports])))


@dataclass
class EvalReport:
    domains: list[DomainEval]
    storage: str | None = None

    @property
    def mean_map(self) -> float:
        return average_seen(self.domains)[0]

    @property
    def mean_rank1(self) -> float:
        return average_seen(self.domains)[1]

    def to_dict(self) -> dict:
        return {"domains": [asdict(d) for d in self.domains],
                "aggregate": {"mean_mAP": self.mean_map, "mean_rank1": self.mean_rank1,
                              "n_domains": len(self.domains)},
                "storage": self.storage}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def format(self) -> str:
        rows = [f"{'domain':<16} {'mAP':>7} {'R-1':>7} {'R-5':>7} {'queries':>8} {'skipped':>8}  snapshot"]
        for d in self.domains:
            r5 = d.cmc[4] if len(d.cmc) > 4 else d.cmc[-1]
            rows.append(f"{d.name:<16} {100 * d.mAP:7.2f} {100 * d.rank1:7.2f} {100 * r5:7.2f} "
                        f"{d.n_valid:8d} {d.n_skipped:8d}  {','.join(d.snapshots)}")
        rows.append(f"{'average seen':<16} {100 * self.mean_map:7.2f} {100 * self.mean_rank1:7.2f}")
        return "\n".join(rows)


CURVE_COLUMNS = ["step", "domain_count", "mean_mAP", "mean_rank1"]


def write_curve(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for r in rows:
            w.writerow([r[0], r[1], f"{r[2]:.6f}", f"{r[3]:.6f}"])


def read_curve(path) -> list[tuple]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), int(r["domain_count"]), float(r["mean_mAP"]), float(r["mean_rank1"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------- heat maps

@torch.no_grad()
def attention_map(graph: BackboneGraph, snapshot, image) -> np.ndarray:
    """Channel-wise L2 norm of the last conv stage, upsampled to the image and scaled to [0, 1]."""
    net = graph.net
    if snapshot is not None:
        net.load_domain_state(snapshot.bn_states, snapshot.sa_kernels)
    was = net.training
    net.eval()
    img = np.asarray(image)
    x = to_tensor(img)
    fmap = net.feature_maps(x)
    net.train(was)
    heat = fmap.pow(2).sum(1, keepdim=True).sqrt()
    heat = F.interpolate(heat, size=img.shape[-3:-1], mode="bilinear", align_corners=False)[0, 0].numpy()
    lo, hi = heat.min(), heat.max()
    if hi - lo <= 1e-12:
        return np.zeros_like(heat, dtype=np.float64)
    return ((heat - lo) / (hi - lo)).astype(np.float64)


def save_heatmap(heat: np.ndarray, path) -> None:
    from PIL import Image

    Image.fromarray(np.clip(np.round(heat * 255), 0, 255).astype(np.uint8), mode="L").save(path)
