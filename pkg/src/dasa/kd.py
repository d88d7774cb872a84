"""Exemplar replay with logit distillation, and plain sequential fine-tuning.

Both baselines train the whole network (convs included) and carry one
evolving model across domains, with class labels accumulated over domains.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import BackboneGraph, to_tensor
from .train import (ClassifierHead, TrainConfig, augment_batch, id_loss_from_logits, pk_sample_epoch,
                    run_epochs, _train_images)

log = logging.getLogger(__name__)


@dataclass
class ExemplarBuffer:
    ids_per_step: int = 250
    images_per_id: int = 2
    images: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    domains: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    def add(self, images, labels, domain: int) -> None:
        self.images.extend(list(images))
        self.labels.extend(int(l) for l in labels)
        self.domains.extend([domain] * len(labels))

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return np.stack(self.images), np.asarray(self.labels, np.int64)

    @property
    def nbytes(self) -> int:
        return int(sum(np.asarray(im).nbytes for im in self.images))

    def save(self, root) -> Path:
        from PIL import Image

        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "manifest.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "identity", "domain"])
            for i, (im, lab, dom) in enumerate(zip(self.images, self.labels, self.domains)):
                name = f"{i:06d}.png"
                Image.fromarray(np.asarray(im, np.uint8)).save(root / name)
                w.writerow([name, lab, dom])
        return root / "manifest.csv"

    @classmethod
    def load(cls, root, ids_per_step: int = 250, images_per_id: int = 2) -> "ExemplarBuffer":
        from PIL import Image

        root = Path(root)
        buf = cls(ids_per_step, images_per_id)
        with open(root / "manifest.csv", newline="") as fh:
            for r in csv.DictReader(fh):
                with Image.open(root / r["path"]) as im:
                    buf.add([np.asarray(im.convert("RGB"))], [int(r["identity"])], int(r["domain"]))
        return buf


def select_exemplars(labels, ids_per_step: int = 250, images_per_id: int = 2, seed: int = 0) -> np.ndarray:
    """Indices of a random identity subset with ``images_per_id`` random images each."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    ids = np.unique(labels)
    keep = rng.choice(ids, min(ids_per_step, len(ids)), replace=False)
    picked = []
    for pid in np.sort(keep):
        idx = np.flatnonzero(labels == pid)
        picked.append(rng.choice(idx, min(images_per_id, len(idx)), replace=False))
    return np.concatenate(picked) if picked else np.zeros(0, np.int64)


@torch.no_grad()
def class_centers(net, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> torch.Tensor:
    """L2-normalized mean eval-mode feature per label, rows in sorted label order."""
    was = net.training
    net.eval()
    feats = torch.cat([net(to_tensor(images[i:i + batch_size])) for i in range(0, len(images), batch_size)])
    net.train(was)
    rows = []
    for pid in np.unique(labels):
        mask = torch.from_numpy(labels == pid)
        if not mask.any():
            raise ValueError(f"class {pid} has no images")
        rows.append(F.normalize(feats[mask].mean(0), dim=0))
    return torch.stack(rows)


def expand_classifier(old_weight: torch.Tensor | None, net, images, labels) -> torch.Tensor:
    """Old rows copied, one class-center row appended per new label."""
    labels = np.asarray(labels)
    if len(np.unique(labels)) == 0:
        raise ValueError("no new classes to add")
    new_rows = class_centers(net, np.asarray(images), labels)
    if old_weight is None:
        return new_rows
    return torch.cat([old_weight.detach().clone(), new_rows.to(old_weight.dtype)])


def kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor) -> torch.Tensor:
    """Batch-mean cross-entropy from the teacher's softmax to the student's."""
    if teacher_logits.shape != student_logits.shape:
        raise ValueError(f"teacher {tuple(teacher_logits.shape)} and student "
                         f"{tuple(student_logits.shape)} logits differ in shape")
    p = F.softmax(teacher_logits, dim=1)
    return -(p * F.log_softmax(student_logits, dim=1)).sum(1).mean()


@dataclass
class FrozenTeacher:
    net: torch.nn.Module
    head_weight: torch.Tensor

    @classmethod
    def from_model(cls, net, head_weight: torch.Tensor) -> "FrozenTeacher":
        t = copy.deepcopy(net)
        t.eval()
        for p in t.parameters():
            p.requires_grad_(False)
        return cls(t, head_weight.detach().clone())

    @torch.no_grad()
    def logits(self, x: torch.Tensor, weight: torch.Tensor | None = None) -> torch.Tensor:
        w = self.head_weight if weight is None else weight
        return self.net(x) @ w.t()


@dataclass
class BaselineState:
    """What the KD baseline carries between domains."""

    head_weight: torch.Tensor | None = None
    n_classes: int = 0
    buffer: ExemplarBuffer = field(default_factory=ExemplarBuffer)
    teacher: FrozenTeacher | None = None


def train_domain_full(graph: BackboneGraph, dataset, config: TrainConfig, state: BaselineState | None = None,
                      ordinal: int = 0, lambda_kd: float = 1.0, replay: bool = True, distill: bool = True,
                      variant: str = "expand", kd_on_new: bool = False, history: list | None = None,
                      log_file=None) -> BaselineState:
    """One step of the full-network baselines.

    ``replay=distill=False`` is sequential fine-tuning with a fresh classifier
    per domain. Otherwise labels accumulate across domains, the classifier is
    expanded with new class centers, exemplar batches are mixed into every
    new-data batch and distilled from the frozen previous model.
    """
    if variant not in ("expand", "old_only"):
        raise ValueError(f"unknown distillation variant {variant!r}")
    state = state or BaselineState()
    net = graph.net
    net.set_conv_trainable(True)
    images, local = _train_images(dataset, config)
    cumulative = replay or distill
    offset = state.n_classes if cumulative else 0
    labels = local + offset
    n_old = state.n_classes

    if cumulative:
        weight = expand_classifier(state.head_weight, net, images, local)
    else:
        weight = ClassifierHead(int(local.max()), graph.feature_dim, seed=config.seed + ordinal).weight.data
    head = ClassifierHead(weight.shape[0], graph.feature_dim)
    with torch.no_grad():
        head.weight.copy_(weight)

    teacher = state.teacher if distill and n_old > 0 else None
    teacher_weight = None
    if teacher is not None:
        teacher_weight = weight.clone() if variant == "expand" else teacher.head_weight
    use_replay = replay and len(state.buffer) > 0
    if use_replay:
        ex_images, ex_labels = state.buffer.arrays()
        ex_config = config.replace(batch_size=max(config.instances_per_id,
                                                  (config.batch_size // 2) // config.instances_per_id
                                                  * config.instances_per_id))
    seeds = [config.seed, ordinal]

    def batches(epoch):
        rng = np.random.default_rng(seeds + [epoch])
        new = pk_sample_epoch(labels, config, rng=rng)
        ex = []
        if use_replay:
            while len(ex) < len(new):
                more = pk_sample_epoch(ex_labels, ex_config, rng=rng)
                if not more:
                    break
                ex.extend(more)
        for i, idx in enumerate(new):
            x = augment_batch(images[idx], config, rng)
            y = labels[idx]
            n_ex = 0
            if ex:
                e = ex[i % len(ex)]
                x = np.concatenate([x, augment_batch(ex_images[e], config, rng)])
                y = np.concatenate([y, ex_labels[e]])
                n_ex = len(e)
            yield to_tensor(x), torch.from_numpy(y), n_ex

    def step(batch):
        x, y, n_ex = batch
        logits = head(net(x))
        loss = id_loss_from_logits(logits, y, config.label_smoothing)
        if teacher is not None and lambda_kd > 0:
            sel = slice(len(y) - n_ex, len(y)) if not kd_on_new else slice(0, len(y))
            if sel.stop > sel.start:
                t_logits = teacher.logits(x[sel], teacher_weight)
                s_logits = logits[sel][:, :t_logits.shape[1]]
                loss = loss + lambda_kd * kd_loss(t_logits, s_logits)
        return loss, int((logits.argmax(1) + 1 == y).sum()), len(y)

    net.train()
    try:
        run_epochs(list(net.parameters()) + list(head.parameters()), config, ordinal == 0,
                   batches, step, history, log_file)
    finally:
        net.eval()

    new_state = BaselineState(head.weight.detach().clone(), offset + int(local.max()), state.buffer)
    if replay:
        idx = select_exemplars(local, state.buffer.ids_per_step, state.buffer.images_per_id,
                               seed=config.seed + 7919 * (ordinal + 1))
        state.buffer.add(images[idx], labels[idx], ordinal)
    if distill:
        new_state.teacher = FrozenTeacher.from_model(net, new_state.head_weight)
    return new_state
