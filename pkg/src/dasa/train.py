"""Per-domain training: PK sampling, augmentation, identity loss, schedule."""

from __future__ import annotations

import configparser
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import BackboneGraph, to_tensor

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    instances_per_id: int = 2
    epochs: int = 80
    base_lr: float = 3.5e-4
    warmup_start_lr: float = 3.5e-5
    warmup_epochs: int = 10
    decay_epoch_first: int = 30
    decay_epoch_rest: int = 10
    decay_factor: float = 0.1
    weight_decay: float = 5e-4
    input_size: tuple = (256, 128)
    flip: bool = True
    pad: int = 10
    crop: bool = True
    erasing: bool = True
    erasing_p: float = 0.5
    erasing_area: tuple = (0.02, 0.4)
    erasing_aspect: float = 0.3
    label_smoothing: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.erasing_area = tuple(float(v) for v in self.erasing_area)
        if self.batch_size % self.instances_per_id:
            raise ValueError(f"batch_size {self.batch_size} not divisible by K={self.instances_per_id}")
        if min(self.decay_epoch_first, self.decay_epoch_rest) < self.warmup_epochs:
            raise ValueError("decay epochs must not precede the end of warmup")

    @property
    def ids_per_batch(self) -> int:
        return self.batch_size // self.instances_per_id

    def decay_epoch(self, is_first_domain: bool) -> int:
        return self.decay_epoch_first if is_first_domain else self.decay_epoch_rest

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in fields:
                raise KeyError(f"unknown train option {k!r}")
            default = fields[k].default
            if isinstance(v, str):
                if isinstance(default, bool):
                    v = v.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, tuple):
                    v = tuple(float(x) if "." in x or "e" in x else int(x) for x in v.replace("x", ",").split(","))
                elif isinstance(default, int):
                    v = int(v)
                elif isinstance(default, float):
                    v = float(v)
            kw[k] = v
        return cls(**kw)

    @classmethod
    def from_file(cls, path, section: str = "train") -> "TrainConfig":
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        return cls.from_mapping(dict(cp[section]) if cp.has_section(section) else {})


class ClassifierHead(nn.Module):
    """Bias-free linear identity classifier over neck features."""

    def __init__(self, n_classes: int, dim: int, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.weight = nn.Parameter(torch.randn(n_classes, dim, generator=gen) * 0.001)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, feats):
        return feats @ self.weight.t()


# ---------------------------------------------------------------- sampling

_warned: set = set()


def pk_sample_epoch(labels, config: TrainConfig, epoch: int = 0, rng=None) -> list[np.ndarray]:
    """P identities x K instances per batch, every batch with distinct identities.

    Each identity's images are shuffled and cut into chunks of K (padded by
    resampling when it has fewer than K); batches draw one chunk from each of
    P identities that still have chunks left.
    """
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng([config.seed, epoch])
    k, p = config.instances_per_id, config.ids_per_batch
    ids = np.unique(labels)
    if len(ids) < p:
        if (len(ids), p) not in _warned:
            _warned.add((len(ids), p))
            log.warning("only %d identities for P=%d; using one batch of all identities",
                        len(ids), p)
        p = len(ids)
    chunks: dict[int, list] = {}
    for pid in ids:
        idx = rng.permutation(np.flatnonzero(labels == pid))
        if len(idx) < k:
            idx = np.concatenate([idx, rng.choice(idx, k - len(idx), replace=True)])
        n = len(idx) // k
        chunks[int(pid)] = [idx[i * k:(i + 1) * k] for i in range(n)]
    batches = []
    while True:
        avail = [pid for pid, c in chunks.items() if c]
        if len(avail) < p:
            break
        chosen = rng.choice(avail, p, replace=False)
        batches.append(np.concatenate([chunks[int(c)].pop() for c in chosen]))
    return batches


def augment(image: np.ndarray, config: TrainConfig, rng) -> np.ndarray:
    """Flip, pad-and-crop, random erasing; output keeps the input shape and dtype."""
    img = image
    h, w = img.shape[:2]
    if config.flip and rng.random() < 0.5:
        img = img[:, ::-1]
    if config.crop and config.pad > 0:
        p = config.pad
        padded = np.pad(img, ((p, p), (p, p), (0, 0)))
        y, x = rng.integers(0, 2 * p + 1, size=2)
        img = padded[y:y + h, x:x + w]
    if config.erasing and rng.random() < config.erasing_p:
        img = random_erase(img, config, rng)
    return np.ascontiguousarray(img)


ERASE_FILL = np.array([124, 116, 104], dtype=np.uint8)


def random_erase(img: np.ndarray, config: TrainConfig, rng, attempts: int = 100) -> np.ndarray:
    h, w = img.shape[:2]
    lo, hi = config.erasing_area
    r = config.erasing_aspect
    for _ in range(attempts):
        area = rng.uniform(lo, hi) * h * w
        aspect = math.exp(rng.uniform(math.log(r), math.log(1 / r)))
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if 0 < eh < h and 0 < ew < w and lo <= eh * ew / (h * w) <= hi:
            y = rng.integers(0, h - eh + 1)
            x = rng.integers(0, w - ew + 1)
            out = img.copy()
            out[y:y + eh, x:x + ew] = ERASE_FILL if img.dtype == np.uint8 else ERASE_FILL / 255.0
            return out
    return img


def augment_batch(images: np.ndarray, config: TrainConfig, rng) -> np.ndarray:
    return np.stack([augment(im, config, rng) for im in images])


# ---------------------------------------------------------------- loss / lr

def id_loss(features: torch.Tensor, head: ClassifierHead, labels, smoothing: float = 0.1) -> torch.Tensor:
    """Softmax cross-entropy with label smoothing; ``labels`` are 1-based."""
    return id_loss_from_logits(head(features), labels, smoothing)


def id_loss_from_logits(logits: torch.Tensor, labels, smoothing: float = 0.1) -> torch.Tensor:
    labels = torch.as_tensor(labels)
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 1 or labels.max() > n):
        raise ValueError(f"labels must lie in [1, {n}]")
    return F.cross_entropy(logits, labels.long() - 1, label_smoothing=smoothing)


def lr_at_epoch(epoch: int, config: TrainConfig, is_first_domain: bool = True) -> float:
    """Linear warmup anchored at epochs 0 and warmup_epochs, then one step decay."""
    if epoch <= config.warmup_epochs and config.warmup_epochs > 0:
        frac = epoch / config.warmup_epochs
        return config.warmup_start_lr + (config.base_lr - config.warmup_start_lr) * frac
    if epoch > config.decay_epoch(is_first_domain):
        return config.base_lr * config.decay_factor
    return config.base_lr


# ---------------------------------------------------------------- loop

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self))


def make_optimizer(params, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(params, lr=config.warmup_start_lr, weight_decay=config.weight_decay)


def run_epochs(params: list, config: TrainConfig, is_first_domain: bool,
               epoch_batches: Callable[[int], Iterable], step: Callable,
               history: list | None = None, log_file=None) -> list[EpochRecord]:
    """Shared optimisation loop.

    ``epoch_batches(epoch)`` yields batch descriptors; ``step(batch)`` returns
    (loss tensor, n_correct, n_total).
    """
    opt = make_optimizer(params, config)
    records = history if history is not None else []
    for epoch in range(config.epochs):
        lr = lr_at_epoch(epoch, config, is_first_domain)
        for g in opt.param_groups:
            g["lr"] = lr
        tot_loss, correct, total, n = 0.0, 0, 0, 0
        for batch in epoch_batches(epoch):
            loss, c, t = step(batch)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, lr {lr:g}, "
                                    f"after {n} batches")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            tot_loss += loss.item()
            correct += c
            total += t
            n += 1
        if n == 0:
            raise TrainingError("no batches produced; dataset too small for the sampler")
        rec = EpochRecord(epoch, lr, tot_loss / n, correct / max(total, 1))
        records.append(rec)
        if log_file is not None:
            log_file.write(rec.to_json() + "\n")
        log.debug("epoch %d lr %.2e loss %.4f acc %.3f", epoch, lr, rec.loss, rec.accuracy)
    return records


def _train_images(dataset, config: TrainConfig) -> tuple[np.ndarray, np.ndarray]:
    if len(dataset.train) == 0:
        raise TrainingError(f"{dataset.name}: empty training split")
    return dataset.train.load(config.input_size), dataset.train.pids


def train_domain(graph: BackboneGraph, dataset, config: TrainConfig, bank=None, ordinal: int | None = None,
                 is_first_domain: bool | None = None, history: list | None = None, log_file=None):
    """One DASA step: forward transfer, tune BN/SA/neck with a fresh head, capture.

    The captured snapshot is appended to ``bank`` when one is given.
    """
    from .bank import forward_transfer_init, snapshot_capture

    if bank is not None:
        forward_transfer_init(bank, graph, dataset.name)
        ordinal = len(bank) if ordinal is None else ordinal
        if is_first_domain is None:
            is_first_domain = len(bank) == 0
    ordinal = 0 if ordinal is None else ordinal
    is_first_domain = True if is_first_domain is None else is_first_domain
    net = graph.net
    net.set_conv_trainable(False)
    images, labels = _train_images(dataset, config)
    head = ClassifierHead(int(labels.max()), graph.feature_dim, seed=config.seed + ordinal)
    seeds = [config.seed, ordinal]

    def batches(epoch):
        rng = np.random.default_rng(seeds + [epoch])
        for idx in pk_sample_epoch(labels, config, rng=rng):
            yield to_tensor(augment_batch(images[idx], config, rng)), torch.from_numpy(labels[idx])

    def step(batch):
        x, y = batch
        logits = head(net(x))
        loss = id_loss_from_logits(logits, y, config.label_smoothing)
        return loss, int((logits.argmax(1) + 1 == y).sum()), len(y)

    net.train()
    try:
        run_epochs(net.tunable_parameters() + list(head.parameters()), config, is_first_domain,
                   batches, step, history, log_file)
    finally:
        net.eval()
    snap = snapshot_capture(graph, dataset.name, ordinal, dataset.camera_ids())
    if bank is not None:
        bank.add(snap)
    return snap
