"""Lifelong person re-identification with a frozen backbone and per-domain BN + SA snapshots."""

from .backbone import BackboneGraph, build_and_partition, extract_features, insert_sa
from .bank import Bank, DomainSnapshot, deserialize, serialize, snapshot_capture, storage_report
from .bn import BnLayerState, bn_forward_eval, bn_forward_train
from .sa import SaKernel, sa_forward, sa_init_identity
from .train import TrainConfig, train_domain

__version__ = "0.1.0"

__all__ = [
    "BackboneGraph", "Bank", "BnLayerState", "DomainSnapshot", "SaKernel", "TrainConfig",
    "bn_forward_eval", "bn_forward_train", "build_and_partition", "deserialize", "extract_features",
    "insert_sa", "sa_forward", "sa_init_identity", "serialize", "snapshot_capture", "storage_report",
    "train_domain",
]
