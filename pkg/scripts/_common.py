"""Shared setup for the desk-scale experiment scripts."""

import logging
from pathlib import Path

from dasa.backbone import load_weights, save_weights
from dasa.datasets import synth_generate, synth_source
from dasa.experiment import DESK_SEQUENCE, DESK_SOURCE, desk_config, pretrain_backbone


def setup_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(asctime)s %(message)s")


def pretrained_weights(cache: Path) -> dict:
    """Pre-train the tiny backbone on the synthetic source set once and cache it."""
    if cache.exists():
        return load_weights(cache)
    weights = pretrain_backbone(synth_source(**DESK_SOURCE), desk_config())
    cache.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights, cache)
    return weights


def desk_sequence(ids_per_domain: int | None = None):
    kw = dict(DESK_SEQUENCE)
    if ids_per_domain:
        kw["ids_per_domain"] = ids_per_domain
    return synth_generate(**kw)
