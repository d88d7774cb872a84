import numpy as np
import pytest
import torch

from dasa.backbone import build_and_partition, insert_sa


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny():
    graph, _ = build_and_partition("tiny", seed=3)
    return insert_sa(graph, "all", 5)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def desk_pretrained():
    """Tiny backbone pre-trained on the synthetic source set (about a minute on one CPU)."""
    from dasa.datasets import synth_source
    from dasa.experiment import DESK_SOURCE, desk_config, pretrain_backbone

    return pretrain_backbone(synth_source(**DESK_SOURCE), desk_config())


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
