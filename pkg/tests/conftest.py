import numpy as np
import pytest
import torch

from casediag.corpus import split_corpus
from casediag.encoders import EncoderConfig
from casediag.preprocess import CanonicalGeometry
from casediag.synthetic import SyntheticConfig, generate_synthetic

import acceptance_report


def pytest_terminal_summary(terminalreporter):
    if acceptance_report.LINES:
        terminalreporter.write_line("")
        terminalreporter.write_line("acceptance checks:")
        for line in acceptance_report.LINES:
            terminalreporter.write_line("  " + line)

# Small geometry keeps every encoder test under a second; the canonical
# 256x256x32 default is exercised only where a test is about the default.
TINY = CanonicalGeometry(height=32, width=32, depth=4)


def tiny_encoder_cfg(variant, **kw):
    base = dict(
        variant=variant,
        embed_dim=32,
        height=32,
        width=32,
        depth=4,
        base_channels=4,
        patch_size=8,
        cube_size=(8, 8, 2),
        transformer_layers=1,
        transformer_heads=2,
    )
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """60-case on-disk synthetic corpus shared by data-path tests."""
    out = tmp_path_factory.mktemp("corpus")
    cfg = SyntheticConfig(
        n_classes=5, n_cases=60, height=32, width=32, depth=4,
        n_families=3, out_dir=str(out),
    )
    corpus = generate_synthetic(cfg, seed=0)
    return corpus


@pytest.fixture(scope="session")
def small_splits(small_corpus):
    return split_corpus(small_corpus, seed=0)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
