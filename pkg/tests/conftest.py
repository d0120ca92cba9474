import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from igpo.model import ModelConfig, init_params
from igpo.tasks import TOKENIZER


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    """Smallest model that still exercises every layer type (~2.6k params)."""
    return ModelConfig(
        vocab_size=9, embed_dim=8, num_layers=1, num_heads=2, max_seq_len=12, mask_token_id=1
    )


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return init_params(tiny_cfg, seed=7)


@pytest.fixture(scope="session")
def task_cfg() -> ModelConfig:
    """Model sized for the real task vocabulary, small enough for fast tests."""
    return ModelConfig(
        vocab_size=TOKENIZER.vocab_size, embed_dim=16, num_layers=2, num_heads=2,
        max_seq_len=96,
    )


@pytest.fixture(scope="session")
def task_params(task_cfg):
    return init_params(task_cfg, seed=11)
