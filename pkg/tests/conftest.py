"""Shared fixtures: small deterministic models and corpora."""

import numpy as np
import pytest
import torch

from slotstream import ModelConfig, init_model
from slotstream.tokens import FIRST_CONTENT_ID

torch.set_num_threads(max(1, torch.get_num_threads()))


@pytest.fixture(scope="session")
def tiny_cfg() -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32,
                       vocab_size=24, seed=0)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return init_model(tiny_cfg)


@pytest.fixture(scope="session")
def alibi_cfg() -> ModelConfig:
    return ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32,
                       vocab_size=24, pos_scheme="alibi", seed=0)


@pytest.fixture(scope="session")
def alibi_model(alibi_cfg):
    return init_model(alibi_cfg)


def random_source(rng: np.random.Generator, vocab: int, n: int) -> list[int]:
    return [int(t) for t in rng.integers(FIRST_CONTENT_ID, vocab, size=n)]
