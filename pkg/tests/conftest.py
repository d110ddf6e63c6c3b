"""Shared fixtures: a small model configuration and example builders."""

import numpy as np
import pytest

from sannli.model import ModelConfig, PairInput, SanParameters
from sannli.rng import RngStream

WORD_VOCAB = 12
CHAR_VOCAB = 9


def small_config(**overrides) -> ModelConfig:
    base = dict(hidden=4, word_dim=6, char_dim=3, char_windows=(1, 2),
                char_channels=(2, 3), lex_hidden=7, lex_dim=6, attn_dim=5,
                steps=3, classes=3, dropout_rate=0.2, step_dropout=0.2,
                weight_norm=True)
    base.update(overrides)
    return ModelConfig(**base)


def random_pair(rng: RngStream, p_len: int = 4, h_len: int = 3) -> PairInput:
    def ids(n):
        return [int(k) for k in rng.integers(WORD_VOCAB, size=n)]

    def chars(n):
        out = []
        for _ in range(n):
            clen = 1 + int(rng.integers(4))
            out.append([1 + int(k) for k in rng.integers(CHAR_VOCAB - 1, size=clen)])
        return out

    return PairInput(premise_ids=ids(p_len), premise_chars=chars(p_len),
                     hyp_ids=ids(h_len), hyp_chars=chars(h_len))


@pytest.fixture
def tiny_config():
    return small_config()


@pytest.fixture
def tiny_params(tiny_config):
    return SanParameters.create(tiny_config, WORD_VOCAB, CHAR_VOCAB, seed=7)


@pytest.fixture
def pair():
    return random_pair(RngStream(99))
