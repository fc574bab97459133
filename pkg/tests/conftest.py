import sys

import numpy as np
import pytest
import torch

from concretegan.autoencoder import ArchConfig
from concretegan.corpus import SequenceBatch, TokenSequence

torch.set_num_threads(1)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def tiny_arch():
    # width-8 models are plenty for finite-difference checks at float64
    return ArchConfig(vocab_size=7, emb_dim=5, hidden=8, noise_dim=4, mlp_layers=2)


def random_batch(rng: np.random.Generator, n: int, vocab: int, max_len: int) -> SequenceBatch:
    seqs = []
    for _ in range(n):
        length = int(rng.integers(1, max_len + 1))
        body = rng.integers(4, vocab, size=length - 1).tolist()
        seqs.append(TokenSequence(tuple(body) + (2,)))
    return SequenceBatch.from_sequences(seqs)


@pytest.fixture
def tiny_batch(tiny_arch):
    return random_batch(np.random.default_rng(3), 5, tiny_arch.vocab_size, 6)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(acceptance.RESULTS):
        verdict, line = acceptance.RESULTS[k]
        terminalreporter.write_line(f"criterion {k:2d}: {verdict}  {line}")
