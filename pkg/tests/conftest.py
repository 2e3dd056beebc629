import numpy as np
import pytest

from melcompress import corpus as cc
from melcompress import encoder as enc


def tiny_config(**kw):
    base = dict(n_layers=2, d_model=16, n_heads=2, ffn_dim=32, input_dim=8, n_clusters=8, dropout=0.1,
                masking=enc.MaskingSpec(0.3, 3))
    base.update(kw)
    return enc.EncoderConfig(**base)


def labelled_corpus(n=40, dim=8, K=8, seed=0, noise=0.3, length_range=(12, 24)):
    utts = cc.generate(cc.GeneratorSpec(n_states=5, n_seq_classes=3, dim=dim, noise=noise,
                                        length_range=length_range, seed=seed), n)
    book = cc.kmeans_fit(np.concatenate([u.features for u in utts]), K, iters=10, seed=seed)
    return cc.label_corpus(book, utts)


@pytest.fixture
def tiny_weights():
    return enc.init_weights(tiny_config(), seed=1)


@pytest.fixture(scope="session")
def tiny_corpus():
    return labelled_corpus()


# filled by tests/test_acceptance.py, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
