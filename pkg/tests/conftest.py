import numpy as np
import pytest

from promptrevert import e2t
from promptrevert.backend import ToyBackendSpec, make_toy_backend
from promptrevert.fixtures import FIXTURE_COUNT, fixture_captioner, make_fixture_suite


@pytest.fixture(scope="session")
def toy_backend():
    return make_toy_backend(ToyBackendSpec())


@pytest.fixture(scope="session")
def fixture_suite(toy_backend):
    return make_fixture_suite(toy_backend, count=FIXTURE_COUNT)


@pytest.fixture(scope="session")
def suite_captioner(toy_backend, fixture_suite):
    return fixture_captioner(toy_backend, fixture_suite)


@pytest.fixture(scope="session")
def corpus_split(toy_backend):
    train, held = e2t.sample_template_prompts(toy_backend.tokenizer, 500, 50, seed=2024)
    return train, held


@pytest.fixture(scope="session")
def trained_bundle(toy_backend, corpus_split):
    train, _ = corpus_split
    corpus = e2t.embed_prompts(toy_backend, train)
    cfg = e2t.TrainConfig()
    zero = e2t.train_zero_step(corpus, cfg, toy_backend.embedding_matrix, max_len=32)
    corrector = e2t.train_corrector(corpus, zero, toy_backend, cfg)
    return e2t.E2TBundle(zero, corrector, toy_backend)


def fd_gradient(backend, c, noise, target, kind, step=1e-4):
    """Central finite differences of the reconstruction loss, elementwise."""
    from promptrevert.core import LatentTextEmbedding

    base = c.values.copy()
    grad = np.zeros_like(base)
    for i in range(base.shape[0]):
        for j in range(base.shape[1]):
            plus = base.copy()
            plus[i, j] += step
            minus = base.copy()
            minus[i, j] -= step
            grad[i, j] = (
                backend.reconstruction_loss(LatentTextEmbedding(plus), noise, target, kind)
                - backend.reconstruction_loss(LatentTextEmbedding(minus), noise, target, kind)
            ) / (2 * step)
    return grad
