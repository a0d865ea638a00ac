import numpy as np
import pytest

from c2fmeta.data import CoarseDataset, FineDataset, SynthSpec, generate_hierarchical


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_coarse():
    return generate_hierarchical(SynthSpec(C=2, fine_per_coarse=3, samples_per_fine=10, D_in=5, seed=7))


def unit_rows(rng, m, d):
    F = rng.normal(size=(m, d))
    return F / np.linalg.norm(F, axis=1, keepdims=True)


def orthogonal_fine_embedding(fine_labels, dim=None):
    """Map every hidden fine class to its own standard basis vector."""
    fine_labels = np.asarray(fine_labels)
    dim = dim or int(fine_labels.max()) + 1
    return np.eye(dim)[fine_labels]


def make_fine(X, labels, split="test"):
    return FineDataset(np.asarray(X, float), np.asarray(labels), split=split)


def make_coarse(X, coarse, C=None, fine=None):
    coarse = np.asarray(coarse)
    return CoarseDataset(np.asarray(X, float), coarse, C or int(coarse.max()) + 1, _fine=fine)
