import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localfsl import transfer
from localfsl.autodiff import frobenius_normalize
from localfsl.errors import InvalidConfig, ShapeMismatch
from localfsl.transfer import TransferConfig


def test_beta_is_validated():
    for bad in (-0.1, 1.1, float("nan")):
        with pytest.raises(InvalidConfig):
            TransferConfig(beta=bad)


def test_one_hot_outputs_give_classifier_columns():
    rng = np.random.default_rng(0)
    # orthogonal columns: a location along column l scores only class l
    W = np.linalg.qr(rng.normal(size=(4, 4)))[0][:, :3] * rng.uniform(0.5, 2.0, 3)
    fmap = np.zeros((4, 1, 3))
    for l in range(3):
        fmap[:, 0, l] = 1e4 * W[:, l] / np.linalg.norm(W[:, l]) ** 2
    logits = np.einsum("kl,kij->lij", W, fmap)
    assert np.all(logits.argmax(axis=0) == np.arange(3))
    similar = transfer.base_similar_map(fmap, W)
    for l in range(3):
        np.testing.assert_allclose(similar[:, 0, l], W[:, l], rtol=0, atol=1e-12)


def test_uniform_outputs_give_mean_column():
    W = np.random.default_rng(1).normal(size=(5, 4))
    similar = transfer.base_similar_map(np.zeros((5, 2, 2)), W)
    for i in range(2):
        for j in range(2):
            np.testing.assert_allclose(similar[:, i, j], W.mean(axis=1), rtol=0, atol=1e-12)


def test_base_similar_map_naive_oracle():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(3, 4))
    fmap = rng.normal(size=(3, 2, 2))
    got = transfer.base_similar_map(fmap, W)
    for i in range(2):
        for j in range(2):
            z = [sum(W[k, l] * fmap[k, i, j] for k in range(3)) for l in range(4)]
            e = np.exp(np.array(z) - max(z))
            p = e / e.sum()
            want = sum(p[l] * W[:, l] for l in range(4))
            np.testing.assert_allclose(got[:, i, j], want, rtol=0, atol=1e-12)


def test_batch_matches_single():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(3, 4))
    maps = rng.normal(size=(2, 3, 2, 2))
    batch = transfer.refine_map(maps, W, TransferConfig(0.7))
    for n in range(2):
        np.testing.assert_allclose(batch[n], transfer.refine_map(maps[n], W, TransferConfig(0.7)), atol=1e-15)


def test_beta_extremes_and_midpoint():
    rng = np.random.default_rng(4)
    W = rng.normal(size=(3, 5))
    x = rng.normal(size=(3, 2, 2))
    own = frobenius_normalize(x[None]).data[0]
    other = frobenius_normalize(transfer.base_similar_map(x, W)[None]).data[0]
    assert np.array_equal(transfer.refine_map(x, W, TransferConfig(1.0)), own)
    assert np.array_equal(transfer.refine_map(x, W, TransferConfig(0.0)), other)
    np.testing.assert_allclose(transfer.refine_map(x, W, TransferConfig(0.5)), (own + other) / 2, atol=1e-15)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        transfer.base_similar_map(np.ones((4, 2, 2)), np.ones((3, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_similar_features_lie_in_convex_hull_of_columns(seed):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(6, 3))
    fmap = rng.normal(size=(6, 2, 2))
    similar = transfer.base_similar_map(fmap, W)
    # weights recovered by least squares against [W; 1] are a distribution
    A = np.vstack([W, np.ones((1, 3))])
    for i in range(2):
        for j in range(2):
            coef, *_ = np.linalg.lstsq(A, np.append(similar[:, i, j], 1.0), rcond=None)
            assert coef.min() >= -1e-9 and abs(coef.sum() - 1.0) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.floats(0, 1))
def test_refinement_is_affine_in_beta(seed, b1, b2):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(4, 3))
    x = rng.normal(size=(4, 2, 2))
    r1 = transfer.refine_map(x, W, TransferConfig(b1))
    r2 = transfer.refine_map(x, W, TransferConfig(b2))
    mid = transfer.refine_map(x, W, TransferConfig((b1 + b2) / 2))
    np.testing.assert_allclose(mid, (r1 + r2) / 2, atol=1e-12)
