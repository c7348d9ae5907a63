import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from localfsl import autodiff as ad
from localfsl import losses
from localfsl.errors import DegenerateMap, EmptyClass, InvalidConfig, LabelOutOfRange, ShapeMismatch
from localfsl.losses import LossWeights
from localfsl.metric import MetricConfig

from helpers import central_difference, loop_local_distance, loop_matching_distance, max_relative_error


def naive_local_ce(maps, labels, W):
    total = 0.0
    n, d, w, h = maps.shape
    for s in range(n):
        for i in range(w):
            for j in range(h):
                z = [sum(W[k, l] * maps[s, k, i, j] for k in range(d)) for l in range(W.shape[1])]
                m = max(z)
                lse = m + math.log(sum(math.exp(v - m) for v in z))
                total += lse - z[labels[s]]
    return total


def naive_similarity(maps, labels, gamma, scale):
    """Prototypes of Frobenius-normalised maps, loop distances, summed CE."""
    units = [m / math.sqrt(sum(float(v) ** 2 for v in m.ravel())) for m in maps]
    protos = []
    for c in range(max(labels) + 1):
        members = [u for u, y in zip(units, labels) if y == c]
        protos.append(sum(members) / len(members))
    total = 0.0
    for u, y in zip(units, labels):
        z = [-scale * (loop_local_distance(u, p) + gamma * loop_matching_distance(u, p)) for p in protos]
        m = max(z)
        total += m + math.log(sum(math.exp(v - m) for v in z)) - z[y]
    return total


def naive_norm_variance(maps):
    total = 0.0
    for m in maps:
        norms = [math.sqrt(sum(float(v) ** 2 for v in m[:, i, j])) for i in range(m.shape[1]) for j in range(m.shape[2])]
        mu = sum(norms) / len(norms)
        total += sum((r - mu) ** 2 for r in norms) / len(norms)
    return total


def test_weights_validation():
    with pytest.raises(InvalidConfig):
        LossWeights(lambda_s=-1)
    with pytest.raises(InvalidConfig):
        LossWeights(lambda_r=math.nan)


# -- closed forms ---------------------------------------------------------------------


def test_uniform_classifier_loss():
    maps = np.random.default_rng(0).normal(size=(2, 4, 2, 1))
    got = float(losses.local_classification_loss(maps, [0, 3], np.zeros((4, 5))).data)
    assert abs(got - 2 * 2 * math.log(5)) <= 1e-10


def test_confident_classifier_loss_vanishes():
    maps = np.zeros((1, 2, 1, 1))
    maps[0, 0] = 1.0
    W = np.array([[100.0, -100.0], [0.0, 0.0]])
    assert float(losses.local_classification_loss(maps, [0], W).data) <= 1e-80


def test_local_classification_matches_loop():
    rng = np.random.default_rng(1)
    maps, W = rng.normal(size=(3, 4, 2, 2)), rng.normal(size=(4, 6))
    labels = [5, 0, 2]
    got = float(losses.local_classification_loss(maps, labels, W).data)
    assert abs(got - naive_local_ce(maps, labels, W)) <= 1e-10


def test_regularizer_examples():
    maps = np.zeros((1, 1, 1, 2))
    maps[0, 0, 0] = [1.0, 3.0]
    assert float(losses.local_regularization_loss(maps).data) == 1.0
    equal = np.ones((2, 3, 2, 2))
    assert abs(float(losses.local_regularization_loss(equal).data)) <= 1e-12
    rng = np.random.default_rng(2)
    x = rng.normal(size=(3, 4, 2, 3))
    got = float(losses.local_regularization_loss(x).data)
    assert abs(got - naive_norm_variance(x)) <= 1e-10
    assert float(losses.local_regularization_loss(2.5 * x).data) == pytest.approx(6.25 * got, rel=1e-12)


def test_regularizer_needs_two_locations():
    with pytest.raises(DegenerateMap):
        losses.local_regularization_loss(np.ones((2, 3, 1, 1)))


def test_identical_maps_give_log_two():
    x = np.random.default_rng(3).normal(size=(4, 2, 2))
    maps = np.stack([x] * 6)
    got = float(losses.similarity_loss(maps, [0, 1, 0, 1, 0, 1], MetricConfig(gamma=0.6)).data)
    assert abs(got - 6 * math.log(2)) <= 1e-10


@pytest.mark.parametrize("gamma", [0.0, 0.6])
def test_similarity_loss_matches_loop(gamma):
    rng = np.random.default_rng(4)
    maps = rng.normal(size=(6, 3, 2, 2))
    labels = [0, 1, 2, 0, 1, 2]
    got = float(losses.similarity_loss(maps, labels, MetricConfig(gamma=gamma, softmax_scale=3.0)).data)
    assert abs(got - naive_similarity(maps, labels, gamma, 3.0)) <= 1e-10


def test_similarity_loss_relabel_invariant():
    rng = np.random.default_rng(5)
    maps = rng.normal(size=(6, 3, 2, 2))
    labels = np.array([0, 1, 2, 0, 1, 2])
    perm = np.array([2, 0, 1])
    cfg = MetricConfig(gamma=0.4)
    a = float(losses.similarity_loss(maps, labels, cfg).data)
    b = float(losses.similarity_loss(maps, perm[labels], cfg).data)
    assert a == pytest.approx(b, abs=1e-12)


def test_leave_one_out_prototypes():
    rng = np.random.default_rng(6)
    maps = rng.normal(size=(6, 3, 2, 2))
    labels = [0, 0, 0, 1, 1, 1]
    cfg = MetricConfig(gamma=0.0, softmax_scale=2.0)
    got = float(losses.similarity_loss(maps, labels, cfg, leave_one_out=True).data)
    units = [m / np.linalg.norm(m) for m in maps]
    total = 0.0
    for s, (u, y) in enumerate(zip(units, labels)):
        z = []
        for c in (0, 1):
            members = [v for t, (v, l) in enumerate(zip(units, labels)) if l == c and not (c == y and t == s)]
            z.append(-2.0 * loop_local_distance(u, sum(members) / len(members)))
        total += math.log(sum(math.exp(v) for v in z)) - z[y]
    assert abs(got - total) <= 1e-10
    with pytest.raises(EmptyClass):
        losses.similarity_loss(maps[:3], [0, 1, 1], cfg, leave_one_out=True)


def test_pooled_similarity_mode():
    rng = np.random.default_rng(7)
    maps = rng.normal(size=(4, 3, 2, 2))
    labels = [0, 1, 0, 1]
    got = float(losses.similarity_loss(maps, labels, MetricConfig(), mode="pooled").data)
    v = maps.mean(axis=(2, 3))
    protos = [v[[0, 2]].mean(axis=0), v[[1, 3]].mean(axis=0)]
    want = 0.0
    for x, y in zip(v, labels):
        z = [-((x - p) ** 2).sum() for p in protos]
        want += math.log(sum(math.exp(t) for t in z)) - z[y]
    assert abs(got - want) <= 1e-10


def test_label_errors():
    maps = np.ones((2, 3, 2, 2))
    with pytest.raises(LabelOutOfRange):
        losses.local_classification_loss(maps, [0, 4], np.zeros((3, 4)))
    with pytest.raises(ShapeMismatch):
        losses.local_classification_loss(maps, [0, 1], np.zeros((2, 4)))
    with pytest.raises(EmptyClass):
        losses.similarity_loss(maps, [0, 0], MetricConfig())
    with pytest.raises(EmptyClass):
        losses.similarity_loss(maps, [0, 2], MetricConfig())


# -- combined objective ---------------------------------------------------------------


@pytest.mark.parametrize("lat", ["off", "cls", "cls+reg"])
def test_objective_recombines_parts(lat):
    rng = np.random.default_rng(8)
    maps, W = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=(3, 5))
    weights = LossWeights()
    J, parts = losses.total_objective(maps, [0, 1, 0, 1], [4, 2, 4, 2], W, MetricConfig(), weights, lat=lat)
    want = parts["lc"] + weights.lambda_s * parts["ls"] + weights.lambda_r * parts["lr_loss"]
    assert abs(float(J.data) - want) <= 1e-12
    assert (parts["lr_loss"] > 0) == (lat == "cls+reg")


def test_zero_weights_reduce_to_classification():
    rng = np.random.default_rng(9)
    maps, W = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=(3, 5))
    J, parts = losses.total_objective(maps, [0, 1, 0, 1], [0, 1, 2, 3], W, MetricConfig(), LossWeights(0, 0))
    assert float(J.data) == float(losses.local_classification_loss(maps, [0, 1, 2, 3], W).data)
    assert parts["ls"] == 0.0 and parts["lr_loss"] == 0.0


def _grad_check(fn, maps, W):
    tape = ad.Tape()
    m, w = tape.watch(maps, "maps"), tape.watch(W, "W")
    grads = ad.backward(tape, fn(m, w))
    for name, x, other in (("maps", maps, W), ("W", W, maps)):
        if name == "maps":
            num = central_difference(lambda v: float(fn(v, W).data), x)
        else:
            num = central_difference(lambda v: float(fn(maps, v).data), x)
        assert max_relative_error(grads[name], num) <= 1e-4, name


@pytest.mark.parametrize("seed", range(3))
def test_objective_gradients(seed):
    rng = np.random.default_rng(seed)
    maps, W = rng.normal(size=(4, 3, 2, 2)), rng.normal(size=(3, 5))
    cfg = MetricConfig(gamma=0.6)
    _grad_check(lambda m, w: losses.total_objective(m, [0, 1, 0, 1], [1, 3, 1, 3], w, cfg, LossWeights(1.0, 1.0))[0], maps, W)


def test_gradient_descent_reduces_classification_loss():
    rng = np.random.default_rng(10)
    maps = rng.normal(size=(6, 4, 2, 2))
    labels = [0, 1, 2, 0, 1, 2]
    W = np.zeros((4, 3))
    values = []
    for _ in range(50):
        tape = ad.Tape()
        w = tape.watch(W, "W")
        loss = losses.local_classification_loss(maps, labels, w)
        values.append(float(loss.data))
        W = W - 0.05 * ad.backward(tape, loss)["W"]
    assert all(b < a for a, b in zip(values, values[1:]))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10))
def test_similarity_loss_scale_invariant_in_maps(seed, a):
    rng = np.random.default_rng(seed)
    maps = rng.normal(size=(4, 3, 2, 2))
    cfg = MetricConfig(gamma=0.6)
    base = float(losses.similarity_loss(maps, [0, 1, 0, 1], cfg).data)
    assert float(losses.similarity_loss(a * maps, [0, 1, 0, 1], cfg).data) == pytest.approx(base, abs=1e-10)
