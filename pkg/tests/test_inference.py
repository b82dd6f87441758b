import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossbar import inference
from crossbar.inference import VoteConfig
from crossbar.sampling import Orientation
from conftest import disk

DEFAULT_WEIGHTS = (1, 1, 1.5, 1, 1, 1.5)


class MapModel:
    """Stub whose label at a center is read off a fixed 0/1 map."""

    def __init__(self, label_map, orientation=Orientation.vertical):
        self.label_map = np.asarray(label_map, dtype=np.int64)
        self.orientation = orientation
        self.calls = []

    def predict_labels(self, image, centers):
        centers = np.asarray(centers)
        self.calls.append(len(centers))
        return self.label_map[centers[:, 0], centers[:, 1]]


class Ensemble:
    def __init__(self, models, weights):
        self.models, self.weights = models, weights


def oracle_vote(labels, weights):
    t = sum(w for l, w in zip(labels, weights) if l == 1)
    b = sum(w for l, w in zip(labels, weights) if l != 1)
    return int(t > b)


def test_vote_examples():
    assert inference.weighted_vote([1, 0, 1, 0, 0, 1], DEFAULT_WEIGHTS) == 1
    assert inference.weighted_vote([1] * 6, DEFAULT_WEIGHTS) == 1
    assert inference.weighted_vote([0] * 6, DEFAULT_WEIGHTS) == 0
    assert inference.weighted_vote([1, 1, 1, 0, 0, 0], [1] * 6) == 0
    with pytest.raises(ValueError):
        inference.weighted_vote([1, 0], [1, 1, 1])


def test_vote_exhaustive():
    for labels in itertools.product((0, 1), repeat=6):
        assert inference.weighted_vote(labels, DEFAULT_WEIGHTS) == oracle_vote(labels, DEFAULT_WEIGHTS)


@given(w=st.lists(st.floats(0.01, 10), min_size=6, max_size=6), c=st.floats(0.01, 100))
def test_vote_scale_invariance(w, c):
    for labels in itertools.product((0, 1), repeat=6):
        a = inference.weighted_vote(labels, w)
        b = inference.weighted_vote(labels, [c * x for x in w])
        # rounding can only matter at an exact tie
        if abs(sum(x for l, x in zip(labels, w) if l) * 2 - sum(w)) > 1e-9 * sum(w):
            assert a == b


@given(labels=st.lists(st.integers(0, 1), min_size=1, max_size=6), data=st.data())
def test_vote_duplicate_split(labels, data):
    w = data.draw(st.lists(st.sampled_from([0.5, 1.0, 1.5, 2.0]), min_size=len(labels), max_size=len(labels)))
    k = data.draw(st.integers(0, len(labels) - 1))
    labels2 = labels + [labels[k]]
    w2 = list(w) + [w[k] / 2]
    w2[k] = w[k] / 2
    assert inference.weighted_vote(labels, w) == inference.weighted_vote(labels2, w2)


def test_vote_config_validation():
    with pytest.raises(ValueError):
        VoteConfig(stride=0)
    with pytest.raises(ValueError):
        VoteConfig(weights=[1, 0])


def test_segment_single_oracle_and_background():
    truth = disk((24, 30), (12, 14), 6)
    np.testing.assert_array_equal(inference.segment_single(MapModel(truth), np.zeros(truth.shape)), truth)
    assert not inference.segment_single(MapModel(np.zeros_like(truth)), np.zeros(truth.shape)).any()


def test_segment_single_stride_and_roi():
    r = np.random.default_rng(0)
    labels = r.random((21, 17)) < 0.5
    img = np.zeros(labels.shape)
    full = inference.segment_single(MapModel(labels), img)
    m2 = MapModel(labels)
    s2 = inference.segment_single(m2, img, VoteConfig(stride=2))
    assert s2.shape == labels.shape and m2.calls == [11 * 9]
    np.testing.assert_array_equal(s2[::2, ::2], full[::2, ::2])
    # off-grid pixels copy the nearest grid pixel (halfway rounds up)
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            gi = min(2 * ((i + 1) // 2), 20)
            gj = min(2 * ((j + 1) // 2), 16)
            assert s2[i, j] == full[gi, gj]
    roi = inference.segment_single(MapModel(labels), img, VoteConfig(roi=(3, 10, 4, 12)))
    np.testing.assert_array_equal(roi[3:10, 4:12], labels[3:10, 4:12])
    assert roi.sum() == labels[3:10, 4:12].sum()


def test_segment_ensemble_single_and_pair():
    r = np.random.default_rng(1)
    a = r.random((15, 15)) < 0.5
    img = np.zeros(a.shape)
    res = inference.segment_ensemble(Ensemble([MapModel(a)], [1.0]), img)
    np.testing.assert_array_equal(res.mask, inference.segment_single(MapModel(a), img))
    res = inference.segment_ensemble(Ensemble([MapModel(a), MapModel(~a)], [1.0, 1.5]), img)
    np.testing.assert_array_equal(res.mask, ~a)


def test_segment_ensemble_six_stubs_match_enumeration():
    r = np.random.default_rng(2)
    maps = r.random((6, 12, 10)) < 0.5
    models = [MapModel(m, o) for m, o in zip(maps, [Orientation.vertical] * 3 + [Orientation.horizontal] * 3)]
    res = inference.segment_ensemble(Ensemble(models, DEFAULT_WEIGHTS), np.zeros((12, 10)))
    for i in range(12):
        for j in range(10):
            assert res.mask[i, j] == oracle_vote(maps[:, i, j], DEFAULT_WEIGHTS)
    assert np.all(res.score >= 0) and np.all(res.score <= sum(DEFAULT_WEIGHTS))
    np.testing.assert_allclose(res.score, np.tensordot(DEFAULT_WEIGHTS, maps.astype(float), axes=1))
    # explicit weights override the ensemble's
    eq = inference.segment_ensemble(Ensemble(models, DEFAULT_WEIGHTS), np.zeros((12, 10)), VoteConfig(weights=[1] * 6))
    np.testing.assert_array_equal(eq.mask, maps.sum(axis=0) > 3)


def test_segment_ensemble_errors():
    with pytest.raises(ValueError):
        inference.segment_ensemble(Ensemble([], []), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        inference.segment_ensemble(Ensemble([MapModel(np.zeros((3, 3)))], [1, 1]), np.zeros((3, 3)))


def test_largest_component_flag():
    m = disk((30, 30), (10, 10), 5) | disk((30, 30), (24, 24), 2)
    res = inference.segment_ensemble(Ensemble([MapModel(m)], [1.0]), np.zeros(m.shape),
                                     VoteConfig(keep_largest_component=True))
    np.testing.assert_array_equal(res.mask, disk((30, 30), (10, 10), 5))
