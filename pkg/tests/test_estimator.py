import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from m2mil.estimator import BagSampler, M2UNetClassifier, VolumePreprocessor
from m2mil.phantom import PhantomConfig, generate_case
from m2mil.validation import check_bag, check_labels, check_masks, check_volumes

SMALL = PhantomConfig(depth=(32, 33), height=(64, 66), width=(64, 66), severe_prob=0.5)


@pytest.fixture(scope="module")
def phantoms():
    cases = [generate_case(s, SMALL) for s in range(4)]
    return [c.volume for c in cases], [int(c.severe) for c in cases], [c.mask for c in cases]


def test_get_params_and_clone():
    est = M2UNetClassifier(lam=0.5, epochs=3)
    params = est.get_params()
    assert params["lam"] == 0.5 and params["epochs"] == 3 and params["lr"] == 0.01
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    assert est.set_params(width=4).width == 4
    assert BagSampler(bag_size=5).get_params() == {"bag_size": 5, "patch_size": 128, "random_state": 0}


def test_not_fitted():
    with pytest.raises(NotFittedError):
        M2UNetClassifier().predict([np.zeros((2, 16, 16))])


def test_preprocessor_and_sampler(phantoms):
    vols, _, _ = phantoms
    pre = VolumePreprocessor(crop_min_size=48).fit(vols)
    out = pre.transform(vols)
    assert len(out) == 4 and len(pre.boxes_) == 4
    assert all(v.min() >= 0 and v.max() <= 255 for v in out)
    bags = BagSampler(bag_size=3, patch_size=32, random_state=1).fit_transform(out)
    assert all(b.shape == (3, 32, 32) for b in bags)
    again = BagSampler(bag_size=3, patch_size=32, random_state=1).transform(out)
    assert all(np.array_equal(a, b) for a, b in zip(bags, again))


def test_fit_predict_segment(phantoms):
    vols, y, masks = phantoms
    est = M2UNetClassifier(epochs=1, bag_size=4, patch_size=16, width=4, bottleneck=8, emb_concepts=4,
                           img_concepts=4, crop_min_size=32)
    est.fit(vols, y, masks=[masks[0], None, masks[2], None])
    assert len(est.history_) == 1 and list(est.classes_) == [0, 1]
    proba = est.predict_proba(vols)
    assert proba.shape == (4, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(vols)) <= {0, 1}
    seg = est.segment(vols[:1])[0]
    assert seg.shape == vols[0].shape and seg.max() < 6
    p = est.predict_bag(np.full((2, 16, 16), 100.0))
    assert 0.0 <= p <= 1.0
    # refitting with the same seed reproduces the predictions exactly
    assert np.array_equal(clone(est).fit(vols, y, masks=[masks[0], None, masks[2], None]).predict_proba(vols), proba)


def test_validation_helpers():
    with pytest.raises(ValueError, match="single 3D array"):
        check_volumes(np.zeros((2, 3, 4)))
    with pytest.raises(ValueError):
        check_volumes([np.zeros((3, 4))])
    with pytest.raises(ValueError):
        check_volumes([np.full((2, 2, 2), np.nan)])
    with pytest.raises(ValueError):
        check_labels([0, 2], 2)
    with pytest.raises(ValueError):
        check_labels([0, 1, 1], 2)
    vols = [np.zeros((2, 2, 2))]
    assert check_masks(None, vols, 6) == [None]
    with pytest.raises(ValueError):
        check_masks([np.full((2, 2, 2), 6)], vols, 6)
    with pytest.raises(ValueError):
        check_bag(np.zeros((1, 20, 20)))
    with pytest.raises(ValueError):
        check_bag(np.full((1, 16, 16), 300.0))
