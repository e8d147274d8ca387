import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pixtrip import CoSegmenter
from pixtrip.data import ImagePair, generate_pairs

PARAMS = dict(epochs=1, batch_size=2, channels=(4, 8), embed_dim=4, n_samples=20, lr=0.01, random_state=3)


@pytest.fixture(scope="module")
def pairs():
    return [p for p, _ in generate_pairs(5, 16, 8)]


@pytest.fixture(scope="module")
def fitted(pairs):
    return CoSegmenter(**PARAMS).fit(pairs[:3], eval_set=pairs[3:])


def test_get_params_and_clone():
    est = CoSegmenter(**PARAMS)
    params = est.get_params()
    assert params["embed_dim"] == 4 and params["channels"] == (4, 8)
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(margin=1.0)
    assert est.margin == 1.0


def test_config_round_trip():
    est = CoSegmenter(**PARAMS, seg_loss="focal")
    assert CoSegmenter.from_config(est.to_config()).get_params() == est.get_params()


def test_not_fitted(pairs):
    with pytest.raises(NotFittedError):
        CoSegmenter(**PARAMS).predict(pairs)


def test_output_shapes(fitted, pairs):
    assert fitted.predict(pairs).shape == (5, 2, 16, 16)
    assert set(np.unique(fitted.predict(pairs))) <= {0, 1}
    proba = fitted.predict_proba(pairs)
    assert proba.shape == (5, 2, 16, 16) and np.all((proba >= 0) & (proba <= 1))
    assert fitted.decision_function(pairs).shape == (5, 2, 2, 16, 16)
    assert fitted.transform(pairs).shape == (5, 2, 4, 16, 16)
    assert len(fitted.runlog_) == 1


def test_predict_agrees_with_proba(fitted, pairs):
    z = fitted.decision_function(pairs)
    assert np.array_equal(fitted.predict(pairs), (z[:, :, 1] > z[:, :, 0]).astype(np.uint8))


def test_score_matches_records(fitted, pairs):
    recs = fitted.per_image_records(pairs)
    assert fitted.score(pairs) == pytest.approx(np.mean([r.jaccard for r in recs]), abs=1e-15)


def test_deterministic_fit(pairs, fitted):
    again = CoSegmenter(**PARAMS).fit(pairs[:3], eval_set=pairs[3:])
    assert np.array_equal(again.decision_function(pairs), fitted.decision_function(pairs))


def test_input_validation(pairs):
    est = CoSegmenter(**PARAMS)
    bad = ImagePair(pairs[0].image_a[:, :10, :10], pairs[0].image_b[:, :10, :10], pairs[0].mask_a[:10, :10], pairs[0].mask_b[:10, :10], "disc")
    with pytest.raises(ValueError, match="divisible"):
        est.fit([bad])
    with pytest.raises(ValueError):
        est.fit([])
    odd = ImagePair(pairs[0].image_a, pairs[0].image_b, pairs[0].mask_a * 3, pairs[0].mask_b, "disc")
    with pytest.raises(ValueError):
        est.fit([odd])
