import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sefcn import SEFCNSegmenter
from sefcn.estimator import check_images, check_labels
from sefcn.tensor import InvalidShapeError


def toy(n=8, seed=0):
    rng = np.random.default_rng(seed)
    y = np.zeros((n, 16, 16), dtype=np.int64)
    for i in range(n):
        r, c = rng.integers(2, 8, 2)
        y[i, r:r + 7, c:c + 7] = 1
    x = y * 0.8 + 0.1 + 0.05 * rng.standard_normal(y.shape)
    return x.astype(np.float32), y


def test_params_and_clone():
    est = SEFCNSegmenter(channels=8, se_mode="sse", max_epochs=3)
    params = est.get_params()
    assert params["channels"] == 8 and params["se_mode"] == "sse"
    other = clone(est).set_params(position="P6")
    assert other.position == "P6" and est.position == "P5"


def test_fit_predict_score():
    x, y = toy()
    est = SEFCNSegmenter(channels=4, max_epochs=4, batch_size=2, lr0=0.05)
    assert est.fit(x, y, X_val=x[:2], y_val=y[:2]) is est
    assert est.n_classes_ == 2 and len(est.history_) == 8
    proba = est.predict_proba(x[:3])
    assert proba.shape == (3, 2, 16, 16)
    pred = est.predict(x[:3])
    assert pred.shape == (3, 16, 16) and set(np.unique(pred)) <= {0, 1}
    assert 0 <= est.score(x, y) <= 1


def test_unfitted():
    with pytest.raises(NotFittedError):
        SEFCNSegmenter().predict(np.zeros((1, 16, 16)))


def test_check_images():
    assert check_images(np.zeros((2, 16, 16))).shape == (2, 1, 16, 16)
    with pytest.raises(InvalidShapeError):
        check_images(np.zeros((16, 16)))
    with pytest.raises(ValueError):
        check_images(np.full((1, 4, 4), np.nan))
    with pytest.raises(ValueError):
        check_images(np.zeros((0, 1, 4, 4)))


def test_check_labels():
    x = np.zeros((2, 1, 4, 4))
    assert check_labels(np.ones((2, 4, 4)), x).dtype == np.int64
    with pytest.raises(ValueError):
        check_labels(np.full((2, 4, 4), 0.5), x)
    with pytest.raises(ValueError):
        check_labels(np.full((2, 4, 4), 3), x, num_classes=3)
    with pytest.raises(InvalidShapeError):
        check_labels(np.zeros((2, 4, 5)), x)


def test_bad_extent_fails_before_training():
    x, y = toy()
    with pytest.raises(InvalidShapeError):
        SEFCNSegmenter(channels=4, depth=5).fit(x, y)
