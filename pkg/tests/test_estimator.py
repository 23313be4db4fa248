import numpy as np
import numpy.testing as npt
import pytest
from sklearn.base import clone

from vitforge import data as D
from vitforge.estimator import VitClassifier, check_images, check_labels

rng = np.random.default_rng(31)


def synthetic_arrays(n_per_class=8, size=(24, 24, 3), seed=0, labels=None):
    ds = D.gen_synthetic(n_per_class, k=4, size=size, seed=seed)
    X = np.stack([img.pixels for img in ds])
    y = ds.labels() if labels is None else labels
    return X, y


def small_estimator(**overrides):
    defaults = dict(
        image_size=(24, 24, 3),
        patch_size=6,
        projection_dim=16,
        num_layers=2,
        num_heads=2,
        encoder_mlp_dims=(32, 16),
        head_dims=(32, 16),
        dropout_rate=0.0,
        head_dropout_rate=0.0,
        learning_rate=1e-3,
        weight_decay=0.0,
        batch_size=16,
        max_epochs=40,
        early_stop_patience=40,
        validation_fraction=0.25,
        random_state=0,
    )
    defaults.update(overrides)
    return VitClassifier(**defaults)


# ---------------------------------------------------------------------------
# validation helpers


def test_check_images_accepts_valid_batch():
    X = rng.random((3, 8, 8, 3)).astype(np.float32)
    out = check_images(X)
    assert out.dtype == np.float32 and out.shape == (3, 8, 8, 3)


@pytest.mark.parametrize(
    "bad",
    [
        np.zeros((4, 8, 8)),  # missing channel axis
        np.zeros((0, 8, 8, 3)),  # empty
        np.full((2, 8, 8, 3), 2.0),  # out of range
        np.full((2, 8, 8, 3), np.nan),  # non-finite
    ],
)
def test_check_images_rejects_bad_input(bad):
    with pytest.raises(ValueError):
        check_images(bad)


def test_check_images_enforces_expected_size():
    with pytest.raises(ValueError, match="do not match"):
        check_images(np.zeros((2, 8, 8, 3)), image_size=(16, 16, 3))


def test_check_labels_rejects_wrong_length():
    with pytest.raises(ValueError):
        check_labels([0, 1], 3)


# ---------------------------------------------------------------------------
# sklearn API surface


def test_get_params_set_params_clone_roundtrip():
    est = small_estimator(learning_rate=5e-4)
    params = est.get_params()
    assert params["learning_rate"] == 5e-4
    assert params["patch_size"] == 6
    est.set_params(num_layers=3)
    assert est.num_layers == 3
    cloned = clone(est)
    assert cloned.get_params() == est.get_params()


def test_fit_predict_learns_synthetic_textures():
    X, y = synthetic_arrays(n_per_class=12)
    est = small_estimator()
    assert est.fit(X, y) is est
    preds = est.predict(X)
    assert preds.shape == y.shape
    assert (preds == y).mean() >= 0.9
    assert est.score(X, y) >= 0.9


def test_predict_proba_rows_normalize():
    X, y = synthetic_arrays(n_per_class=6)
    est = small_estimator(max_epochs=3)
    est.fit(X, y)
    probs = est.predict_proba(X)
    assert probs.shape == (X.shape[0], 4)
    npt.assert_allclose(probs.sum(axis=1), np.ones(X.shape[0]), atol=1e-6)


def test_classes_preserve_original_label_values():
    X, _ = synthetic_arrays(n_per_class=5)
    y = np.array(([10] * 5) + ([20] * 5) + ([30] * 5) + ([40] * 5))
    est = small_estimator(max_epochs=2)
    est.fit(X, y)
    npt.assert_array_equal(est.classes_, [10, 20, 30, 40])
    assert set(est.predict(X)) <= {10, 20, 30, 40}


def test_predict_before_fit_raises():
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        small_estimator().predict(np.zeros((1, 24, 24, 3)))


def test_fit_rejects_single_class():
    X, _ = synthetic_arrays(n_per_class=4)
    with pytest.raises(ValueError, match="two classes"):
        small_estimator().fit(X, np.zeros(X.shape[0], dtype=int))


def test_fit_deterministic_for_random_state():
    X, y = synthetic_arrays(n_per_class=5)
    a = small_estimator(max_epochs=3).fit(X, y)
    b = small_estimator(max_epochs=3).fit(X, y)
    npt.assert_array_equal(a.predict_proba(X), b.predict_proba(X))
    assert a.history_ == b.history_


def test_history_records_epochs():
    X, y = synthetic_arrays(n_per_class=5)
    est = small_estimator(max_epochs=4).fit(X, y)
    assert [r.epoch for r in est.history_] == [1, 2, 3, 4]
    assert est.stop_reason_ == "max_epochs"
