import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deal import DEAL
from deal._validation import check_images, check_scalar
from deal.data import piecewise_dataset
from deal.training import add_noise


def test_check_images_shapes():
    assert check_images(np.zeros((4, 5))).shape == (1, 1, 4, 5)
    assert check_images(np.zeros((3, 4, 5))).shape == (1, 3, 4, 5)
    assert check_images(np.zeros((3, 4, 5)), n_channels=1).shape == (3, 1, 4, 5)
    assert check_images([np.zeros((1, 4, 4))] * 2).shape == (2, 1, 4, 4)
    for bad in (np.zeros(4), np.zeros((0, 1, 4, 4)), np.full((2, 2), np.nan), [np.zeros((2, 2)), np.zeros((3, 3))]):
        with pytest.raises(ValueError):
            check_images(bad)
    with pytest.raises(ValueError, match="channels"):
        check_images(np.zeros((1, 2, 4, 4)), n_channels=1)


def test_check_scalar():
    assert check_scalar(3, "k", lo=1, integer=True) == 3
    assert check_scalar(None, "lam", allow_none=True) is None
    with pytest.raises(TypeError):
        check_scalar(2.5, "k", integer=True)
    with pytest.raises(TypeError):
        check_scalar(True, "k", integer=True)
    with pytest.raises(ValueError):
        check_scalar(-1.0, "sigma", lo=0.0)
    with pytest.raises(ValueError):
        check_scalar(5, "k", hi=4)


def test_params_round_trip():
    est = DEAL(sigma=15.0, lam=2.0, steps=0, model="toy")
    params = est.get_params()
    assert params["sigma"] == 15.0 and params["lam"] == 2.0 and params["model"] == "toy"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(sigma=5.0)
    assert est.sigma == 5.0


def test_transform_requires_fit():
    with pytest.raises(NotFittedError):
        DEAL().transform(np.zeros((8, 8)))


def test_toy_model_denoises():
    clean = np.stack(piecewise_dataset(2, 32, seed=99))
    noisy = np.stack([add_noise(c, 25.0, seed=i).numpy() for i, c in enumerate(clean)])
    est = DEAL(sigma=25.0, model="toy", steps=0).fit()
    out = est.transform(noisy)
    assert out.shape == clean.shape
    assert all(r.converged for r in est.reports_)
    base = np.mean([10 * np.log10(1 / np.mean((n - c) ** 2)) for n, c in zip(noisy, clean)])
    assert est.score(noisy, clean) >= base + 2.0
    np.testing.assert_array_equal(est.predict(noisy), out)


def test_lambda_zero_is_identity(rng):
    y = rng.random((2, 1, 8, 8))
    est = DEAL(lam=0.0, model="toy", steps=0, eps_in=1e-24).fit()
    np.testing.assert_allclose(est.fit_transform(y), y, atol=1e-15)


def test_operator_dict_and_given_start(rng):
    op = {"kind": "conv_downsample", "kernel": [[0.25, 0.25], [0.25, 0.25]], "stride": 2, "image_shape": [1, 16, 16]}
    y = np.full((1, 1, 8, 8), 0.4)
    est = DEAL(sigma=5.0, operator=op, model="toy", steps=0, x0=np.full((1, 16, 16), 0.4)).fit()
    out = est.transform(y)
    assert out.shape == (1, 1, 16, 16)
    np.testing.assert_allclose(out, 0.4, atol=1e-6)
    with pytest.raises(ValueError):
        DEAL(operator={"kind": "conv_downsample", "kernel": [[1.0]], "stride": 2}, steps=0, model="toy").fit().transform(y)


def test_invalid_hyperparameters():
    with pytest.raises(TypeError):
        DEAL(steps=1.5).fit(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ValueError):
        DEAL(sigma=-1.0).fit(np.zeros((1, 1, 32, 32)))
    with pytest.raises(ValueError):
        DEAL(steps=2).fit()


def test_short_fit_records_history():
    X = np.stack(piecewise_dataset(2, 16, seed=0))
    est = DEAL(steps=2, n_filters=4, patch_size=16, batch_size=1).fit(X)
    assert len(est.history_) == 2 and est.n_channels_ == 1
    assert est.model_.n_filters == 4
