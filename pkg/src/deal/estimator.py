"""scikit-learn style wrapper: ``fit`` trains, ``transform`` reconstructs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_scalar
from .linop import Identity, make_operator
from .solver import DealModel, SolveConfig, deal_reconstruct, psnr

__all__ = ["DEAL"]


class DEAL(TransformerMixin, BaseEstimator):
    """Deep attentive least squares reconstruction.

    ``fit(X)`` trains on clean images ``X`` with synthetic Gaussian noise
    (``steps=0`` skips training and just adopts ``model``). ``transform(Y)``
    reconstructs each measurement in ``Y``; with the default identity
    operator that is denoising. ``model`` may be a :class:`DealModel`, a model
    file path, ``"toy"`` for the bundled model, or ``None`` for a fresh one.
    """

    def __init__(self, sigma=25.0, lam=None, operator=None, model=None, steps=500, n_filters=8,
                 batch_size=4, patch_size=32, k_in=1000, k_out=1000, eps_in=1e-8, eps_out=1e-5,
                 x0="zero", random_state=0):
        self.sigma = sigma
        self.lam = lam
        self.operator = operator
        self.model = model
        self.steps = steps
        self.n_filters = n_filters
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.k_in = k_in
        self.k_out = k_out
        self.eps_in = eps_in
        self.eps_out = eps_out
        self.x0 = x0
        self.random_state = random_state

    def _initial_model(self, n_in):
        if isinstance(self.model, DealModel):
            return self.model
        if self.model is None:
            shape = (self.patch_size, self.patch_size)
            return DealModel.initialize(n_in, self.n_filters, seed=self.random_state, shape=shape)
        from .cli import default_model_path
        from .io import load_model

        return load_model(default_model_path() if self.model == "toy" else Path(self.model))

    def fit(self, X=None, y=None):
        check_scalar(self.steps, "steps", lo=0, integer=True)
        check_scalar(self.sigma, "sigma", lo=0.0)
        check_scalar(self.lam, "lam", lo=0.0, allow_none=True)
        if self.steps == 0:
            model = self._initial_model(None if X is None else check_images(X).shape[1])
            self.history_ = []
        else:
            if X is None:
                raise ValueError("training needs clean images X")
            from .training import TrainConfig, train

            X = check_images(X)
            model = self._initial_model(X.shape[1])
            n1 = int(self.steps * 0.8)
            cfg = TrainConfig(steps=self.steps, batch_size=self.batch_size, patch_size=self.patch_size,
                              n_filters=model.n_filters, n_in=X.shape[1], seed=self.random_state,
                              phases=((n1, 5e-3, 4e-3), (self.steps - n1, 2e-3, 1e-6)))
            result = train(list(X), cfg, model=model)
            model, self.history_ = result.model, result.history
        self.model_ = model
        self.n_channels_ = model.n_in
        return self

    def _operator(self, shape):
        if self.operator is None:
            return Identity(shape)
        if isinstance(self.operator, dict):
            return make_operator(self.operator, shape)
        return self.operator

    def _image_shape(self, Y):
        if self.operator is None or isinstance(self.operator, dict):
            if isinstance(self.operator, dict) and "image_shape" in self.operator:
                return tuple(self.operator["image_shape"])
            if isinstance(self.operator, dict) and self.operator.get("kind") != "identity":
                raise ValueError("operator dict needs an image_shape entry to reconstruct measurements")
            return tuple(Y.shape[1:])
        return tuple(self.operator.in_shape)

    def transform(self, X):
        """Reconstructions of the measurements ``X``, shape ``(N, C, H, W)``."""
        check_is_fitted(self, "model_")
        if self.operator is None:
            Y = check_images(X, self.n_channels_)
        else:
            Y = np.asarray(X, dtype=np.float64)
            if not np.all(np.isfinite(Y)):
                raise ValueError("X contains NaN or infinite values")
        H = self._operator(self._image_shape(Y))
        if tuple(Y.shape[1:]) != tuple(H.out_shape):
            Y = Y.reshape(-1, *H.out_shape)
        x0 = self.x0 if isinstance(self.x0, str) else "given"
        cfg = SolveConfig(k_in=self.k_in, k_out=self.k_out, eps_in=self.eps_in, eps_out=self.eps_out,
                          x0=x0, x0_value=None if x0 != "given" else self.x0, lam=self.lam)
        x, reports = deal_reconstruct(self.model_, H, torch.from_numpy(Y), self.sigma, cfg)
        self.reports_ = reports
        return x.numpy()

    def predict(self, X):
        return self.transform(X)

    def score(self, X, y):
        """Mean PSNR (dB) of the reconstructions of ``X`` against the clean images ``y``."""
        rec = self.transform(X)
        ref = check_images(y, self.n_channels_, name="y")
        return float(np.mean([psnr(torch.from_numpy(a), torch.from_numpy(b)) for a, b in zip(rec, ref)]))
