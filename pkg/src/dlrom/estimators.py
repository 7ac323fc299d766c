"""scikit-learn style wrappers around the encoder, reduced network and decoder."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .constructor import CompactSampleSet, build_decoder_cnn
from .exceptions import ShapeMismatch
from .fourier_lift import encoder_matrix, latent_dim, synthesize_dense
from .pde_fom import Grid
from .training import TrainConfig, default_hidden, eta_star_from_latents, fit_network, init_reduced

__all__ = [
    "FourierLiftEncoder",
    "ConvDecoder",
    "ReducedNetworkRegressor",
    "DLROM",
    "check_array_2d",
    "check_n_features",
]


def check_array_2d(X, name="X", allow_empty=False):
    """Return X as a finite float64 2-D array (1-D input becomes one row)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ShapeMismatch(f"{name} must be 2-D, got shape {X.shape}")
    if not allow_empty and X.shape[0] == 0:
        raise ValueError(f"{name} has no rows")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or inf")
    return X


def check_n_features(X, expected, name="X"):
    if X.shape[1] != expected:
        raise ShapeMismatch(f"{name} has {X.shape[1]} columns, expected {expected}")
    return X


class FourierLiftEncoder(TransformerMixin, BaseEstimator):
    """Grid snapshots -> real Fourier codes [a0, a1, b1, ..., am, bm].

    Parameters
    ----------
    k : int
        Dyadic level; snapshots hold values at x_j = j 2^-k, j = 1..2^k.
    s : int
        Smoothness order of the periodic extension.
    m : int
        Bandwidth; codes have 2m+1 entries.
    left_known : bool
        Treat u(0) = 0 as known (homogeneous Dirichlet data).  Otherwise the
        left value is extrapolated from the first nodes.
    """

    def __init__(self, k=7, s=1, m=8, left_known=True):
        self.k = k
        self.s = s
        self.m = m
        self.left_known = left_known

    def fit(self, X=None, y=None):
        self.grid_ = Grid(self.k)
        self.matrix_ = encoder_matrix(self.grid_, self.s, self.m, self.left_known)
        self.n_features_in_ = self.grid_.n_nodes
        return self

    def transform(self, X):
        check_is_fitted(self, "matrix_")
        X = check_n_features(check_array_2d(X), self.n_features_in_)
        return X @ self.matrix_.T

    def inverse_transform(self, Z):
        check_is_fitted(self, "matrix_")
        Z = check_n_features(check_array_2d(Z, "Z"), latent_dim(self.m), "Z")
        return synthesize_dense(Z, self.grid_)


class ConvDecoder(BaseEstimator):
    """ReLU CNN decoder exact on an inflated box around the training codes."""

    def __init__(self, k=7, m=8, inflation=0.5, tol=1e-9, seed=0):
        self.k = k
        self.m = m
        self.inflation = inflation
        self.tol = tol
        self.seed = seed

    def fit(self, Z, y=None):
        Z = check_n_features(check_array_2d(Z, "Z"), latent_dim(self.m), "Z")
        self.grid_ = Grid(self.k)
        self.sample_set_ = CompactSampleSet.from_points(Z, self.inflation)
        self.network_ = build_decoder_cnn(self.m, self.grid_, self.sample_set_, tol=self.tol, seed=self.seed)
        self.n_features_in_ = Z.shape[1]
        return self

    def predict(self, Z):
        check_is_fitted(self, "network_")
        Z = check_n_features(check_array_2d(Z, "Z"), self.n_features_in_, "Z")
        return self.network_(Z)


class ReducedNetworkRegressor(RegressorMixin, BaseEstimator):
    """ReLU MLP phi: parameters -> latent codes, trained on
    RMS misfit + lam * (sum of column norms of the output weight).

    ``hidden_layer_sizes=None`` picks two layers of width max(32, 4 p (2m+1));
    ``lam=None`` picks N_tilde^(-1/2).
    """

    def __init__(
        self,
        hidden_layer_sizes=None,
        lam=None,
        optimizer="adam",
        lr=3e-3,
        epochs=3000,
        batch_size=None,
        seed=0,
        eta_star_normalization=False,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.lam = lam
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.eta_star_normalization = eta_star_normalization

    def _config(self):
        return TrainConfig(
            lam=self.lam,
            optimizer=self.optimizer,
            lr=self.lr,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.seed,
            eta_star_normalization=self.eta_star_normalization,
        )

    def fit(self, X, y):
        X = check_array_2d(X)
        Y = check_array_2d(y, "y")
        if len(X) != len(Y):
            raise ShapeMismatch(f"X has {len(X)} rows, y has {len(Y)}")
        if Y.shape[1] % 2 != 1:
            raise ShapeMismatch("latent codes must have odd length 2m+1")
        p, m = X.shape[1], (Y.shape[1] - 1) // 2
        config = self._config()
        hidden = default_hidden(p, m) if self.hidden_layer_sizes is None else tuple(self.hidden_layer_sizes)
        self.lam_ = config.resolve_lambda(len(X), p)
        eta = 1.0
        if self.eta_star_normalization:
            eta = eta_star_from_latents(Y)
        net, rows = fit_network(init_reduced(p, m, hidden, self.seed), X, eta * Y, config, self.lam_)
        self.network_ = net.scaled_output(1.0 / eta) if eta != 1.0 else net
        self.log_ = rows
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        X = check_n_features(check_array_2d(X), self.n_features_in_)
        return self.network_(X)


class DLROM(RegressorMixin, BaseEstimator):
    """Parameters -> grid solution: encoder targets, reduced network, decoder.

    ``decoder="cnn"`` uses the constructed ReLU CNN, ``"dense"`` evaluates the
    Fourier synthesis directly; both agree on the decoder's sample set.
    """

    def __init__(self, k=7, s=1, m=8, decoder="cnn", inflation=0.5, regressor=None):
        self.k = k
        self.s = s
        self.m = m
        self.decoder = decoder
        self.inflation = inflation
        self.regressor = regressor

    def fit(self, X, y):
        X = check_array_2d(X)
        U = check_array_2d(y, "y")
        if self.decoder not in ("cnn", "dense"):
            raise ValueError(f"decoder must be 'cnn' or 'dense', got {self.decoder!r}")
        self.encoder_ = FourierLiftEncoder(self.k, self.s, self.m).fit()
        Z = self.encoder_.transform(U)
        reg = self.regressor if self.regressor is not None else ReducedNetworkRegressor()
        self.regressor_ = reg.fit(X, Z)
        if self.decoder == "cnn":
            Zhat = self.regressor_.predict(X)
            self.decoder_ = ConvDecoder(self.k, self.m, self.inflation).fit(np.vstack([Z, Zhat]))
        else:
            self.decoder_ = None
        self.n_features_in_ = X.shape[1]
        return self

    def latent(self, X):
        check_is_fitted(self, "regressor_")
        return self.regressor_.predict(X)

    def predict(self, X):
        Z = self.latent(X)
        if self.decoder_ is None:
            return self.encoder_.inverse_transform(Z)
        return self.decoder_.predict(Z)
