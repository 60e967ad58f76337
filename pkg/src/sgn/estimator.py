"""scikit-learn style wrappers around the model and the bare flow."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, DensityMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import Rng
from .integrator import FlowConfig, flow_arrays, inverse_flow_arrays
from .model import SgnModel, exact_log_likelihood, generate, iw_log_likelihood
from .net import SeparableHamiltonianNet
from .train import TrainConfig, train

__all__ = ["SGNEstimator", "SymplecticFlow"]


class SGNEstimator(DensityMixin, BaseEstimator):
    """Density model: encoder, symplectic latent flow, decoder.

    ``decoder_mode="exact_affine"`` makes the model a bijection with an exact
    log-density (``data_dim`` must equal ``2 * latent_half_dim``); the
    gaussian decoder scores with an importance-weighted bound using
    ``iw_samples`` encoder draws per point.
    """

    def __init__(
        self,
        latent_half_dim=1,
        hidden=(16, 16),
        decoder_mode="gaussian",
        activation="tanh",
        spectral_cap=None,
        total_time=1.0,
        dt=0.1,
        flow_mode="fixed",
        tolerance=None,
        epochs=50,
        batch_size=64,
        learning_rate=1e-3,
        optimizer="adam",
        backprop_mode="reversible",
        mc_samples=1,
        iw_samples=64,
        random_state=0,
    ):
        self.latent_half_dim = latent_half_dim
        self.hidden = hidden
        self.decoder_mode = decoder_mode
        self.activation = activation
        self.spectral_cap = spectral_cap
        self.total_time = total_time
        self.dt = dt
        self.flow_mode = flow_mode
        self.tolerance = tolerance
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.backprop_mode = backprop_mode
        self.mc_samples = mc_samples
        self.iw_samples = iw_samples
        self.random_state = random_state

    def _seed(self) -> int:
        return 0 if self.random_state is None else int(self.random_state)

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.n_features_in_ = X.shape[1]
        flow_cfg = FlowConfig(self.total_time, self.dt, self.flow_mode, self.tolerance)
        model = SgnModel.init(
            X.shape[1],
            self.latent_half_dim,
            Rng(self._seed()).spawn(2),
            tuple(self.hidden),
            self.decoder_mode,
            flow_cfg,
            self.activation,
            self.spectral_cap,
        )
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self._seed(),
            backprop_mode=self.backprop_mode,
            optimizer=self.optimizer,
            mc_samples=self.mc_samples,
        )
        self.model_, self.log_ = train(model, X, cfg)
        return self

    def _check(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def score_samples(self, X):
        X = self._check(X)
        if self.model_.decoder_mode == "exact_affine":
            return np.atleast_1d(exact_log_likelihood(self.model_, X))
        rng = Rng(self._seed()).spawn(3)
        return np.array([iw_log_likelihood(self.model_, x, rng, self.iw_samples) for x in X])

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))

    def sample(self, n_samples=1, random_state=None):
        check_is_fitted(self, "model_")
        seed = self._seed() if random_state is None else int(random_state)
        return generate(self.model_, Rng(seed).spawn(4), n_samples)

    def transform(self, X):
        """Latent codes: flowed posterior means, or the exact base point in affine mode."""
        X = self._check(X)
        m = self.model_
        if m.decoder_mode == "exact_affine":
            return m.inverse_flow_batch((X - m.shift) / m.scale)[0]
        mean = m.encode_batch(X)[0]
        return m.flow_batch(mean)[0]


class SymplecticFlow(TransformerMixin, BaseEstimator):
    """The bare flow map as a transformer on rows ``z = (q, p)``.

    With ``hamiltonian=None`` a random separable network is drawn at fit
    time from ``random_state``. ``inverse_transform`` is exact up to
    round-off for fixed-step configurations.
    """

    def __init__(self, hamiltonian=None, total_time=1.0, dt=0.05, hidden=(16, 16), random_state=0):
        self.hamiltonian = hamiltonian
        self.total_time = total_time
        self.dt = dt
        self.hidden = hidden
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] % 2:
            raise ValueError("phase-space rows need an even number of columns")
        d = X.shape[1] // 2
        self.n_features_in_ = X.shape[1]
        if self.hamiltonian is None:
            seed = 0 if self.random_state is None else int(self.random_state)
            self.hamiltonian_ = SeparableHamiltonianNet.init(d, tuple(self.hidden), Rng(seed))
        else:
            self.hamiltonian_ = self.hamiltonian
        self.config_ = FlowConfig(self.total_time, self.dt)
        self.dts_ = self.config_.fixed_steps()
        return self

    def _check(self, X):
        check_is_fitted(self, "hamiltonian_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X, X.shape[1] // 2

    def transform(self, X):
        X, d = self._check(X)
        q, p, _, _ = flow_arrays(self.hamiltonian_, X[:, :d], X[:, d:], self.config_)
        return np.concatenate([q, p], axis=1)

    def inverse_transform(self, X):
        X, d = self._check(X)
        n, dt = self.dts_
        q, p = inverse_flow_arrays(self.hamiltonian_, X[:, :d], X[:, d:], [dt] * n)
        return np.concatenate([q, p], axis=1)
