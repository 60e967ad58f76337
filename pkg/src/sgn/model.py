"""Encoder, symplectic latent flow, decoder, ELBO and likelihoods.

Latent vectors are laid out as ``z = [q, p]`` with ``q = z[:d]`` and
``p = z[d:]``. Batched helpers take data as rows of a 2-d array.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import PhaseState, Rng, analytic_from_dict, analytic_to_dict
from .integrator import DivergenceError, FlowConfig, flow_arrays, inverse_flow_arrays
from .net import MlpParams, SeparableHamiltonianNet, init_mlp, mlp_forward

__all__ = [
    "LOG_VAR_MIN",
    "LOG_VAR_MAX",
    "GaussianParams",
    "ElboBreakdown",
    "SgnModel",
    "encode",
    "reparam_sample",
    "gaussian_kl",
    "gaussian_log_prob",
    "decode_log_prob",
    "elbo",
    "generate",
    "exact_log_likelihood",
    "importance_log_weights",
    "iw_log_likelihood",
]

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class GaussianParams:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        lv = np.clip(np.asarray(self.log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX)
        if mean.shape != lv.shape:
            raise ValueError("mean and log_var must have the same shape")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_var", lv)


@dataclass(frozen=True)
class ElboBreakdown:
    reconstruction: float
    kl: float
    elbo: float
    logdet_correction: float = 0.0


@dataclass
class SgnModel:
    data_dim: int
    latent_half_dim: int
    encoder: MlpParams
    hamiltonian: object
    flow_cfg: FlowConfig
    decoder_mode: str = "gaussian"
    decoder: MlpParams | None = None
    scale: np.ndarray | None = None
    shift: np.ndarray | None = None

    def __post_init__(self):
        d = self.latent_half_dim
        if self.encoder.in_dim != self.data_dim or self.encoder.out_dim != 4 * d:
            raise ValueError(f"encoder must map R^{self.data_dim} -> R^{4 * d}")
        hd = getattr(self.hamiltonian, "dim", None)
        if hd is not None and hd != d:
            raise ValueError(f"Hamiltonian half dimension {hd} != latent_half_dim {d}")
        if self.decoder_mode == "gaussian":
            if self.decoder is None:
                raise ValueError("gaussian mode needs a decoder network")
            if self.decoder.in_dim != 2 * d or self.decoder.out_dim != 2 * self.data_dim:
                raise ValueError(f"decoder must map R^{2 * d} -> R^{2 * self.data_dim}")
        elif self.decoder_mode == "exact_affine":
            if self.data_dim != 2 * d:
                raise ValueError("exact_affine mode requires data_dim == 2 * latent_half_dim")
            self.scale = np.asarray(self.scale if self.scale is not None else np.ones(2 * d), dtype=np.float64)
            self.shift = np.asarray(self.shift if self.shift is not None else np.zeros(2 * d), dtype=np.float64)
            if self.scale.shape != (2 * d,) or self.shift.shape != (2 * d,):
                raise ValueError("scale and shift must have length 2d")
            if np.any(self.scale == 0):
                raise ValueError("every scale entry must be nonzero for the affine layer to be invertible")
        else:
            raise ValueError(f"unknown decoder_mode {self.decoder_mode!r}")

    @classmethod
    def init(
        cls,
        data_dim: int,
        latent_half_dim: int,
        rng: Rng,
        hidden=(16, 16),
        decoder_mode="gaussian",
        flow_cfg: FlowConfig | None = None,
        activation="tanh",
        spectral_cap=None,
        hamiltonian=None,
    ) -> "SgnModel":
        d = latent_half_dim
        encoder = init_mlp([data_dim, *hidden, 4 * d], rng, activation)
        if hamiltonian is None:
            hamiltonian = SeparableHamiltonianNet.init(d, hidden, rng, activation, spectral_cap)
        decoder = None
        if decoder_mode == "gaussian":
            decoder = init_mlp([2 * d, *hidden, 2 * data_dim], rng, activation)
        return cls(
            data_dim,
            d,
            encoder,
            hamiltonian,
            flow_cfg or FlowConfig(),
            decoder_mode,
            decoder,
        )

    @property
    def trainable_hamiltonian(self) -> bool:
        return isinstance(self.hamiltonian, SeparableHamiltonianNet)

    def param_arrays(self) -> list[np.ndarray]:
        """Every trainable array in a fixed order; optimizers update these in place."""
        out = list(self.encoder.arrays())
        if self.trainable_hamiltonian:
            out += self.hamiltonian.arrays()
        if self.decoder_mode == "gaussian":
            out += self.decoder.arrays()
        else:
            out += [self.scale, self.shift]
        return out

    def copy(self) -> "SgnModel":
        return SgnModel(
            self.data_dim,
            self.latent_half_dim,
            self.encoder.copy(),
            self.hamiltonian.copy() if self.trainable_hamiltonian else self.hamiltonian,
            self.flow_cfg,
            self.decoder_mode,
            self.decoder.copy() if self.decoder is not None else None,
            None if self.scale is None else self.scale.copy(),
            None if self.shift is None else self.shift.copy(),
        )

    # ---- batched building blocks -------------------------------------------------

    def encode_batch(self, X):
        out, cache = mlp_forward(self.encoder, X)
        k = 2 * self.latent_half_dim
        raw_lv = out[:, k:]
        return out[:, :k], np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX), raw_lv, cache

    def decode_batch(self, Z):
        out, cache = mlp_forward(self.decoder, Z)
        D = self.data_dim
        raw_lv = out[:, D:]
        return out[:, :D], np.clip(raw_lv, LOG_VAR_MIN, LOG_VAR_MAX), raw_lv, cache

    def flow_batch(self, Z, strict=True, store=0):
        """Flow rows of ``Z``; returns ``(ZT, traces, ok, states)``.

        Fixed mode advances the whole batch at once and shares one trace;
        adaptive mode runs each row separately. Rows that diverge are marked
        in ``ok`` (and raise when ``strict``).
        """
        d = self.latent_half_dim
        H, cfg = self.hamiltonian, self.flow_cfg
        if cfg.mode == "fixed":
            q, p, trace, states = flow_arrays(H, Z[:, :d], Z[:, d:], cfg, store=store, strict=strict)
            ZT = np.concatenate([q, p], axis=1)
            ok = np.isfinite(ZT).all(axis=1)
            return ZT, [trace], ok, [states]
        ZT = np.full_like(Z, np.nan)
        traces, all_states = [], []
        ok = np.zeros(len(Z), dtype=bool)
        for i, z in enumerate(Z):
            try:
                q, p, trace, states = flow_arrays(H, z[:d], z[d:], cfg, store=store)
            except DivergenceError as exc:
                if strict:
                    raise DivergenceError(exc.step, f"sample {i}: {exc}") from exc
                traces.append(None)
                all_states.append(None)
                continue
            ZT[i, :d], ZT[i, d:] = q, p
            ok[i] = True
            traces.append(trace)
            all_states.append(states)
        return ZT, traces, ok, all_states

    def inverse_flow_batch(self, ZT):
        if self.flow_cfg.mode != "fixed":
            raise ValueError(
                "exact likelihood needs a fixed-step flow: state-dependent step sizes "
                "make the composite map non-volume-preserving"
            )
        d = self.latent_half_dim
        n, dt = self.flow_cfg.fixed_steps()
        q, p = inverse_flow_arrays(self.hamiltonian, ZT[:, :d], ZT[:, d:], [dt] * n)
        return np.concatenate([q, p], axis=1), [dt] * n

    # ---- serialization --------------------------------------------------------------

    def to_dict(self) -> dict:
        if self.trainable_hamiltonian:
            ham = {"kind": "neural", **self.hamiltonian.to_dict()}
        else:
            ham = analytic_to_dict(self.hamiltonian)
        out = {
            "data_dim": self.data_dim,
            "latent_half_dim": self.latent_half_dim,
            "decoder_mode": self.decoder_mode,
            "encoder": self.encoder.to_dict(),
            "hamiltonian": ham,
            "flow": self.flow_cfg.to_dict(),
        }
        if self.decoder_mode == "gaussian":
            out["decoder"] = self.decoder.to_dict()
        else:
            out["scale"] = self.scale.tolist()
            out["shift"] = self.shift.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SgnModel":
        ham = dict(d["hamiltonian"])
        if ham.pop("kind", "neural") == "neural":
            H = SeparableHamiltonianNet.from_dict(ham)
        else:
            H = analytic_from_dict(d["hamiltonian"])
        return cls(
            d["data_dim"],
            d["latent_half_dim"],
            MlpParams.from_dict(d["encoder"]),
            H,
            FlowConfig(**d["flow"]),
            d["decoder_mode"],
            MlpParams.from_dict(d["decoder"]) if "decoder" in d else None,
            np.array(d["scale"]) if "scale" in d else None,
            np.array(d["shift"]) if "shift" in d else None,
        )


def _check_x(m: SgnModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != m.data_dim:
        raise ValueError(f"expected data dimension {m.data_dim}, got {x.shape[-1]}")
    return x


def encode(m: SgnModel, x) -> GaussianParams:
    x = _check_x(m, x)
    mean, lv, _, _ = m.encode_batch(x.reshape(1, -1))
    return GaussianParams(mean[0], lv[0])


def reparam_sample(g: GaussianParams, rng: Rng | None = None, eps=None) -> PhaseState:
    """``z0 = mean + exp(log_var / 2) * eps``; first half is q, second half p."""
    if eps is None:
        eps = rng.standard_normal(g.mean.shape)
    z = g.mean + np.exp(0.5 * g.log_var) * np.asarray(eps, dtype=np.float64)
    return PhaseState.from_vector(z)


def gaussian_kl(g: GaussianParams) -> float:
    """KL of a diagonal Gaussian from N(0, I)."""
    lv = g.log_var
    # expm1 keeps exp(lv) - 1 - lv from going negative when lv is tiny
    return float(0.5 * np.sum(np.expm1(lv) - lv + g.mean**2))


def gaussian_log_prob(x, mean, log_var):
    """Diagonal Gaussian log-density, summed over the last axis."""
    r = x - mean
    return -0.5 * np.sum(LOG_2PI + log_var + r * r * np.exp(-log_var), axis=-1)


def decode_log_prob(m: SgnModel, zT: PhaseState, x) -> float:
    if m.decoder_mode != "gaussian":
        raise ValueError("decode_log_prob is undefined for the exact affine decoder; use exact_log_likelihood")
    x = _check_x(m, x)
    z = zT.as_vector()
    if z.size != 2 * m.latent_half_dim:
        raise ValueError(f"latent state has dimension {z.size}, expected {2 * m.latent_half_dim}")
    mean, lv, _, _ = m.decode_batch(z.reshape(1, -1))
    return float(gaussian_log_prob(x, mean[0], lv[0]))


def _exact_log_likelihood_batch(m: SgnModel, X):
    ZT = (X - m.shift) / m.scale
    Z0, _ = m.inverse_flow_batch(ZT)
    logdet = float(np.sum(np.log(np.abs(m.scale))))
    return -0.5 * np.sum(Z0 * Z0, axis=1) - m.latent_half_dim * LOG_2PI - logdet


def exact_log_likelihood(m: SgnModel, x):
    """``log N(Phi_T^{-1}(Lambda^{-1}(x)); 0, I) - sum log|scale|``.

    Accepts one point (returns a float) or rows of a batch.
    """
    if m.decoder_mode != "exact_affine":
        raise ValueError("exact likelihood requires the exact_affine decoder")
    x = _check_x(m, x)
    single = x.ndim == 1
    out = _exact_log_likelihood_batch(m, x.reshape(-1, m.data_dim))
    if not np.all(np.isfinite(out)):
        raise DivergenceError(-1, "inverse flow diverged")
    return float(out[0]) if single else out


def elbo(m: SgnModel, x, rng: Rng, mc_samples: int = 1) -> ElboBreakdown:
    """Single-point ELBO with ``mc_samples`` reparameterized draws.

    The flow is volume preserving so no Jacobian term appears. With the exact
    affine decoder the objective is the exact log-likelihood, reported as the
    reconstruction term with zero KL.
    """
    if mc_samples < 1:
        raise ValueError("mc_samples must be >= 1")
    x = _check_x(m, x)
    if m.decoder_mode == "exact_affine":
        ll = exact_log_likelihood(m, x)
        logdet = -float(np.sum(np.log(np.abs(m.scale))))
        return ElboBreakdown(ll, 0.0, ll, logdet)
    g = encode(m, x)
    eps = rng.standard_normal((mc_samples, g.mean.size))
    Z0 = g.mean + np.exp(0.5 * g.log_var) * eps
    ZT, _, _, _ = m.flow_batch(Z0)
    mean, lv, _, _ = m.decode_batch(ZT)
    rec = float(np.mean(gaussian_log_prob(x, mean, lv)))
    kl = gaussian_kl(g)
    return ElboBreakdown(rec, kl, rec - kl)


def generate(m: SgnModel, rng: Rng, n: int) -> np.ndarray:
    """Prior draw, forward flow, then decoder mean or the affine layer."""
    if n == 0:
        return np.zeros((0, m.data_dim))
    Z0 = rng.standard_normal((n, 2 * m.latent_half_dim))
    ZT, _, _, _ = m.flow_batch(Z0)
    if m.decoder_mode == "exact_affine":
        return m.scale * ZT + m.shift
    return m.decode_batch(ZT)[0]


def importance_log_weights(m: SgnModel, x, rng: Rng, S: int) -> np.ndarray:
    """``log p(x|Phi_T(z0)) + log p(z0) - log q(z0|x)`` for ``S`` encoder draws."""
    if m.decoder_mode != "gaussian":
        raise ValueError("importance weighting needs the gaussian decoder")
    if S < 1:
        raise ValueError("S must be >= 1")
    x = _check_x(m, x)
    g = encode(m, x)
    eps = rng.standard_normal((S, g.mean.size))
    Z0 = g.mean + np.exp(0.5 * g.log_var) * eps
    ZT, _, _, _ = m.flow_batch(Z0)
    mean, lv, _, _ = m.decode_batch(ZT)
    log_px = gaussian_log_prob(x, mean, lv)
    log_prior = -0.5 * np.sum(Z0 * Z0 + LOG_2PI, axis=1)
    log_q = -0.5 * np.sum(eps * eps + g.log_var + LOG_2PI, axis=1)
    return log_px + log_prior - log_q


def iw_log_likelihood(m: SgnModel, x, rng: Rng, S: int) -> float:
    lw = importance_log_weights(m, x, rng, S)
    return float(logsumexp(lw) - math.log(S))
