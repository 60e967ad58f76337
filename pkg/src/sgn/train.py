"""Gradients through the symplectic flow and the minibatch training loop.

Backpropagation through the flow runs in one of two modes. ``stored`` keeps
every intermediate state from the forward pass. ``reversible`` keeps only
the final state and rebuilds each earlier state with an exact inverse
leapfrog step, so memory does not depend on the number of steps.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import integrator
from .core import PhaseState, Rng
from .integrator import StepTrace
from .model import LOG_VAR_MAX, LOG_VAR_MIN, ElboBreakdown, SgnModel, gaussian_log_prob
from .net import GradBundle, SeparableHamiltonianNet, lipschitz_bound, mlp_backward, spectral_normalize

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "FlowVjp",
    "TrainingAborted",
    "flow_vjp",
    "flow_vjp_arrays",
    "negative_elbo",
    "elbo_gradients",
    "Sgd",
    "Adam",
    "Trainer",
    "train",
]

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    backprop_mode: str = "reversible"
    optimizer: str = "adam"
    lipschitz_elbo: float | None = None
    grad_clip: float | None = 10.0
    mc_samples: int = 1
    track_stability: bool = True
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1 or self.mc_samples < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and mc_samples >= 1 required")
        if self.backprop_mode not in ("stored", "reversible"):
            raise ValueError(f"unknown backprop_mode {self.backprop_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lipschitz_elbo is not None:
            if not self.lipschitz_elbo > 0:
                raise ValueError("lipschitz_elbo must be positive")
            if self.optimizer == "sgd" and self.learning_rate >= 2.0 / self.lipschitz_elbo:
                raise ValueError(
                    f"learning_rate={self.learning_rate} violates eta < 2/L = {2.0 / self.lipschitz_elbo:.6g}"
                )
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be positive")
        if self.checkpoint_every is not None and self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    @property
    def lr_guard(self) -> str:
        if self.lipschitz_elbo is None:
            return "unset"
        return "enforced" if self.optimizer == "sgd" else "not-applicable"


# ---------------------------------------------------------------------------
# Flow VJP


@dataclass
class FlowVjp:
    dq0: np.ndarray
    dp0: np.ndarray
    kinetic: GradBundle | None
    potential: GradBundle | None
    peak_states: int

    @property
    def dz0(self) -> np.ndarray:
        return np.concatenate([self.dq0, self.dp0], axis=-1)


def _accumulate(total, bundle, scale):
    if bundle is None:
        return total
    if total is None:
        return bundle.scaled(scale)
    total.iadd(bundle, scale)
    return total


def _step_vjp(H, q, p, dt, aq, ap, acc):
    """Pull ``(aq, ap)`` at the end of one step back to its start ``(q, p)``."""
    half = 0.5 * dt
    p_half = p - half * H.grad_q(q, p)
    q1 = q + dt * H.grad_p(q, p_half)

    hv, bv = H.potential_vjp(q1, ap)
    acc["potential"] = _accumulate(acc["potential"], bv, -half)
    aq1 = aq - half * hv
    ap_half = ap

    hk, bk = H.kinetic_vjp(p_half, aq1)
    acc["kinetic"] = _accumulate(acc["kinetic"], bk, dt)
    ap_half = ap_half + dt * hk

    hv0, bv0 = H.potential_vjp(q, ap_half)
    acc["potential"] = _accumulate(acc["potential"], bv0, -half)
    return aq1 - half * hv0, ap_half


def flow_vjp_arrays(H, trace: StepTrace, qT, pT, aq, ap, mode="reversible", states=None) -> FlowVjp:
    """Cotangents at ``z0`` and Hamiltonian parameter gradients for upstream ``(aq, ap)`` at ``zT``.

    Stored mode needs ``states`` holding every step (``store=1`` forward);
    without it the states are rebuilt by inversion first. Reversible mode
    may receive sparse ``states`` (``store=k``) which act as checkpoints:
    reconstructed states are snapped to them, bounding round-off drift at
    the cost of ``N/k`` extra stored states. ``peak_states`` counts phase
    states held at once, the cotangent included.
    """
    if not H.separable:
        raise ValueError("reverse-mode flow requires a separable Hamiltonian")
    dts = trace.accepted_dts
    n = len(dts)
    aq = np.array(aq, dtype=np.float64)
    ap = np.array(ap, dtype=np.float64)
    acc = {"kinetic": None, "potential": None}
    if mode == "stored":
        if states is None or len(states) < n + 1:
            states = _rebuild_states(H, qT, pT, dts)
        for i in range(n - 1, -1, -1):
            q, p = states[i]
            aq, ap = _step_vjp(H, q, p, dts[i], aq, ap, acc)
        peak = n + 2
    elif mode == "reversible":
        checkpoints = states or {}
        q = np.asarray(qT, dtype=np.float64)
        p = np.asarray(pT, dtype=np.float64)
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(n - 1, -1, -1):
                if i in checkpoints:
                    q, p = checkpoints[i]
                else:
                    q, p, _ = integrator._step(H, q, p, -dts[i])
                    if not (np.isfinite(q).all() and np.isfinite(p).all()):
                        raise integrator.DivergenceError(i, f"reconstruction diverged at step {i}")
                aq, ap = _step_vjp(H, q, p, dts[i], aq, ap, acc)
        peak = 3 + len([k for k in checkpoints if k < n])
    else:
        raise ValueError(f"unknown backprop mode {mode!r}")
    return FlowVjp(aq, ap, acc["kinetic"], acc["potential"], peak)


def _rebuild_states(H, qT, pT, dts):
    states = {len(dts): (np.asarray(qT), np.asarray(pT))}
    q, p = states[len(dts)]
    for i in range(len(dts) - 1, -1, -1):
        q, p, _ = integrator._step(H, q, p, -dts[i])
        states[i] = (q, p)
    return states


def flow_vjp(H, trace: StepTrace, zT: PhaseState, upstream, mode="reversible", states=None) -> FlowVjp:
    """Single-trajectory wrapper: ``upstream`` is a cotangent vector on R^{2d}."""
    u = np.asarray(upstream, dtype=np.float64)
    d = zT.dim
    if u.shape != (2 * d,):
        raise ValueError(f"upstream must have length {2 * d}")
    return flow_vjp_arrays(H, trace, zT.q, zT.p, u[:d], u[d:], mode, states)


# ---------------------------------------------------------------------------
# ELBO gradients


def _hamiltonian_zero(H):
    if isinstance(H, SeparableHamiltonianNet):
        return GradBundle.zeros_like(H.kinetic), GradBundle.zeros_like(H.potential)
    return None, None


@dataclass
class ElboGradients:
    grads: list  # aligned with SgnModel.param_arrays()
    metrics: ElboBreakdown
    per_sample_elbo: np.ndarray
    skipped: int
    steps: float
    clamp_events: int
    peak_states: int


def negative_elbo(m: SgnModel, X, eps) -> float:
    """Batch-mean ``-ELBO`` at fixed reparameterization noise ``eps`` (shape ``(n, 2d)``)."""
    X = np.asarray(X, dtype=np.float64).reshape(-1, m.data_dim)
    if m.decoder_mode == "exact_affine":
        from .model import _exact_log_likelihood_batch

        return float(-np.mean(_exact_log_likelihood_batch(m, X)))
    mean, lv, _, _ = m.encode_batch(X)
    Z0 = mean + np.exp(0.5 * lv) * eps
    ZT, _, _, _ = m.flow_batch(Z0)
    dm, dlv, _, _ = m.decode_batch(ZT)
    rec = gaussian_log_prob(X, dm, dlv)
    kl = 0.5 * np.sum(np.expm1(lv) - lv + mean**2, axis=1)
    return float(np.mean(kl - rec))


def _clip_mask(raw):
    return ((raw >= LOG_VAR_MIN) & (raw <= LOG_VAR_MAX)).astype(np.float64)


def _flow_backward(m: SgnModel, ZT, traces, states, aZT, mode):
    """Run the flow VJP for each trace group; returns ``(aZ0, kinetic, potential, peak)``."""
    d = m.latent_half_dim
    H = m.hamiltonian
    gk, gv = _hamiltonian_zero(H)
    aZ0 = np.empty_like(aZT)
    peak = 0
    if len(traces) == 1 and m.flow_cfg.mode == "fixed":
        groups = [(slice(None), traces[0], states[0])]
    else:
        groups = [(i, traces[i], states[i]) for i in range(len(traces))]
    for idx, trace, st in groups:
        res = flow_vjp_arrays(H, trace, ZT[idx, :d], ZT[idx, d:], aZT[idx, :d], aZT[idx, d:], mode, st)
        aZ0[idx, :d], aZ0[idx, d:] = res.dq0, res.dp0
        if gk is not None:
            gk.iadd(res.kinetic)
            gv.iadd(res.potential)
        peak = max(peak, res.peak_states)
    return aZ0, gk, gv, peak


def _store_for(mode, checkpoint_every):
    if mode == "stored":
        return 1
    return checkpoint_every or 0


def elbo_gradients(
    m: SgnModel,
    batch,
    rng: Rng | None = None,
    mode: str = "reversible",
    eps=None,
    checkpoint_every: int | None = None,
) -> ElboGradients:
    """Batch-mean gradients of ``-ELBO`` for every parameter of ``m``.

    Samples whose flow diverges are dropped and counted; more than 10% of the
    batch diverging raises ``DivergenceError``.
    """
    X = np.asarray(batch, dtype=np.float64).reshape(-1, m.data_dim)
    if len(X) == 0:
        raise ValueError("empty batch")
    if m.decoder_mode == "exact_affine":
        return _exact_gradients(m, X, mode, checkpoint_every)
    d2 = 2 * m.latent_half_dim
    if eps is None:
        eps = rng.standard_normal((len(X), d2))
    eps = np.asarray(eps, dtype=np.float64).reshape(len(X), d2)

    mean, lv, raw_lv, enc_cache = m.encode_batch(X)
    sd = np.exp(0.5 * lv)
    Z0 = mean + sd * eps
    store = _store_for(mode, checkpoint_every)
    ZT, traces, ok, states = m.flow_batch(Z0, strict=False, store=store)
    skipped = int(np.count_nonzero(~ok))
    if skipped > 0.1 * len(X):
        raise integrator.DivergenceError(-1, f"{skipped} of {len(X)} samples diverged")
    if skipped:
        keep = np.flatnonzero(ok)
        X, eps, mean, lv, raw_lv, sd, Z0 = (a[keep] for a in (X, eps, mean, lv, raw_lv, sd, Z0))
        _, _, _, enc_cache = m.encode_batch(X)
        ZT, traces, ok, states = m.flow_batch(Z0, strict=True, store=store)
    n = len(X)

    dmean, dlv, draw_lv, dec_cache = m.decode_batch(ZT)
    inv_var = np.exp(-dlv)
    r = X - dmean
    rec = gaussian_log_prob(X, dmean, dlv)
    kl = 0.5 * np.sum(np.expm1(lv) - lv + mean**2, axis=1)
    per_elbo = rec - kl

    # loss = mean(kl - rec)
    g_dmean = -r * inv_var / n
    g_dlv = 0.5 * (1.0 - r * r * inv_var) * _clip_mask(draw_lv) / n
    aZT, dec_grad = mlp_backward(m.decoder, dec_cache, np.concatenate([g_dmean, g_dlv], axis=1))

    aZ0, gk, gv, peak = _flow_backward(m, ZT, traces, states, aZT, mode)

    g_mean = aZ0 + mean / n
    g_lv = (aZ0 * eps * 0.5 * sd + 0.5 * (np.exp(lv) - 1.0) / n) * _clip_mask(raw_lv)
    _, enc_grad = mlp_backward(m.encoder, enc_cache, np.concatenate([g_mean, g_lv], axis=1))

    grads = enc_grad.arrays()
    if m.trainable_hamiltonian:
        grads += gk.arrays() + gv.arrays()
    grads += dec_grad.arrays()
    metrics = ElboBreakdown(float(np.mean(rec)), float(np.mean(kl)), float(np.mean(per_elbo)))
    return ElboGradients(
        grads,
        metrics,
        per_elbo,
        skipped,
        float(np.mean([t.n_steps for t in traces])),
        sum(t.clamp_events for t in traces),
        peak,
    )


def _exact_gradients(m: SgnModel, X, mode, checkpoint_every):
    """Gradients of the mean negative exact log-likelihood."""
    from .model import LOG_2PI

    d = m.latent_half_dim
    n = len(X)
    s, b = m.scale, m.shift
    ZT = (X - b) / s
    Z0, dts = m.inverse_flow_batch(ZT)
    if not np.all(np.isfinite(Z0)):
        raise integrator.DivergenceError(-1, "inverse flow diverged")
    # Z0 = inverse(ZT) is itself a leapfrog flow with negated, reversed steps.
    back = StepTrace([-dt for dt in reversed(dts)])
    states = None
    if mode == "stored" or checkpoint_every:
        states = _rebuild_states(m.hamiltonian, Z0[:, :d], Z0[:, d:], back.accepted_dts)
        if mode == "reversible":
            states = {k: v for k, v in states.items() if k % checkpoint_every == 0}
    res = flow_vjp_arrays(m.hamiltonian, back, Z0[:, :d], Z0[:, d:], Z0[:, :d] / n, Z0[:, d:] / n, mode, states)
    aZT = res.dz0
    nll = 0.5 * np.sum(Z0 * Z0, axis=1) + d * LOG_2PI + np.sum(np.log(np.abs(s)))
    g_shift = -np.sum(aZT, axis=0) / s
    g_scale = -np.sum(aZT * ZT, axis=0) / s + 1.0 / s
    grads = [np.zeros_like(a) for a in m.encoder.arrays()]
    if m.trainable_hamiltonian:
        gk, gv = _hamiltonian_zero(m.hamiltonian)
        gk.iadd(res.kinetic)
        gv.iadd(res.potential)
        grads += gk.arrays() + gv.arrays()
    grads += [g_scale, g_shift]
    ll = -nll
    logdet = -float(np.sum(np.log(np.abs(s))))
    metrics = ElboBreakdown(float(np.mean(ll)), 0.0, float(np.mean(ll)), logdet)
    return ElboGradients(grads, metrics, ll, 0, float(len(dts)), 0, res.peak_states)


# ---------------------------------------------------------------------------
# Optimizers


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict) -> None:
        pass


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        if self.m is None:
            return {"t": self.t}
        return {"t": self.t, "m": [a.tolist() for a in self.m], "v": [a.tolist() for a in self.v]}

    def load_state_dict(self, state: dict) -> None:
        self.t = state["t"]
        if "m" in state:
            self.m = [np.array(a, dtype=np.float64) for a in state["m"]]
            self.v = [np.array(a, dtype=np.float64) for a in state["v"]]


def _clip(grads, max_norm):
    if max_norm is None:
        return grads, None
    norm = math.sqrt(math.fsum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return grads, norm


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    elbo_stderr: float
    reconstruction: float
    kl: float
    mean_steps: float
    clamp_events: int
    skipped: int
    failed_batches: int
    peak_states: int
    dt: float
    stability_bound: float | None
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    lr_guard: str = "unset"

    @property
    def elbo(self) -> list:
        return [r.elbo for r in self.records]

    def to_jsonl(self) -> str:
        import json

        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


class Trainer:
    """Stateful driver for minibatch ELBO optimization; resumable at epoch boundaries."""

    def __init__(self, model: SgnModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.rng = Rng(cfg.seed)
        self.epoch = 0
        self.requested_dt = model.flow_cfg.initial_dt
        if cfg.optimizer == "adam":
            self.opt = Adam(cfg.learning_rate)
        else:
            self.opt = Sgd(cfg.learning_rate)
        self.log = TrainLog(lr_guard=cfg.lr_guard)

    def _refresh_constraints(self) -> int:
        m = self.model
        if not m.trainable_hamiltonian:
            return 0
        H = m.hamiltonian
        if H.kinetic.spectral_cap is not None:
            H.kinetic = spectral_normalize(H.kinetic)[0]
        if H.potential.spectral_cap is not None:
            H.potential = spectral_normalize(H.potential)[0]
        if not self.cfg.track_stability:
            return 0
        base = replace(m.flow_cfg, initial_dt=self.requested_dt, stability_bound=None)
        m.flow_cfg, clamped = base.with_stability(lipschitz_bound(H))
        return int(clamped)

    def run_epoch(self, X: np.ndarray) -> EpochRecord:
        cfg, m = self.cfg, self.model
        t0 = time.perf_counter()
        clamps = self._refresh_constraints()
        order = self.rng.permutation(len(X))
        elbos, recs, kls = [], [], []
        steps, skipped, failed, consecutive, peak = [], 0, 0, 0, 0
        for start in range(0, len(X), cfg.batch_size):
            xb = X[order[start : start + cfg.batch_size]]
            if cfg.mc_samples > 1:
                xb = np.repeat(xb, cfg.mc_samples, axis=0)
            try:
                g = elbo_gradients(m, xb, self.rng, cfg.backprop_mode, checkpoint_every=cfg.checkpoint_every)
            except (integrator.DivergenceError, FloatingPointError) as exc:
                failed += 1
                consecutive += 1
                log.warning("epoch %d: batch at %d failed: %s", self.epoch, start, exc)
                if consecutive > 3:
                    raise TrainingAborted(
                        f"epoch {self.epoch}: {consecutive} consecutive batches diverged; last error: {exc}"
                    ) from exc
                continue
            consecutive = 0
            grads, _ = _clip(g.grads, cfg.grad_clip)
            self.opt.step(m.param_arrays(), grads)
            elbos.append(g.per_sample_elbo)
            recs.append(g.metrics.reconstruction * len(g.per_sample_elbo))
            kls.append(g.metrics.kl * len(g.per_sample_elbo))
            steps.append(g.steps)
            skipped += g.skipped
            clamps += g.clamp_events
            peak = max(peak, g.peak_states)
        all_elbo = np.concatenate(elbos) if elbos else np.array([np.nan])
        count = max(len(all_elbo), 1)
        rec = EpochRecord(
            epoch=self.epoch,
            elbo=float(np.mean(all_elbo)),
            elbo_stderr=float(np.std(all_elbo) / math.sqrt(count)),
            reconstruction=float(sum(recs) / count),
            kl=float(sum(kls) / count),
            mean_steps=float(np.mean(steps)) if steps else 0.0,
            clamp_events=clamps,
            skipped=skipped,
            failed_batches=failed,
            peak_states=peak,
            dt=m.flow_cfg.initial_dt,
            stability_bound=m.flow_cfg.stability_bound,
            wall_time=time.perf_counter() - t0,
        )
        self.epoch += 1
        self.log.records.append(rec)
        log.info("epoch %d elbo %.5f (+-%.5f)", rec.epoch, rec.elbo, rec.elbo_stderr)
        return rec

    def fit(self, X, until_epoch: int | None = None) -> "Trainer":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or len(X) == 0:
            raise ValueError("training data must be a nonempty 2-d array")
        end = self.cfg.epochs if until_epoch is None else until_epoch
        while self.epoch < end:
            self.run_epoch(X)
        return self

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "rng": self.rng.get_state(),
            "optimizer": self.opt.state_dict(),
            "requested_dt": self.requested_dt,
        }

    def load_state_dict(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.rng = Rng.from_state(state["rng"])
        self.opt.load_state_dict(state["optimizer"])
        self.requested_dt = state["requested_dt"]


def train(m: SgnModel, data, cfg: TrainConfig) -> tuple[SgnModel, TrainLog]:
    """Train a copy of ``m``; ``data`` is an array of rows or a ``Dataset``."""
    X = getattr(data, "points", data)
    trainer = Trainer(m.copy(), cfg)
    if cfg.epochs:
        trainer.fit(X)
    return trainer.model, trainer.log
