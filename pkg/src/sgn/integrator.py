"""Explicit leapfrog stepping, flow maps, exact inverses and adaptive step control.

All stepping functions work on arrays ``q, p`` of shape ``(..., d)`` so a whole
batch of independent states advances together; the ``PhaseState`` wrappers
are the single-trajectory API.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import PhaseState

__all__ = [
    "DivergenceError",
    "FlowConfig",
    "StepTrace",
    "leapfrog_step",
    "flow",
    "flow_arrays",
    "inverse_flow",
    "inverse_flow_arrays",
    "local_error_estimate",
    "adapt_step",
    "trajectory",
]

# Sign of the closing half-kick. Only ever changed by mutation tests.
_KICK_SIGN = 1.0


class DivergenceError(FloatingPointError):
    """A flow produced non-finite coordinates."""

    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


@dataclass(frozen=True)
class FlowConfig:
    total_time: float = 1.0
    initial_dt: float = 0.1
    mode: str = "fixed"  # "fixed" or "adaptive"
    tolerance: float | None = None
    stability_bound: float | None = None
    max_steps: int = 1_000_000
    error_every: int = 1

    def __post_init__(self):
        if not (self.total_time > 0 and self.initial_dt > 0):
            raise ValueError("total_time and initial_dt must be positive")
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"unknown flow mode {self.mode!r}")
        if self.mode == "adaptive" and not (self.tolerance and self.tolerance > 0):
            raise ValueError("adaptive mode needs a positive tolerance")
        if self.stability_bound is not None:
            if not self.stability_bound > 0:
                raise ValueError("stability_bound must be positive")
            limit = 2.0 / math.sqrt(self.stability_bound)
            if self.initial_dt >= limit:
                raise ValueError(
                    f"initial_dt={self.initial_dt} violates the stability guard dt < 2/sqrt(L_H) = {limit:.6g}"
                )
        if self.max_steps < math.ceil(self.total_time / self.initial_dt):
            raise ValueError("max_steps is smaller than ceil(total_time / initial_dt)")
        if self.error_every < 1:
            raise ValueError("error_every must be >= 1")

    @property
    def dt_limit(self) -> float:
        """Step size reached by the stability clamp, or inf without a bound."""
        if self.stability_bound is None:
            return math.inf
        return 1.9 / math.sqrt(self.stability_bound)

    def fixed_steps(self) -> tuple[int, float]:
        n = max(1, round(self.total_time / self.initial_dt))
        if self.stability_bound is not None:
            limit = 2.0 / math.sqrt(self.stability_bound)
            while self.total_time / n >= limit:
                n += 1
        return n, self.total_time / n

    def with_stability(self, bound: float | None) -> tuple["FlowConfig", bool]:
        """Copy with a new ``L_H``; shrinks ``initial_dt`` to the clamp if needed."""
        if bound is None or bound <= 0:
            return replace(self, stability_bound=None), False
        dt = self.initial_dt
        clamped = dt >= 2.0 / math.sqrt(bound)
        if clamped:
            dt = 1.9 / math.sqrt(bound)
        max_steps = max(self.max_steps, math.ceil(self.total_time / dt))
        return replace(self, initial_dt=dt, stability_bound=bound, max_steps=max_steps), clamped

    def to_dict(self) -> dict:
        return {
            "total_time": self.total_time,
            "initial_dt": self.initial_dt,
            "mode": self.mode,
            "tolerance": self.tolerance,
            "stability_bound": self.stability_bound,
            "max_steps": self.max_steps,
            "error_every": self.error_every,
        }


@dataclass
class StepTrace:
    accepted_dts: list = field(default_factory=list)
    error_estimates: list = field(default_factory=list)
    clamp_events: int = 0
    rejected: int = 0

    @property
    def n_steps(self) -> int:
        return len(self.accepted_dts)

    def total_time(self) -> float:
        return math.fsum(self.accepted_dts)


def _step(H, q, p, dt, gq=None):
    """One leapfrog step on arrays; returns ``(q1, p1, grad_q at q1)``.

    ``gq`` may carry the potential gradient at ``(q, p)`` from the previous
    step, which is valid for separable ``H``.
    """
    half = 0.5 * dt
    if gq is None:
        gq = H.grad_q(q, p)
    p_half = p - half * gq
    q1 = q + dt * H.grad_p(q, p_half)
    gq1 = H.grad_q(q1, p_half)
    p1 = p_half - _KICK_SIGN * half * gq1
    return q1, p1, gq1


def _finite(q, p) -> bool:
    return bool(np.isfinite(q).all() and np.isfinite(p).all())


def leapfrog_step(H, z: PhaseState, dt: float) -> PhaseState:
    """Half kick, drift, half kick. Negative ``dt`` steps backwards."""
    if dt == 0:
        raise ValueError("dt must be nonzero")
    with np.errstate(over="ignore", invalid="ignore"):
        q1, p1, _ = _step(H, z.q, z.p, dt)
    if not _finite(q1, p1):
        raise DivergenceError(0)
    return PhaseState(q1, p1)


def local_error_estimate(H, z: PhaseState, dt: float) -> float:
    """``|Phi_{2dt}(z) - Phi_dt(Phi_dt(z))|`` in the Euclidean norm on R^{2d}.

    Returns ``inf`` if either branch diverges, which forces a rejection.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    return _local_error(H, np.asarray(z.q), np.asarray(z.p), dt)[0]


def _local_error(H, q, p, dt, gq=None):
    with np.errstate(over="ignore", invalid="ignore"):
        q2, p2, _ = _step(H, q, p, 2 * dt, gq)
        q1, p1, g1 = _step(H, q, p, dt, gq)
        q11, p11, g11 = _step(H, q1, p1, dt, g1 if H.separable else None)
        err = math.sqrt(float(np.sum((q2 - q11) ** 2) + np.sum((p2 - p11) ** 2)))
    if not math.isfinite(err):
        return math.inf, (q1, p1, g1)
    return err, (q1, p1, g1)


def _adapt(dt_old, err, tau, stability_bound):
    if err == 0:
        factor = 1.5
    else:
        factor = min(1.5, max(0.5, 0.9 * (tau / err) ** (1.0 / 3.0)))
    dt = dt_old * factor
    if stability_bound is not None and dt >= 2.0 / math.sqrt(stability_bound):
        return 1.9 / math.sqrt(stability_bound), True
    return dt, False


def adapt_step(dt_old: float, err: float, tau: float, stability_bound: float | None = None) -> float:
    """``dt * min(1.5, max(0.5, 0.9 (tau/err)^(1/3)))`` followed by the stability clamp."""
    if not (dt_old > 0 and tau > 0 and err >= 0):
        raise ValueError("need dt_old > 0, tau > 0, err >= 0")
    return _adapt(dt_old, err, tau, stability_bound)[0]


def _fixed_flow(H, q, p, cfg: FlowConfig, store: int, strict: bool):
    n, dt = cfg.fixed_steps()
    if n > cfg.max_steps:
        raise RuntimeError(f"fixed flow needs {n} steps, max_steps is {cfg.max_steps}")
    states = {0: (q, p)} if store else None
    gq = None
    reuse = H.separable
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            q, p, g = _step(H, q, p, dt, gq)
            gq = g if reuse else None
            if strict and not _finite(q, p):
                raise DivergenceError(i)
            if store and (i + 1) % store == 0:
                states[i + 1] = (q, p)
    return q, p, StepTrace([dt] * n), states


def _adaptive_flow(H, q, p, cfg: FlowConfig, store: int):
    if q.ndim != 1:
        raise ValueError("adaptive flows run one trajectory at a time")
    T, tau, bound = cfg.total_time, cfg.tolerance, cfg.stability_bound
    trace = StepTrace()
    states = {0: (q, p)} if store else None
    t, dt = 0.0, min(cfg.initial_dt, cfg.dt_limit)
    attempts = 0
    gq = None
    while t < T:
        if attempts >= cfg.max_steps:
            raise RuntimeError(f"adaptive flow exceeded max_steps={cfg.max_steps}")
        attempts += 1
        last = dt >= T - t
        h = T - t if last else dt
        k = len(trace.accepted_dts)
        if k % cfg.error_every == 0:
            err, (q1, p1, g1) = _local_error(H, q, p, h, gq)
            if err > tau:
                trace.rejected += 1
                dt, clamped = _adapt(h, err, tau, bound)
                trace.clamp_events += clamped
                if dt < 1e-14 * T:
                    raise DivergenceError(k, f"step size underflow at step {k}")
                continue
            trace.error_estimates.append(err)
            dt, clamped = _adapt(h, err, tau, bound) if not last else (dt, False)
            trace.clamp_events += clamped
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                q1, p1, g1 = _step(H, q, p, h, gq)
        if not _finite(q1, p1):
            raise DivergenceError(k)
        q, p = q1, p1
        gq = g1 if H.separable else None
        trace.accepted_dts.append(h)
        if store and len(trace.accepted_dts) % store == 0:
            states[len(trace.accepted_dts)] = (q, p)
        t = T if last else t + h
    return q, p, trace, states


def flow_arrays(H, q, p, cfg: FlowConfig, store: int = 0, strict=True):
    """Flow raw arrays. Returns ``(qT, pT, trace, states)``.

    With ``store=k > 0``, ``states`` maps step index to ``(q, p)`` for index 0
    and every k-th step (``k=1`` keeps the whole trajectory). With
    ``strict=False`` a fixed-step batch keeps going past non-finite rows so
    the caller can drop them.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if cfg.mode == "fixed":
        return _fixed_flow(H, q, p, cfg, store, strict)
    return _adaptive_flow(H, q, p, cfg, store)


def flow(H, z0: PhaseState, cfg: FlowConfig) -> tuple[PhaseState, StepTrace]:
    """Integrate ``z0`` over ``cfg.total_time``; the step sizes sum to it exactly."""
    q, p, trace, _ = flow_arrays(H, z0.q, z0.p, cfg)
    return PhaseState(q, p), trace


def inverse_flow_arrays(H, q, p, accepted_dts, strict=True):
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    gq = None
    reuse = H.separable
    with np.errstate(over="ignore", invalid="ignore"):
        for i, dt in enumerate(reversed(accepted_dts)):
            q, p, g = _step(H, q, p, -dt, gq)
            gq = g if reuse else None
            if strict and not _finite(q, p):
                raise DivergenceError(len(accepted_dts) - 1 - i)
    return q, p


def inverse_flow(H, zT: PhaseState, accepted_dts) -> PhaseState:
    """Replay ``accepted_dts`` backwards with negated steps."""
    q, p = inverse_flow_arrays(H, zT.q, zT.p, accepted_dts)
    return PhaseState(q, p)


def trajectory(H, q, p, dt: float, n_steps: int):
    """Fixed-step trajectory with every state recorded.

    Returns arrays of shape ``(n_steps + 1, *q.shape)``. Stops early (with the
    remaining rows left as NaN) once the state stops being finite.
    """
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    qs = np.full((n_steps + 1, *q.shape), np.nan)
    ps = np.full((n_steps + 1, *p.shape), np.nan)
    qs[0], ps[0] = q, p
    gq = None
    reuse = H.separable
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, n_steps + 1):
            q, p, g = _step(H, q, p, dt, gq)
            gq = g if reuse else None
            qs[i], ps[i] = q, p
            if not _finite(q, p):
                break
    return qs, ps
