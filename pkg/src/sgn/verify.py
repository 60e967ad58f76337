"""Numerical property checks for the flow, networks and model.

Each ``check_*`` function returns a :class:`VerifyReport`; failures are
reported, never raised. All randomness is seeded so reports are
reproducible byte for byte (timings are kept out of the report body).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import digamma, gammaln

from .core import FreeParticle, HarmonicOscillator, Pendulum, PhaseState, Rng, lu_det
from .integrator import (
    DivergenceError,
    FlowConfig,
    flow_arrays,
    inverse_flow_arrays,
    trajectory,
)
from .net import (
    SeparableHamiltonianNet,
    init_mlp,
    input_grad_vjp,
    mlp_forward,
    mlp_input_grad,
    mlp_param_grad,
)

__all__ = [
    "VerifyReport",
    "fd_jacobian",
    "symplectic_form",
    "knn_entropy",
    "check_unit_jacobian",
    "check_symplectic_form",
    "check_reversibility",
    "check_energy_drift",
    "check_convergence_order",
    "check_stability_boundary",
    "check_entropy_preservation",
    "check_gradient_suite",
    "check_adaptive_error_scaling",
    "run_all",
]


@dataclass
class VerifyReport:
    name: str
    passed: bool
    measured: dict
    tolerance: dict
    context: dict = field(default_factory=dict)
    property: str = ""
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=_jsonable)

    @classmethod
    def from_dict(cls, d: dict) -> "VerifyReport":
        return cls(**d)


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x)}")


def _context(H, cfg=None, **extra):
    ctx = {"hamiltonian": type(H).__name__, "separable": bool(H.separable)}
    if cfg is not None:
        ctx.update(total_time=cfg.total_time, dt=cfg.initial_dt, mode=cfg.mode)
    ctx.update(extra)
    return ctx


def _vec(z) -> np.ndarray:
    return z.as_vector() if isinstance(z, PhaseState) else np.asarray(z, dtype=np.float64)


def _replay(H, q, p, dts):
    """Step forward along a fixed list of step sizes."""
    return inverse_flow_arrays(H, q, p, [-dt for dt in reversed(dts)])


def fd_jacobian(H, z0, cfg: FlowConfig, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of the flow map at ``z0``.

    Adaptive configurations replay the unperturbed step sequence, so the
    result is the Jacobian of the composed steps actually taken.
    """
    z0 = _vec(z0)
    n = z0.size
    d = n // 2
    E = h * np.eye(n)
    P = np.concatenate([z0 + E, z0 - E])
    # divide by the step actually realized in floating point
    steps = np.diag(P[:n] - P[n:])
    if cfg.mode == "fixed":
        q, p, _, _ = flow_arrays(H, P[:, :d], P[:, d:], cfg)
    else:
        _, _, trace, _ = flow_arrays(H, z0[:d], z0[d:], cfg)
        q, p = _replay(H, P[:, :d], P[:, d:], trace.accepted_dts)
    Y = np.concatenate([q, p], axis=1)
    return ((Y[:n] - Y[n:]) / steps[:, None]).T


def symplectic_form(d: int) -> np.ndarray:
    J = np.zeros((2 * d, 2 * d))
    J[:d, d:] = np.eye(d)
    J[d:, :d] = -np.eye(d)
    return J


def _separability_note(H) -> str:
    if H.separable:
        return ""
    return "non-separable Hamiltonian: explicit leapfrog is not exactly symplectic here"


def check_unit_jacobian(H, z0, cfg: FlowConfig, h: float = 1e-5, tol: float = 1e-5) -> VerifyReport:
    z0 = _vec(z0)
    if z0.size > 16:
        raise ValueError("dense Jacobian checks are limited to 2d <= 16")
    try:
        D = fd_jacobian(H, z0, cfg, h)
    except DivergenceError as exc:
        return VerifyReport("unit_jacobian", False, {"error": str(exc)}, {"abs_det_minus_1": tol}, _context(H, cfg))
    dev = abs(lu_det(D) - 1.0)
    return VerifyReport(
        "unit_jacobian",
        bool(dev < tol),
        {"abs_det_minus_1": dev},
        {"abs_det_minus_1": tol},
        _context(H, cfg, d=z0.size // 2, fd_step=h),
        "volume preservation",
        _separability_note(H),
    )


def check_symplectic_form(H, z0, cfg: FlowConfig, h: float = 1e-5, tol: float = 1e-5) -> VerifyReport:
    z0 = _vec(z0)
    if z0.size > 16:
        raise ValueError("dense Jacobian checks are limited to 2d <= 16")
    try:
        D = fd_jacobian(H, z0, cfg, h)
    except DivergenceError as exc:
        return VerifyReport("symplectic_form", False, {"error": str(exc)}, {"max_abs": tol}, _context(H, cfg))
    J = symplectic_form(z0.size // 2)
    dev = float(np.max(np.abs(D.T @ J @ D - J)))
    return VerifyReport(
        "symplectic_form",
        bool(dev < tol),
        {"max_abs": dev},
        {"max_abs": tol},
        _context(H, cfg, d=z0.size // 2, fd_step=h),
        "canonical symplectic form preserved",
        _separability_note(H),
    )


def check_reversibility(H, z0, cfg: FlowConfig, tol: float = 1e-9) -> VerifyReport:
    z0 = _vec(z0)
    d = z0.size // 2
    try:
        q, p, trace, _ = flow_arrays(H, z0[:d], z0[d:], cfg)
        q0, p0 = inverse_flow_arrays(H, q, p, trace.accepted_dts)
    except DivergenceError as exc:
        return VerifyReport("reversibility", False, {"error": str(exc)}, {"inf_norm": tol}, _context(H, cfg))
    err = float(np.max(np.abs(np.concatenate([q0, p0]) - z0)))
    return VerifyReport(
        "reversibility",
        bool(err < tol),
        {"inf_norm": err, "steps": trace.n_steps},
        {"inf_norm": tol},
        _context(H, cfg, d=d),
        "time reversibility",
        _separability_note(H),
    )


def _max_drift(H, z0, dt, steps):
    d = z0.size // 2
    qs, ps = trajectory(H, z0[:d], z0[d:], dt, steps)
    if not (np.isfinite(qs[-1]).all() and np.isfinite(ps[-1]).all()):
        return None
    drift = np.abs(H.value(qs, ps) - H.value(qs[0], ps[0]))
    w = max(steps // 10, 1)
    return float(drift.max()), float(drift[1 : w + 1].max()), float(drift[-w:].max())


def check_energy_drift(H, z0, dt_list, steps: int, ratio_range=(3.5, 4.5), growth: float = 1.5) -> VerifyReport:
    """Max energy error per step size, halving ratios, and a no-secular-growth test.

    Bounded means the largest error in the final tenth of the run is at most
    ``growth`` times the largest error in the first tenth.
    """
    z0 = _vec(z0)
    drifts, bounded, ratios = [], [], []
    for dt in dt_list:
        res = _max_drift(H, z0, dt, steps)
        if res is None:
            return VerifyReport(
                "energy_drift", False, {"error": f"diverged at dt={dt}"}, {}, _context(H, steps=steps)
            )
        total, early, late = res
        drifts.append(total)
        bounded.append(bool(late <= growth * early + 1e-14))
    for a, b in zip(drifts, drifts[1:]):
        ratios.append(a / b if b > 0 else (1.0 if a == 0 else math.inf))
    ratio_ok = all(ratio_range[0] <= r <= ratio_range[1] for r in ratios)
    if all(dr == 0 for dr in drifts):
        ratio_ok = True
    return VerifyReport(
        "energy_drift",
        bool(ratio_ok and all(bounded)),
        {"max_drift": drifts, "ratios": ratios, "bounded": bounded},
        {"ratio_range": list(ratio_range), "late_over_early_max": growth},
        _context(H, dts=list(dt_list), steps=steps, z0=z0.tolist()),
        "energy error O(dt^2) without secular growth",
        f"horizon truncated to {steps} steps",
    )


def check_convergence_order(H, z0, T: float, dt_list, slope_range=(1.9, 2.1)) -> VerifyReport:
    if not hasattr(H, "exact_flow"):
        raise ValueError("convergence order needs a Hamiltonian with a closed-form flow")
    z0 = _vec(z0)
    d = z0.size // 2
    qe, pe = H.exact_flow(z0[:d], z0[d:], T)
    exact = np.concatenate([qe, pe])
    errors = []
    for dt in dt_list:
        q, p, _, _ = flow_arrays(H, z0[:d], z0[d:], FlowConfig(T, dt))
        errors.append(float(np.linalg.norm(np.concatenate([q, p]) - exact)))
    scale = max(1.0, float(np.linalg.norm(exact)))
    if max(errors) < 1e-12 * scale * max(1.0, T / min(dt_list)):
        return VerifyReport(
            "convergence_order",
            True,
            {"errors": errors, "slope": None},
            {"slope_range": list(slope_range)},
            _context(H, T=T, dts=list(dt_list)),
            "global error O(T dt^2)",
            "exact: integrator reproduces the flow to round-off",
        )
    slope = float(np.polyfit(np.log(dt_list), np.log(errors), 1)[0])
    return VerifyReport(
        "convergence_order",
        bool(slope_range[0] <= slope <= slope_range[1]),
        {"errors": errors, "slope": slope},
        {"slope_range": list(slope_range)},
        _context(H, T=T, dts=list(dt_list)),
        "global error O(T dt^2)",
    )


def check_stability_boundary(
    omega: float, dt_below: float, dt_above: float, steps: int = 100_000, above_steps: int = 10_000
) -> VerifyReport:
    """Bounded below ``dt * omega = 2``, blow-up above it, from ``|z0| = 1``."""
    tol = {"below_max_norm": 10.0, "above_min_norm": 1e6}
    ctx = {"omega": omega, "dt_below": dt_below, "dt_above": dt_above, "steps": steps, "above_steps": above_steps}
    if not (dt_below * omega < 2.0 < dt_above * omega):
        return VerifyReport(
            "stability_boundary",
            False,
            {"error": "configuration error: dt_below * omega < 2 < dt_above * omega is required"},
            tol,
            ctx,
            "leapfrog stability dt * omega < 2",
        )
    H = HarmonicOscillator(omega)
    q0, p0 = np.array([1.0]), np.array([0.0])

    def peak(dt, n):
        qs, ps = trajectory(H, q0, p0, dt, n)
        norms = np.hypot(qs[:, 0], ps[:, 0])
        finite = np.isfinite(norms)
        blown = None if finite.all() else int(np.argmin(finite))
        return float(norms[finite].max()), blown

    below, below_blown = peak(dt_below, steps)
    above, above_blown = peak(dt_above, above_steps)
    return VerifyReport(
        "stability_boundary",
        bool(below_blown is None and below < 10.0 and (above_blown is not None or above > 1e6)),
        {
            "below_max_norm": below,
            "above_max_finite_norm": above,
            "above_nonfinite_at_step": above_blown,
        },
        tol,
        ctx,
        "leapfrog stability dt * omega < 2",
    )


def knn_entropy(x, k: int = 5) -> float:
    """Kozachenko-Leonenko differential entropy estimate in nats."""
    x = np.asarray(x, dtype=np.float64)
    n, dim = x.shape
    if k >= n:
        raise ValueError("k must be smaller than the number of samples")
    dist, _ = cKDTree(x).query(x, k=k + 1)
    eps = dist[:, k]
    log_unit_ball = 0.5 * dim * math.log(math.pi) - gammaln(0.5 * dim + 1.0)
    return float(digamma(n) - digamma(k) + log_unit_ball + dim * np.mean(np.log(eps)))


def check_entropy_preservation(
    model_or_h, cfg: FlowConfig | None = None, n: int = 20_000, k: int = 5, seed: int = 0, tol: float = 0.05
) -> VerifyReport:
    """Entropy of prior samples before and after the flow."""
    H = getattr(model_or_h, "hamiltonian", model_or_h)
    cfg = cfg or model_or_h.flow_cfg
    d = getattr(model_or_h, "latent_half_dim", None) or H.dim
    Z0 = Rng(seed).standard_normal((n, 2 * d))
    q, p, _, _ = flow_arrays(H, Z0[:, :d], Z0[:, d:], cfg)
    ZT = np.concatenate([q, p], axis=1)
    h0, hT = knn_entropy(Z0, k), knn_entropy(ZT, k)
    diff = abs(hT - h0)
    return VerifyReport(
        "entropy_preservation",
        bool(diff < tol),
        {"entropy_z0": h0, "entropy_zT": hT, "abs_diff": diff},
        {"abs_diff": tol},
        _context(H, cfg, n=n, k=k, seed=seed),
        "latent entropy preserved by the flow",
    )


def _rel_error(a, b, floor):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor), initial=0.0))


def _fd_params(net, fn, indices, h):
    out = []
    for arr, idx in indices:
        a = net.arrays()[arr]
        old = a[idx]
        a[idx] = old + h
        fp = fn()
        a[idx] = old - h
        fm = fn()
        a[idx] = old
        out.append((fp - fm) / (2 * h))
    return np.array(out)


def check_gradient_suite(
    n_nets: int = 200,
    depths=(1, 2, 3),
    widths=(4, 8, 16, 32),
    params_per_net: int = 12,
    seed: int = 0,
    tol_first: float = 1e-5,
    tol_second: float = 1e-4,
    floor: float = 1e-4,
) -> VerifyReport:
    """Input, parameter and second-order gradients against central differences.

    Relative error is ``|a - b| / max(|a|, |b|, floor)``; each net checks
    every input coordinate and ``params_per_net`` random parameters.
    """
    rng = Rng(seed)
    worst_in = worst_par = worst_second = 0.0
    for i in range(n_nets):
        depth = depths[i % len(depths)]
        width = widths[(i // len(depths)) % len(widths)]
        d = 1 + int(rng.integers(4))
        act = "tanh" if i % 2 == 0 else "softplus"
        net = init_mlp([d] + [width] * depth + [1], rng, act)
        for b in net.biases:
            b += 0.3 * rng.standard_normal(b.shape)
        x = rng.standard_normal(d)
        u = rng.standard_normal(d)

        def f():
            return float(mlp_forward(net, x)[0][0])

        def s():
            return float(mlp_input_grad(net, x) @ u)

        h1, h2 = 1e-6, 1e-5
        g = mlp_input_grad(net, x)
        E = np.eye(d)
        fd_in = np.array(
            [(mlp_forward(net, x + h1 * e)[0][0] - mlp_forward(net, x - h1 * e)[0][0]) / (2 * h1) for e in E]
        )
        worst_in = max(worst_in, _rel_error(g, fd_in, floor))

        arrays = net.arrays()
        sizes = [a.size for a in arrays]
        picks = []
        for _ in range(params_per_net):
            j = int(rng.integers(len(arrays)))
            picks.append((j, np.unravel_index(int(rng.integers(sizes[j])), arrays[j].shape)))
        bundle = mlp_param_grad(net, x)
        analytic = np.array([bundle.arrays()[j][idx] for j, idx in picks])
        worst_par = max(worst_par, _rel_error(analytic, _fd_params(net, f, picks, h1), floor))

        hvp, b2 = input_grad_vjp(net, x, u)
        analytic2 = np.array([b2.arrays()[j][idx] for j, idx in picks])
        worst_second = max(worst_second, _rel_error(analytic2, _fd_params(net, s, picks, h2), floor))
        fd_h = np.array([(mlp_input_grad(net, x + h2 * e) @ u - mlp_input_grad(net, x - h2 * e) @ u) / (2 * h2) for e in E])
        worst_second = max(worst_second, _rel_error(hvp, fd_h, floor))
    measured = {"first_order_input": worst_in, "first_order_param": worst_par, "second_order": worst_second}
    passed = worst_in < tol_first and worst_par < tol_first and worst_second < tol_second
    return VerifyReport(
        "gradient_suite",
        bool(passed),
        measured,
        {"first_order": tol_first, "second_order": tol_second, "floor": floor},
        {"n_nets": n_nets, "depths": list(depths), "widths": list(widths), "seed": seed},
        "analytic network derivatives",
    )


def check_adaptive_error_scaling(
    taus=(1e-4, 1e-6, 1e-8),
    T: float = 10.0,
    z0=(1.0, 0.0),
    ref_dt: float = 1e-5,
    band: float = 10.0,
) -> VerifyReport:
    """Final-state error of the adaptive controller against a fine fixed-step run.

    Linear scaling holds when ``error / tau`` stays within a factor ``band``
    across the sweep. The fitted log-log slope is reported as well.
    """
    H = Pendulum()
    z0 = np.asarray(z0, dtype=np.float64)
    qr, pr, _, _ = flow_arrays(H, z0[:1], z0[1:], FlowConfig(T, ref_dt, max_steps=10**8))
    errors, steps = [], []
    for tau in taus:
        q, p, trace, _ = flow_arrays(H, z0[:1], z0[1:], FlowConfig(T, 0.1, "adaptive", tau, max_steps=10**7))
        errors.append(float(np.hypot(q - qr, p - pr)[0]))
        steps.append(trace.n_steps)
    normalized = [e / t for e, t in zip(errors, taus)]
    spread = max(normalized) / min(normalized)
    slope = float(np.polyfit(np.log(taus), np.log(errors), 1)[0])
    return VerifyReport(
        "adaptive_error_scaling",
        bool(spread <= band),
        {"errors": errors, "error_over_tau": normalized, "spread": spread, "slope": slope, "steps": steps},
        {"spread": band},
        {"hamiltonian": "Pendulum", "T": T, "z0": z0.tolist(), "taus": list(taus), "reference_dt": ref_dt},
        "adaptive global error O(tau)",
    )


def _random_hamiltonian(d, seed, width=16, depth=2):
    return SeparableHamiltonianNet.init(d, [width] * depth, Rng(seed))


def run_all(profile: str = "quick") -> list[VerifyReport]:
    """Run the standard battery with fixed seeds.

    ``quick`` uses reduced sample counts and horizons; ``full`` uses the
    acceptance-scale settings and adds the adaptive error sweep.
    """
    if profile not in ("quick", "full"):
        raise ValueError("profile must be 'quick' or 'full'")
    full = profile == "full"
    reports = []
    rng = Rng(2024)
    cfg = FlowConfig(1.0, 0.01)
    for i, d in enumerate((1, 2, 4) * (7 if full else 1)):
        H = _random_hamiltonian(d, 100 + i)
        z0 = rng.standard_normal(2 * d)
        reports.append(check_unit_jacobian(H, z0, cfg))
        reports.append(check_symplectic_form(H, z0, cfg))
    for i in range(100 if full else 10):
        d = (1, 2, 4)[i % 3]
        H = _random_hamiltonian(d, 500 + i)
        T = 10.0 if i % 2 else 1.0
        reports.append(check_reversibility(H, rng.standard_normal(2 * d), FlowConfig(T, 0.05)))
    reports.append(check_reversibility(HarmonicOscillator(1.0), [1.0, 0.0], FlowConfig(10.0, 0.05)))
    reports.append(check_energy_drift(HarmonicOscillator(1.0), [1.0, 0.0], [0.1, 0.05], 10_000))
    reports.append(check_energy_drift(Pendulum(), [1.0, 0.0], [0.01], 1_000_000 if full else 50_000))
    dts = [0.1, 0.05, 0.025, 0.0125]
    reports.append(check_convergence_order(HarmonicOscillator(1.0), [1.0, 0.0], 1.0, dts))
    reports.append(check_convergence_order(HarmonicOscillator(3.0), [1.0, 0.0], 1.0, dts))
    reports.append(check_convergence_order(FreeParticle(), [0.0, 1.0], 1.0, dts))
    reports.append(check_stability_boundary(1.0, 1.9, 2.1, 100_000 if full else 20_000))
    reports.append(check_stability_boundary(2.0, 0.9, 1.1, 100_000 if full else 20_000))
    reports.append(
        check_entropy_preservation(_random_hamiltonian(1, 7), FlowConfig(1.0, 0.05), n=20_000 if full else 5_000)
    )
    reports.append(check_gradient_suite(n_nets=200 if full else 30))
    if full:
        reports.append(check_adaptive_error_scaling())
    return reports
