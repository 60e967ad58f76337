import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import sgn.integrator as integrator
from sgn.core import Constant, FreeParticle, HarmonicOscillator, Pendulum, PhaseState, Quadratic, Rng
from sgn.integrator import (
    DivergenceError,
    FlowConfig,
    adapt_step,
    flow,
    flow_arrays,
    inverse_flow,
    leapfrog_step,
    local_error_estimate,
    trajectory,
)
from sgn.net import SeparableHamiltonianNet
from sgn.verify import fd_jacobian, symplectic_form


def z(q, p):
    return PhaseState(np.atleast_1d(np.asarray(q, float)), np.atleast_1d(np.asarray(p, float)))


def neural(d, seed, width=16, depth=2):
    return SeparableHamiltonianNet.init(d, [width] * depth, Rng(seed))


# FlowConfig


def test_config_rejects_step_beyond_stability_guard():
    with pytest.raises(ValueError, match="stability"):
        FlowConfig(1.0, 2.0, stability_bound=1.0)
    FlowConfig(1.0, 1.99, stability_bound=1.0)


def test_config_rejects_small_max_steps():
    with pytest.raises(ValueError):
        FlowConfig(1.0, 0.1, max_steps=9)
    FlowConfig(1.0, 0.1, max_steps=10)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"total_time": 0.0},
        {"initial_dt": -0.1},
        {"mode": "rk4"},
        {"mode": "adaptive"},
        {"mode": "adaptive", "tolerance": -1.0},
        {"stability_bound": 0.0},
        {"error_every": 0},
    ],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        FlowConfig(**kwargs)


def test_fixed_steps_round_and_rescale():
    n, dt = FlowConfig(1.0, 0.3).fixed_steps()
    assert n == 3 and dt == pytest.approx(1 / 3)
    n, dt = FlowConfig(2 * math.pi, 0.01).fixed_steps()
    assert n == 628 and n * dt == pytest.approx(2 * math.pi, rel=1e-15)


def test_with_stability_clamps_to_guard():
    cfg, clamped = FlowConfig(1.0, 0.5).with_stability(25.0)
    assert clamped and cfg.initial_dt == pytest.approx(1.9 / 5)
    cfg, clamped = FlowConfig(1.0, 0.1).with_stability(25.0)
    assert not clamped and cfg.initial_dt == 0.1


# leapfrog_step


def test_leapfrog_harmonic_hand_values():
    # p_half = -0.05, q1 = 1 + 0.1 * (-0.05), p1 = -0.05 - 0.05 * 0.995
    out = leapfrog_step(HarmonicOscillator(1.0), z(1, 0), 0.1)
    assert out.q[0] == pytest.approx(0.995, abs=1e-15)
    assert out.p[0] == pytest.approx(-0.09975, abs=1e-15)


@pytest.mark.parametrize("dt", [0.1, -3.0, 1e3])
def test_leapfrog_constant_is_identity(dt):
    s = z([0.3, -2.0], [1.0, 4.0])
    out = leapfrog_step(Constant(5.0), s, dt)
    assert np.array_equal(out.as_vector(), s.as_vector())


def test_leapfrog_free_particle_drift():
    out = leapfrog_step(FreeParticle(), z(0, 1), 0.5)
    assert out.q[0] == 0.5 and out.p[0] == 1.0


def test_leapfrog_rejects_zero_dt():
    with pytest.raises(ValueError):
        leapfrog_step(FreeParticle(), z(0, 1), 0.0)


def test_leapfrog_negative_dt_inverts_step():
    H = neural(2, 4)
    s = z([0.2, -0.4], [0.9, 0.1])
    back = leapfrog_step(H, leapfrog_step(H, s, 0.1), -0.1)
    assert np.max(np.abs(back.as_vector() - s.as_vector())) < 1e-14


def test_leapfrog_divergence_raises():
    with pytest.raises(DivergenceError):
        leapfrog_step(HarmonicOscillator(1e10), z(1e300, 0), 1.0)


def test_kick_order_uses_half_step_momentum():
    # H = p^4/4 + q^2/2 is separable but nonlinear in p: the drift must use p_half
    class Quartic:
        separable = True

        def grad_q(self, q, p=None):
            return q

        def grad_p(self, q, p):
            return p**3

    q, p, _ = integrator._step(Quartic(), np.array([1.0]), np.array([1.0]), 0.2)
    p_half = 1.0 - 0.1 * 1.0
    q1 = 1.0 + 0.2 * p_half**3
    assert q[0] == pytest.approx(q1, abs=1e-15)
    assert p[0] == pytest.approx(p_half - 0.1 * q1, abs=1e-15)


# flow


def test_harmonic_full_period():
    out, trace = flow(HarmonicOscillator(1.0), z(1, 0), FlowConfig(2 * math.pi, 0.01))
    assert np.max(np.abs(out.as_vector() - [1.0, 0.0])) < 1e-3
    assert abs(trace.total_time() - 2 * math.pi) <= 1e-12 * 2 * math.pi


def test_constant_flow_is_identity_and_trace_sums():
    s = z([1.0, 2.0], [3.0, 4.0])
    out, trace = flow(Constant(1.0), s, FlowConfig(1.7, 0.3))
    assert np.array_equal(out.as_vector(), s.as_vector())
    assert trace.total_time() == pytest.approx(1.7, rel=1e-15)


@pytest.mark.parametrize("dt", [0.01, 0.37, 1.0, 3.0])
def test_free_particle_exact(dt):
    out, _ = flow(FreeParticle(), z(0, 1), FlowConfig(3.0, dt))
    assert abs(out.q[0] - 3.0) < 1e-12 and out.p[0] == 1.0


def test_flow_reports_divergence_step():
    with pytest.raises(DivergenceError) as info:
        flow_arrays(HarmonicOscillator(1.0), np.array([1e300]), np.array([0.0]), FlowConfig(100.0, 2.5))
    assert info.value.step >= 0


def test_flow_max_steps_exceeded():
    cfg = FlowConfig(1.0, 0.1, "adaptive", 1e-12, max_steps=10)
    with pytest.raises(RuntimeError, match="max_steps"):
        flow_arrays(Pendulum(), np.ones(1), np.zeros(1), cfg)


def test_batched_flow_matches_rows():
    H = neural(2, 9)
    Z = Rng(1).standard_normal((6, 4))
    cfg = FlowConfig(1.0, 0.05)
    q, p, _, _ = flow_arrays(H, Z[:, :2], Z[:, 2:], cfg)
    for i in range(6):
        out, _ = flow(H, PhaseState.from_vector(Z[i]), cfg)
        assert np.allclose(out.as_vector(), np.concatenate([q[i], p[i]]), atol=1e-13)


def test_flow_store_keeps_requested_states():
    H = HarmonicOscillator(1.0)
    _, _, _, states = flow_arrays(H, np.ones(1), np.zeros(1), FlowConfig(1.0, 0.1), store=4)
    assert sorted(states) == [0, 4, 8]
    qs, ps = trajectory(H, np.ones(1), np.zeros(1), 0.1, 8)
    assert np.allclose(states[8][0], qs[8]) and np.allclose(states[8][1], ps[8])


def test_non_strict_batch_keeps_finite_rows():
    H = HarmonicOscillator(1.0)
    q0 = np.array([[1.0], [1e300]])
    q, p, _, _ = flow_arrays(H, q0, np.zeros((2, 1)), FlowConfig(50.0, 2.5), strict=False)
    assert np.isfinite(q[0]).all() and not np.isfinite(np.concatenate([q[1], p[1]])).all()


# inverse_flow


def test_harmonic_round_trip():
    H, s = HarmonicOscillator(1.0), z(1, 0)
    out, trace = flow(H, s, FlowConfig(10.0, 0.05))
    back = inverse_flow(H, out, trace.accepted_dts)
    assert np.max(np.abs(back.as_vector() - s.as_vector())) < 1e-9


def test_inverse_empty_trace_is_identity():
    s = z([1.5], [-0.5])
    assert np.array_equal(inverse_flow(HarmonicOscillator(1.0), s, []).as_vector(), s.as_vector())


def test_single_step_round_trip_fifty_seeds():
    worst = 0.0
    for seed in range(50):
        H = neural(2, seed)
        s = PhaseState.from_vector(Rng(seed + 1000).standard_normal(4))
        back = inverse_flow(H, leapfrog_step(H, s, 0.1), [0.1])
        worst = max(worst, np.max(np.abs(back.as_vector() - s.as_vector())))
    assert worst < 1e-10


def test_reversibility_hundred_random_cases():
    rng = Rng(77)
    worst = 0.0
    for i in range(100):
        d = (1, 2, 4)[i % 3]
        H = neural(d, 300 + i)
        T = float(rng.uniform(None, 0.1, 10.0))
        s = PhaseState.from_vector(rng.standard_normal(2 * d))
        out, trace = flow(H, s, FlowConfig(T, 0.05))
        back = inverse_flow(H, out, trace.accepted_dts)
        worst = max(worst, np.max(np.abs(back.as_vector() - s.as_vector())))
    assert worst < 1e-9


# symplecticity


@pytest.mark.parametrize("d", [1, 2, 4])
def test_neural_flow_is_symplectic(d):
    for seed in range(3):
        H = neural(d, 40 + seed)
        z0 = Rng(seed).standard_normal(2 * d)
        D = fd_jacobian(H, z0, FlowConfig(1.0, 0.01))
        J = symplectic_form(d)
        assert np.max(np.abs(D.T @ J @ D - J)) < 1e-5
        assert abs(np.linalg.det(D) - 1.0) < 1e-5


def test_non_separable_quadratic_breaks_volume_preservation():
    # explicit leapfrog on a coupled quadratic is not symplectic; measurable
    A = np.array([[1.0, 0.8], [0.8, 1.0]])
    D = fd_jacobian(Quadratic(A), np.array([0.5, 0.2]), FlowConfig(1.0, 0.1))
    assert abs(np.linalg.det(D) - 1.0) > 1e-3


# local error and the controller


def test_local_error_constant_is_zero():
    assert local_error_estimate(Constant(2.0), z([1, 2], [3, 4]), 0.3) == 0.0


def test_local_error_free_particle_is_tiny():
    assert local_error_estimate(FreeParticle(), z(0.3, 1.7), 0.25) < 1e-15


def test_local_error_third_order_ratio():
    H, s = HarmonicOscillator(1.0), z(1, 0)
    e = [local_error_estimate(H, s, dt) for dt in (0.1, 0.05, 0.025)]
    for a, b in zip(e, e[1:]):
        assert 6.0 <= a / b <= 10.0


def test_local_error_divergence_is_infinite():
    assert local_error_estimate(HarmonicOscillator(1e10), z(1e300, 1e300), 1.0) == math.inf


def test_local_error_rejects_nonpositive_dt():
    with pytest.raises(ValueError):
        local_error_estimate(FreeParticle(), z(0, 1), 0.0)


def test_adapt_step_hand_values():
    tau = 1e-6
    # (tau / 8 tau)^(1/3) = 1/2, so the factor is max(0.5, 0.45) = 0.5
    assert adapt_step(0.1, 8 * tau, tau) == 0.05
    assert adapt_step(0.1, 0.0, tau) == pytest.approx(0.15, rel=1e-15)
    assert adapt_step(0.1, tau, tau) == pytest.approx(0.09, rel=1e-15)


def test_adapt_step_stability_clamp():
    assert adapt_step(1.5, 0.0, 1e-6, stability_bound=1.0) == 1.9
    assert adapt_step(1.0, 1e-6, 1e-6, stability_bound=1.0) == pytest.approx(0.9)


def test_adapt_step_validation():
    with pytest.raises(ValueError):
        adapt_step(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        adapt_step(0.1, -1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-4, 1.0), st.floats(0.0, 1e3), st.floats(1e-10, 1.0))
def test_adapt_factor_stays_in_bounds(dt, ratio, tau):
    new = adapt_step(dt, ratio * tau, tau)
    assert 0.5 * dt * (1 - 1e-12) <= new <= 1.5 * dt * (1 + 1e-12)


def test_adaptive_flow_lands_on_total_time():
    cfg = FlowConfig(3.3, 0.2, "adaptive", 1e-6)
    out, trace = flow(Pendulum(), z(1.0, 0.0), cfg)
    assert abs(trace.total_time() - 3.3) <= 1e-12 * 3.3
    assert all(e <= 1e-6 for e in trace.error_estimates)
    assert trace.n_steps > 1


def test_adaptive_rejects_large_error_steps():
    _, trace = flow(Pendulum(), z(1.0, 0.0), FlowConfig(1.0, 1.0, "adaptive", 1e-9))
    assert trace.rejected > 0


def test_adaptive_clamp_events_counted():
    cfg = FlowConfig(5.0, 0.45, "adaptive", 1e-2, stability_bound=16.0)
    _, trace = flow(FreeParticle(), z(0.0, 1.0), cfg)
    assert trace.clamp_events > 0
    assert max(trace.accepted_dts) <= 1.9 / 4 + 1e-15


def test_adaptive_error_every_skips_estimates():
    cfg = FlowConfig(2.0, 0.05, "adaptive", 1e-5, error_every=4)
    _, trace = flow(Pendulum(), z(1.0, 0.0), cfg)
    assert len(trace.error_estimates) < trace.n_steps


def test_adaptive_rejects_batches():
    with pytest.raises(ValueError):
        flow_arrays(Pendulum(), np.ones((2, 1)), np.zeros((2, 1)), FlowConfig(1.0, 0.1, "adaptive", 1e-6))


def test_adaptive_is_reversible_along_its_trace():
    H = neural(1, 3)
    s = z(0.4, -0.8)
    out, trace = flow(H, s, FlowConfig(2.0, 0.1, "adaptive", 1e-7))
    back = inverse_flow(H, out, trace.accepted_dts)
    assert np.max(np.abs(back.as_vector() - s.as_vector())) < 1e-9


# long-run properties


def test_energy_drift_ratio_harmonic():
    H = HarmonicOscillator(1.0)
    drifts = []
    for dt in (0.1, 0.05):
        qs, ps = trajectory(H, np.ones(1), np.zeros(1), dt, 10_000)
        drifts.append(np.max(np.abs(H.value(qs, ps) - 0.5)))
    assert 3.5 <= drifts[0] / drifts[1] <= 4.5


def test_convergence_order_harmonic():
    H = HarmonicOscillator(1.0)
    dts = [0.1, 0.05, 0.025, 0.0125]
    errs = []
    for dt in dts:
        out, _ = flow(H, z(1, 0), FlowConfig(1.0, dt))
        errs.append(np.hypot(out.q[0] - math.cos(1.0), out.p[0] + math.sin(1.0)))
    slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
    assert 1.9 <= slope <= 2.1


@pytest.mark.parametrize("omega", [1.0, 2.0, 0.5])
def test_stability_threshold(omega):
    H = HarmonicOscillator(omega)
    qs, ps = trajectory(H, np.ones(1), np.zeros(1), 1.95 / omega, 20_000)
    assert np.max(np.hypot(qs, ps)) < 10
    qs, ps = trajectory(H, np.ones(1), np.zeros(1), 2.05 / omega, 10_000)
    norms = np.hypot(qs, ps)
    assert (~np.isfinite(norms)).any() or norms.max() > 1e6


def test_trajectory_records_every_state():
    qs, ps = trajectory(HarmonicOscillator(1.0), np.ones(1), np.zeros(1), 0.1, 5)
    assert qs.shape == (6, 1)
    assert qs[1, 0] == pytest.approx(0.995) and ps[1, 0] == pytest.approx(-0.09975)
