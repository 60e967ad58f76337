"""Phase-space types, analytic reference Hamiltonians, RNG and small linear algebra.

Every Hamiltonian in the package exposes the same batched interface: arrays
``q`` and ``p`` of shape ``(..., d)`` go in, and ``value`` returns shape
``(...)`` while ``grad_q`` / ``grad_p`` return arrays shaped like their input.
Separable Hamiltonians additionally expose ``potential_vjp`` and
``kinetic_vjp`` which the reverse-mode flow uses.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor

__all__ = [
    "PhaseState",
    "AnalyticHamiltonian",
    "Constant",
    "FreeParticle",
    "HarmonicOscillator",
    "Quadratic",
    "Pendulum",
    "analytic_value",
    "analytic_grad",
    "analytic_to_dict",
    "analytic_from_dict",
    "Rng",
    "rng_standard_normal",
    "lu_det",
]


@dataclass(frozen=True)
class PhaseState:
    """A point ``z = (q, p)`` in canonical coordinates."""

    q: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64, ndmin=1)
        p = np.array(self.p, dtype=np.float64, ndmin=1)
        if q.ndim != 1 or p.ndim != 1:
            raise ValueError("q and p must be 1-d vectors")
        if q.shape != p.shape or q.size == 0:
            raise ValueError(f"q and p must have equal length >= 1, got {q.size} and {p.size}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
            raise ValueError("phase state has non-finite entries")
        q.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "p", p)

    @property
    def dim(self) -> int:
        return self.q.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.p])

    @classmethod
    def from_vector(cls, z) -> "PhaseState":
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 1 or z.size % 2:
            raise ValueError("phase vector must be 1-d with even length")
        d = z.size // 2
        return cls(z[:d], z[d:])


# ---------------------------------------------------------------------------
# Analytic Hamiltonians


class AnalyticHamiltonian:
    """Base class for closed-form Hamiltonians.

    ``dim`` is the half dimension d, or ``None`` when the form is valid in any
    dimension.
    """

    dim: int | None = None
    separable = True

    def _check(self, q, p):
        q = np.asarray(q, dtype=np.float64)
        p = np.asarray(p, dtype=np.float64)
        if q.shape != p.shape:
            raise ValueError(f"q shape {q.shape} != p shape {p.shape}")
        if self.dim is not None and q.shape[-1] != self.dim:
            raise ValueError(f"expected half dimension {self.dim}, got {q.shape[-1]}")
        return q, p

    def value(self, q, p):
        raise NotImplementedError

    def grad_q(self, q, p):
        raise NotImplementedError

    def grad_p(self, q, p):
        raise NotImplementedError

    # Reverse-mode hooks for separable forms: Hessian-vector product and
    # (empty) parameter gradient.
    def potential_vjp(self, q, u):
        raise NotImplementedError

    def kinetic_vjp(self, p, u):
        raise NotImplementedError


@dataclass(frozen=True)
class Constant(AnalyticHamiltonian):
    c: float = 0.0
    dim: int | None = None

    def value(self, q, p):
        q, p = self._check(q, p)
        return np.full(q.shape[:-1], float(self.c))

    def grad_q(self, q, p):
        q, p = self._check(q, p)
        return np.zeros_like(q)

    def grad_p(self, q, p):
        q, p = self._check(q, p)
        return np.zeros_like(p)

    def potential_vjp(self, q, u):
        return np.zeros_like(np.asarray(u, dtype=np.float64)), None

    kinetic_vjp = potential_vjp


@dataclass(frozen=True)
class FreeParticle(AnalyticHamiltonian):
    """``H = |p|^2 / 2``."""

    dim: int | None = None

    def value(self, q, p):
        q, p = self._check(q, p)
        return 0.5 * np.sum(p * p, axis=-1)

    def grad_q(self, q, p):
        q, p = self._check(q, p)
        return np.zeros_like(q)

    def grad_p(self, q, p):
        q, p = self._check(q, p)
        return p.copy()

    def exact_flow(self, q, p, t):
        q, p = self._check(q, p)
        return q + t * p, p.copy()

    def potential_vjp(self, q, u):
        return np.zeros_like(np.asarray(u, dtype=np.float64)), None

    def kinetic_vjp(self, p, u):
        return np.array(u, dtype=np.float64), None


@dataclass(frozen=True)
class HarmonicOscillator(AnalyticHamiltonian):
    """``H = |p|^2 / 2 + omega^2 |q|^2 / 2``."""

    omega: float = 1.0
    dim: int | None = None

    def __post_init__(self):
        if not self.omega > 0:
            raise ValueError(f"omega must be positive, got {self.omega}")

    def value(self, q, p):
        q, p = self._check(q, p)
        return 0.5 * np.sum(p * p, axis=-1) + 0.5 * self.omega**2 * np.sum(q * q, axis=-1)

    def grad_q(self, q, p):
        q, p = self._check(q, p)
        return self.omega**2 * q

    def grad_p(self, q, p):
        q, p = self._check(q, p)
        return p.copy()

    def exact_flow(self, q, p, t):
        """Closed-form rotation in the scaled ``(omega q, p)`` plane."""
        q, p = self._check(q, p)
        w = self.omega
        c, s = np.cos(w * t), np.sin(w * t)
        return c * q + (s / w) * p, -w * s * q + c * p

    @property
    def curvature(self) -> float:
        """Exact stability constant ``L_H = omega^2``."""
        return self.omega**2

    def potential_vjp(self, q, u):
        return self.omega**2 * np.asarray(u, dtype=np.float64), None

    def kinetic_vjp(self, p, u):
        return np.array(u, dtype=np.float64), None


@dataclass(frozen=True)
class Quadratic(AnalyticHamiltonian):
    """``H = z^T A z / 2`` for symmetric ``A``; generally not separable."""

    A: np.ndarray = field(default_factory=lambda: np.eye(2))

    def __post_init__(self):
        A = np.array(self.A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] % 2:
            raise ValueError("A must be a square matrix of even order")
        if np.max(np.abs(A - A.T), initial=0.0) > 1e-12:
            raise ValueError("A must be symmetric")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def dim(self) -> int:
        return self.A.shape[0] // 2

    @property
    def separable(self) -> bool:
        d = self.dim
        return not (np.any(self.A[:d, d:]) or np.any(self.A[d:, :d]))

    def _grad(self, q, p):
        q, p = self._check(q, p)
        z = np.concatenate([q, p], axis=-1)
        g = z @ self.A.T
        return g[..., : self.dim], g[..., self.dim :]

    def value(self, q, p):
        q, p = self._check(q, p)
        z = np.concatenate([q, p], axis=-1)
        return 0.5 * np.einsum("...i,ij,...j->...", z, self.A, z)

    def grad_q(self, q, p):
        return self._grad(q, p)[0]

    def grad_p(self, q, p):
        return self._grad(q, p)[1]

    def potential_vjp(self, q, u):
        if not self.separable:
            raise ValueError("reverse-mode flow requires a separable Hamiltonian")
        d = self.dim
        return np.asarray(u, dtype=np.float64) @ self.A[:d, :d], None

    def kinetic_vjp(self, p, u):
        if not self.separable:
            raise ValueError("reverse-mode flow requires a separable Hamiltonian")
        d = self.dim
        return np.asarray(u, dtype=np.float64) @ self.A[d:, d:], None


@dataclass(frozen=True)
class Pendulum(AnalyticHamiltonian):
    """``H = |p|^2 / (2 m l^2) + m g l sum(1 - cos q)``, one pendulum per coordinate."""

    m: float = 1.0
    l: float = 1.0  # noqa: E741
    g: float = 1.0
    dim: int | None = None

    def __post_init__(self):
        if not (self.m > 0 and self.l > 0 and self.g > 0):
            raise ValueError("pendulum parameters must be positive")

    @property
    def _inertia(self) -> float:
        return self.m * self.l**2

    def value(self, q, p):
        q, p = self._check(q, p)
        return np.sum(p * p, axis=-1) / (2 * self._inertia) + self.m * self.g * self.l * np.sum(
            1.0 - np.cos(q), axis=-1
        )

    def grad_q(self, q, p):
        q, p = self._check(q, p)
        return self.m * self.g * self.l * np.sin(q)

    def grad_p(self, q, p):
        q, p = self._check(q, p)
        return p / self._inertia

    def potential_vjp(self, q, u):
        return self.m * self.g * self.l * np.cos(q) * np.asarray(u, dtype=np.float64), None

    def kinetic_vjp(self, p, u):
        return np.asarray(u, dtype=np.float64) / self._inertia, None


def analytic_value(h: AnalyticHamiltonian, z: PhaseState) -> float:
    return float(h.value(z.q, z.p))


def analytic_grad(h: AnalyticHamiltonian, z: PhaseState) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(dH/dq, dH/dp)`` at ``z``."""
    return h.grad_q(z.q, z.p), h.grad_p(z.q, z.p)


_ANALYTIC_KINDS = {c.__name__: c for c in (Constant, FreeParticle, HarmonicOscillator, Quadratic, Pendulum)}


def analytic_to_dict(h: AnalyticHamiltonian) -> dict:
    out = {"kind": type(h).__name__}
    for f in fields(h):
        v = getattr(h, f.name)
        out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
    return out


def analytic_from_dict(d: dict) -> AnalyticHamiltonian:
    d = dict(d)
    kind = d.pop("kind")
    if kind not in _ANALYTIC_KINDS:
        raise ValueError(f"unknown analytic Hamiltonian {kind!r}")
    return _ANALYTIC_KINDS[kind](**d)


# ---------------------------------------------------------------------------
# Random numbers


class Rng:
    """Seeded counter-based generator (Philox-4x64 with ziggurat normals).

    Philox is a pure function of (key, counter), so streams are bit-identical
    across platforms and runs for the same call sequence. Not thread-safe;
    give each worker its own ``spawn``-ed child.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def standard_normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, high, size=None):
        return self._gen.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, index: int) -> "Rng":
        """Independent child stream keyed by ``(seed, index)``."""
        child_seed = np.random.SeedSequence([self.seed, int(index)]).generate_state(1, np.uint64)[0]
        return Rng(int(child_seed))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        return {
            "seed": self.seed,
            "counter": [int(v) for v in st["state"]["counter"]],
            "key": [int(v) for v in st["state"]["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        rng = cls(state["seed"])
        rng._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": state["buffer_pos"],
            "has_uint32": state["has_uint32"],
            "uinteger": state["uinteger"],
        }
        return rng


def rng_standard_normal(rng: Rng, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)


# ---------------------------------------------------------------------------
# Linear algebra


def lu_det(m) -> float:
    """Determinant from an LU factorization with partial pivoting."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"lu_det needs a square matrix, got shape {m.shape}")
    if m.shape[0] == 0:
        return 1.0
    with warnings.catch_warnings():
        # singular input is fine here: the zero pivot gives det 0
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = lu_factor(m, check_finite=True)
    swaps = np.count_nonzero(piv != np.arange(piv.size))
    diag = np.diag(lu)
    sign = -1.0 if swaps % 2 else 1.0
    return float(sign * np.prod(diag))
