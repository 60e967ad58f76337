"""Small MLPs with hand-derived first and second order passes.

Layer ``l`` computes ``z_l = a_l W_l^T + b_l``; hidden layers apply a smooth
activation and the last layer is affine. Inputs are batched along axis 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core import Rng

__all__ = [
    "ACTIVATIONS",
    "MlpParams",
    "GradBundle",
    "SeparableHamiltonianNet",
    "init_mlp",
    "mlp_forward",
    "mlp_backward",
    "mlp_input_grad",
    "mlp_param_grad",
    "mlp_input_grad_param_grad",
    "input_grad_vjp",
    "power_iteration",
    "spectral_normalize",
    "hessian_bound",
    "lipschitz_bound",
    "sigma_power_bound",
]

_TANH_D2_MAX = 4.0 / (3.0 * np.sqrt(3.0))


def _tanh(z):
    t = np.tanh(z)
    d1 = 1.0 - t * t
    return t, d1, -2.0 * t * d1


def _softplus(z):
    s = 0.5 * (1.0 + np.tanh(0.5 * z))  # overflow-free logistic
    return np.logaddexp(0.0, z), s, s * (1.0 - s)


# name -> (fn returning value, first and second derivative; sup |second derivative|)
ACTIVATIONS = {
    "tanh": (_tanh, _TANH_D2_MAX),
    "softplus": (_softplus, 0.25),
}


@dataclass
class MlpParams:
    weights: list
    biases: list
    activation: str = "tanh"
    spectral_cap: float | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(
                f"activation {self.activation!r} is not C^2-smooth or unknown; "
                f"choose from {sorted(ACTIVATIONS)}"
            )
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        self.weights = [np.array(w, dtype=np.float64, ndmin=2) for w in self.weights]
        self.biases = [np.array(b, dtype=np.float64, ndmin=1) for b in self.biases]
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise ValueError(f"layer {l}: bias shape {b.shape} vs weight {w.shape}")
            if l and w.shape[1] != self.weights[l - 1].shape[0]:
                raise ValueError(f"layer {l}: input width {w.shape[1]} != {self.weights[l - 1].shape[0]}")
        if self.spectral_cap is not None and not self.spectral_cap > 0:
            raise ValueError("spectral_cap must be positive")

    @property
    def layer_dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.activation,
            self.spectral_cap,
        )

    def to_dict(self) -> dict:
        return {
            "activation": self.activation,
            "spectral_cap": self.spectral_cap,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        return cls(d["weights"], d["biases"], d["activation"], d["spectral_cap"])


@dataclass
class GradBundle:
    d_weights: list
    d_biases: list

    @classmethod
    def zeros_like(cls, net: MlpParams) -> "GradBundle":
        return cls([np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases])

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.d_weights, self.d_biases):
            out += [w, b]
        return out

    def __add__(self, other: "GradBundle") -> "GradBundle":
        return GradBundle(
            [a + b for a, b in zip(self.d_weights, other.d_weights)],
            [a + b for a, b in zip(self.d_biases, other.d_biases)],
        )

    def scaled(self, s: float) -> "GradBundle":
        return GradBundle([s * w for w in self.d_weights], [s * b for b in self.d_biases])

    def iadd(self, other: "GradBundle", scale: float = 1.0) -> None:
        for a, b in zip(self.d_weights, other.d_weights):
            a += scale * b
        for a, b in zip(self.d_biases, other.d_biases):
            a += scale * b


def init_mlp(layer_dims, rng: Rng, activation="tanh", spectral_cap=None, zero=False) -> MlpParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        if zero:
            w = np.zeros((fan_out, fan_in))
        else:
            w = rng.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in)
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, activation, spectral_cap)


class Cache(NamedTuple):
    inputs: list  # a_l, the input to each layer
    pre: list  # z_l
    d1: list  # activation derivatives at hidden pre-activations
    d2: list


def _as_batch(net: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x.reshape(1, -1) if single else x
    if x2.ndim != 2 or x2.shape[1] != net.in_dim:
        raise ValueError(f"input width {x2.shape[-1]} != network input {net.in_dim}")
    return x2, single


def _forward(net: MlpParams, x2):
    act = ACTIVATIONS[net.activation][0]
    a = x2
    inputs, pre, d1s, d2s = [], [], [], []
    last = len(net.weights) - 1
    for l, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w.T + b
        pre.append(z)
        if l < last:
            a, d1, d2 = act(z)
            d1s.append(d1)
            d2s.append(d2)
        else:
            a = z
    return a, Cache(inputs, pre, d1s, d2s)


def mlp_forward(net: MlpParams, x):
    """Return ``(y, cache)``. ``x`` may be one vector or a batch of rows."""
    x2, single = _as_batch(net, x)
    y, cache = _forward(net, x2)
    return (y[0] if single else y), cache


def mlp_backward(net: MlpParams, cache: Cache, upstream):
    """Reverse pass for ``sum(upstream * y)``: returns ``(dx, GradBundle)``.

    Parameter gradients are summed over the batch.
    """
    delta = np.asarray(upstream, dtype=np.float64).reshape(cache.pre[-1].shape)
    dws, dbs = [None] * len(net.weights), [None] * len(net.weights)
    for l in range(len(net.weights) - 1, -1, -1):
        dws[l] = delta.T @ cache.inputs[l]
        dbs[l] = delta.sum(axis=0)
        da = delta @ net.weights[l]
        if l:
            delta = da * cache.d1[l - 1]
    return da, GradBundle(dws, dbs)


def _require_scalar(net: MlpParams):
    if net.out_dim != 1:
        raise ValueError(f"network output dimension is {net.out_dim}, expected 1")


def mlp_input_grad(net: MlpParams, x):
    """Gradient of the scalar output with respect to the input."""
    _require_scalar(net)
    x2, single = _as_batch(net, x)
    _, cache = _forward(net, x2)
    dx, _ = mlp_backward(net, cache, np.ones((x2.shape[0], 1)))
    return dx[0] if single else dx


def mlp_param_grad(net: MlpParams, x, upstream=1.0) -> GradBundle:
    _require_scalar(net)
    x2, _ = _as_batch(net, x)
    _, cache = _forward(net, x2)
    up = np.broadcast_to(np.asarray(upstream, dtype=np.float64).reshape(-1, 1), (x2.shape[0], 1))
    return mlp_backward(net, cache, up)[1]


def input_grad_vjp(net: MlpParams, x, u):
    """Forward-over-reverse pass for ``s(x, psi) = <u, grad_x f(x)>``.

    Returns ``(grad_x s, GradBundle of d s / d psi)``; ``grad_x s`` is the
    Hessian-vector product ``Hess f(x) u``. The forward pass carries the
    tangent ``u`` alongside the primal, which makes ``s`` the output tangent;
    the reverse pass then differentiates that augmented program.
    """
    _require_scalar(net)
    x2, single = _as_batch(net, x)
    u2 = np.asarray(u, dtype=np.float64).reshape(x2.shape)
    ws, last = net.weights, len(net.weights) - 1

    act = ACTIVATIONS[net.activation][0]
    a, ad = x2, u2
    inputs, tangents, d1s, d2s, zdots = [], [], [], [], []
    for l, (w, b) in enumerate(zip(ws, net.biases)):
        inputs.append(a)
        tangents.append(ad)
        z = a @ w.T + b
        zd = ad @ w.T
        if l < last:
            a, d1, d2 = act(z)
            ad = d1 * zd
            d1s.append(d1)
            d2s.append(d2)
            zdots.append(zd)

    n = x2.shape[0]
    bar_z = np.zeros((n, 1))
    bar_zd = np.ones((n, 1))
    dws, dbs = [None] * len(ws), [None] * len(ws)
    for l in range(last, -1, -1):
        dws[l] = bar_zd.T @ tangents[l] + bar_z.T @ inputs[l]
        dbs[l] = bar_z.sum(axis=0)
        bar_a = bar_z @ ws[l]
        bar_ad = bar_zd @ ws[l]
        if l:
            d1, d2, zd = d1s[l - 1], d2s[l - 1], zdots[l - 1]
            bar_z = bar_a * d1 + bar_ad * d2 * zd
            bar_zd = bar_ad * d1
    hvp = bar_a
    return (hvp[0] if single else hvp), GradBundle(dws, dbs)


def mlp_input_grad_param_grad(net: MlpParams, x, upstream_vec) -> GradBundle:
    """Parameter gradient of ``<upstream_vec, grad_x f(x)>``."""
    x2, _ = _as_batch(net, x)
    u = np.asarray(upstream_vec, dtype=np.float64)
    if u.size != x2.size:
        raise ValueError(f"upstream_vec has {u.size} entries, expected {x2.size}")
    return input_grad_vjp(net, x2, u.reshape(x2.shape))[1]


# ---------------------------------------------------------------------------
# Spectral control


def power_iteration(w: np.ndarray, iters: int = 50, seed: int = 0) -> float:
    """Estimate the largest singular value of ``w`` from a fixed start vector."""
    w = np.asarray(w, dtype=np.float64)
    if not np.any(w):
        return 0.0
    v = np.random.Generator(np.random.Philox(seed)).standard_normal(w.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(iters):
        u = w @ v
        nu = np.linalg.norm(u)
        if nu == 0.0:
            return 0.0
        v = w.T @ (u / nu)
        sigma = np.linalg.norm(v)
        v /= sigma
    return float(sigma)


def spectral_normalize(net: MlpParams, iters: int = 50, sigma: float | None = None):
    """Rescale any weight whose estimated norm exceeds the cap.

    Returns ``(capped_net, norms)`` with the per-layer estimates taken before
    rescaling. Uses ``net.spectral_cap`` when ``sigma`` is not given.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cap = net.spectral_cap if sigma is None else sigma
    out = net.copy()
    norms = []
    for l, w in enumerate(out.weights):
        s = power_iteration(w, iters)
        norms.append(s)
        if cap is not None and s > cap:
            out.weights[l] = w * (cap / s)
    return out, norms


def hessian_bound(net: MlpParams, iters: int = 50) -> float:
    """Global upper bound on ``||Hess_x f||_2`` for a scalar MLP.

    With ``P_k = prod_{j<=k} ||W_j||`` and ``c2 = sup|sigma''|`` (``sup|sigma'|``
    is 1 for both activations), differentiating the product of layer
    Jacobians gives ``c2 * sum_k P_k^2 prod_{j>k} ||W_j||`` over hidden
    layers ``k``. Purely affine networks return 0.
    """
    norms = [power_iteration(w, iters) for w in net.weights]
    c2 = ACTIVATIONS[net.activation][1]
    total = 0.0
    for k in range(len(norms) - 1):
        head = float(np.prod(norms[: k + 1]))
        tail = float(np.prod(norms[k + 1 :]))
        total += head * head * tail
    return c2 * total


def sigma_power_bound(net: MlpParams) -> float | None:
    """``sigma^L`` for a spectrally capped network, else ``None``."""
    if net.spectral_cap is None:
        return None
    return net.spectral_cap ** len(net.weights)


@dataclass
class SeparableHamiltonianNet:
    """``H(q, p) = K(p) + V(q)`` with two scalar MLPs on R^d."""

    kinetic: MlpParams
    potential: MlpParams
    separable: bool = field(default=True, init=False)

    def __post_init__(self):
        for name, net in (("kinetic", self.kinetic), ("potential", self.potential)):
            if net.out_dim != 1:
                raise ValueError(f"{name} network must have scalar output")
        if self.kinetic.in_dim != self.potential.in_dim:
            raise ValueError("kinetic and potential networks need the same input dimension")

    @classmethod
    def init(cls, d: int, hidden, rng: Rng, activation="tanh", spectral_cap=None, zero=False):
        dims = [d, *hidden, 1]
        return cls(
            init_mlp(dims, rng, activation, spectral_cap, zero),
            init_mlp(dims, rng, activation, spectral_cap, zero),
        )

    @property
    def dim(self) -> int:
        return self.kinetic.in_dim

    def value(self, q, p):
        k, _ = mlp_forward(self.kinetic, p)
        v, _ = mlp_forward(self.potential, q)
        return (k + v)[..., 0]

    def grad_q(self, q, p=None):
        return mlp_input_grad(self.potential, q)

    def grad_p(self, q, p):
        return mlp_input_grad(self.kinetic, p)

    def potential_vjp(self, q, u):
        return input_grad_vjp(self.potential, q, u)

    def kinetic_vjp(self, p, u):
        return input_grad_vjp(self.kinetic, p, u)

    def arrays(self) -> list[np.ndarray]:
        return self.kinetic.arrays() + self.potential.arrays()

    def copy(self) -> "SeparableHamiltonianNet":
        return SeparableHamiltonianNet(self.kinetic.copy(), self.potential.copy())

    def to_dict(self) -> dict:
        return {"kinetic": self.kinetic.to_dict(), "potential": self.potential.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SeparableHamiltonianNet":
        return cls(MlpParams.from_dict(d["kinetic"]), MlpParams.from_dict(d["potential"]))


def lipschitz_bound(hnet: SeparableHamiltonianNet, iters: int = 50) -> float:
    """Conservative curvature constant ``L_H`` for the stability guard.

    The larger of the two sub-network Hessian bounds; it upper-bounds the
    separable leapfrog constant ``sqrt(L_K L_V)``.
    """
    return max(hessian_bound(hnet.kinetic, iters), hessian_bound(hnet.potential, iters))


def stability_dt_bound(hnet: SeparableHamiltonianNet, iters: int = 50) -> float:
    """Largest step size allowed by the tighter of the curvature and ``sigma^L`` guards."""
    bounds = []
    lh = lipschitz_bound(hnet, iters)
    if lh > 0:
        bounds.append(2.0 / np.sqrt(lh))
    for net in (hnet.kinetic, hnet.potential):
        sp = sigma_power_bound(net)
        if sp:
            bounds.append(2.0 / sp)
    return min(bounds) if bounds else np.inf
