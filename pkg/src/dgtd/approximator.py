"""Parametric CDF models ``F_theta(x, z_j)`` with exact gradients and Hessian-vector products.

Every model takes the parameter vector ``theta`` explicitly and is otherwise
immutable. The common surface is:

``cdf(theta, x)``            length-m vector of CDF values at the atoms
``jacobian(theta, x)``       (m, d) matrix whose row j is ``grad_theta F(x, z_j)``
``vjp(theta, x, c)``         ``sum_j c_j grad F(x, z_j)``
``hvp_combo(theta, x, c, w)`` ``sum_j c_j (grad^2 F(x, z_j)) w``

Scalar value models used by the non-distributional baselines expose
``value``, ``grad`` and ``hvp`` instead.
"""

from __future__ import annotations

import json

import numpy as np

from .mdp_env import CARTPOLE_SCALES, CartPoleState
from .value_distribution import SupportGrid, project_scalar_to_grid, read_cdf

ACTIVATIONS = ("tanh", "relu")


def _activation(name: str, a: np.ndarray):
    """Return ``h(a), h'(a), h''(a)``."""
    if name == "tanh":
        t = np.tanh(a)
        d1 = 1.0 - t * t
        return t, d1, -2.0 * t * d1
    if name == "relu":
        return np.maximum(a, 0.0), (a > 0).astype(float), np.zeros_like(a)
    raise ValueError(f"unknown activation {name!r}")


# ---------------------------------------------------------------------------
# input encodings


def one_hot(i: int, n: int) -> np.ndarray:
    if not 0 <= i < n:
        raise IndexError(f"index {i} out of range for one-hot of length {n}")
    v = np.zeros(n)
    v[i] = 1.0
    return v


def encode_cartpole(state: CartPoleState | np.ndarray, action: int | None = None, n_actions: int = 2) -> np.ndarray:
    """Scaled cart-pole observation, with a one-hot action appended in control mode."""
    obs = state.as_array() if isinstance(state, CartPoleState) else np.asarray(state, dtype=float)
    obs = obs / CARTPOLE_SCALES
    if action is None:
        return obs
    return np.concatenate([obs, one_hot(action, n_actions)])


def encode_input(x, n_inputs: int | None = None, action: int | None = None, n_actions: int = 2) -> np.ndarray:
    """One-hot for integer ids (needs ``n_inputs``), scaled reals for cart-pole states."""
    if isinstance(x, (int, np.integer)):
        if n_inputs is None:
            raise ValueError("integer inputs need n_inputs for the one-hot encoding")
        return one_hot(int(x), n_inputs)
    return encode_cartpole(x, action, n_actions)


# ---------------------------------------------------------------------------
# linear model


class LinearCdfModel:
    """``F_theta(x, z_j) = phi(x, z_j)^T theta`` over a fixed feature table.

    ``features`` has shape ``(n_inputs, m, d)``; inputs are integer row ids
    (a state, or ``s * n_actions + a`` for state-action tables). The CDF is not
    constrained to be monotone or to end at 1.
    """

    arch = "linear"

    def __init__(self, features: np.ndarray):
        features = np.array(features, dtype=float)
        if features.ndim != 3:
            raise ValueError("features must have shape (n_inputs, m, d)")
        features.setflags(write=False)
        self.features = features
        # one-hot tables (every row a distinct unit vector) get an index fast path
        self._cols = None
        flat = features.reshape(-1, features.shape[2])
        cols = np.argmax(flat != 0, axis=1)
        if (np.array_equal(flat, np.eye(flat.shape[1])[cols])
                and np.unique(cols).size == cols.size):
            self._cols = cols.reshape(features.shape[:2])

    @classmethod
    def one_hot(cls, n_inputs: int, m: int) -> "LinearCdfModel":
        """Tabular features: one coordinate per (input, atom) pair."""
        return cls(np.eye(n_inputs * m).reshape(n_inputs, m, n_inputs * m))

    @property
    def n_inputs(self) -> int:
        return self.features.shape[0]

    @property
    def m(self) -> int:
        return self.features.shape[1]

    @property
    def n_params(self) -> int:
        return self.features.shape[2]

    @property
    def is_one_hot(self) -> bool:
        return self._cols is not None

    def cdf(self, theta, x) -> np.ndarray:
        return self.jvp(theta, x, theta)

    def jacobian(self, theta, x) -> np.ndarray:
        return self.features[x]

    def jvp(self, theta, x, w) -> np.ndarray:
        """``Phi(x) w``, one entry per atom."""
        if self._cols is not None:
            return np.asarray(w, dtype=float)[self._cols[x]]
        return self.features[x] @ w

    def vjp(self, theta, x, c) -> np.ndarray:
        if self._cols is not None:
            out = np.zeros(self.n_params)
            out[self._cols[x]] = c
            return out
        return c @ self.features[x]

    def hvp_combo(self, theta, x, c, w) -> np.ndarray:
        return np.zeros(self.n_params)

    def init_params(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def sizes(self) -> list[int]:
        return list(self.features.shape)

    def options(self) -> dict:
        return {}


# ---------------------------------------------------------------------------
# one-hidden-layer softmax network


class SoftmaxMlpModel:
    """One hidden layer, softmax output over the atoms, ``F(x, z_j) = sum_{k<=j} p_k``.

    Parameters are packed as ``[V1 (H x n_in), b1 (H), V2 (K x H), b2 (K)]``
    where ``K = m - 1`` when ``reference_logit`` pins the last logit to zero
    (removing the softmax shift symmetry) and ``K = m`` otherwise. Integer
    inputs are looked up in ``input_table`` (shape ``(n_inputs, n_in)``) when
    one is given and one-hot encoded over ``n_in`` otherwise.
    """

    arch = "softmax_mlp"

    def __init__(self, n_in: int, n_hidden: int, m: int, activation: str = "tanh",
                 hidden_bias: bool = True, output_bias: bool = True, reference_logit: bool = True,
                 input_table: np.ndarray | None = None):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if m < 2:
            raise ValueError("need at least two atoms")
        self.n_in, self.n_hidden, self.m = int(n_in), int(n_hidden), int(m)
        self.activation = activation
        self.hidden_bias = hidden_bias
        self.output_bias = output_bias
        self.reference_logit = reference_logit
        self.n_logits = m - 1 if reference_logit else m
        self.input_table = None
        if input_table is not None:
            self.input_table = np.array(input_table, dtype=float).reshape(-1, self.n_in)
            self.input_table.setflags(write=False)
        H, K = self.n_hidden, self.n_logits
        self._shapes = [("V1", (H, self.n_in)), ("b1", (H if hidden_bias else 0,)),
                        ("V2", (K, H)), ("b2", (K if output_bias else 0,))]
        self.n_params = sum(int(np.prod(s)) for _, s in self._shapes)

    # -- parameter packing

    def unpack(self, theta: np.ndarray) -> dict[str, np.ndarray]:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        out, i = {}, 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            out[name] = theta[i:i + size].reshape(shape)
            i += size
        return out

    def pack(self, V1, b1, V2, b2) -> np.ndarray:
        parts = [V1, b1 if self.hidden_bias else np.zeros(0), V2, b2 if self.output_bias else np.zeros(0)]
        return np.concatenate([np.ravel(p) for p in parts])

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        """Uniform in +-1/sqrt(fan_in) per layer."""
        H, K = self.n_hidden, self.n_logits
        lim1, lim2 = 1.0 / np.sqrt(self.n_in), 1.0 / np.sqrt(H)
        return self.pack(rng.uniform(-lim1, lim1, (H, self.n_in)), rng.uniform(-lim1, lim1, H),
                         rng.uniform(-lim2, lim2, (K, H)), rng.uniform(-lim2, lim2, K))

    def sizes(self) -> list[int]:
        return [self.n_in, self.n_hidden, self.m]

    def options(self) -> dict:
        out = {"hidden_bias": self.hidden_bias, "output_bias": self.output_bias,
               "reference_logit": self.reference_logit}
        if self.input_table is not None:
            out["input_table"] = self.input_table.tolist()
        return out

    # -- forward

    def _input(self, x) -> np.ndarray:
        if isinstance(x, (int, np.integer)):
            if self.input_table is not None:
                return self.input_table[x]
            return one_hot(int(x), self.n_in)
        return np.asarray(x, dtype=float)

    def _forward(self, theta, x):
        P = self.unpack(theta)
        x = self._input(x)
        a = P["V1"] @ x
        if self.hidden_bias:
            a = a + P["b1"]
        z, h1, h2 = _activation(self.activation, a)
        y = np.zeros(self.m)
        y[:self.n_logits] = P["V2"] @ z
        if self.output_bias:
            y[:self.n_logits] += P["b2"]
        e = np.exp(y - y.max())
        p = e / e.sum()
        return P, x, a, z, h1, h2, p

    def probs(self, theta, x) -> np.ndarray:
        return self._forward(theta, x)[-1]

    def cdf(self, theta, x) -> np.ndarray:
        F = np.cumsum(self.probs(theta, x))
        F[-1] = 1.0
        return F

    # -- first order

    def _param_grad(self, x, z, gy, gz, h1):
        """Assemble parameter gradients from logit and hidden cotangents (last axis)."""
        K = self.n_logits
        ga = gz * h1
        parts = [(ga[..., :, None] * x).reshape(*ga.shape[:-1], -1)]
        if self.hidden_bias:
            parts.append(ga)
        parts.append((gy[..., :K, None] * z).reshape(*gy.shape[:-1], -1))
        if self.output_bias:
            parts.append(gy[..., :K])
        return np.concatenate(parts, axis=-1)

    def jacobian(self, theta, x) -> np.ndarray:
        P, x, a, z, h1, h2, p = self._forward(theta, x)
        F = np.cumsum(p)
        lower = np.tril(np.ones((self.m, self.m)))  # lower[j, l] = 1 if l <= j
        gy = p[None, :] * (lower - F[:, None])      # dF_j / dy_l
        gz = gy[:, :self.n_logits] @ P["V2"]
        return self._param_grad(x, z, gy, gz, h1)

    def jvp(self, theta, x, w) -> np.ndarray:
        """``sum_i w_i dF(x, z_j) / d theta_i`` per atom by one forward-mode pass."""
        P, x, a, z, h1, h2, p = self._forward(theta, x)
        Ry = self._forward_tangent(P, x, z, h1, self.unpack(w))[2]
        return np.cumsum(p * (Ry - p @ Ry))

    def _forward_tangent(self, P, x, z, h1, W):
        """``R(a), R(z), R(y)`` for the direction ``W``."""
        Ra = W["V1"] @ x
        if self.hidden_bias:
            Ra = Ra + W["b1"]
        Rz = h1 * Ra
        K = self.n_logits
        Ry = np.zeros(self.m)
        Ry[:K] = P["V2"] @ Rz + W["V2"] @ z
        if self.output_bias:
            Ry[:K] += W["b2"]
        return Ra, Rz, Ry

    def vjp(self, theta, x, c) -> np.ndarray:
        P, x, a, z, h1, h2, p = self._forward(theta, x)
        S = np.cumsum(np.asarray(c, dtype=float)[::-1])[::-1]  # S_k = sum_{j >= k} c_j
        gy = p * (S - S @ p)
        gz = gy[:self.n_logits] @ P["V2"]
        return self._param_grad(x, z, gy, gz, h1)

    # -- second order

    def hvp_combo(self, theta, x, c, w) -> np.ndarray:
        """``sum_j c_j (d^2 F(x, z_j) / d theta^2) w`` by the R-operator.

        Apply ``R = w . grad`` to the forward pass and to the backward pass of
        ``L = sum_j c_j F_j = sum_k S_k p_k`` with ``S_k = sum_{j>=k} c_j``.
        Forward: ``R(a) = W1 x + c1``, ``R(z) = h'(a) R(a)``,
        ``R(y) = V2 R(z) + W2 z + c2``, ``R(p) = p (R(y) - p.R(y))``.
        Backward: ``dL/dy = p (S - L)`` so
        ``R(dL/dy) = R(p) (S - L) - p R(L)`` with ``R(L) = S.R(p)``; the hidden
        error picks up the ``h''`` term
        ``R(dL/da) = h''(a) R(a) g_z + h'(a) (W2^T g_y + V2^T R(g_y))``.
        Summed over atoms this is the per-output recursion on the softmax
        Jacobian ``dp_m/dy_k`` and its R-image.
        """
        P, x, a, z, h1, h2, p = self._forward(theta, x)
        W = self.unpack(w)
        K = self.n_logits
        c = np.asarray(c, dtype=float)

        Ra, Rz, Ry = self._forward_tangent(P, x, z, h1, W)
        Rp = p * (Ry - p @ Ry)

        S = np.cumsum(c[::-1])[::-1]
        L = S @ p
        gy = p * (S - L)
        RL = S @ Rp
        Rgy = Rp * (S - L) - p * RL

        gz = gy[:K] @ P["V2"]
        Rgz = gy[:K] @ W["V2"] + Rgy[:K] @ P["V2"]
        Rga = h2 * Ra * gz + h1 * Rgz

        parts = [np.outer(Rga, x).ravel()]
        if self.hidden_bias:
            parts.append(Rga)
        parts.append((np.outer(Rgy[:K], z) + np.outer(gy[:K], Rz)).ravel())
        if self.output_bias:
            parts.append(Rgy[:K])
        return np.concatenate(parts)

    def preactivations(self, theta, x) -> np.ndarray:
        return self._forward(theta, x)[2]


# ---------------------------------------------------------------------------
# per-atom conveniences


def cdf(model, theta, x) -> np.ndarray:
    return model.cdf(theta, x)


def grad_cdf(model, theta, x, j: int) -> np.ndarray:
    """``phi_theta(x, z_j)`` (0-based atom index)."""
    if not 0 <= j < model.m:
        raise IndexError(f"atom index {j} out of range")
    return model.vjp(theta, x, one_hot(j, model.m))


def hvp(model, theta, x, j: int, w) -> np.ndarray:
    """``(grad^2 F(x, z_j)) w`` (0-based atom index)."""
    if not 0 <= j < model.m:
        raise IndexError(f"atom index {j} out of range")
    return model.hvp_combo(theta, x, one_hot(j, model.m), w)


def cdf_at(model, theta, x, value: float, grid: SupportGrid) -> float:
    """CDF read at the atom nearest to ``value`` (clamped to the grid)."""
    return float(model.cdf(theta, x)[project_scalar_to_grid(value, grid)])


def grad_cdf_at(model, theta, x, value: float, grid: SupportGrid) -> np.ndarray:
    return grad_cdf(model, theta, x, project_scalar_to_grid(value, grid))


def target_cdf(model, theta, x, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """CDF values and gradients read at target indices (``-1`` reads as zero)."""
    F = read_cdf(model.cdf(theta, x), idx)
    J = model.jacobian(theta, x)[np.maximum(idx, 0)]
    J[idx < 0] = 0.0
    return F, J


def mean_values(model, theta, x, grid: SupportGrid) -> float:
    """Mean of the distribution implied by the CDF (masses are CDF increments)."""
    p = np.diff(model.cdf(theta, x), prepend=0.0)
    return float(p @ grid.atoms)


# ---------------------------------------------------------------------------
# checkpoints


def model_to_json(model, theta) -> str:
    return json.dumps({
        "arch": model.arch,
        "sizes": model.sizes(),
        "activation": getattr(model, "activation", None),
        "options": model.options(),
        "theta": np.asarray(theta, dtype=float).tolist(),
    })


def model_from_json(text: str, features: np.ndarray | None = None):
    """Rebuild ``(model, theta)``; linear checkpoints need their feature table back."""
    obj = json.loads(text)
    theta = np.asarray(obj["theta"], dtype=float)
    if obj["arch"] == "softmax_mlp":
        n_in, H, m = obj["sizes"]
        model = SoftmaxMlpModel(n_in, H, m, obj["activation"], **obj.get("options", {}))
    elif obj["arch"] == "linear":
        if features is None:
            raise ValueError("linear checkpoints store no features; pass the feature table")
        model = LinearCdfModel(features)
        if model.sizes() != list(obj["sizes"]):
            raise ValueError("feature table does not match checkpoint sizes")
    else:
        raise ValueError(f"unknown arch {obj['arch']!r}")
    if theta.shape != (model.n_params,):
        raise ValueError("theta length does not match the architecture")
    return model, theta


# ---------------------------------------------------------------------------
# scalar value models for the baselines


class LinearValueModel:
    """``V(x) = phi(x)^T theta`` with a feature table of shape ``(n_inputs, d)``."""

    def __init__(self, features: np.ndarray):
        self.features = np.asarray(features, dtype=float)
        self.n_params = self.features.shape[1]

    def value(self, theta, x) -> float:
        return float(self.features[x] @ theta)

    def grad(self, theta, x) -> np.ndarray:
        return self.features[x]

    def hvp(self, theta, x, w) -> np.ndarray:
        return np.zeros(self.n_params)


class ScalarMlpModel:
    """One hidden layer network with a scalar output ``V(x) = v . h(V1 x + b1) + b2``."""

    def __init__(self, n_in: int, n_hidden: int, activation: str = "tanh"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.n_in, self.n_hidden, self.activation = n_in, n_hidden, activation
        self.n_params = n_hidden * n_in + n_hidden + n_hidden + 1

    def unpack(self, theta):
        H, n = self.n_hidden, self.n_in
        V1 = theta[:H * n].reshape(H, n)
        b1 = theta[H * n:H * n + H]
        v2 = theta[H * n + H:H * n + 2 * H]
        return V1, b1, v2, theta[-1]

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        H, n = self.n_hidden, self.n_in
        lim1, lim2 = 1.0 / np.sqrt(n), 1.0 / np.sqrt(H)
        return np.concatenate([rng.uniform(-lim1, lim1, H * n + H), rng.uniform(-lim2, lim2, H + 1)])

    def _input(self, x):
        if isinstance(x, (int, np.integer)):
            return one_hot(int(x), self.n_in)
        return np.asarray(x, dtype=float)

    def value(self, theta, x) -> float:
        V1, b1, v2, b2 = self.unpack(theta)
        z, _, _ = _activation(self.activation, V1 @ self._input(x) + b1)
        return float(v2 @ z + b2)

    def grad(self, theta, x) -> np.ndarray:
        V1, b1, v2, b2 = self.unpack(theta)
        x = self._input(x)
        z, h1, _ = _activation(self.activation, V1 @ x + b1)
        ga = v2 * h1
        return np.concatenate([np.outer(ga, x).ravel(), ga, z, [1.0]])

    def hvp(self, theta, x, w) -> np.ndarray:
        V1, b1, v2, _ = self.unpack(theta)
        W1, c1, u2, _ = self.unpack(np.asarray(w, dtype=float))
        x = self._input(x)
        z, h1, h2 = _activation(self.activation, V1 @ x + b1)
        Ra = W1 @ x + c1
        Rz = h1 * Ra
        Rga = u2 * h1 + v2 * h2 * Ra
        return np.concatenate([np.outer(Rga, x).ravel(), Rga, Rz, [0.0]])
