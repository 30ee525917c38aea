"""Linear D-MSPBE as a saddle-point problem.

For ``F_theta = phi^T theta`` the objective is ``1/2 ||A theta||^2_{C^-1}`` with

    A = E sum_j phi(s, z_j) (phi(s, z_j) - phi(s', shifted z_j))^T
    C = E sum_j phi(s, z_j) phi(s, z_j)^T

and equals ``min_theta max_w L(theta, w)`` for
``L(theta, w) = -<A theta, w> - 1/2 w^T C w``. The sign in front of the cross
term does not matter: flipping ``w`` gives the same inner maximum.
Projected stochastic descent-ascent with one shared step size and
step-weighted averaging is run on ``L``; :func:`err_certificate` measures the
duality gap of a candidate over L2 balls.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .algorithms import DistributionalTarget, next_side_terms, project_ball
from .mdp_env import TabularMDP, Transition, sample_iid_batch
from .objectives import DmspbeOracle

BISECT_TOL = 1e-10
BISECT_MAX_ITER = 200


@dataclass(frozen=True)
class SaddleMatrices:
    A_saddle: np.ndarray
    C_saddle: np.ndarray

    @property
    def A_norm(self) -> float:
        return float(np.linalg.norm(self.A_saddle, 2))

    @property
    def C_sigma_max(self) -> float:
        return float(np.linalg.eigvalsh(self.C_saddle)[-1]) if self.C_saddle.size else 0.0

    def value(self, theta, w) -> float:
        """``L(theta, w)``."""
        return float(-(self.A_saddle @ theta) @ w - 0.5 * w @ self.C_saddle @ w)

    def objective(self, theta) -> float:
        """``1/2 ||A theta||^2_{C^-1}``, the inner maximum without a ball."""
        g = self.A_saddle @ theta
        return 0.5 * float(g @ np.linalg.solve(self.C_saddle, g))

    def saddle_point(self) -> tuple[np.ndarray, np.ndarray]:
        """The unconstrained saddle; ``theta* = 0`` when ``A`` is nonsingular."""
        d = self.A_saddle.shape[1]
        theta = np.linalg.lstsq(self.A_saddle, np.zeros(d), rcond=None)[0]
        return theta, -np.linalg.solve(self.C_saddle, self.A_saddle @ theta)


def build_saddle_matrices(model, mdp: TabularMDP, policy: np.ndarray, grid,
                          state_weights: np.ndarray | None = None, rule: str = "pushforward") -> SaddleMatrices:
    """Exact ``A`` and ``C`` by enumeration; ``C`` is assembled exactly like the oracle's ``A_mat``."""
    if getattr(model, "arch", None) != "linear":
        raise ValueError("saddle matrices need a linear CDF model")
    ws = DmspbeOracle(model, mdp, policy, grid, state_weights, rule).workspace(np.zeros(model.n_params))
    C = ws.A_mat
    A = ws.Phi.T @ (ws.weights[:, None] * (ws.Phi - ws.Phi_next))
    return SaddleMatrices(A, C)


# ---------------------------------------------------------------------------
# stochastic descent-ascent


@dataclass
class SaddleState:
    theta: np.ndarray
    w: np.ndarray
    radius_theta: float
    radius_w: float
    t: int = 0
    weight_sum: float = 0.0
    theta_sum: np.ndarray = field(default=None)
    w_sum: np.ndarray = field(default=None)

    def __post_init__(self):
        self.theta = project_ball(np.asarray(self.theta, dtype=float), self.radius_theta)
        self.w = project_ball(np.asarray(self.w, dtype=float), self.radius_w)
        if self.theta_sum is None:
            self.theta_sum = np.zeros_like(self.theta)
        if self.w_sum is None:
            self.w_sum = np.zeros_like(self.w)

    @property
    def R(self) -> float:
        return max(self.radius_theta, self.radius_w)


def sgda_step(state: SaddleState, transition: Transition, model, alpha: float,
              target: DistributionalTarget) -> SaddleState:
    """One projected descent-ascent step on ``L``; updates the running averages in place.

    ``w <- Pi_W(w + alpha sum_j (delta_j - phi_j^T w) phi_j)``,
    ``theta <- Pi_Theta(theta + alpha sum_j (phi_j - phi'_j) phi_j^T w)``.
    """
    theta, w = state.theta, state.w
    x = transition.s
    F_next, pull_next = next_side_terms(model, theta, transition.s_next, transition.r, transition.done, target)
    d = F_next - model.cdf(theta, x)
    u = model.jvp(theta, x, w)
    state.w = project_ball(w + alpha * model.vjp(theta, x, d - u), state.radius_w)
    state.theta = project_ball(theta + alpha * (model.vjp(theta, x, u) - pull_next(u)), state.radius_theta)
    state.t += 1
    state.weight_sum += alpha
    state.theta_sum += alpha * state.theta
    state.w_sum += alpha * state.w
    return state


def average_iterates(state: SaddleState) -> tuple[np.ndarray, np.ndarray]:
    """Step-weighted means of ``theta_1..theta_n`` and ``w_1..w_n``."""
    if state.t < 1:
        raise ValueError("no iterates to average")
    return state.theta_sum / state.weight_sum, state.w_sum / state.weight_sum


def weighted_average(iterates: np.ndarray, weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=float)
    return np.tensordot(weights, np.asarray(iterates, dtype=float), axes=1) / weights.sum()


# ---------------------------------------------------------------------------
# duality gap


@dataclass(frozen=True)
class InnerMax:
    w: np.ndarray
    value: float
    lam: float
    kkt_residual: float


def max_over_w(theta, matrices: SaddleMatrices, radius_w: float) -> InnerMax:
    """``max_{||w|| <= R_w} -<g, w> - 1/2 w^T C w`` with ``g = A theta``.

    The maximizer is ``w(lam) = -(C + lam I)^{-1} g``; ``lam = 0`` if that point
    is inside the ball, otherwise ``lam`` is found by bisection on
    ``||w(lam)|| = R_w``.
    """
    g = matrices.A_saddle @ np.asarray(theta, dtype=float)
    C = matrices.C_saddle
    evals, Q = np.linalg.eigh(C)
    evals = np.maximum(evals, 0.0)
    q = Q.T @ g

    def w_of(lam):
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(q == 0, 0.0, q / (evals + lam))
        return -(Q @ coef)

    lam = 0.0
    w = w_of(0.0)
    if not np.all(np.isfinite(w)) or np.linalg.norm(w) > radius_w * (1 + BISECT_TOL):
        lo, hi = 0.0, max(np.linalg.norm(g) / radius_w, 1e-300)
        for _ in range(BISECT_MAX_ITER):
            lam = 0.5 * (lo + hi)
            norm = np.linalg.norm(w_of(lam))
            if abs(norm - radius_w) <= BISECT_TOL * radius_w:
                break
            if norm > radius_w:
                lo = lam
            else:
                hi = lam
        else:
            raise RuntimeError(f"trust-region bisection did not converge in {BISECT_MAX_ITER} iterations")
        w = w_of(lam)
    value = float(-g @ w - 0.5 * w @ C @ w)
    stationarity = -g - C @ w - lam * w
    kkt = float(max(np.max(np.abs(stationarity), initial=0.0),
                    lam * max(radius_w - np.linalg.norm(w), 0.0),
                    max(np.linalg.norm(w) - radius_w, 0.0)))
    return InnerMax(w, value, lam, kkt)


def min_over_theta(w, matrices: SaddleMatrices, radius_theta: float) -> float:
    """``min_{||theta|| <= R_theta} L(theta, w) = -R_theta ||A^T w|| - 1/2 w^T C w``."""
    w = np.asarray(w, dtype=float)
    return float(-radius_theta * np.linalg.norm(matrices.A_saddle.T @ w) - 0.5 * w @ matrices.C_saddle @ w)


def err_certificate(theta, w, matrices: SaddleMatrices, radii: tuple[float, float]) -> float:
    """``max_w L(theta, w) - min_theta L(theta, w)`` over the balls ``radii = (R_theta, R_w)``."""
    radius_theta, radius_w = radii
    return max_over_w(theta, matrices, radius_w).value - min_over_theta(w, matrices, radius_theta)


# ---------------------------------------------------------------------------
# step size and bound


def bound_rhs(n: int, delta_conf: float, R: float, sigma1: float, sigma2: float,
              A_norm: float, C_sigma_max: float) -> float:
    """High-probability bound on the duality gap after ``n`` steps, as stated.

    The last term uses ``sigma_max(C)`` to the first power as printed; the step
    size below uses the squared form from the constant's derivation.
    """
    if n < 1 or not 0 < delta_conf < 1:
        raise ValueError("need n >= 1 and delta_conf in (0, 1)")
    return (np.sqrt(10.0 / n) * (8.0 + 2.0 * np.log(2.0 / delta_conf)) * R
            * np.sqrt(sigma1 ** 2 + sigma2 ** 2 + 3.0 * A_norm ** 2 * R ** 2 + 2.0 * C_sigma_max * R ** 2))


def m_star(R: float, sigma1: float, sigma2: float, A_norm: float, C_sigma_max: float) -> float:
    return float(np.sqrt(2.0 * R ** 2 * (sigma1 ** 2 + sigma2 ** 2 + 3.0 * A_norm ** 2 * R ** 2
                                         + 2.0 * C_sigma_max ** 2 * R ** 2)))


def step_size(n: int, M_star: float, c: float = 1.0) -> float:
    """Constant step ``2c / (M* sqrt(5n))`` for a fixed horizon ``n``."""
    if n < 1 or not M_star > 0:
        raise ValueError("need n >= 1 and M* > 0")
    return 2.0 * c / (M_star * np.sqrt(5.0 * n))


@dataclass(frozen=True)
class Calibration:
    sigma1: float
    sigma2: float
    A_norm: float
    C_sigma_max: float
    R: float

    @property
    def M_star(self) -> float:
        return m_star(self.R, self.sigma1, self.sigma2, self.A_norm, self.C_sigma_max)

    def bound(self, n: int, delta_conf: float = 0.05) -> float:
        return bound_rhs(n, delta_conf, self.R, self.sigma1, self.sigma2, self.A_norm, self.C_sigma_max)


def sample_matrices(model, transition: Transition, target: DistributionalTarget):
    """Single-transition unbiased estimates ``(A_hat, C_hat)``."""
    Phi = model.jacobian(None, transition.s)
    Phi_next = np.zeros_like(Phi)
    if not transition.done:
        idx = target.indices(transition.r)
        rows = model.jacobian(None, transition.s_next)[np.maximum(idx, 0)]
        rows[idx < 0] = 0.0
        Phi_next = rows
    return Phi.T @ (Phi - Phi_next), Phi.T @ Phi


def calibrate(model, mdp: TabularMDP, policy: np.ndarray, state_weights: np.ndarray, target: DistributionalTarget,
              matrices: SaddleMatrices, R: float, n_samples: int, rng: np.random.Generator) -> Calibration:
    """Estimate the gradient-noise levels over the balls from an iid calibration stream.

    ``sigma1^2`` bounds ``E||(A_hat - A)^T w||^2`` for ``||w|| <= R`` and
    ``sigma2^2`` bounds ``E||(A_hat - A) theta + (C_hat - C) w||^2`` for both
    vectors in their balls; each is the top eigenvalue of the empirical second
    moment of the noise operator times the squared radius.
    """
    s, a, s2 = sample_iid_batch(mdp, policy, state_weights, n_samples, rng)
    keys, counts = np.unique(np.stack([s, a, s2], axis=1), axis=0, return_counts=True)
    d = matrices.A_saddle.shape[0]
    M1 = np.zeros((d, d))
    M2 = np.zeros((2 * d, 2 * d))
    for (si, ai, s2i), c in zip(keys, counts):
        tr = Transition(int(si), int(ai), float(mdp.reward[si, ai]), int(s2i))
        A_hat, C_hat = sample_matrices(model, tr, target)
        dA, dC = A_hat - matrices.A_saddle, C_hat - matrices.C_saddle
        M1 += c * (dA @ dA.T)
        block = np.hstack([dA, dC])
        M2 += c * (block.T @ block)
    M1 /= n_samples
    M2 /= n_samples
    sigma1 = R * np.sqrt(max(np.linalg.eigvalsh(M1)[-1], 0.0))
    sigma2 = R * np.sqrt(2.0 * max(np.linalg.eigvalsh(M2)[-1], 0.0))
    return Calibration(float(sigma1), float(sigma2), matrices.A_norm, matrices.C_sigma_max, R)


def default_radii(matrices: SaddleMatrices, fallback: float = 1.0) -> tuple[float, float]:
    """Twice the norm of the closed-form saddle, or ``fallback`` when that is zero."""
    theta, w = matrices.saddle_point()
    r = 2.0 * float(np.hypot(np.linalg.norm(theta), np.linalg.norm(w)))
    r = r if r > 0 else fallback
    return r, r
