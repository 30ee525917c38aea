"""Exact tabular oracles: D-MSPBE, its gradient, MSPBE and the Cramer Bellman error.

All expectations are enumerated over ``(s, a, s')`` with weight
``d(s) pi(a|s) P(s'|s,a)``; nothing here samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .mdp_env import TabularMDP, check_policy, stationary_distribution
from .value_distribution import (
    SupportGrid,
    ValueDistributionTable,
    bellman_backup_grid,
    cramer_sq,
    read_cdf,
    target_indices,
)

COND_LIMIT = 1e12
EQ9_TOL = 1e-10


class SingularSystemError(np.linalg.LinAlgError):
    """The feature second-moment matrix is too ill-conditioned to invert."""


def _condition(A: np.ndarray) -> float:
    diag = np.diag(A)
    if np.count_nonzero(A - np.diag(diag)) == 0:
        lo, hi = np.min(np.abs(diag)), np.max(np.abs(diag))
    else:
        eig = np.abs(np.linalg.eigvalsh(A))
        lo, hi = eig.min(), eig.max()
    return np.inf if lo == 0 else float(hi / lo)


def _solve(A: np.ndarray, b: np.ndarray, cond: float) -> np.ndarray:
    if not cond <= COND_LIMIT:
        raise SingularSystemError(f"A_mat condition number {cond:.3g} exceeds {COND_LIMIT:.0e}")
    diag = np.diag(A)
    if np.count_nonzero(A - np.diag(diag)) == 0:
        return b / diag
    return np.linalg.solve(A, b)


@dataclass
class DmspbeWorkspace:
    """Dense D-MSPBE quantities at one ``theta``; rows are ordered ``(state, atom)``.

    ``Phi_next`` holds the expected gradient of the target CDF
    ``E[phi(s', shifted z_j)]`` so that ``G = E[F(s', shifted z_j)]`` and its
    Jacobian come from the same enumeration.
    """

    Phi: np.ndarray
    weights: np.ndarray
    F: np.ndarray
    G: np.ndarray
    Phi_next: np.ndarray
    A_mat: np.ndarray
    cond: float
    state_weights: np.ndarray
    m: int

    @property
    def singular(self) -> bool:
        return not self.cond <= COND_LIMIT

    @property
    def delta(self) -> np.ndarray:
        """Expected temporal distribution difference ``G - F`` per (state, atom)."""
        return self.G - self.F

    @property
    def b(self) -> np.ndarray:
        """``E sum_j phi(s, z_j) delta(s, z_j)``."""
        return self.Phi.T @ (self.weights * self.delta)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return _solve(self.A_mat, rhs, self.cond)

    def w_star(self) -> np.ndarray:
        """``A_mat^{-1} b`` as a weighted least-squares fit of ``delta`` by ``Phi``.

        Going through ``sqrt(D) Phi`` instead of the normal equations keeps the
        rounding error proportional to ``sqrt(cond)``.
        """
        if self.singular:
            raise SingularSystemError(f"A_mat condition number {self.cond:.3g} exceeds {COND_LIMIT:.0e}")
        diag = np.diag(self.A_mat)
        if np.count_nonzero(self.A_mat - np.diag(diag)) == 0:
            return self.b / diag
        root = np.sqrt(self.weights)
        w, *_ = np.linalg.lstsq(root[:, None] * self.Phi, root * self.delta, rcond=None)
        return w


class DmspbeOracle:
    """Builds workspaces for one (model, MDP, policy, grid) problem.

    ``state_weights`` defaults to the stationary distribution of ``policy``;
    pass the behavior policy's distribution for off-policy evaluation. For
    linear models the theta-independent pieces are cached.
    """

    def __init__(self, model, mdp: TabularMDP, policy: np.ndarray, grid: SupportGrid,
                 state_weights: np.ndarray | None = None, rule: str = "pushforward"):
        if model.m != grid.m:
            raise ValueError(f"model has {model.m} atoms, grid has {grid.m}")
        if mdp.gamma <= 0 and rule == "nearest":
            raise ValueError("gamma must be positive for the nearest-atom target")
        self.model, self.mdp, self.grid, self.rule = model, mdp, grid, rule
        self.policy = check_policy(policy, mdp)
        if state_weights is None:
            state_weights = stationary_distribution(mdp, self.policy)
        self.state_weights = np.asarray(state_weights, dtype=float)
        if self.state_weights.shape != (mdp.n_states,) or np.any(self.state_weights < 0):
            raise ValueError("state weights must be a nonnegative vector over states")
        self.weights = np.repeat(self.state_weights, grid.m)
        # transition branches out of each state: (prob, target index vector, next state)
        self.branches = []
        for s in range(mdp.n_states):
            out = []
            for a in np.flatnonzero(self.policy[s]):
                idx = target_indices(grid, mdp.reward[s, a], mdp.gamma, rule)
                for s2 in np.flatnonzero(mdp.transition[s, a]):
                    out.append((self.policy[s, a] * mdp.transition[s, a, s2], idx, s2))
            self.branches.append(out)
        self._linear_cache = None

    def _expand(self, theta):
        n, m = self.mdp.n_states, self.grid.m
        Fs = [self.model.cdf(theta, s) for s in range(n)]
        Js = [self.model.jacobian(theta, s) for s in range(n)]
        G = np.zeros((n, m))
        Phi_next = np.zeros((n, m, self.model.n_params))
        for s, out in enumerate(self.branches):
            for prob, idx, s2 in out:
                G[s] += prob * read_cdf(Fs[s2], idx)
                rows = Js[s2][np.maximum(idx, 0)]
                rows[idx < 0] = 0.0
                Phi_next[s] += prob * rows
        Phi = np.concatenate(Js, axis=0)
        return Phi, np.concatenate(Fs), G.ravel(), Phi_next.reshape(n * m, -1)

    def workspace(self, theta) -> DmspbeWorkspace:
        theta = np.asarray(theta, dtype=float)
        if getattr(self.model, "arch", None) == "linear":
            if self._linear_cache is None:
                Phi, _, _, Phi_next = self._expand(np.zeros(self.model.n_params))
                A = Phi.T @ (self.weights[:, None] * Phi)
                self._linear_cache = (Phi, Phi_next, A, _condition(A))
            Phi, Phi_next, A, cond = self._linear_cache
            F, G = Phi @ theta, Phi_next @ theta
        else:
            Phi, F, G, Phi_next = self._expand(theta)
            A = Phi.T @ (self.weights[:, None] * Phi)
            cond = _condition(A)
        return DmspbeWorkspace(Phi, self.weights, F, G, Phi_next, A, cond, self.state_weights, self.grid.m)

    def j(self, theta, delta_z_weighted: bool = False) -> float:
        return j_dmspbe(self.workspace(theta), self.grid if delta_z_weighted else None)

    def grad(self, theta) -> "GradientReport":
        theta = np.asarray(theta, dtype=float)
        ws = self.workspace(theta)
        b = ws.b
        w = ws.w_star()
        J = float(b @ w)
        u = ws.Phi @ w
        D = ws.weights
        h = np.zeros(self.model.n_params)
        if getattr(self.model, "arch", None) != "linear":
            coeff = (ws.delta - u).reshape(-1, self.grid.m)
            for s, ds in enumerate(self.state_weights):
                if ds > 0:
                    h += ds * self.model.hvp_combo(theta, s, coeff[s], w)
        half_neg_8 = (ws.Phi - ws.Phi_next).T @ (D * u) - h
        half_neg_9 = -ws.Phi_next.T @ (D * u) + b - h
        grad8, grad9 = -2.0 * half_neg_8, -2.0 * half_neg_9
        gap = float(np.max(np.abs(grad8 - grad9), initial=0.0))
        if gap > EQ9_TOL * max(1.0, float(np.max(np.abs(grad8), initial=0.0))):
            raise RuntimeError(f"the two gradient forms disagree by {gap:.3g}")
        return GradientReport(J=J, grad=grad8, w_star=w, h_term=h, grad_alt=grad9,
                              normal_residual=float(np.max(np.abs(ws.A_mat @ w - b), initial=0.0)))


@dataclass
class GradientReport:
    """D-MSPBE value and gradient at one theta.

    ``grad`` is ``grad J`` (J carries no 1/2), computed as
    ``-2 [E sum_j (phi - phi') phi^T w - h]``; ``grad_alt`` is the
    ``-2 [-E sum_j phi' phi^T w + E sum_j phi delta - h]`` rearrangement.
    """

    J: float
    grad: np.ndarray
    w_star: np.ndarray
    h_term: np.ndarray
    grad_alt: np.ndarray | None = None
    normal_residual: float = 0.0

    @property
    def half_neg_grad(self) -> np.ndarray:
        return -0.5 * self.grad

    def to_dict(self) -> dict:
        out = {"J": self.J, "grad": self.grad.tolist(), "w_star": self.w_star.tolist(),
               "h_term": self.h_term.tolist()}
        if self.grad_alt is not None:
            out["grad_alt"] = self.grad_alt.tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def assemble(model, theta, mdp: TabularMDP, policy: np.ndarray, grid: SupportGrid,
             state_weights: np.ndarray | None = None, rule: str = "pushforward") -> DmspbeWorkspace:
    return DmspbeOracle(model, mdp, policy, grid, state_weights, rule).workspace(theta)


def j_dmspbe(ws: DmspbeWorkspace, grid: SupportGrid | None = None) -> float:
    """``||Phi^T D (F - G)||^2`` in the ``(Phi^T D Phi)^{-1}`` norm.

    Passing ``grid`` returns the delta_z-weighted variant (``delta_z * J``),
    which is on the same scale as the squared Cramer distance.
    """
    J = float(ws.b @ ws.w_star())
    return J * grid.delta_z if grid is not None else J


def grad_dmspbe(model, theta, mdp: TabularMDP, policy: np.ndarray, grid: SupportGrid,
                state_weights: np.ndarray | None = None, rule: str = "pushforward") -> GradientReport:
    return DmspbeOracle(model, mdp, policy, grid, state_weights, rule).grad(theta)


# ---------------------------------------------------------------------------
# non-distributional MSPBE


def _linear_td_moments(features, mdp, policy, state_weights):
    """``E[phi phi^T]``, ``E[phi (phi - gamma phi')^T]`` and ``E[r phi]`` under the given weights."""
    phi = np.asarray(features, dtype=float)
    d = state_weights
    C = phi.T @ (d[:, None] * phi)
    P_pi = mdp.state_transition(policy)
    r_pi = mdp.expected_reward(policy)
    A = phi.T @ (d[:, None] * (phi - mdp.gamma * P_pi @ phi))
    b = phi.T @ (d * r_pi)
    return C, A, b


def mspbe(features: np.ndarray, theta, mdp: TabularMDP, policy: np.ndarray,
          state_weights: np.ndarray | None = None) -> float:
    """``1/2 E[delta phi]^T E[phi phi^T]^{-1} E[delta phi]`` for a linear value model."""
    policy = check_policy(policy, mdp)
    if state_weights is None:
        state_weights = stationary_distribution(mdp, policy)
    C, A, b = _linear_td_moments(features, mdp, policy, np.asarray(state_weights, dtype=float))
    e = b - A @ np.asarray(theta, dtype=float)  # E[delta phi]
    return 0.5 * float(e @ _solve(C, e, _condition(C)))


def td_fixed_point(features: np.ndarray, mdp: TabularMDP, policy: np.ndarray,
                   state_weights: np.ndarray | None = None) -> np.ndarray:
    policy = check_policy(policy, mdp)
    if state_weights is None:
        state_weights = stationary_distribution(mdp, policy)
    _, A, b = _linear_td_moments(features, mdp, policy, np.asarray(state_weights, dtype=float))
    return np.linalg.solve(A, b)


# ---------------------------------------------------------------------------
# double-sampling diagnostic


def cramer_bellman_error(z: ValueDistributionTable, mdp: TabularMDP, policy: np.ndarray,
                         state_weights: np.ndarray | None = None) -> float:
    """``sum_i d(s_i) l2^2(Z(s_i), (TZ)(s_i))`` with the grid backup; reported, never optimized.

    State-action tables weight row ``(s, a)`` by ``d(s) pi(a|s)``.
    """
    policy = check_policy(policy, mdp)
    if state_weights is None:
        state_weights = stationary_distribution(mdp, policy)
    tz = bellman_backup_grid(z, mdp, policy)
    if z.n_rows == mdp.n_states:
        w = np.asarray(state_weights, dtype=float)
    else:
        w = (np.asarray(state_weights)[:, None] * policy).ravel()
    return float(sum(wi * cramer_sq(z.row(i), tz.row(i)) for i, wi in enumerate(w)))
