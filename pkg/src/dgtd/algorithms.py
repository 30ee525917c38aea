"""Sampled two-timescale learners.

Distributional GTD2, distributional TDC and distributional Greedy-GQ act on a
parametric CDF model (see :mod:`dgtd.approximator`); GTD2, TDC and Greedy-GQ
are the scalar-value baselines. Every step is a pure function of the current
:class:`LearnerState` and one transition and returns the next state.

Transitions reuse :class:`dgtd.mdp_env.Transition`: ``s`` and ``s_next`` are
whatever the model takes as input (a state id, a state-action row id or an
encoded vector). Greedy-GQ is the exception and gets raw states plus an
``encode(s, a)`` callable because it maximizes over next actions itself.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .mdp_env import Transition
from .value_distribution import SupportGrid, project_scalar_to_grid, read_cdf, target_indices

DEFAULT_RADIUS = 100.0


# ---------------------------------------------------------------------------
# step sizes


@dataclass(frozen=True)
class StepSchedule:
    """``a0 / (1 + t / t0) ** p`` for ``family="power"``, ``a0`` for ``"constant"``."""

    a0: float
    p: float = 1.0
    family: str = "power"
    t0: float = 1.0

    def __post_init__(self):
        if self.family not in ("power", "constant"):
            raise ValueError(f"unknown schedule family {self.family!r}")
        if not self.a0 > 0:
            raise ValueError("a0 must be positive")
        if self.family == "power" and (self.p < 0 or not self.t0 > 0):
            raise ValueError("power schedules need p >= 0 and t0 > 0")

    def __call__(self, t: int) -> float:
        if self.family == "constant":
            return self.a0
        return self.a0 / (1.0 + t / self.t0) ** self.p

    @property
    def robbins_monro(self) -> bool:
        """Sum diverges and sum of squares converges."""
        return self.family == "power" and 0.5 < self.p <= 1.0

    def to_dict(self) -> dict:
        return {"a0": self.a0, "p": self.p, "family": self.family, "t0": self.t0}


@dataclass(frozen=True)
class Schedules:
    """The slow (``alpha``, for theta) and fast (``beta``, for w) step sizes.

    With ``strict`` the pair must satisfy the two-timescale conditions:
    both Robbins-Monro and ``alpha_t / beta_t -> 0``, which for power laws
    means ``p_alpha > p_beta``.
    """

    alpha: StepSchedule
    beta: StepSchedule
    strict: bool = True

    def __post_init__(self):
        if self.strict:
            check_two_timescale(self.alpha, self.beta)

    @classmethod
    def default(cls, a0: float = 0.1, b0: float = 0.5, t0: float = 1.0) -> "Schedules":
        return cls(StepSchedule(a0, 1.0, t0=t0), StepSchedule(b0, 2.0 / 3.0, t0=t0))

    def to_dict(self) -> dict:
        return {"alpha": self.alpha.to_dict(), "beta": self.beta.to_dict(), "strict": self.strict}


def check_two_timescale(alpha: StepSchedule, beta: StepSchedule) -> None:
    for name, s in (("alpha", alpha), ("beta", beta)):
        if not s.robbins_monro:
            raise ValueError(f"{name} schedule must be a power law with exponent in (1/2, 1]")
    if not alpha.p > beta.p:
        raise ValueError("alpha_t / beta_t must vanish: need p_alpha > p_beta")


# ---------------------------------------------------------------------------
# state and helpers


@dataclass(frozen=True)
class LearnerState:
    theta: np.ndarray
    w: np.ndarray
    t: int = 0
    radius: float | None = DEFAULT_RADIUS

    @classmethod
    def init(cls, theta, radius: float | None = DEFAULT_RADIUS) -> "LearnerState":
        theta = np.asarray(theta, dtype=float).copy()
        if radius is not None:
            theta = project_ball(theta, radius)
        return cls(theta, np.zeros_like(theta), 0, radius)


def project_ball(theta, radius: float) -> np.ndarray:
    if not radius > 0:
        raise ValueError("radius must be positive")
    theta = np.asarray(theta, dtype=float)
    norm = np.linalg.norm(theta)
    return theta if norm <= radius else theta * (radius / norm)


@dataclass(frozen=True)
class DistributionalTarget:
    """What the learners need to shift a next-state CDF: the grid, gamma and rule."""

    grid: SupportGrid
    gamma: float
    rule: str = "pushforward"

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must be in [0, 1)")
        if self.rule == "nearest" and self.gamma == 0:
            raise ValueError("the nearest-atom rule divides by gamma; need gamma > 0")

    def indices(self, r: float) -> np.ndarray:
        return _indices(self.grid, float(r), self.gamma, self.rule)

    def terminal_cdf(self, r: float) -> np.ndarray:
        """CDF of the point mass at ``r`` (the return after a terminal step)."""
        return (np.arange(self.grid.m) >= project_scalar_to_grid(r, self.grid)).astype(float)


@functools.lru_cache(maxsize=4096)
def _indices(grid, r, gamma, rule):
    idx = target_indices(grid, r, gamma, rule)
    idx.setflags(write=False)
    return idx


def _pull_back(idx: np.ndarray, c: np.ndarray, m: int) -> np.ndarray:
    """Coefficients ``c'`` with ``sum_j c_j phi(x', z_idx[j]) = sum_k c'_k phi(x', z_k)``."""
    keep = idx >= 0
    return np.bincount(idx[keep], weights=c[keep], minlength=m)


def next_side_terms(model, theta, x_next, r, done, target: DistributionalTarget):
    """Shifted next-state CDF and a closure for ``sum_j c_j phi(x', shifted z_j)``."""
    m = target.grid.m
    if done:
        return target.terminal_cdf(r), lambda c: np.zeros(model.n_params)
    idx = target.indices(r)
    F_next = read_cdf(model.cdf(theta, x_next), idx)
    return F_next, lambda c: model.vjp(theta, x_next, _pull_back(idx, c, m))


def delta(model, theta, transition: Transition, target: DistributionalTarget) -> np.ndarray:
    """Temporal distribution difference ``F(s', shifted z_j) - F(s, z_j)`` per atom."""
    F_next, _ = next_side_terms(model, theta, transition.s_next, transition.r, transition.done, target)
    return F_next - model.cdf(theta, transition.s)


# ---------------------------------------------------------------------------
# distributional policy evaluation


def _dist_eval_step(kind, state, transition, model, schedules, target):
    theta, w, t = state.theta, state.w, state.t
    x = transition.s
    F_next, pull_next = next_side_terms(model, theta, transition.s_next, transition.r, transition.done, target)
    d = F_next - model.cdf(theta, x)
    u = model.jvp(theta, x, w)  # phi_j^T w per atom
    h = model.hvp_combo(theta, x, d - u, w)
    if kind == "gtd2":
        incr = model.vjp(theta, x, u) - pull_next(u) - h
    else:
        incr = model.vjp(theta, x, d) - pull_next(u) - h
    alpha, beta = schedules.alpha(t), schedules.beta(t)
    w_new = w + beta * model.vjp(theta, x, d - u)
    theta_new = theta + alpha * incr
    if state.radius is not None:
        theta_new = project_ball(theta_new, state.radius)
    return LearnerState(theta_new, w_new, t + 1, state.radius)


def dgtd2_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
               target: DistributionalTarget) -> LearnerState:
    """One distributional GTD2 step.

    ``w += beta sum_j (delta_j - phi_j^T w) phi_j`` and
    ``theta = Gamma(theta + alpha [sum_j (phi_j - phi'_j) phi_j^T w - h])``
    with the per-sample ``h = sum_j (delta_j - phi_j^T w) grad^2 F_j w``.
    """
    return _dist_eval_step("gtd2", state, transition, model, schedules, target)


def dtdc_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
              target: DistributionalTarget) -> LearnerState:
    """One distributional TDC step: ``theta`` moves along ``sum_j (delta_j phi_j - phi'_j phi_j^T w) - h``."""
    return _dist_eval_step("tdc", state, transition, model, schedules, target)


def dgreedygq_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
                   target: DistributionalTarget, eta: float = 1.0, n_actions: int = 2,
                   encode: Callable | None = None, project: bool = False) -> LearnerState:
    """One distributional Greedy-GQ step.

    ``a*`` maximizes the mean of the next state's distributions (ties go to
    the lowest action). ``eta`` scales the gradient correction; ``eta = 0`` is
    distributional Q-learning under the Cramer distance. There is no ``h``
    term, and the ball projection is only applied when ``project`` is set.
    ``encode(s, a)`` maps a raw state and action to a model input and
    defaults to the row id ``s * n_actions + a``.
    """
    if not 0 <= eta <= 1:
        raise ValueError("eta must be in [0, 1]")
    if encode is None:
        encode = lambda s, a: int(s) * n_actions + int(a)  # noqa: E731
    theta, w, t = state.theta, state.w, state.t
    x = encode(transition.s, transition.a)
    x_next = None
    if not transition.done:
        x_next = encode(transition.s_next, greedy_action(model, theta, transition.s_next, target.grid,
                                                         n_actions, encode))
    F_next, pull_next = next_side_terms(model, theta, x_next, transition.r, transition.done, target)
    d = F_next - model.cdf(theta, x)
    u = model.jvp(theta, x, w)
    alpha, beta = schedules.alpha(t), schedules.beta(t)
    incr = model.vjp(theta, x, d)
    if eta:
        incr = incr - eta * pull_next(u)
    w_new = w + beta * model.vjp(theta, x, d - u)
    theta_new = theta + alpha * incr
    if project and state.radius is not None:
        theta_new = project_ball(theta_new, state.radius)
    return LearnerState(theta_new, w_new, t + 1, state.radius)


def action_means(model, theta, s, grid: SupportGrid, n_actions: int, encode: Callable) -> np.ndarray:
    atoms = grid.atoms
    out = np.empty(n_actions)
    for a in range(n_actions):
        F = model.cdf(theta, encode(s, a))
        out[a] = np.diff(F, prepend=0.0) @ atoms
    return out


def greedy_action(model, theta, s, grid: SupportGrid, n_actions: int, encode: Callable) -> int:
    return int(np.argmax(action_means(model, theta, s, grid, n_actions, encode)))


def epsilon_greedy(model, theta, s, epsilon: float, rng: np.random.Generator, grid: SupportGrid,
                   n_actions: int = 2, encode: Callable | None = None) -> int:
    """Greedy on the mean with probability ``1 - epsilon``, uniform otherwise."""
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must be in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(n_actions))
    if encode is None:
        encode = lambda s, a: int(s) * n_actions + int(a)  # noqa: E731
    return greedy_action(model, theta, s, grid, n_actions, encode)


@dataclass(frozen=True)
class EpsilonDecay:
    """Linear decay from ``start`` to ``end`` over ``horizon`` calls, then flat."""

    start: float = 0.1
    end: float = 0.02
    horizon: int = 1000

    def __call__(self, k: int) -> float:
        if self.horizon <= 0:
            return self.end
        frac = min(max(k, 0) / self.horizon, 1.0)
        return self.start + frac * (self.end - self.start)


# ---------------------------------------------------------------------------
# scalar baselines


def _td_error(model, theta, transition: Transition, gamma: float) -> float:
    v_next = 0.0 if transition.done else model.value(theta, transition.s_next)
    return transition.r + gamma * v_next - model.value(theta, transition.s)


def _scalar_step(kind, state, transition, model, schedules, gamma, with_h):
    theta, w, t = state.theta, state.w, state.t
    phi = model.grad(theta, transition.s)
    phi_next = np.zeros_like(phi) if transition.done else model.grad(theta, transition.s_next)
    d = _td_error(model, theta, transition, gamma)
    u = float(phi @ w)
    if kind == "gtd2":
        incr = (phi - gamma * phi_next) * u
    else:
        incr = d * phi - gamma * phi_next * u
    if with_h:
        incr = incr - (d - u) * model.hvp(theta, transition.s, w)
    alpha, beta = schedules.alpha(t), schedules.beta(t)
    theta_new = theta + alpha * incr
    if state.radius is not None:
        theta_new = project_ball(theta_new, state.radius)
    return LearnerState(theta_new, w + beta * (d - u) * phi, t + 1, state.radius)


def gtd2_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
              gamma: float) -> LearnerState:
    """Linear GTD2: ``theta += alpha (phi - gamma phi') phi^T w``, ``w += beta (delta - phi^T w) phi``."""
    return _scalar_step("gtd2", state, transition, model, schedules, gamma, with_h=False)


def tdc_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
             gamma: float) -> LearnerState:
    """Linear TDC: ``theta += alpha (delta phi - gamma phi' phi^T w)``."""
    return _scalar_step("tdc", state, transition, model, schedules, gamma, with_h=False)


def nonlinear_gtd2_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
                        gamma: float) -> LearnerState:
    """GTD2 for a smooth value network, with ``h = (delta - phi^T w) grad^2 V w``."""
    return _scalar_step("gtd2", state, transition, model, schedules, gamma, with_h=True)


def nonlinear_tdc_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
                       gamma: float) -> LearnerState:
    return _scalar_step("tdc", state, transition, model, schedules, gamma, with_h=True)


def greedygq_step(state: LearnerState, transition: Transition, model, schedules: Schedules,
                  gamma: float, n_actions: int = 2, encode: Callable | None = None) -> LearnerState:
    """Linear Greedy-GQ on ``Q(s, a) = phi(s, a)^T theta`` with a greedy next action."""
    if encode is None:
        encode = lambda s, a: int(s) * n_actions + int(a)  # noqa: E731
    theta, w, t = state.theta, state.w, state.t
    x = encode(transition.s, transition.a)
    phi = model.grad(theta, x)
    if transition.done:
        phi_hat, q_next = np.zeros_like(phi), 0.0
    else:
        q = [model.value(theta, encode(transition.s_next, a)) for a in range(n_actions)]
        a_star = int(np.argmax(q))
        phi_hat, q_next = model.grad(theta, encode(transition.s_next, a_star)), q[a_star]
    d = transition.r + gamma * q_next - model.value(theta, x)
    u = float(phi @ w)
    alpha, beta = schedules.alpha(t), schedules.beta(t)
    theta_new = theta + alpha * (d * phi - gamma * u * phi_hat)
    return LearnerState(theta_new, w + beta * (d - u) * phi, t + 1, state.radius)


STEPS = {
    "dgtd2": dgtd2_step,
    "dtdc": dtdc_step,
    "gtd2": gtd2_step,
    "tdc": tdc_step,
    "nonlinear_gtd2": nonlinear_gtd2_step,
    "nonlinear_tdc": nonlinear_tdc_step,
}

__all__ = [
    "StepSchedule", "Schedules", "check_two_timescale", "LearnerState", "project_ball",
    "DistributionalTarget", "delta", "dgtd2_step", "dtdc_step", "dgreedygq_step",
    "action_means", "greedy_action", "epsilon_greedy", "EpsilonDecay",
    "gtd2_step", "tdc_step", "nonlinear_gtd2_step", "nonlinear_tdc_step", "greedygq_step",
]
