"""Finite MDPs, environment builders, transition streams and cart-pole dynamics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

STOCHASTIC_TOL = 1e-12
TELEPORT = 1e-6

# grid-world action ids
UP, DOWN, LEFT, RIGHT = range(4)
_MOVES = {UP: (-1, 0), DOWN: (1, 0), LEFT: (0, -1), RIGHT: (0, 1)}


@dataclass(frozen=True, eq=False)
class TabularMDP:
    """Finite MDP with transition tensor ``P[s, a, s']`` and reward table ``R[s, a]``.

    ``gamma = 0`` is admitted (degenerate one-step returns); ``gamma >= 1`` is not.
    """

    transition: np.ndarray
    reward: np.ndarray
    gamma: float

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        R = np.array(self.reward, dtype=float)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        if R.shape != P.shape[:2]:
            raise ValueError(f"reward must have shape {P.shape[:2]}, got {R.shape}")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=2) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("every P(.|s,a) must be a probability vector")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not np.all(np.isfinite(R)):
            raise ValueError("rewards must be finite")
        P.setflags(write=False)
        R.setflags(write=False)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", R)
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def state_transition(self, policy: np.ndarray) -> np.ndarray:
        """``P^pi(s, s')``."""
        return np.einsum("sa,sat->st", policy, self.transition)

    def expected_reward(self, policy: np.ndarray) -> np.ndarray:
        """``R^pi(s)``."""
        return np.sum(policy * self.reward, axis=1)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "P": self.transition.tolist(),
            "R": self.reward.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, obj: dict) -> "TabularMDP":
        mdp = cls(np.asarray(obj["P"], dtype=float), np.asarray(obj["R"], dtype=float), obj["gamma"])
        if (mdp.n_states, mdp.n_actions) != (obj.get("n_states", mdp.n_states), obj.get("n_actions", mdp.n_actions)):
            raise ValueError("declared sizes disagree with the P tensor")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularMDP":
        return cls.from_dict(json.loads(text))


def check_policy(policy: np.ndarray, mdp: TabularMDP | None = None) -> np.ndarray:
    policy = np.asarray(policy, dtype=float)
    if policy.ndim != 2:
        raise ValueError("policy must be an (S, A) table")
    if mdp is not None and policy.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(f"policy shape {policy.shape} does not match MDP {(mdp.n_states, mdp.n_actions)}")
    if np.any(policy < 0) or np.any(np.abs(policy.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise ValueError("policy rows must be probability vectors")
    return policy


def uniform_policy(mdp: TabularMDP) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def deterministic_policy(actions, n_actions: int) -> np.ndarray:
    actions = np.asarray(actions, dtype=int)
    pi = np.zeros((actions.size, n_actions))
    pi[np.arange(actions.size), actions] = 1.0
    return pi


# ---------------------------------------------------------------------------
# builders


def build_grid_world(width: int, height: int, goal: int | tuple[int, int] | None = None,
                     step_reward: float = 0.0, goal_reward: float = 1.0, gamma: float = 0.9,
                     goal_mode: str = "absorbing", start: int = 0) -> TabularMDP:
    """Deterministic 4-action grid world; cell ``(row, col)`` is state ``row * width + col``.

    Moves into walls leave the agent in place. Entering the goal pays
    ``goal_reward``, every other move pays ``step_reward``. With
    ``goal_mode="absorbing"`` the goal loops onto itself with zero reward; with
    ``"restart"`` every action from the goal returns to ``start`` with zero reward.
    """
    n = width * height
    if width < 1 or height < 1 or n < 2:
        raise ValueError("grid needs at least two cells")
    if goal is None:
        goal = n - 1
    if isinstance(goal, tuple):
        row, col = goal
        if not (0 <= row < height and 0 <= col < width):
            raise ValueError(f"goal {goal} outside the {height}x{width} grid")
        goal = row * width + col
    if not 0 <= goal < n:
        raise ValueError(f"goal {goal} outside the grid")
    if goal_mode not in ("absorbing", "restart"):
        raise ValueError(f"unknown goal_mode {goal_mode!r}")

    P = np.zeros((n, 4, n))
    R = np.full((n, 4), float(step_reward))
    for s in range(n):
        row, col = divmod(s, width)
        for a, (dr, dc) in _MOVES.items():
            if s == goal:
                P[s, a, goal if goal_mode == "absorbing" else start] = 1.0
                R[s, a] = 0.0
                continue
            r2 = min(max(row + dr, 0), height - 1)
            c2 = min(max(col + dc, 0), width - 1)
            s2 = r2 * width + c2
            P[s, a, s2] = 1.0
            if s2 == goal:
                R[s, a] = goal_reward
    return TabularMDP(P, R, gamma)


def build_random_mdp(n_states: int, n_actions: int, seed: int, gamma: float = 0.9) -> TabularMDP:
    """Dense random MDP: normalized positive transition draws, rewards uniform on [0, 1]."""
    if n_states < 1 or n_actions < 1:
        raise ValueError("need at least one state and one action")
    rng = np.random.default_rng(seed)
    P = rng.uniform(0.05, 1.0, size=(n_states, n_actions, n_states))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return TabularMDP(P, R, gamma)


# ---------------------------------------------------------------------------
# planning and stationarity


def value_iteration(mdp: TabularMDP, tol: float = 1e-10, max_iter: int = 1_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Optimal Q table and its greedy policy (ties go to the lowest action id).

    Stops once the sup-norm Bellman residual is at most ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    Q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        Q_new = mdp.reward + mdp.gamma * mdp.transition @ Q.max(axis=1)
        residual = np.max(np.abs(Q_new - Q))
        Q = Q_new
        if residual <= tol:
            break
    else:
        raise RuntimeError("value iteration hit the iteration cap")
    return Q, deterministic_policy(greedy_actions(Q, atol=10 * tol), mdp.n_actions)


def greedy_actions(Q: np.ndarray, atol: float = 0.0) -> np.ndarray:
    """Per-row argmax; actions within ``atol`` of the best count as ties and the lowest id wins."""
    Q = np.atleast_2d(Q)
    return np.argmax(Q >= Q.max(axis=1, keepdims=True) - atol, axis=1)


def perturb_policy(policy: np.ndarray, epsilon: float) -> np.ndarray:
    """Mix the policy with the uniform policy: ``(1 - eps) * pi + eps / |A|``."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    policy = np.asarray(policy, dtype=float)
    return (1.0 - epsilon) * policy + epsilon / policy.shape[1]


def teleport_chain(mdp: TabularMDP, policy: np.ndarray, teleport: float = TELEPORT) -> np.ndarray:
    """``P^pi`` mixed with a uniform restart so every chain is irreducible."""
    P_pi = mdp.state_transition(policy)
    return (1.0 - teleport) * P_pi + teleport / mdp.n_states


def stationary_distribution(mdp: TabularMDP, policy: np.ndarray, tol: float = 1e-10,
                            teleport: float = TELEPORT) -> np.ndarray:
    """Stationary state distribution of the teleport-mixed chain ``P^pi``.

    Solved directly as a linear system; raises if the residual
    ``||d P - d||_1`` exceeds ``tol``.
    """
    P = teleport_chain(mdp, check_policy(policy, mdp), teleport)
    n = mdp.n_states
    # replace one balance equation by the normalization constraint
    M = P.T - np.eye(n)
    M[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        d = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError("stationary distribution is not unique") from exc
    d = np.maximum(d, 0.0)
    d /= d.sum()
    if np.sum(np.abs(d @ P - d)) > tol:
        raise RuntimeError("stationary distribution did not converge to tolerance")
    return d


# ---------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class Transition:
    s: int
    a: int
    r: float
    s_next: int
    a_next: int | None = None
    done: bool = False


def sample_stream(mdp: TabularMDP, behavior: np.ndarray, mode: str = "trajectory", seed: int | np.random.Generator = 0,
                  target: np.ndarray | None = None, burn_in: int = 1000, teleport: float = TELEPORT) -> Iterator[Transition]:
    """Endless stream of transitions ``(s, a, r, s', a')``.

    States come from the behavior chain: in ``"trajectory"`` mode the chain is
    followed after ``burn_in`` steps, in ``"iid"`` mode every state is drawn
    afresh from its stationary distribution. The emitted action, next state and
    next action follow ``target`` (defaults to ``behavior``), so for off-policy
    evaluation ``s'`` is not the chain's next state. The chain carries the same
    ``teleport`` restart used by :func:`stationary_distribution`.
    """
    if mode not in ("trajectory", "iid"):
        raise ValueError(f"unknown stream mode {mode!r}")
    behavior = check_policy(behavior, mdp)
    target = behavior if target is None else check_policy(target, mdp)
    on_policy = np.array_equal(target, behavior)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = mdp.n_states
    P = mdp.transition
    tb = np.cumsum(behavior, axis=1)
    tt = np.cumsum(target, axis=1)
    cP = np.cumsum(P, axis=2)

    def draw(cum):
        return min(int(np.searchsorted(cum, rng.random(), side="right")), cum.size - 1)

    def chain_step(s):
        if teleport > 0 and rng.random() < teleport:
            return int(rng.integers(n))
        return draw(cP[s, draw(tb[s])])

    if mode == "iid":
        d = stationary_distribution(mdp, behavior, teleport=teleport)
        cd = np.cumsum(d)
        while True:
            s = draw(cd)
            a = draw(tt[s])
            s2 = draw(cP[s, a])
            yield Transition(s, a, float(mdp.reward[s, a]), s2, draw(tt[s2]))

    s = int(rng.integers(n))
    for _ in range(burn_in):
        s = chain_step(s)
    while True:
        a = draw(tt[s])
        s2 = draw(cP[s, a])
        yield Transition(s, a, float(mdp.reward[s, a]), s2, draw(tt[s2]))
        if teleport > 0 and rng.random() < teleport:
            s = int(rng.integers(n))
        elif on_policy:
            s = s2
        else:
            s = draw(cP[s, draw(tb[s])])


def sample_iid_batch(mdp: TabularMDP, policy: np.ndarray, d: np.ndarray, size: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized iid draws ``s ~ d, a ~ pi(.|s), s' ~ P(.|s,a)``."""
    n, k = mdp.n_states, mdp.n_actions
    s = rng.choice(n, size=size, p=d)
    u = rng.random(size)[:, None]
    a = np.minimum((u > np.cumsum(policy[s], axis=1)).sum(axis=1), k - 1)
    u = rng.random(size)[:, None]
    s2 = np.minimum((u > np.cumsum(mdp.transition[s, a], axis=1)).sum(axis=1), n - 1)
    return s, a, s2


# ---------------------------------------------------------------------------
# cart-pole


@dataclass(frozen=True)
class CartPoleParams:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    force: float = 10.0
    dt: float = 0.02
    angle_limit: float = 12 * 2 * math.pi / 360
    position_limit: float = 2.4
    max_steps: int = 200

    @classmethod
    def v0(cls) -> "CartPoleParams":
        return cls(max_steps=200)

    @classmethod
    def v1(cls) -> "CartPoleParams":
        return cls(max_steps=500)


@dataclass(frozen=True)
class CartPoleState:
    x: float
    x_dot: float
    theta: float
    theta_dot: float
    steps: int = 0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.x_dot, self.theta, self.theta_dot])


LEFT_PUSH, RIGHT_PUSH = 0, 1
CARTPOLE_SCALES = np.array([2.4, 3.0, 0.21, 3.5])


def cartpole_step(state: CartPoleState, action: int, params: CartPoleParams = CartPoleParams()) -> tuple[CartPoleState, float, bool]:
    """Semi-implicit Euler step of the classic cart-pole.

    Returns ``(next_state, reward, done)``; ``reward`` is +1 for every step taken.
    """
    if action not in (LEFT_PUSH, RIGHT_PUSH):
        raise ValueError(f"action must be 0 (left) or 1 (right), got {action}")
    p = params
    total_mass = p.cart_mass + p.pole_mass
    polemass_length = p.pole_mass * p.half_length
    force = p.force if action == RIGHT_PUSH else -p.force
    cos, sin = math.cos(state.theta), math.sin(state.theta)
    temp = (force + polemass_length * state.theta_dot ** 2 * sin) / total_mass
    theta_acc = (p.gravity * sin - cos * temp) / (
        p.half_length * (4.0 / 3.0 - p.pole_mass * cos ** 2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos / total_mass
    x_dot = state.x_dot + p.dt * x_acc
    x = state.x + p.dt * x_dot
    theta_dot = state.theta_dot + p.dt * theta_acc
    theta = state.theta + p.dt * theta_dot
    nxt = CartPoleState(x, x_dot, theta, theta_dot, state.steps + 1)
    done = (abs(theta) > p.angle_limit or abs(x) > p.position_limit or nxt.steps >= p.max_steps)
    return nxt, 1.0, done


def cartpole_failed(state: CartPoleState, params: CartPoleParams = CartPoleParams()) -> bool:
    """True if the episode ended by falling or leaving the track (not by the step cap)."""
    return abs(state.theta) > params.angle_limit or abs(state.x) > params.position_limit


def cartpole_reset(rng: np.random.Generator) -> CartPoleState:
    x, x_dot, theta, theta_dot = rng.uniform(-0.05, 0.05, size=4)
    return CartPoleState(float(x), float(x_dot), float(theta), float(theta_dot))
