"""Shared test instances and independent oracles."""

import numpy as np

from dgtd.approximator import LinearCdfModel, SoftmaxMlpModel
from dgtd.mdp_env import build_random_mdp, stationary_distribution, uniform_policy
from dgtd.objectives import COND_LIMIT, DmspbeOracle
from dgtd.value_distribution import SupportGrid, project_to_grid

GRID = SupportGrid(0.0, 10.0, 8)
# scalar inputs per state; one input and two hidden units without biases keep
# the network identifiable from three states
INPUTS = [[-1.0], [0.4], [1.3]]


def linear_instance(seed, m=5, d=4, n=3, k=2, gamma=0.9):
    rng = np.random.default_rng(seed)
    mdp = build_random_mdp(n, k, seed=seed, gamma=gamma)
    model = LinearCdfModel(rng.normal(size=(n, m, d)))
    grid = SupportGrid(0.0, 10.0, m)
    return mdp, uniform_policy(mdp), model, grid, rng.normal(size=d)


def mlp_model(m=GRID.m):
    return SoftmaxMlpModel(1, 2, m, "tanh", hidden_bias=False, output_bias=False, input_table=INPUTS)


def mlp_instance(seed, scale=2.0):
    """Identifiable tanh instance; theta is redrawn until A_mat is well conditioned."""
    rng = np.random.default_rng(seed)
    mdp = build_random_mdp(3, 2, seed=seed)
    pi = uniform_policy(mdp)
    model = mlp_model()
    oracle = DmspbeOracle(model, mdp, pi, GRID)
    while True:
        theta = model.init_params(rng) * scale
        if oracle.workspace(theta).cond <= COND_LIMIT:
            return mdp, pi, model, GRID, theta


def dense_dmspbe(model, theta, mdp, policy, grid, d=None):
    """Second assembly path: enumerate (s, a, s', k) and push atom masses forward."""
    if d is None:
        d = stationary_distribution(mdp, policy)
    n, m = mdp.n_states, grid.m
    Phi = np.concatenate([model.jacobian(theta, s) for s in range(n)])
    F = np.concatenate([model.cdf(theta, s) for s in range(n)])
    G = np.zeros(n * m)
    for s in range(n):
        for a in range(mdp.n_actions):
            moved = project_to_grid(mdp.reward[s, a] + mdp.gamma * grid.atoms, grid)
            for s2 in range(n):
                w = policy[s, a] * mdp.transition[s, a, s2]
                mass = np.diff(model.cdf(theta, s2), prepend=0.0)
                g = np.zeros(m)
                np.add.at(g, moved, mass)
                G[s * m:(s + 1) * m] += w * np.cumsum(g)
    D = np.diag(np.repeat(d, m))
    b = Phi.T @ D @ (F - G)
    return float(b @ np.linalg.solve(Phi.T @ D @ Phi, b))


def fd_grad(f, theta, eps):
    g = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = eps
        g[i] = (f(theta + e) - f(theta - e)) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))
