"""Categorical value distributions, the Cramer metric and distributional backups.

Atoms are indexed from 0 throughout: ``grid.atoms[k] == v_min + k * delta_z``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .mdp_env import TabularMDP

MASS_TOL = 1e-12
MERGE_TOL = 1e-12


@dataclass(frozen=True)
class SupportGrid:
    """Fixed lattice of ``m`` atoms spanning ``[v_min, v_max]``."""

    v_min: float
    v_max: float
    m: int

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 2:
            raise ValueError(f"need at least two atoms, got m={self.m}")
        if not self.v_max > self.v_min:
            raise ValueError(f"v_max ({self.v_max}) must exceed v_min ({self.v_min})")
        object.__setattr__(self, "m", int(self.m))
        object.__setattr__(self, "v_min", float(self.v_min))
        object.__setattr__(self, "v_max", float(self.v_max))

    @property
    def delta_z(self) -> float:
        return (self.v_max - self.v_min) / (self.m - 1)

    @property
    def atoms(self) -> np.ndarray:
        return self.v_min + np.arange(self.m) * self.delta_z

    def atom(self, k: int) -> float:
        return self.v_min + k * self.delta_z

    def to_dict(self) -> dict:
        return {"v_min": self.v_min, "v_max": self.v_max, "m": self.m}


def _check_probs(probs: np.ndarray, m: int | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    if m is not None and probs.shape[-1] != m:
        raise ValueError(f"expected {m} atom masses, got {probs.shape[-1]}")
    if np.any(probs < 0):
        raise ValueError("probabilities must be nonnegative")
    if np.any(np.abs(probs.sum(axis=-1) - 1.0) > MASS_TOL):
        raise ValueError("probabilities must sum to 1")
    return probs


@dataclass(frozen=True, eq=False)
class AtomDistribution:
    probs: np.ndarray
    grid: SupportGrid

    def __post_init__(self):
        probs = _check_probs(self.probs, self.grid.m).copy()
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def point_mass(cls, grid: SupportGrid, k: int) -> "AtomDistribution":
        p = np.zeros(grid.m)
        p[k] = 1.0
        return cls(p, grid)

    @classmethod
    def uniform(cls, grid: SupportGrid) -> "AtomDistribution":
        return cls(np.full(grid.m, 1.0 / grid.m), grid)

    @property
    def cdf(self) -> np.ndarray:
        return np.cumsum(self.probs)

    def to_finite(self) -> "FiniteSupportDistribution":
        return FiniteSupportDistribution(self.grid.atoms, self.probs)


class FiniteSupportDistribution:
    """Distribution on an arbitrary finite set of reals.

    Support points closer than ``MERGE_TOL`` are merged so ``values`` stays
    strictly increasing.
    """

    __slots__ = ("values", "masses")

    def __init__(self, values: Iterable[float], masses: Iterable[float]):
        values = np.asarray(values, dtype=float).ravel()
        masses = np.asarray(masses, dtype=float).ravel()
        if values.shape != masses.shape or values.size == 0:
            raise ValueError("values and masses must be nonempty and of equal length")
        if np.any(masses < 0):
            raise ValueError("masses must be nonnegative")
        if abs(masses.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"masses sum to {masses.sum()!r}, not 1")
        order = np.argsort(values, kind="stable")
        values, masses = values[order], masses[order]
        # start a new group wherever the gap to the previous point exceeds the tolerance
        starts = np.concatenate(([True], np.diff(values) > MERGE_TOL))
        group = np.cumsum(starts) - 1
        self.values = values[starts]
        self.masses = np.bincount(group, weights=masses)

    @classmethod
    def point_mass(cls, x: float) -> "FiniteSupportDistribution":
        return cls([x], [1.0])

    def cdf(self, x: np.ndarray | float) -> np.ndarray:
        cum = np.cumsum(self.masses)
        idx = np.searchsorted(self.values, x, side="right")
        return np.where(idx > 0, cum[np.maximum(idx - 1, 0)], 0.0)

    def mean(self) -> float:
        return float(self.values @ self.masses)

    def scale(self, c: float) -> "FiniteSupportDistribution":
        return FiniteSupportDistribution(c * self.values, self.masses)

    def shift(self, a: float) -> "FiniteSupportDistribution":
        return FiniteSupportDistribution(self.values + a, self.masses)

    def __repr__(self):
        return f"FiniteSupportDistribution(values={self.values!r}, masses={self.masses!r})"


def mixture(components: Sequence[tuple[float, FiniteSupportDistribution]]) -> FiniteSupportDistribution:
    """Weighted mixture; weights must sum to one."""
    values = np.concatenate([d.values for _, d in components])
    masses = np.concatenate([w * d.masses for w, d in components])
    return FiniteSupportDistribution(values, masses)


@dataclass(frozen=True, eq=False)
class ValueDistributionTable:
    """One categorical distribution per state (or per state-action pair)."""

    grid: SupportGrid
    rows: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(_check_probs(self.rows, self.grid.m)).copy()
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @classmethod
    def uniform(cls, grid: SupportGrid, n_rows: int) -> "ValueDistributionTable":
        return cls(grid, np.full((n_rows, grid.m), 1.0 / grid.m))

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]

    @property
    def cdfs(self) -> np.ndarray:
        return np.cumsum(self.rows, axis=1)

    def row(self, i: int) -> AtomDistribution:
        return AtomDistribution(self.rows[i], self.grid)

    def means(self) -> np.ndarray:
        return self.rows @ self.grid.atoms

    def to_json(self) -> str:
        return json.dumps({"grid": self.grid.to_dict(), "rows": self.rows.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "ValueDistributionTable":
        obj = json.loads(text)
        return cls(SupportGrid(**obj["grid"]), np.asarray(obj["rows"], dtype=float))


# ---------------------------------------------------------------------------
# metric


def cramer_sq(p: AtomDistribution, q: AtomDistribution) -> float:
    """Squared Cramer distance between two distributions on the same grid.

    Exact for step CDFs supported on the grid: the CDF difference is constant
    on each cell ``[z_k, z_{k+1})`` and the last term is always zero.
    """
    if p.grid != q.grid:
        raise ValueError("distributions live on different grids")
    diff = np.cumsum(p.probs) - np.cumsum(q.probs)
    return float(p.grid.delta_z * np.sum(diff * diff))


def cramer_sq_exact(p: FiniteSupportDistribution, q: FiniteSupportDistribution) -> float:
    """Piecewise-exact integral of the squared CDF difference."""
    xs = np.union1d(p.values, q.values)
    if xs.size < 2:
        return 0.0
    diff = p.cdf(xs[:-1]) - q.cdf(xs[:-1])
    return float(np.sum(diff * diff * np.diff(xs)))


def cramer(p, q) -> float:
    """The Cramer metric (square root of :func:`cramer_sq` / :func:`cramer_sq_exact`)."""
    if isinstance(p, AtomDistribution):
        return float(np.sqrt(max(cramer_sq(p, q), 0.0)))
    return float(np.sqrt(max(cramer_sq_exact(p, q), 0.0)))


def _row_dists(z) -> list:
    if isinstance(z, ValueDistributionTable):
        return [z.row(i) for i in range(z.n_rows)]
    return list(z)


def max_cramer(z1, z2, weights: np.ndarray | None = None) -> float:
    """Supremum over rows of the Cramer metric.

    ``z1`` and ``z2`` are either tables or equal-length lists of finite-support
    distributions. If ``weights`` is given, only rows with positive weight count.
    """
    rows1, rows2 = _row_dists(z1), _row_dists(z2)
    if len(rows1) != len(rows2):
        raise ValueError(f"row count mismatch: {len(rows1)} vs {len(rows2)}")
    if isinstance(z1, ValueDistributionTable) and isinstance(z2, ValueDistributionTable):
        if z1.grid != z2.grid:
            raise ValueError("tables live on different grids")
    mask = np.ones(len(rows1), dtype=bool) if weights is None else np.asarray(weights) > 0
    if mask.shape != (len(rows1),):
        raise ValueError("mask must have one entry per row")
    vals = [cramer(a, b) for a, b, keep in zip(rows1, rows2, mask) if keep]
    return max(vals, default=0.0)


def mean_of(dist: AtomDistribution) -> float:
    return float(dist.probs @ dist.grid.atoms)


# ---------------------------------------------------------------------------
# projection onto the grid


def project_scalar_to_grid(x: float, grid: SupportGrid) -> int:
    """Index of the nearest atom to ``x`` (0-based), clamped to the grid.

    Exact half-way points go to the larger index.
    """
    u = (x - grid.v_min) / grid.delta_z
    return int(np.clip(np.floor(u + 0.5), 0, grid.m - 1))


def project_to_grid(x: np.ndarray, grid: SupportGrid) -> np.ndarray:
    """Vectorized :func:`project_scalar_to_grid`."""
    u = (np.asarray(x, dtype=float) - grid.v_min) / grid.delta_z
    return np.clip(np.floor(u + 0.5), 0, grid.m - 1).astype(np.intp)


def pushforward_indices(grid: SupportGrid, r: float, gamma: float) -> np.ndarray:
    """Atom index receiving the mass of each atom under ``x -> r + gamma * x``."""
    return project_to_grid(r + gamma * grid.atoms, grid)


RULES = ("pushforward", "nearest")


def target_indices(grid: SupportGrid, r: float, gamma: float, rule: str = "pushforward") -> np.ndarray:
    """For each atom ``z_j``, the index at which the next-state CDF is read.

    The target CDF of ``r + gamma * Z(s')`` at ``z_j`` is ``F(s', z_idx[j])``,
    with ``idx == -1`` meaning the CDF is zero there.

    ``"pushforward"`` reads the CDF of the nearest-atom projection of
    ``r + gamma * Z(s')``, so the result matches :func:`bellman_backup_grid`
    exactly. ``"nearest"`` rounds ``(z_j - r) / gamma`` to its nearest atom
    and clamps to the grid at both ends.
    """
    if rule == "pushforward":
        dest = pushforward_indices(grid, r, gamma)
        # dest is nondecreasing, so the atoms landing at or below j form a prefix
        return np.searchsorted(dest, np.arange(grid.m), side="right") - 1
    if rule == "nearest":
        if gamma <= 0:
            raise ValueError("the nearest-atom rule divides by gamma; need gamma > 0")
        return project_to_grid((grid.atoms - r) / gamma, grid)
    raise ValueError(f"unknown projection rule {rule!r}; expected one of {RULES}")


def read_cdf(cdf: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Gather ``cdf[..., idx]`` treating index -1 as a CDF value of zero."""
    out = np.take(cdf, np.maximum(idx, 0), axis=-1)
    return np.where(idx >= 0, out, 0.0)


# ---------------------------------------------------------------------------
# distributional Bellman operator


def _row_layout(n_rows: int, mdp: "TabularMDP") -> bool:
    """True for state-action rows, False for per-state rows."""
    if n_rows == mdp.n_states:
        return False
    if n_rows == mdp.n_states * mdp.n_actions:
        return True
    raise ValueError(
        f"table has {n_rows} rows; expected {mdp.n_states} (states) or "
        f"{mdp.n_states * mdp.n_actions} (state-action pairs)"
    )


def _successors(mdp: "TabularMDP", policy: np.ndarray, s: int, a: int | None, state_action: bool):
    """Yield (prob, reward, next_row_index) for the branches out of a row.

    For per-state rows the action is drawn from the policy at ``s``; for
    state-action rows the next action is drawn from the policy at ``s'``.
    """
    actions = range(mdp.n_actions) if a is None else (a,)
    for act in actions:
        pa = 1.0 if a is not None else policy[s, act]
        if pa == 0:
            continue
        r = mdp.reward[s, act]
        for s2 in np.flatnonzero(mdp.transition[s, act]):
            ps = pa * mdp.transition[s, act, s2]
            if not state_action:
                yield ps, r, s2
                continue
            for a2 in np.flatnonzero(policy[s2]):
                yield ps * policy[s2, a2], r, s2 * mdp.n_actions + a2


def bellman_backup_grid(z: ValueDistributionTable, mdp: "TabularMDP", policy: np.ndarray) -> ValueDistributionTable:
    """Expected pushforward of each row, with every shifted atom rounded to the grid."""
    grid = z.grid
    state_action = _row_layout(z.n_rows, mdp)
    out = np.zeros_like(z.rows)
    for i in range(z.n_rows):
        s, a = divmod(i, mdp.n_actions) if state_action else (i, None)
        for prob, r, nxt in _successors(mdp, policy, s, a, state_action):
            dest = pushforward_indices(grid, r, mdp.gamma)
            np.add.at(out[i], dest, prob * z.rows[nxt])
    # absorb rounding drift so rows validate at 1e-12
    out = np.maximum(out, 0.0)
    out /= out.sum(axis=1, keepdims=True)
    return ValueDistributionTable(grid, out)


def bellman_backup_exact(z: Sequence[FiniteSupportDistribution], mdp: "TabularMDP", policy: np.ndarray) -> list[FiniteSupportDistribution]:
    """Distributional backup without grid projection; supports grow to ``{r + gamma * v}``."""
    z = list(z)
    state_action = _row_layout(len(z), mdp)
    out = []
    for i in range(len(z)):
        s, a = divmod(i, mdp.n_actions) if state_action else (i, None)
        parts = [
            (prob, z[nxt].scale(mdp.gamma).shift(r) if mdp.gamma > 0 else FiniteSupportDistribution.point_mass(r))
            for prob, r, nxt in _successors(mdp, policy, s, a, state_action)
        ]
        total = sum(p for p, _ in parts)
        out.append(mixture([(p / total, d) for p, d in parts]))
    return out


def iterate_to_fixed_point(z: ValueDistributionTable, mdp: "TabularMDP", policy: np.ndarray,
                           tol: float = 1e-14, max_iter: int = 100_000) -> tuple[ValueDistributionTable, int]:
    """Apply :func:`bellman_backup_grid` until successive tables stall within ``tol`` (sup norm)."""
    for it in range(1, max_iter + 1):
        nxt = bellman_backup_grid(z, mdp, policy)
        if np.max(np.abs(nxt.rows - z.rows)) <= tol:
            return nxt, it
        z = nxt
    raise RuntimeError(f"backup iteration did not stall within {max_iter} sweeps")
