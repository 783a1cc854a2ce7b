"""Exact optimal transport between equal-size uniform point clouds.

The squared-distance assignment problem is solved with scipy's
shortest-augmenting-path solver.  Among optimal assignments the
lexicographically smallest one is returned, so results are deterministic
even with exact cost ties.
"""

from __future__ import annotations

import itertools
import math
from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

MAX_BRUTEFORCE = 9


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Uniformly weighted point cloud, ``points`` of shape (n, d)."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or len(pts) == 0:
            raise ValueError("an empirical measure needs a non-empty (n, d) array of points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("empirical measure contains non-finite points")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def __len__(self):
        return self.n


@dataclass(frozen=True)
class Coupling:
    """Monge coupling: source i is sent to target ``assignment[i]``."""

    assignment: np.ndarray
    cost: float

    @property
    def w2(self) -> float:
        return math.sqrt(max(self.cost, 0.0))


def _points(m) -> np.ndarray:
    return m.points if isinstance(m, EmpiricalMeasure) else EmpiricalMeasure(m).points


def _check_pair(x: np.ndarray, y: np.ndarray):
    if len(x) != len(y):
        raise ValueError(f"size mismatch: {len(x)} vs {len(y)} points")
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """C[i, j] = ||x_i - y_j||^2, computed from differences (no expansion)."""
    diff = x[:, None, :] - y[None, :, :]
    return np.einsum("ijd,ijd->ij", diff, diff)


def assignment_cost(cost: np.ndarray, assignment: np.ndarray) -> float:
    """(1/n) sum_i C[i, assignment[i]], summed in source order."""
    n = len(assignment)
    return float(cost[np.arange(n), assignment].sum() / n)


def _column_potentials(cost: np.ndarray, sigma: np.ndarray, tol: float) -> np.ndarray:
    """Dual column potentials v making every reduced cost nonnegative.

    With u_i = C[i, sigma_i] - v[sigma_i], feasibility reads
    v_j <= v[sigma_i] + C[i, j] - C[i, sigma_i]: a shortest-path system over
    columns, solved by vectorized Bellman-Ford from a virtual source.
    """
    n = len(sigma)
    w = cost - cost[np.arange(n), sigma][:, None]
    v = np.zeros(n)
    for _ in range(n + 1):
        cand = (v[sigma][:, None] + w).min(axis=0)
        new = np.minimum(v, cand)
        if np.all(v - new <= tol):
            break
        v = new
    return v


def _lexicographic_matching(tight: list[np.ndarray], match: np.ndarray) -> np.ndarray:
    """Lexicographically smallest perfect matching inside the tight-edge graph.

    ``match`` is any perfect matching using tight edges.  Rows are fixed in
    order; row i takes the smallest tight column for which the remaining rows
    can still be matched, found by an alternating-path search.
    """
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=int)
    owner[match] = np.arange(n)
    fixed = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in tight[i]:
            if j == match[i]:
                break
            r = owner[j]
            if fixed[r]:
                continue
            # row r must move to some column, ending at the one i frees up
            free_col = match[i]
            parent = {}
            seen_rows = {r, i}
            queue = deque([r])
            found = None
            while queue and found is None:
                row = queue.popleft()
                for col in tight[row]:
                    if col == j or col in parent:
                        continue
                    if col == free_col:
                        parent[col] = row
                        found = col
                        break
                    nxt = owner[col]
                    if fixed[nxt] or nxt in seen_rows:
                        continue
                    parent[col] = row
                    seen_rows.add(nxt)
                    queue.append(nxt)
            if found is None:
                continue
            col = found
            while True:
                row = parent[col]
                prev = match[row]
                match[row] = col
                owner[col] = row
                if row == r:
                    break
                col = prev
            match[i] = j
            owner[j] = i
            break
        fixed[i] = True
    return match


def w2_exact(mu, nu, *, tie_tol: float = 1e-12) -> Coupling:
    """Optimal squared-distance assignment between equal-size uniform clouds.

    Returns the lexicographically smallest assignment among all optimal ones.
    ``tie_tol`` is relative to the largest entry of the cost matrix.
    """
    x, y = _points(mu), _points(nu)
    _check_pair(x, y)
    cost = squared_distances(x, y)
    n = len(x)
    _, sigma = linear_sum_assignment(cost)
    if n > 1:
        tol = tie_tol * max(1.0, float(cost.max()))
        v = _column_potentials(cost, sigma, tol)
        u = cost[np.arange(n), sigma] - v[sigma]
        reduced = cost - u[:, None] - v[None, :]
        tight = [np.flatnonzero(row <= tol) for row in reduced]
        sigma = _lexicographic_matching(tight, sigma)
    return Coupling(np.asarray(sigma, dtype=int), assignment_cost(cost, sigma))


def w2_bruteforce(mu, nu) -> Coupling:
    """Exhaustive minimum over all n! assignments (test oracle, n <= 9).

    Permutations are enumerated in lexicographic order and only a strictly
    smaller cost replaces the incumbent, so ties resolve to the
    lexicographically smallest assignment.
    """
    x, y = _points(mu), _points(nu)
    _check_pair(x, y)
    n = len(x)
    if n > MAX_BRUTEFORCE:
        raise ValueError(f"brute force limited to n <= {MAX_BRUTEFORCE}, got {n}")
    cost = squared_distances(x, y)
    perms = np.array(list(itertools.permutations(range(n))), dtype=int)
    totals = np.zeros(len(perms))
    for i in range(n):
        totals += cost[i, perms[:, i]]
    best = perms[int(np.argmin(totals))]
    return Coupling(best, assignment_cost(cost, best))


def coupling_displacement_cost(mu, nu) -> float:
    """(1/n) sum_i ||x_i - y_i||^2 for index-paired clouds.

    Pairing by index is a valid coupling, so this upper-bounds W2^2.
    """
    x, y = _points(mu), _points(nu)
    _check_pair(x, y)
    diff = x - y
    return float(np.einsum("nd,nd->n", diff, diff).mean())
