"""Transportation simplex for small discrete optimal transport problems.

Solves ``min <P, C>`` over plans ``P >= 0`` with row sums ``a`` and column
sums ``b``.  The basis is kept as a spanning tree on the bipartite graph of
rows and columns (``m + n - 1`` cells, degenerate zeros included); dual
potentials come from that tree and the entering cell is the one with the
most negative reduced cost.
"""

from __future__ import annotations

from collections import deque

import numpy as np

from .errors import InfeasibleError


def _northwest_corner(a, b):
    m, n = len(a), len(b)
    sa, sb = a.astype(float).copy(), b.astype(float).copy()
    plan = np.zeros((m, n))
    basis = []
    i = j = 0
    while True:
        q = min(sa[i], sb[j])
        plan[i, j] = q
        basis.append((i, j))
        sa[i] -= q
        sb[j] -= q
        if i == m - 1 and j == n - 1:
            break
        if (sa[i] <= sb[j] and i < m - 1) or j == n - 1:
            i += 1
        else:
            j += 1
    return plan, basis


def _potentials(basis, cost, m, n):
    # nodes 0..m-1 are rows, m..m+n-1 columns
    adj = [[] for _ in range(m + n)]
    for i, j in basis:
        adj[i].append(m + j)
        adj[m + j].append(i)
    pot = np.full(m + n, np.nan)
    pot[0] = 0.0
    queue = deque([0])
    while queue:
        node = queue.popleft()
        for nb in adj[node]:
            if np.isnan(pot[nb]):
                if node < m:
                    pot[nb] = cost[node, nb - m] - pot[node]
                else:
                    pot[nb] = cost[nb, node - m] - pot[node]
                queue.append(nb)
    return pot[:m], pot[m:], adj


def _tree_path(adj, start, goal):
    prev = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            break
        for nb in adj[node]:
            if nb not in prev:
                prev[nb] = node
                queue.append(nb)
    path = [goal]
    while prev[path[-1]] is not None:
        path.append(prev[path[-1]])
    return path[::-1]


def transport_lp(a, b, cost, tol: float = 1e-9, max_iter: int = 10_000):
    """Optimal transport cost and plan between weight vectors ``a`` and ``b``.

    Raises :class:`InfeasibleError` when weights are negative or the total
    masses differ by more than ``tol``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    cost = np.asarray(cost, dtype=float)
    if np.any(a < 0) or np.any(b < 0):
        raise InfeasibleError("transport weights must be nonnegative")
    if abs(a.sum() - b.sum()) > tol:
        raise InfeasibleError(f"total masses differ: {a.sum()} vs {b.sum()}")
    m, n = len(a), len(b)
    if cost.shape != (m, n):
        raise ValueError("cost matrix shape does not match the weights")
    plan, basis = _northwest_corner(a, b)
    scale = max(1.0, float(np.max(np.abs(cost))))
    for _ in range(max_iter):
        u, v, adj = _potentials(basis, cost, m, n)
        reduced = cost - u[:, None] - v[None, :]
        i, j = np.unravel_index(int(np.argmin(reduced)), reduced.shape)
        if reduced[i, j] >= -1e-12 * scale:
            break
        # cycle: entering cell (i, j) closes the tree path col_j -> ... -> row_i
        path = _tree_path(adj, m + j, i)
        cells = []
        for p, q in zip(path[:-1], path[1:]):
            cells.append((q, p - m) if p >= m else (p, q - m))
        minus = cells[0::2]
        plus = cells[1::2]
        theta_idx = min(range(len(minus)), key=lambda k: (plan[minus[k]], k))
        leaving = minus[theta_idx]
        theta = plan[leaving]
        for c in minus:
            plan[c] -= theta
        for c in plus:
            plan[c] += theta
        plan[i, j] += theta
        plan[leaving] = 0.0
        basis.remove(leaving)
        basis.append((int(i), int(j)))
    else:
        raise RuntimeError("transportation simplex did not terminate")
    return float(np.sum(plan * cost)), plan
