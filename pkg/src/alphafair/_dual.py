"""Batched projected Newton method for small nonnegatively constrained duals.

Both the bandwidth allocator and the lifting map reduce to minimising a
smooth convex function of a short price vector ``p >= 0``. Problems are
solved in batches (one row of ``p`` per problem) so that thousands of lattice
states can share each linear-algebra call.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

ARMIJO = 1e-4
MAX_HALVINGS = 60
MAX_SHRINK = 200
BISECTIONS = 52


@dataclass
class DualProblem:
    """Callbacks evaluated on a subset ``rows`` of the batch.

    value(p, rows) -> (k,), +inf outside the domain
    grad_hess(p, rows) -> (k, J), (k, J, J)
    residual(p, rows) -> (k,) optimality certificate, zero at the optimum
    """

    value: Callable
    grad_hess: Callable
    residual: Callable


def _slope_search(problem: DualProblem, p: np.ndarray, d: np.ndarray, rows: np.ndarray):
    """Step along the projected path to where its slope changes sign.

    The slope is monotone for a convex objective, so this needs only gradients.
    Returns the new points and a mask of rows that moved.
    """

    def slope(t, sel):
        raw = p[sel] + t[:, None] * d[sel]
        g, _ = problem.grad_hess(np.maximum(raw, 0.0), rows[sel])
        return np.sum(np.where(raw > 0, g * d[sel], 0.0), axis=1)

    k = len(p)
    lo = np.zeros(k)
    hi = np.ones(k)
    rising = slope(hi, np.arange(k)) > 0
    # still descending at t = 1: the direction may be far too short, so grow it
    grow = np.flatnonzero(~rising)
    for _ in range(MAX_SHRINK):
        if not grow.size:
            break
        lo[grow] = hi[grow]
        hi[grow] *= 2.0
        up = slope(hi[grow], grow) >= 0
        grow = grow[~up]
    lo[grow] = hi[grow]
    hi[grow] = lo[grow]
    # past the crossing at t = 1: shrink geometrically, it can sit many decades lower
    left = np.flatnonzero(rising)
    for _ in range(MAX_SHRINK):
        if not left.size:
            break
        t = 0.5 * hi[left]
        down = slope(t, left) <= 0
        lo[left[down]] = t[down]
        hi[left[~down]] = t[~down]
        left = left[~down]
    live = np.flatnonzero((lo > 0) & (lo < hi))
    for _ in range(BISECTIONS):
        if not live.size:
            break
        mid = 0.5 * (lo[live] + hi[live])
        down = slope(mid, live) <= 0
        lo[live[down]] = mid[down]
        hi[live[~down]] = mid[~down]
    return np.maximum(p + lo[:, None] * d, 0.0), lo > 0


def minimize(problem: DualProblem, p0: np.ndarray, tol: float, max_iter: int,
             accept: float | None = None):
    """Return ``(p, residual, iterations)``.

    Rows stop at ``tol``, or earlier once they are within ``accept`` and the
    residual has stopped shrinking (roundoff floor).
    """
    accept = tol if accept is None else accept
    p = np.array(p0, dtype=float)
    batch, dim = p.shape
    resid = np.full(batch, np.inf)
    rows = np.arange(batch)
    eye = np.eye(dim)
    it = 0
    while rows.size and it < max_iter:
        r = problem.residual(p[rows], rows)
        stalled = (r <= accept) & (r > 0.5 * resid[rows])
        resid[rows] = r
        rows = rows[(r > tol) & ~stalled]
        if not rows.size:
            break
        it += 1
        pr = p[rows]
        g, h = problem.grad_hess(pr, rows)

        # epsilon-binding set: at (or near) the bound with the gradient pushing outward
        proj_gap = np.linalg.norm(pr - np.maximum(pr - g, 0.0), axis=1, keepdims=True)
        binding = (pr <= np.minimum(1e-3, proj_gap)) & (g > 0)
        free = ~binding
        hr = np.where(free[:, :, None] & free[:, None, :], h, 0.0)
        diag = np.einsum("kii->ki", hr)
        scale = np.maximum(diag.max(axis=1), 1e-300)
        hr = hr + eye * np.where(free, 1e-12 * scale[:, None], 1.0)[:, :, None]
        gr = np.where(free, g, 0.0)
        d = -np.linalg.solve(hr, gr[:, :, None])[:, :, 0]
        hdiag = np.einsum("kii->ki", h)
        d = np.where(binding, -g / np.where(hdiag > 0, hdiag, 1.0), d)

        f0 = problem.value(pr, rows)
        slack = 1e-13 * (1.0 + np.abs(f0))
        step = np.ones(len(rows))
        new = pr.copy()
        flat = np.zeros(len(rows), dtype=bool)
        pending = np.arange(len(rows))
        for _ in range(MAX_HALVINGS):
            cand = np.maximum(pr[pending] + step[pending, None] * d[pending], 0.0)
            fc = problem.value(cand, rows[pending])
            decrease = np.sum(g[pending] * (cand - pr[pending]), axis=1)
            target = f0[pending] + ARMIJO * decrease
            ok = fc <= target + slack[pending]
            new[pending[ok]] = cand[ok]
            flat[pending[ok]] = fc[ok] > target[ok]
            pending = pending[~ok]
            if not pending.size:
                break
            step[pending] *= 0.5
        # where the value change is lost in roundoff, search on the slope instead
        flat[pending] = True
        if flat.any():
            idx = np.flatnonzero(flat)
            new[idx], moved = _slope_search(problem, pr[idx], d[idx], rows[idx])
            pending = idx[~moved]
        p[rows] = new
        # a row whose line search never accepted cannot make progress
        if pending.size:
            rows = np.setdiff1d(rows, rows[pending])
    if rows.size:
        resid[rows] = problem.residual(p[rows], rows)
    return p, resid, it
