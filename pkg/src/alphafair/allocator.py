"""Alpha-fair bandwidth allocation with an optimality certificate.

For a flow vector ``n`` the allocation maximises

    sum_i kappa_i n_i^alpha x_i^(1-alpha) / (1-alpha)     (log utility at alpha=1)

over the routes with ``n_i > 0`` subject to the link capacities. The solver
works on link prices ``p >= 0``: given prices, each route's optimal rate is
``n_i (kappa_i / (A^T p)_i)^(1/alpha)``, and the prices are found by a
projected Newton method on the (convex) dual with Armijo backtracking.

Because the allocation is invariant under ``n -> c n``, every problem is
solved on the state rescaled to unit sup-norm. This keeps the prices of
order one whatever the magnitude of ``n``; reported prices are mapped back
to the original scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _dual
from .errors import SolverDidNotConverge
from .model import NetworkSpec

ACTIVE_THRESHOLD = 1e-12
TOLERANCE = 1e-9
MAX_ITER = 100_000


@dataclass(frozen=True)
class Allocation:
    rates: np.ndarray
    dual_prices: np.ndarray
    kkt_residual: float


def _normalise(states: np.ndarray):
    active = states > ACTIVE_THRESHOLD
    scale = np.where(active, states, 0.0).max(axis=1)
    safe = np.where(scale > 0, scale, 1.0)
    return np.where(active, states / safe[:, None], 0.0), active, scale


def _kkt_terms(spec: NetworkSpec, nh, active, rates, prices):
    """Residual of the normalised problem, one value per row."""
    a = spec.incidence
    alpha = spec.alpha
    s = prices @ a
    with np.errstate(divide="ignore", invalid="ignore"):
        marginal = spec.weights * nh**alpha * rates ** (-alpha)
    stat = np.where(active, np.abs(marginal - s), 0.0)
    stat = np.where(active & ~(rates > 0), np.inf, stat)
    slack = spec.capacity - rates @ a.T
    comp = np.abs(prices * slack).max(axis=1)
    infeas = np.maximum(-slack, 0.0).max(axis=1)
    infeas = np.maximum(infeas, np.where(active, 0.0, np.abs(rates)).max(axis=1))
    infeas = np.maximum(infeas, np.maximum(-prices, 0.0).max(axis=1))
    return np.nan_to_num(stat.max(axis=1), nan=np.inf) + comp + infeas


def _response(spec: NetworkSpec, nh, active, prices):
    s = prices @ spec.incidence
    ok = np.where(active, s > 0, True).all(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rates = nh * (spec.weights / s) ** (1.0 / spec.alpha)
    rates = np.where(active, rates, 0.0)
    return s, rates, ok


def _problem(spec: NetworkSpec, nh, active) -> _dual.DualProblem:
    a = spec.incidence
    alpha = spec.alpha
    cap = spec.capacity

    def value(p, rows):
        s, rates, ok = _response(spec, nh[rows], active[rows], p)
        with np.errstate(divide="ignore", invalid="ignore"):
            if alpha == 1.0:
                kn = spec.weights * nh[rows]
                terms = kn * np.log(rates) - kn
            else:
                terms = alpha / (1.0 - alpha) * s * rates
        terms = np.where(active[rows], terms, 0.0)
        out = terms.sum(axis=1) + p @ cap
        return np.where(ok & np.isfinite(out), out, np.inf)

    def grad_hess(p, rows):
        s, rates, _ = _response(spec, nh[rows], active[rows], p)
        g = cap - rates @ a.T
        with np.errstate(divide="ignore", invalid="ignore"):
            curv = np.where(active[rows], rates / (alpha * s), 0.0)
        h = np.einsum("ji,ki,bi->bjk", a, a, curv)
        return g, h

    def residual(p, rows):
        _, rates, ok = _response(spec, nh[rows], active[rows], p)
        r = _kkt_terms(spec, nh[rows], active[rows], rates, p)
        return np.where(ok, r, np.inf)

    return _dual.DualProblem(value, grad_hess, residual)


def _initial_prices(spec: NetworkSpec, nh, active):
    # price each link as if it were alone in the network
    share = np.where(active, spec.weights ** (1.0 / spec.alpha) * nh, 0.0)
    demand = share @ spec.incidence.T
    return (demand / spec.capacity) ** spec.alpha


def allocate_many(spec: NetworkSpec, states, warm_start=None, tol: float = TOLERANCE,
                  max_iter: int = MAX_ITER):
    """Solve a batch of states; returns ``(rates, prices, residuals)``.

    Raises :class:`SolverDidNotConverge` if any row misses ``tol``.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if np.any(states < 0):
        raise ValueError("flow counts must be nonnegative")
    nh, active, scale = _normalise(states)
    alpha = spec.alpha
    rates = np.zeros_like(nh)
    prices = np.zeros((len(nh), spec.n_links))
    resid = np.zeros(len(nh))
    todo = np.flatnonzero(scale > 0)
    if todo.size:
        sub_nh, sub_act = nh[todo], active[todo]
        p0 = _initial_prices(spec, sub_nh, sub_act)
        if warm_start is not None:
            warm = np.atleast_2d(np.asarray(warm_start, dtype=float))
            warm = np.broadcast_to(warm, (len(states), spec.n_links))[todo]
            warm = warm / scale[todo, None] ** alpha
            s = warm @ spec.incidence
            usable = np.where(sub_act, s > 0, True).all(axis=1)
            p0 = np.where(usable[:, None], warm, p0)
        # target a tighter tolerance internally; Newton converges quadratically
        p, r, _ = _dual.minimize(_problem(spec, sub_nh, sub_act), p0, tol * 1e-3, max_iter, accept=tol)
        if np.any(~(r <= tol)):
            bad = todo[np.argmax(np.nan_to_num(r, nan=np.inf))]
            raise SolverDidNotConverge(
                f"allocation residual {np.nanmax(r):.3g} > {tol:g} at state {states[bad].tolist()}"
            )
        _, lam, _ = _response(spec, sub_nh, sub_act, p)
        rates[todo] = lam
        prices[todo] = p * scale[todo, None] ** alpha
        resid[todo] = r
    return rates, prices, resid


def allocate(spec: NetworkSpec, state, warm_start=None, tol: float = TOLERANCE) -> Allocation:
    """Alpha-fair allocation for one (possibly real-valued) flow vector."""
    rates, prices, resid = allocate_many(spec, [state], warm_start, tol)
    return Allocation(rates[0], prices[0], float(resid[0]))


def kkt_residual(spec: NetworkSpec, state, alloc: Allocation) -> float:
    """Stationarity + complementary slackness + infeasibility.

    Evaluated after rescaling ``state`` to unit sup-norm (prices by the
    matching power), so the value does not grow with the size of ``n``.
    """
    states = np.atleast_2d(np.asarray(state, dtype=float))
    nh, active, scale = _normalise(states)
    safe = np.where(scale > 0, scale, 1.0)
    prices = np.atleast_2d(alloc.dual_prices) / safe[:, None] ** spec.alpha
    return float(_kkt_terms(spec, nh, active, np.atleast_2d(alloc.rates), prices)[0])


def single_link_oracle(spec: NetworkSpec, state) -> Allocation:
    """Closed-form allocation when there is a single link."""
    if spec.n_links != 1:
        raise ValueError("single_link_oracle needs exactly one link")
    n = np.asarray(state, dtype=float)
    active = n > ACTIVE_THRESHOLD
    cap = spec.capacity[0]
    share = np.where(active, spec.weights ** (1.0 / spec.alpha) * n, 0.0)
    total = share.sum()
    if total == 0:
        return Allocation(np.zeros_like(n), np.zeros(1), 0.0)
    rates = cap * share / total
    price = (total / cap) ** spec.alpha
    return Allocation(rates, np.array([price]), 0.0)
