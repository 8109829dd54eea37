"""Fluid model: workload, the lifting map, and Euler integration of fluid paths."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from . import _dual
from .allocator import MAX_ITER, allocate
from .errors import SolverDidNotConverge
from .lyapunov import F_alpha, lyapunov_weights
from .model import NetworkSpec, is_critical

log = logging.getLogger(__name__)

LIFT_TOLERANCE = 1e-9
ZERO = 1e-9


def workload(spec: NetworkSpec, n) -> np.ndarray:
    """w = A M^-1 n (rows of a batch map to rows)."""
    x = np.asarray(n, dtype=float)
    return (x / spec.service_rates) @ spec.incidence.T


def _lift_problem(spec: NetworkSpec, target: np.ndarray) -> _dual.DualProblem:
    # minimise over q >= 0:  a/(a+1) sum_i w_i n_i^(a+1) - q.target,
    # where n_i(q) = (sigma_i / w_i)^(1/a) and sigma = (q A) / mu
    a = spec.alpha
    wts = lyapunov_weights(spec)
    mu = spec.service_rates
    inc = spec.incidence

    def flows(q):
        sigma = np.maximum(q @ inc, 0.0) / mu
        return sigma, (sigma / wts) ** (1 / a)

    def value(q, rows):
        _, n = flows(q)
        return a / (a + 1) * (wts * n ** (a + 1)).sum(axis=1) - (q * target[rows]).sum(axis=1)

    def grad_hess(q, rows):
        sigma, n = flows(q)
        g = (n / mu) @ inc.T - target[rows]
        # curvature blows up as sigma -> 0 when alpha > 1; only sigma = 0 gets a floor
        floor = 1e-12 * np.maximum(sigma.max(axis=1, keepdims=True), 1e-300)
        s = np.where(sigma > 0, sigma, floor)
        curv = (s / wts) ** (1 / a) / (a * s) / mu**2
        h = np.einsum("ji,ki,bi->bjk", inc, inc, curv)
        return g, h

    def residual(q, rows):
        _, n = flows(q)
        excess = (n / mu) @ inc.T - target[rows]
        infeas = np.maximum(-excess, 0.0).max(axis=1)
        # in flow units: n scales like q^(1/a), so q * excess alone is a weak certificate
        comp = (np.maximum(q, 0.0) ** (1 / a) * np.abs(excess)).max(axis=1)
        return infeas + comp + np.maximum(-q, 0.0).max(axis=1)

    return _dual.DualProblem(value, grad_hess, residual)


def lift_many(spec: NetworkSpec, loads, tol: float = LIFT_TOLERANCE) -> np.ndarray:
    """Lifting map for a batch of workloads (one per row)."""
    w = np.atleast_2d(np.asarray(loads, dtype=float))
    if np.any(w < 0):
        raise ValueError("workload must be nonnegative")
    a = spec.alpha
    scale = w.max(axis=1)
    out = np.zeros((len(w), spec.n_routes))
    todo = np.flatnonzero(scale > 0)
    if not todo.size:
        return out
    target = w[todo] / scale[todo, None]
    wts = lyapunov_weights(spec)
    mu = spec.service_rates
    # start from each link's lift as if it were the only link
    spread = ((mu * wts) ** (-1 / a) / mu) @ spec.incidence.T
    q0 = (target / spread) ** a
    q, r, _ = _dual.minimize(_lift_problem(spec, target), q0, tol * 1e-3, MAX_ITER, accept=tol)
    if np.any(~(r <= tol)):
        raise SolverDidNotConverge(f"lift residual {np.nanmax(r):.3g} > {tol:g}")
    sigma = np.maximum(q @ spec.incidence, 0.0) / mu
    out[todo] = (sigma / wts) ** (1 / a) * scale[todo, None]
    return out


def lift(spec: NetworkSpec, w) -> np.ndarray:
    """Least-F flow vector whose workload is at least ``w``."""
    return lift_many(spec, [w])[0]


def manifold_distance(spec: NetworkSpec, n):
    """|n - lift(workload(n))|_inf; accepts a batch."""
    x = np.asarray(n, dtype=float)
    batch = np.atleast_2d(x)
    dist = np.abs(batch - lift_many(spec, workload(spec, batch))).max(axis=1)
    return float(dist[0]) if x.ndim == 1 else dist


def manifold_membership_dual(spec: NetworkSpec, n, tol: float = 1e-8) -> bool:
    """Is n = diag(rho / kappa) A^T q for some q >= 0?  (alpha = 1, critical load)."""
    if spec.alpha != 1.0:
        raise ValueError("the polyhedral description applies to alpha = 1")
    if not is_critical(spec):
        raise ValueError("the polyhedral description applies at critical load")
    basis = (spec.rho / spec.weights)[:, None] * spec.incidence.T
    x = np.asarray(n, dtype=float)
    _, resid = nnls(basis, x)
    return bool(resid <= tol * max(1.0, np.abs(x).max()))


@dataclass(frozen=True)
class FluidTrajectory:
    times: np.ndarray
    states: np.ndarray
    lyapunov_values: np.ndarray


def default_step(spec: NetworkSpec) -> float:
    return 1e-3 * spec.capacity.min() / spec.arrival_rates.max()


def fluid_velocity(spec: NetworkSpec, n, warm_start=None):
    """(dn/dt, allocation) at ``n``.

    A route at zero stays there only if the links it uses can carry its
    whole offered load next to the current allocation (checked route by route
    in index order); otherwise it leaves zero at rate nu_i.
    """
    x = np.where(np.asarray(n, dtype=float) <= ZERO, 0.0, n)
    alloc = allocate(spec, x, warm_start=warm_start)
    v = spec.arrival_rates - spec.service_rates * alloc.rates
    used = spec.incidence @ alloc.rates
    for i in np.flatnonzero(x == 0):
        extra = spec.incidence[:, i] * spec.rho[i]
        if np.all(used + extra <= spec.capacity * (1 + 1e-12)):
            used = used + extra
            v[i] = 0.0
    return v, alloc


def fms_integrate(spec: NetworkSpec, n0, T: float, dt: float | None = None) -> FluidTrajectory:
    """Forward Euler with clipping at zero, sampled every ``dt``."""
    dt = default_step(spec) if dt is None else float(dt)
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    n = np.asarray(n0, dtype=float).copy()
    if n.shape != (spec.n_routes,) or np.any(n < 0):
        raise ValueError("n0 must be a nonnegative vector of length |I|")
    steps = int(round(T / dt))
    states = np.empty((steps + 1, spec.n_routes))
    states[0] = n
    warm = None
    for k in range(steps):
        v, alloc = fluid_velocity(spec, n, warm)
        warm = alloc.dual_prices if n.any() else warm
        n = np.maximum(np.where(n <= ZERO, 0.0, n) + dt * v, 0.0)
        states[k + 1] = n
    times = dt * np.arange(steps + 1)
    return FluidTrajectory(times, states, np.asarray(F_alpha(spec, states)))


def step_size_error(spec: NetworkSpec, n0, T: float, dt: float | None = None,
                    warn_above: float | None = 1e-3) -> float:
    """Sup-norm gap at common sample times between runs with ``dt`` and ``dt/2``."""
    dt = default_step(spec) if dt is None else dt
    coarse = fms_integrate(spec, n0, T, dt)
    fine = fms_integrate(spec, n0, T, dt / 2)
    gap = float(np.abs(coarse.states - fine.states[::2][: len(coarse.states)]).max())
    if warn_above is not None and gap > warn_above:
        log.warning("Euler step %.3g looks too coarse: halving it moves the path by %.3g", dt, gap)
    return gap


def fluid_feasibility_excess(spec: NetworkSpec, n) -> float:
    """max_j of (sum_{n_i>0} A_ji Lambda_i + sum_{n_i=0} A_ji rho_i - C_j)."""
    x = np.asarray(n, dtype=float)
    rates = allocate(spec, np.where(x <= ZERO, 0.0, x)).rates
    idle = x <= ZERO
    load = spec.incidence @ np.where(idle, spec.rho, rates)
    return float((load - spec.capacity).max())
