"""Heavy-traffic sequences, scalings, state space collapse and the SRBM limit."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm
from scipy.optimize import nnls

from .errors import CapTooLargeForBudget, NotNormalizable, NotUnderloaded
from .fluid import lift_many, workload
from .lyapunov import compute_constants, sup_norm_constants
from .model import NetworkSpec, is_critical, load_profile, local_traffic_holds
from .simulator import (RateTable, StationaryEstimate, Trace, estimate_stationary, exact_stationary,
                        simulate_ctmc)

EXACT_BUDGET = 4_000_000


@dataclass(frozen=True)
class HeavyTrafficFamily:
    """Critically loaded network plus the direction of approach.

    Member ``r`` keeps the service rates and lowers the loads to
    ``rho - direction / r``, so that ``r (C - A rho_r) = theta`` exactly.
    """

    critical_spec: NetworkSpec
    direction: np.ndarray
    theta: np.ndarray
    gap_constant: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "gap_constant",
                           float(np.min(self.theta / self.critical_spec.capacity)))

    @property
    def min_index(self) -> float:
        """Members exist for r strictly above this value."""
        return float(np.max(self.direction / self.critical_spec.rho))


def make_family(critical_spec: NetworkSpec, theta=None, direction=None,
                tol: float = 1e-9) -> HeavyTrafficFamily:
    if not is_critical(critical_spec, tol=1e-9):
        raise ValueError("the limit network must satisfy A rho = C")
    a = critical_spec.incidence
    if direction is None:
        if theta is None:
            raise ValueError("give theta, direction, or both")
        theta = np.asarray(theta, dtype=float)
        direction, resid = nnls(a, theta)
        if resid > tol:
            raise ValueError(f"no nonnegative direction reaches theta (residual {resid:.3g})")
    direction = np.asarray(direction, dtype=float)
    if direction.shape != (critical_spec.n_routes,) or np.any(direction < 0):
        raise ValueError("direction must be a nonnegative vector of length |I|")
    implied = a @ direction
    theta = implied if theta is None else np.asarray(theta, dtype=float)
    if np.abs(implied - theta).max() > tol:
        raise ValueError("A @ direction does not equal theta")
    if np.any(theta <= 0):
        raise ValueError("theta must be strictly positive")
    return HeavyTrafficFamily(critical_spec, direction, theta)


def family_member(family: HeavyTrafficFamily, r: float) -> NetworkSpec:
    if r <= family.min_index:
        raise NotUnderloaded(f"r = {r} is not above {family.min_index:.6g}")
    spec = family.critical_spec
    member = spec.with_traffic(spec.arrival_rates - spec.service_rates * family.direction / r)
    load_profile(member)
    return member


def diffusion_scale(trace: Trace, r: float) -> Trace:
    """N(r^2 t) / r."""
    return Trace(trace.times / r**2, trace.states / r, trace.horizon / r**2)


def fluid_scale(trace: Trace, r: float) -> Trace:
    """N(r t) / r."""
    return Trace(trace.times / r, trace.states / r, trace.horizon / r)


def ssc_metrics(spec_r: NetworkSpec, scaled: Trace, floor: float = 1e-9) -> tuple[float, float]:
    """(sup distance to the lifted workload, same divided by sup |N|_inf)."""
    states, _ = np.unique(np.asarray(scaled.states, dtype=float), axis=0, return_inverse=True)
    lifted = lift_many(spec_r, workload(spec_r, states))
    absolute = float(np.abs(states - lifted).max()) if len(states) else 0.0
    size = float(np.abs(states).max()) if len(states) else 0.0
    return absolute, absolute / max(size, floor)


# -- SRBM stationary law -----------------------------------------------------

def _hypoexp_cdf(rates, x):
    """CDF of a sum of independent exponentials with the given rates."""
    rates = np.asarray(rates, dtype=float)
    k = len(rates)
    gen = np.diag(-rates) + np.diag(rates[:-1], 1)
    out = []
    for t in np.atleast_1d(x):
        out.append(0.0 if t <= 0 else 1.0 - expm(gen * t)[0].sum())
    return np.clip(np.array(out), 0.0, 1.0) if k else np.ones(len(np.atleast_1d(x)))


@dataclass(frozen=True)
class SrbmData:
    """Limit data; the stationary workload density is proportional to exp(<sign * v, w>)."""

    Gamma: np.ndarray
    v: np.ndarray
    sign: int
    cone_generators: np.ndarray  # columns span the workload cone
    generator_rates: np.ndarray  # W = G q with q_k ~ Exp(rate_k) independent
    normalizer: float
    flow_map: np.ndarray  # lifted flows = flow_map @ q

    def density(self, w) -> float:
        w = np.asarray(w, dtype=float)
        q = np.linalg.solve(self.cone_generators, w)
        if np.any(q < -1e-12):
            return 0.0
        return float(math.exp(self.sign * self.v @ w) / self.normalizer)

    def workload_cdf(self, link: int, x):
        return _hypoexp_cdf(self._rates(self.cone_generators[link]), x)

    def flow_cdf(self, route: int, x):
        return _hypoexp_cdf(self._rates(self.flow_map[route]), x)

    def _rates(self, coeffs):
        used = coeffs > 0
        return self.generator_rates[used] / coeffs[used]

    def to_dict(self) -> dict:
        return {
            "Gamma": self.Gamma.tolist(), "v": self.v.tolist(), "sign": self.sign,
            "cone_generators": self.cone_generators.tolist(),
            "generator_rates": self.generator_rates.tolist(), "normalizer": self.normalizer,
        }


def srbm_data(family: HeavyTrafficFamily) -> SrbmData:
    spec = family.critical_spec
    if spec.alpha != 1.0:
        raise ValueError("the workload cone is described explicitly only for alpha = 1")
    a = spec.incidence
    minv = 1.0 / spec.service_rates
    gamma = 2 * (a * (minv**2 * spec.arrival_rates)) @ a.T
    v = 2 * np.linalg.solve(gamma, family.theta)
    flow_map = (spec.rho / spec.weights)[:, None] * a.T
    gens = (a * minv) @ flow_map
    for sign in (-1, 1):
        rates = -sign * (v @ gens)
        if np.all(rates > 0):
            norm = abs(np.linalg.det(gens)) / np.prod(rates)
            return SrbmData(gamma, v, sign, gens, rates, float(norm), flow_map)
    raise NotNormalizable("exp(<v, w>) is not integrable on the workload cone for either sign of v")


def ks_distance(values, probs, cdf) -> float:
    """Kolmogorov distance between a discrete law and a continuous CDF."""
    values = np.asarray(values, dtype=float)
    order = np.argsort(values, kind="stable")
    atoms, start = np.unique(values[order], return_index=True)
    mass = np.add.reduceat(np.asarray(probs, dtype=float)[order], start)
    after = np.cumsum(mass)
    before = after - mass
    ref = np.asarray(cdf(atoms))
    return float(max(np.abs(after - ref).max(), np.abs(before - ref).max()))


# -- experiments --------------------------------------------------------------

def decay_scale(family: HeavyTrafficFamily) -> float:
    """Slowest exponential decay rate among the limiting scaled flow marginals."""
    srbm = srbm_data(family)
    a = family.critical_spec.incidence
    per_route = [srbm._rates(srbm.flow_map[i]).min() for i in range(a.shape[1])]
    return float(min(per_route))


def scaled_stationary(family: HeavyTrafficFamily, r: float, budget: int, seed,
                      mc_steps: int = 10**6) -> tuple[StationaryEstimate, int | None]:
    spec = family_member(family, r)
    cap = math.ceil(12 * r / decay_scale(family))
    if (cap + 1) ** spec.n_routes <= budget:
        return exact_stationary(spec, cap, budget=budget), cap
    return estimate_stationary(spec, mc_steps // 10, mc_steps, seed), None


def _check_interchange(family: HeavyTrafficFamily):
    spec = family.critical_spec
    if spec.alpha != 1.0 or np.any(spec.weights != 1.0):
        raise ValueError("the interchange experiment needs alpha = 1 and unit weights")
    if not local_traffic_holds(spec):
        raise ValueError("the interchange experiment needs the local traffic condition")


def ssc_average(family: HeavyTrafficFamily, r: float, replicas: int, horizon: float, seed) -> tuple[float, float]:
    """Mean SSC metrics over diffusion-scaled paths on [0, horizon] from an empty start."""
    spec = family_member(family, r)
    seeds = np.random.SeedSequence(seed).spawn(replicas) if not isinstance(seed, np.random.SeedSequence) \
        else seed.spawn(replicas)
    table = RateTable(spec)
    vals = []
    for s in seeds:
        path = simulate_ctmc(spec, [0] * spec.n_routes, horizon * r**2, s, table=table)
        vals.append(ssc_metrics(spec, diffusion_scale(path, r)))
    arr = np.array(vals)
    return float(arr[:, 0].mean()), float(arr[:, 1].mean())


def _quantile(values, probs, q: float) -> float:
    order = np.argsort(values, kind="stable")
    cum = np.cumsum(np.asarray(probs)[order])
    idx = int(np.searchsorted(cum, q - 1e-12, side="left"))
    return float(np.asarray(values)[order][min(idx, len(cum) - 1)])


def _one_r(args):
    family, r, budget, seed, mc_steps, ssc_replicas, ssc_horizon, levels = args
    srbm = srbm_data(family)
    spec = family_member(family, r)
    law_seed, ssc_seed = seed.spawn(2)
    est, cap = scaled_stationary(family, r, budget, law_seed, mc_steps)
    flows = est.support / r
    loads = workload(spec, flows)
    ks_links = [ks_distance(loads[:, j], est.probabilities, lambda x, j=j: srbm.workload_cdf(j, x))
                for j in range(spec.n_links)]
    ks_routes = [ks_distance(flows[:, i], est.probabilities, lambda x, i=i: srbm.flow_cdf(i, x))
                 for i in range(spec.n_routes)]
    sup = flows.max(axis=1)
    entry = {
        "r": float(r),
        "gap": load_profile(spec).gap,
        "method": est.method,
        "cap_or_steps": cap if cap is not None else est.truncation_or_samples,
        "ks_per_link": ks_links,
        "ks_per_route": ks_routes,
        "quantile_levels": list(levels),
        "quantiles": [_quantile(sup, est.probabilities, q) for q in levels],
    }
    if ssc_replicas:
        entry["ssc_abs"], entry["ssc_mult"] = ssc_average(family, r, ssc_replicas, ssc_horizon, ssc_seed)
    else:
        entry["ssc_abs"] = entry["ssc_mult"] = None
    return entry


def interchange_experiment(family: HeavyTrafficFamily, r_list, per_r_budget: int = EXACT_BUDGET,
                           seed: int = 0, *, mc_steps: int = 10**6, ssc_replicas: int = 4,
                           ssc_horizon: float = 1.0, quantile_levels=(0.5, 0.9, 0.99),
                           mapper=map) -> dict:
    """Scaled stationary laws along the family versus the SRBM stationary law."""
    _check_interchange(family)
    srbm = srbm_data(family)
    r_list = [float(r) for r in r_list]
    seeds = np.random.SeedSequence(seed).spawn(len(r_list))
    jobs = [(family, r, per_r_budget, s, mc_steps, ssc_replicas, ssc_horizon, tuple(quantile_levels))
            for r, s in zip(r_list, seeds)]
    entries = list(mapper(_one_r, jobs))
    return {"entries": entries, "srbm": srbm.to_dict(), "theta": family.theta.tolist(),
            "direction": family.direction.tolist(), "gap_constant": family.gap_constant}


def tightness_diagnostic(family: HeavyTrafficFamily, r_list, q: float,
                         budget: int = EXACT_BUDGET, seed: int = 0, mc_steps: int = 10**6) -> list:
    """q-quantile of the scaled sup-norm under each member's stationary law."""
    if family.critical_spec.alpha != 1.0:
        raise ValueError("the tightness diagnostic is defined for alpha = 1")
    seeds = np.random.SeedSequence(seed).spawn(len(r_list))
    out = []
    for r, s in zip(r_list, seeds):
        est, _ = scaled_stationary(family, r, budget, s, mc_steps)
        out.append(_quantile(est.support.max(axis=1) / r, est.probabilities, q))
    return out


def tightness_envelope(family: HeavyTrafficFamily, r: float, q: float, seed: int = 0) -> float:
    """Quantile envelope (K + 1 + 4 (xi + 1)^2 log(1/(1-q))) / D built from member r's constants.

    With the sup-norm constants, the tail bound reads
    P(|N| >= K'/eps + 2 xi' l) <= (1 + eps / xi')^-(l+1) where K' = B eps and
    xi' = xi / K; these are the K and xi plugged in.
    """
    spec = family_member(family, r)
    c = sup_norm_constants(compute_constants(spec, seed=seed))
    k_tight = c.B * c.eps
    xi_tight = max(c.xi / c.K, c.xi)
    y = math.log(1.0 / (1.0 - q))
    return (k_tight + 1 + 4 * (xi_tight + 1) ** 2 * y) / family.gap_constant
