"""Sample paths and stationary laws of the flow-count Markov process."""

from __future__ import annotations

import bisect
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .allocator import allocate, allocate_many
from .errors import CapTooLargeForBudget, EmptySample, StateCapExceeded
from .model import NetworkSpec, load_profile, uniformization_rate

STATE_CAP = 10**6
EXACT_BUDGET = 4_000_000
_RNG_BLOCK = 4096


@dataclass(frozen=True)
class Trace:
    """Piecewise-constant path: ``states[k]`` holds on ``[times[k], times[k+1])``.

    ``times[0] == 0`` is the initial state; later rows are events.
    """

    times: np.ndarray
    states: np.ndarray
    horizon: float

    @property
    def n_events(self) -> int:
        return len(self.times) - 1

    def changes(self):
        """(route index, +/-1) per event; route -1 marks a recorded self-loop."""
        diff = np.diff(self.states, axis=0)
        moved = np.abs(diff).sum(axis=1) > 0
        idx = np.where(moved, np.argmax(np.abs(diff), axis=1), -1)
        delta = np.where(moved, diff[np.arange(len(diff)), np.maximum(idx, 0)], 0)
        return idx, delta


@dataclass(frozen=True)
class StationaryEstimate:
    support: np.ndarray  # (k, |I|) integer states
    probabilities: np.ndarray
    method: str
    truncation_or_samples: int

    def pmf(self) -> dict:
        return {tuple(int(x) for x in s): float(p) for s, p in zip(self.support, self.probabilities)}

    def tail_sup_norm(self, threshold: float) -> float:
        """P(max_i N_i >= threshold)."""
        mask = self.support.max(axis=1) >= threshold
        return float(self.probabilities[mask].sum())


def total_variation(est: StationaryEstimate, pmf) -> float:
    """TV distance between ``est`` and a pmf given as callable or mapping.

    Mass that the reference puts outside ``est.support`` is accounted for
    through ``1 - sum`` so truncated references compare correctly.
    """
    ref = np.array([pmf(tuple(s)) if callable(pmf) else pmf.get(tuple(s), 0.0)
                    for s in est.support.tolist()])
    inside = np.abs(est.probabilities - ref).sum()
    outside = max(0.0, 1.0 - ref.sum())
    return 0.5 * float(inside + outside)


class RateTable:
    """Bounded memo of per-state transition rates.

    For a state ``n`` stores the arrival rates ``nu`` and departure rates
    ``mu * Lambda(n)``. Eviction is least-recently-used.
    """

    def __init__(self, spec: NetworkSpec, maxsize: int = 200_000):
        self.spec = spec
        self.maxsize = maxsize
        self._cache: OrderedDict = OrderedDict()
        self._warm = None

    def departures(self, state: tuple) -> np.ndarray:
        hit = self._cache.get(state)
        if hit is not None:
            self._cache.move_to_end(state)
            return hit
        alloc = allocate(self.spec, state, warm_start=self._warm)
        self._warm = alloc.dual_prices if any(state) else self._warm
        rates = self.spec.service_rates * alloc.rates
        rates.setflags(write=False)
        self._cache[state] = rates
        if len(self._cache) > self.maxsize:
            self._cache.popitem(last=False)
        return rates

    def __len__(self) -> int:
        return len(self._cache)


class _Jumps:
    """Cumulative event thresholds for each visited state."""

    def __init__(self, spec: NetworkSpec, table: RateTable | None):
        self.spec = spec
        self.table = table if table is not None else RateTable(spec)
        self._cum: dict = {}
        self.nu = [float(x) for x in spec.arrival_rates]

    def get(self, state: tuple):
        hit = self._cum.get(state)
        if hit is None:
            dep = self.table.departures(state)
            rates = self.nu + [float(x) for x in dep]
            cum = list(np.cumsum(rates))
            hit = (cum, cum[-1])
            if len(self._cum) > self.table.maxsize:
                self._cum.clear()
            self._cum[state] = hit
        return hit


def _uniforms(rng: np.random.Generator):
    while True:
        yield from rng.random(_RNG_BLOCK).tolist()


def _exponentials(rng: np.random.Generator):
    while True:
        yield from rng.standard_exponential(_RNG_BLOCK).tolist()


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replica_seeds(seed: int, count: int) -> list:
    """Independent per-replica streams, fixed by ``seed`` and the replica index."""
    return np.random.SeedSequence(seed).spawn(count)


def simulate_ctmc(spec: NetworkSpec, initial, horizon: float, seed, *,
                  state_cap: int = STATE_CAP, table: RateTable | None = None) -> Trace:
    """Event-driven simulation on ``[0, horizon]``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    rng = _generator(seed)
    jumps = _Jumps(spec, table)
    n_routes = spec.n_routes
    state = [int(x) for x in initial]
    if len(state) != n_routes or min(state) < 0:
        raise ValueError("initial state must be a nonnegative vector of length |I|")
    exps, unis = _exponentials(rng), _uniforms(rng)
    times = [0.0]
    states = [tuple(state)]
    t = 0.0
    while True:
        cum, total = jumps.get(tuple(state))
        t += next(exps) / total
        if t > horizon:
            break
        k = bisect.bisect_right(cum, next(unis) * total)
        k = min(k, 2 * n_routes - 1)
        if k < n_routes:
            state[k] += 1
            if state[k] > state_cap:
                raise StateCapExceeded(f"route {k} exceeded {state_cap} flows at t={t:.6g}")
        else:
            state[k - n_routes] -= 1
        times.append(t)
        states.append(tuple(state))
    return Trace(np.array(times), np.array(states, dtype=np.int64).reshape(-1, n_routes), float(horizon))


def uniformized_probabilities(spec: NetworkSpec, state, table: RateTable | None = None):
    """(P(+e_i), P(-e_i), P(self)) of the uniformized chain at ``state``."""
    xi = uniformization_rate(spec)
    dep = (table.departures(tuple(int(x) for x in state)) if table
           else spec.service_rates * allocate(spec, state).rates)
    up = spec.arrival_rates / xi
    down = np.asarray(dep) / xi
    return up, down, max(0.0, 1.0 - up.sum() - down.sum())


def uniformized_step(spec: NetworkSpec, state, rng: np.random.Generator,
                     table: RateTable | None = None) -> tuple:
    up, down, _ = uniformized_probabilities(spec, state, table)
    u = rng.random()
    cum = np.cumsum(np.concatenate([up, down]))
    k = int(np.searchsorted(cum, u, side="right"))
    nxt = list(int(x) for x in state)
    if k < spec.n_routes:
        nxt[k] += 1
    elif k < 2 * spec.n_routes:
        nxt[k - spec.n_routes] -= 1
    return tuple(nxt)


def estimate_stationary(spec: NetworkSpec, burn_in: int, steps: int, seed, *,
                        initial=None, table: RateTable | None = None) -> StationaryEstimate:
    """Occupancy of the uniformized chain over ``steps`` steps after ``burn_in``."""
    if steps <= 0:
        raise EmptySample("steps must be positive")
    load_profile(spec)
    rng = _generator(seed)
    xi = uniformization_rate(spec)
    jumps = _Jumps(spec, table)
    n_routes = spec.n_routes
    state = [0] * n_routes if initial is None else [int(x) for x in initial]
    unis = _uniforms(rng)
    counts: dict = {}
    for step in range(burn_in + steps):
        key = tuple(state)
        if step >= burn_in:
            counts[key] = counts.get(key, 0) + 1
        cum, _ = jumps.get(key)
        k = bisect.bisect_right(cum, next(unis) * xi)
        if k < n_routes:
            state[k] += 1
        elif k < 2 * n_routes:
            state[k - n_routes] -= 1
        # k == 2|I| is the self-loop
    keys = sorted(counts)
    probs = np.array([counts[k] for k in keys], dtype=float) / steps
    return StationaryEstimate(np.array(keys, dtype=np.int64), probs, "monte-carlo", int(steps))


def lattice(n_routes: int, cap: int) -> np.ndarray:
    """All states of ``{0..cap}^n_routes`` in C (row-major) order."""
    grids = np.indices((cap + 1,) * n_routes).reshape(n_routes, -1).T
    return grids.astype(np.int64)


def truncated_generator(spec: NetworkSpec, cap: int, chunk: int = 100_000) -> sp.csr_matrix:
    """Generator of the chain on ``{0..cap}^|I|``; arrivals leaving the box are dropped."""
    states = lattice(spec.n_routes, cap)
    size = len(states)
    dims = (cap + 1,) * spec.n_routes
    dep = np.empty(states.shape)
    for lo in range(0, size, chunk):
        rates, _, _ = allocate_many(spec, states[lo:lo + chunk])
        dep[lo:lo + chunk] = spec.service_rates * rates
    rows, cols, vals = [], [], []
    index = np.arange(size)
    for i in range(spec.n_routes):
        up = states[:, i] < cap
        step = np.zeros(spec.n_routes, dtype=np.int64)
        step[i] = 1
        tgt = np.ravel_multi_index((states[up] + step).T, dims)
        rows.append(index[up]); cols.append(tgt)
        vals.append(np.full(up.sum(), spec.arrival_rates[i]))
        down = states[:, i] > 0
        tgt = np.ravel_multi_index((states[down] - step).T, dims)
        rows.append(index[down]); cols.append(tgt); vals.append(dep[down, i])
    rows = np.concatenate(rows); cols = np.concatenate(cols); vals = np.concatenate(vals)
    q = sp.coo_matrix((vals, (rows, cols)), shape=(size, size)).tocsr()
    q = q - sp.diags(np.asarray(q.sum(axis=1)).ravel())
    return q.tocsr()


def exact_stationary(spec: NetworkSpec, cap: int, budget: int = EXACT_BUDGET) -> StationaryEstimate:
    """Stationary law of the chain truncated to ``{0..cap}^|I|``."""
    load_profile(spec)
    if cap < 0:
        raise ValueError("cap must be nonnegative")
    size = (cap + 1) ** spec.n_routes
    if size > budget:
        raise CapTooLargeForBudget(f"{size} states exceed the budget of {budget}")
    states = lattice(spec.n_routes, cap)
    if size == 1:
        return StationaryEstimate(states, np.ones(1), "exact-truncated", cap)
    q = truncated_generator(spec, cap)
    # pi Q = 0 with the last balance equation replaced by normalisation
    lhs = sp.vstack([q.T.tocsr()[:-1], sp.csr_matrix(np.ones((1, size)))])
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    pi = spla.spsolve(lhs.tocsc(), rhs)
    pi = np.maximum(pi, 0.0)
    pi /= pi.sum()
    return StationaryEstimate(states, pi, "exact-truncated", cap)


def max_excursion(trace: Trace) -> float:
    """sup over the path and the routes of the flow count."""
    if trace.states.size == 0:
        return 0.0
    return float(trace.states.max())


def time_average_occupancy(trace: Trace) -> dict:
    """Fraction of ``[0, horizon]`` spent in each state."""
    ends = np.append(trace.times[1:], trace.horizon)
    hold = ends - trace.times
    occ: dict = {}
    for s, h in zip(map(tuple, trace.states.tolist()), hold):
        occ[s] = occ.get(s, 0.0) + h
    return {k: v / trace.horizon for k, v in occ.items()}
