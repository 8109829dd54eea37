"""Network instances and instance-level derived quantities."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidSpec, NotUnderloaded

RANK_TOL = 1e-10


def _frozen(values, name: str, ndim: int) -> np.ndarray:
    try:
        arr = np.array(values, dtype=float)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"{name}: not numeric ({exc})") from None
    if arr.ndim != ndim:
        raise InvalidSpec(f"{name}: expected {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def matrix_rank(a: np.ndarray, tol: float = RANK_TOL) -> int:
    """Rank by Gaussian elimination with full pivoting.

    Pivots below ``tol`` times the largest pivot seen are treated as zero.
    """
    m = np.array(a, dtype=float)
    rows, cols = m.shape
    rank = 0
    largest = 0.0
    for _ in range(min(rows, cols)):
        sub = np.abs(m[rank:, rank:])
        if sub.size == 0:
            break
        r, c = np.unravel_index(np.argmax(sub), sub.shape)
        pivot = sub[r, c]
        largest = max(largest, pivot)
        if pivot == 0.0 or pivot <= tol * largest:
            break
        r += rank
        c += rank
        m[[rank, r]] = m[[r, rank]]
        m[:, [rank, c]] = m[:, [c, rank]]
        m[rank + 1:] -= np.outer(m[rank + 1:, rank] / m[rank, rank], m[rank])
        rank += 1
    return rank


@dataclass(frozen=True, eq=False)
class NetworkSpec:
    """One bandwidth-sharing network: topology, capacities, weights, traffic.

    Build instances with :func:`make_spec` (or :meth:`from_dict`), which
    validates every invariant. Arrays are read-only.
    """

    incidence: np.ndarray
    capacity: np.ndarray
    weights: np.ndarray
    alpha: float
    arrival_rates: np.ndarray
    service_rates: np.ndarray

    @property
    def n_links(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_routes(self) -> int:
        return self.incidence.shape[1]

    @property
    def rho(self) -> np.ndarray:
        return self.arrival_rates / self.service_rates

    def with_traffic(self, arrival_rates, service_rates=None) -> "NetworkSpec":
        return make_spec(
            self.incidence, self.capacity, self.weights, self.alpha,
            arrival_rates,
            self.service_rates if service_rates is None else service_rates,
        )

    def to_dict(self) -> dict:
        return {
            "incidence": self.incidence.astype(int).tolist(),
            "capacity": self.capacity.tolist(),
            "kappa": self.weights.tolist(),
            "alpha": float(self.alpha),
            "nu": self.arrival_rates.tolist(),
            "mu": self.service_rates.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        missing = {"incidence", "capacity", "kappa", "alpha", "nu", "mu"} - set(data)
        if missing:
            raise InvalidSpec(f"missing keys: {sorted(missing)}")
        return make_spec(
            data["incidence"], data["capacity"], data["kappa"], data["alpha"],
            data["nu"], data["mu"],
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def make_spec(incidence, capacity, kappa, alpha, nu, mu) -> NetworkSpec:
    """Validate the inputs and return an immutable :class:`NetworkSpec`."""
    a = _frozen(incidence, "incidence", 2)
    c = _frozen(capacity, "capacity", 1)
    k = _frozen(kappa, "kappa", 1)
    v = _frozen(nu, "nu", 1)
    u = _frozen(mu, "mu", 1)
    n_links, n_routes = a.shape
    if n_links == 0 or n_routes == 0:
        raise InvalidSpec("incidence must be non-empty")
    if not np.all((a == 0) | (a == 1)):
        raise InvalidSpec("incidence must be a 0/1 matrix")
    if not np.all(a.sum(axis=0) >= 1):
        raise InvalidSpec("every route must use at least one resource")
    if matrix_rank(a) != n_links:
        raise InvalidSpec("incidence must have full row rank")
    if c.shape != (n_links,):
        raise InvalidSpec(f"capacity must have length {n_links}")
    for name, arr in (("kappa", k), ("nu", v), ("mu", u)):
        if arr.shape != (n_routes,):
            raise InvalidSpec(f"{name} must have length {n_routes}")
    for name, arr in (("capacity", c), ("kappa", k), ("nu", v), ("mu", u)):
        if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
            raise InvalidSpec(f"{name} must be strictly positive and finite")
    try:
        alpha = float(alpha)
    except (TypeError, ValueError):
        raise InvalidSpec("alpha must be a number") from None
    if not np.isfinite(alpha) or alpha <= 0:
        raise InvalidSpec("alpha must be positive")
    return NetworkSpec(a, c, k, alpha, v, u)


def load_spec(path) -> NetworkSpec:
    with open(Path(path)) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InvalidSpec(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise InvalidSpec(f"{path}: top level must be an object")
    return NetworkSpec.from_dict(data)


@dataclass(frozen=True)
class LoadProfile:
    rho: np.ndarray
    link_load: np.ndarray
    gap: float


def link_load(spec: NetworkSpec) -> np.ndarray:
    return spec.incidence @ spec.rho


def load_profile(spec: NetworkSpec) -> LoadProfile:
    """Per-route loads, per-link loads and the gap to the capacity boundary."""
    rho = spec.rho
    load = spec.incidence @ rho
    if np.any(load >= spec.capacity):
        worst = int(np.argmax(load / spec.capacity))
        raise NotUnderloaded(
            f"link {worst} has load {load[worst]:.6g} >= capacity {spec.capacity[worst]:.6g}"
        )
    gap = float(np.min(spec.capacity / load) - 1.0)
    return LoadProfile(rho=rho, link_load=load, gap=gap)


def is_critical(spec: NetworkSpec, tol: float = 1e-12) -> bool:
    """True when every link is exactly at capacity (A rho = C)."""
    return bool(np.allclose(link_load(spec), spec.capacity, rtol=tol, atol=tol))


def uniformization_rate(spec: NetworkSpec) -> float:
    return float(np.sum(spec.arrival_rates + spec.service_rates * spec.capacity.max()))


def local_traffic_holds(spec: NetworkSpec) -> bool:
    a = spec.incidence
    local = a.sum(axis=0) == 1
    return bool(np.all(a[:, local].sum(axis=1) >= 1))


# Small catalogue of instances used by tests and the CLI docs.

def single_link_spec(nu, mu=None, kappa=None, alpha: float = 1.0, capacity: float = 1.0) -> NetworkSpec:
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    k = len(nu)
    mu = np.ones(k) if mu is None else mu
    kappa = np.ones(k) if kappa is None else kappa
    return make_spec(np.ones((1, k)), [capacity], kappa, alpha, nu, mu)


def linear_network_spec(n_links: int, nu, mu=None, kappa=None, alpha: float = 1.0,
                        capacity=None) -> NetworkSpec:
    """Route 0 crosses every link; route j (1..J) uses link j-1 only."""
    a = np.zeros((n_links, n_links + 1))
    a[:, 0] = 1
    a[np.arange(n_links), np.arange(1, n_links + 1)] = 1
    k = n_links + 1
    mu = np.ones(k) if mu is None else mu
    kappa = np.ones(k) if kappa is None else kappa
    capacity = np.ones(n_links) if capacity is None else capacity
    return make_spec(a, capacity, kappa, alpha, nu, mu)
