from __future__ import annotations

import numpy as np
import pytest

from alphafair.errors import CapTooLargeForBudget, EmptySample, StateCapExceeded
from alphafair.model import single_link_spec
from alphafair.simulator import (StationaryEstimate, Trace, estimate_stationary, exact_stationary,
                                 max_excursion, simulate_ctmc, time_average_occupancy,
                                 total_variation, truncated_generator, uniformized_probabilities,
                                 uniformized_step)

from conftest import mm1, two_route


def geometric(a):
    return lambda s: (1 - a) * a ** s[0]


def test_three_state_chain_by_hand():
    # birth-death on {0,1,2}: up 0.8, down 1; balance gives pi proportional to (1, a, a^2)
    a = 0.8
    est = exact_stationary(mm1(), cap=2)
    ref = np.array([1, a, a * a]) / (1 + a + a * a)
    assert est.probabilities == pytest.approx(ref, abs=1e-14)
    q = truncated_generator(mm1(), 2).toarray()
    assert q == pytest.approx(np.array([[-0.8, 0.8, 0], [1, -1.8, 0.8], [0, 1, -1]]))


def test_cap_zero():
    est = exact_stationary(mm1(), cap=0)
    assert est.probabilities.tolist() == [1.0]


def test_budget_guard():
    with pytest.raises(CapTooLargeForBudget):
        exact_stationary(two_route(), cap=100, budget=1000)


def test_two_route_total_count_is_geometric():
    # at alpha = 1 with equal weights the total count is an M/M/1 queue at load 0.8
    est = exact_stationary(two_route(), cap=60)
    total = est.support.sum(axis=1)
    inside = total <= 60
    mass = np.bincount(total[inside], weights=est.probabilities[inside])
    ref = 0.2 * 0.8 ** np.arange(61)
    assert np.abs(mass[:30] / mass.sum() - ref[:30] / ref.sum()).max() < 1e-3


def test_monte_carlo_close_to_geometric():
    est = estimate_stationary(mm1(), burn_in=1000, steps=200_000, seed=1)
    assert est.method == "monte-carlo"
    assert total_variation(est, geometric(0.8)) < 0.03


def test_two_seeds_agree():
    a = estimate_stationary(mm1(), 1000, 200_000, seed=2)
    b = estimate_stationary(mm1(), 1000, 200_000, seed=3)
    assert total_variation(a, b.pmf()) < 0.05


def test_empty_sample():
    with pytest.raises(EmptySample):
        estimate_stationary(mm1(), 10, 0, seed=0)


def test_uniformized_probabilities_single_route():
    up, down, stay = uniformized_probabilities(mm1(), [5])
    assert up * 1.8 == pytest.approx([0.8])
    assert down * 1.8 == pytest.approx([1.0])
    assert stay == pytest.approx(0.0, abs=1e-12)
    up, down, stay = uniformized_probabilities(mm1(), [0])
    assert stay == pytest.approx(1 / 1.8)


def test_uniformized_step_moves_by_one():
    rng = np.random.default_rng(0)
    state = (3, 2)
    for _ in range(200):
        nxt = uniformized_step(two_route(), state, rng)
        assert sum(abs(a - b) for a, b in zip(nxt, state)) <= 1
        assert min(nxt) >= 0
        state = nxt


def test_max_excursion_examples():
    assert max_excursion(Trace(np.array([0.0]), np.zeros((1, 1), dtype=int), 1.0)) == 0
    path = Trace(np.arange(4.0), np.array([[0], [1], [2], [1]]), 5.0)
    assert max_excursion(path) == 2
    path = Trace(np.arange(3.0), np.array([[1, 3], [1, 4], [0, 4]]), 5.0)
    assert max_excursion(path) == 4


def test_trace_is_reproducible_and_well_formed():
    a = simulate_ctmc(two_route(), [2, 1], 50.0, seed=7)
    b = simulate_ctmc(two_route(), [2, 1], 50.0, seed=7)
    assert np.array_equal(a.times, b.times) and np.array_equal(a.states, b.states)
    assert np.all(np.diff(a.times) > 0) and a.times[-1] <= 50.0
    idx, delta = a.changes()
    assert set(np.unique(delta)) <= {-1, 1}
    assert np.all(np.abs(np.diff(a.states, axis=0)).sum(axis=1) == 1)


def test_arrival_rates_conserved():
    horizon = 5000.0
    trace = simulate_ctmc(two_route(), [0, 0], horizon, seed=11)
    idx, delta = trace.changes()
    for i, nu in enumerate([0.4, 0.4]):
        count = np.sum((idx == i) & (delta == 1))
        se = np.sqrt(nu * horizon) / horizon
        assert abs(count / horizon - nu) <= 3 * se


def test_ctmc_and_uniformized_occupancy_agree():
    trace = simulate_ctmc(mm1(), [0], 20_000.0, seed=5)
    occ = time_average_occupancy(trace)
    est = estimate_stationary(mm1(), 1000, 200_000, seed=6)
    pmf = est.pmf()
    for k in range(4):
        assert occ.get((k,), 0.0) == pytest.approx(pmf.get((k,), 0.0), abs=0.02)


def test_state_cap():
    spec = single_link_spec([0.99])
    with pytest.raises(StateCapExceeded):
        simulate_ctmc(spec, [0], 10_000.0, seed=0, state_cap=3)


def test_tail_of_estimate():
    est = StationaryEstimate(np.array([[0, 0], [1, 3], [2, 0]]), np.array([0.5, 0.3, 0.2]), "x", 0)
    assert est.tail_sup_norm(2) == pytest.approx(0.5)
    assert est.tail_sup_norm(0) == pytest.approx(1.0)
