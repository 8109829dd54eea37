from __future__ import annotations

import itertools
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from alphafair.lyapunov import (F_alpha, H_alpha, L_alpha, compute_constants, drift_constant,
                                drift_inner_products, excursion_constants, expected_drift_L,
                                generator_F, grad_F, grad_L, h_alpha, h_alpha_prime,
                                increment_constant, lyapunov_weights, maximal_bound, probe_hash,
                                separable_constant, shell_probes, sup_norm_constants, tail_bound)
from alphafair.model import single_link_spec, uniformization_rate
from alphafair.simulator import uniformized_probabilities

from conftest import linear_three_route, mm1, skewed_two_route, two_route


def test_F_examples():
    spec = single_link_spec([1.0, 2.0], mu=[1.0, 1.0], capacity=10.0)
    assert F_alpha(spec, [2, 2]) == pytest.approx(3.0)
    assert F_alpha(spec, [0, 0]) == 0.0
    assert F_alpha(spec, [4, 4]) == pytest.approx(4 * F_alpha(spec, [2, 2]))


def test_h_examples():
    for a in (0.3, 0.5, 1.0, 2.5):
        assert h_alpha(a, 0.0) == 0.0 and h_alpha(a, 1.0) == pytest.approx(1.0)
    assert h_alpha(0.5, 4.0) == pytest.approx(2.0)
    assert h_alpha(0.5, 0.5) == pytest.approx(0.5625)


def test_H_is_antiderivative_of_h():
    for a in (0.2, 0.5, 0.9, 1.0, 2.0):
        for r in (0.3, 1.0, 2.7):
            f = lambda x: float(h_alpha(a, x))
            ref = quad(f, 0, min(r, 1.0))[0] + (quad(f, 1.0, r)[0] if r > 1 else 0.0)
            assert H_alpha(a, r) == pytest.approx(ref, rel=1e-10)


def test_L_examples():
    spec = mm1()
    assert lyapunov_weights(spec) == pytest.approx([1.25])
    assert L_alpha(spec, [5]) == pytest.approx(5.5902, abs=1e-4)
    assert L_alpha(spec, [0]) == 0.0


@pytest.mark.parametrize("alpha", [0.5, 0.8])
def test_L_close_to_F_power_below_one(alpha):
    spec = skewed_two_route(alpha)
    w = lyapunov_weights(spec)
    rng = np.random.default_rng(0)
    n = rng.uniform(0, 6, size=(500, 2))
    gap = np.abs(L_alpha(spec, n) ** (alpha + 1) - (w * n ** (alpha + 1)).sum(axis=1))
    assert gap.max() <= 2 * w.sum()


def test_drift_example_single_route():
    spec = mm1()
    assert expected_drift_L(spec, [5]) == pytest.approx((0.8 - 1) * np.sqrt(1.25) / 1.8, abs=1e-12)
    assert expected_drift_L(spec, [0]) > 0


def test_generator_identity_for_uniformized_kernel():
    # one-step change of F under the uniformized kernel equals QF / Xi
    spec = linear_three_route(2.0)
    xi = uniformization_rate(spec)
    for n in ([1, 2, 0], [3, 1, 4], [0, 0, 2]):
        up, down, _ = uniformized_probabilities(spec, n)
        base = F_alpha(spec, n)
        step = 0.0
        for i in range(3):
            e = np.eye(3)[i]
            step += up[i] * (F_alpha(spec, np.array(n) + e) - base)
            if n[i] > 0:
                step += down[i] * (F_alpha(spec, np.array(n) - e) - base)
        assert step == pytest.approx(generator_F(spec, n) / xi, rel=1e-12)


def test_drift_inner_product_example():
    lhs, rhs = drift_inner_products(two_route(), [1, 0])
    assert lhs <= rhs + 1e-7
    with pytest.raises(ValueError):
        drift_inner_products(two_route(), [0, 0])


def test_constant_examples():
    spec = mm1()
    assert increment_constant(spec) == pytest.approx(4.280312, abs=1e-6)
    assert drift_constant(spec) == pytest.approx(0.496904, abs=1e-6)
    assert excursion_constants(spec) == pytest.approx((1.0, 1.125))
    assert separable_constant(spec) == pytest.approx(1.125)


def test_k_rules_differ_only_for_asymmetric_routes():
    assert drift_constant(two_route(), "max") == pytest.approx(drift_constant(two_route(), "min"))
    assert drift_constant(skewed_two_route(), "min") < drift_constant(skewed_two_route(), "max")


@pytest.mark.parametrize("factory, alpha", [(mm1, 1.0), (two_route, 1.0), (two_route, 2.0),
                                            (skewed_two_route, 3.0)])
def test_separable_constant_bounds_generator_on_lattice(factory, alpha):
    # brute-force check of QF(n) <= Ktilde eps^(1-alpha) on a large box
    spec = factory(alpha)
    c = compute_constants(spec, seed=0)
    states = np.array(list(itertools.product(range(41), repeat=spec.n_routes)), dtype=float)
    bound = c.Ktilde * c.eps ** (1 - alpha)
    assert generator_F(spec, states).max() <= bound + 1e-9


def test_tail_bound_shape():
    c = compute_constants(two_route(), seed=0)
    t0, b0 = tail_bound(c, 0)
    assert b0 == pytest.approx(c.xi / (c.xi + c.eps * c.K))
    ratio = c.xi / (c.xi + c.eps * c.K)
    for ell in range(1, 6):
        t, b = tail_bound(c, ell)
        assert t == pytest.approx(c.B + 2 * c.xi * ell)
        assert b == pytest.approx(ratio ** (ell + 1))
    assert tail_bound(replace(c, eps=1e-15), 3)[1] == pytest.approx(1.0)
    with pytest.raises(ValueError):
        tail_bound(c, -1)


def test_sup_norm_conversion_is_valid():
    for spec in (skewed_two_route(0.5), skewed_two_route(2.0)):
        c = compute_constants(spec, seed=0)
        states = np.array(list(itertools.product(range(30), repeat=2)), dtype=float)
        lower = c.sup_norm_factor * states.max(axis=1) - c.sup_norm_offset
        assert np.all(L_alpha(spec, states) >= lower - 1e-12)
        flat = sup_norm_constants(c)
        assert flat.xi / (flat.xi + flat.eps * flat.K) == pytest.approx(c.xi / (c.xi + c.eps * c.K))


def test_maximal_bound_behaviour():
    spec = mm1()
    c = compute_constants(spec, seed=0)
    assert maximal_bound(spec, c, 100, 1e9) < 1e-12
    a = maximal_bound(spec, c, 1.0, 100.0)
    assert a == pytest.approx(2 * 1.125 / 1.25 / 100**2)
    with pytest.raises(ValueError):
        maximal_bound(mm1(0.5), c, 1.0, 1.0)


def test_probe_set_is_deterministic_and_in_shell():
    spec = skewed_two_route(1.0)
    a = shell_probes(spec, 5.0, 50.0, np.random.default_rng(3))
    b = shell_probes(spec, 5.0, 50.0, np.random.default_rng(3))
    assert probe_hash(a) == probe_hash(b)
    level = L_alpha(spec, a)
    assert np.all((level > 5.0) & (level <= 50.0))
    # axis and diagonal states are present
    assert np.any((a[:, 0] == 0) & (a[:, 1] > 0)) and np.any((a[:, 1] == 0) & (a[:, 0] > 0))
    assert np.any(a[:, 0] == a[:, 1])


def test_constants_report_fields():
    d = compute_constants(two_route(), seed=0).to_dict()
    for key in ("eps", "Xi", "w", "K", "xi", "B", "m", "M", "Ktilde", "probe_set_hash"):
        assert key in d
    assert len(d["probe_set_hash"]) == 64


def central_gradient(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0.05, 6.0), min_size=3, max_size=3), st.sampled_from([0.3, 0.5, 1.0, 2.0]))
def test_gradients_match_finite_differences(n, alpha):
    spec = linear_three_route(alpha)
    x = np.array(n)
    for f, g in ((F_alpha, grad_F), (L_alpha, grad_L)):
        num = central_gradient(lambda y: f(spec, y), x)
        assert np.allclose(g(spec, x), num, rtol=1e-6, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 5.0), st.floats(0.05, 0.95))
def test_h_derivative(r, alpha):
    num = (h_alpha(alpha, r + 1e-6) - h_alpha(alpha, max(r - 1e-6, 0))) / (r + 1e-6 - max(r - 1e-6, 0))
    assert float(h_alpha_prime(alpha, r)) == pytest.approx(float(num), rel=1e-4, abs=1e-5)
