import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import aggregate_region_vertices, central_by_enumeration, nearest_point, random_small_scenario
from pevccp.errors import InfeasibleProblemError
from pevccp.feasibility import build_feasible_set
from pevccp.model import PevModel, Scenario, Tariff, TimeGrid, derive_tariff
from pevccp.oracle import CentralSolution, KktResidual, feasible_sets, kkt_check, objective_value, solve_central


def _scenario(fleet, c1, c2, p_max, t):
    return Scenario(TimeGrid(t, 1.0), tuple(fleet), Tariff(c1, np.asarray(c2, float)),
                    np.full(t, p_max, dtype=float) if np.isscalar(p_max) else np.asarray(p_max, float),
                    np.zeros(t))


def _pev(avail, cons, **kw):
    base = dict(battery_capacity_kwh=10.0, charge_efficiency=1.0, initial_energy_kwh=5.0, min_soc=0.2,
                max_charge_kw=3.5)
    base.update(kw)
    return PevModel(availability=np.asarray(avail, bool), consumption_kwh=np.asarray(cons, float), **base)


def test_no_energy_need_means_no_charging():
    s = _scenario([_pev([True], [0.0])], 1.0, [0.0], 10.0, 1)
    sol = solve_central(s)
    np.testing.assert_allclose(sol.x_all, [[0.0]], atol=1e-12)
    assert sol.objective == pytest.approx(0.0, abs=1e-12)


def _trip_scenario(p_max):
    # a 2.5 kWh trip from the floor: 2.5 kWh must be charged in the two plugged-in steps
    pev = _pev([True, True, False], [0.0, 0.0, 2.5], initial_energy_kwh=2.0, max_charge_kw=3.0)
    return _scenario([pev], 1e-3, [1.0, 2.0, 0.0], p_max, 3)


def test_cheaper_step_charged_first():
    sol = solve_central(_trip_scenario(10.0))
    np.testing.assert_allclose(sol.x_all[0], [2.5, 0.0, 0.0], atol=1e-9)


def test_cheaper_step_filled_to_cap_then_next():
    sol = solve_central(_trip_scenario([2.0, 10.0, 10.0]))
    np.testing.assert_allclose(sol.x_all[0], [2.0, 0.5, 0.0], atol=1e-9)
    assert sol.kkt.ok(1e-6)


def test_objective_examples():
    s = _scenario([_pev([True], [0.0])] * 2, 1.0, [1.0], 10.0, 1)
    assert objective_value(s, np.zeros((2, 1))) == 0.0
    assert objective_value(s, np.array([[1.0], [2.0]])) == 12.0
    with pytest.raises(ValueError):
        objective_value(s, np.zeros((3, 1)))


@given(st.integers(1, 4), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_objective_matches_double_loop(v, t, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(v, t))
    c1, c2 = float(rng.uniform(0.1, 3)), rng.normal(size=t)
    s = _scenario([_pev([True] * t, [0.0] * t)] * v, c1, c2, 10.0, t)
    ref = 0.0
    for j in range(t):
        load = 0.0
        for i in range(v):
            load += x[i, j]
        ref += c1 * load * load + c2[j] * load
    assert objective_value(s, x) == pytest.approx(ref, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(8))
def test_small_instances_match_enumeration(seed):
    rng = np.random.default_rng(1000 + seed)
    s = random_small_scenario(rng, int(rng.integers(1, 4)), int(rng.integers(2, 5)))
    sol = solve_central(s)
    f_ref, l_ref = central_by_enumeration(s, feasible_sets(s))
    assert abs(sol.objective - f_ref) <= 1e-6 * max(1.0, abs(f_ref))
    np.testing.assert_allclose(sol.l_agg, l_ref, atol=1e-6)
    assert kkt_check(s, sol).ok(1e-6)


def test_derived_tariff_preserves_minimiser():
    rng = np.random.default_rng(44)
    s = random_small_scenario(rng, 2, 4)
    base = rng.uniform(0, 10, size=4)
    a_tilde, b_tilde = 1.3, 0.7
    s = Scenario(s.grid, s.fleet, derive_tariff(base, a_tilde, b_tilde), s.p_max_kw, base)
    # a~.(L + L_in) + b~|L + L_in|^2 is minimised by the point nearest to -L_in - a~/(2 b~)
    target = -base - a_tilde / (2 * b_tilde)
    ref = nearest_point(aggregate_region_vertices(s, feasible_sets(s)), target)
    np.testing.assert_allclose(solve_central(s).l_agg, ref, atol=1e-8)


def test_ref_scenario_solution(ref_scenario, ref_central):
    sol = ref_central
    assert np.isfinite(sol.objective)
    assert np.max(sol.l_agg) <= 25.0 + 1e-7
    np.testing.assert_array_equal(sol.l_agg, sol.x_all.sum(axis=0))
    for pev, x in zip(ref_scenario.fleet, sol.x_all):
        assert build_feasible_set(pev, ref_scenario.grid).contains(x)
    assert sol.kkt.ok(1e-6)


def test_bad_tolerance_rejected():
    with pytest.raises(ValueError):
        solve_central(_trip_scenario(10.0), tol=0.0)


def test_infeasible_families():
    pev = _pev([True, False], [0.0, 9.0], initial_energy_kwh=2.0)
    with pytest.raises(InfeasibleProblemError) as err:
        solve_central(_scenario([pev], 1.0, [0.0, 0.0], 10.0, 2))
    assert err.value.family == "energy"
    with pytest.raises(InfeasibleProblemError) as err:
        solve_central(_trip_scenario(1.0))
    assert err.value.family == "power_cap"


def _interior_scenario():
    # unconstrained minimiser (1, 1) lies strictly inside the box and energy rows
    return _scenario([_pev([True, True], [0.0, 0.0], max_charge_kw=3.0)], 1.0, [-2.0, -2.0], 10.0, 2)


def test_interior_optimum_has_zero_multipliers():
    s = _interior_scenario()
    sol = solve_central(s)
    np.testing.assert_allclose(sol.x_all[0], [1.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(sol.price, 2 * s.tariff.c1 * sol.l_agg + s.tariff.c2, atol=1e-9)
    np.testing.assert_allclose(sol.price, 0.0, atol=1e-9)
    assert sol.kkt.worst() <= 1e-9


def test_perturbation_breaks_stationarity():
    s = _interior_scenario()
    sol = solve_central(s)
    x = sol.x_all.copy()
    x[0, 0] += 0.1
    bad = CentralSolution(x, x.sum(axis=0), objective_value(s, x), KktResidual(0, 0, 0, 0))
    assert kkt_check(s, bad).stationarity_x > 0.01


def test_reference_perturbation_breaks_stationarity(ref_scenario, ref_central):
    x = ref_central.x_all.copy()
    v, t = np.argwhere((x > 0.1) & (x < 3.4))[0]
    x[v, t] -= 0.1
    bad = CentralSolution(x, x.sum(axis=0), objective_value(ref_scenario, x), KktResidual(0, 0, 0, 0))
    assert kkt_check(ref_scenario, bad).worst() > 1e-3


def test_solution_beats_random_feasible_points(ref_scenario, ref_central):
    s = ref_scenario
    rng = np.random.default_rng(5)
    projectors = [f.projector() for f in feasible_sets(s)]
    checked = 0
    while checked < 100:
        x = np.array([p(rng.uniform(-1, 1.2, size=s.horizon_steps)) for p in projectors])
        if np.all(x.sum(axis=0) <= s.p_max_kw):
            assert ref_central.objective <= objective_value(s, x)
            checked += 1


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1.0, 1.5))
def test_relaxing_cap_never_raises_optimum(seed, factor):
    s = random_small_scenario(np.random.default_rng(seed), 2, 3)
    tight = solve_central(s).objective
    loose = solve_central(s.with_p_max(s.p_max_kw * factor)).objective
    assert loose <= tight + 1e-9 * max(1.0, abs(tight))


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_cost_scaling(seed, alpha):
    s = random_small_scenario(np.random.default_rng(seed), 2, 3)
    base = solve_central(s)
    scaled = solve_central(s.with_tariff(Tariff(alpha * s.tariff.c1, alpha * s.tariff.c2)))
    assert scaled.objective == pytest.approx(alpha * base.objective, rel=1e-8, abs=1e-8)
    np.testing.assert_allclose(scaled.l_agg, base.l_agg, atol=1e-7)


def test_deterministic():
    s = random_small_scenario(np.random.default_rng(3), 3, 4)
    a, b = solve_central(s), solve_central(s)
    np.testing.assert_array_equal(a.x_all, b.x_all)
