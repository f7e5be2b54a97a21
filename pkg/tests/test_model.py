import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pevccp.errors import InvalidTariffError, ScenarioError
from pevccp.model import (PROFILES, PevModel, Scenario, ScenarioProfile, Tariff, TimeGrid, baseline_shape,
                          derive_tariff, generate_scenario, greedy_max_charge, validate_scenario)


def _pev(**kw):
    base = dict(battery_capacity_kwh=10.0, charge_efficiency=1.0, initial_energy_kwh=5.0, min_soc=0.2,
                max_charge_kw=3.0, availability=np.ones(4, dtype=bool), consumption_kwh=np.zeros(4))
    base.update(kw)
    return PevModel(**base)


def _scenario(fleet, t=4, p_max=10.0, step=1.0):
    return Scenario(TimeGrid(t, step), tuple(fleet), Tariff(1.0, np.zeros(t)), np.full(t, p_max), np.zeros(t))


def test_time_grid_invariants():
    g = TimeGrid(96, 0.25)
    assert g.total_hours == 24.0
    with pytest.raises(ScenarioError):
        TimeGrid(0, 1.0)
    with pytest.raises(ScenarioError):
        TimeGrid(4, 0.0)


def test_tariff_requires_positive_c1():
    with pytest.raises(InvalidTariffError):
        Tariff(0.0, np.zeros(2))
    with pytest.raises(InvalidTariffError):
        derive_tariff(np.zeros(2), 1.0, -1.0)


def test_derive_tariff_zero_baseline():
    tar = derive_tariff(np.zeros(3), a_tilde=1.0, b_tilde=0.5)
    assert tar.c1 == 0.5
    np.testing.assert_array_equal(tar.c2, np.ones(3))


def test_derive_tariff_expansion():
    tar = derive_tariff(np.array([10.0, 20.0]), a_tilde=0.0, b_tilde=1.0)
    np.testing.assert_array_equal(tar.c2, [20.0, 40.0])


@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 5),
       st.lists(st.floats(0, 100), min_size=1, max_size=8))
def test_derive_tariff_linear_in_baseline(scale, a, b, base):
    base = np.array(base)
    lhs = derive_tariff(scale * base, a, b).c2 - a
    rhs = scale * (derive_tariff(base, a, b).c2 - a)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_greedy_max_charge_fills_until_full():
    x, bad = greedy_max_charge(_pev(), TimeGrid(4, 1.0))
    np.testing.assert_allclose(x, [3.0, 2.0, 0.0, 0.0])
    assert bad is None


def test_validate_flags_low_initial_energy():
    rep = validate_scenario(_scenario([_pev(initial_energy_kwh=1.0)]))
    assert not rep.ok
    assert any("initial_energy_kwh" in v for v in rep.violations)


def test_validate_flags_unreplenishable_consumption():
    # plugged in for one step (at most 3 kWh back) then a 7 kWh trip from 5 kWh with a 2 kWh floor
    avail = np.array([True, False, False, False])
    cons = np.array([0.0, 7.0, 0.0, 0.0])
    rep = validate_scenario(_scenario([_pev(availability=avail, consumption_kwh=cons)]))
    assert any("state of charge infeasible" in v and "step 1" in v for v in rep.violations)


def test_validate_names_length_mismatch():
    pev = _pev(consumption_kwh=np.zeros(3))
    rep = validate_scenario(_scenario([pev]))
    assert any(v.startswith("fleet[0].consumption_kwh") for v in rep.violations)


def test_validate_flags_cap_below_forced_draw():
    avail = np.array([True, False, False, False])
    # starting at the floor, a 2.5 kWh trip forces 2.5 kW in the single plugged-in step
    pev = _pev(availability=avail, consumption_kwh=np.array([0.0, 2.5, 0.0, 0.0]), initial_energy_kwh=2.0)
    assert validate_scenario(_scenario([pev], p_max=10.0)).ok
    rep = validate_scenario(_scenario([pev], p_max=2.0))
    assert any(v.startswith("p_max_kw") for v in rep.violations)


def test_validate_rejects_consumption_while_plugged():
    pev = _pev(consumption_kwh=np.array([0.0, 1.0, 0.0, 0.0]))
    rep = validate_scenario(_scenario([pev]))
    assert any("non-zero while plugged in" in v for v in rep.violations)


def test_reference_profile_matches_fleet_parameters(ref_scenario):
    s = ref_scenario
    assert s.n_pev == 20 and s.horizon_steps == 96 and s.grid.step_hours == 0.25
    assert {p.battery_capacity_kwh for p in s.fleet} == {16.0, 24.0}
    assert sum(p.battery_capacity_kwh == 16.0 for p in s.fleet) == 10
    assert all(p.max_charge_kw == 3.5 and p.charge_efficiency == 0.9 and p.min_soc == 0.2 for p in s.fleet)
    np.testing.assert_array_equal(s.p_max_kw, np.full(96, 25.0))
    assert validate_scenario(s).ok


def test_generation_is_deterministic():
    assert generate_scenario(7, 5, 48) == generate_scenario(7, 5, 48)
    assert generate_scenario(7, 5, 48) != generate_scenario(8, 5, 48)


def test_tiny_flat_profile_validates():
    assert validate_scenario(generate_scenario(1, 1, 2, "flat")).ok


def test_impossible_profile_rejected():
    with pytest.raises(ScenarioError):
        generate_scenario(1, 2, 8, ScenarioProfile(initial_soc_range=(0.1, 0.3)))
    with pytest.raises(ScenarioError):
        generate_scenario(1, 0, 8)
    with pytest.raises(ScenarioError):
        generate_scenario(1, 2, 8, "no-such-profile")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8), st.sampled_from([4, 24, 96]), st.sampled_from(sorted(PROFILES)))
def test_every_generated_scenario_validates(seed, v, t, profile):
    assert validate_scenario(generate_scenario(seed, v, t, profile)).ok


def test_valley_baseline_shape():
    base = baseline_shape("valley", 96, 60.0, 20.0)
    hours = (np.arange(96) + 0.5) * 0.25
    assert 2.0 <= hours[np.argmin(base)] <= 6.0
    assert abs(base.mean() - 60.0) < 1e-9
    assert np.ptp(base) == pytest.approx(40.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_forced_draw_is_a_valid_lower_bound(seed, t):
    from scipy.optimize import linprog

    from pevccp.feasibility import build_feasible_set
    from pevccp.model import _forced_draw

    rng = np.random.default_rng(seed)
    avail = rng.random(t) < 0.6
    cons = np.where(avail, 0.0, rng.uniform(0, 2, size=t))
    pev = PevModel(10.0, 1.0, float(rng.uniform(2, 6)), 0.2, 3.0, avail, cons)
    grid = TimeGrid(t, 1.0)
    if greedy_max_charge(pev, grid)[1] is not None:
        return
    f = build_feasible_set(pev, grid)
    bound = _forced_draw(pev, grid)
    for k in range(t):
        c = np.zeros(t)
        c[k] = 1.0
        res = linprog(c, A_ub=f.a_matrix, b_ub=f.b_vector, bounds=list(zip(f.lower, f.upper)), method="highs")
        assert bound[k] <= res.fun + 1e-7


def test_validate_flags_cap_too_low_over_horizon():
    # 6 kWh must arrive in three plugged-in steps; no single step is forced, only the total is
    avail = np.array([True, True, True, False])
    pev = _pev(availability=avail, consumption_kwh=np.array([0.0, 0.0, 0.0, 6.0]), initial_energy_kwh=2.0)
    assert not _forced_draw_any(pev)
    assert validate_scenario(_scenario([pev], p_max=2.0)).ok
    rep = validate_scenario(_scenario([pev], p_max=1.5))
    assert len(rep.violations) == 1 and rep.violations[0].startswith("p_max_kw")
    assert "1.5 kW" in rep.violations[0]


def _forced_draw_any(pev):
    from pevccp.model import _forced_draw

    return bool(np.any(_forced_draw(pev, TimeGrid(4, 1.0)) > 0))
