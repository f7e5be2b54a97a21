"""Problem-instance types: time grid, tariff, vehicles, scenarios.

All array fields are stored as read-only float (or bool) numpy arrays, so a
constructed instance can be shared freely between threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from pevccp.errors import InvalidTariffError, ScenarioError


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr = np.atleast_1d(arr)
    arr.setflags(write=False)
    return arr


def _arrays_equal(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(np.asarray(a), np.asarray(b))
    return a == b


class _ArrayDataclassEq:
    """Field-wise equality that understands numpy arrays."""

    def __eq__(self, other):
        if type(other) is not type(self):
            return NotImplemented
        return all(
            _arrays_equal(getattr(self, f.name), getattr(other, f.name))
            for f in fields(self)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class TimeGrid(_ArrayDataclassEq):
    horizon_steps: int
    step_hours: float

    def __post_init__(self):
        if int(self.horizon_steps) != self.horizon_steps or self.horizon_steps < 1:
            raise ScenarioError(f"horizon_steps must be a positive integer, got {self.horizon_steps!r}")
        if not self.step_hours > 0:
            raise ScenarioError(f"step_hours must be positive, got {self.step_hours!r}")
        object.__setattr__(self, "horizon_steps", int(self.horizon_steps))
        object.__setattr__(self, "step_hours", float(self.step_hours))

    @property
    def total_hours(self) -> float:
        return self.horizon_steps * self.step_hours


@dataclass(frozen=True, eq=False)
class Tariff(_ArrayDataclassEq):
    """Quadratic serving cost ``c1 * L.L + c2 . L``."""

    c1: float
    c2: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.c1) or not self.c1 > 0:
            raise InvalidTariffError(f"c1 must be positive, got {self.c1!r}")
        object.__setattr__(self, "c1", float(self.c1))
        object.__setattr__(self, "c2", _frozen(self.c2))


@dataclass(frozen=True, eq=False)
class PevModel(_ArrayDataclassEq):
    """One vehicle's battery and mobility pattern.

    ``availability[t]`` is true while the vehicle is plugged in;
    ``consumption_kwh[t]`` is the energy drawn by driving during step t.
    """

    battery_capacity_kwh: float
    charge_efficiency: float
    initial_energy_kwh: float
    min_soc: float
    max_charge_kw: float
    availability: np.ndarray
    consumption_kwh: np.ndarray

    def __post_init__(self):
        for name in ("battery_capacity_kwh", "charge_efficiency", "initial_energy_kwh",
                     "min_soc", "max_charge_kw"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "availability", _frozen(self.availability, dtype=bool))
        object.__setattr__(self, "consumption_kwh", _frozen(self.consumption_kwh))

    @property
    def horizon_steps(self) -> int:
        return len(self.availability)

    def invariant_violations(self, prefix: str = "pev") -> list[str]:
        out = []
        if not self.battery_capacity_kwh > 0:
            out.append(f"{prefix}.battery_capacity_kwh: must be positive")
        if not 0 < self.charge_efficiency <= 1:
            out.append(f"{prefix}.charge_efficiency: must lie in (0, 1]")
        if not 0 <= self.min_soc < 1:
            out.append(f"{prefix}.min_soc: must lie in [0, 1)")
        if not self.max_charge_kw > 0:
            out.append(f"{prefix}.max_charge_kw: must be positive")
        if not 0 <= self.initial_energy_kwh <= self.battery_capacity_kwh:
            out.append(f"{prefix}.initial_energy_kwh: must lie in [0, battery_capacity_kwh]")
        if self.initial_energy_kwh < self.min_soc * self.battery_capacity_kwh:
            out.append(f"{prefix}.initial_energy_kwh: below min_soc * battery_capacity_kwh")
        if len(self.consumption_kwh) != len(self.availability):
            out.append(f"{prefix}.consumption_kwh: length {len(self.consumption_kwh)} "
                       f"!= availability length {len(self.availability)}")
        else:
            if np.any(self.consumption_kwh < 0):
                out.append(f"{prefix}.consumption_kwh: negative entries")
            both = np.flatnonzero(self.availability & (self.consumption_kwh > 0))
            if both.size:
                out.append(f"{prefix}.consumption_kwh: non-zero while plugged in at step {int(both[0])}")
        return out


@dataclass(frozen=True, eq=False)
class Scenario(_ArrayDataclassEq):
    grid: TimeGrid
    fleet: tuple[PevModel, ...]
    tariff: Tariff
    p_max_kw: np.ndarray
    baseline_load_kw: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fleet", tuple(self.fleet))
        object.__setattr__(self, "p_max_kw", _frozen(self.p_max_kw))
        object.__setattr__(self, "baseline_load_kw", _frozen(self.baseline_load_kw))

    @property
    def n_pev(self) -> int:
        return len(self.fleet)

    @property
    def horizon_steps(self) -> int:
        return self.grid.horizon_steps

    def with_p_max(self, p_max_kw) -> "Scenario":
        p = np.broadcast_to(np.asarray(p_max_kw, dtype=float), (self.horizon_steps,))
        return replace(self, p_max_kw=p)

    def with_tariff(self, tariff: Tariff) -> "Scenario":
        return replace(self, tariff=tariff)


def derive_tariff(baseline_load_kw, a_tilde: float, b_tilde: float) -> Tariff:
    """Tariff whose cost on L equals ``a.1'(L+Lin) + b|L+Lin|^2`` up to a constant."""
    if not np.isfinite(b_tilde) or b_tilde <= 0:
        raise InvalidTariffError(f"b_tilde must be positive, got {b_tilde!r}")
    base = np.asarray(baseline_load_kw, dtype=float)
    return Tariff(c1=float(b_tilde), c2=a_tilde + 2.0 * b_tilde * base)


# -- validation ---------------------------------------------------------------

@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok

    def __str__(self) -> str:
        if self.ok:
            return "scenario valid"
        return "; ".join(self.violations)


def greedy_max_charge(pev: PevModel, grid: TimeGrid) -> tuple[np.ndarray, int | None]:
    """Charge at full rate whenever possible without overfilling the battery.

    Returns the schedule and the first step (0-based) at which the minimum
    SOC is still violated, or None.  Greedy charging maximises the stored
    energy at every step simultaneously, so a violation here means that no
    schedule can avoid it.
    """
    gain = pev.charge_efficiency * grid.step_hours
    floor = pev.min_soc * pev.battery_capacity_kwh
    energy = pev.initial_energy_kwh
    x = np.zeros(len(pev.availability))
    first_bad = None
    for t, (plugged, cons) in enumerate(zip(pev.availability, pev.consumption_kwh)):
        if plugged:
            headroom = pev.battery_capacity_kwh + cons - energy
            x[t] = min(pev.max_charge_kw, max(headroom, 0.0) / gain)
        energy = energy + gain * x[t] - cons
        if first_bad is None and energy < floor - 1e-9:
            first_bad = t
    return x, first_bad


def validate_scenario(s: Scenario) -> ValidationReport:
    """Collect every invariant violation; an empty report means a feasible point exists."""
    out: list[str] = []
    T = s.grid.horizon_steps
    if s.n_pev < 1:
        out.append("fleet: must contain at least one vehicle")
    if len(s.tariff.c2) != T:
        out.append(f"tariff.c2: length {len(s.tariff.c2)} != horizon_steps {T}")
    if len(s.p_max_kw) != T:
        out.append(f"p_max_kw: length {len(s.p_max_kw)} != horizon_steps {T}")
    elif np.any(~(s.p_max_kw > 0)):
        out.append("p_max_kw: must be positive at every step")
    if len(s.baseline_load_kw) != T:
        out.append(f"baseline_load_kw: length {len(s.baseline_load_kw)} != horizon_steps {T}")
    elif np.any(s.baseline_load_kw < 0):
        out.append("baseline_load_kw: negative entries")

    min_draw = np.zeros(T)
    for i, pev in enumerate(s.fleet):
        prefix = f"fleet[{i}]"
        if len(pev.availability) != T:
            out.append(f"{prefix}.availability: length {len(pev.availability)} != horizon_steps {T}")
            continue
        local = pev.invariant_violations(prefix)
        out.extend(local)
        if local:
            continue
        _, bad = greedy_max_charge(pev, s.grid)
        if bad is not None:
            out.append(f"{prefix}: state of charge infeasible, drops below min_soc at step {bad} "
                       "even under maximum-rate charging")
            continue
        min_draw = min_draw + _forced_draw(pev, s.grid)

    if not out and len(s.p_max_kw) == T:
        over = np.flatnonzero(min_draw > s.p_max_kw + 1e-9)
        if over.size:
            t = int(over[0])
            out.append(f"p_max_kw: fleet needs at least {min_draw[t]:.6g} kW at step {t}, "
                       f"above the cap {s.p_max_kw[t]:.6g}")
        else:
            short = _cap_shortfall(s)
            if short is not None:
                t, total = short
                out.append(f"p_max_kw: the fleet's energy needs cannot all be met under the cap; "
                           f"it falls short by at least {total:.6g} kW summed over steps (e.g. step {t})")
    return ValidationReport(out)


def _cap_shortfall(s: Scenario, tol: float = 1e-7) -> tuple[int, float] | None:
    """Smallest total cap excess any schedule set needs, from an LP with cap slacks.

    Returns a step carrying slack in one optimal solution and the total.

    Variables are every vehicle's schedule followed by one slack per step;
    the total slack is minimised subject to every vehicle's energy rows.
    """
    V, T = s.n_pev, s.horizon_steps
    n = V * T + T
    rows, cols, vals, rhs = [], [], [], []
    r = 0
    tri_i, tri_j = np.tril_indices(T)
    for v, pev in enumerate(s.fleet):
        gain = pev.charge_efficiency * s.grid.step_hours
        cons = np.cumsum(pev.consumption_kwh)
        for sign, bound in ((1.0, pev.battery_capacity_kwh - pev.initial_energy_kwh + cons),
                            (-1.0, pev.initial_energy_kwh - cons - pev.min_soc * pev.battery_capacity_kwh)):
            rows.append(r + tri_i)
            cols.append(v * T + tri_j)
            vals.append(np.full(len(tri_i), sign * gain))
            rhs.append(bound)
            r += T
    steps = np.arange(T)
    for v in range(V):
        rows.append(r + steps)
        cols.append(v * T + steps)
        vals.append(np.ones(T))
    rows.append(r + steps)
    cols.append(V * T + steps)
    vals.append(-np.ones(T))
    rhs.append(s.p_max_kw)
    a = coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r + T, n))
    bounds = [(0.0, float(pev.max_charge_kw) if on else 0.0)
              for pev in s.fleet for on in pev.availability] + [(0.0, None)] * T
    c = np.r_[np.zeros(V * T), np.ones(T)]
    res = linprog(c, A_ub=a.tocsr(), b_ub=np.concatenate(rhs), bounds=bounds, method="highs")
    if res.status != 0:
        return None  # per-vehicle checks already passed; leave the verdict to the solvers
    slack = res.x[V * T:]
    if res.fun <= tol:
        return None
    return int(np.argmax(slack)), float(res.fun)


def _forced_draw(pev: PevModel, grid: TimeGrid) -> np.ndarray:
    """Lower bound on the power drawn at each step by any feasible schedule.

    The cumulative charge through step t-1 is at most the greedy maximum,
    and steps t+1..s add at most their full rates, so whatever the
    minimum-SOC bound at any later step s still demands beyond both must be
    drawn during step t itself.
    """
    gain = pev.charge_efficiency * grid.step_hours
    need = (pev.min_soc * pev.battery_capacity_kwh - pev.initial_energy_kwh
            + np.cumsum(pev.consumption_kwh)) / gain
    greedy, _ = greedy_max_charge(pev, grid)
    before = np.concatenate([[0.0], np.cumsum(greedy)[:-1]])
    rate = np.cumsum(np.where(pev.availability, pev.max_charge_kw, 0.0))
    # after[t, s] = full-rate charge over steps t+1..s (s >= t)
    after = rate[None, :] - rate[:, None]
    gap = need[None, :] - before[:, None] - after
    gap = np.where(np.triu(np.ones_like(gap, dtype=bool)), gap, -np.inf)
    return np.maximum(gap.max(axis=1), 0.0)


# -- synthetic generation -----------------------------------------------------

@dataclass(frozen=True)
class ScenarioProfile:
    """Knobs for :func:`generate_scenario`.

    ``availability`` is one of ``overnight`` (plugged in at home from the
    start of the horizon until a morning departure, unplugged during the
    day, back in the evening), ``commuter`` (as overnight, plus a charger
    at work) or ``random`` (plug-in windows at random times).  ``baseline``
    is ``flat`` or ``valley`` (night-time trough, two daily peaks).
    """

    name: str = "paperlike"
    capacities_kwh: tuple[float, ...] = (16.0, 24.0)
    capacity_split: float = 0.5
    max_charge_kw: float = 3.5
    charge_efficiency: float = 0.9
    min_soc: float = 0.2
    availability: str = "overnight"
    baseline: str = "valley"
    baseline_mean_kw: float = 60.0
    baseline_swing_kw: float = 20.0
    p_max_kw: float = 25.0
    a_tilde: float = 1.0
    b_tilde: float = 3.0
    initial_soc_range: tuple[float, float] = (0.20, 0.35)
    trip_soc_range: tuple[float, float] = (0.30, 0.50)
    day_hours: float = 24.0


PROFILES: dict[str, ScenarioProfile] = {
    "paperlike": ScenarioProfile(),
    "flat": ScenarioProfile(name="flat", baseline="flat"),
    "commuter": ScenarioProfile(name="commuter", availability="commuter"),
    "random": ScenarioProfile(name="random", availability="random"),
}


def get_profile(profile: str | ScenarioProfile) -> ScenarioProfile:
    if isinstance(profile, ScenarioProfile):
        return profile
    try:
        return PROFILES[profile]
    except KeyError:
        raise ScenarioError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}") from None


def baseline_shape(kind: str, t: int, mean: float, swing: float, day_hours: float = 24.0) -> np.ndarray:
    hours = (np.arange(t) + 0.5) * day_hours / t
    if kind == "flat":
        return np.full(t, float(mean))
    if kind == "valley":
        # trough around 04:00, peaks around 09:00 and 19:00
        morning = np.exp(-0.5 * ((hours - 9.0) / 2.0) ** 2)
        evening = 1.2 * np.exp(-0.5 * ((hours - 19.0) / 2.5) ** 2)
        night = np.exp(-0.5 * ((hours - 4.0) / 2.5) ** 2) + np.exp(-0.5 * ((hours - 28.0) / 2.5) ** 2)
        shape = morning + evening - night
        shape = (shape - shape.mean()) / np.ptp(shape)
        return np.maximum(mean + 2.0 * swing * shape, 0.0)
    raise ScenarioError(f"unknown baseline shape {kind!r}")


def _step_of(hour: float, step_hours: float, t: int) -> int:
    return int(min(max(round(hour / step_hours), 0), t))


def _place_trip(cons: np.ndarray, avail: np.ndarray, start: int, n_steps: int, energy: float) -> int:
    """Mark ``n_steps`` driving steps from ``start`` consuming ``energy`` in total."""
    t = len(cons)
    stop = min(start + max(n_steps, 1), t)
    if start >= t:
        return t
    cons[start:stop] += energy / (stop - start)
    avail[start:stop] = False
    return stop


def _windows_pattern(rng: np.random.Generator, t: int, step_hours: float, kind: str, day_hours: float,
                     trip_energy: float) -> tuple[np.ndarray, np.ndarray]:
    avail = np.zeros(t, dtype=bool)
    cons = np.zeros(t)
    trip_steps = max(1, _step_of(0.5, step_hours, t))

    if kind in ("overnight", "commuter"):
        scale = day_hours / 24.0
        depart = _step_of(rng.uniform(6.5, 8.5) * scale, step_hours, t)
        back = _step_of(rng.uniform(16.5, 19.0) * scale, step_hours, t)
        depart = min(depart, max(t - 1, 1))
        avail[:depart] = True
        arrive_work = _place_trip(cons, avail, depart, trip_steps, trip_energy / 2)
        back = max(back, arrive_work + 1)
        if kind == "commuter" and back > arrive_work:
            avail[arrive_work:back] = True
        home = _place_trip(cons, avail, back, trip_steps, trip_energy / 2)
        avail[home:] = True
        cons[avail] = 0.0
    elif kind == "random":
        n_trips = int(rng.integers(1, 4))
        starts = np.sort(rng.choice(np.arange(1, max(t, 2)), size=min(n_trips, max(t - 1, 1)), replace=False))
        avail[:] = True
        for s in starts:
            _place_trip(cons, avail, int(s), trip_steps, trip_energy / len(starts))
        # parked away from a charger for a while
        for _ in range(int(rng.integers(0, 3))):
            a = int(rng.integers(0, t))
            avail[a:min(t, a + int(rng.integers(1, max(2, t // 6))))] = False
        cons[avail] = 0.0
    else:
        raise ScenarioError(f"unknown availability pattern {kind!r}")
    return avail, cons


def generate_scenario(seed: int, v: int, t: int, profile: str | ScenarioProfile = "paperlike") -> Scenario:
    """Deterministic synthetic fleet scenario."""
    prof = get_profile(profile)
    if v < 1 or t < 1:
        raise ScenarioError(f"need v >= 1 and t >= 1, got v={v}, t={t}")
    if not 0 <= prof.capacity_split <= 1:
        raise ScenarioError(f"capacity_split must lie in [0, 1], got {prof.capacity_split}")
    lo, hi = prof.initial_soc_range
    if not prof.min_soc <= lo <= hi <= 1:
        raise ScenarioError("initial_soc_range must lie within [min_soc, 1]")
    if prof.trip_soc_range[0] < 0 or prof.trip_soc_range[0] > prof.trip_soc_range[1]:
        raise ScenarioError("trip_soc_range must be a non-negative interval")
    if prof.p_max_kw <= 0 or prof.b_tilde <= 0:
        raise ScenarioError("p_max_kw and b_tilde must be positive")

    rng = np.random.default_rng(seed)
    step_hours = prof.day_hours / t
    grid = TimeGrid(t, step_hours)

    n_first = int(round(prof.capacity_split * v))
    caps = [prof.capacities_kwh[0]] * n_first + [prof.capacities_kwh[-1]] * (v - n_first)
    caps = [caps[i] for i in rng.permutation(v)]

    fleet = []
    for cap in caps:
        for _attempt in range(100):
            soc0 = rng.uniform(lo, hi)
            trip = rng.uniform(*prof.trip_soc_range) * cap
            avail, cons = _windows_pattern(rng, t, step_hours, prof.availability, prof.day_hours, trip)
            pev = PevModel(
                battery_capacity_kwh=cap,
                charge_efficiency=prof.charge_efficiency,
                initial_energy_kwh=soc0 * cap,
                min_soc=prof.min_soc,
                max_charge_kw=prof.max_charge_kw,
                availability=avail,
                consumption_kwh=cons,
            )
            if not pev.invariant_violations() and greedy_max_charge(pev, grid)[1] is None:
                break
        else:
            raise ScenarioError(f"profile {prof.name!r} cannot produce a feasible vehicle at t={t}")
        fleet.append(pev)

    base = baseline_shape(prof.baseline, t, prof.baseline_mean_kw, prof.baseline_swing_kw, prof.day_hours)
    scenario = Scenario(
        grid=grid,
        fleet=tuple(fleet),
        tariff=derive_tariff(base, prof.a_tilde, prof.b_tilde),
        p_max_kw=np.full(t, float(prof.p_max_kw)),
        baseline_load_kw=base,
    )
    report = validate_scenario(scenario)
    if not report.ok:
        raise ScenarioError(f"profile {prof.name!r} produced an invalid scenario: {report}", report)
    return scenario


def stack_rows(rows: Iterable[np.ndarray]) -> np.ndarray:
    return np.vstack([np.asarray(r, dtype=float) for r in rows])
