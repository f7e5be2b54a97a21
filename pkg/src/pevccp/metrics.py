"""Run traces and the measurements taken on them."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from pevccp.model import Scenario, greedy_max_charge

TRACE_COLUMNS = ("k", "objective", "rel_obj", "max_disagreement", "cap_violation", "feas_residual")


@dataclass(frozen=True)
class TraceEntry:
    k: int
    objective: float
    rel_obj: float
    max_disagreement: float
    cap_violation: float
    feas_residual: float
    agg_load: np.ndarray
    box_violation: float = 0.0  # kept out of the CSV columns

    def scalars(self) -> tuple:
        return (self.k, self.objective, self.rel_obj, self.max_disagreement,
                self.cap_violation, self.feas_residual)


@dataclass
class RunTrace:
    """Recorded iterations of one distributed run plus its final state.

    ``rel_obj`` is NaN in every entry when no reference objective was
    supplied; :meth:`with_reference` fills it in afterwards.
    """

    entries: list[TraceEntry]
    final_x: np.ndarray
    final_l: np.ndarray
    final_lam: np.ndarray
    config_fingerprint: str = ""
    f_star: float | None = None
    iterations: int = 0
    halted_at: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ks = [e.k for e in self.entries]
        if any(b <= a for a, b in zip(ks, ks[1:])):
            raise ValueError("trace iterations must be strictly increasing")

    @property
    def ks(self) -> np.ndarray:
        return np.array([e.k for e in self.entries], dtype=int)

    def column(self, name: str) -> np.ndarray:
        if name == "agg_load":
            return np.array([e.agg_load for e in self.entries])
        return np.array([getattr(e, name) for e in self.entries], dtype=float)

    def last(self) -> TraceEntry:
        return self.entries[-1]

    def with_reference(self, f_star: float) -> "RunTrace":
        entries = [replace(e, rel_obj=rel_obj(e.objective, f_star)) for e in self.entries]
        return replace(self, entries=entries, f_star=float(f_star))


def rel_obj(f: float, f_star: float) -> float:
    """Relative objective gap ``|f - f*| / f*``."""
    if f_star == 0:
        raise ZeroDivisionError(f"reference objective is zero; absolute gap is {abs(f - f_star):.17g}")
    return abs(f - f_star) / f_star


def cap_violation(agg, p_max) -> float:
    agg, p_max = np.asarray(agg, dtype=float), np.asarray(p_max, dtype=float)
    if agg.shape != p_max.shape:
        raise ValueError(f"shape mismatch {agg.shape} vs {p_max.shape}")
    return float(np.max(agg - p_max, initial=0.0))


def max_disagreement(lam) -> float:
    """Largest ``|lam_v - lam_w|_inf`` over agent pairs (rows of ``lam``)."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape[0] < 2:
        return 0.0
    return float(np.max(np.ptp(lam, axis=0)))


def uncontrolled_charging(s: Scenario) -> np.ndarray:
    """Aggregate load when every vehicle charges at full rate from plug-in.

    Each vehicle stops once it has stored the energy its schedule must
    deliver by the end of the horizon (the smallest total any feasible
    schedule delivers), so the benchmark and the coordinated schedules
    move the same energy and differ only in timing.
    """
    agg = np.zeros(s.horizon_steps)
    for pev in s.fleet:
        gain = pev.charge_efficiency * s.grid.step_hours
        need = (pev.min_soc * pev.battery_capacity_kwh - pev.initial_energy_kwh
                + np.sum(pev.consumption_kwh)) / gain
        greedy, _ = greedy_max_charge(pev, s.grid)
        cum = np.minimum(np.cumsum(greedy), max(need, 0.0))
        agg += np.diff(cum, prepend=0.0)
    return agg


@dataclass(frozen=True)
class ValleyReport:
    total: np.ndarray
    variance: float
    peak: float
    benchmark_variance: float
    variance_reduction: float

    @property
    def relative_reduction(self) -> float:
        if self.benchmark_variance == 0:
            return 0.0
        return self.variance_reduction / self.benchmark_variance


def valley_filling_report(baseline, agg_pev, benchmark=None) -> ValleyReport:
    """Flatness of ``baseline + agg_pev``, compared with ``baseline + benchmark``.

    Without a benchmark the schedule is compared with itself.
    """
    baseline = np.asarray(baseline, dtype=float)
    agg_pev = np.asarray(agg_pev, dtype=float)
    if baseline.shape != agg_pev.shape:
        raise ValueError(f"shape mismatch {baseline.shape} vs {agg_pev.shape}")
    bench = agg_pev if benchmark is None else np.asarray(benchmark, dtype=float)
    total = baseline + agg_pev
    var = float(np.var(total))
    bvar = float(np.var(baseline + bench))
    return ValleyReport(total=total, variance=var, peak=float(total.max()),
                        benchmark_variance=bvar, variance_reduction=bvar - var)
