"""Consensus + innovations engine for cooperative fleet charging.

Every agent owns its schedule ``x_v``, an estimate ``L_v`` of the aggregate
load and a price vector ``lam_v``.  One synchronous round:

1. agents publish ``lam_v`` and receive their neighbours' values;
2. ``lam_v`` moves towards the neighbourhood (consensus) and against the
   local mismatch ``L_v / V - x_v`` (innovation), floored at ``c2``;
3. ``L_v`` is the load whose marginal cost equals the new price, capped;
4. ``x_v`` takes a step towards ``L_v / V`` and against the price, then is
   projected back onto the vehicle's feasible set.

Only prices travel over the network.  ``V`` is known to every agent unless
the optional warm-up estimates it.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pevccp.errors import ProtocolError, TopologyError
from pevccp.feasibility import FeasibleSet, Projector, build_feasible_set
from pevccp.metrics import RunTrace, TraceEntry, cap_violation, max_disagreement, rel_obj
from pevccp.model import Scenario
from pevccp.netsim import FaultPlan, Graph, NeighborMessage, Network
from pevccp.oracle import objective_value

SCHEDULE_NAMES = ("alpha", "beta", "delta", "eta")


@dataclass(frozen=True)
class TuningSchedule:
    """Diminishing step ``r / k**o``."""

    r: float
    o: float

    def __post_init__(self):
        if not (np.isfinite(self.r) and self.r > 0):
            raise ValueError(f"schedule coefficient must be positive, got {self.r!r}")
        if not (np.isfinite(self.o) and self.o >= 0):
            raise ValueError(f"schedule exponent must be non-negative, got {self.o!r}")
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "o", float(self.o))

    def value_at(self, k: int) -> float:
        if k < 1:
            raise ValueError(f"iteration index starts at 1, got {k}")
        return self.r / k ** self.o


# default step rules; "order" swaps the delta and eta rows
_DEFAULTS = {
    "alpha": (10.0222, 0.16),
    "beta": (0.1080, 0.0001),
    "delta": (0.0192, 0.0010),
    "eta": (0.0080, 0.0320),
}


@dataclass(frozen=True)
class ScheduleSet:
    alpha: TuningSchedule
    beta: TuningSchedule
    delta: TuningSchedule
    eta: TuningSchedule

    @classmethod
    def default(cls, mapping: str = "name") -> "ScheduleSet":
        """Default schedules.

        ``mapping="order"`` swaps the delta and eta rules, which makes the
        schedule step larger and decay faster.
        """
        rows = dict(_DEFAULTS)
        if mapping == "order":
            rows["delta"], rows["eta"] = rows["eta"], rows["delta"]
        elif mapping != "name":
            raise ValueError(f"mapping must be 'name' or 'order', got {mapping!r}")
        return cls(**{k: TuningSchedule(*v) for k, v in rows.items()})

    def with_overrides(self, **rows: tuple[float, float]) -> "ScheduleSet":
        unknown = set(rows) - set(SCHEDULE_NAMES)
        if unknown:
            raise ValueError(f"unknown schedule(s) {sorted(unknown)}; expected {SCHEDULE_NAMES}")
        current = {n: getattr(self, n) for n in SCHEDULE_NAMES}
        current.update({n: TuningSchedule(*ro) for n, ro in rows.items()})
        return ScheduleSet(**current)

    def as_dict(self) -> dict[str, list[float]]:
        return {n: [getattr(self, n).r, getattr(self, n).o] for n in SCHEDULE_NAMES}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleSet":
        return cls.default().with_overrides(**{k: tuple(v) for k, v in d.items()})


@dataclass
class AgentState:
    agent_id: int
    x: np.ndarray
    l_est: np.ndarray
    lam: np.ndarray
    feasible_set: FeasibleSet
    schedules: ScheduleSet
    projector: Projector = field(default=None, repr=False)

    def __post_init__(self):
        if self.projector is None:
            self.projector = self.feasible_set.projector()


def lambda_update(state: AgentState, neighbors: list[NeighborMessage], k: int, v_total: int,
                  c2, *, allow_isolated: bool = False) -> np.ndarray:
    """Consensus and innovation step on the price, floored at ``c2``.

    An empty neighbour list is a protocol violation unless the agent is
    alone in the network or ``allow_isolated`` is set (every link dropped
    this round); the consensus term is then skipped.
    """
    if k < 1:
        raise ValueError(f"iteration index starts at 1, got {k}")
    if not neighbors and v_total > 1 and not allow_isolated:
        raise ProtocolError(f"agent {state.agent_id} received no neighbour messages in round {k}")
    lam = state.lam
    diff = np.zeros_like(lam)
    for msg in neighbors:
        if msg.lam.shape != lam.shape:
            raise ProtocolError(f"agent {state.agent_id}: message from {msg.sender} has shape "
                                f"{msg.lam.shape}, expected {lam.shape}")
        diff += lam - msg.lam
    a = state.schedules.alpha.value_at(k)
    b = state.schedules.beta.value_at(k)
    step = lam - b * diff - a * (state.l_est / v_total - state.x)
    return np.maximum(step, c2)


def l_update(lambda_next, c1: float, c2, p_max) -> np.ndarray:
    """Load whose marginal cost ``2 c1 L + c2`` equals the price, capped at ``p_max``."""
    return np.minimum((np.asarray(lambda_next) - c2) / (2.0 * c1), p_max)


def x_update(state: AgentState, k: int, v_total: int, *, l_est=None, lam=None) -> np.ndarray:
    """Projected step on the schedule.

    ``l_est`` and ``lam`` default to the values stored in ``state``; the
    round loop passes the freshly updated ones.
    """
    if k < 1:
        raise ValueError(f"iteration index starts at 1, got {k}")
    l_est = state.l_est if l_est is None else l_est
    lam = state.lam if lam is None else lam
    d = state.schedules.delta.value_at(k)
    e = state.schedules.eta.value_at(k)
    return state.projector(state.x + d * (l_est / v_total - state.x) - e * lam)


@dataclass(frozen=True)
class WarmStart:
    x: np.ndarray
    l_est: np.ndarray
    lam: np.ndarray


def config_fingerprint(s: Scenario, graph: Graph, schedules: ScheduleSet, faults: FaultPlan | None,
                       jacobi: bool, warm: WarmStart | None, v_warmup_rounds: int = 0) -> str:
    h = hashlib.sha256()
    arrays = [s.tariff.c2, s.p_max_kw, s.baseline_load_kw]
    for pev in s.fleet:
        arrays += [pev.availability.astype(float), pev.consumption_kwh,
                   np.array([pev.battery_capacity_kwh, pev.charge_efficiency, pev.initial_energy_kwh,
                             pev.min_soc, pev.max_charge_kw])]
    if warm is not None:
        arrays += [warm.x, warm.l_est, warm.lam]
    for arr in arrays:
        h.update(np.ascontiguousarray(arr, dtype=float).tobytes())
    meta = {
        "grid": [s.grid.horizon_steps, s.grid.step_hours],
        "c1": s.tariff.c1,
        "edges": graph.edge_list,
        "schedules": schedules.as_dict(),
        "faults": None if faults is None else [faults.drop_probability, faults.halt_at_iteration,
                                               faults.rng_seed, faults.stale_replay],
        "jacobi": jacobi,
        "v_warmup_rounds": v_warmup_rounds,
    }
    h.update(json.dumps(meta, sort_keys=True).encode())
    return h.hexdigest()


def run_distributed(s: Scenario, graph: Graph, iters: int, schedules: ScheduleSet | None = None,
                    record_every: int = 1, *, faults: FaultPlan | None = None,
                    f_star: float | None = None, jacobi: bool = False,
                    warm_start: WarmStart | None = None, workers: int = 1,
                    v_warmup_rounds: int = 0) -> RunTrace:
    """Run synchronous rounds from a cold (all-zero) or supplied start.

    Entries are recorded every ``record_every`` rounds and at the last
    round executed.  ``jacobi`` computes all three updates from the
    round-entry values.  ``workers > 1`` runs the per-agent steps on a
    thread pool; results do not depend on it.

    With ``v_warmup_rounds > 0`` agents do not use the fleet size directly
    but estimate it first by max-consensus on their indices over that many
    loss-free rounds (enough rounds means at least the graph diameter).
    """
    V, T = s.n_pev, s.horizon_steps
    if graph.node_count != V:
        raise TopologyError(f"graph has {graph.node_count} nodes but the fleet has {V} vehicles")
    if not graph.is_connected():
        raise TopologyError("communication graph is not connected")
    if iters < 1 or record_every < 1:
        raise ValueError("iters and record_every must be at least 1")
    schedules = schedules or ScheduleSet.default()
    c1, c2, p_max = s.tariff.c1, s.tariff.c2, s.p_max_kw

    fsets = [build_feasible_set(pev, s.grid) for pev in s.fleet]
    if warm_start is None:
        x0, l0, lam0 = np.zeros((V, T)), np.zeros((V, T)), np.zeros((V, T))
    else:
        x0, l0, lam0 = (np.array(a, dtype=float).reshape(V, T)
                        for a in (warm_start.x, warm_start.l_est, warm_start.lam))
    agents = [AgentState(v, x0[v].copy(), l0[v].copy(), lam0[v].copy(), fsets[v], schedules)
              for v in range(V)]
    v_known = _estimate_fleet_size(graph, v_warmup_rounds) if v_warmup_rounds > 0 else [V] * V
    network = Network(graph, faults)
    halt = faults.halt_at_iteration if faults is not None else None
    last = min(iters, halt) if halt is not None else iters

    def agent_round(v: int, inbox: list[NeighborMessage], k: int):
        st, nv = agents[v], v_known[v]
        lam_new = lambda_update(st, inbox, k, nv, c2, allow_isolated=graph.degree(v) > 0)
        if jacobi:
            l_new = l_update(st.lam, c1, c2, p_max)
            x_new = x_update(st, k, nv)
        else:
            l_new = l_update(lam_new, c1, c2, p_max)
            x_new = x_update(st, k, nv, l_est=l_new, lam=lam_new)
        return lam_new, l_new, x_new

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    entries: list[TraceEntry] = []
    try:
        for k in range(1, last + 1):
            inbox = network.exchange([a.lam for a in agents], k)
            if pool is None:
                results = [agent_round(v, inbox[v], k) for v in range(V)]
            else:
                results = list(pool.map(agent_round, range(V), inbox, [k] * V))
            for st, (lam_new, l_new, x_new) in zip(agents, results):
                st.lam, st.l_est, st.x = lam_new, l_new, x_new
            if k % record_every == 0 or k == last:
                entries.append(_entry(s, agents, fsets, k, f_star))
    finally:
        if pool is not None:
            pool.shutdown()

    return RunTrace(
        entries=entries,
        final_x=np.array([a.x for a in agents]),
        final_l=np.array([a.l_est for a in agents]),
        final_lam=np.array([a.lam for a in agents]),
        config_fingerprint=config_fingerprint(s, graph, schedules, faults, jacobi, warm_start, v_warmup_rounds),
        f_star=f_star,
        iterations=last,
        halted_at=last if halt is not None and halt <= iters else None,
        meta={"topology": graph.spec(), "schedules": schedules.as_dict(), "jacobi": jacobi,
              "fleet_size_used": sorted(set(v_known))},
    )


def _estimate_fleet_size(graph: Graph, rounds: int) -> list[int]:
    """Each agent's ``1 + max index heard of`` after ``rounds`` max-consensus rounds."""
    best = [np.array([float(v)]) for v in range(graph.node_count)]
    network = Network(graph)
    for r in range(1, rounds + 1):
        inbox = network.exchange(best, r)
        best = [np.max([best[v]] + [m.lam for m in inbox[v]], axis=0) for v in range(graph.node_count)]
    return [int(b[0]) + 1 for b in best]


def _entry(s: Scenario, agents: list[AgentState], fsets: list[FeasibleSet], k: int,
           f_star: float | None) -> TraceEntry:
    x = np.array([a.x for a in agents])
    agg = x.sum(axis=0)
    f = objective_value(s, x)
    box = max(max(float(np.max(fs.lower - a.x, initial=0.0)), float(np.max(a.x - fs.upper, initial=0.0)))
              for fs, a in zip(fsets, agents))
    feas = max(max(fs.violation(a.x) for fs, a in zip(fsets, agents)), box)
    return TraceEntry(
        k=k,
        objective=f,
        rel_obj=rel_obj(f, f_star) if f_star is not None else float("nan"),
        max_disagreement=max_disagreement([a.lam for a in agents]),
        cap_violation=cap_violation(agg, s.p_max_kw),
        feas_residual=feas,
        agg_load=agg,
        box_violation=box,
    )
