"""Scenario, solution and trace files.

Scenarios and reference solutions are versioned JSON documents; Python's
float repr is the shortest string that parses back to the same double, so
values survive a round trip bit for bit.  Traces are CSV (one row per
recorded iteration) or JSON.  Every writer is deterministic.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from pevccp.errors import FormatError, PevccpError, ScenarioError
from pevccp.metrics import TRACE_COLUMNS, RunTrace, TraceEntry
from pevccp.model import PevModel, Scenario, Tariff, TimeGrid, validate_scenario

SCENARIO_FORMAT = "pevccp-scenario"
SOLUTION_FORMAT = "pevccp-central-solution"
TRACE_FORMAT = "pevccp-trace"
VERSION = 1

_TOP_KEYS = {"format", "version", "grid", "tariff", "p_max_kw", "baseline_load_kw", "fleet",
             "schedules", "topology"}
_GRID_KEYS = {"horizon_steps", "step_hours"}
_TARIFF_KEYS = {"c1", "c2"}
_PEV_KEYS = {"battery_capacity_kwh", "charge_efficiency", "initial_energy_kwh", "min_soc",
             "max_charge_kw", "availability", "consumption_kwh"}


def _dump(doc: dict, path) -> None:
    text = json.dumps(doc, indent=1, allow_nan=False) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def _load(path, expected_format: str) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: top level must be an object")
    if doc.get("format") != expected_format:
        raise FormatError(f"{path}: key 'format' must be {expected_format!r}, got {doc.get('format')!r}")
    if doc.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    return doc


def _check_keys(obj, allowed: set[str], required: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise FormatError(f"{where}: expected an object")
    unknown = sorted(set(obj) - allowed)
    if unknown:
        raise FormatError(f"{where}: unknown key {unknown[0]!r}")
    missing = sorted(required - set(obj))
    if missing:
        raise FormatError(f"{where}: missing key {missing[0]!r}")


def _number(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise FormatError(f"{where}: expected a finite number, got {value!r}")
    return float(value)


def _vector(value, where: str, dtype=float) -> np.ndarray:
    if not isinstance(value, list):
        raise FormatError(f"{where}: expected a list")
    if dtype is bool:
        if not all(isinstance(v, bool) for v in value):
            raise FormatError(f"{where}: expected booleans")
        return np.array(value, dtype=bool)
    return np.array([_number(v, f"{where}[{i}]") for i, v in enumerate(value)], dtype=float)


# -- scenarios ---------------------------------------------------------------------

def scenario_to_dict(s: Scenario, schedules: dict | None = None, topology: str | None = None) -> dict:
    doc = {
        "format": SCENARIO_FORMAT,
        "version": VERSION,
        "grid": {"horizon_steps": s.grid.horizon_steps, "step_hours": s.grid.step_hours},
        "tariff": {"c1": s.tariff.c1, "c2": s.tariff.c2.tolist()},
        "p_max_kw": s.p_max_kw.tolist(),
        "baseline_load_kw": s.baseline_load_kw.tolist(),
        "fleet": [
            {
                "battery_capacity_kwh": p.battery_capacity_kwh,
                "charge_efficiency": p.charge_efficiency,
                "initial_energy_kwh": p.initial_energy_kwh,
                "min_soc": p.min_soc,
                "max_charge_kw": p.max_charge_kw,
                "availability": p.availability.tolist(),
                "consumption_kwh": p.consumption_kwh.tolist(),
            }
            for p in s.fleet
        ],
    }
    if schedules is not None:
        doc["schedules"] = schedules
    if topology is not None:
        doc["topology"] = topology
    return doc


def scenario_from_dict(doc: dict, where: str = "scenario") -> tuple[Scenario, dict | None, str | None]:
    _check_keys(doc, _TOP_KEYS, _TOP_KEYS - {"schedules", "topology"}, where)
    _check_keys(doc["grid"], _GRID_KEYS, _GRID_KEYS, f"{where}.grid")
    _check_keys(doc["tariff"], _TARIFF_KEYS, _TARIFF_KEYS, f"{where}.tariff")
    steps = doc["grid"]["horizon_steps"]
    if isinstance(steps, bool) or not isinstance(steps, int):
        raise FormatError(f"{where}.grid.horizon_steps: expected an integer, got {steps!r}")
    if not isinstance(doc["fleet"], list):
        raise FormatError(f"{where}.fleet: expected a list")
    fleet = []
    for i, p in enumerate(doc["fleet"]):
        at = f"{where}.fleet[{i}]"
        _check_keys(p, _PEV_KEYS, _PEV_KEYS, at)
        fleet.append(PevModel(
            battery_capacity_kwh=_number(p["battery_capacity_kwh"], f"{at}.battery_capacity_kwh"),
            charge_efficiency=_number(p["charge_efficiency"], f"{at}.charge_efficiency"),
            initial_energy_kwh=_number(p["initial_energy_kwh"], f"{at}.initial_energy_kwh"),
            min_soc=_number(p["min_soc"], f"{at}.min_soc"),
            max_charge_kw=_number(p["max_charge_kw"], f"{at}.max_charge_kw"),
            availability=_vector(p["availability"], f"{at}.availability", dtype=bool),
            consumption_kwh=_vector(p["consumption_kwh"], f"{at}.consumption_kwh"),
        ))
    schedules = doc.get("schedules")
    if schedules is not None:
        if not isinstance(schedules, dict):
            raise FormatError(f"{where}.schedules: expected an object")
        for name, ro in schedules.items():
            if name not in ("alpha", "beta", "delta", "eta"):
                raise FormatError(f"{where}.schedules: unknown key {name!r}")
            if not isinstance(ro, list) or len(ro) != 2:
                raise FormatError(f"{where}.schedules.{name}: expected [r, o]")
            for j, v in enumerate(ro):
                _number(v, f"{where}.schedules.{name}[{j}]")
    topology = doc.get("topology")
    if topology is not None and not isinstance(topology, str):
        raise FormatError(f"{where}.topology: expected a string")
    try:
        scenario = Scenario(
            grid=TimeGrid(steps, _number(doc["grid"]["step_hours"], f"{where}.grid.step_hours")),
            fleet=tuple(fleet),
            tariff=Tariff(_number(doc["tariff"]["c1"], f"{where}.tariff.c1"),
                          _vector(doc["tariff"]["c2"], f"{where}.tariff.c2")),
            p_max_kw=_vector(doc["p_max_kw"], f"{where}.p_max_kw"),
            baseline_load_kw=_vector(doc["baseline_load_kw"], f"{where}.baseline_load_kw"),
        )
    except PevccpError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from exc
    return scenario, schedules, topology


def write_scenario(s: Scenario, path, schedules: dict | None = None, topology: str | None = None) -> None:
    _dump(scenario_to_dict(s, schedules, topology), path)


def read_scenario_document(path) -> tuple[Scenario, dict | None, str | None]:
    """Scenario plus the optional schedule overrides and topology stored with it."""
    s, schedules, topology = scenario_from_dict(_load(path, SCENARIO_FORMAT), where=str(path))
    report = validate_scenario(s)
    if not report.ok:
        raise ScenarioError(f"{path}: {report}", report)
    return s, schedules, topology


def read_scenario(path) -> Scenario:
    return read_scenario_document(path)[0]


# -- reference solutions -----------------------------------------------------------------

def write_central(sol, path) -> None:
    doc = {
        "format": SOLUTION_FORMAT,
        "version": VERSION,
        "objective": sol.objective,
        "l_agg": np.asarray(sol.l_agg).tolist(),
        "x_all": np.asarray(sol.x_all).tolist(),
        "price": None if sol.price is None else np.asarray(sol.price).tolist(),
        "kkt": {
            "stationarity_x": sol.kkt.stationarity_x,
            "stationarity_l": sol.kkt.stationarity_l,
            "complementarity": sol.kkt.complementarity,
            "dual_feasibility": sol.kkt.dual_feasibility,
            "primal_feasibility": sol.kkt.primal_feasibility,
        },
    }
    _dump(doc, path)


def read_central(path):
    from pevccp.oracle import CentralSolution, KktResidual

    doc = _load(path, SOLUTION_FORMAT)
    keys = {"format", "version", "objective", "l_agg", "x_all", "price", "kkt"}
    _check_keys(doc, keys, keys - {"price"}, str(path))
    x = np.array([_vector(r, f"{path}.x_all[{i}]") for i, r in enumerate(doc["x_all"])])
    kkt_keys = {"stationarity_x", "stationarity_l", "complementarity", "dual_feasibility",
                "primal_feasibility"}
    _check_keys(doc["kkt"], kkt_keys, kkt_keys, f"{path}.kkt")
    kkt = KktResidual(**{k: _number(v, f"{path}.kkt.{k}") for k, v in doc["kkt"].items()})
    price = doc.get("price")
    return CentralSolution(
        x_all=x,
        l_agg=_vector(doc["l_agg"], f"{path}.l_agg"),
        objective=_number(doc["objective"], f"{path}.objective"),
        kkt=kkt,
        price=None if price is None else _vector(price, f"{path}.price"),
    )


# -- traces -------------------------------------------------------------------------

def _fmt(v) -> str:
    return format(float(v), ".17g")


def trace_header(horizon_steps: int) -> list[str]:
    return list(TRACE_COLUMNS) + [f"load_{t}" for t in range(horizon_steps)]


def write_trace(t: RunTrace, path, format: str = "csv") -> None:
    if format == "csv":
        horizon = len(t.entries[0].agg_load) if t.entries else t.final_x.shape[-1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(trace_header(horizon))
            for e in t.entries:
                w.writerow([str(e.k)] + [_fmt(v) for v in e.scalars()[1:]] + [_fmt(v) for v in e.agg_load])
    elif format == "json":
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else None

        doc = {
            "format": TRACE_FORMAT,
            "version": VERSION,
            "config_fingerprint": t.config_fingerprint,
            "iterations": t.iterations,
            "halted_at": t.halted_at,
            "f_star": t.f_star,
            "columns": list(TRACE_COLUMNS) + ["agg_load"],
            "rows": [[e.k] + [num(v) for v in e.scalars()[1:]] + [e.agg_load.tolist()] for e in t.entries],
            "final_x": t.final_x.tolist(),
            "final_l": t.final_l.tolist(),
            "final_lam": t.final_lam.tolist(),
            "meta": t.meta,
        }
        _dump(doc, path)
    else:
        raise ValueError(f"trace format must be 'csv' or 'json', got {format!r}")


def read_trace(path) -> RunTrace:
    """Read a trace written by :func:`write_trace` (format chosen by content)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.lstrip().startswith("{"):
        return _read_trace_json(path)
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0][: len(TRACE_COLUMNS)] != list(TRACE_COLUMNS):
        raise FormatError(f"{path}: line 1: header must start with {','.join(TRACE_COLUMNS)}")
    width = len(rows[0])
    entries = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise FormatError(f"{path}: line {line}: expected {width} fields, got {len(row)}")
        try:
            vals = [float(v) for v in row[1:]]
            k = int(row[0])
        except ValueError as exc:
            raise FormatError(f"{path}: line {line}: {exc}") from exc
        entries.append(TraceEntry(k, *vals[:5], agg_load=np.array(vals[5:])))
    empty = np.zeros((0, width - len(TRACE_COLUMNS)))
    return RunTrace(entries=entries, final_x=empty, final_l=empty, final_lam=empty,
                    iterations=entries[-1].k if entries else 0)


def _read_trace_json(path) -> RunTrace:
    doc = _load(path, TRACE_FORMAT)
    entries = []
    for i, row in enumerate(doc["rows"]):
        vals = [float("nan") if v is None else float(v) for v in row[1:6]]
        entries.append(TraceEntry(int(row[0]), *vals, agg_load=np.array(row[6], dtype=float)))
    return RunTrace(
        entries=entries,
        final_x=np.array(doc["final_x"], dtype=float),
        final_l=np.array(doc["final_l"], dtype=float),
        final_lam=np.array(doc["final_lam"], dtype=float),
        config_fingerprint=doc["config_fingerprint"],
        f_star=doc["f_star"],
        iterations=doc["iterations"],
        halted_at=doc["halted_at"],
        meta=doc.get("meta", {}),
    )
