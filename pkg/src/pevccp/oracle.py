"""Centralised reference solution of the fleet charging QP.

Minimise ``c1 |L|^2 + c2 . L`` over ``L = sum_v x_v``, ``L <= p_max`` and
``x_v in F_v``.  The solve has two phases:

1. a conic interior-point solve (Clarabel through cvxpy) brings every
   variable to within roughly 1e-6 of the optimum;
2. the active face of that point is identified and the QP restricted to the
   face is solved exactly with dense linear algebra of size at most T, which
   removes the interior-point offset from binding constraints.

The aggregate ``L`` is unique (the objective is strictly convex in it);
individual schedules are not, and phase 2 returns the optimal schedules
closest to the phase-1 point.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import nnls

from pevccp.errors import InfeasiblePevError, InfeasibleProblemError, NonConvergenceError
from pevccp.feasibility import EPS_FEAS, FeasibleSet, build_feasible_set
from pevccp.model import Scenario, validate_scenario

ACTIVE_TOL = 1e-6


@dataclass(frozen=True)
class KktResidual:
    """Optimality residuals; stationarity terms are relative to the price scale."""

    stationarity_x: float
    stationarity_l: float
    complementarity: float
    dual_feasibility: float
    primal_feasibility: float = 0.0

    def worst(self) -> float:
        return max(self.stationarity_x, self.stationarity_l, self.complementarity,
                   -self.dual_feasibility, self.primal_feasibility)

    def ok(self, tol: float) -> bool:
        return self.worst() <= tol


@dataclass(frozen=True)
class CentralSolution:
    x_all: np.ndarray
    l_agg: np.ndarray
    objective: float
    kkt: KktResidual
    price: np.ndarray | None = None


def objective_value(s: Scenario, x_all) -> float:
    x_all = np.asarray(x_all, dtype=float)
    if x_all.ndim != 2 or x_all.shape != (s.n_pev, s.horizon_steps):
        raise ValueError(f"x_all has shape {x_all.shape}, expected {(s.n_pev, s.horizon_steps)}")
    load = x_all.sum(axis=0)
    return float(s.tariff.c1 * load @ load + s.tariff.c2 @ load)


def feasible_sets(s: Scenario) -> list[FeasibleSet]:
    out = []
    for i, pev in enumerate(s.fleet):
        try:
            out.append(build_feasible_set(pev, s.grid))
        except InfeasiblePevError as exc:
            raise InfeasibleProblemError(f"vehicle {i}: {exc}", family="energy") from exc
    return out


# -- KKT diagnostics ------------------------------------------------------------

def _active_rows(fset: FeasibleSet, x_v: np.ndarray, tol: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Active reduced rows at ``x_v``: (row matrix, rhs, slack)."""
    red = fset._reduced
    z = x_v[red.free]
    slack = red.h - red.g @ z
    act = slack <= tol
    return red.g[act], red.h[act], slack[act]


def _price_scale(s: Scenario, load: np.ndarray) -> float:
    return max(1.0, float(np.max(np.abs(2 * s.tariff.c1 * load + s.tariff.c2))))


def kkt_check(s: Scenario, sol: CentralSolution, tol: float = ACTIVE_TOL,
              fsets: list[FeasibleSet] | None = None) -> KktResidual:
    """Recover multipliers on the active constraints and report residuals.

    The aggregate-cap multipliers come from a least-squares fit of every
    vehicle's stationarity condition at once; given the resulting price,
    each vehicle's inequality multipliers are fitted with a non-negativity
    constraint, so any dual infeasibility there shows up as a stationarity
    residual.  ``tol`` decides which constraints count as active.
    """
    fsets = fsets or feasible_sets(s)
    x = np.asarray(sol.x_all, dtype=float)
    load = x.sum(axis=0)
    c1, c2, cap = s.tariff.c1, s.tariff.c2, s.p_max_kw
    scale = _price_scale(s, load)
    base_price = 2 * c1 * load + c2

    cap_slack = cap - load
    cap_act = np.flatnonzero(cap_slack <= tol)
    per_agent = [_active_rows(f, x[v], tol) for v, f in enumerate(fsets)]

    # complement projectors of each vehicle's active normals, in full coordinates
    def residual_map(v):
        f, (g, _, _) = fsets[v], per_agent[v]
        free = f._reduced.free
        m = np.zeros((s.horizon_steps, s.horizon_steps))
        if len(free):
            if len(g):
                q, sv, _ = np.linalg.svd(g.T, full_matrices=False)
                q = q[:, sv > 1e-10 * max(sv.max(), 1.0)]
                proj = np.eye(len(free)) - q @ q.T
            else:
                proj = np.eye(len(free))
            m[np.ix_(free, free)] = proj
        return m

    mu_cap = np.zeros(s.horizon_steps)
    if len(cap_act):
        total = sum(residual_map(v) for v in range(s.n_pev))
        lhs = total[np.ix_(cap_act, cap_act)]
        rhs = -(total @ base_price)[cap_act]
        mu, *_ = np.linalg.lstsq(lhs, rhs, rcond=None)
        mu_cap[cap_act] = mu
    price = base_price + np.maximum(mu_cap, 0.0)

    stat_x = 0.0
    compl = float(np.max(np.abs(np.maximum(mu_cap, 0) * cap_slack), initial=0.0))
    for v, f in enumerate(fsets):
        free = f._reduced.free
        if not len(free):
            continue
        g, _, slack = per_agent[v]
        target = -price[free]
        if len(g):
            nu, _ = nnls(g.T, target, maxiter=50 * g.shape[0] + 100)
            res = price[free] + g.T @ nu
            compl = max(compl, float(np.max(np.abs(nu * slack), initial=0.0)))
        else:
            res = price[free]
        stat_x = max(stat_x, float(np.max(np.abs(res))))

    primal = max(
        float(np.max(load - cap, initial=0.0)),
        max(f.violation(x[v]) for v, f in enumerate(fsets)),
        max(float(np.max(np.maximum(f.lower - x[v], x[v] - f.upper), initial=0.0))
            for v, f in enumerate(fsets)),
        float(np.max(np.abs(np.asarray(sol.l_agg) - load), initial=0.0)),
    )
    return KktResidual(
        stationarity_x=stat_x / scale,
        stationarity_l=float(np.max(np.maximum(-mu_cap, 0.0), initial=0.0)) / scale,
        complementarity=compl / scale,
        dual_feasibility=min(0.0, float(np.min(mu_cap, initial=0.0))) / scale,
        primal_feasibility=primal,
    )


# -- solver -----------------------------------------------------------------------

def _coarse_solve(s: Scenario, fsets: list[FeasibleSet]) -> np.ndarray:
    import cvxpy as cp

    V, T = s.n_pev, s.horizon_steps
    upper = np.array([f.upper for f in fsets])
    lower = np.array([f.lower for f in fsets])
    x = cp.Variable((V, T))
    load = cp.sum(x, axis=0)
    cons = [load <= s.p_max_kw, x >= lower, x <= upper]
    cons += [f.a_matrix @ x[v] <= f.b_vector for v, f in enumerate(fsets) if f.n_rows]
    scale = 1.0 / max(1.0, float(np.max(np.abs(s.tariff.c2))) + 2 * s.tariff.c1 * float(np.max(s.p_max_kw)))
    obj = cp.Minimize(scale * (s.tariff.c1 * cp.sum_squares(load) + s.tariff.c2 @ load))
    prob = cp.Problem(obj, cons)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            prob.solve(solver="CLARABEL", max_iter=400)
        except cp.error.SolverError as exc:
            raise NonConvergenceError(f"interior-point phase failed: {exc}") from exc
    if prob.status in ("infeasible", "infeasible_inaccurate"):
        raise InfeasibleProblemError("no schedule satisfies every vehicle and the power cap",
                                     family="power_cap")
    if x.value is None:
        raise NonConvergenceError(f"interior-point phase ended with status {prob.status}")
    return np.clip(np.asarray(x.value), lower, upper)


def _null_basis(g: np.ndarray, n: int) -> np.ndarray:
    if not len(g):
        return np.eye(n)
    _, sv, vt = np.linalg.svd(g, full_matrices=True)
    rank = int(np.sum(sv > 1e-10 * max(sv.max(), 1.0)))
    return vt[rank:].T


def _independent_subset(rows: np.ndarray, order: np.ndarray) -> list[int]:
    """Greedy linearly independent subset of ``rows`` visited in ``order``."""
    basis: list[np.ndarray] = []
    chosen = []
    for i in order:
        r = rows[i].astype(float)
        for b in basis:
            r = r - (b @ r) * b
        nrm = np.linalg.norm(r)
        if nrm > 1e-9 * max(np.linalg.norm(rows[i]), 1.0):
            basis.append(r / nrm)
            chosen.append(int(i))
    return chosen


class _FaceSolver:
    """Primal active-set method over the joint (vehicles x steps) variable.

    The working set holds reduced rows per vehicle plus binding cap steps
    and is kept linearly independent, so multipliers are unique.  Moves
    stay inside the working face: vehicle ``v`` moves within the null space
    ``N_v`` of its rows, the aggregate moves within ``range(P)`` with
    ``P = sum_v N_v N_v^T``, and an aggregate change ``dS`` is spread over
    the vehicles as ``N_v N_v^T P^+ dS`` (the minimum-norm split).
    """

    def __init__(self, s: Scenario, fsets: list[FeasibleSet]):
        self.s, self.fsets = s, fsets
        self.T = s.horizon_steps
        self.work: list[list[int]] = [[] for _ in fsets]
        self.cap: list[int] = []
        self.nulls: list[np.ndarray] = [None] * len(fsets)

    # geometry ------------------------------------------------------------
    def _refresh(self, v: int) -> None:
        f = self.fsets[v]
        red = f._reduced
        nb = np.zeros((self.T, 0))
        if len(red.free):
            n_free = _null_basis(red.g[self.work[v]], len(red.free))
            nb = np.zeros((self.T, n_free.shape[1]))
            nb[red.free] = n_free
        self.nulls[v] = nb

    def _p(self) -> np.ndarray:
        return sum(nb @ nb.T for nb in self.nulls)

    def _range(self, p):
        w, u = np.linalg.eigh(p)
        keep = w > 1e-10 * max(w.max(initial=0.0), 1.0)
        return u[:, keep], w[keep]

    # initial working set from an approximate optimum -----------------------
    def seed(self, x_hat: np.ndarray, tau: float) -> np.ndarray:
        x = x_hat.copy()
        for v, f in enumerate(self.fsets):
            red = f._reduced
            if not len(red.free):
                self.nulls[v] = np.zeros((self.T, 0))
                continue
            z = x[v][red.free]
            slack = red.h - red.g @ z
            cand = np.flatnonzero(slack <= tau)
            self.work[v] = _independent_subset(red.g, cand[np.argsort(slack[cand], kind="stable")])
            g, h = red.g[self.work[v]], red.h[self.work[v]]
            if len(g):
                corr, *_ = np.linalg.lstsq(g, g @ z - h, rcond=None)
                x[v][red.free] = z - corr
            self._refresh(v)
        p = self._p()
        slack = self.s.p_max_kw - x.sum(axis=0)
        for t in np.argsort(slack, kind="stable"):
            if slack[t] > tau:
                break
            trial = self.cap + [int(t)]
            cols = p[:, trial]
            if np.linalg.matrix_rank(cols, tol=1e-9 * max(np.abs(cols).max(), 1.0)) == len(trial):
                self.cap = trial
        need = np.zeros(self.T)
        need[self.cap] = (self.s.p_max_kw - x.sum(axis=0))[self.cap]
        if self.cap:
            y, *_ = np.linalg.lstsq(p[self.cap], need[self.cap], rcond=None)
            x = self._spread(x, y)
        return x

    def _spread(self, x, y):
        x = x.copy()
        for v, nb in enumerate(self.nulls):
            if nb.shape[1]:
                x[v] += nb @ (nb.T @ y)
        return x

    # one face solve ------------------------------------------------------
    def face_optimum(self, x: np.ndarray) -> np.ndarray:
        c1, c2 = self.s.tariff.c1, self.s.tariff.c2
        p = self._p()
        q, w = self._range(p)
        if not q.shape[1]:
            return x.copy()
        load = x.sum(axis=0)
        e = q[self.cap]
        k, m = q.shape[1], len(self.cap)
        kkt = np.block([[2 * c1 * np.eye(k), e.T], [e, np.zeros((m, m))]])
        rhs = np.concatenate([-(q.T @ (2 * c1 * load + c2)), np.zeros(m)])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        delta = q @ sol[:k]
        y = q @ ((q.T @ delta) / w)
        return self._spread(x, y)

    def multipliers(self, x: np.ndarray):
        """Cap multipliers and per-vehicle row multipliers on the working set."""
        load = x.sum(axis=0)
        price = 2 * self.s.tariff.c1 * load + self.s.tariff.c2
        mu = np.zeros(0)
        if self.cap:
            p = self._p()
            mu, *_ = np.linalg.lstsq(p[:, self.cap], -(p @ price), rcond=None)
            price = price.copy()
            price[self.cap] += mu
        nus = []
        for v, f in enumerate(self.fsets):
            red = f._reduced
            if self.work[v]:
                nu, *_ = np.linalg.lstsq(red.g[self.work[v]].T, -price[red.free], rcond=None)
            else:
                nu = np.zeros(0)
            nus.append(nu)
        return mu, nus

    def step(self, x: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, bool]:
        """Move towards ``target`` until a constraint blocks; returns (point, reached)."""
        d = target - x
        alpha, block = 1.0, None
        for v, f in enumerate(self.fsets):
            red = f._reduced
            if not len(red.free):
                continue
            rate = red.g @ d[v][red.free]
            slack = np.maximum(red.h - red.g @ x[v][red.free], 0.0)
            inwork = np.zeros(len(rate), dtype=bool)
            inwork[self.work[v]] = True
            cand = (rate > 1e-13 * (1.0 + np.abs(red.h))) & ~inwork
            if cand.any():
                ratios = np.where(cand, slack / np.where(cand, rate, 1.0), np.inf)
                i = int(np.argmin(ratios))
                if ratios[i] < alpha:
                    alpha, block = float(ratios[i]), ("row", v, i)
        rate = d.sum(axis=0)
        slack = np.maximum(self.s.p_max_kw - x.sum(axis=0), 0.0)
        cand = rate > 1e-13 * (1.0 + self.s.p_max_kw)
        cand[self.cap] = False
        if cand.any():
            ratios = np.where(cand, slack / np.where(cand, rate, 1.0), np.inf)
            t = int(np.argmin(ratios))
            if ratios[t] < alpha:
                alpha, block = float(ratios[t]), ("cap", t)
        x_new = x + alpha * d
        if block is None:
            return x_new, True
        if block[0] == "row":
            _, v, i = block
            self.work[v].append(i)
            self._refresh(v)
        else:
            self.cap.append(block[1])
        return x_new, False

    def drop(self, mu, nus, scale: float, tol: float) -> bool:
        worst, where = -tol * scale, None
        if len(mu) and mu.min() < worst:
            worst, where = float(mu.min()), ("cap", int(np.argmin(mu)))
        for v, nu in enumerate(nus):
            if len(nu) and nu.min() < worst:
                worst, where = float(nu.min()), ("row", v, int(np.argmin(nu)))
        if where is None:
            return False
        if where[0] == "cap":
            self.cap.pop(where[1])
        else:
            self.work[where[1]].pop(where[2])
            self._refresh(where[1])
        return True


def _active_set_polish(s: Scenario, fsets, x_hat: np.ndarray, tau: float, max_iter: int = 2000) -> np.ndarray:
    solver = _FaceSolver(s, fsets)
    x = solver.seed(x_hat, tau)
    scale = _price_scale(s, x.sum(axis=0))
    for _ in range(max_iter):
        x, reached = solver.step(x, solver.face_optimum(x))
        if not reached:
            continue
        mu, nus = solver.multipliers(x)
        if not solver.drop(mu, nus, scale, 1e-12):
            return x
    raise NonConvergenceError(f"active-set polish did not finish in {max_iter} iterations", best=x)


def _clean(fsets, x):
    return np.array([np.clip(x[v], f.lower, f.upper) for v, f in enumerate(fsets)])


def solve_central(s: Scenario, tol: float = 1e-8) -> CentralSolution:
    """Reference optimum; raises when the KKT residuals stay above ``10 * tol``."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    report = validate_scenario(s)
    if not report.ok:
        family = "power_cap" if all(v.startswith("p_max_kw") for v in report.violations) else "energy"
        raise InfeasibleProblemError(str(report), family=family)
    fsets = feasible_sets(s)
    x_hat = _coarse_solve(s, fsets)

    best, best_res = None, None
    for tau in (1e-5, 1e-7):
        try:
            x = _clean(fsets, _active_set_polish(s, fsets, x_hat, tau))
        except NonConvergenceError:
            continue
        load = x.sum(axis=0)
        cand = CentralSolution(x, load, objective_value(s, x), KktResidual(0, 0, 0, 0))
        res = kkt_check(s, cand, tol=ACTIVE_TOL, fsets=fsets)
        if best_res is None or res.worst() < best_res.worst():
            best, best_res = cand, res
        if res.ok(10 * tol):
            break
    if best is None:
        x = _clean(fsets, x_hat)
        best = CentralSolution(x, x.sum(axis=0), objective_value(s, x), KktResidual(0, 0, 0, 0))
        best_res = kkt_check(s, best, tol=ACTIVE_TOL, fsets=fsets)
    sol = CentralSolution(best.x_all, best.l_agg, best.objective, best_res,
                          price=_recover_price(s, best, fsets))
    if not best_res.ok(10 * tol):
        raise NonConvergenceError(f"reference solve did not reach tolerance {tol:g}: {best_res}", best=sol)
    return sol


def _recover_price(s: Scenario, sol: CentralSolution, fsets) -> np.ndarray:
    """Equilibrium price ``2 c1 L + c2 + mu_cap`` (mu_cap fitted as in kkt_check)."""
    load = sol.l_agg
    base = 2 * s.tariff.c1 * load + s.tariff.c2
    cap_act = np.flatnonzero(s.p_max_kw - load <= ACTIVE_TOL)
    if not len(cap_act):
        return base
    # price at a binding step: the smallest value every vehicle can rationalise,
    # i.e. the least-squares fit used by kkt_check
    total = np.zeros((s.horizon_steps, s.horizon_steps))
    for v, f in enumerate(fsets):
        free = f._reduced.free
        if not len(free):
            continue
        g, _, _ = _active_rows(f, sol.x_all[v], ACTIVE_TOL)
        if len(g):
            qq, sv, _ = np.linalg.svd(g.T, full_matrices=False)
            qq = qq[:, sv > 1e-10 * max(sv.max(), 1.0)]
            proj = np.eye(len(free)) - qq @ qq.T
        else:
            proj = np.eye(len(free))
        total[np.ix_(free, free)] += proj
    mu, *_ = np.linalg.lstsq(total[np.ix_(cap_act, cap_act)], -(total @ base)[cap_act], rcond=None)
    price = base.copy()
    price[cap_act] += np.maximum(mu, 0.0)
    return price
