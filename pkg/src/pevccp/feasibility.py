"""Per-vehicle feasible sets and the Euclidean projections used by the updates.

A vehicle's feasible set is ``F = {x : A x <= b, lower <= x <= upper}`` where
the rows of ``A`` bound the cumulative charged energy from above (battery
full) and below (minimum state of charge).

Projection onto ``F`` uses a primal active-set method on
``min 0.5 |x - y|^2  s.t.  G x <= h``.  It terminates with the exact
projection (up to round-off), and because ``F`` does not change between
iterations of the distributed algorithm it can be warm-started from the
previous result and working set, which typically needs one or two
equality-constrained solves per call.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pevccp.errors import InfeasiblePevError, ProjectionError
from pevccp.model import PevModel, TimeGrid, greedy_max_charge

EPS_PROJ = 1e-8
EPS_FEAS = 1e-7
MAX_SWEEPS = 10_000


@dataclass(frozen=True, eq=False)
class FeasibleSet:
    a_matrix: np.ndarray
    b_vector: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    witness: np.ndarray | None = None
    _reduced: "_Reduced" = field(init=False, repr=False)

    def __post_init__(self):
        a = np.array(self.a_matrix, dtype=float, ndmin=2)
        b = np.array(self.b_vector, dtype=float, ndmin=1)
        lo = np.array(self.lower, dtype=float, ndmin=1)
        hi = np.array(self.upper, dtype=float, ndmin=1)
        if a.shape != (len(b), len(lo)) or lo.shape != hi.shape:
            raise ValueError(f"inconsistent shapes A{a.shape}, b{b.shape}, lower{lo.shape}, upper{hi.shape}")
        if np.any(lo > hi):
            raise InfeasiblePevError("lower bound above upper bound", step=int(np.flatnonzero(lo > hi)[0]))
        for arr in (a, b, lo, hi):
            arr.setflags(write=False)
        object.__setattr__(self, "a_matrix", a)
        object.__setattr__(self, "b_vector", b)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

        red = _Reduced.build(a, b, lo, hi)
        object.__setattr__(self, "_reduced", red)
        w = self.witness
        if w is None:
            w = _find_feasible_point(a, b, lo, hi)
        w = np.clip(np.asarray(w, dtype=float), lo, hi)
        if self.violation(w) > EPS_FEAS:
            raise InfeasiblePevError("feasible set is empty (witness point violates constraints)")
        w.setflags(write=False)
        object.__setattr__(self, "witness", w)

    @property
    def horizon_steps(self) -> int:
        return len(self.lower)

    @property
    def n_rows(self) -> int:
        return self.a_matrix.shape[0]

    def violation(self, x) -> float:
        """Largest violation of ``A x <= b`` (box bounds not included)."""
        x = np.asarray(x, dtype=float)
        if self.n_rows == 0:
            return 0.0
        return float(max(0.0, np.max(self.a_matrix @ x - self.b_vector)))

    def box_ok(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def contains(self, x, tol: float = EPS_FEAS) -> bool:
        return self.box_ok(x) and self.violation(x) <= tol

    def projector(self) -> "Projector":
        return Projector(self)


@dataclass
class _Reduced:
    """Constraints restricted to the non-fixed coordinates, duplicates merged."""

    free: np.ndarray  # indices of coordinates with lower < upper
    base: np.ndarray  # full-length point holding the fixed coordinates
    g: np.ndarray  # rows over free coordinates: polytope rows, then x <= hi, then -x <= -lo
    h: np.ndarray
    n_poly: int

    @classmethod
    def build(cls, a, b, lo, hi) -> "_Reduced":
        free = np.flatnonzero(hi > lo)
        fixed = np.flatnonzero(hi <= lo)
        base = lo.copy()
        rhs = b - a[:, fixed] @ base[fixed] if len(fixed) else b.copy()
        rows = a[:, free]
        keep = np.any(rows != 0.0, axis=1)
        if np.any(rhs[~keep] < -EPS_FEAS):
            bad = int(np.flatnonzero(~keep & (rhs < -EPS_FEAS))[0])
            raise InfeasiblePevError(f"constraint row {bad} cannot be satisfied", step=bad)
        rows, rhs = rows[keep], rhs[keep]
        if len(rows):
            # identical rows: keep only the tightest right-hand side
            uniq, inverse = np.unique(rows, axis=0, return_inverse=True)
            inverse = np.ravel(inverse)
            tight = np.full(len(uniq), np.inf)
            np.minimum.at(tight, inverse, rhs)
            rows, rhs = uniq, tight
        n = len(free)
        eye = np.eye(n)
        g = np.vstack([rows.reshape(len(rows), n), eye, -eye])
        h = np.concatenate([rhs, hi[free], -lo[free]])
        return cls(free=free, base=base, g=g, h=h, n_poly=len(rows))


def _find_feasible_point(a, b, lo, hi) -> np.ndarray:
    """Phase-one LP for sets not built from a vehicle model."""
    from scipy.optimize import linprog

    n = len(lo)
    res = linprog(np.zeros(n), A_ub=a if len(b) else None, b_ub=b if len(b) else None,
                  bounds=list(zip(lo, hi)), method="highs")
    if res.status != 0:
        raise InfeasiblePevError(f"feasible set is empty ({res.message})")
    return res.x


def build_feasible_set(pev: PevModel, grid: TimeGrid) -> FeasibleSet:
    """Energy polytope of one vehicle: 2T cumulative-energy rows plus the power box."""
    T = grid.horizon_steps
    if len(pev.availability) != T:
        raise ValueError(f"vehicle horizon {len(pev.availability)} != grid horizon {T}")
    gain = pev.charge_efficiency * grid.step_hours
    cum = np.tril(np.ones((T, T)))
    cons = np.cumsum(pev.consumption_kwh)
    e0, cap = pev.initial_energy_kwh, pev.battery_capacity_kwh
    a = np.vstack([gain * cum, -gain * cum])
    b = np.concatenate([cap - e0 + cons, e0 - cons - pev.min_soc * cap])
    lower = np.zeros(T)
    upper = np.where(pev.availability, pev.max_charge_kw, 0.0)

    witness, bad = greedy_max_charge(pev, grid)
    if bad is not None:
        raise InfeasiblePevError(f"minimum state of charge cannot be met at step {bad}", step=bad)
    viol = a @ witness - b
    if np.any(viol > EPS_FEAS):
        step = int(np.flatnonzero(viol > EPS_FEAS)[0]) % T
        raise InfeasiblePevError(f"energy bounds cannot be met at step {step}", step=step)
    return FeasibleSet(a, b, lower, upper, witness=witness)


# -- projections --------------------------------------------------------------

def project_halfline_floor(y, floor) -> np.ndarray:
    y, floor = np.asarray(y, dtype=float), np.asarray(floor, dtype=float)
    if y.shape != floor.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {floor.shape}")
    return np.maximum(y, floor)


def project_halfline_cap(y, cap) -> np.ndarray:
    y, cap = np.asarray(y, dtype=float), np.asarray(cap, dtype=float)
    if y.shape != cap.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {cap.shape}")
    return np.minimum(y, cap)


class Projector:
    """Warm-started projection onto one fixed :class:`FeasibleSet`.

    Keeps the previous solution and its working set; each call starts from
    them.  Instances are not shared between agents.
    """

    def __init__(self, fset: FeasibleSet, max_iter: int | None = None):
        self.fset = fset
        red = fset._reduced
        self._x = fset.witness[red.free].copy()
        self._work: list[int] = []
        self.max_iter = max_iter or 50 * (len(red.h) + 10)
        self.last_iterations = 0

    def __call__(self, y) -> np.ndarray:
        fset, red = self.fset, self.fset._reduced
        y = np.asarray(y, dtype=float)
        if y.shape != fset.lower.shape:
            raise ValueError(f"point has shape {y.shape}, expected {fset.lower.shape}")
        out = red.base.copy()
        if len(red.free):
            z, work, iters = _active_set_projection(red.g, red.h, y[red.free], self._x, self._work,
                                                    self.max_iter)
            self._x, self._work, self.last_iterations = z, work, iters
            out[red.free] = z
        return np.clip(out, fset.lower, fset.upper)


def _active_set_projection(g, h, y, x, work, max_iter):
    """Dual active-set (Goldfarb-Idnani) method for ``min 0.5|z - y|^2 s.t. g z <= h``.

    Starts from the minimiser over the equality face of ``work`` (rows with
    negative multipliers are released first) and adds violated rows one at
    a time while keeping every multiplier non-negative.  Linearly dependent
    rows are handled by partial steps, so degenerate vertices cannot make it
    cycle.  ``x`` is unused and kept only for the call signature.
    """
    del x
    work = list(work)
    scale = 1.0 + float(np.max(np.abs(y), initial=0.0)) + float(np.max(np.abs(h), initial=0.0))
    tol_feas = 1e-12 * scale

    def face(rows):
        if not rows:
            return y.copy(), np.empty(0)
        gw = g[rows]
        nu = np.linalg.solve(gw @ gw.T, gw @ y - h[rows])
        return y - gw.T @ nu, nu

    # release rows whose multipliers went negative for the new point
    while True:
        try:
            z, nu = face(work)
        except np.linalg.LinAlgError:
            work, (z, nu) = [], face([])
        if not work or nu.min() >= 0:
            break
        work.pop(int(np.argmin(nu)))

    for it in range(1, max_iter + 1):
        viol = g @ z - h
        if work:
            viol[work] = -np.inf
        p = int(np.argmax(viol))
        if viol[p] <= tol_feas:
            return z, work, it
        gp = g[p]
        u_new = 0.0
        while True:
            if work:
                gw = g[work]
                r = np.linalg.solve(gw @ gw.T, gw @ gp)
                step_dir = gp - gw.T @ r
            else:
                r = np.empty(0)
                step_dir = gp
            # moving z by -t * step_dir lowers row p's excess at rate |step_dir|^2
            rate = float(step_dir @ step_dir)
            excess = float(gp @ z - h[p])
            t_full = excess / rate if rate > 1e-20 * float(gp @ gp) else np.inf
            t_part, drop = np.inf, -1
            if work:
                pos = r > 1e-14
                if pos.any():
                    ratios = np.where(pos, nu / np.where(pos, r, 1.0), np.inf)
                    drop = int(np.argmin(ratios))
                    t_part = float(ratios[drop])
            t = min(t_full, t_part)
            if not np.isfinite(t):
                raise ProjectionError("projection target set is empty", best=z,
                                      residual=float(np.max(g @ z - h)))
            if np.isfinite(t_full):
                z = z - t * step_dir
            nu = nu - t * r
            u_new += t
            if t_full <= t_part:
                work.append(p)
                nu = np.append(nu, u_new)
                break
            work.pop(drop)
            nu = np.delete(nu, drop)
    residual = float(np.max(g @ z - h, initial=0.0))
    raise ProjectionError(f"active-set projection did not converge in {max_iter} iterations",
                          best=z, residual=residual)


def project_box_polytope(f: FeasibleSet, y, *, method: str = "active_set",
                         tol: float = EPS_PROJ, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Euclidean projection of ``y`` onto ``f``.

    ``method="dykstra"`` runs Dykstra's alternating projections over the
    individual halfspaces and the box instead (slower, same answer to
    ``tol``).
    """
    if method == "active_set":
        return Projector(f)(y)
    if method == "dykstra":
        return project_dykstra(f, y, tol=tol, max_sweeps=max_sweeps)
    raise ValueError(f"unknown projection method {method!r}")


def project_dykstra(f: FeasibleSet, y, tol: float = EPS_PROJ, max_sweeps: int = MAX_SWEEPS) -> np.ndarray:
    """Dykstra's algorithm over the halfspaces ``a_i x <= b_i`` and the box."""
    y = np.asarray(y, dtype=float)
    a, b = f.a_matrix, f.b_vector
    norms2 = np.einsum("ij,ij->i", a, a)
    rows = np.flatnonzero(norms2 > 0)
    x = y.copy()
    corr = np.zeros((len(rows) + 1, len(y)))
    for _ in range(max_sweeps):
        x_prev, corr_prev = x.copy(), corr.copy()
        for k, i in enumerate(rows):
            z = x + corr[k]
            excess = a[i] @ z - b[i]
            x = z - (excess / norms2[i]) * a[i] if excess > 0 else z
            corr[k] = z - x
        z = x + corr[-1]
        x = np.clip(z, f.lower, f.upper)
        corr[-1] = z - x
        # x can stall for a sweep while the corrections still move, so check both
        if (np.linalg.norm(x - x_prev) <= tol and f.violation(x) <= tol
                and np.max(np.abs(corr - corr_prev), initial=0.0) <= tol):
            return x
    raise ProjectionError(f"Dykstra projection did not converge in {max_sweeps} sweeps",
                          best=x, residual=f.violation(x))
