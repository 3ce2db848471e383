"""Grid solution of the dynamic-programming equation on a truncated box.

The equation ``(1/2) sum_i r_i^2 f_xixi + min_U [b(x,U) . Df + L(x,U)]
- gamma f = 0`` is discretized with central second differences and upwind
one-sided first differences chosen per sign of the minimizing drift, which
keeps the scheme monotone.  The minimization over the control simplex pair
is exact vertex enumeration when the objective is affine in the control
(the drift always is; the cost is when its exponents are one) and projected
descent from the best vertex otherwise.

The box truncates an unbounded problem, so boundary data is a modeling
choice: either Dirichlet values simulated under a static-priority policy
(an upper bound on the optimal cost; the default) or second-derivative-zero
extrapolation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from . import sde
from .flows import drift_batch
from .model import ControlPoint, RunningCostSpec, TreeModel, model_hash
from .sde import StaticPriority, default_priority_edge


@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform box grid; must straddle the hyperplane of zero imbalance."""

    lows: np.ndarray
    highs: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        lows = np.asarray(self.lows, dtype=float)
        highs = np.asarray(self.highs, dtype=float)
        counts = np.asarray(self.counts, dtype=int)
        if not (lows.shape == highs.shape == counts.shape) or lows.ndim != 1:
            raise ValueError("lows, highs, counts must be 1-D and matching")
        if (counts < 3).any():
            raise ValueError("need at least 3 points per dimension")
        if (highs <= lows).any():
            raise ValueError("empty box")
        if not (lows.sum() < 0.0 < highs.sum()):
            raise ValueError("box must contain the zero-imbalance hyperplane")
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "counts", counts)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @cached_property
    def spacing(self) -> np.ndarray:
        return (self.highs - self.lows) / (self.counts - 1)

    @cached_property
    def size(self) -> int:
        return int(np.prod(self.counts))

    @cached_property
    def strides(self) -> np.ndarray:
        out = np.ones(self.dim, dtype=int)
        for d in range(self.dim - 2, -1, -1):
            out[d] = out[d + 1] * self.counts[d + 1]
        return out

    @cached_property
    def points(self) -> np.ndarray:
        """All grid points, row-major, shape ``(size, dim)``."""
        axes = [np.linspace(self.lows[d], self.highs[d], self.counts[d]) for d in range(self.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    @cached_property
    def coords(self) -> np.ndarray:
        """Integer coordinates of every flat index, shape ``(size, dim)``."""
        return np.stack(np.unravel_index(np.arange(self.size), tuple(self.counts)), axis=1)

    @cached_property
    def interior(self) -> np.ndarray:
        c = self.coords
        return np.flatnonzero(((c > 0) & (c < self.counts - 1)).all(axis=1))

    @cached_property
    def boundary(self) -> np.ndarray:
        c = self.coords
        return np.flatnonzero(((c == 0) | (c == self.counts - 1)).any(axis=1))

    def to_dict(self) -> dict:
        return {
            "lows": self.lows.tolist(),
            "highs": self.highs.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Grid":
        return cls(np.array(doc["lows"]), np.array(doc["highs"]), np.array(doc["counts"]))


def default_grid(model: TreeModel, points_per_dim: int = 121, radius: float = 6.0) -> Grid:
    """Box covering ``radius`` standard deviations of the discounted bulk."""
    sigma = model.r / np.sqrt(2.0 * model.gamma)
    return Grid(-radius * sigma, radius * sigma, np.full(model.classes, points_per_dim))


@dataclass(frozen=True)
class ValueField:
    grid: Grid
    values: np.ndarray  # (size,), row-major

    def reshape(self) -> np.ndarray:
        return self.values.reshape(tuple(self.grid.counts))


@dataclass(frozen=True)
class PolicyField:
    grid: Grid
    u: np.ndarray  # (size, I)
    v: np.ndarray  # (size, J)


# -- Hamiltonian minimization ------------------------------------------------


def control_vertices(model: TreeModel) -> list[tuple[np.ndarray, np.ndarray]]:
    """Vertex pairs of the control simplices in lexicographic order."""
    out = []
    for i in range(model.classes):
        for j in range(model.stations):
            pt = ControlPoint.vertex(i, j, model.classes, model.stations)
            out.append((pt.u, pt.v))
    return out


def _project_simplex(T: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row onto the probability simplex."""
    S = np.sort(T, axis=1)[:, ::-1]
    cs = np.cumsum(S, axis=1) - 1.0
    k = np.arange(1, T.shape[1] + 1)
    cond = S - cs / k > 0
    rho = cond.sum(axis=1)
    tau = cs[np.arange(len(T)), rho - 1] / rho
    return np.maximum(T - tau[:, None], 0.0)


def _descend_simplex(lin, curve, exponent, start, iters=300):
    """Projected-gradient minimization of ``lin.t + curve.t**exponent`` rows
    over the simplex, from the given starting rows."""
    if exponent == 1.0 or not curve.any():
        return start
    T = start.copy()
    scale = np.maximum(np.abs(lin).max(axis=1), exponent * np.abs(curve).max(axis=1))
    step = 0.5 / np.maximum(scale, 1e-12)
    for _ in range(iters):
        grad = lin + exponent * curve * np.maximum(T, 1e-12) ** (exponent - 1.0)
        T = _project_simplex(T - step[:, None] * grad)
    return T


def hamiltonian_field(model: TreeModel, cost: RunningCostSpec, X: np.ndarray, P: np.ndarray):
    """Minimized drift-gradient-plus-cost over the control space, per row.

    Returns ``(H, U, V)`` for states ``X`` and gradients ``P`` of shape
    ``(N, I)``.  Ties between vertices break to the smallest class index,
    then the smallest station index.
    """
    X = np.asarray(X, dtype=float)
    P = np.asarray(P, dtype=float)
    verts = control_vertices(model)
    N = len(X)
    vals = np.empty((len(verts), N))
    for c, (u, v) in enumerate(verts):
        U = np.tile(u, (N, 1))
        V = np.tile(v, (N, 1))
        vals[c] = (drift_batch(model, X, U, V) * P).sum(axis=1) + cost.evaluate(X, U, V)
    best = vals.argmin(axis=0)
    H = vals[best, np.arange(N)]
    J = model.stations
    U = np.zeros((N, model.classes))
    V = np.zeros((N, J))
    U[np.arange(N), best // J] = 1.0
    V[np.arange(N), best % J] = 1.0

    if not cost.affine_in_control:
        s = X.sum(axis=1)
        pos = np.maximum(s, 0.0)
        neg = np.maximum(-s, 0.0)
        # split the objective: affine part from the drift, separable convex
        # part from the cost; each simplex minimizes independently.
        lin_u = np.empty((N, model.classes))
        base_v = np.tile(np.eye(J)[0], (N, 1))
        b0 = drift_batch(model, X, np.zeros((N, model.classes)), base_v)
        for i in range(model.classes):
            E = np.zeros((N, model.classes))
            E[:, i] = 1.0
            lin_u[:, i] = ((drift_batch(model, X, E, base_v) - b0) * P).sum(axis=1)
        lin_v = np.empty((N, J))
        base_u = np.tile(np.eye(model.classes)[0], (N, 1))
        b0v = drift_batch(model, X, base_u, np.zeros((N, J)))
        for j in range(J):
            E = np.zeros((N, J))
            E[:, j] = 1.0
            lin_v[:, j] = ((drift_batch(model, X, base_u, E) - b0v) * P).sum(axis=1)
        curve_u = cost.c * pos[:, None] ** cost.p
        curve_v = cost.d * neg[:, None] ** cost.q
        U2 = _descend_simplex(lin_u, curve_u, cost.p, U)
        V2 = _descend_simplex(lin_v, curve_v, cost.q, V)
        vals2 = (drift_batch(model, X, U2, V2) * P).sum(axis=1) + cost.evaluate(X, U2, V2)
        better = vals2 < H - 1e-15
        H = np.where(better, vals2, H)
        U[better] = U2[better]
        V[better] = V2[better]
    return H, U, V


def hamiltonian(model: TreeModel, cost: RunningCostSpec, x, p):
    """Minimized Hamiltonian and a minimizing control at one state."""
    H, U, V = hamiltonian_field(
        model, cost, np.asarray(x, dtype=float)[None, :], np.asarray(p, dtype=float)[None, :]
    )
    return float(H[0]), ControlPoint(U[0], V[0])


# -- solver -------------------------------------------------------------------


@dataclass(frozen=True)
class HJBReport:
    method: str
    boundary: str
    iterations: int
    converged: bool
    sup_update: float
    interior_residual: float
    priority_edge: tuple[int, int] | None = None


@dataclass(frozen=True)
class HJBSolution:
    value: ValueField
    report: HJBReport


def _candidate_tables(model, cost, grid):
    """Upwind weights, costs, and denominators per control vertex at the
    interior points."""
    interior = grid.interior
    Xi = grid.points[interior]
    h = grid.spacing
    a = 0.5 * model.r**2
    verts = control_vertices(model)
    WP, WM, LV, DEN = [], [], [], []
    for u, v in verts:
        U = np.tile(u, (len(Xi), 1))
        V = np.tile(v, (len(Xi), 1))
        b = drift_batch(model, Xi, U, V)
        wp = (a + h * np.maximum(b, 0.0)) / h**2
        wm = (a + h * np.maximum(-b, 0.0)) / h**2
        WP.append(wp)
        WM.append(wm)
        LV.append(cost.evaluate(Xi, U, V))
        DEN.append(model.gamma + wp.sum(axis=1) + wm.sum(axis=1))
    return np.stack(WP), np.stack(WM), np.stack(LV), np.stack(DEN)


def _boundary_values_mc(model, cost, grid, n_paths, dt, seed, edge):
    policy = StaticPriority.for_model(model, *edge)
    pts = grid.points[grid.boundary]
    means, _, _ = sde.mc_cost_batch(
        model, cost, pts, policy, n_paths=n_paths, dt=dt, seed=seed
    )
    return means


def _extrapolation_rows(grid):
    """COO entries for linear extrapolation at every boundary point."""
    rows, cols, data = [], [], []
    for p in grid.boundary:
        c = grid.coords[p]
        dims = [
            (d, 1 if c[d] == 0 else -1)
            for d in range(grid.dim)
            if c[d] == 0 or c[d] == grid.counts[d] - 1
        ]
        k = len(dims)
        rows.append(p)
        cols.append(p)
        data.append(1.0)
        for d, direction in dims:
            n1 = p + direction * grid.strides[d]
            n2 = p + 2 * direction * grid.strides[d]
            rows += [p, p]
            cols += [n1, n2]
            data += [-2.0 / k, 1.0 / k]
    return rows, cols, data


def _apply_extrapolation(grid, f):
    out = f
    for p in grid.boundary:
        c = grid.coords[p]
        acc = 0.0
        k = 0
        for d in range(grid.dim):
            if c[d] == 0 or c[d] == grid.counts[d] - 1:
                direction = 1 if c[d] == 0 else -1
                n1 = p + direction * grid.strides[d]
                n2 = p + 2 * direction * grid.strides[d]
                acc += 2.0 * f[n1] - f[n2]
                k += 1
        out[p] = acc / k
    return out


def solve_hjb(
    model: TreeModel,
    cost: RunningCostSpec,
    grid: Grid,
    boundary: str = "static-mc",
    method: str = "policy",
    tol: float = 1e-8,
    max_iter: int | None = None,
    boundary_paths: int = 2000,
    boundary_dt: float = 1e-3,
    seed: int = 0,
) -> HJBSolution:
    """Solve the dynamic-programming equation on the grid.

    Parameters
    ----------
    boundary:
        ``"static-mc"`` simulates the static-priority cost at every boundary
        point and imposes it as Dirichlet data; ``"extrapolate"`` closes the
        box with second-derivative-zero extrapolation.
    method:
        ``"policy"`` alternates exact evaluation of the current control
        field (a sparse solve) with a monotone improvement sweep and is the
        default.  ``"value"`` runs plain damped-free fixed-point sweeps of
        the same discretization; it is kept for cross-checks and is slow on
        fine grids.
    tol:
        Convergence is declared when the sup-norm update falls below this.

    Dimension is capped at 3: beyond that the grid is not tractable here.
    """
    if model.classes > 3:
        raise ValueError("grid solves are limited to 3 classes or fewer")
    if grid.dim != model.classes:
        raise ValueError("grid dimension must equal the class count")
    if method not in ("policy", "value"):
        raise ValueError(f"unknown method {method!r}")
    if boundary not in ("static-mc", "extrapolate"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    if max_iter is None:
        max_iter = 100 if method == "policy" else 200_000

    N = grid.size
    interior = grid.interior
    WP, WM, LV, DEN = _candidate_tables(model, cost, grid)
    nC = len(WP)
    nb_p = interior[:, None] + grid.strides[None, :]
    nb_m = interior[:, None] - grid.strides[None, :]

    edge = None
    f = np.zeros(N)
    if boundary == "static-mc":
        edge = default_priority_edge(model)
        bvals = _boundary_values_mc(
            model, cost, grid, boundary_paths, boundary_dt, seed, edge
        )
        f[grid.boundary] = bvals

    def improve(fcur):
        stacked = np.empty((nC, len(interior)))
        for c in range(nC):
            num = (WP[c] * fcur[nb_p]).sum(axis=1) + (WM[c] * fcur[nb_m]).sum(axis=1) + LV[c]
            stacked[c] = num / DEN[c]
        pol = stacked.argmin(axis=0)
        return pol, stacked[pol, np.arange(len(interior))]

    if method == "value":
        it = 0
        delta = np.inf
        while it < max_iter and delta > tol:
            fn = f.copy()
            _, vals = improve(f)
            fn[interior] = vals
            if boundary == "extrapolate":
                _apply_extrapolation(grid, fn)
            delta = float(np.abs(fn - f).max())
            f = fn
            it += 1
        converged = delta <= tol
        iterations = it
    else:
        if boundary == "extrapolate":
            ext_rows, ext_cols, ext_data = _extrapolation_rows(grid)
        pol = LV.argmin(axis=0)
        delta = np.inf
        converged = False
        iterations = 0
        for it in range(1, max_iter + 1):
            sel = np.arange(len(interior))
            wp = WP[pol, sel]
            wm = WM[pol, sel]
            rows = [interior, *([interior] * (2 * grid.dim))]
            cols = [interior]
            data = [DEN[pol, sel]]
            for d in range(grid.dim):
                cols.append(nb_p[:, d])
                data.append(-wp[:, d])
            for d in range(grid.dim):
                cols.append(nb_m[:, d])
                data.append(-wm[:, d])
            rows = np.concatenate(rows)
            cols = np.concatenate(cols)
            data = np.concatenate(data)
            rhs = np.zeros(N)
            rhs[interior] = LV[pol, sel]
            if boundary == "static-mc":
                rows = np.concatenate([rows, grid.boundary])
                cols = np.concatenate([cols, grid.boundary])
                data = np.concatenate([data, np.ones(len(grid.boundary))])
                rhs[grid.boundary] = f[grid.boundary]
            else:
                rows = np.concatenate([rows, ext_rows])
                cols = np.concatenate([cols, ext_cols])
                data = np.concatenate([data, ext_data])
            A = sp.csr_matrix((data, (rows, cols)), shape=(N, N))
            fn = spsolve(A, rhs)
            delta = float(np.abs(fn - f).max())
            f = fn
            iterations = it
            new_pol, _ = improve(f)
            if delta <= tol and (new_pol == pol).all():
                converged = True
                break
            pol = new_pol

    field = ValueField(grid=grid, values=f)
    resid = pde_residual(field, model, cost) if min(grid.counts) >= 5 else float("nan")
    report = HJBReport(
        method=method,
        boundary=boundary,
        iterations=iterations,
        converged=converged,
        sup_update=delta,
        interior_residual=resid,
        priority_edge=edge,
    )
    return HJBSolution(value=field, report=report)


def extract_policy(field: ValueField, model: TreeModel, cost: RunningCostSpec) -> PolicyField:
    """Minimizing control at every grid point of a solved value field.

    The gradient uses central differences in the interior and one-sided
    differences on the box faces; the fixed vertex tie-break makes the
    selection deterministic.
    """
    grid = field.grid
    f = field.values
    N = grid.size
    Df = np.zeros((N, grid.dim))
    c = grid.coords
    for d in range(grid.dim):
        s = grid.strides[d]
        h = grid.spacing[d]
        lo = c[:, d] == 0
        hi = c[:, d] == grid.counts[d] - 1
        mid = ~(lo | hi)
        idx = np.arange(N)
        Df[mid, d] = (f[idx[mid] + s] - f[idx[mid] - s]) / (2 * h)
        Df[lo, d] = (f[idx[lo] + s] - f[idx[lo]]) / h
        Df[hi, d] = (f[idx[hi]] - f[idx[hi] - s]) / h
    _, U, V = hamiltonian_field(model, cost, grid.points, Df)
    return PolicyField(grid=grid, u=U, v=V)


def pde_residual(
    field: ValueField, model: TreeModel, cost: RunningCostSpec, margin: int = 1
) -> float:
    """Max equation residual over interior points, by central differences.

    The solver upwinds its first-order term, so on a converged solution this
    independent central-difference evaluation decays like the spacing
    instead of collapsing to the iteration tolerance.
    """
    grid = field.grid
    f = field.values
    c = grid.coords
    mask = ((c >= margin) & (c <= grid.counts - 1 - margin)).all(axis=1)
    idx = np.flatnonzero(mask)
    if len(idx) == 0:
        raise ValueError("margin leaves no interior points")
    Df = np.zeros((len(idx), grid.dim))
    lap = np.zeros(len(idx))
    for d in range(grid.dim):
        s = grid.strides[d]
        h = grid.spacing[d]
        Df[:, d] = (f[idx + s] - f[idx - s]) / (2 * h)
        lap += 0.5 * model.r[d] ** 2 * (f[idx + s] - 2 * f[idx] + f[idx - s]) / h**2
    H, _, _ = hamiltonian_field(model, cost, grid.points[idx], Df)
    resid = lap + H - model.gamma * f[idx]
    return float(np.abs(resid).max())


def field_at(field: ValueField, X: np.ndarray) -> np.ndarray:
    """Multilinear interpolation of a value field at arbitrary states."""
    grid = field.grid
    rel = (np.asarray(X, dtype=float) - grid.lows) / grid.spacing
    rel = np.clip(rel, 0.0, grid.counts - 1.0)
    lo = np.minimum(np.floor(rel).astype(int), grid.counts - 2)
    frac = rel - lo
    out = np.zeros(len(X))
    for corner in range(1 << grid.dim):
        offs = np.array([(corner >> d) & 1 for d in range(grid.dim)])
        weight = np.prod(np.where(offs, frac, 1.0 - frac), axis=1)
        flat = ((lo + offs) * grid.strides).sum(axis=1)
        out += weight * field.values[flat]
    return out


def box_sensitivity(
    model: TreeModel,
    cost: RunningCostSpec,
    grid: Grid,
    scale: float = 1.5,
    **solve_kwargs,
) -> float:
    """Re-solve on an enlarged box and report the max shift on the original.

    Quantifies how much the boundary surrogate leaks into the region of
    interest.
    """
    counts = np.rint((grid.counts - 1) * scale).astype(int) + 1
    big = Grid(grid.lows * scale, grid.highs * scale, counts)
    sol_small = solve_hjb(model, cost, grid, **solve_kwargs)
    sol_big = solve_hjb(model, cost, big, **solve_kwargs)
    on_small = field_at(sol_big.value, grid.points)
    return float(np.abs(on_small - sol_small.value.values).max())


# -- field files --------------------------------------------------------------


def save_field(field, model: TreeModel, path) -> None:
    """Write a field file: one JSON header line, then CSV rows row-major."""
    if isinstance(field, ValueField):
        kind = "value"
        columns = ["value"]
        payload = field.values[:, None]
    elif isinstance(field, PolicyField):
        kind = "policy"
        columns = [f"u{i}" for i in range(field.u.shape[1])]
        columns += [f"v{j}" for j in range(field.v.shape[1])]
        payload = np.column_stack([field.u, field.v])
    else:
        raise TypeError("expected a ValueField or PolicyField")
    header = {
        "kind": kind,
        "grid": field.grid.to_dict(),
        "model_hash": model_hash(model),
        "columns": columns,
        "layout": "row-major",
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        np.savetxt(fh, payload, delimiter=",", fmt="%.17g")


def load_field(path):
    """Read a field file; returns ``(field, header)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        payload = np.loadtxt(fh, delimiter=",", ndmin=2)
    grid = Grid.from_dict(header["grid"])
    if len(payload) != grid.size:
        raise ValueError("payload length does not match the grid")
    if header["kind"] == "value":
        return ValueField(grid=grid, values=payload[:, 0]), header
    n_u = sum(1 for c in header["columns"] if c.startswith("u"))
    return PolicyField(grid=grid, u=payload[:, :n_u], v=payload[:, n_u:]), header
