"""Finite-difference reference solutions on uniform grids of the unit square.

Grid values are indexed ``values[i, j]`` with ``x1 = coords[i]`` and
``x2 = coords[j]``.
"""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid2D",
    "GridField",
    "SolverError",
    "PecletWarning",
    "solve_poisson_fd",
    "solve_advdiff_fd",
    "solve_nonlinear_poisson_fd",
    "relative_l2_error",
    "boundary_from_problem",
    "reference_solution",
]

SIDES = ("xlo", "xhi", "ylo", "yhi")
TOL = 1e-10


class SolverError(RuntimeError):
    pass


class PecletWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Grid2D:
    resolution: int = 201

    def __post_init__(self):
        if self.resolution < 3:
            raise ValueError("a grid needs at least 3 points per axis")

    @property
    def h(self) -> float:
        return 1.0 / (self.resolution - 1)

    @property
    def coords(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.resolution)

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.coords, self.coords, indexing="ij")

    def points(self) -> np.ndarray:
        """All nodes as an ``(R*R, 2)`` array in row-major ``(i, j)`` order."""
        X1, X2 = self.mesh()
        return np.column_stack([X1.ravel(), X2.ravel()])

    @property
    def boundary_mask(self) -> np.ndarray:
        m = np.zeros((self.resolution,) * 2, dtype=bool)
        m[0, :] = m[-1, :] = m[:, 0] = m[:, -1] = True
        return m

    def side_points(self, side: str) -> np.ndarray:
        c = self.coords
        z = np.zeros_like(c)
        return {
            "xlo": np.column_stack([z, c]),
            "xhi": np.column_stack([z + 1, c]),
            "ylo": np.column_stack([c, z]),
            "yhi": np.column_stack([c, z + 1]),
        }[side]

    def field(self, fn: Callable) -> np.ndarray:
        return np.asarray(fn(self.points()), dtype=float).reshape((self.resolution,) * 2)


@dataclass
class GridField:
    grid: Grid2D
    values: np.ndarray
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.resolution,) * 2:
            raise ValueError(f"field shape {self.values.shape} does not match the grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def restrict(self, resolution: int) -> "GridField":
        """Injection onto a coarser grid whose nodes are a subset of this one's."""
        step, rem = divmod(self.grid.resolution - 1, resolution - 1)
        if rem:
            raise ValueError(f"cannot restrict {self.grid.resolution} points to {resolution}")
        return GridField(Grid2D(resolution), self.values[::step, ::step].copy(), dict(self.info))

    def to_text(self, path=None) -> str:
        """Plain-text matrix: row ``i`` holds the grid line ``x1 = coords[i]``."""
        buf = io.StringIO()
        np.savetxt(buf, self.values, fmt="%.17g")
        return _emit(buf.getvalue(), path)

    @classmethod
    def from_text(cls, text: str) -> "GridField":
        vals = np.loadtxt(io.StringIO(text), ndmin=2)
        return cls(Grid2D(vals.shape[0]), vals)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        buf.write("x1,x2,value\n")
        data = np.column_stack([self.grid.points(), self.values.ravel()])
        np.savetxt(buf, data, fmt="%.17g", delimiter=",")
        return _emit(buf.getvalue(), path)


def _emit(text, path):
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# stencil assembly

_DIRS = {"east": (1, 0), "west": (-1, 0), "north": (0, 1), "south": (0, -1)}


def _boundary_arrays(grid: Grid2D, bc: dict) -> dict:
    out = {}
    for side in SIDES:
        kind, data = bc[side]
        if kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary kind {kind!r}")
        vals = data(grid.side_points(side)) if callable(data) else np.broadcast_to(float(data), (grid.resolution,))
        out[side] = (kind, np.asarray(vals, dtype=float))
    return out


def _assemble(grid: Grid2D, center, coeffs: dict, rhs, bc: dict):
    """Sparse system for ``center u_P + sum_d coeffs[d] u_{P+d} = rhs``.

    Dirichlet nodes are eliminated into the right-hand side. A Neumann side
    uses a mirrored ghost node, ``u_ghost = u_mirror + 2 h q`` with ``q`` the
    outward normal derivative, which keeps the stencil second order.
    Corners touching a Dirichlet side are Dirichlet.
    """
    R, h = grid.resolution, grid.h
    bc = _boundary_arrays(grid, bc)
    known = np.full((R, R), np.nan)
    for side, (axis, idx) in {"xlo": (0, 0), "xhi": (0, -1), "ylo": (1, 0), "yhi": (1, -1)}.items():
        kind, vals = bc[side]
        if kind == "dirichlet":
            if axis == 0:
                known[idx, :] = vals
            else:
                known[:, idx] = vals
    unknown = np.isnan(known)
    index = np.full((R, R), -1)
    index[unknown] = np.arange(unknown.sum())
    I, J = np.nonzero(unknown)
    rows, cols, data = [index[I, J]], [index[I, J]], [center[I, J]]
    b = np.array(rhs[I, J], dtype=float)
    for name, (di, dj) in _DIRS.items():
        c = coeffs[name][I, J]
        ti, tj = I + di, J + dj
        ghost_rhs = np.zeros_like(b)
        for arr, side_lo, side_hi, pos in ((ti, "xlo", "xhi", J), (tj, "ylo", "yhi", I)):
            low, high = arr < 0, arr > R - 1
            if low.any():
                ghost_rhs[low] += 2 * h * bc[side_lo][1][pos[low]]
                arr[low] = 1
            if high.any():
                ghost_rhs[high] += 2 * h * bc[side_hi][1][pos[high]]
                arr[high] = R - 2
        b -= c * ghost_rhs
        is_known = ~unknown[ti, tj]
        b[is_known] -= c[is_known] * known[ti[is_known], tj[is_known]]
        free = ~is_known
        rows.append(index[I[free], J[free]])
        cols.append(index[ti[free], tj[free]])
        data.append(c[free])
    n = int(unknown.sum())
    A = sp.csr_matrix((np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return A, b, unknown, known


def _scatter(grid, x, unknown, known):
    u = known.copy()
    u[unknown] = x
    return u


def _check_residual(A, x, b, what: str) -> float:
    nb = np.linalg.norm(b)
    res = np.linalg.norm(b - A @ x) / (nb if nb > 0 else 1.0)
    if not res < TOL:
        raise SolverError(f"{what} did not reach relative residual {TOL:g}: {res:.3e}")
    return float(res)


def _cg(A, b, maxiter):
    if not np.any(b):
        return np.zeros_like(b), 0
    counter = [0]

    def cb(_):
        counter[0] += 1

    x, _ = spla.cg(A, b, rtol=TOL / 10, atol=0.0, maxiter=maxiter, callback=cb)
    return x, counter[0]


def _dirichlet_all(g):
    if isinstance(g, dict):
        return {side: ("dirichlet", g[side]) for side in SIDES}
    return {side: ("dirichlet", g) for side in SIDES}


# ---------------------------------------------------------------------------
# solvers


def solve_poisson_fd(grid: Grid2D, f: Callable, g, maxiter: int | None = None) -> GridField:
    """Five-point solution of ``Lap u = f`` with Dirichlet data ``g`` on every side.

    The negated system is symmetric positive definite and solved by conjugate
    gradients to a relative residual below 1e-10.
    """
    R, h = grid.resolution, grid.h
    ones = np.ones((R, R))
    neighbor = -ones / h**2
    A, b, unknown, known = _assemble(
        grid, 4 * ones / h**2, dict.fromkeys(_DIRS, neighbor), -grid.field(f), _dirichlet_all(g)
    )
    x, its = _cg(A, b, maxiter or 20 * R)
    res = _check_residual(A, x, b, "conjugate gradients")
    return GridField(grid, _scatter(grid, x, unknown, known), {"iterations": its, "residual": res})


def _default_advdiff_bc(g1=0.0, g2=1.0):
    return {"xlo": ("dirichlet", g1), "xhi": ("dirichlet", g2), "ylo": ("neumann", 0.0), "yhi": ("neumann", 0.0)}


def solve_advdiff_fd(grid: Grid2D, w: Callable, nu: float, f: Callable, bc: dict | None = None) -> GridField:
    """Central-difference solution of ``w . grad u - nu Lap u = f``.

    Parameters
    ----------
    w : callable
        Velocity, ``(N, 2) -> (2, N)``.
    bc : dict, optional
        ``side -> (kind, data)`` for sides ``xlo, xhi, ylo, yhi``; Neumann data
        is the outward normal derivative. Defaults to ``u = 0`` at ``x1 = 0``,
        ``u = 1`` at ``x1 = 1`` and zero flux on the ``x2`` sides.

    Notes
    -----
    The cell Peclet number ``max|w| h / nu`` is stored in ``info``; above 2 a
    :class:`PecletWarning` is issued since central differencing may oscillate.
    """
    if not nu > 0:
        raise ValueError("nu must be positive")
    R, h = grid.resolution, grid.h
    W = np.asarray(w(grid.points()), dtype=float).reshape(2, R, R)
    peclet = float(np.max(np.hypot(W[0], W[1])) * h / nu)
    if peclet > 2:
        warnings.warn(f"cell Peclet number {peclet:.2f} exceeds 2", PecletWarning, stacklevel=2)
    d = nu / h**2
    coeffs = {
        "east": W[0] / (2 * h) - d,
        "west": -W[0] / (2 * h) - d,
        "north": W[1] / (2 * h) - d,
        "south": -W[1] / (2 * h) - d,
    }
    A, b, unknown, known = _assemble(grid, np.full((R, R), 4 * d), coeffs, grid.field(f), bc or _default_advdiff_bc())
    if not np.any(b):
        x, its = np.zeros_like(b), 0
    else:
        ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
        counter = [0]

        def cb(_):
            counter[0] += 1

        x, _ = spla.bicgstab(A, b, rtol=TOL / 10, atol=0.0, M=M, maxiter=20 * R, callback=cb)
        its = counter[0]
    res = _check_residual(A, x, b, "BiCGStab")
    info = {"iterations": its, "residual": res, "peclet": peclet}
    return GridField(grid, _scatter(grid, x, unknown, known), info)


def solve_nonlinear_poisson_fd(
    grid: Grid2D, f: Callable, g, tol: float = 1e-9, max_iter: int = 200
) -> GridField:
    """Picard iteration for ``-div((1 + u^2) grad u) = f`` with Dirichlet data.

    Each step freezes the coefficient at the previous iterate, averages it
    arithmetically onto cell faces and solves the symmetric system by
    conjugate gradients. Stops when the max-norm increment is below ``tol``.
    """
    R, h = grid.resolution, grid.h
    rhs = grid.field(f)
    bc = _dirichlet_all(g)
    u = np.zeros((R, R))
    bvals = _boundary_arrays(grid, bc)
    u[0, :], u[-1, :], u[:, 0], u[:, -1] = (bvals[s][1] for s in SIDES)
    increments = []
    for _ in range(max_iter):
        k = 1.0 + u * u
        kp = np.pad(k, 1, mode="edge")
        faces = {
            "east": (k + kp[2:, 1:-1]) / 2,
            "west": (k + kp[:-2, 1:-1]) / 2,
            "north": (k + kp[1:-1, 2:]) / 2,
            "south": (k + kp[1:-1, :-2]) / 2,
        }
        center = sum(faces.values()) / h**2
        A, b, unknown, known = _assemble(grid, center, {d: -c / h**2 for d, c in faces.items()}, rhs, bc)
        x, _ = _cg(A, b, 20 * R)
        _check_residual(A, x, b, "conjugate gradients")
        new = _scatter(grid, x, unknown, known)
        increments.append(float(np.max(np.abs(new - u))))
        u = new
        if increments[-1] < tol:
            return GridField(grid, u, {"picard_increments": increments})
    raise SolverError(f"Picard iteration stagnated after {max_iter} steps; last increment {increments[-1]:.3e}")


# ---------------------------------------------------------------------------
# metrics and problem glue


def relative_l2_error(approx, reference: GridField) -> float:
    """``|approx - ref|_2 / |ref|_2`` over all grid nodes.

    ``approx`` may be a :class:`GridField`, an array of grid values or a
    callable evaluated at the grid points.
    """
    if isinstance(approx, GridField):
        a = approx.values
    elif callable(approx):
        a = reference.grid.field(approx)
    else:
        a = np.asarray(approx, dtype=float).reshape(reference.values.shape)
    denom = np.linalg.norm(reference.values)
    if denom == 0:
        raise ValueError("reference field has zero norm")
    return float(np.linalg.norm(a - reference.values) / denom)


def boundary_from_problem(problem) -> dict:
    """Side conditions ``{side: (kind, data)}`` from a unit-square problem's segments."""
    bc = {}
    for seg in problem.boundary:
        bc[seg.name] = (seg.kind, seg.data)
    if set(bc) != set(SIDES):
        raise ValueError(f"problem {problem.name!r} is not a unit-square problem")
    return bc


def reference_solution(problem, resolution: int = 201, refine: int | None = None) -> GridField:
    """Reference field for a registered two-dimensional problem.

    Problems with an exact solution use it directly; otherwise the matching
    finite-difference solver runs, on a grid refined by ``refine`` (default 2
    for advection-diffusion, 1 otherwise) and restricted back.
    """
    grid = Grid2D(resolution)
    if problem.exact is not None:
        return GridField(grid, grid.field(problem.exact_values), {"source": "exact"})
    name = problem.operator.name
    if refine is None:
        refine = 2 if name == "advection_diffusion" else 1
    fine = Grid2D((resolution - 1) * refine + 1)
    bc = boundary_from_problem(problem)
    if name in ("laplace", "quasilinear"):
        if any(kind != "dirichlet" for kind, _ in bc.values()):
            raise ValueError("the Poisson reference solvers need Dirichlet data on every side")
        g = {side: data for side, (_, data) in bc.items()}
        solver = solve_poisson_fd if name == "laplace" else solve_nonlinear_poisson_fd
        sol = solver(fine, problem.source, g)
    elif name == "advection_diffusion":
        from .problems import velocity

        sol = solve_advdiff_fd(fine, velocity, problem.meta.get("nu", 0.01), problem.source, bc)
    else:
        raise ValueError(f"no reference solver for operator {name!r}")
    return sol.restrict(resolution) if refine > 1 else sol
