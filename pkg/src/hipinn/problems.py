"""PDE problem definitions, boundary segments and collocation samplers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import Jet, Node, evaluate, input_derivatives

__all__ = [
    "Box",
    "ResidualOperator",
    "BoundarySegment",
    "ProblemSpec",
    "SampleSet",
    "sample",
    "laplace_operator",
    "quasilinear_operator",
    "advection_diffusion_operator",
    "poisson_2d",
    "nonlinear_poisson_2d",
    "advection_diffusion_2d",
    "manufactured",
    "velocity",
    "get_problem",
    "MANUFACTURED",
]

PI = np.pi


@dataclass(frozen=True)
class Box:
    lower: tuple[float, ...]
    upper: tuple[float, ...]

    @property
    def n(self) -> int:
        return len(self.lower)

    @classmethod
    def unit(cls, n: int) -> "Box":
        return cls((0.0,) * n, (1.0,) * n)


@dataclass(frozen=True)
class ResidualOperator:
    """``N[u](x)`` built from the jet of ``u`` (value, gradient, Laplacian).

    ``fn(x, u)`` receives the points ``x`` of shape ``(N, n)`` and an order-2
    :class:`Jet` and returns a node of shape ``(N,)``.
    """

    fn: Callable[[np.ndarray, Jet], Node]
    linear: bool
    name: str = ""

    def __call__(self, x, u: Jet) -> Node:
        return self.fn(x, u)


def laplace_operator() -> ResidualOperator:
    return ResidualOperator(lambda x, u: u.lap, linear=True, name="laplace")


def quasilinear_operator() -> ResidualOperator:
    """``-div((1 + u^2) grad u)``, expanded as ``-(1+u^2) Lap u - 2u |grad u|^2``."""

    def fn(x, u):
        v, g = u.value, u.grad
        return -(1.0 + v * v) * u.lap - 2.0 * v * (g * g).sum(axis=0)

    return ResidualOperator(fn, linear=False, name="quasilinear")


def advection_diffusion_operator(w: Callable, nu: float) -> ResidualOperator:
    """``w . grad u - nu Lap u`` for a velocity ``w(x) -> (n, N)``."""

    def fn(x, u):
        return (Node(w(x)) * u.grad).sum(axis=0) - nu * u.lap

    return ResidualOperator(fn, linear=True, name="advection_diffusion")


@dataclass(frozen=True)
class BoundarySegment:
    """One face ``x[axis] == lower/upper`` of a box.

    ``group`` names the loss component the segment contributes to; segments
    of one group share a weight and are averaged together.
    """

    name: str
    kind: str
    axis: int
    side: int
    data: Callable[[np.ndarray], np.ndarray]
    group: str = "boundary"

    def __post_init__(self):
        if self.kind not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown boundary kind {self.kind!r}")

    def normal(self, n: int) -> np.ndarray:
        v = np.zeros(n)
        v[self.axis] = 1.0 if self.side == 1 else -1.0
        return v

    def measure(self, box: Box) -> float:
        m = 1.0
        for k in range(box.n):
            if k != self.axis:
                m *= box.upper[k] - box.lower[k]
        return m

    def sample(self, rng, count: int, box: Box) -> np.ndarray:
        lo, hi = np.array(box.lower), np.array(box.upper)
        pts = lo + (hi - lo) * rng.random((count, box.n))
        pts[:, self.axis] = hi[self.axis] if self.side == 1 else lo[self.axis]
        return pts

    def contains(self, x, box: Box, tol=0.0) -> np.ndarray:
        x = np.atleast_2d(x)
        face = box.upper[self.axis] if self.side == 1 else box.lower[self.axis]
        on = np.abs(x[:, self.axis] - face) <= tol
        for k in range(box.n):
            if k != self.axis:
                on &= (x[:, k] >= box.lower[k] - tol) & (x[:, k] <= box.upper[k] + tol)
        return on

    def order(self) -> int:
        """Jet order the boundary operator needs."""
        return 0 if self.kind == "dirichlet" else 1

    def apply(self, u: Jet) -> Node:
        """``B[u]``: the trace for Dirichlet, the outward normal derivative for Neumann."""
        if self.kind == "dirichlet":
            return u.value
        sign = 1.0 if self.side == 1 else -1.0
        return sign * u.grad[self.axis]


@dataclass
class ProblemSpec:
    name: str
    domain: Box
    operator: ResidualOperator
    source: Callable[[np.ndarray], np.ndarray]
    boundary: tuple[BoundarySegment, ...]
    exact: Callable | None = None
    meta: dict = field(default_factory=dict)

    @property
    def linear(self) -> bool:
        return self.operator.linear

    @property
    def n(self) -> int:
        return self.domain.n

    def groups(self) -> list[str]:
        out = []
        for seg in self.boundary:
            if seg.group not in out:
                out.append(seg.group)
        return out

    def segments(self, group: str) -> list[BoundarySegment]:
        return [s for s in self.boundary if s.group == group]

    def exact_values(self, x) -> np.ndarray:
        if self.exact is None:
            raise ValueError(f"problem {self.name!r} has no exact solution")
        return evaluate(self.exact, x)

    def residual(self, x, u: Jet) -> Node:
        """Pointwise defect ``N[u](x) - f(x)``."""
        return self.operator(x, u) - self.source(x)


@dataclass
class SampleSet:
    interior: np.ndarray
    boundary: dict[str, np.ndarray]
    seed: int | None = None

    def counts(self) -> dict:
        return {"interior": len(self.interior), **{k: len(v) for k, v in self.boundary.items()}}


def _split(total: int, parts: int) -> list[int]:
    base, extra = divmod(int(total), parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _interior_points(rng, count, box: Box):
    lo, hi = np.array(box.lower), np.array(box.upper)
    pts = lo + (hi - lo) * rng.random((count, box.n))
    # rng.random can return exactly 0; redraw those rows to stay strictly inside
    bad = np.any(pts <= lo, axis=1)
    while bad.any():
        pts[bad] = lo + (hi - lo) * rng.random((int(bad.sum()), box.n))
        bad = np.any(pts <= lo, axis=1)
    return pts


def sample(problem: ProblemSpec, n_interior: int, n_boundary, seed: int) -> SampleSet:
    """Uniform i.i.d. collocation points.

    ``n_boundary`` is a total split evenly over all segments, or a mapping
    from group (or segment) name to a count split evenly over that group's
    segments.
    """
    if n_interior < 0:
        raise ValueError("n_interior must be non-negative")
    counts: dict[str, int] = {}
    if isinstance(n_boundary, dict):
        for key, total in n_boundary.items():
            segs = [s for s in problem.boundary if s.group == key or s.name == key]
            if not segs:
                raise ValueError(f"no boundary segment or group named {key!r}")
            for seg, c in zip(segs, _split(total, len(segs))):
                counts[seg.name] = counts.get(seg.name, 0) + c
    else:
        if n_boundary < 0:
            raise ValueError("n_boundary must be non-negative")
        for seg, c in zip(problem.boundary, _split(n_boundary, len(problem.boundary))):
            counts[seg.name] = c
    rng = np.random.default_rng(seed)
    interior = _interior_points(rng, int(n_interior), problem.domain)
    boundary = {}
    for seg in problem.boundary:
        c = counts.get(seg.name, 0)
        if c < 0:
            raise ValueError("boundary counts must be non-negative")
        if c > 0 and seg.measure(problem.domain) == 0:
            raise ValueError(f"segment {seg.name!r} has zero measure")
        boundary[seg.name] = seg.sample(rng, c, problem.domain)
    return SampleSet(interior, boundary, seed)


# ---------------------------------------------------------------------------
# exact solutions and named problems


def _box_faces(n, kinds=None, groups=None, data=None):
    segs = []
    names = "xyz"
    for axis in range(n):
        for side in (0, 1):
            key = (axis, side)
            kind = (kinds or {}).get(key, "dirichlet")
            group = (groups or {}).get(key, kind)
            nm = f"{names[axis] if n <= 3 else axis}{'hi' if side else 'lo'}"
            segs.append(BoundarySegment(nm, kind, axis, side, data[key], group))
    return tuple(segs)


def _operator_source(operator: ResidualOperator, exact):
    def f(x):
        return operator(x, exact(Jet.from_input(x, 2), None)).value

    return f


def _trace(exact):
    def g(x):
        return evaluate(exact, x)

    return g


def _normal_derivative(exact, axis, side):
    sign = 1.0 if side == 1 else -1.0

    def g(x):
        return sign * input_derivatives(exact, x).grad_x[:, axis]

    return g


def _zero(x):
    return np.zeros(len(x))


def velocity(x) -> np.ndarray:
    """Cellular flow ``(-5 sin(6 pi x1) cos(6 pi x2), 5 cos(6 pi x1) sin(6 pi x2))``, shape (2, N)."""
    x = np.atleast_2d(x)
    a, b = 6 * PI * x[:, 0], 6 * PI * x[:, 1]
    return np.stack([-5.0 * np.sin(a) * np.cos(b), 5.0 * np.cos(a) * np.sin(b)])


def velocity_jets(X: Jet) -> tuple[Jet, Jet]:
    a, b = 6 * PI * X[..., 0], 6 * PI * X[..., 1]
    return -5.0 * (a.sin() * b.cos()), 5.0 * (a.cos() * b.sin())


def manufactured(family: str, exact, dim: int = 2, name: str | None = None, nu: float = 0.01):
    """Problem whose source and boundary data are generated from ``exact``.

    Families: ``"poisson"`` (Laplacian, Dirichlet faces), ``"nonlinear_poisson"``
    (quasilinear operator, Dirichlet faces) and ``"advdiff"`` (cellular-flow
    advection-diffusion on the unit square; Dirichlet on ``x1`` faces, Neumann
    on ``x2`` faces).
    """
    box = Box.unit(dim)
    if family == "poisson":
        op = laplace_operator()
    elif family == "nonlinear_poisson":
        op = quasilinear_operator()
    elif family == "advdiff":
        if dim != 2:
            raise ValueError("the advection-diffusion family is two-dimensional")
        op = advection_diffusion_operator(velocity, nu)
    else:
        raise ValueError(f"unknown problem family {family!r}")
    declared = getattr(exact, "input_dim", dim)
    try:
        out = exact(Jet.from_input(np.full((1, dim), 0.5), 0), None)
    except IndexError:
        out = None
    if declared != dim or out is None or out.node.value.shape != (1, 1):
        raise ValueError("exact solution does not match the problem dimension")
    if family == "advdiff":
        kinds = {(1, 0): "neumann", (1, 1): "neumann"}
        data = {
            (0, 0): _trace(exact),
            (0, 1): _trace(exact),
            (1, 0): _normal_derivative(exact, 1, 0),
            (1, 1): _normal_derivative(exact, 1, 1),
        }
        segs = _box_faces(dim, kinds, data=data)
    else:
        segs = _box_faces(dim, data={(a, s): _trace(exact) for a in range(dim) for s in (0, 1)})
    return ProblemSpec(
        name or f"manufactured_{family}",
        box,
        op,
        _operator_source(op, exact),
        segs,
        exact,
        meta={"family": family},
    )


def _poisson_exact(k1, k2):
    def u(X, p=None):
        x1, x2 = X[..., 0], X[..., 1]
        return (k1 * PI * x1 * x1 + k2 * PI * x2).sin() * (k1 * PI * x2 * x2 + k2 * PI * x1).sin()

    u.input_dim = 2
    return u


def poisson_2d() -> ProblemSpec:
    """``Lap u = f`` on the unit square with ``u = sin(8 pi x1^2 + 4 pi x2) sin(8 pi x2^2 + 4 pi x1)``."""
    return manufactured("poisson", _poisson_exact(8, 4), name="poisson2d")


def nonlinear_poisson_2d() -> ProblemSpec:
    """``-div((1+u^2) grad u) = exp(2 + 2 sin(10 pi x1^2 + 10 pi x2)) / 2``, ``u = 1`` on the boundary."""

    def f(x):
        return 0.5 * np.exp(2.0 + 2.0 * np.sin(10 * PI * x[:, 0] ** 2 + 10 * PI * x[:, 1]))

    def one(x):
        return np.ones(len(x))

    segs = _box_faces(2, data={(a, s): one for a in range(2) for s in (0, 1)})
    return ProblemSpec("nonlinear_poisson2d", Box.unit(2), quasilinear_operator(), f, segs)


def advection_diffusion_2d(nu: float = 0.01) -> ProblemSpec:
    """Steady cellular-flow advection-diffusion with mixed boundary conditions.

    Dirichlet ``u = 0`` at ``x1 = 0`` and ``u = 1`` at ``x1 = 1``; homogeneous
    Neumann on ``x2 = 0`` and ``x2 = 1``; source ``sin(4 pi x2)``.
    """

    def f(x):
        return np.sin(4 * PI * x[:, 1])

    kinds = {(1, 0): "neumann", (1, 1): "neumann"}
    data = {(0, 0): _zero, (0, 1): lambda x: np.ones(len(x)), (1, 0): _zero, (1, 1): _zero}
    segs = _box_faces(2, kinds, data=data)
    return ProblemSpec(
        "advdiff2d",
        Box.unit(2),
        advection_diffusion_operator(velocity, nu),
        f,
        segs,
        meta={"nu": nu},
    )


def _sin_pi(dim):
    def u(X, p=None):
        out = (PI * X[..., 0]).sin()
        for k in range(1, dim):
            out = out * (PI * X[..., k]).sin()
        return out

    u.input_dim = dim
    return u


def _advdiff_smooth(X, p=None):
    return (PI * X[..., 0]).sin() * (PI * X[..., 1]).cos() + X[..., 0]


def _bilinear(X, p=None):
    return X[..., 0] * X[..., 1] + 1.0


def _raised_sin(X, p=None):
    return (PI * X[..., 0]).sin() * (PI * X[..., 1]).sin() + 1.0


MANUFACTURED = {
    "sin_pi_1d": ("poisson", _sin_pi(1), 1),
    "sin_pi_2d": ("poisson", _sin_pi(2), 2),
    "half_freq_2d": ("poisson", _poisson_exact(4, 2), 2),
    "advdiff_smooth": ("advdiff", _advdiff_smooth, 2),
    "nonlinear_bilinear": ("nonlinear_poisson", _bilinear, 2),
    "nonlinear_sin": ("nonlinear_poisson", _raised_sin, 2),
}


def get_problem(name: str) -> ProblemSpec:
    """Look up ``poisson2d``, ``nonlinear_poisson2d``, ``advdiff2d`` or ``manufactured:<id>``."""
    if name == "poisson2d":
        return poisson_2d()
    if name == "nonlinear_poisson2d":
        return nonlinear_poisson_2d()
    if name == "advdiff2d":
        return advection_diffusion_2d()
    if name.startswith("manufactured:"):
        key = name.split(":", 1)[1]
        if key not in MANUFACTURED:
            raise KeyError(f"unknown manufactured solution {key!r}")
        family, exact, dim = MANUFACTURED[key]
        return manufactured(family, exact, dim, name=name)
    raise KeyError(f"unknown problem {name!r}")
