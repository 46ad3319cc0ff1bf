import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hipinn.engine import Jet, evaluate, input_derivatives
from hipinn.nets import MlpSpec, init_network
from hipinn.problems import (
    MANUFACTURED,
    Box,
    advection_diffusion_2d,
    get_problem,
    manufactured,
    nonlinear_poisson_2d,
    poisson_2d,
    sample,
    velocity,
    velocity_jets,
)

from helpers import fd_divergence, rel_err

PI = np.pi
REGISTERED = ["poisson2d", "nonlinear_poisson2d", "advdiff2d"] + [f"manufactured:{k}" for k in MANUFACTURED]


def residual_of(problem, builder, x, params=None):
    return problem.residual(x, builder(Jet.from_input(x, 2), params)).value


def constant(c):
    def u(X, p=None):
        return Jet.constant_field(np.full(X.shape[:1], c), X.n, X.order)

    return u


def random_points(n, seed=0, dim=2):
    return np.random.default_rng(seed).uniform(size=(n, dim))


# sampling -------------------------------------------------------------------


def test_empty_interior():
    s = sample(poisson_2d(), 0, 8, seed=0)
    assert s.interior.shape == (0, 2)


def test_interior_strictly_inside():
    s = sample(poisson_2d(), 1000, 0, seed=1)
    assert np.all((s.interior > 0) & (s.interior < 1))


def test_interior_mean():
    N = 4000
    s = sample(poisson_2d(), N, 0, seed=2)
    sd = np.sqrt(1 / 12)
    assert np.all(np.abs(s.interior.mean(axis=0) - 0.5) < 3 * sd / np.sqrt(N))


@pytest.mark.parametrize("name", REGISTERED)
def test_boundary_points_on_their_segment(name):
    p = get_problem(name)
    s = sample(p, 10, 40, seed=3)
    for seg in p.boundary:
        pts = s.boundary[seg.name]
        assert len(pts) > 0
        assert np.all(seg.contains(pts, p.domain))


@pytest.mark.parametrize("name", REGISTERED)
def test_segments_disjoint_and_cover_boundary(name):
    p = get_problem(name)
    box = p.domain
    rng = np.random.default_rng(0)
    # random points on the boundary: pick a face, pin one coordinate
    x = rng.uniform(size=(500, box.n))
    axis = rng.integers(box.n, size=500)
    side = rng.integers(2, size=500)
    x[np.arange(500), axis] = side
    hits = sum(seg.contains(x, box).astype(int) for seg in p.boundary)
    assert np.all(hits == 1)


def test_sampler_deterministic():
    p = advection_diffusion_2d()
    a, b = sample(p, 30, {"dirichlet": 10, "neumann": 6}, 5), sample(p, 30, {"dirichlet": 10, "neumann": 6}, 5)
    assert np.array_equal(a.interior, b.interior)
    for k in a.boundary:
        assert np.array_equal(a.boundary[k], b.boundary[k])


def test_group_counts_split_equally():
    p = advection_diffusion_2d()
    s = sample(p, 0, {"dirichlet": 10, "neumann": 6}, 0)
    assert s.counts() == {"interior": 0, "xlo": 5, "xhi": 5, "ylo": 3, "yhi": 3}


def test_negative_and_unknown_counts():
    p = poisson_2d()
    with pytest.raises(ValueError):
        sample(p, -1, 4, 0)
    with pytest.raises(ValueError):
        sample(p, 1, {"nowhere": 4}, 0)


def test_zero_measure_segment_rejected():
    p = poisson_2d()
    p.domain = Box((0.0, 0.0), (1.0, 0.0))
    with pytest.raises(ValueError, match="zero measure"):
        sample(p, 0, {"xlo": 2}, 0)


# exact-solution consistency ---------------------------------------------------


@pytest.mark.parametrize("name", ["poisson2d"] + [f"manufactured:{k}" for k in MANUFACTURED])
def test_exact_solution_has_vanishing_residual(name):
    p = get_problem(name)
    x = random_points(100, 1, p.n)
    assert np.max(np.abs(residual_of(p, p.exact, x))) < 1e-6


def test_poisson_source_matches_hand_formula():
    # u = sin(a) sin(b), a = 8 pi x^2 + 4 pi y, b = 8 pi y^2 + 4 pi x
    x = random_points(50, 4)
    x1, x2 = x[:, 0], x[:, 1]
    a, b = 8 * PI * x1**2 + 4 * PI * x2, 8 * PI * x2**2 + 4 * PI * x1
    ax, ay, axx, ayy = 16 * PI * x1, 4 * PI, 16 * PI, 0.0
    bx, by, bxx, byy = 4 * PI, 16 * PI * x2, 0.0, 16 * PI
    sa, ca, sb, cb = np.sin(a), np.cos(a), np.sin(b), np.cos(b)
    lap = (
        (-sa * ax**2 + ca * axx) * sb + 2 * ca * ax * cb * bx + sa * (-sb * bx**2 + cb * bxx)
        + (-sa * ay**2 + ca * ayy) * sb + 2 * ca * ay * cb * by + sa * (-sb * by**2 + cb * byy)
    )
    assert rel_err(poisson_2d().source(x), lap) < 1e-12


def test_poisson_boundary_data_is_exact_trace():
    p = poisson_2d()
    s = sample(p, 0, 40, 0)
    for seg in p.boundary:
        pts = s.boundary[seg.name]
        assert np.allclose(seg.data(pts), p.exact_values(pts), atol=1e-15)


def test_poisson_constant_trial():
    p = poisson_2d()
    x = random_points(20)
    assert np.allclose(residual_of(p, constant(3.0), x), -p.source(x), atol=1e-13)


# nonlinear Poisson ------------------------------------------------------------


def test_nonlinear_source_at_origin():
    f = nonlinear_poisson_2d().source(np.zeros((1, 2)))[0]
    assert f == pytest.approx(0.5 * np.e**2, rel=1e-14)
    assert f == pytest.approx(3.6945, abs=1e-4)


def test_nonlinear_flag_and_constant_trial():
    p = nonlinear_poisson_2d()
    assert not p.linear
    x = random_points(20)
    assert np.allclose(residual_of(p, constant(1.0), x), -p.source(x), atol=1e-12)
    for seg in p.boundary:
        assert np.all(seg.data(x) == 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_expanded_form_equals_divergence_form(seed):
    net, store = init_network(MlpSpec(2, (16, 16)), seed)
    x = random_points(20, seed + 10)
    p = nonlinear_poisson_2d()
    expanded = p.operator(x, net(Jet.from_input(x, 2), store)).value

    def flux(xs):
        b = input_derivatives(net, xs, store)
        return (1 + b.value**2)[:, None] * b.grad_x

    assert rel_err(expanded, -fd_divergence(flux, x, 1e-4)) < 1e-5


# advection-diffusion ------------------------------------------------------------


def test_velocity_divergence_free():
    x = random_points(100, 7)
    w1, w2 = velocity_jets(Jet.from_input(x, 1))
    div = w1.grad.value[0] + w2.grad.value[1]
    assert np.max(np.abs(div)) < 1e-10


def test_velocity_jets_match_closed_form():
    x = random_points(30, 8)
    w1, w2 = velocity_jets(Jet.from_input(x, 0))
    assert np.allclose(np.stack([w1.value.value, w2.value.value]), velocity(x), atol=1e-14)


def test_velocity_hand_value():
    assert velocity(np.array([[0.25, 0.0]]))[:, 0] == pytest.approx([5.0, 0.0], abs=1e-14)


def test_advdiff_constant_trial_and_flags():
    p = advection_diffusion_2d()
    assert p.linear
    x = random_points(20)
    assert np.allclose(residual_of(p, constant(2.5), x), -np.sin(4 * PI * x[:, 1]), atol=1e-14)
    kinds = {s.name: (s.kind, s.group) for s in p.boundary}
    assert kinds == {
        "xlo": ("dirichlet", "dirichlet"),
        "xhi": ("dirichlet", "dirichlet"),
        "ylo": ("neumann", "neumann"),
        "yhi": ("neumann", "neumann"),
    }
    y = np.array([[0.0, 0.3], [1.0, 0.3]])
    assert p.boundary[0].data(y[:1])[0] == 0.0 and p.boundary[1].data(y[1:])[0] == 1.0


def test_neumann_operator_is_outward_normal_derivative():
    p = advection_diffusion_2d()
    net, store = init_network(MlpSpec(2, (8,)), 0)
    x = np.array([[0.3, 0.0], [0.6, 1.0]])
    g = input_derivatives(net, x, store).grad_x
    u = net(Jet.from_input(x, 1), store)
    ylo, yhi = p.boundary[2], p.boundary[3]
    assert ylo.apply(u).value[0] == pytest.approx(-g[0, 1], rel=1e-14)
    assert yhi.apply(u).value[1] == pytest.approx(g[1, 1], rel=1e-14)


# manufactured ----------------------------------------------------------------


def test_manufactured_zero():
    p = manufactured("poisson", constant(0.0))
    x = random_points(10)
    assert np.all(p.source(x) == 0)
    assert all(np.all(s.data(x) == 0) for s in p.boundary)


def test_manufactured_sin_sin_source():
    p = get_problem("manufactured:sin_pi_2d")
    x = random_points(10, 9)
    expect = -2 * PI**2 * np.sin(PI * x[:, 0]) * np.sin(PI * x[:, 1])
    assert np.allclose(p.source(x), expect, rtol=1e-13, atol=1e-13)


def test_manufactured_linear_advdiff():
    p = manufactured("advdiff", lambda X, prm=None: X[..., 0])
    x = random_points(10, 3)
    assert np.allclose(p.source(x), velocity(x)[0], atol=1e-14)


def test_manufactured_dimension_mismatch():
    def uses_second_coord(X, p=None):
        return X[..., 1]

    with pytest.raises(ValueError):
        manufactured("poisson", uses_second_coord, dim=1)
    with pytest.raises(ValueError):
        manufactured("heat", uses_second_coord)


def test_unknown_names():
    with pytest.raises(KeyError):
        get_problem("wave")
    with pytest.raises(KeyError):
        get_problem("manufactured:nope")


# linearity -------------------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["poisson2d", "advdiff2d", "manufactured:advdiff_smooth"]),
    st.integers(0, 1000),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_linear_operator_superposition(name, seed, a, b):
    p = get_problem(name)
    (nu, su), (nv, sv) = init_network(MlpSpec(2, (8, 8)), seed), init_network(MlpSpec(2, (8,)), seed + 1)
    x = random_points(10, seed)
    X = Jet.from_input(x, 2)
    ju, jv = nu(X, su), nv(X, sv)
    lhs = p.operator(x, a * ju + b * jv).value
    rhs = a * p.operator(x, ju).value + b * p.operator(x, jv).value
    scale = max(np.max(np.abs(rhs)), np.max(np.abs(a * p.operator(x, ju).value)), 1.0)
    assert np.max(np.abs(lhs - rhs)) / scale < 1e-12


def test_exact_values_require_exact_solution():
    with pytest.raises(ValueError):
        nonlinear_poisson_2d().exact_values(random_points(2))
    assert evaluate(poisson_2d().exact, np.array([0.0, 0.0])) == 0.0
