import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import eigh

from evofem.errors import DivergedStateError, NonconvergenceError
from evofem.fields import Dilation, RotatingCircle, ZeroField
from evofem.flowmap import FlowMap
from evofem.mesh import (EvolvingMesh, assemble_mass, assemble_stiffness, build_circle_mesh,
                         build_interval_mesh)
from evofem.rng import Lcg
from evofem.solver import (OperatorSpec, ProblemConfig, coercivity_constants,
                           energy_certificate, manufactured_heat, monotonicity_witness,
                           newton_tail_order, nonlinear_residual, operator_jacobian, solve,
                           solve_fixed_domain, stability_experiment, step, time_grid)



def sine(x):
    return np.sin(np.pi * x[..., 0])


def interval_mesh(field=None, n=16, T=1.0, N=None):
    ref = build_interval_mesh(0.0, 1.0, n)
    if field is None:
        return EvolvingMesh(ref)
    return EvolvingMesh(ref, FlowMap(field, horizon=T),
                        times=None if N is None else time_grid(T, N))


# operator specs -----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(kind="p-laplace", p=1.0),
                                    dict(kind="p-laplace", p=0.5),
                                    dict(kind="linear-diffusion", p=3.0),
                                    dict(kind="p-laplace", p=1.5, epsilon=0.0),
                                    dict(kind="p-laplace", p=3.0, alpha=-1.0),
                                    dict(kind="wave")])
def test_operator_spec_rejects(kwargs):
    with pytest.raises(ValueError):
        OperatorSpec(**kwargs)


def test_problem_config_rejects():
    m = interval_mesh()
    with pytest.raises(ValueError):
        ProblemConfig(m, OperatorSpec(), 1.0, 0)
    with pytest.raises(ValueError):
        ProblemConfig(m, OperatorSpec(), 1.0, 10, newton_tol=0.0)


# residual -------------------------------------------------------------------------

def test_linear_residual_is_stiffness_product():
    m = interval_mesh(Dilation(0.3))
    u = Lcg(1).uniform(17, -1, 1)
    spec = OperatorSpec("p-laplace", 2.0, 0.0, 0.37)
    assert np.array_equal(nonlinear_residual(spec, m, 0.4, u), assemble_stiffness(m, 0.4) @ u)


@pytest.mark.parametrize("p,eps", [(1.3, 1e-8), (2.0, 0.0), (3.0, 0.0), (4.0, 1e-8)])
def test_zero_state_zero_residual(p, eps):
    m = interval_mesh(Dilation(0.3))
    spec = OperatorSpec("p-laplace", p, 0.7, eps)
    assert np.array_equal(nonlinear_residual(spec, m, 0.4, np.zeros(17)), np.zeros(17))


def test_p4_slope_cubed():
    # element (0, 1) of the mesh on (0, 2), u = s x on it: flux |s|^2 s
    m = EvolvingMesh(build_interval_mesh(0.0, 2.0, 2))
    s = 1.7
    u = np.array([0.0, s, 2 * s])
    r = nonlinear_residual(OperatorSpec("p-laplace", 4.0, 0.0, 0.0), m, 0.0, u)
    assert r[0] == pytest.approx(-s**3, rel=1e-14)
    assert r[1] == pytest.approx(0.0, abs=1e-14)
    assert r[2] == pytest.approx(s**3, rel=1e-14)


def test_nonfinite_state_diverges():
    m = interval_mesh()
    u = np.zeros(17)
    u[3] = np.inf
    with pytest.raises(DivergedStateError):
        nonlinear_residual(OperatorSpec("p-laplace", 3.0), m, 0.0, u)


@pytest.mark.parametrize("p,alpha", [(1.5, 0.5), (3.0, 0.0), (4.0, 1.0)])
def test_jacobian_matches_differences(p, alpha):
    m = interval_mesh(Dilation(0.2))
    spec = OperatorSpec("p-laplace", p, alpha, 1e-3)
    rng = Lcg(2)
    u = rng.uniform(17, -1, 1)
    d = rng.uniform(17, -1, 1)
    h = 1e-6
    fd = (nonlinear_residual(spec, m, 0.5, u + h * d) - nonlinear_residual(spec, m, 0.5, u - h * d))
    fd /= 2 * h
    assert np.allclose(fd, operator_jacobian(spec, m, 0.5, u) @ d, rtol=1e-6, atol=1e-7)


# monotone-operator witnesses -------------------------------------------------------

@pytest.mark.parametrize("spec", [OperatorSpec(), OperatorSpec("p-laplace", 1.5, 0.0),
                                  OperatorSpec("p-laplace", 3.0, 0.5),
                                  OperatorSpec("p-laplace", 4.0, 0.0, 0.0)])
def test_monotone_and_coercive(spec):
    for m in (interval_mesh(Dilation(0.3)),
              EvolvingMesh(build_circle_mesh(1.0, 16), FlowMap(RotatingCircle(0.3, 1.0, 1.0)))):
        mono, coer = monotonicity_witness(spec, m, 0.5, pairs=30)
        assert mono >= -1e-12
        assert coer >= -1e-12


def test_coercivity_constants():
    iv = interval_mesh()
    assert coercivity_constants(OperatorSpec("p-laplace", 3.0), iv).c_strong == 1.0
    c = coercivity_constants(OperatorSpec("p-laplace", 3.0, 0.25), iv)
    assert (c.c_strong, c.norm) == (0.25, "full")
    c = coercivity_constants(OperatorSpec("p-laplace", 1.5, 0.0, 1e-2), iv)
    assert c.c_shift == pytest.approx(1e-3)


# stepping ------------------------------------------------------------------------------

def test_step_zero_stays_zero():
    m = interval_mesh(Dilation(0.3), N=10)
    for spec in (OperatorSpec(), OperatorSpec("p-laplace", 3.0, 0.5)):
        cfg = ProblemConfig(m, spec, 1.0, 10)
        assert np.array_equal(step(cfg, np.zeros(15), 0.0), np.zeros(15))


def test_static_step_is_classical_implicit_euler():
    m = interval_mesh()
    cfg = ProblemConfig(m, OperatorSpec(), 1.0, 10)
    u = Lcg(5).uniform(15, -1, 1)
    mass = assemble_mass(m, 0.0)[1:-1, 1:-1]
    stiff = assemble_stiffness(m, 0.0)[1:-1, 1:-1]
    expected = np.linalg.solve(mass + 0.1 * stiff, mass @ u)
    assert np.allclose(step(cfg, u, 0.0), expected, rtol=1e-13, atol=1e-15)


def test_closed_curve_step_conserves_mass():
    m = EvolvingMesh(build_circle_mesh(1.0, 24), FlowMap(RotatingCircle(0.3, 1.0, 1.0)),
                     times=time_grid(1.0, 20))
    u = Lcg(7).uniform(24, 0, 1)
    for spec in (OperatorSpec(), OperatorSpec("p-laplace", 3.0)):
        cfg = ProblemConfig(m, spec, 1.0, 20)
        v = step(cfg, u, 0.05)
        before = assemble_mass(m, 0.05).sum(axis=0) @ u
        after = assemble_mass(m, 0.1).sum(axis=0) @ v
        assert abs(after - before) <= 1e-12


def test_eigenfunction_decay():
    m = interval_mesh(n=16)
    mass = assemble_mass(m, 0.0)[1:-1, 1:-1]
    stiff = assemble_stiffness(m, 0.0)[1:-1, 1:-1]
    lam, vec = eigh(stiff, mass)
    v = vec[:, 0]
    N, T = 20, 1.0
    full = np.zeros(17)
    full[1:-1] = v
    res = solve(ProblemConfig(m, OperatorSpec(), T, N, initial=full))
    tau = T / N
    for k in (1, 5, 20):
        assert np.allclose(res.U[k], v * (1 + tau * lam[0]) ** (-k), rtol=1e-10, atol=1e-13)


def test_expanding_circle_mass_constant():
    N = 200
    m = EvolvingMesh(build_circle_mesh(1.0, 32), FlowMap(RotatingCircle(0.3, 1.0, 0.0)),
                     times=time_grid(1.0, N))
    res = solve(ProblemConfig(m, OperatorSpec(), 1.0, N, None,
                              lambda x: 1 + x[..., 0] * x[..., 1] ** 2))
    assert np.max(np.abs(np.diff(res.mass))) <= 1e-12
    assert np.max(np.abs(res.mass - res.mass[0])) <= 1e-12 * N


@pytest.mark.parametrize("spec", [OperatorSpec(), OperatorSpec("p-laplace", 1.5),
                                  OperatorSpec("p-laplace", 3.0, 0.5)])
def test_static_norm_nonincreasing(spec):
    m = interval_mesh(n=32)
    res = solve(ProblemConfig(m, spec, 0.5, 25, None, sine))
    assert np.all(np.diff(res.hnorm2) <= 1e-15)


@pytest.mark.parametrize("p", [1.5, 2.5, 3.0, 4.0])
def test_newton_converges_quadratically(p):
    m = interval_mesh(Dilation(0.3), n=32, N=20)
    cfg = ProblemConfig(m, OperatorSpec("p-laplace", p, 0.0), 1.0, 20,
                        lambda t, x: 5 * np.sin(3 * x[..., 0]), sine)
    res = solve(cfg)
    assert res.newton_iters.max() <= 25
    orders = [newton_tail_order(h) for h in res.newton_history]
    orders = [o for o in orders if not math.isnan(o)]
    assert orders and min(orders) >= 1.5


def test_newton_failure_reports_residual():
    m = interval_mesh(Dilation(0.3), n=32, N=5)
    cfg = ProblemConfig(m, OperatorSpec("p-laplace", 4.0), 1.0, 5,
                        lambda t, x: 5 * np.sin(3 * x[..., 0]), sine,
                        newton_tol=1e-300, newton_maxit=2)
    with pytest.raises(NonconvergenceError) as info:
        solve(cfg)
    assert info.value.residual > 0


def test_epsilon_limit():
    m = interval_mesh(Dilation(0.3), n=32, N=20)
    sols = []
    for eps in (1e-2, 1e-3, 1e-4, 0.0):
        cfg = ProblemConfig(m, OperatorSpec("p-laplace", 3.0, 0.0, eps), 1.0, 20,
                            lambda t, x: np.ones(x.shape[:-1]), sine)
        sols.append(solve(cfg).U[-1])
    gaps = [np.max(np.abs(s - sols[-1])) for s in sols[:-1]]
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-6


def test_energy_certificate_holds():
    for spec in (OperatorSpec(), OperatorSpec("p-laplace", 3.0),
                 OperatorSpec("p-laplace", 1.5, 0.5, 1e-3)):
        m = interval_mesh(Dilation(0.4), n=32, N=40)
        cfg = ProblemConfig(m, spec, 1.0, 40, lambda t, x: np.cos(4 * x[..., 0]), sine)
        res = solve(cfg)
        lhs, rhs = energy_certificate(cfg, res)
        assert np.all(lhs <= rhs * (1 + 1e-12))


def test_result_diagnostics_finite():
    m = interval_mesh(Dilation(0.4), n=16, N=10)
    res = solve(ProblemConfig(m, OperatorSpec("p-laplace", 3.0), 1.0, 10, None, sine))
    for arr in (res.mass, res.hnorm2, res.xp):
        assert np.all(np.isfinite(arr))
    assert np.all(np.diff(res.xp) >= 0)
    assert res.full(0)[0] == 0.0 and len(res.full(0)) == 17


# reduction to a fixed domain -----------------------------------------------------------

@settings(max_examples=5, deadline=None)
@given(st.integers(2, 30), st.integers(1, 30), st.floats(0.0, 1.0))
def test_zero_velocity_bit_identical(n, N, alpha):
    ref = build_interval_mesh(0.0, 1.0, n)
    moving = EvolvingMesh(ref, FlowMap(ZeroField(1)), times=time_grid(1.0, N))
    f = lambda t, x: np.cos(t) * x[..., 0]  # noqa: E731
    cfg = ProblemConfig(moving, OperatorSpec("linear-diffusion", 2.0, alpha), 1.0, N, f, sine)
    assert np.array_equal(solve(cfg).U, solve_fixed_domain(cfg).U)


# stability -----------------------------------------------------------------------------

def test_identical_data_zero_difference():
    m = interval_mesh(Dilation(0.3), n=16, N=20)
    cfg = ProblemConfig(m, OperatorSpec(), 1.0, 20, None, sine)
    u = np.sin(np.pi * m.reference.nodes[:, 0])
    table = stability_experiment(cfg, u, u)
    assert np.all(table.difference == 0.0)


def test_static_heat_contracts():
    m = interval_mesh(n=32)
    cfg = ProblemConfig(m, OperatorSpec(), 1.0, 50, lambda t, x: np.ones(x.shape[:-1]))
    rng = Lcg(3)
    a = rng.uniform(33, -1, 1)
    b = rng.uniform(33, -1, 1)
    table = stability_experiment(cfg, a, b)
    assert table.c_w == 0.0
    assert np.all(table.ratio <= 1.0 + 1e-14)


@pytest.mark.parametrize("N", [200, 400])
def test_dilation_p3_stability(N):
    m = interval_mesh(Dilation(0.3), n=32, N=N)
    cfg = ProblemConfig(m, OperatorSpec("p-laplace", 3.0), 1.0, N,
                        lambda t, x: np.sin(np.pi * x[..., 0]), sine)
    base = np.sin(np.pi * m.reference.nodes[:, 0])
    bump = np.zeros(33)
    bump[1:-1] = 1e-3 * Lcg(0).uniform(31, -1, 1)
    table = stability_experiment(cfg, base, base + bump)
    assert table.c_w == pytest.approx(0.3)
    assert np.max(table.ratio) <= 1.05


# manufactured solution --------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.05, 0.95), st.floats(0.0, 0.8))
def test_manufactured_forcing_satisfies_pde(alpha, xi, t):
    # on the moving domain: u_t + w u_x + u w_x - u_xx = f with w = alpha x
    exact, forcing, _ = manufactured_heat(alpha)
    x = xi * math.exp(alpha * t)
    h = 1e-4
    u = lambda s, y: float(exact(s, np.array([[y]]))[0])  # noqa: E731
    ut = (u(t + h, x) - u(t - h, x)) / (2 * h)
    ux = (u(t, x + h) - u(t, x - h)) / (2 * h)
    uxx = (u(t, x + h) - 2 * u(t, x) + u(t, x - h)) / h**2
    lhs = ut + alpha * x * ux + alpha * u(t, x) - uxx
    assert lhs == pytest.approx(float(forcing(t, np.array([[x]]))[0]), abs=1e-5)


def test_manufactured_vanishes_on_moving_boundary():
    exact, _, _ = manufactured_heat(0.5)
    t = 0.7
    ends = np.array([[0.0], [math.exp(0.5 * t)]])
    assert np.allclose(exact(t, ends), 0.0, atol=1e-15)
