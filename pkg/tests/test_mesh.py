import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evofem.errors import AssemblyError, InvalidMeshError
from evofem.fields import Dilation, RotatingCircle, Translation, UserPolynomial, ZeroField
from evofem.flowmap import FlowMap
from evofem.mesh import (EvolvingMesh, FeFunction, assemble_load, assemble_mass,
                         assemble_stiffness, build_circle_mesh, build_interval_mesh,
                         linear_solve, w1r_norm)

POLY2 = [(1, 0, 0.3, 0.0), (0, 1, 0.0, -0.2), (2, 0, 0.1, 0.2)]


def moving_meshes():
    iv = build_interval_mesh(0.0, 1.0, 16)
    c = build_circle_mesh(1.0, 24)
    return [EvolvingMesh(iv, FlowMap(Dilation(0.4))),
            EvolvingMesh(iv, FlowMap(UserPolynomial([0.1, 0.4, -0.3], 0.5))),
            EvolvingMesh(c, FlowMap(RotatingCircle(0.3, 1.0, 1.0))),
            EvolvingMesh(c, FlowMap(UserPolynomial(POLY2, 0.3, dim=2)))]


# reference meshes ---------------------------------------------------------------

def test_interval_mesh_nodes():
    m = build_interval_mesh(0, 1, 4)
    assert np.allclose(m.nodes[:, 0], [0, 0.25, 0.5, 0.75, 1])
    assert list(m.boundary) == [0, 4]
    assert m.n_elements == 4


@pytest.mark.parametrize("args", [(0, 1, 1), (2, 1, 4), (1, 1, 4)])
def test_interval_mesh_rejects(args):
    with pytest.raises(InvalidMeshError):
        build_interval_mesh(*args)


def test_square_perimeter():
    m = build_circle_mesh(1.0, 4)
    assert m.lengths().sum() == pytest.approx(4 * math.sqrt(2), rel=1e-15)
    assert len(m.boundary) == 0


def test_polygon_perimeter_converges_quadratically():
    errs = [abs(build_circle_mesh(1.0, n).lengths().sum() - 2 * math.pi) for n in (32, 64, 128)]
    orders = [math.log2(errs[k] / errs[k + 1]) for k in range(2)]
    assert all(abs(o - 2.0) < 0.05 for o in orders)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(3, 200))
def test_polygon_perimeter_formula(r, n):
    m = build_circle_mesh(r, n)
    assert m.lengths().sum() == pytest.approx(2 * n * r * math.sin(math.pi / n), rel=1e-12)


@pytest.mark.parametrize("args", [(0.0, 8), (-1.0, 8), (1.0, 2)])
def test_circle_mesh_rejects(args):
    with pytest.raises(InvalidMeshError):
        build_circle_mesh(*args)


def test_circle_is_single_cycle():
    m = build_circle_mesh(1.0, 7)
    broken = m.elements.copy()
    broken[3, 1] = 3
    from evofem.mesh import ReferenceMesh
    with pytest.raises(InvalidMeshError):
        ReferenceMesh(m.nodes, broken, m.topology, m.boundary)


def test_mesh_text_listing():
    text = build_interval_mesh(0, 1, 2).to_text()
    assert text.splitlines()[1:5] == ["nodes 3", "0", "0.5", "1"]
    assert "elements 2" in text


# assembly -----------------------------------------------------------------------

def test_two_element_stiffness():
    k = assemble_stiffness(EvolvingMesh(build_interval_mesh(0, 1, 2)), 0.0)
    assert np.allclose(k, 2 * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]]), atol=1e-14)


def test_single_unit_element_matrices():
    # an interval mesh needs two elements; the first element of (0, 2) is the unit element
    m = EvolvingMesh(build_interval_mesh(0, 2, 2))
    mass = assemble_mass(m, 0.0)
    stiff = assemble_stiffness(m, 0.0)
    assert mass[0, 0] == pytest.approx(1 / 3, abs=1e-15)
    assert mass[0, 1] == pytest.approx(1 / 6, abs=1e-15)
    assert stiff[0, 0] == pytest.approx(1.0, abs=1e-15)
    assert stiff[0, 1] == pytest.approx(-1.0, abs=1e-15)


def test_zero_field_mass_constant():
    m = EvolvingMesh(build_circle_mesh(1.0, 12), FlowMap(ZeroField(2)))
    assert np.array_equal(assemble_mass(m, 0.0), assemble_mass(m, 0.7))


def test_dilation_total_mass_and_stiffness_scaling():
    a = 0.3
    m = EvolvingMesh(build_interval_mesh(0, 1, 10), FlowMap(Dilation(a)))
    for t in (0.2, 0.9):
        scale = math.exp(a * t)
        assert assemble_mass(m, t).sum() == pytest.approx(scale, rel=1e-9)
        assert np.allclose(assemble_stiffness(m, t), assemble_stiffness(m, 0.0) / scale,
                           rtol=1e-9, atol=0)


def test_closed_curve_stiffness_kernel():
    for m in moving_meshes()[2:]:
        for t in (0.0, 0.6):
            assert np.max(np.abs(assemble_stiffness(m, t) @ np.ones(m.reference.n_nodes))) \
                < 1e-12


def test_load_vector_examples():
    m = EvolvingMesh(build_interval_mesh(0, 1, 4))
    assert np.array_equal(assemble_load(m, 0.0, lambda t, x: np.zeros(x.shape[:-1])),
                          np.zeros(5))
    one = assemble_load(m, 0.0, lambda t, x: np.ones(x.shape[:-1]))
    assert np.allclose(one, [0.125, 0.25, 0.25, 0.25, 0.125], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.floats(0.0, 1.0))
def test_partition_of_unity(which, t):
    m = moving_meshes()[which]
    measure = m.geometry(t).lengths.sum()
    assert assemble_mass(m, t).sum() == pytest.approx(measure, abs=1e-12)
    one = assemble_load(m, t, lambda s, x: np.ones(x.shape[:-1]))
    assert one.sum() == pytest.approx(measure, abs=1e-12)


def test_mass_exact_for_affine_weight():
    # on the element (0, 1): int (a + b x) phi_0 phi_1 = a/6 + b/12
    m = EvolvingMesh(build_interval_mesh(0, 2, 2))
    a, b = 0.7, -1.3
    mass = assemble_mass(m, 0.0, lambda t, x: a + b * x[..., 0])
    assert mass[0, 1] == pytest.approx(a / 6 + b / 12, abs=1e-15)
    assert mass[0, 0] == pytest.approx(a / 3 + b / 12, abs=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 3), st.floats(0.0, 1.0))
def test_mass_spd_stiffness_psd(which, t):
    m = moving_meshes()[which]
    mass = assemble_mass(m, t)
    stiff = assemble_stiffness(m, t)
    assert np.array_equal(mass, mass.T)
    assert np.allclose(stiff, stiff.T, atol=1e-14)
    assert np.linalg.eigvalsh(mass).min() > 0
    assert np.linalg.eigvalsh(stiff).min() > -1e-10


def test_tangled_mesh_rejected():
    # the mesh nodes are swapped by hand to mimic tangling
    m = EvolvingMesh(build_interval_mesh(0, 1, 4), FlowMap(Translation([0.1])))
    geo = m.geometry(0.0)
    x = np.concatenate([geo.nodes[::-1], geo.quad_points.reshape(-1, 1)])
    f = np.ones((len(x), 1, 1))
    with pytest.raises(AssemblyError):
        m._build(0.5, x, f)


def test_stretch_and_measure():
    m = EvolvingMesh(build_interval_mesh(0, 1, 4), FlowMap(Dilation(0.2)))
    assert np.allclose(m.stretch(1.0), math.exp(0.2), rtol=1e-9)
    assert m.measure(1.0) == pytest.approx(math.exp(0.2), rel=1e-9)


def test_marched_grid_close_to_direct():
    ref = build_circle_mesh(1.0, 16)
    flow = FlowMap(RotatingCircle(0.3, 1.0, 1.0))
    grid = EvolvingMesh(ref, flow, times=[0.25, 0.5, 0.75])
    direct = EvolvingMesh(ref, flow)
    assert np.allclose(grid.geometry(0.5).nodes, direct.geometry(0.5).nodes, atol=1e-10)


def test_fefunction_full_vector():
    ref = build_interval_mesh(0, 1, 4)
    u = FeFunction(np.array([1.0, 2.0, 3.0]), "zero-boundary").full(ref)
    assert np.array_equal(u, [0, 1, 2, 3, 0])
    with pytest.raises(ValueError):
        FeFunction(np.ones(4), "zero-boundary").full(ref)


def test_banded_solve_matches_dense():
    m = EvolvingMesh(build_interval_mesh(0, 1, 20))
    a = assemble_mass(m, 0.0) + assemble_stiffness(m, 0.0)
    b = np.arange(21.0)
    assert np.allclose(linear_solve(a, b, True), np.linalg.solve(a, b), atol=1e-12)
    with pytest.raises(AssemblyError):
        linear_solve(np.zeros((3, 3)), np.ones(3))


def test_w1r_norm_of_linear_function():
    # u = x on (0, 1): int |x|^r + 1 = 1/(r+1) + 1
    m = EvolvingMesh(build_interval_mesh(0, 1, 8))
    u = m.reference.nodes[:, 0]
    assert w1r_norm(m, 0.0, u, 2.0) == pytest.approx(math.sqrt(4 / 3), rel=1e-14)
    assert w1r_norm(m, 0.0, u, 3.0) ** 3 == pytest.approx(1.25, rel=1e-3)
