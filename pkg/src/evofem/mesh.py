"""Reference meshes, transported P1 geometry and finite element assembly.

Two reference topologies are supported: an interval split into equal
elements, and a closed polygon inscribed in a circle.  Node positions at time
t are the reference nodes carried by the flow; the discrete domain at t is
the polygon (or interval) through the carried nodes.  Velocities, tangential
divergences and deformation tensors per element are those of the nodal
interpolant of the velocity field, so the discrete transport identities hold
exactly, e.g. d/dt M(t) equals the divergence-weighted mass matrix.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_banded

from .errors import AssemblyError, InvalidMeshError
from .flowmap import FlowMap

_xi, _w = np.polynomial.legendre.leggauss(3)
#: Gauss points and weights on the unit interval
GAUSS_POINTS = 0.5 * (_xi + 1.0)
GAUSS_WEIGHTS = 0.5 * _w
#: P1 shape functions at the Gauss points, shape (3, 2)
SHAPE = np.stack([1.0 - GAUSS_POINTS, GAUSS_POINTS], axis=1)

INTERVAL = "interval"
CLOSED_CURVE = "closed-curve"


@dataclass(frozen=True, eq=False)
class ReferenceMesh:
    nodes: np.ndarray       # (N, d)
    elements: np.ndarray    # (E, 2)
    topology: str
    boundary: np.ndarray    # boundary node indices
    radius: float | None = None

    def __post_init__(self):
        if self.topology not in (INTERVAL, CLOSED_CURVE):
            raise InvalidMeshError(f"unknown topology {self.topology!r}")
        n = len(self.nodes)
        if self.elements.min() < 0 or self.elements.max() >= n:
            raise InvalidMeshError("element index out of range")
        if np.any(self.lengths() <= 0.0):
            raise InvalidMeshError("element lengths must be positive")
        if self.topology == CLOSED_CURVE:
            nxt = dict(zip(self.elements[:, 0].tolist(), self.elements[:, 1].tolist()))
            seen, k = set(), 0
            while k not in seen:
                seen.add(k)
                k = nxt.get(k, -1)
                if k < 0:
                    raise InvalidMeshError("closed curve connectivity is broken")
            if len(seen) != n or len(self.elements) != n:
                raise InvalidMeshError("closed curve must be a single cycle")

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    def edges(self):
        return self.nodes[self.elements[:, 1]] - self.nodes[self.elements[:, 0]]

    def lengths(self):
        return np.linalg.norm(self.edges(), axis=1)

    def tangents(self):
        e = self.edges()
        return e / np.linalg.norm(e, axis=1)[:, None]

    def node_tangents(self):
        """Unit tangent at each node: the normalised mean of adjacent element tangents."""
        acc = np.zeros_like(self.nodes)
        tau = self.tangents()
        np.add.at(acc, self.elements[:, 0], tau)
        np.add.at(acc, self.elements[:, 1], tau)
        return acc / np.linalg.norm(acc, axis=1)[:, None]

    def node_normals(self):
        """Unit normals (tangent rotated clockwise; outward for counter-clockwise curves)."""
        tau = self.node_tangents()
        return np.stack([tau[:, 1], -tau[:, 0]], axis=1)

    def free_nodes(self, zero_boundary: bool = True):
        if not zero_boundary or self.topology == CLOSED_CURVE:
            return np.arange(self.n_nodes)
        return np.setdiff1d(np.arange(self.n_nodes), self.boundary)

    def quadrature_points(self):
        a = self.nodes[self.elements[:, 0]]
        b = self.nodes[self.elements[:, 1]]
        return a[:, None, :] * SHAPE[None, :, 0, None] + b[:, None, :] * SHAPE[None, :, 1, None]

    def to_text(self) -> str:
        lines = [f"# topology {self.topology}", f"nodes {self.n_nodes}"]
        lines += [" ".join(f"{c:.17g}" for c in p) for p in self.nodes]
        lines.append(f"elements {self.n_elements}")
        lines += [f"{a} {b}" for a, b in self.elements]
        return "\n".join(lines) + "\n"


def build_interval_mesh(a: float, b: float, n: int) -> ReferenceMesh:
    """Uniform mesh of [a, b] with n elements."""
    if not a < b:
        raise InvalidMeshError(f"need a < b, got a={a}, b={b}")
    if n < 2:
        raise InvalidMeshError(f"need at least 2 elements, got {n}")
    nodes = np.linspace(a, b, n + 1)[:, None]
    elements = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
    return ReferenceMesh(nodes, elements, INTERVAL, np.array([0, n]))


def build_circle_mesh(radius: float, n: int) -> ReferenceMesh:
    """Regular n-gon inscribed in the circle of the given radius, counter-clockwise."""
    if not radius > 0:
        raise InvalidMeshError(f"radius must be positive, got {radius}")
    if n < 3:
        raise InvalidMeshError(f"need at least 3 nodes, got {n}")
    ang = 2.0 * np.pi * np.arange(n) / n
    nodes = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    elements = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    return ReferenceMesh(nodes, elements, CLOSED_CURVE, np.array([], dtype=int), float(radius))


@dataclass(frozen=True, eq=False)
class Geometry:
    """Discrete geometry of the transported mesh at one time."""

    t: float
    nodes: np.ndarray           # (N, d) carried nodes
    quad_points: np.ndarray     # (E, 3, d) carried reference quadrature points
    quad_jac: np.ndarray        # (E, 3, d, d) flow Jacobian at the quadrature points
    edges: np.ndarray           # (E, d)
    lengths: np.ndarray         # (E,)
    tangents: np.ndarray        # (E, d)
    velocity: np.ndarray        # (N, d) nodal velocities
    grad_velocity: np.ndarray   # (E, d, d) tangential gradient of the interpolated velocity
    divergence: np.ndarray      # (E,) its trace
    deformation: np.ndarray     # (E, d, d) div I - (D + D^T)

    @property
    def measure(self) -> float:
        return float(np.sum(self.lengths))

    def basis_gradients(self):
        """Gradients of the two local shape functions, shape (E, 2, d)."""
        g = self.tangents / self.lengths[:, None]
        return np.stack([-g, g], axis=1)


class EvolvingMesh:
    """A reference mesh carried by a flow map.

    ``flow=None`` gives the fixed-domain mesh: every time sees the reference
    geometry and a zero velocity.  When ``times`` is given, the geometry on
    that grid is computed once at construction by marching through it;
    other times are integrated directly from 0.
    """

    def __init__(self, reference: ReferenceMesh, flow: FlowMap | None = None, times=None):
        self.reference = reference
        self.flow = flow
        ref = reference
        self._quad0 = ref.quadrature_points()
        self._points = np.concatenate([ref.nodes, self._quad0.reshape(-1, ref.dim)])
        eye = np.broadcast_to(np.eye(ref.dim), self._points.shape + (ref.dim,))
        self._static = self._build(0.0, self._points.copy(), eye.copy(), zero_velocity=True)
        self._cache: dict[float, Geometry] = {}
        if flow is not None and times is not None:
            for t, (x, f) in flow.trajectory(self._points, times).items():
                self._cache[t] = self._build(t, x, f)

    @property
    def topology(self) -> str:
        return self.reference.topology

    @property
    def static(self) -> bool:
        return self.flow is None

    def geometry(self, t: float) -> Geometry:
        if self.flow is None:
            return self._static
        t = float(t)
        geo = self._cache.get(t)
        if geo is None:
            x, f = self.flow.forward(self._points, t)
            geo = self._build(t, x, f)
            self._cache[t] = geo
        return geo

    def _build(self, t, x, f, zero_velocity=False) -> Geometry:
        ref = self.reference
        n, d = ref.n_nodes, ref.dim
        nodes = x[:n]
        quad = x[n:].reshape(ref.n_elements, 3, d)
        quad_jac = f[n:].reshape(ref.n_elements, 3, d, d)
        e0, e1 = ref.elements[:, 0], ref.elements[:, 1]
        edges = nodes[e1] - nodes[e0]
        lengths = np.linalg.norm(edges, axis=1)
        if np.any(lengths <= 0.0):
            raise AssemblyError(f"degenerate element at t={t}")
        # orientation against the flow Jacobian at the element midpoint
        carried = np.einsum("eij,ej->ei", quad_jac[:, 1], ref.edges())
        if np.any(np.sum(carried * edges, axis=1) <= 0.0):
            raise AssemblyError(f"tangled mesh at t={t}")
        tangents = edges / lengths[:, None]
        if zero_velocity:
            vel = np.zeros_like(nodes)
        else:
            vel = np.asarray(self.flow.field(t, nodes), dtype=float)
        dv = vel[e1] - vel[e0]
        grad_v = dv[:, :, None] * tangents[:, None, :] / lengths[:, None, None]
        div = np.trace(grad_v, axis1=1, axis2=2)
        deform = div[:, None, None] * np.eye(d) - (grad_v + np.swapaxes(grad_v, 1, 2))
        return Geometry(t, nodes, quad, quad_jac, edges, lengths, tangents, vel, grad_v, div, deform)

    def stretch(self, t: float):
        """Per-element ratio of carried to reference length (the discrete J)."""
        return self.geometry(t).lengths / self.geometry(0.0).lengths

    def deformation_gradient(self, t: float):
        """Tangential derivative of the discrete flow per element, shape (E, d, d)."""
        g0 = self.geometry(0.0)
        g = self.geometry(t)
        return g.edges[:, :, None] * g0.tangents[:, None, :] / g0.lengths[:, None, None]

    def measure(self, t: float) -> float:
        return self.geometry(t).measure


@dataclass(frozen=True)
class FeFunction:
    """Nodal coefficients over the free nodes of a reference mesh."""

    coefficients: np.ndarray
    space: str = "full"   # full | zero-boundary

    def full(self, mesh: ReferenceMesh) -> np.ndarray:
        free = mesh.free_nodes(self.space == "zero-boundary")
        if len(self.coefficients) != len(free):
            raise ValueError(f"expected {len(free)} coefficients, got {len(self.coefficients)}")
        out = np.zeros(mesh.n_nodes)
        out[free] = self.coefficients
        return out


def _as_reference(mesh) -> ReferenceMesh:
    return mesh.reference if isinstance(mesh, EvolvingMesh) else mesh


def _quad_values(geo: Geometry, t, spec, trailing=()):
    """Values of a weight specification at the quadrature points, shape (E, 3, *trailing)."""
    n_el = len(geo.lengths)
    if spec is None:
        return None
    if callable(spec):
        vals = np.asarray(spec(t, geo.quad_points), dtype=float)
    else:
        vals = np.asarray(spec, dtype=float)
        if vals.shape == (n_el,) + trailing:
            vals = np.broadcast_to(vals[:, None], (n_el, 3) + trailing)
    return np.broadcast_to(vals, (n_el, 3) + trailing)


def scatter_matrix(elements, local, n):
    """Sum element matrices into a dense matrix, in element order."""
    out = np.zeros((n, n))
    np.add.at(out, (elements[:, :, None], elements[:, None, :]), local)
    return out


def mass_matrix(geo: Geometry, elements, n, weight_q=None):
    if weight_q is None:
        weight_q = np.ones((len(geo.lengths), 3))
    local = np.einsum("q,eq,qi,qj->eij", GAUSS_WEIGHTS, weight_q, SHAPE, SHAPE)
    return scatter_matrix(elements, local * geo.lengths[:, None, None], n)


def stiffness_matrix(geo: Geometry, elements, n, tensor_q=None):
    grads = geo.basis_gradients()
    if tensor_q is None:
        local = np.einsum("eid,ejd->eij", grads, grads)
    else:
        tbar = np.einsum("q,eqab->eab", GAUSS_WEIGHTS, tensor_q)
        local = np.einsum("eia,eab,ejb->eij", grads, tbar, grads)
    return scatter_matrix(elements, local * geo.lengths[:, None, None], n)


def assemble_mass(mesh: EvolvingMesh, t: float, weight=None):
    """M_ij = integral over the domain at t of phi_i phi_j * weight.

    ``weight`` may be None, a callable ``weight(t, x)`` evaluated at the
    carried quadrature points, a per-element array (E,) or values (E, 3).
    """
    geo = mesh.geometry(t)
    ref = mesh.reference
    return mass_matrix(geo, ref.elements, ref.n_nodes, _quad_values(geo, t, weight))


def assemble_stiffness(mesh: EvolvingMesh, t: float, tensor=None):
    """K_ij = integral of grad phi_i . tensor grad phi_j over the domain at t.

    ``tensor`` may be None (identity), a callable returning (E, 3, d, d),
    per-element matrices (E, d, d) or quadrature values (E, 3, d, d).
    """
    geo = mesh.geometry(t)
    ref = mesh.reference
    d = ref.dim
    return stiffness_matrix(geo, ref.elements, ref.n_nodes, _quad_values(geo, t, tensor, (d, d)))


def assemble_load(mesh: EvolvingMesh, t: float, f):
    """F_j = integral of f phi_j over the domain at t, f evaluated at carried quadrature points."""
    geo = mesh.geometry(t)
    ref = mesh.reference
    vals = _quad_values(geo, t, f)
    local = np.einsum("q,eq,qi->ei", GAUSS_WEIGHTS, vals, SHAPE) * geo.lengths[:, None]
    out = np.zeros(ref.n_nodes)
    np.add.at(out, ref.elements, local)
    return out


def values_at_quadrature(mesh: ReferenceMesh | EvolvingMesh, u_full):
    """P1 function values at the quadrature points, shape (E, 3)."""
    ref = _as_reference(mesh)
    return u_full[ref.elements] @ SHAPE.T


def slopes(geo: Geometry, elements, u_full):
    """Tangential derivative of a P1 function per element."""
    return (u_full[elements[:, 1]] - u_full[elements[:, 0]]) / geo.lengths


def w1r_norm(mesh: EvolvingMesh, t: float, u_full, r: float = 2.0) -> float:
    """(integral |u|^r + |grad u|^r)^(1/r) by Gauss quadrature at time t."""
    geo = mesh.geometry(t)
    els = mesh.reference.elements
    vals = values_at_quadrature(mesh, u_full)
    zeroth = np.einsum("q,eq->e", GAUSS_WEIGHTS, np.abs(vals) ** r)
    first = np.abs(slopes(geo, els, u_full)) ** r
    return float(np.sum(geo.lengths * (zeroth + first)) ** (1.0 / r))


def linear_solve(matrix, rhs, tridiagonal: bool = False):
    """Dense solve, or a banded solve when the matrix is known to be tridiagonal."""
    try:
        if tridiagonal and matrix.shape[0] > 2:
            n = matrix.shape[0]
            ab = np.zeros((3, n))
            ab[0, 1:] = np.diagonal(matrix, 1)
            ab[1] = np.diagonal(matrix)
            ab[2, :-1] = np.diagonal(matrix, -1)
            return solve_banded((1, 1), ab, rhs)
        return np.linalg.solve(matrix, rhs)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise AssemblyError(f"singular system: {exc}") from exc
