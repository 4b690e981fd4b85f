"""Transported function spaces: pairings, lambda forms and Pi_t operators.

A pivot bundles, for one choice of evolving Hilbert (or dual-flow) space,

* ``pairing(t, u0, v0)``: the pairing at time t of the transported reference
  functions u0, v0, evaluated directly on the carried geometry;
* ``lambda_form(t, u, v)``: the closed-form time derivative of that pairing,
  with u, v the functions at time t;
* ``pi_operator(t)``: the map Pi_t on reference coefficients with its inverse.

Coefficient convention.  For the L2, H1 and dual-flow pivots a function at
time t has the same nodal coefficients as its reference preimage.  For the
H^-1 pivot the transport of a functional keeps its action on the transported
basis, so the coefficients at t are M(t)^-1 M(0) u0 (``push``/``pull``).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .errors import AssemblyError, DomainError, UnsupportedError
from .fields import VelocityField, ZeroField
from .flowmap import FlowMap, inverse_flow
from .mesh import (CLOSED_CURVE, INTERVAL, EvolvingMesh, FeFunction, assemble_mass,
                   assemble_stiffness, w1r_norm)
from .rng import Lcg

PIVOTS = ("L2", "H1", "Hminus1", "DualFlowL1")


@dataclass(frozen=True)
class PivotSpec:
    variant: str
    dual_field: VelocityField | None = None

    def __post_init__(self):
        if self.variant not in PIVOTS:
            raise ValueError(f"unknown pivot {self.variant!r}; expected one of {PIVOTS}")


@dataclass(frozen=True)
class PiOperator:
    t: float
    forward: np.ndarray
    inverse: np.ndarray
    pivot: str


def _solve(a, b):
    try:
        return np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError(f"singular solve: {exc}") from exc


def _pi_pair(g0, gt):
    """(g0^-1 gt, gt^-1 g0); exactly the identity when the matrices agree bitwise."""
    if np.array_equal(g0, gt):
        return np.eye(len(g0)), np.eye(len(g0))
    return _solve(g0, gt), _solve(gt, g0)


class Pivot:
    variant = "abstract"

    def __init__(self, mesh: EvolvingMesh):
        self.mesh = mesh
        self.free = mesh.reference.free_nodes(zero_boundary=False)

    def _r(self, a):
        return a[np.ix_(self.free, self.free)] if a.ndim == 2 else a[self.free]

    def mass(self, t, weight=None):
        return self._r(assemble_mass(self.mesh, t, weight))

    def stiffness(self, t, tensor=None):
        return self._r(assemble_stiffness(self.mesh, t, tensor))

    @property
    def size(self) -> int:
        return len(self.free)

    def push(self, t, u0):
        return np.asarray(u0, dtype=float)

    def pull(self, t, u):
        return np.asarray(u, dtype=float)

    def pairing_matrix(self, t):
        raise NotImplementedError

    def pairing(self, t, u0, v0) -> float:
        return float(u0 @ self.pairing_matrix(t) @ v0)

    def lambda_matrix(self, t):
        """Matrix G(t) with lambda(t; push u0, push v0) = u0 . G v0."""
        raise NotImplementedError

    def lambda_form(self, t, u, v) -> float:
        return float(self.pull(t, u) @ self.lambda_matrix(t) @ self.pull(t, v))

    def reference_gram(self):
        """Gram matrix of the reference pairing used to identify Pi_t."""
        raise NotImplementedError

    def pi_operator(self, t) -> PiOperator:
        raise NotImplementedError


class L2Pivot(Pivot):
    variant = "L2"

    def pairing_matrix(self, t):
        return self.mass(t)

    def lambda_matrix(self, t):
        return self.mass(t, weight=self.mesh.geometry(t).divergence)

    def reference_gram(self):
        return self.mass(0.0)

    def pi_operator(self, t):
        m0 = self.mass(0.0)
        mj = self.mass(0.0, weight=self.mesh.stretch(t))
        return PiOperator(t, *_pi_pair(m0, mj), self.variant)


def pulled_back_tensor(mesh: EvolvingMesh, t):
    """Per-element J A^-T (D Phi)^T (D Phi) A^-1 for the discrete flow.

    A = (D Phi)^T D Phi + nu0 nu0^T is the rank-completed reference metric
    (nu0 nu0^T vanishes on intervals) and J = sqrt(det A).  Returns None (the
    plain reference stiffness) when no node has moved.
    """
    if np.array_equal(mesh.geometry(t).nodes, mesh.geometry(0.0).nodes):
        return None
    dphi = mesh.deformation_gradient(t)
    tau0 = mesh.geometry(0.0).tangents
    d = tau0.shape[1]
    nn = np.eye(d) - tau0[:, :, None] * tau0[:, None, :]
    gram = np.swapaxes(dphi, 1, 2) @ dphi
    metric = gram + nn
    inv = np.linalg.inv(metric)
    jdet = np.sqrt(np.linalg.det(metric))
    return jdet[:, None, None] * np.swapaxes(inv, 1, 2) @ gram @ inv


class H1Pivot(Pivot):
    variant = "H1"

    def pairing_matrix(self, t):
        return self.mass(t) + self.stiffness(t)

    def lambda_matrix(self, t):
        geo = self.mesh.geometry(t)
        return self.mass(t, weight=geo.divergence) + self.stiffness(t, tensor=geo.deformation)

    def reference_gram(self):
        return self.mass(0.0) + self.stiffness(0.0)

    def pi_operator(self, t):
        g0 = self.reference_gram()
        pulled = (self.mass(0.0, weight=self.mesh.stretch(t))
                  + self.stiffness(0.0, tensor=pulled_back_tensor(self.mesh, t)))
        return PiOperator(t, *_pi_pair(g0, pulled), self.variant)


def hminus1_inner(mesh: EvolvingMesh, t, f, g) -> float:
    """(M(t) f)^T K(t)^-1 (M(t) g) on the zero-boundary space of an interval.

    Evaluated through a Cholesky factor of K so the result is exactly
    symmetric in (f, g).
    """
    if mesh.topology != INTERVAL:
        raise UnsupportedError("the H^-1 pairing needs an interval with zero boundary values")
    free = mesh.reference.free_nodes(True)
    f = f.coefficients if isinstance(f, FeFunction) else np.asarray(f, dtype=float)
    g = g.coefficients if isinstance(g, FeFunction) else np.asarray(g, dtype=float)
    m = assemble_mass(mesh, t)[np.ix_(free, free)]
    k = assemble_stiffness(mesh, t)[np.ix_(free, free)]
    try:
        low = np.linalg.cholesky(k)
    except np.linalg.LinAlgError as exc:
        raise AssemblyError(f"stiffness matrix not positive definite at t={t}") from exc
    yf = solve_triangular(low, m @ f, lower=True)
    yg = solve_triangular(low, m @ g, lower=True)
    return float(np.dot(yf, yg))


class HMinus1Pivot(Pivot):
    variant = "Hminus1"

    def __init__(self, mesh):
        if mesh.topology != INTERVAL:
            raise UnsupportedError("H^-1 pivot is only available on intervals (closed-curve "
                                   "stiffness has constants in its kernel)")
        super().__init__(mesh)
        self.free = mesh.reference.free_nodes(True)

    def push(self, t, u0):
        return _solve(self.mass(t), self.mass(0.0) @ u0)

    def pull(self, t, u):
        return _solve(self.mass(0.0), self.mass(t) @ u)

    def pairing_matrix(self, t):
        m0 = self.mass(0.0)
        return m0 @ cho_solve(cho_factor(self.stiffness(t)), m0)

    def pairing(self, t, u0, v0):
        return hminus1_inner(self.mesh, t, self.push(t, u0), self.push(t, v0))

    def lambda_form(self, t, u, v):
        # lambda = -int H grad(L^-1 u) . grad(L^-1 v)
        m, k = self.mass(t), self.stiffness(t)
        kh = self.stiffness(t, tensor=self.mesh.geometry(t).deformation)
        wu = _solve(k, m @ u)
        wv = _solve(k, m @ v)
        return float(-(wu @ kh @ wv))

    def lambda_matrix(self, t):
        m0, k = self.mass(0.0), self.stiffness(t)
        kh = self.stiffness(t, tensor=self.mesh.geometry(t).deformation)
        s = _solve(k, m0)
        return -(s.T @ kh @ s)

    def reference_gram(self):
        m0 = self.mass(0.0)
        return m0 @ _solve(self.stiffness(0.0), m0)

    def pi_operator(self, t):
        # Pi_t = L_0 psi_{-t} L_t^-1 phi_t on P1 coefficients
        m0, k0, kt = self.mass(0.0), self.stiffness(0.0), self.stiffness(t)
        if np.array_equal(k0, kt):
            return PiOperator(t, np.eye(len(m0)), np.eye(len(m0)), self.variant)
        fwd = _solve(m0, k0 @ _solve(kt, m0))
        inv = _solve(m0, kt @ _solve(k0, m0))
        return PiOperator(t, fwd, inv, self.variant)


class CurveParameter:
    """Polar-angle parameter of a closed reference polygon around the origin."""

    def __init__(self, nodes):
        ang = np.unwrap(np.arctan2(nodes[:, 1], nodes[:, 0]))
        rel = ang - ang[0]
        if np.any(np.diff(rel) <= 0.0) or not rel[-1] < 2.0 * np.pi:
            raise UnsupportedError("reference curve must be star-shaped around the origin "
                                   "and ordered counter-clockwise")
        self.start = ang[0]
        self.knots = np.append(rel, 2.0 * np.pi)

    def locate(self, points):
        """Element index and local coordinate of the angle of each point."""
        rel = np.mod(np.arctan2(points[:, 1], points[:, 0]) - self.start, 2.0 * np.pi)
        n = len(self.knots) - 1
        k = np.clip(np.searchsorted(self.knots, rel, side="right") - 1, 0, n - 1)
        xi = (rel - self.knots[k]) / np.diff(self.knots)[k]
        return k, xi

    def spacing(self):
        return np.diff(self.knots)


class DualFlowPivot(Pivot):
    """Pairing of W^{1,r} transported by one flow with L^1 transported by another.

    The two flows share the normal velocity, so both carry the reference
    curve onto the same curve; Pi_t is composition with the reparametrisation
    Theta_t = Phi_0^t o PhiDual_t^0 of the reference curve, discretised by
    periodic linear interpolation in the polar angle.
    """

    variant = "DualFlowL1"

    def __init__(self, mesh, dual_field: VelocityField | None, check_times=None):
        if mesh.topology != CLOSED_CURVE:
            raise UnsupportedError("dual-flow pivot requires a closed curve")
        super().__init__(mesh)
        ref = mesh.reference
        base = mesh.flow or FlowMap(ZeroField(ref.dim))
        self.flow = base
        self.dual_flow = FlowMap(dual_field or ZeroField(ref.dim), base.horizon,
                                 base.substeps, base.tolerance)
        self.param = CurveParameter(ref.nodes)
        self._reparam_cache = {}
        times = check_times if check_times is not None else np.linspace(0.0, base.horizon, 5)
        self.check_normal_agreement(times)

    def check_normal_agreement(self, times, tol=1e-10):
        ref = self.mesh.reference
        nu0 = ref.node_normals()
        worst = 0.0
        for t in times:
            x, jac = self.flow.forward(ref.nodes, t)
            nu = np.linalg.solve(np.swapaxes(jac, 1, 2), nu0[:, :, None])[:, :, 0]
            nu /= np.linalg.norm(nu, axis=1)[:, None]
            gap = np.sum((self.dual_flow.field(t, x) - self.flow.field(t, x)) * nu, axis=1)
            worst = max(worst, float(np.max(np.abs(gap))))
        if worst > tol:
            raise ValueError(f"dual field differs in normal velocity by {worst:.3e}")
        return worst

    def _reparam(self, t):
        hit = self._reparam_cache.get(float(t))
        if hit is not None:
            return hit
        nodes = self.mesh.reference.nodes
        y, _ = self.dual_flow.forward(nodes, t)
        self.flow._check_time(t)
        q, back_jac = self.flow.integrate(y, t, 0.0)
        k, xi = self.param.locate(q)
        # d/dt Theta = DPhi_0^t (wDual - w) at y; convert to angular speed at q
        dq = np.einsum("nij,nj->ni", back_jac, self.dual_flow.field(t, y) - self.flow.field(t, y))
        speed = (q[:, 0] * dq[:, 1] - q[:, 1] * dq[:, 0]) / np.sum(q * q, axis=1)
        out = (k, xi, speed)
        self._reparam_cache[float(t)] = out
        return out

    def interpolation_matrix(self, t):
        k, xi, _ = self._reparam(t)
        n = self.size
        p = np.zeros((n, n))
        rows = np.arange(n)
        np.add.at(p, (rows, k), 1.0 - xi)
        np.add.at(p, (rows, (k + 1) % n), xi)
        return p

    def interpolation_rate(self, t):
        """Time derivative of :meth:`interpolation_matrix`."""
        k, _, speed = self._reparam(t)
        n = self.size
        h = self.param.spacing()[k]
        p = np.zeros((n, n))
        rows = np.arange(n)
        np.add.at(p, (rows, k), -speed / h)
        np.add.at(p, (rows, (k + 1) % n), speed / h)
        return p

    def pairing_matrix(self, t):
        return self.interpolation_matrix(t).T @ self.mass(0.0)

    def pairing(self, t, u0, v0):
        # u0 transported by the first flow, sampled where the dual flow carries the nodes
        y, _ = self.dual_flow.forward(self.mesh.reference.nodes, t)
        vals = pushforward(self.mesh, u0, t)(y)
        return float(vals @ self.mass(0.0) @ v0)

    def lambda_matrix(self, t):
        return self.interpolation_rate(t).T @ self.mass(0.0)

    def reference_gram(self):
        return self.mass(0.0)

    def pi_operator(self, t):
        p = self.interpolation_matrix(t)
        return PiOperator(t, p, _solve(p, np.eye(self.size)), self.variant)


def make_pivot(spec: PivotSpec | str, mesh: EvolvingMesh) -> Pivot:
    if isinstance(spec, str):
        spec = PivotSpec(spec)
    if spec.variant == "L2":
        return L2Pivot(mesh)
    if spec.variant == "H1":
        return H1Pivot(mesh)
    if spec.variant == "Hminus1":
        return HMinus1Pivot(mesh)
    return DualFlowPivot(mesh, spec.dual_field)


def lambda_form(pivot, mesh: EvolvingMesh, t, u, v) -> float:
    """lambda(t; u, v) for functions u, v given by their coefficients at time t."""
    if not isinstance(pivot, Pivot):
        pivot = make_pivot(pivot, mesh)
    u = u.coefficients if isinstance(u, FeFunction) else u
    v = v.coefficients if isinstance(v, FeFunction) else v
    return pivot.lambda_form(t, np.asarray(u, dtype=float), np.asarray(v, dtype=float))


def pi_matrix(pivot, mesh: EvolvingMesh, t) -> PiOperator:
    if not isinstance(pivot, Pivot):
        pivot = make_pivot(pivot, mesh)
    return pivot.pi_operator(t)


class PushedFunction:
    """A reference P1 function composed with the inverse flow at time t."""

    def __init__(self, mesh: EvolvingMesh, coefficients, t):
        ref = mesh.reference
        c = np.asarray(coefficients, dtype=float)
        if len(c) != ref.n_nodes:
            raise ValueError(f"expected {ref.n_nodes} nodal coefficients, got {len(c)}")
        self.mesh = mesh
        self.coefficients = c
        self.t = float(t)
        self._param = CurveParameter(ref.nodes) if ref.topology == CLOSED_CURVE else None

    def __call__(self, x):
        ref = self.mesh.reference
        x = np.asarray(x, dtype=float)
        pts = x.reshape(-1, ref.dim)
        p = pts if self.mesh.flow is None else inverse_flow(self.mesh.flow, pts, self.t)
        if self._param is None:
            a, b = ref.nodes[0, 0], ref.nodes[-1, 0]
            slack = 1e-9 * (b - a)
            if np.any(p[:, 0] < a - slack) or np.any(p[:, 0] > b + slack):
                raise DomainError(f"point outside the domain at t={self.t}")
            vals = np.interp(p[:, 0], ref.nodes[:, 0], self.coefficients)
        else:
            if ref.radius is not None:
                off = np.abs(np.linalg.norm(p, axis=1) - ref.radius)
                if np.any(off > 1e-6 * ref.radius):
                    raise DomainError(f"point off the curve at t={self.t}")
            k, xi = self._param.locate(p)
            n = ref.n_nodes
            vals = (1.0 - xi) * self.coefficients[k] + xi * self.coefficients[(k + 1) % n]
        if x.ndim == 0:
            return float(vals[0])
        return vals.reshape(x.shape[:-1])


def pushforward(mesh: EvolvingMesh, u, t) -> PushedFunction:
    """Transport a reference function to time t; coefficients are unchanged."""
    if isinstance(u, FeFunction):
        u = u.full(mesh.reference)
    return PushedFunction(mesh, u, t)


def pullback(fn: PushedFunction) -> np.ndarray:
    """Exact inverse of :func:`pushforward` on nodal coefficients."""
    return fn.coefficients.copy()


@dataclass(frozen=True)
class CompatibilityReport:
    max_ratio: float
    min_ratio: float
    c_x: float
    monotone: bool


def space_norm(mesh: EvolvingMesh, t, u_full, space="L2", r=2.0) -> float:
    if space == "L2":
        return float(np.sqrt(u_full @ assemble_mass(mesh, t) @ u_full))
    if space == "H1":
        g = assemble_mass(mesh, t) + assemble_stiffness(mesh, t)
        return float(np.sqrt(u_full @ g @ u_full))
    if space == "W1r":
        return w1r_norm(mesh, t, u_full, r)
    raise ValueError(f"unknown space {space!r}")


def compatibility_report(mesh: EvolvingMesh, space, times, r=2.0, n_random=8, seed=0,
                         samples=None) -> CompatibilityReport:
    """Extreme ratios ||u at t|| / ||u at 0|| over sample functions and times.

    Samples are the nodal basis plus ``n_random`` LCG vectors in [-1, 1)
    (or the explicit ``samples``).  ``c_x`` is max(max_ratio, 1/min_ratio).
    ``monotone`` records that the estimate on the full grid is at least the
    one from every other grid time.
    """
    n = mesh.reference.n_nodes
    if samples is None:
        rng = Lcg(seed)
        samples = [np.eye(n)[j] for j in range(n)]
        samples += [rng.uniform(n, -1.0, 1.0) for _ in range(n_random)]
    times = [float(t) for t in times]
    base = [space_norm(mesh, 0.0, u, space, r) for u in samples]
    ratios = np.array([[space_norm(mesh, t, u, space, r) / b for u, b in zip(samples, base)]
                       for t in times])
    hi, lo = float(ratios.max()), float(ratios.min())
    sub = ratios[::2]
    c_sub = max(float(sub.max()), 1.0 / float(sub.min()))
    c_x = max(hi, 1.0 / lo)
    return CompatibilityReport(hi, lo, c_x, c_x >= c_sub)
