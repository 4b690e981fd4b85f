"""Finite-difference and quadrature oracles for the closed-form identities.

Each check returns a :class:`CheckReport` holding the step sizes, the
residual at each step and the observed order on the two finest levels.
A report passes when every residual is at the absolute floor (identities
that hold exactly, e.g. for a zero or rigid field), or otherwise when the
order is within the band around the expected one, or the residual is
below an explicit bound for checks that have no step size.
"""
from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .flowmap import (FlowMap, evolve_points, inverse_flow, inverse_metric_density,
                      metric_time_derivative)
from .mesh import EvolvingMesh, assemble_mass
from .rng import Lcg
from .spaces import Pivot

FD_STEPS = (1e-2, 5e-3, 2.5e-3)
ZERO_FLOOR = 1e-12


@dataclass
class CheckReport:
    name: str
    h: np.ndarray
    residual: np.ndarray
    order: float
    passed: bool
    expected: float | None = None
    band: float = 0.2
    bound: float | None = None

    def level_orders(self):
        r = self.residual
        out = np.full(len(r), np.nan)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[1:] = np.log(r[:-1] / r[1:]) / np.log(self.h[:-1] / self.h[1:])
        return out

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual))

    def summary(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} {self.max_residual:.3e}"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# check: {self.name}\n")
        buf.write("# h: step size (time, space or parameter, per check)\n")
        buf.write("# residual: absolute difference between oracle and closed form\n")
        buf.write("# order: log(r(h_prev)/r(h)) / log(h_prev/h), blank on the first row\n")
        buf.write("h,residual,order\n")
        for h, r, o in zip(self.h, self.residual, self.level_orders()):
            buf.write(f"{h:.17g},{r:.17g},{'' if np.isnan(o) else f'{o:.17g}'}\n")
        return buf.getvalue()


def make_report(name, h, residual, expected=2.0, band=0.2, bound=None, floor=ZERO_FLOOR,
                min_order=False) -> CheckReport:
    """Build a report and decide pass/fail.

    With ``bound`` the check passes when every residual is at most the
    bound.  Otherwise the order of the two finest levels must lie within
    ``band`` of ``expected`` (or above ``expected - band`` if
    ``min_order``).  Residuals all at or below ``floor`` always pass.
    """
    h = np.atleast_1d(np.asarray(h, dtype=float))
    r = np.atleast_1d(np.abs(np.asarray(residual, dtype=float)))
    if not np.all(np.isfinite(r)):
        return CheckReport(name, h, r, math.nan, False, expected, band, bound)
    order = math.nan
    if len(r) >= 2 and r[-1] > 0.0 and r[-2] > 0.0:
        order = math.log(r[-2] / r[-1]) / math.log(h[-2] / h[-1])
    if np.all(r <= floor):
        passed = True
    elif bound is not None:
        passed = bool(np.all(r <= bound))
    elif math.isnan(order):
        passed = False
    elif min_order:
        passed = order >= expected - band
    else:
        passed = abs(order - expected) <= band
    return CheckReport(name, h, r, order, passed, expected, band, bound)


# lambda and transport theorem ----------------------------------------------

def check_lambda(pivot: Pivot, t: float, u0, v0, steps=FD_STEPS, name=None) -> CheckReport:
    """Central differences of pairing(t; u0, v0) against lambda at the pushed functions.

    When the pairing is affine in t (rigid motions) the difference quotient
    has no truncation error, so no order exists.  What remains is cancellation,
    about eps * |u0|.|P||v0| / h, and the flow integrator's relative error in
    lambda.  Residuals below ten times the first or the flow tolerance times
    |lambda| pass without an order.
    """
    u0, v0 = np.asarray(u0, float), np.asarray(v0, float)
    lam = pivot.lambda_form(t, pivot.push(t, u0), pivot.push(t, v0))
    res = [(pivot.pairing(t + h, u0, v0) - pivot.pairing(t - h, u0, v0)) / (2 * h) - lam
           for h in steps]
    size = float(np.abs(u0) @ np.abs(pivot.pairing_matrix(t)) @ np.abs(v0))
    flow = pivot.mesh.flow
    floor = max(ZERO_FLOOR, 10.0 * np.finfo(float).eps * size / min(steps),
                (flow.tolerance if flow is not None else 0.0) * abs(lam))
    return make_report(name or f"lambda-{pivot.variant}", steps, res, floor=floor)


class PolynomialPath:
    """Reference coefficients c(t) = sum_k a_k t^k with an exact derivative."""

    def __init__(self, coefficients):
        self.a = np.asarray(coefficients, dtype=float)   # (degree+1, n)

    @classmethod
    def random(cls, rng: Lcg, n: int, degree: int = 3, scale: float = 1.0):
        return cls(np.array([rng.uniform(n, -scale, scale) for _ in range(degree + 1)]))

    @classmethod
    def constant(cls, c):
        return cls(np.asarray(c, dtype=float)[None, :])

    def __call__(self, t):
        powers = t ** np.arange(len(self.a))
        return powers @ self.a

    def derivative(self, t):
        k = np.arange(1, len(self.a))
        return (k * t ** (k - 1)) @ self.a[1:] if len(self.a) > 1 else np.zeros(self.a.shape[1])


def check_transport_theorem(pivot: Pivot, t: float, u_path, v_path, steps=FD_STEPS,
                            name=None) -> CheckReport:
    """d/dt pairing(t; u(t), v(t)) = <u', v> + <u, v'> + lambda(t; u, v).

    ``u_path`` and ``v_path`` give reference coefficients and their exact
    time derivatives (the material derivatives of the pushed functions).
    """
    u, v = u_path(t), v_path(t)
    du, dv = u_path.derivative(t), v_path.derivative(t)
    rhs = (pivot.pairing(t, du, v) + pivot.pairing(t, u, dv)
           + pivot.lambda_form(t, pivot.push(t, u), pivot.push(t, v)))
    res = []
    for h in steps:
        plus = pivot.pairing(t + h, u_path(t + h), v_path(t + h))
        minus = pivot.pairing(t - h, u_path(t - h), v_path(t - h))
        res.append((plus - minus) / (2 * h) - rhs)
    return make_report(name or f"transport-{pivot.variant}", steps, res)


# geometry -------------------------------------------------------------------

def _pushed_tangents(jac, tangents):
    if tangents is None:
        return None
    return np.einsum("...ij,...j->...i", jac, tangents)


def _jacobian_ode_residual(flow: FlowMap, points, t, h, tangents):
    sp = evolve_points(flow, points, t + h, tangents)["jdet"]
    sm = evolve_points(flow, points, t - h, tangents)["jdet"]
    s = evolve_points(flow, points, t, tangents)
    div = flow.field.divergence(t, s["position"], _pushed_tangents(s["jac"], tangents))
    return float(np.max(np.abs((sp - sm) / (2 * h) - div * s["jdet"])))


def check_jacobian_ode(flow: FlowMap, points, t: float, steps=FD_STEPS, tangents=None,
                       bound=None, name="jacobian-ode") -> CheckReport:
    """d/dt J = (div w)(Phi) J by central differences at the given points."""
    points = np.asarray(points, dtype=float)
    res = [_jacobian_ode_residual(flow, points, t, h, tangents) for h in steps]
    return make_report(name, steps, res, bound=bound)


def check_metric_derivative(flow: FlowMap, p, t: float, steps=FD_STEPS,
                            name="metric-derivative") -> CheckReport:
    """Central differences of J F^-1 F^-T against its closed-form derivative."""
    exact = metric_time_derivative(flow, p, t)
    res = [np.max(np.abs((inverse_metric_density(flow, p, t + h)
                          - inverse_metric_density(flow, p, t - h)) / (2 * h) - exact))
           for h in steps]
    return make_report(name, steps, res)


def check_variational_jacobian(flow: FlowMap, p, t: float, steps=FD_STEPS,
                               name="variational-jacobian") -> CheckReport:
    """Central differences of Phi in p against the integrated Jacobian."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    _, jac = flow.forward(p, t)
    d = len(p)
    res = []
    for h in steps:
        cols = []
        for j in range(d):
            e = np.zeros(d)
            e[j] = h
            xp, _ = flow.forward(p + e, t)
            xm, _ = flow.forward(p - e, t)
            cols.append((xp - xm) / (2 * h))
        res.append(np.max(np.abs(np.stack(cols, axis=1) - jac)))
    return make_report(name, steps, res)


def check_gradient_pullback(mesh: EvolvingMesh, u_full, t: float, bound=1e-8,
                            name="gradient-pullback") -> CheckReport:
    """Per element: grad_{g0}(pullback u) = (D_{g0} Phi)^T pullback(grad_{g(t)} u).

    The left side is the reference slope times the reference tangent; the
    right side uses the flow Jacobian at the element midpoint projected
    onto the reference tangent, and the slope on the carried element.
    """
    u = np.asarray(u_full, dtype=float)
    els = mesh.reference.elements
    g0, g = mesh.geometry(0.0), mesh.geometry(t)
    du = u[els[:, 1]] - u[els[:, 0]]
    lhs = (du / g0.lengths)[:, None] * g0.tangents
    grad_t = (du / g.lengths)[:, None] * g.tangents
    tau0 = g0.tangents
    proj = tau0[:, :, None] * tau0[:, None, :]
    dg_phi = g.quad_jac[:, 1] @ proj
    rhs = np.einsum("eji,ej->ei", dg_phi, grad_t)
    res = float(np.max(np.abs(lhs - rhs)))
    return make_report(name, [float(np.max(g0.lengths))], [res], bound=bound)


def check_round_trip(flow: FlowMap, points, t: float, name="flow-round-trip") -> CheckReport:
    """Phi_0^t(Phi_t^0(p)) = p within ten times the integrator tolerance."""
    points = np.asarray(points, dtype=float)
    x, _ = flow.forward(points, t)
    back = inverse_flow(flow, x, t)
    res = float(np.max(np.abs(back - points)))
    return make_report(name, [t], [res], bound=10.0 * flow.tolerance)


def check_group_property(flow: FlowMap, points, s: float, t: float,
                         name="flow-group") -> CheckReport:
    """Flowing to t directly agrees with flowing to s and restarting."""
    points = np.asarray(points, dtype=float)
    direct, _ = flow.forward(points, t)
    mid, _ = flow.forward(points, s)
    restarted, _ = flow.integrate(mid, s, t)
    res = float(np.max(np.abs(direct - restarted)))
    return make_report(name, [t - s], [res], bound=10.0 * flow.tolerance)


def check_mass_derivative(mesh: EvolvingMesh, t: float, steps=FD_STEPS,
                          name="mass-derivative") -> CheckReport:
    """Forward difference of M(t) against the divergence-weighted mass, order 1."""
    g = assemble_mass(mesh, t, weight=mesh.geometry(t).divergence)
    g = 0.5 * (g + g.T)
    m = assemble_mass(mesh, t)
    res = [np.max(np.abs((assemble_mass(mesh, t + h) - m) / h - g)) for h in steps]
    return make_report(name, steps, res, expected=1.0)


# Pi_t --------------------------------------------------------------------------

def _gram_norm(gram, op):
    """Operator norm of ``op`` in the norm induced by the SPD ``gram``."""
    low = np.linalg.cholesky(gram)
    return float(np.linalg.norm(low.T @ op @ np.linalg.inv(low.T), 2))


def check_pi_round_trip(pivot: Pivot, t: float, u0, tol=1e-10, name=None) -> CheckReport:
    op = pivot.pi_operator(t)
    res = float(np.max(np.abs(op.inverse @ (op.forward @ u0) - u0)))
    return make_report(name or f"pi-round-trip-{pivot.variant}", [t], [res], bound=tol)


def check_pi_consistency(pivot: Pivot, t: float, u0, v0, tol=1e-10, name=None) -> CheckReport:
    """<Pi_t u, v> in the reference pairing equals the pairing of the pushed functions."""
    op = pivot.pi_operator(t)
    lhs = float((op.forward @ u0) @ pivot.reference_gram() @ v0)
    res = abs(lhs - pivot.pairing(t, u0, v0))
    return make_report(name or f"pi-consistency-{pivot.variant}", [t], [res], bound=tol)


@dataclass
class PiNorms:
    times: np.ndarray
    forward: np.ndarray
    inverse: np.ndarray

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.forward)) and np.all(np.isfinite(self.inverse)))


def pi_norms(pivot: Pivot, times) -> PiNorms:
    """Norms of Pi_t and its inverse in the reference pairing norm over a time grid."""
    gram = pivot.reference_gram()
    gram = 0.5 * (gram + gram.T)
    fwd, inv = [], []
    for t in times:
        op = pivot.pi_operator(t)
        fwd.append(_gram_norm(gram, op.forward))
        inv.append(_gram_norm(gram, op.inverse))
    return PiNorms(np.asarray(times, float), np.array(fwd), np.array(inv))


# weak derivative of a computed solution ----------------------------------------

def weak_derivative_residual(config, result) -> float:
    """max over interior steps and basis functions of the characterization defect.

    The discrete pairing (u(t_k), w_j) is (M_k U_k)_j; its central difference
    is compared with <g_k, w_j> + lambda(t_k; u_k, w_j) = (g_k + G_k U_k)_j.
    """
    mesh, free = config.mesh, config.free
    ix = np.ix_(free, free)
    times = result.times
    if result.functional is None:
        raise ValueError("solve with record_functional=True to store g_k")
    worst = 0.0
    pair = [assemble_mass(mesh, t)[ix] @ result.U[k] for k, t in enumerate(times)]
    for k in range(1, len(times) - 1):
        lhs = (pair[k + 1] - pair[k - 1]) / (times[k + 1] - times[k - 1])
        gk = assemble_mass(mesh, times[k], weight=mesh.geometry(times[k]).divergence)[ix]
        rhs = result.functional[k] + gk @ result.U[k]
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
    return worst


def check_weak_derivative_characterization(runs, name="weak-derivative") -> CheckReport:
    """Characterization defect over solves with successively halved steps.

    ``runs`` is a sequence of ``(config, result)``; the defect is the
    scheme's consistency error, so the expected order is at least 1.
    """
    taus = [cfg.tau for cfg, _ in runs]
    res = [weak_derivative_residual(cfg, r) for cfg, r in runs]
    return make_report(name, taus, res, expected=1.0, min_order=True)
