"""Flow maps of a velocity field and the geometric quantities derived from them.

The position ODE d/dt X = w(t, X) and the variational equation
d/dt F = Dw(t, X) F (F the spatial Jacobian of the flow) are integrated
together with the classical fourth-order Runge-Kutta method on a uniform
grid.  Queries from time 0 use ``ceil(substeps * horizon)`` steps whatever
the end time, so the discrete flow is a smooth function of t and finite
differences in t are free of step-count jumps.  Other spans use
``ceil(substeps * |t1 - t0|)`` steps.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateFlowError, IntegrationError, InversionError
from .fields import VelocityField


@dataclass(frozen=True)
class GeometrySample:
    position: np.ndarray
    jac: np.ndarray
    jdet: float
    metric: np.ndarray
    metric_det: float


class FlowMap:
    """Flow of ``field`` on [0, horizon].

    ``tolerance`` is the accuracy promised by :func:`inverse_flow` and used
    as the reference scale for round-trip checks.
    """

    def __init__(self, field: VelocityField, horizon: float = 1.0,
                 substeps: int = 64, tolerance: float = 1e-10):
        if substeps < 1:
            raise ValueError("substeps must be positive")
        self.field = field
        self.horizon = float(horizon)
        self.substeps = int(substeps)
        self.tolerance = float(tolerance)

    @property
    def dim(self) -> int:
        return self.field.dim

    def _check_time(self, t):
        if t < -1e-12 or t > self.horizon + 1e-12:
            raise ValueError(f"time {t} outside [0, {self.horizon}]")

    def _rhs(self, t, x, f):
        v = self.field(t, x)
        dv = self.field.jacobian(t, x)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(dv))):
            bad = np.argwhere(~np.isfinite(v))
            where = x[tuple(bad[0][:-1])] if bad.size else x
            raise IntegrationError(t, np.array(where))
        return v, dv @ f

    def integrate(self, points, t0: float, t1: float, substeps: int | None = None,
                  steps: int | None = None):
        """Carry ``points`` (shape (..., d)) from time t0 to t1.

        Returns the end positions and the Jacobians d X(t1) / d X(t0).
        """
        x = np.array(points, dtype=float)
        f = np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()
        span = t1 - t0
        if span == 0.0:
            return x, f
        if steps is None:
            per_unit = self.substeps if substeps is None else substeps
            steps = math.ceil(per_unit * abs(span) - 1e-9)
        n = max(1, steps)
        dt = span / n
        for k in range(n):
            t = t0 + k * dt
            k1x, k1f = self._rhs(t, x, f)
            k2x, k2f = self._rhs(t + 0.5 * dt, x + 0.5 * dt * k1x, f + 0.5 * dt * k1f)
            k3x, k3f = self._rhs(t + 0.5 * dt, x + 0.5 * dt * k2x, f + 0.5 * dt * k2f)
            k4x, k4f = self._rhs(t + dt, x + dt * k3x, f + dt * k3f)
            x = x + (dt / 6.0) * (k1x + 2.0 * k2x + 2.0 * k3x + k4x)
            f = f + (dt / 6.0) * (k1f + 2.0 * k2f + 2.0 * k3f + k4f)
        return x, f

    def forward(self, points, t: float):
        """Positions and Jacobians of the map p -> Phi(t; p) from time 0."""
        self._check_time(t)
        return self.integrate(points, 0.0, t, steps=self.forward_steps)

    @property
    def forward_steps(self) -> int:
        return max(1, math.ceil(self.substeps * self.horizon - 1e-9))

    def trajectory(self, points, times):
        """March ``points`` through the sorted, nonnegative ``times``.

        Returns a dict ``t -> (X, F)``; each interval is integrated from the
        previous grid time, so the result depends only on the grid.
        """
        out = {}
        x = np.array(points, dtype=float)
        f = np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()
        prev = 0.0
        for t in sorted(set(float(s) for s in times)):
            self._check_time(t)
            x, df = self.integrate(x, prev, t)
            f = df @ f
            out[t] = (x, f)
            prev = t
        return out

    def jacobian_bound(self, points, times, tangents=None) -> float:
        """C_J with J in [1/C_J, C_J] over the given points and times."""
        lo, hi = 1.0, 1.0
        for t in times:
            j = evolve_points(self, points, t, tangents)["jdet"]
            lo = min(lo, float(np.min(j)))
            hi = max(hi, float(np.max(j)))
        return max(hi, 1.0 / lo)


def _curve_metric(jac, tangent):
    tau = np.asarray(tangent, dtype=float)
    tau = tau / np.linalg.norm(tau, axis=-1, keepdims=True)
    nu = np.stack([tau[..., 1], -tau[..., 0]], axis=-1)
    nn = nu[..., :, None] * nu[..., None, :]
    proj = np.eye(2) - nn
    dg = jac @ proj
    return np.swapaxes(dg, -1, -2) @ dg + nn


def evolve_points(flow: FlowMap, points, t: float, tangents=None) -> dict:
    """Vectorised :func:`evolve_point`.  Returns a dict of stacked arrays."""
    x, jac = flow.forward(points, t)
    if tangents is None:
        metric = np.swapaxes(jac, -1, -2) @ jac
        det = np.linalg.det(jac)
        jdet = np.abs(det)
        if np.any(det <= 0.0):
            raise DegenerateFlowError(f"det of flow Jacobian {det.min():.3e} <= 0 at t={t}")
        metric_det = np.linalg.det(metric)
    else:
        metric = _curve_metric(jac, tangents)
        metric_det = np.linalg.det(metric)
        if np.any(metric_det <= 0.0):
            raise DegenerateFlowError(f"curve metric determinant <= 0 at t={t}")
        jdet = np.sqrt(metric_det)
    return {"position": x, "jac": jac, "jdet": jdet, "metric": metric, "metric_det": metric_det}


def evolve_point(flow: FlowMap, p, t: float, tangent=None) -> GeometrySample:
    """Position, Jacobian, Jacobian determinant and metric of the flow at p.

    For curves pass the reference unit ``tangent`` at p; the metric is then
    the rank-completed (D_g Phi)^T D_g Phi + nu nu^T and the determinant is
    the tangential stretch.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    s = evolve_points(flow, p[None, :], t, None if tangent is None else np.asarray(tangent)[None, :])
    return GeometrySample(
        position=s["position"][0],
        jac=s["jac"][0],
        jdet=float(s["jdet"][0]),
        metric=s["metric"][0],
        metric_det=float(s["metric_det"][0]),
    )


def inverse_flow(flow: FlowMap, x, t: float, max_refinements: int = 4):
    """Reference point p with Phi(t; p) = x, by reverse-time integration."""
    flow._check_time(t)
    x = np.array(x, dtype=float)
    pts = x.reshape(-1, flow.dim)
    substeps = flow.substeps
    worst = np.inf
    for _ in range(max_refinements + 1):
        p, _ = flow.integrate(pts, t, 0.0, substeps)
        back, _ = flow.integrate(p, 0.0, t, substeps)
        err = np.linalg.norm(back - pts, axis=-1)
        worst = float(np.max(err / (1.0 + np.linalg.norm(pts, axis=-1))))
        if worst <= flow.tolerance:
            return p.reshape(x.shape)
        substeps *= 2
    raise InversionError(f"inverse flow residual {worst:.3e} exceeds tolerance {flow.tolerance:.1e}")


def deformation_tensor(field: VelocityField, x, t: float, tangent=None):
    """H = (div w) Id - (D w + D w^T); tangential quantities if ``tangent`` is given."""
    x = np.asarray(x, dtype=float)
    dw = field.jacobian(t, x)
    if tangent is not None:
        tau = np.asarray(tangent, dtype=float)
        tau = tau / np.linalg.norm(tau, axis=-1, keepdims=True)
        dw = dw @ (tau[..., :, None] * tau[..., None, :])
    div = np.trace(dw, axis1=-2, axis2=-1)
    eye = np.eye(field.dim)
    return div[..., None, None] * eye - (dw + np.swapaxes(dw, -1, -2))


def inverse_metric_density(flow: FlowMap, p, t: float):
    """The matrix J (D Phi)^{-1} (D Phi)^{-T} at p (ambient quantities)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    s = evolve_point(flow, p, t)
    inv = np.linalg.inv(s.jac)
    return s.jdet * inv @ inv.T


def metric_time_derivative(flow: FlowMap, p, t: float):
    """Closed-form time derivative of :func:`inverse_metric_density`.

    d/dt [J F^{-1} F^{-T}] = (div w)(X) J F^{-1} F^{-T} - J F^{-1} (Dw + Dw^T)(X) F^{-T}
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    s = evolve_point(flow, p, t)
    if abs(np.linalg.det(s.jac)) < 1e-300:
        raise DegenerateFlowError(f"singular flow Jacobian at t={t}")
    inv = np.linalg.inv(s.jac)
    dw = flow.field.jacobian(t, s.position)
    div = np.trace(dw)
    dens = s.jdet * inv @ inv.T
    return div * dens - s.jdet * inv @ (dw + dw.T) @ inv.T
