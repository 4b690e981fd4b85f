"""Galerkin time stepping for u' + A(t)u + lambda-term = f on transported P1 spaces.

The operator is A(t)u = alpha u|u|^(p-2) - div((|grad u|^2 + eps^2)^((p-2)/2) grad u)
on the carried geometry.  Time stepping uses the conservative product form

    (M(t_{k+1}) U_{k+1} - M(t_k) U_k) / tau + A(t_{k+1}; U_{k+1}) = F(t_{k+1}),

which is implicit Euler for B U' + A(U) + G U = F with G the L2 lambda
matrix: the mass difference carries the G term exactly.  Intervals use zero
boundary values, closed curves the full space.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DivergedStateError, NonconvergenceError
from .mesh import (GAUSS_WEIGHTS, INTERVAL, SHAPE, EvolvingMesh, Geometry, assemble_load,
                   assemble_mass, assemble_stiffness, linear_solve, mass_matrix, slopes,
                   stiffness_matrix, values_at_quadrature)
from .rng import Lcg

KINDS = ("linear-diffusion", "p-laplace")


@dataclass(frozen=True)
class OperatorSpec:
    kind: str = "linear-diffusion"
    p: float = 2.0
    alpha: float = 0.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}")
        if not self.p > 1.0:
            raise ValueError(f"exponent p must exceed 1, got {self.p}")
        if self.kind == "linear-diffusion" and self.p != 2.0:
            raise ValueError("linear diffusion has p = 2")
        if self.alpha < 0.0:
            raise ValueError("alpha must be nonnegative")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be nonnegative")
        if self.epsilon == 0.0 and self.p < 2.0:
            raise ValueError("epsilon = 0 needs p >= 2 (the flux is not differentiable at 0)")

    @property
    def linear(self) -> bool:
        return self.p == 2.0


def time_grid(T: float, N: int):
    return [k * T / N for k in range(N + 1)]


@dataclass
class ProblemConfig:
    mesh: EvolvingMesh
    operator: OperatorSpec
    T: float
    N: int
    forcing: Callable | None = None      # f(t, x) on carried points
    initial: Callable | np.ndarray | None = None   # u0(x) on the reference, or full coefficients
    newton_tol: float = 1e-12
    newton_maxit: int = 25
    record_functional: bool = False

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not self.newton_tol > 0.0:
            raise ValueError("Newton tolerance must be positive")

    @property
    def tau(self) -> float:
        return self.T / self.N

    @property
    def times(self):
        return time_grid(self.T, self.N)

    @property
    def free(self):
        return self.mesh.reference.free_nodes(True)


@dataclass
class SolveResult:
    times: list
    free: np.ndarray
    n_nodes: int
    U: np.ndarray                 # (N+1, n_free)
    mass: np.ndarray
    hnorm2: np.ndarray
    xp: np.ndarray                # running tau * sum ||u_k||_X^p
    newton_iters: np.ndarray      # (N,)
    newton_history: list = field(default_factory=list)
    functional: np.ndarray | None = None   # g_k = F - A(U_k) - G U_k on free nodes

    def full(self, k):
        out = np.zeros(self.n_nodes)
        out[self.free] = self.U[k]
        return out


# operator evaluation -------------------------------------------------------

def _flux_coefficient(spec: OperatorSpec, g):
    if spec.linear:
        return np.ones_like(g)
    return (g * g + spec.epsilon**2) ** ((spec.p - 2.0) / 2.0)


def _flux_derivative(spec: OperatorSpec, g):
    if spec.linear:
        return np.ones_like(g)
    if spec.epsilon == 0.0:
        return (spec.p - 1.0) * np.abs(g) ** (spec.p - 2.0)
    s = g * g + spec.epsilon**2
    return s ** ((spec.p - 4.0) / 2.0) * ((spec.p - 1.0) * g * g + spec.epsilon**2)


def _zeroth_coefficient(spec: OperatorSpec, u):
    """|u|^(p-2), regularised like the flux when p < 2."""
    if spec.p >= 2.0:
        return np.abs(u) ** (spec.p - 2.0)
    return (u * u + spec.epsilon**2) ** ((spec.p - 2.0) / 2.0)


def _zeroth_derivative(spec: OperatorSpec, u):
    if spec.p >= 2.0:
        return (spec.p - 1.0) * np.abs(u) ** (spec.p - 2.0)
    s = u * u + spec.epsilon**2
    return s ** ((spec.p - 4.0) / 2.0) * ((spec.p - 1.0) * u * u + spec.epsilon**2)


def _residual_on(spec: OperatorSpec, geo: Geometry, elements, n, u_full):
    g = slopes(geo, elements, u_full)
    flux = _flux_coefficient(spec, g) * g
    out = np.zeros(n)
    np.add.at(out, elements, np.stack([-flux, flux], axis=1))
    if spec.alpha != 0.0:
        uq = _at_quadrature(elements, u_full)
        z = spec.alpha * _zeroth_coefficient(spec, uq) * uq
        local = np.einsum("q,eq,qi->ei", GAUSS_WEIGHTS, z, SHAPE) * geo.lengths[:, None]
        np.add.at(out, elements, local)
    if not np.all(np.isfinite(out)):
        raise DivergedStateError(f"non-finite operator value at t={geo.t}")
    return out


def _at_quadrature(elements, u_full):
    return u_full[elements] @ SHAPE.T


def nonlinear_residual(spec: OperatorSpec, mesh: EvolvingMesh, t: float, U):
    """Vector <A(t) u, phi_j> for the P1 function with full nodal coefficients U."""
    u = np.asarray(U, float)
    if spec.linear:
        out = assemble_stiffness(mesh, t) @ u
        if spec.alpha != 0.0:
            out = out + spec.alpha * (assemble_mass(mesh, t) @ u)
        if not np.all(np.isfinite(out)):
            raise DivergedStateError(f"non-finite operator value at t={t}")
        return out
    ref = mesh.reference
    return _residual_on(spec, mesh.geometry(t), ref.elements, ref.n_nodes, u)


def operator_jacobian(spec: OperatorSpec, mesh: EvolvingMesh, t: float, U):
    ref = mesh.reference
    geo = mesh.geometry(t)
    u = np.asarray(U, float)
    d = ref.dim
    dc = _flux_derivative(spec, slopes(geo, ref.elements, u))
    tensor = np.broadcast_to(dc[:, None, None, None] * np.eye(d), (len(dc), 3, d, d))
    jac = stiffness_matrix(geo, ref.elements, ref.n_nodes, tensor)
    if spec.alpha != 0.0:
        uq = values_at_quadrature(ref, u)
        w = spec.alpha * _zeroth_derivative(spec, uq)
        jac = jac + mass_matrix(geo, ref.elements, ref.n_nodes, w)
    return jac


def _picard_matrix(spec: OperatorSpec, mesh: EvolvingMesh, t: float, U):
    ref = mesh.reference
    geo = mesh.geometry(t)
    d = ref.dim
    c = _flux_coefficient(spec, slopes(geo, ref.elements, U))
    tensor = np.broadcast_to(c[:, None, None, None] * np.eye(d), (len(c), 3, d, d))
    mat = stiffness_matrix(geo, ref.elements, ref.n_nodes, tensor)
    if spec.alpha != 0.0:
        uq = values_at_quadrature(ref, U)
        mat = mat + mass_matrix(geo, ref.elements, ref.n_nodes,
                                spec.alpha * _zeroth_coefficient(spec, uq))
    return mat


# norms and constants -------------------------------------------------------

def x_norm_p(mesh: EvolvingMesh, t: float, u_full, p: float, kind: str = "full") -> float:
    """integral of |u|^p + |grad u|^p (kind 'full') or of |grad u|^p only ('gradient')."""
    geo = mesh.geometry(t)
    els = mesh.reference.elements
    total = np.sum(geo.lengths * np.abs(slopes(geo, els, u_full)) ** p)
    if kind == "full":
        uq = _at_quadrature(els, u_full)
        total += np.sum(geo.lengths * np.einsum("q,eq->e", GAUSS_WEIGHTS, np.abs(uq) ** p))
    return float(total)


@dataclass(frozen=True)
class Coercivity:
    """<A u, u> >= c_strong * ||u||_X^p - c_shift * |domain| for the named norm."""

    c_strong: float
    c_shift: float
    norm: str


def coercivity_constants(spec: OperatorSpec, mesh: EvolvingMesh) -> Coercivity:
    # regularisation costs at most eps^p per unit length and per term when p < 2
    shift = (1.0 + spec.alpha) * spec.epsilon**spec.p if spec.p < 2.0 else 0.0
    if spec.alpha > 0.0:
        return Coercivity(min(spec.alpha, 1.0), shift, "full")
    if mesh.topology == INTERVAL:
        return Coercivity(1.0, shift, "gradient")
    # constants are in the kernel on a closed curve: only the trivial bound
    return Coercivity(0.0, 0.0, "gradient")


# time stepping --------------------------------------------------------------

@dataclass
class StepInfo:
    iterations: int
    history: list


class _Stepper:
    def __init__(self, config: ProblemConfig):
        self.cfg = config
        self.mesh = config.mesh
        self.free = config.free
        self.tridiagonal = self.mesh.topology == INTERVAL
        self.ix = np.ix_(self.free, self.free)

    def load(self, t):
        if self.cfg.forcing is None:
            return np.zeros(self.mesh.reference.n_nodes)
        return assemble_load(self.mesh, t, self.cfg.forcing)

    def full(self, u_free):
        out = np.zeros(self.mesh.reference.n_nodes)
        out[self.free] = u_free
        return out

    def advance(self, u, t0, t1):
        # tau from the config, not t1 - t0, so a static mesh reproduces the fixed-domain path
        cfg, spec, tau = self.cfg, self.cfg.operator, self.cfg.tau
        m0 = assemble_mass(self.mesh, t0)[self.ix]
        m1 = assemble_mass(self.mesh, t1)[self.ix]
        rhs = m0 @ u + tau * self.load(t1)[self.free]
        scale = max(1.0, float(np.max(np.abs(rhs))))
        target = cfg.newton_tol * scale

        def residual(v):
            a = nonlinear_residual(spec, self.mesh, t1, self.full(v))[self.free]
            return m1 @ v + tau * a - rhs

        if spec.linear:
            k1 = assemble_stiffness(self.mesh, t1)[self.ix]
            mat = m1 + tau * (k1 + spec.alpha * m1)
            v = linear_solve(mat, rhs, self.tridiagonal)
            return v, StepInfo(1, [float(np.max(np.abs(residual(v))))])

        v = u.copy()
        r = residual(v)
        norm = float(np.max(np.abs(r)))
        history = [norm]
        iterations = 0
        while norm > target:
            if iterations >= cfg.newton_maxit:
                raise NonconvergenceError(f"Newton stalled at t={t1}", norm)
            iterations += 1
            jac = m1 + tau * operator_jacobian(spec, self.mesh, t1, self.full(v))[self.ix]
            dv = linear_solve(jac, -r, self.tridiagonal)
            step, accepted = 1.0, False
            for _ in range(9):
                trial = v + step * dv
                rt = residual(trial)
                nt = float(np.max(np.abs(rt)))
                if nt < norm:
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                mat = m1 + tau * _picard_matrix(spec, self.mesh, t1, self.full(v))[self.ix]
                trial = linear_solve(mat, rhs, self.tridiagonal)
                rt = residual(trial)
                nt = float(np.max(np.abs(rt)))
            v, r, norm = trial, rt, nt
            history.append(norm)
        return v, StepInfo(iterations, history)


def project_initial(mesh: EvolvingMesh, initial, zero_boundary=True):
    """Reference L2 projection of u0 onto the free nodes (full coefficients are restricted)."""
    free = mesh.reference.free_nodes(zero_boundary)
    if initial is None:
        return np.zeros(len(free))
    if not callable(initial):
        arr = np.asarray(initial, dtype=float)
        return arr[free] if len(arr) == mesh.reference.n_nodes else arr
    m0 = assemble_mass(mesh, 0.0)[np.ix_(free, free)]
    b = assemble_load(mesh, 0.0, lambda t, x: initial(x))[free]
    return linear_solve(m0, b, mesh.topology == INTERVAL)


def step(config: ProblemConfig, U_k, t_k: float):
    """One step from t_k to t_k + tau; returns the new free-node coefficients."""
    v, _ = _Stepper(config).advance(np.asarray(U_k, float), t_k, t_k + config.tau)
    return v


def solve(config: ProblemConfig) -> SolveResult:
    stepper = _Stepper(config)
    mesh = config.mesh
    times = config.times
    spec = config.operator
    coer = coercivity_constants(spec, mesh)
    free = config.free
    u = project_initial(mesh, config.initial)
    U = [u]
    iters, hist = [], []
    for k in range(config.N):
        u, info = stepper.advance(u, times[k], times[k + 1])
        U.append(u)
        iters.append(info.iterations)
        hist.append(info.history)
    U = np.array(U)
    mass, hnorm2, xp = [], [], []
    acc = 0.0
    for k, t in enumerate(times):
        uf = stepper.full(U[k])
        m = assemble_mass(mesh, t)
        mass.append(float(np.sum(m @ uf)))
        hnorm2.append(float(uf @ m @ uf))
        if k > 0:
            acc += config.tau * x_norm_p(mesh, t, uf, spec.p, coer.norm)
        xp.append(acc)
    functional = None
    if config.record_functional:
        functional = np.array([residual_functional(config, t, stepper.full(U[k]))
                               for k, t in enumerate(times)])
    return SolveResult(times, free, mesh.reference.n_nodes, U, np.array(mass),
                       np.array(hnorm2), np.array(xp), np.array(iters), hist, functional)


def residual_functional(config: ProblemConfig, t, u_full):
    """g = F - A(u) - G u on the free nodes: the weak time derivative of the solution."""
    mesh, free = config.mesh, config.free
    f = np.zeros(mesh.reference.n_nodes) if config.forcing is None else \
        assemble_load(mesh, t, config.forcing)
    g = assemble_mass(mesh, t, weight=mesh.geometry(t).divergence)
    return (f - nonlinear_residual(config.operator, mesh, t, u_full) - g @ u_full)[free]


def solve_fixed_domain(config: ProblemConfig) -> SolveResult:
    """Classical implicit Euler on the undeformed reference mesh.

    For p = 2 this is the textbook (M + tau (K + alpha M)) U_{k+1} = M U_k + tau F
    recursion with matrices assembled once; other exponents reuse the
    Newton solver on a static mesh.
    """
    static = EvolvingMesh(config.mesh.reference)
    cfg = ProblemConfig(static, config.operator, config.T, config.N, config.forcing,
                        config.initial, config.newton_tol, config.newton_maxit,
                        config.record_functional)
    if not config.operator.linear:
        return solve(cfg)
    free = cfg.free
    ix = np.ix_(free, free)
    tri = static.topology == INTERVAL
    m = assemble_mass(static, 0.0)[ix]
    k = assemble_stiffness(static, 0.0)[ix]
    tau, alpha = cfg.tau, cfg.operator.alpha
    mat = m + tau * (k + alpha * m)
    u = project_initial(static, cfg.initial)
    U = [u]
    for t in cfg.times[1:]:
        f = np.zeros(static.reference.n_nodes) if cfg.forcing is None else \
            assemble_load(static, t, cfg.forcing)
        rhs = m @ u + tau * f[free]
        u = linear_solve(mat, rhs, tri)
        U.append(u)
    U = np.array(U)
    full = np.zeros((len(U), static.reference.n_nodes))
    full[:, free] = U
    mfull = assemble_mass(static, 0.0)
    mass = np.array([np.sum(mfull @ x) for x in full])
    hn = np.array([x @ mfull @ x for x in full])
    return SolveResult(cfg.times, free, static.reference.n_nodes, U, mass, hn,
                       np.zeros(len(U)), np.ones(cfg.N, dtype=int), [])


# diagnostics ----------------------------------------------------------------

def energy_certificate(config: ProblemConfig, result: SolveResult):
    """Left and right sides of the discrete energy estimate at every step.

    With delta_k = max_e max(0, L_e(t_k)/L_e(t_{k+1}) - 1) the scheme gives

        S_{k+1} <= (S_k + 2 tau (c_shift |domain| + F.U_{k+1})) / (1 - delta_k),

    where S_k = ||U_k||^2_{M(t_k)} + 2 tau C_c sum_{m<=k} ||u_m||_X^p.  Returns
    the arrays (S, R) with R the recursively propagated right side.
    """
    mesh, spec, tau = config.mesh, config.operator, config.tau
    coer = coercivity_constants(spec, mesh)
    times = result.times
    stepper = _Stepper(config)
    lhs, rhs = [result.hnorm2[0]], [result.hnorm2[0]]
    acc = 0.0
    for k in range(config.N):
        t1 = times[k + 1]
        l0, l1 = mesh.geometry(times[k]).lengths, mesh.geometry(t1).lengths
        delta = max(0.0, float(np.max(l0 / l1 - 1.0)))
        uf = result.full(k + 1)
        acc += 2.0 * tau * coer.c_strong * x_norm_p(mesh, t1, uf, spec.p, coer.norm)
        lhs.append(result.hnorm2[k + 1] + acc)
        work = stepper.load(t1) @ uf + coer.c_shift * mesh.measure(t1)
        rhs.append((rhs[-1] + 2.0 * tau * work) / (1.0 - delta))
    return np.array(lhs), np.array(rhs)


def divergence_sup(mesh: EvolvingMesh, times) -> float:
    """sup |div w| from the catalog when known, else from the discrete divergences."""
    if mesh.flow is None:
        return 0.0
    bound = mesh.flow.field.divergence_bound
    if bound is not None:
        return float(bound)
    return max(float(np.max(np.abs(mesh.geometry(t).divergence))) for t in times)


@dataclass
class StabilityTable:
    times: list
    difference: np.ndarray
    bound: np.ndarray
    ratio: np.ndarray
    c_w: float


def stability_experiment(config: ProblemConfig, u0a, u0b) -> StabilityTable:
    """||u_a - u_b||_{H(t_k)} against exp(C_w t_k / 2) ||u_a(0) - u_b(0)||_{H_0}."""
    from dataclasses import replace
    ra = solve(replace(config, initial=u0a))
    rb = solve(replace(config, initial=u0b))
    mesh, free = config.mesh, config.free
    ix = np.ix_(free, free)
    c_w = divergence_sup(mesh, config.times)
    diff = []
    for k, t in enumerate(config.times):
        d = ra.U[k] - rb.U[k]
        diff.append(math.sqrt(max(0.0, float(d @ assemble_mass(mesh, t)[ix] @ d))))
    diff = np.array(diff)
    bound = np.exp(0.5 * c_w * np.array(config.times)) * diff[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        ratio = np.where(bound > 0.0, diff / np.where(bound > 0.0, bound, 1.0), 0.0)
    return StabilityTable(config.times, diff, bound, ratio, c_w)


def monotonicity_witness(spec: OperatorSpec, mesh: EvolvingMesh, t: float, pairs=100,
                         seed=7, scale=1.0):
    """Smallest <A u - A v, u - v> and smallest coercivity slack over random samples.

    The coercivity slack is divided by max(1, <A u, u>): when the bound is an
    identity (alpha = 0, p >= 2) it is pure rounding at the scale of <A u, u>.
    """
    free = mesh.reference.free_nodes(True)
    n = mesh.reference.n_nodes
    rng = Lcg(seed)
    coer = coercivity_constants(spec, mesh)
    mono, coercive = np.inf, np.inf
    for _ in range(pairs):
        u = np.zeros(n)
        v = np.zeros(n)
        u[free] = rng.uniform(len(free), -scale, scale)
        v[free] = rng.uniform(len(free), -scale, scale)
        au = nonlinear_residual(spec, mesh, t, u)
        av = nonlinear_residual(spec, mesh, t, v)
        mono = min(mono, float((au - av) @ (u - v)))
        lower = coer.c_strong * x_norm_p(mesh, t, u, spec.p, coer.norm) \
            - coer.c_shift * mesh.measure(t)
        energy = float(au @ u)
        coercive = min(coercive, (energy - lower) / max(1.0, abs(energy)))
    return mono, coercive


# manufactured solutions and convergence -------------------------------------

def manufactured_heat(alpha: float, a: float = 0.0, b: float = 1.0):
    """Exact solution of u' - u_xx + u div w = f on the dilating interval.

    With s = exp(alpha t), the domain is (a s, b s) and
    u = exp(-t) sin(pi (x/s - a)/(b - a)); its derivative along the flow is -u,
    so f = (-1 + alpha + (pi / ((b - a) s))^2) u.
    """
    width = b - a

    def exact(t, x):
        s = math.exp(alpha * t)
        return math.exp(-t) * np.sin(np.pi * (x[..., 0] / s - a) / width)

    def forcing(t, x):
        s = math.exp(alpha * t)
        return (-1.0 + alpha + (np.pi / (width * s)) ** 2) * exact(t, x)

    def initial(x):
        return exact(0.0, x)

    return exact, forcing, initial


def l2_error(mesh: EvolvingMesh, t: float, u_full, exact) -> float:
    geo = mesh.geometry(t)
    uq = _at_quadrature(mesh.reference.elements, u_full)
    err = uq - exact(t, geo.quad_points)
    return float(math.sqrt(np.sum(geo.lengths * np.einsum("q,eq->e", GAUSS_WEIGHTS, err**2))))


@dataclass
class EocTable:
    h: np.ndarray
    tau: np.ndarray
    error: np.ndarray
    order: np.ndarray     # nan for the first level


def convergence_study(configs, exact, refine="space") -> EocTable:
    """L2 errors at the final time over a refinement family and their EOCs.

    ``refine`` selects the denominator of the observed order: 'space' uses
    the element size h, 'time' the step tau.
    """
    hs, taus, errs = [], [], []
    for cfg in configs:
        res = solve(cfg)
        errs.append(l2_error(cfg.mesh, cfg.T, res.full(cfg.N), exact))
        hs.append(float(np.max(cfg.mesh.reference.lengths())))
        taus.append(cfg.tau)
    errs = np.array(errs)
    base = np.array(hs if refine == "space" else taus)
    order = np.full(len(errs), np.nan)
    order[1:] = np.log(errs[:-1] / errs[1:]) / np.log(base[:-1] / base[1:])
    return EocTable(np.array(hs), np.array(taus), errs, order)


def newton_tail_order(history, floor=1e-13) -> float:
    """Observed order of the last three Newton residuals above ``floor``.

    Residuals at round-off say nothing about the local rate, so they are
    dropped first; nan when fewer than three remain.
    """
    r = [x for x in history if x > floor]
    if len(r) < 3:
        return math.nan
    return math.log(r[-1] / r[-2]) / math.log(r[-2] / r[-3])
