"""Catalog of velocity fields w(t, x) driving the evolving geometry.

Every field is vectorised over leading axes: ``x`` has shape ``(..., d)``,
``field(t, x)`` returns ``(..., d)`` and ``field.jacobian(t, x)`` returns
``(..., d, d)`` with ``jac[..., i, j] = d w_i / d x_j``.
"""
from __future__ import annotations

import numpy as np

CATALOG = (
    "zero",
    "translation",
    "dilation",
    "radial-circle",
    "rotating-circle",
    "user-polynomial",
)


def _perp(x):
    return np.stack([-x[..., 1], x[..., 0]], axis=-1)


class VelocityField:
    """Base class.  Subclasses implement ``__call__`` and ``jacobian``."""

    name = "abstract"
    #: sup over space and time of |tangential divergence|, when known analytically
    divergence_bound: float | None = None

    def __init__(self, dim: int):
        if dim not in (1, 2):
            raise ValueError(f"dimension must be 1 or 2, got {dim}")
        self.dim = dim

    @property
    def kind(self) -> str:
        return "ambient-1d" if self.dim == 1 else "planar-curve"

    def __call__(self, t, x):
        raise NotImplementedError

    def jacobian(self, t, x):
        raise NotImplementedError

    def divergence(self, t, x, tangent=None):
        """Ambient divergence, or the tangential one when ``tangent`` is given."""
        if tangent is None:
            return self._ambient_divergence(t, x)
        return self._tangential_divergence(t, x, tangent)

    # Analytic overrides are optional; these defaults use the Jacobian.
    def _ambient_divergence(self, t, x):
        return np.trace(self.jacobian(t, x), axis1=-2, axis2=-1)

    def _tangential_divergence(self, t, x, tangent):
        tau = np.asarray(tangent, dtype=float)
        jac = self.jacobian(t, x)
        return np.einsum("...i,...ij,...j->...", tau, jac, tau) / np.sum(tau * tau, axis=-1)

    def __repr__(self):
        return f"{type(self).__name__}(dim={self.dim})"


class ZeroField(VelocityField):
    name = "zero"
    divergence_bound = 0.0

    def __call__(self, t, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))


class Translation(VelocityField):
    name = "translation"
    divergence_bound = 0.0

    def __init__(self, velocity):
        c = np.atleast_1d(np.asarray(velocity, dtype=float))
        super().__init__(c.size)
        self.velocity = c

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.velocity, x.shape).copy()

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape + (self.dim,))

    def _ambient_divergence(self, t, x):
        return np.zeros(np.asarray(x).shape[:-1])

    def _tangential_divergence(self, t, x, tangent):
        return np.zeros(np.asarray(x).shape[:-1])


class Dilation(VelocityField):
    """w = alpha * x."""

    name = "dilation"

    def __init__(self, alpha: float, dim: int = 1):
        super().__init__(dim)
        self.alpha = float(alpha)
        self.divergence_bound = abs(self.alpha)

    def __call__(self, t, x):
        return self.alpha * np.asarray(x, dtype=float)

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.alpha * np.broadcast_to(np.eye(self.dim), x.shape + (self.dim,)).copy()

    def _ambient_divergence(self, t, x):
        return np.full(np.asarray(x).shape[:-1], self.dim * self.alpha)

    def _tangential_divergence(self, t, x, tangent):
        return np.full(np.asarray(x).shape[:-1], self.alpha)


class RotatingCircle(VelocityField):
    """w = m(t) (rate x + omega x_perp) with m(t) = cos(frequency * t).

    Circles centred at the origin stay circles; ``omega`` only moves
    material along them.  With ``omega = 0`` this is the radial-circle field,
    so a rotating and a radial field with equal rate and frequency share
    their normal velocity on every such circle.
    """

    name = "rotating-circle"

    def __init__(self, rate: float = 0.5, omega: float = 1.0, frequency: float = 0.0):
        super().__init__(2)
        self.rate = float(rate)
        self.omega = float(omega)
        self.frequency = float(frequency)
        self.divergence_bound = abs(self.rate)

    def modulation(self, t):
        return np.cos(self.frequency * t)

    def rho(self, t):
        return self.rate * self.modulation(t)

    def spin(self, t):
        return self.omega * self.modulation(t)

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return self.rho(t) * x + self.spin(t) * _perp(x)

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        m = np.array([[self.rho(t), -self.spin(t)], [self.spin(t), self.rho(t)]])
        return np.broadcast_to(m, x.shape + (2,)).copy()

    def _ambient_divergence(self, t, x):
        return np.full(np.asarray(x).shape[:-1], 2.0 * self.rho(t))

    def _tangential_divergence(self, t, x, tangent):
        # the rotation part is antisymmetric and drops out of tau^T Dw tau
        return np.full(np.asarray(x).shape[:-1], self.rho(t))


class RadialCircle(RotatingCircle):
    name = "radial-circle"

    def __init__(self, rate: float = 0.5, frequency: float = 0.0):
        super().__init__(rate=rate, omega=0.0, frequency=frequency)


class UserPolynomial(VelocityField):
    """w(t, x) = (1 + time_rate * t) * P(x) with a polynomial P.

    In 1-D ``coefficients`` lists c_0, c_1, ... so P(x) = sum c_k x^k.
    In 2-D it is a sequence of monomials ``(i, j, cx, cy)`` meaning
    P(x, y) += (cx, cy) * x**i * y**j.
    """

    name = "user-polynomial"

    def __init__(self, coefficients, time_rate: float = 0.0, dim: int = 1):
        super().__init__(dim)
        self.time_rate = float(time_rate)
        if dim == 1:
            self.coefficients = np.asarray(coefficients, dtype=float).ravel()
            self.monomials = [((k,), (c,)) for k, c in enumerate(self.coefficients)]
        else:
            self.monomials = [((int(i), int(j)), (float(cx), float(cy)))
                              for i, j, cx, cy in coefficients]
        if not self.monomials:
            raise ValueError("user-polynomial needs at least one coefficient")

    def _factor(self, t):
        return 1.0 + self.time_rate * t

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for powers, coef in self.monomials:
            mono = np.ones(x.shape[:-1])
            for axis, k in enumerate(powers):
                mono = mono * x[..., axis] ** k
            out = out + mono[..., None] * np.asarray(coef)
        return self._factor(t) * out

    def jacobian(self, t, x):
        x = np.asarray(x, dtype=float)
        d = self.dim
        out = np.zeros(x.shape + (d,))
        for powers, coef in self.monomials:
            for j in range(d):
                if powers[j] == 0:
                    continue
                deriv = np.full(x.shape[:-1], float(powers[j]))
                for axis, k in enumerate(powers):
                    deriv = deriv * x[..., axis] ** (k - 1 if axis == j else k)
                out[..., :, j] += deriv[..., None] * np.asarray(coef)
        return self._factor(t) * out


def make_field(name: str, **params) -> VelocityField:
    """Build a catalog field by name.

    Parameters per name: ``translation(velocity)``, ``dilation(alpha, dim)``,
    ``radial-circle(rate, frequency)``, ``rotating-circle(rate, omega,
    frequency)``, ``user-polynomial(coefficients, time_rate, dim)``,
    ``zero(dim)``.
    """
    if name == "zero":
        return ZeroField(params.pop("dim", 1))
    if name == "translation":
        return Translation(params["velocity"])
    if name == "dilation":
        return Dilation(params["alpha"], params.get("dim", 1))
    if name == "radial-circle":
        return RadialCircle(params.get("rate", 0.5), params.get("frequency", 0.0))
    if name == "rotating-circle":
        return RotatingCircle(params.get("rate", 0.5), params.get("omega", 1.0),
                              params.get("frequency", 0.0))
    if name == "user-polynomial":
        return UserPolynomial(params["coefficients"], params.get("time_rate", 0.0),
                              params.get("dim", 1))
    raise ValueError(f"unknown velocity field {name!r}; catalog: {', '.join(CATALOG)}")
