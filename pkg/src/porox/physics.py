"""Porosity models, scaled coefficients, stabilization rules and test cases.

The scaled system solved here is

    u - c2 p + div(c1 p I) = delta g~,
    c3 . u + p + div(c1 u) = f,

with ``c1 = phi^(-1/2) delta``, ``c2 = phi^(-1/2) grad delta`` and
``c3 = 1/2 phi^(-3/2) delta grad phi``.  All builtin models take
``delta = phi`` and supply these coefficients in closed form so that no
``0/0`` is ever formed on the one-phase region ``phi = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class SingularStabilizationError(ValueError):
    """Raised when a stabilization rule would make the HDG system singular."""


@dataclass(frozen=True)
class CoefficientSample:
    c1: np.ndarray  # (N,)
    c2: np.ndarray  # (N, dim)
    c3: np.ndarray  # (N, dim)
    phi: np.ndarray  # (N,)


def _pts(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=float))


class PorosityModel:
    """Porosity ``phi`` with ``delta = d(phi)``.

    Subclasses provide ``phi``, ``grad_phi`` and ``one_phase``; the default
    ``delta`` is ``phi``.  Coefficient groups are computed from the generic
    formulas at two-phase points only and are exactly zero elsewhere.
    """

    dim: int = 2

    def phi(self, x) -> np.ndarray:
        raise NotImplementedError

    def grad_phi(self, x) -> np.ndarray:
        raise NotImplementedError

    def one_phase(self, x) -> np.ndarray:
        return np.zeros(len(_pts(x)), dtype=bool)

    def delta(self, x) -> np.ndarray:
        return self.phi(x)

    def grad_delta(self, x) -> np.ndarray:
        return self.grad_phi(x)

    # generic coefficient formulas; closed-form overrides in subclasses
    def _two_phase_coefficients(self, x):
        phi = self.phi(x)
        gphi = self.grad_phi(x)
        d = self.delta(x)
        gd = self.grad_delta(x)
        s = phi ** -0.5
        return s * d, s[:, None] * gd, 0.5 * (phi ** -1.5 * d)[:, None] * gphi

    def coefficients(self, x) -> CoefficientSample:
        x = _pts(x)
        n = len(x)
        c1 = np.zeros(n)
        c2 = np.zeros((n, self.dim))
        c3 = np.zeros((n, self.dim))
        phi = np.zeros(n)
        two = ~self.one_phase(x)
        if np.any(two):
            xt = x[two]
            a, b, c = self._two_phase_coefficients(xt)
            c1[two], c2[two], c3[two] = a, b, c
            phi[two] = self.phi(xt)
        return CoefficientSample(c1, c2, c3, phi)

    def postprocess_coefficients(self, x):
        """``(phi^(1/2)/delta, grad(phi)/phi, 1/delta, phi^(-1/2))`` at two-phase points."""
        x = _pts(x)
        phi = self.phi(x)
        d = self.delta(x)
        return np.sqrt(phi) / d, self.grad_phi(x) / phi[:, None], 1.0 / d, phi ** -0.5


class ExponentialPorosity(PorosityModel):
    """``phi = exp(2 (x + y [+ z]))``; never degenerate."""

    def __init__(self, dim: int = 2):
        self.dim = dim

    def phi(self, x):
        return np.exp(2.0 * _pts(x).sum(axis=1))

    def grad_phi(self, x):
        return 2.0 * self.phi(x)[:, None] * np.ones((1, self.dim))

    def _two_phase_coefficients(self, x):
        e = np.exp(_pts(x).sum(axis=1))
        ones = np.ones((1, self.dim))
        return e, 2.0 * e[:, None] * ones, e[:, None] * ones

    def postprocess_coefficients(self, x):
        s = _pts(x).sum(axis=1)
        n = len(s)
        return np.exp(-s), np.full((n, self.dim), 2.0), np.exp(-2.0 * s), np.exp(-s)


class CornerPorosity(PorosityModel):
    """``phi = (x+3/4)^alpha (y+3/4)^(2 alpha)``, zero for ``x <= -3/4`` or ``y <= -3/4``."""

    dim = 2

    def __init__(self, alpha: float = 2.0, corner: float = -0.75):
        if alpha < 2:
            raise ValueError("alpha >= 2 is needed for bounded scaled coefficients")
        self.alpha = float(alpha)
        self.corner = float(corner)

    def one_phase(self, x):
        x = _pts(x)
        return (x[:, 0] <= self.corner) | (x[:, 1] <= self.corner)

    def _xy(self, x):
        x = _pts(x)
        return np.maximum(x[:, 0] - self.corner, 0.0), np.maximum(x[:, 1] - self.corner, 0.0)

    def phi(self, x):
        X, Y = self._xy(x)
        return X**self.alpha * Y ** (2 * self.alpha)

    def grad_phi(self, x):
        X, Y = self._xy(x)
        a = self.alpha
        return np.column_stack([a * X ** (a - 1) * Y ** (2 * a), 2 * a * X**a * Y ** (2 * a - 1)])

    def _two_phase_coefficients(self, x):
        X, Y = self._xy(x)
        a = self.alpha
        c1 = X ** (a / 2) * Y**a
        c2 = np.column_stack([a * X ** (a / 2 - 1) * Y**a, 2 * a * X ** (a / 2) * Y ** (a - 1)])
        return c1, c2, 0.5 * c2

    def postprocess_coefficients(self, x):
        X, Y = self._xy(x)
        a = self.alpha
        inv_sqrt = X ** (-a / 2) * Y ** (-a)
        return inv_sqrt, np.column_stack([a / X, 2 * a / Y]), X ** (-a) * Y ** (-2 * a), inv_sqrt


class UnitPorosity(PorosityModel):
    """``phi = delta = 1``: all variable-coefficient terms vanish."""

    def __init__(self, dim: int = 2):
        self.dim = dim

    def phi(self, x):
        return np.ones(len(_pts(x)))

    def grad_phi(self, x):
        return np.zeros((len(_pts(x)), self.dim))

    def _two_phase_coefficients(self, x):
        n = len(_pts(x))
        return np.ones(n), np.zeros((n, self.dim)), np.zeros((n, self.dim))

    def postprocess_coefficients(self, x):
        n = len(_pts(x))
        one = np.ones(n)
        return one, np.zeros((n, self.dim)), one, one


def eval_coefficients(model: PorosityModel, x, domain=None) -> CoefficientSample:
    x = _pts(x)
    if domain is not None:
        box = np.asarray(domain, dtype=float)
        tol = 1e-12
        if np.any(x < box[:, 0] - tol) or np.any(x > box[:, 1] + tol):
            raise ValueError("evaluation point outside the domain")
    return model.coefficients(x)


# ---------------------------------------------------------------------------
# stabilization


@dataclass(frozen=True)
class StabilizationPolicy:
    """How tau is chosen on each face.

    kind: ``upwind`` (tau = c1), ``generalized`` (c1 on two-phase faces,
    gamma on one-phase faces), ``constant`` (tau = value) or
    ``reciprocal_h`` (tau = 1/h).  For ``generalized`` a ``value`` of
    ``None`` means gamma = 1/h.  ``one_sided_interface`` (generalized only)
    makes two-phase elements see tau = 0 on faces shared with one-phase
    elements, while the one-phase side keeps gamma.
    """

    kind: str = "generalized"
    value: float | None = None
    one_sided_interface: bool = False

    def __post_init__(self):
        if self.kind not in ("upwind", "generalized", "constant", "reciprocal_h"):
            raise ValueError(f"unknown stabilization {self.kind!r}")
        if self.kind == "constant" and (self.value is None or self.value <= 0):
            raise ValueError("constant tau needs a positive value")
        if self.kind == "generalized" and self.value is not None and self.value <= 0:
            raise ValueError("gamma must be positive")
        if self.one_sided_interface and self.kind != "generalized":
            raise ValueError("one-sided interface tau applies to the generalized rule only")

    @classmethod
    def upwind(cls):
        return cls("upwind")

    @classmethod
    def generalized(cls, gamma: float | None = None, one_sided_interface: bool = False):
        return cls("generalized", gamma, one_sided_interface)

    @classmethod
    def constant(cls, value: float):
        return cls("constant", float(value))

    @classmethod
    def reciprocal_h(cls):
        return cls("reciprocal_h")

    def label(self) -> str:
        if self.kind == "generalized":
            base = "generalized(1/h)" if self.value is None else f"generalized({self.value:g})"
            return base + ",one-sided" if self.one_sided_interface else base
        if self.kind == "constant":
            return f"constant({self.value:g})"
        return self.kind


def eval_tau(policy: StabilizationPolicy, h: float, c1: np.ndarray,
             face_is_one_phase) -> np.ndarray:
    """Tau at face quadrature points.

    ``c1`` has shape ``(F, nq)`` (or ``(nq,)`` for a single face) and
    ``face_is_one_phase`` the matching ``(F,)`` flags.
    """
    if h <= 0:
        raise ValueError("mesh size must be positive")
    c1 = np.asarray(c1, dtype=float)
    single = c1.ndim == 1
    c1 = np.atleast_2d(c1)
    onep = np.atleast_1d(np.asarray(face_is_one_phase, dtype=bool))
    if policy.kind == "upwind":
        if np.any(onep):
            raise SingularStabilizationError(
                "singular stabilization: upwind tau vanishes on one-phase faces; "
                "use the generalized rule (tau = gamma on phi = 0 faces)")
        tau = c1.copy()
    elif policy.kind == "generalized":
        gamma = 1.0 / h if policy.value is None else policy.value
        tau = np.where(onep[:, None], gamma, c1)
    elif policy.kind == "constant":
        tau = np.full_like(c1, policy.value)
    else:
        tau = np.full_like(c1, 1.0 / h)
    return tau[0] if single else tau


# ---------------------------------------------------------------------------
# flux Jacobian


def _check_normal(n):
    n = np.asarray(n, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-10:
        raise ValueError("normal must have unit length")
    return n


def flux_jacobian(c1: float, n) -> np.ndarray:
    """``c1 [[0, n], [n^T, 0]]`` acting on ``(u, p)``."""
    n = _check_normal(n)
    d = len(n)
    a = np.zeros((d + 1, d + 1))
    a[:d, d] = n
    a[d, :d] = n
    return c1 * a


def flux_jacobian_eigen(c1: float, n):
    """Eigenvalues ``(-c1, 0, ..., 0, c1)`` and the matching eigenvector columns."""
    n = _check_normal(n)
    d = len(n)
    # orthonormal basis of the plane orthogonal to n
    q, _ = np.linalg.qr(np.column_stack([n, np.eye(d)]))
    tang = q[:, 1:d]
    w = np.zeros((d + 1, d + 1))
    w[:d, 0] = -n
    w[d, 0] = 1.0
    w[:d, 1:d] = tang
    w[:d, d] = n
    w[d, d] = 1.0
    lam = np.concatenate([[-c1], np.zeros(d - 1), [c1]])
    return lam, w


def abs_flux_jacobian(c1: float, n) -> np.ndarray:
    lam, w = flux_jacobian_eigen(c1, n)
    return w @ np.diag(np.abs(lam)) @ np.linalg.inv(w)


# ---------------------------------------------------------------------------
# manufactured cases

Field = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ManufacturedCase:
    """Exact scaled fields and forcing for one test problem.

    ``dg`` is the product delta * g~ used on the right-hand side of the
    velocity equation.  Dirichlet data is the exact scaled pressure.
    """

    name: str
    domain: tuple
    model: PorosityModel
    pressure: Field
    velocity: Field
    forcing: Field
    dg: Field
    regularity: str = "smooth"
    params: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return len(self.domain)

    def dirichlet(self, x):
        return self.pressure(x)

    def fluid_pressure(self, x):
        """Exact unscaled pressure ``phi^(-1/2) p`` (zero on the one-phase region)."""
        x = _pts(x)
        out = np.zeros(len(x))
        two = ~self.model.one_phase(x)
        if np.any(two):
            out[two] = self.model.postprocess_coefficients(x[two])[3] * self.pressure(x[two])
        return out

    def one_phase(self, x):
        return self.model.one_phase(x)

    @property
    def degenerate(self) -> bool:
        return not isinstance(self.model, (ExponentialPorosity, UnitPorosity))

    def with_zero_data(self) -> "ManufacturedCase":
        """Same domain and porosity with f, delta g~ and g_D all zero."""
        zero = lambda x: np.zeros(len(_pts(x)))  # noqa: E731
        return ManufacturedCase(f"{self.name}-zero", self.domain, self.model, zero,
                                _zero_vector(self.dim), zero, _zero_vector(self.dim),
                                self.regularity, dict(self.params))

    def two_phase_box(self):
        if isinstance(self.model, CornerPorosity):
            c = self.model.corner
            return tuple((max(lo, c), hi) for lo, hi in self.domain)
        return self.domain


def _masked(model: PorosityModel, fn, vector_dim: int | None = None):
    """Evaluate ``fn`` on two-phase points only, zero elsewhere."""

    def wrapped(x):
        x = _pts(x)
        shape = (len(x),) if vector_dim is None else (len(x), vector_dim)
        out = np.zeros(shape)
        two = ~model.one_phase(x)
        if np.any(two):
            out[two] = fn(x[two])
        return out

    return wrapped


def _forcing(model, p, u, div_u):
    """``f = p + c2 . u + c1 div u`` from closed-form fields."""

    def f(x):
        x = _pts(x)
        c = model.coefficients(x)
        return p(x) + np.einsum("nd,nd->n", c.c2, u(x)) + c.c1 * div_u(x)

    return f


def _zero_vector(dim):
    return lambda x: np.zeros((len(_pts(x)), dim))


def _nondeg(ms):
    dim = len(ms)
    w = np.pi * np.asarray(ms, dtype=float)
    model = ExponentialPorosity(dim)

    def pressure(x):
        x = _pts(x)
        return np.prod(np.sin(w * x), axis=1)

    def velocity(x):
        x = _pts(x)
        e = np.exp(x.sum(axis=1))
        s = np.sin(w * x)
        c = np.cos(w * x)
        cols = []
        for d in range(dim):
            others = np.prod(np.delete(s, d, axis=1), axis=1)
            cols.append(e * others * (s[:, d] - w[d] * c[:, d]))
        return np.column_stack(cols)

    def div_velocity(x):
        x = _pts(x)
        return np.exp(x.sum(axis=1)) * pressure(x) * (dim + np.sum(w**2))

    name = "nondeg2d" if dim == 2 else "nondeg3d"
    return ManufacturedCase(
        name=name,
        domain=tuple((0.0, 1.0) for _ in range(dim)),
        model=model,
        pressure=pressure,
        velocity=velocity,
        forcing=_forcing(model, pressure, velocity, div_velocity),
        dg=_zero_vector(dim),
        params={"m": tuple(ms)},
    )


def _deg_smooth(alpha):
    model = CornerPorosity(alpha)
    a = model.alpha
    c = model.corner

    def parts(x):
        X = x[:, 0] - c
        Y = x[:, 1] - c
        th = 6.0 * x[:, 0] * x[:, 1] ** 2
        return X, Y, th

    def pressure(x):
        X, Y, th = parts(x)
        return X ** (a / 2) * Y**a * np.cos(th)

    def velocity(x):
        X, Y, th = parts(x)
        phi = X**a * Y ** (2 * a)
        s = np.sin(th)
        return np.column_stack([6 * x[:, 1] ** 2 * phi * s, 12 * x[:, 0] * x[:, 1] * phi * s])

    def div_velocity(x):
        X, Y, th = parts(x)
        xx, yy = x[:, 0], x[:, 1]
        phi = X**a * Y ** (2 * a)
        s, co = np.sin(th), np.cos(th)
        dux = 6 * yy**2 * (a * X ** (a - 1) * Y ** (2 * a) * s + phi * co * 6 * yy**2)
        duy = 12 * xx * (phi * s + yy * (2 * a * X**a * Y ** (2 * a - 1) * s + phi * co * 12 * xx * yy))
        return dux + duy

    p = _masked(model, pressure)
    u = _masked(model, velocity, 2)
    f = _masked(model, _forcing(model, pressure, velocity, div_velocity))
    return ManufacturedCase(
        name="degSmooth",
        domain=((-1.0, 1.0), (-1.0, 1.0)),
        model=model,
        pressure=p,
        velocity=u,
        forcing=f,
        dg=_zero_vector(2),
        params={"alpha": a},
    )


def _deg_rough(beta, alpha):
    model = CornerPorosity(alpha)
    a = model.alpha
    c = model.corner
    b = float(beta)

    def pressure(x):
        X = x[:, 0] - c
        Y = x[:, 1] - c
        return x[:, 1] * (x[:, 1] - 3 * x[:, 0]) * X ** (a / 2 + b) * Y**a

    def velocity(x):
        xx, yy = x[:, 0], x[:, 1]
        X, Y = xx - c, yy - c
        ux = yy * (b * (3 * xx - yy) + 3 * X) * X ** (a + b - 1) * Y ** (2 * a)
        uy = (3 * xx - 2 * yy) * X ** (a + b) * Y ** (2 * a)
        return np.column_stack([ux, uy])

    def div_velocity(x):
        xx, yy = x[:, 0], x[:, 1]
        X, Y = xx - c, yy - c
        dux = (yy * (3 * b + 3) * X ** (a + b - 1)
               + yy * (b * (3 * xx - yy) + 3 * X) * (a + b - 1) * X ** (a + b - 2)) * Y ** (2 * a)
        duy = X ** (a + b) * (-2 * Y ** (2 * a) + (3 * xx - 2 * yy) * 2 * a * Y ** (2 * a - 1))
        return dux + duy

    reg = {-0.25: "H^{1.25-eps}", -0.75: "H^{0.75-eps}"}[b]
    return ManufacturedCase(
        name="degRough",
        domain=((-1.0, 1.0), (-1.0, 1.0)),
        model=model,
        pressure=_masked(model, pressure),
        velocity=_masked(model, velocity, 2),
        forcing=_masked(model, _forcing(model, pressure, velocity, div_velocity)),
        dg=_zero_vector(2),
        regularity=reg,
        params={"alpha": a, "beta": b},
    )


def _const_coef(dim=2):
    """phi = delta = 1 with p = x + y and u = -grad p = (-1, -1); g~ = 0, f = p."""
    model = UnitPorosity(dim)

    def pressure(x):
        x = _pts(x)
        return x[:, 0] + x[:, 1]

    def velocity(x):
        return -np.ones((len(_pts(x)), 2))

    return ManufacturedCase(
        name="constcoef",
        domain=((0.0, 1.0), (0.0, 1.0)),
        model=model,
        pressure=pressure,
        velocity=velocity,
        forcing=pressure,  # div u = 0
        dg=_zero_vector(2),
    )


CASE_NAMES = ("nondeg2d", "degSmooth", "degRough", "nondeg3d", "constcoef")


def builtin_case(name: str, **params) -> ManufacturedCase:
    """Catalog lookup.

    nondeg2d(m=(mx, my)), degSmooth(alpha=2), degRough(beta=-1/4 | -3/4,
    alpha=2), nondeg3d(m=(mx, my, mz)), constcoef().
    """
    if name == "nondeg2d":
        m = tuple(params.get("m", (2, 3)))
        if len(m) != 2:
            raise ValueError("nondeg2d needs m = (mx, my)")
        return _nondeg(m)
    if name == "nondeg3d":
        m = tuple(params.get("m", (1, 1, 1)))
        if len(m) != 3:
            raise ValueError("nondeg3d needs m = (mx, my, mz)")
        return _nondeg(m)
    if name == "degSmooth":
        return _deg_smooth(params.get("alpha", 2.0))
    if name == "degRough":
        beta = float(params.get("beta", -0.25))
        if not any(np.isclose(beta, v) for v in (-0.25, -0.75)):
            raise ValueError("beta must be -1/4 or -3/4")
        beta = -0.25 if np.isclose(beta, -0.25) else -0.75
        return _deg_rough(beta, params.get("alpha", 2.0))
    if name == "constcoef":
        return _const_coef()
    raise ValueError(f"unknown case {name!r}; choose from {', '.join(CASE_NAMES)}")


# ---------------------------------------------------------------------------
# residual oracle


def _fd_grad(fn, x, step):
    """Fourth-order central differences of a scalar field, shape (N, dim)."""
    cols = []
    for d in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[d] = step
        cols.append((-fn(x + 2 * e) + 8 * fn(x + e) - 8 * fn(x - e) + fn(x - 2 * e)) / (12 * step))
    return np.column_stack(cols)


def verify_case_residual(case: ManufacturedCase, samples: int = 200, h_probe: float = 0.05,
                         box=None, step: float = 1e-5, seed: int = 0) -> float:
    """Largest pointwise residual of both strong-form equations.

    Derivatives of ``c1 p`` and ``c1 u`` are taken by finite differences
    of the exact closed forms, independently of the derived forcing.
    """
    rng = np.random.default_rng(seed)
    if box is None:
        box = np.asarray(case.two_phase_box(), dtype=float)
        box = np.column_stack([box[:, 0] + h_probe, box[:, 1] - h_probe])
    box = np.asarray(box, dtype=float)
    x = box[:, 0] + (box[:, 1] - box[:, 0]) * rng.random((samples, case.dim))
    model = case.model

    def c1(y):
        return model.coefficients(y).c1

    coef = model.coefficients(x)
    p = case.pressure(x)
    u = case.velocity(x)
    r1 = u - coef.c2 * p[:, None] + _fd_grad(lambda y: c1(y) * case.pressure(y), x, step) - case.dg(x)
    div = np.zeros(len(x))
    for d in range(case.dim):
        div += _fd_grad(lambda y, d=d: c1(y) * case.velocity(y)[:, d], x, step)[:, d]
    r2 = np.einsum("nd,nd->n", coef.c3, u) + p + div - case.forcing(x)
    return float(max(np.abs(r1).max(), np.abs(r2).max()))
