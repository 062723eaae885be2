"""Reference elements, polynomial bases, quadrature rules and affine maps.

Quadrilaterals and hexahedra use tensor-product ``Q^k`` Lagrange bases on
Gauss-Lobatto nodes over ``[-1, 1]^dim``.  Triangles use ``P^k`` Lagrange
bases on warp-and-blend nodes over the unit triangle
``{x, y >= 0, x + y <= 1}``, built from the orthonormal Dubiner basis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil

import math

import numpy as np
from numpy.polynomial import legendre as npleg
from scipy import special

SHAPES = ("segment", "quad", "hex", "tri")
MAX_ORDER = 10

_SHAPE_DIM = {"segment": 1, "quad": 2, "hex": 3, "tri": 2}


def shape_dim(shape: str) -> int:
    try:
        return _SHAPE_DIM[shape]
    except KeyError:
        raise ValueError(f"unsupported shape {shape!r}") from None


def face_shape(shape: str) -> str:
    """Shape of the faces of an element of the given shape."""
    return {"quad": "segment", "tri": "segment", "hex": "quad"}[shape]


# ---------------------------------------------------------------------------
# one-dimensional building blocks


def gauss_lobatto_nodes(k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(1)
    if k == 1:
        return np.array([-1.0, 1.0])
    interior = npleg.legroots(npleg.legder([0] * k + [1]))
    return np.concatenate(([-1.0], np.sort(interior.real), [1.0]))


def _normalized_legendre(x: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal Legendre polynomials on [-1, 1] and their derivatives."""
    x = np.asarray(x, dtype=float)
    vals = npleg.legvander(x, k)
    ders = np.empty_like(vals)
    for j in range(k + 1):
        c = np.zeros(k + 1)
        c[j] = 1.0
        ders[..., j] = npleg.legval(x, npleg.legder(c))
    scale = np.sqrt((2 * np.arange(k + 1) + 1) / 2.0)
    return vals * scale, ders * scale


class Lagrange1D:
    """Nodal basis of degree ``k`` on ``[-1, 1]`` through the given nodes."""

    def __init__(self, nodes: np.ndarray):
        self.nodes = np.asarray(nodes, dtype=float)
        self.k = len(self.nodes) - 1
        vand, _ = _normalized_legendre(self.nodes, self.k)
        self._inv = np.linalg.inv(vand)

    def eval(self, x):
        vals, _ = _normalized_legendre(np.asarray(x, dtype=float), self.k)
        return vals @ self._inv

    def deriv(self, x):
        _, ders = _normalized_legendre(np.asarray(x, dtype=float), self.k)
        return ders @ self._inv


# ---------------------------------------------------------------------------
# simplex helpers (Dubiner basis, warp & blend nodes)


def _jacobi_p(x, alpha, beta, n):
    return special.eval_jacobi(n, alpha, beta, x)


def _jacobi_norm(alpha, beta, n):
    # squared L2 norm of P_n^{(alpha, beta)} with weight (1-x)^alpha (1+x)^beta
    from math import gamma

    return (
        2 ** (alpha + beta + 1)
        / (2 * n + alpha + beta + 1)
        * gamma(n + alpha + 1)
        * gamma(n + beta + 1)
        / (gamma(n + alpha + beta + 1) * gamma(n + 1))
    )


def _grad_jacobi(x, alpha, beta, n):
    if n == 0:
        return np.zeros_like(x)
    return 0.5 * (n + alpha + beta + 1) * _jacobi_p(x, alpha + 1, beta + 1, n - 1)


def _dubiner(r, s, k):
    """Orthonormal basis on the biunit triangle and its (r, s) derivatives.

    Returns arrays of shape (npts, nbasis).  Ordering: (i, j) with
    ``i + j <= k``, ``i`` outer.
    """
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(np.abs(s - 1.0) > 1e-14, 2.0 * (1.0 + r) / (1.0 - s) - 1.0, -1.0)
    b = s
    cols, dr, ds = [], [], []
    for i in range(k + 1):
        hi = _jacobi_p(a, 0, 0, i) / np.sqrt(_jacobi_norm(0, 0, i))
        dhi = _grad_jacobi(a, 0, 0, i) / np.sqrt(_jacobi_norm(0, 0, i))
        for j in range(k + 1 - i):
            nj = np.sqrt(_jacobi_norm(2 * i + 1, 0, j))
            hj = _jacobi_p(b, 2 * i + 1, 0, j) / nj
            dhj = _grad_jacobi(b, 2 * i + 1, 0, j) / nj
            # factor sqrt(2) makes the basis orthonormal on the biunit triangle
            val = np.sqrt(2.0) * hi * hj * (1.0 - b) ** i
            cols.append(val)
            # derivatives via chain rule through the collapsed coordinates
            fa = dhi * hj
            if i > 0:
                fa = fa * (0.5 * (1.0 - b)) ** (i - 1)
            gb = dhj * (0.5 * (1.0 - b)) ** i
            if i > 0:
                gb = gb - 0.5 * i * hj * (0.5 * (1.0 - b)) ** (i - 1)
            d_r = fa
            d_s = fa * (1.0 + a) / 2.0 + hi * gb
            scale = np.sqrt(2.0) * 2.0**i
            dr.append(scale * d_r)
            ds.append(scale * d_s)
    return np.stack(cols, axis=-1), np.stack(dr, axis=-1), np.stack(ds, axis=-1)


def _warp_factor(k, rout):
    """Warp function of the warp & blend construction on one edge."""
    lgl = gauss_lobatto_nodes(k)
    req = np.linspace(-1.0, 1.0, k + 1)
    lag = Lagrange1D(req)
    warp = lag.eval(rout) @ (lgl - req)
    zerof = np.abs(rout) < 1.0 - 1e-10
    sf = 1.0 - (zerof * rout) ** 2
    return warp / sf + warp * (zerof - 1)


_ALPHA_OPT = [0.0, 0.0, 1.4152, 0.1001, 0.2751, 0.98, 1.0999, 1.2832, 1.3648,
              1.4773, 1.4959, 1.5743, 1.577, 1.6223, 1.6258]


def warp_blend_nodes(k: int) -> np.ndarray:
    """Warp & blend interpolation nodes on the biunit triangle."""
    if k == 0:
        return np.array([[-1.0 / 3.0, -1.0 / 3.0]])
    alpha = _ALPHA_OPT[k - 1] if k < 16 else 5.0 / 3.0
    l1, l2, l3 = [], [], []
    for n in range(k + 1):
        for m in range(k + 1 - n):
            l1.append(n / k)
            l3.append(m / k)
    l1 = np.array(l1)
    l3 = np.array(l3)
    l2 = 1.0 - l1 - l3
    x = -l2 + l3
    y = (-l2 - l3 + 2 * l1) / np.sqrt(3.0)
    blend1 = 4 * l2 * l3
    blend2 = 4 * l1 * l3
    blend3 = 4 * l1 * l2
    warpf1 = _warp_factor(k, l3 - l2)
    warpf2 = _warp_factor(k, l1 - l3)
    warpf3 = _warp_factor(k, l2 - l1)
    warp1 = blend1 * warpf1 * (1 + (alpha * l1) ** 2)
    warp2 = blend2 * warpf2 * (1 + (alpha * l2) ** 2)
    warp3 = blend3 * warpf3 * (1 + (alpha * l3) ** 2)
    x = x + warp1 + np.cos(2 * np.pi / 3) * warp2 + np.cos(4 * np.pi / 3) * warp3
    y = y + np.sin(2 * np.pi / 3) * warp2 + np.sin(4 * np.pi / 3) * warp3
    # equilateral -> biunit right triangle
    L1 = (np.sqrt(3.0) * y + 1.0) / 3.0
    L2 = (-3.0 * x - np.sqrt(3.0) * y + 2.0) / 6.0
    L3 = (3.0 * x - np.sqrt(3.0) * y + 2.0) / 6.0
    r = -L2 + L3 - L1
    s = -L2 - L3 + L1
    return np.column_stack([r, s])


# ---------------------------------------------------------------------------
# quadrature


@dataclass(frozen=True)
class QuadratureRule:
    shape: str
    degree: int
    points: np.ndarray
    weights: np.ndarray

    def __len__(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def make_quadrature(shape: str, degree: int) -> QuadratureRule:
    """Quadrature exact for polynomials of total degree ``degree``.

    Tensor Gauss-Legendre on the segment, quad and hex reference cells;
    collapsed Gauss-Jacobi on the unit triangle.
    """
    dim = shape_dim(shape)
    if degree < 0 or degree > 200:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = max(1, ceil((degree + 1) / 2))
    x, w = npleg.leggauss(n)
    if shape == "tri":
        xb, wb = special.roots_jacobi(n, 1.0, 0.0)
        a, b = np.meshgrid(x, xb, indexing="ij")
        wa, wbb = np.meshgrid(w, wb, indexing="ij")
        px = (1.0 + a) * (1.0 - b) / 4.0
        py = (1.0 + b) / 2.0
        pts = np.column_stack([px.ravel(), py.ravel()])
        wts = (wa * wbb).ravel() / 8.0
    else:
        grids = np.meshgrid(*([x] * dim), indexing="ij")
        wgrids = np.meshgrid(*([w] * dim), indexing="ij")
        # x fastest, matching the basis ordering
        pts = np.column_stack([g.transpose().ravel() for g in grids])
        wts = np.prod([g.transpose().ravel() for g in wgrids], axis=0)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(shape, degree, pts, wts)


# ---------------------------------------------------------------------------
# reference elements


@dataclass(frozen=True, eq=False)
class ReferenceElement:
    """Nodal Lagrange basis of order ``k`` on a reference shape.

    ``eval(points)`` returns an ``(npts, nbasis)`` table and ``grad(points)``
    a ``(dim, npts, nbasis)`` table of reference derivatives.
    """

    shape: str
    k: int
    nodes: np.ndarray = field(repr=False)
    _line: Lagrange1D | None = field(default=None, repr=False)
    _tri_inv: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return shape_dim(self.shape)

    @property
    def nbasis(self) -> int:
        return len(self.nodes)

    def eval(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shape == "tri":
            vals, _, _ = _dubiner(2 * pts[:, 0] - 1, 2 * pts[:, 1] - 1, self.k)
            return vals @ self._tri_inv
        tabs = [self._line.eval(pts[:, d]) for d in range(self.dim)]
        return _tensor(tabs)

    def grad(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self.shape == "tri":
            _, dr, ds = _dubiner(2 * pts[:, 0] - 1, 2 * pts[:, 1] - 1, self.k)
            return np.stack([2 * dr @ self._tri_inv, 2 * ds @ self._tri_inv])
        vals = [self._line.eval(pts[:, d]) for d in range(self.dim)]
        ders = [self._line.deriv(pts[:, d]) for d in range(self.dim)]
        out = []
        for d in range(self.dim):
            tabs = [ders[j] if j == d else vals[j] for j in range(self.dim)]
            out.append(_tensor(tabs))
        return np.stack(out)


def _tensor(tabs: list[np.ndarray]) -> np.ndarray:
    """Row-wise Kronecker product with the first factor varying fastest."""
    out = tabs[0]
    for t in tabs[1:]:
        out = (t[:, :, None] * out[:, None, :]).reshape(len(t), -1)
    return out


@lru_cache(maxsize=None)
def make_reference_element(shape: str, k: int) -> ReferenceElement:
    if shape not in SHAPES:
        raise ValueError(f"unsupported shape {shape!r}")
    if not 0 <= k <= MAX_ORDER:
        raise ValueError(f"unsupported order {k}; need 0 <= k <= {MAX_ORDER}")
    if shape == "tri":
        rs = warp_blend_nodes(k)
        vand, _, _ = _dubiner(rs[:, 0], rs[:, 1], k)
        nodes = (rs + 1.0) / 2.0
        nodes.setflags(write=False)
        return ReferenceElement(shape, k, nodes, _tri_inv=np.linalg.inv(vand))
    line = Lagrange1D(gauss_lobatto_nodes(k))
    dim = shape_dim(shape)
    grids = np.meshgrid(*([line.nodes] * dim), indexing="ij")
    nodes = np.column_stack([g.transpose().ravel() for g in grids])
    nodes.setflags(write=False)
    return ReferenceElement(shape, k, nodes, _line=line)


# FaceSpace is the same object restricted to face shapes.
FaceSpace = ReferenceElement


def make_face_space(elem_shape: str, k: int) -> ReferenceElement:
    return make_reference_element(face_shape(elem_shape), k)


class ModalBasis:
    """Orthogonal basis of the total-degree space P^k whose first function is 1.

    Used by the local post-processing, where the constant mode must be
    identifiable to impose the mean constraint.  On quads and hexes it keeps
    the Legendre products of total degree <= k.
    """

    def __init__(self, shape: str, k: int):
        self.shape = shape
        self.k = k
        self.dim = shape_dim(shape)
        digits = np.indices((k + 1,) * self.dim).reshape(self.dim, -1)[::-1]  # first factor fastest
        self._keep = np.flatnonzero(digits.sum(axis=0) <= k)

    def _scaled(self, pts):
        if self.shape == "tri":
            vals, dr, ds = _dubiner(2 * pts[:, 0] - 1, 2 * pts[:, 1] - 1, self.k)
            c = vals[:, :1].mean()
            return vals / c, np.stack([2 * dr / c, 2 * ds / c])
        vals1 = [npleg.legvander(pts[:, d], self.k) for d in range(self.dim)]
        ders1 = []
        for d in range(self.dim):
            cols = []
            for j in range(self.k + 1):
                c = np.zeros(self.k + 1)
                c[j] = 1.0
                cols.append(npleg.legval(pts[:, d], npleg.legder(c)))
            ders1.append(np.stack(cols, axis=-1))
        vals = _tensor(vals1)
        grads = []
        for d in range(self.dim):
            grads.append(_tensor([ders1[j] if j == d else vals1[j] for j in range(self.dim)]))
        return vals[:, self._keep], np.stack(grads)[:, :, self._keep]

    @property
    def nbasis(self) -> int:
        return math.comb(self.k + self.dim, self.dim)

    def eval(self, points) -> np.ndarray:
        return self._scaled(np.atleast_2d(np.asarray(points, dtype=float)))[0]

    def grad(self, points) -> np.ndarray:
        return self._scaled(np.atleast_2d(np.asarray(points, dtype=float)))[1]


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class AffineMap:
    """``x = origin + jac @ xi`` for a batch of elements."""

    origin: np.ndarray  # (E, dim)
    jac: np.ndarray  # (E, dim, dim)

    @property
    def det(self) -> np.ndarray:
        return np.linalg.det(self.jac)

    @property
    def inv(self) -> np.ndarray:
        return np.linalg.inv(self.jac)


def element_map(shape: str, coords: np.ndarray) -> AffineMap:
    """Affine map of each element from its vertex coordinates ``(E, nv, dim)``.

    Quads and hexes must be axis aligned; their map is diagonal.
    """
    coords = np.asarray(coords, dtype=float)
    if shape == "tri":
        origin = coords[:, 0]
        jac = np.stack([coords[:, 1] - coords[:, 0], coords[:, 2] - coords[:, 0]], axis=-1)
    else:
        lo = coords.min(axis=1)
        hi = coords.max(axis=1)
        origin = 0.5 * (lo + hi)
        jac = np.zeros(lo.shape + (lo.shape[-1],))
        idx = np.arange(lo.shape[-1])
        jac[:, idx, idx] = 0.5 * (hi - lo)
    emap = AffineMap(origin, jac)
    if np.any(emap.det <= 0):
        raise ValueError("degenerate element geometry (|det J| <= 0)")
    return emap


def physical_map(shape: str, coords: np.ndarray, ref_points: np.ndarray):
    """Map reference points onto a batch of elements.

    Returns ``(points (E, npts, dim), det (E,), inv_jac (E, dim, dim))``;
    physical gradients are ``inv_jac.T @ reference gradients``.
    """
    emap = element_map(shape, coords)
    pts = emap.origin[:, None, :] + np.einsum("eij,qj->eqi", emap.jac, np.asarray(ref_points))
    return pts, emap.det, emap.inv


def reference_measure(shape: str) -> float:
    return {"segment": 2.0, "quad": 4.0, "hex": 8.0, "tri": 0.5}[shape]
