"""L2 error norms, convergence rates and convergence studies."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import hdg, linalg
from .discretization import make_quadrature
from .mesh import Mesh, build_structured_mesh
from .physics import ManufacturedCase, SingularStabilizationError, StabilizationPolicy

log = logging.getLogger(__name__)

FIELDS = ("p", "u", "pstar", "ptilde", "ptildestar")
EXACT = "exact"


class RegionError(ValueError):
    pass


@dataclass(frozen=True)
class Region:
    """Axis-aligned sub-box; ``box=None`` means the whole domain."""

    box: tuple | None = None

    @classmethod
    def parse(cls, spec) -> "Region":
        if spec is None or spec == "all":
            return cls(None)
        box = tuple((float(lo), float(hi)) for lo, hi in spec)
        if any(hi <= lo for lo, hi in box):
            raise RegionError("region bounds must satisfy lo < hi")
        return cls(box)

    def elements(self, mesh: Mesh, tol: float = 1e-12) -> np.ndarray:
        """Indices of the elements inside the region; raises unless element-aligned."""
        if self.box is None:
            return np.arange(mesh.n_elements)
        box = np.asarray(self.box)
        if len(box) != mesh.dim:
            raise RegionError("region dimension does not match the mesh")
        x = mesh.element_coords()
        lo, hi = x.min(axis=1), x.max(axis=1)
        inside = np.all((lo >= box[:, 0] - tol) & (hi <= box[:, 1] + tol), axis=1)
        overlap = np.all((np.minimum(hi, box[:, 1]) - np.maximum(lo, box[:, 0])) > tol, axis=1)
        if np.any(overlap & ~inside):
            raise RegionError(f"region {self.box} is not aligned with the mesh")
        if not np.any(inside):
            raise RegionError(f"region {self.box} contains no elements")
        return np.flatnonzero(inside)

    def label(self) -> str:
        if self.box is None:
            return "all"
        return "x".join(f"[{lo:g},{hi:g}]" for lo, hi in self.box)


def interface_elements(mesh: Mesh, one_phase) -> np.ndarray:
    """Boolean mask of elements whose closure meets both phases."""
    v = mesh.vertices[mesh.elements].reshape(-1, mesh.dim)
    flags = np.asarray(one_phase(v), dtype=bool).reshape(mesh.n_elements, -1)
    return flags.any(axis=1) & ~flags.all(axis=1)


def l2_error(space: hdg.HDGSpace, field_fn: Callable, exact: Callable, elems=None,
             boost: int = 4, extra: np.ndarray | None = None) -> float:
    """``(sum_K int_K |field - exact|^2)^(1/2)`` over the given elements.

    ``field_fn(ref_points, elems)`` returns the discrete values ``(ne, nq)``
    or ``(ne, nq, dim)``; ``exact`` maps physical points ``(N, dim)`` to
    ``(N,)`` or ``(N, dim)``.  The quadrature degree is ``2k + 2 + boost``;
    elements flagged in ``extra`` get two more degrees.
    """
    mesh = space.mesh
    elems = np.arange(mesh.n_elements) if elems is None else np.asarray(elems, dtype=np.int64)
    base = 2 * space.k + 2 + boost
    groups = [(elems, base)]
    if extra is not None:
        flag = np.asarray(extra, dtype=bool)[elems]
        groups = [(elems[~flag], base), (elems[flag], base + 2)]
    total = 0.0
    for sel, deg in groups:
        if len(sel) == 0:
            continue
        quad = make_quadrature(mesh.shape, deg)
        x = space.origin[sel][:, None, :] + np.einsum("eij,qj->eqi", space.jac[sel], quad.points)
        w = space.det[sel][:, None] * quad.weights[None, :]
        vals = np.asarray(field_fn(quad.points, sel), dtype=float)
        ex = np.asarray(exact(x.reshape(-1, mesh.dim)), dtype=float).reshape(vals.shape)
        diff = (vals - ex) ** 2
        if diff.ndim == 3:
            diff = diff.sum(axis=2)
        total += float(np.sum(w * diff))
    return math.sqrt(total)


def element_projection(space: hdg.HDGSpace, fn: Callable) -> np.ndarray:
    """Element-wise L2 projection ``(E, nb)`` of a scalar function onto the nodal space."""
    W = space.vol_weights
    vals = fn(space.vol_points.reshape(-1, space.dim)).reshape(W.shape)
    mass = np.einsum("eq,qa,qb->eab", W, space.B, space.B)
    rhs = np.einsum("eq,qa->ea", W * vals, space.B)
    return np.linalg.solve(mass, rhs[..., None])[..., 0]


def rates(errors: Sequence[float], hs: Sequence[float]) -> list:
    """Rates ``log(e[i-1]/e[i]) / log(h[i-1]/h[i])``; the first entry is ``None``.

    A zero error on either side of a pair yields ``"exact"``.
    """
    if len(errors) != len(hs):
        raise ValueError("errors and mesh sizes differ in length")
    out = [None] * len(errors)
    for i in range(1, len(errors)):
        e0, e1, h0, h1 = errors[i - 1], errors[i], hs[i - 1], hs[i]
        if e0 is None or e1 is None:
            continue
        if h1 >= h0:
            raise ValueError("mesh sizes must decrease strictly")
        if e0 < 0 or e1 < 0:
            raise ValueError("errors must be non-negative")
        if e0 == 0 or e1 == 0:
            out[i] = EXACT
        else:
            out[i] = math.log(e0 / e1) / math.log(h0 / h1)
    return out


@dataclass
class TableRow:
    k: int
    n: int
    h: float
    errors: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)
    failed: str | None = None


@dataclass
class ConvergenceTable:
    fields: tuple
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def compute_rates(self) -> None:
        for k in sorted({r.k for r in self.rows}):
            rows = [r for r in self.rows if r.k == k]
            for f in self.fields:
                errs = [None if r.failed else r.errors.get(f) for r in rows]
                rr = rates(errs, [r.h for r in rows])
                for row, v in zip(rows, rr):
                    row.rates[f] = v

    def column(self, k: int, name: str, kind: str = "errors") -> list:
        return [getattr(r, kind).get(name) for r in self.rows if r.k == k]

    def header(self) -> list[str]:
        cols = ["k", "h"]
        for f in self.fields:
            cols += [f"err_{f}", f"rate_{f}"]
        return cols

    def csv_rows(self) -> list[list[str]]:
        out = []
        for r in self.rows:
            line = [str(r.k), f"{r.h:.6g}"]
            for f in self.fields:
                if r.failed:
                    line += ["FAILED", ""]
                    continue
                e = r.errors.get(f)
                rate = r.rates.get(f)
                line.append("" if e is None else f"{e:.3e}")
                if rate is None:
                    line.append("")
                elif rate == EXACT:
                    line.append(EXACT)
                else:
                    line.append(f"{rate:.3f}")
            out.append(line)
        return out

    def format(self) -> str:
        lines = [",".join(self.header())] + [",".join(r) for r in self.csv_rows()]
        return "\n".join(lines) + "\n"


def compute_errors(solution: hdg.HDGSolution, fields: Sequence[str], regions: dict | None = None,
                   boost: int = 4) -> dict:
    """L2 errors of the requested fields.  ``regions`` maps field name to a ``Region``."""
    regions = regions or {}
    space = solution.space
    case = solution.case
    mesh = space.mesh
    extra = interface_elements(mesh, case.model.one_phase) if case.regularity != "smooth" else None
    out = {}
    for f in fields:
        if f not in FIELDS:
            raise ValueError(f"unknown field {f!r}; choose from {', '.join(FIELDS)}")
        elems = regions.get(f, Region()).elements(mesh)
        if f == "p":
            val = l2_error(space, lambda q, e: solution.evaluate(q, e)[0], case.pressure, elems, boost, extra)
        elif f == "u":
            val = l2_error(space, lambda q, e: solution.evaluate(q, e)[1], case.velocity, elems, boost, extra)
        elif f == "ptilde":
            def ptilde(q, e):
                x = space.origin[e][:, None, :] + np.einsum("eij,qj->eqi", space.jac[e], q)
                return hdg.recover_unscaled(solution, x, e)[0]
            val = l2_error(space, ptilde, case.fluid_pressure, elems, boost, extra)
        else:
            pp = (hdg.post_process_scaled if f == "pstar" else hdg.post_process_fluid)(solution, elems)
            lookup = np.full(mesh.n_elements, -1)
            lookup[pp.elems] = np.arange(len(pp.elems))

            def star(q, e, pp=pp, lookup=lookup):
                return pp.evaluate(q)[lookup[e]]
            exact = case.pressure if f == "pstar" else case.fluid_pressure
            val = l2_error(space, star, exact, elems, boost, extra)
        out[f] = val
    return out


SOLVER_ERRORS = (linalg.SingularMatrixError, SingularStabilizationError, hdg.AlignmentError,
                 np.linalg.LinAlgError, FloatingPointError)


def run_study(case: ManufacturedCase, ks: Sequence[int], ns: Sequence[int],
              policy: StabilizationPolicy | None = None, regions: dict | None = None,
              fields: Sequence[str] = ("p", "u"), shape: str | None = None,
              boost: int = 4, progress: Callable | None = None) -> ConvergenceTable:
    """Solve every ``(k, n)`` pair and tabulate errors and rates.

    Rows are ordered by ``k`` then ``n``; a solver failure marks its row as
    failed and the study continues.
    """
    policy = policy or StabilizationPolicy.generalized()
    shape = shape or ("hex" if case.dim == 3 else "quad")
    table = ConvergenceTable(tuple(fields), meta={"case": case.name, "policy": policy.label(),
                                                  "shape": shape})
    meshes = {}
    for k in ks:
        for n in sorted(ns):
            mesh = meshes.get(n) or meshes.setdefault(n, build_structured_mesh(case.domain, shape, n))
            row = TableRow(k, n, mesh.spacing)
            try:
                sol = hdg.solve(hdg.HDGSpace(mesh, k), case, policy=policy)
                row.errors = compute_errors(sol, fields, regions, boost)
            except SOLVER_ERRORS as exc:
                row.failed = f"{type(exc).__name__}: {exc}"
                log.warning("k=%d n=%d failed: %s", k, n, row.failed)
            table.rows.append(row)
            if progress:
                progress(row)
    table.compute_rates()
    return table
