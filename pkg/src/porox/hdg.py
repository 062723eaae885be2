"""HDG discretization of the scaled degenerate elliptic system.

Per element ``K`` the local unknowns are ordered ``(u_1, ..., u_dim, p)``,
each block holding ``nb`` nodal coefficients.  The trace ``p_hat`` lives on
every face; interior-face traces are the global unknowns, boundary traces
are fixed by the tau-weighted projection of the Dirichlet data.

Local equations (for all test functions ``v``, ``q``)::

    (u, v) - (c2 p, v) - (c1 p, div v) + <c1 p_hat, v.n>          = (dg, v)
    (p, q) + (c3.u, q) - (c1 u, grad q) + <c1 u.n + tau (p - p_hat), q> = (f, q)

with ``p_hat = g_D`` on boundary faces, closed by the conservation
condition ``-<[[c1 u.n + tau (p - p_hat)]], mu> = 0`` on interior faces.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import linalg
from .discretization import (
    ModalBasis,
    element_map,
    face_shape,
    make_face_space,
    make_quadrature,
    make_reference_element,
    reference_measure,
)
from .mesh import Mesh, check_interface_alignment, face_one_phase, element_one_phase
from .physics import ManufacturedCase, StabilizationPolicy, eval_tau

log = logging.getLogger(__name__)

MONOLITHIC_MAX_ELEMENTS = 512
_CHUNK_BUDGET = 6_000_000  # doubles per element chunk


class AlignmentError(ValueError):
    pass


def _pattern_tables(ref, ref_pts: np.ndarray, decimals: int = 10):
    """Deduplicate per-element reference point sets and tabulate the basis once per pattern."""
    e, nl, nq, d = ref_pts.shape
    pts = ref_pts.reshape(e * nl, nq * d)
    # rounding only identifies patterns; tables use the unrounded points
    _, first, inv = np.unique(np.round(pts, decimals), axis=0, return_index=True, return_inverse=True)
    tables = np.stack([ref.eval(pts[i].reshape(nq, d)) for i in first])
    return tables, inv.reshape(e, nl)


class HDGSpace:
    """Mesh + polynomial order + quadrature, with all geometric tables.

    The object is immutable after construction and shared by every
    solve on the same mesh and order.
    """

    def __init__(self, mesh: Mesh, k: int, quad_degree: int | None = None):
        if k < 0:
            raise ValueError("order must be non-negative")
        self.mesh = mesh
        self.k = k
        self.dim = mesh.dim
        self.quad_degree = 2 * k + 4 if quad_degree is None else quad_degree
        self.ref = make_reference_element(mesh.shape, k)
        self.fspace = make_face_space(mesh.shape, k)
        self.nb = self.ref.nbasis
        self.nfb = self.fspace.nbasis
        self.nlf = mesh.element_faces.shape[1]
        self.nloc = (self.dim + 1) * self.nb
        self.nface_loc = self.nlf * self.nfb

        self.vquad = make_quadrature(mesh.shape, self.quad_degree)
        self.fquad = make_quadrature(face_shape(mesh.shape), self.quad_degree)
        self.B = self.ref.eval(self.vquad.points)  # (nq, nb)
        self.dB = self.ref.grad(self.vquad.points)  # (dim, nq, nb)
        self.Lam = self.fspace.eval(self.fquad.points)  # (nqf, nfb)

        emap = element_map(mesh.shape, mesh.element_coords())
        self.origin = emap.origin
        self.jac = emap.jac
        self.det = emap.det
        self.inv_jac = emap.inv
        self.vol_points = self.origin[:, None, :] + np.einsum("eij,qj->eqi", self.jac, self.vquad.points)
        self.vol_weights = self.det[:, None] * self.vquad.weights[None, :]

        # elements sharing a Jacobian share physical gradient tables
        key = np.round(self.inv_jac.reshape(len(self.inv_jac), -1), 12)
        ukeys, self.group = np.unique(key, axis=0, return_inverse=True)
        self.group = self.group.ravel()
        self.grad_tables = [np.einsum("ji,jqb->iqb", u.reshape(self.dim, self.dim), self.dB) for u in ukeys]

        self.face_points = mesh.face_points(self.fquad.points)  # (F, nqf, dim)
        self.face_weights = (mesh.face_measure / reference_measure(face_shape(mesh.shape)))[:, None] \
            * self.fquad.weights[None, :]
        ef = mesh.element_faces
        xf = self.face_points[ef]  # (E, nlf, nqf, dim)
        ref_pts = np.einsum("eij,elqj->elqi", self.inv_jac, xf - self.origin[:, None, None, :])
        self.trace_tables, self.trace_pattern = _pattern_tables(self.ref, ref_pts)
        self.normals = mesh.normal_sign()[:, :, None] * mesh.face_normal[ef]  # (E, nlf, dim)

        # interior-face trace numbering
        interior = ~mesh.face_boundary
        self.face_dof_start = np.full(mesh.n_faces, -1, dtype=np.int64)
        self.face_dof_start[interior] = np.arange(interior.sum()) * self.nfb
        self.n_trace = int(interior.sum()) * self.nfb
        start = self.face_dof_start[ef]  # (E, nlf)
        ldof = start[:, :, None] + np.arange(self.nfb)[None, None, :]
        ldof[start < 0] = -1
        self.local_trace_dofs = ldof.reshape(len(ef), -1)

        order = np.argsort(self.group, kind="stable")
        per = max(1, _CHUNK_BUDGET // (self.nloc * (self.nloc + 3 * self.nface_loc + 1)))
        self.chunks = []
        for g in range(len(ukeys)):
            ids = order[self.group[order] == g]
            for s in range(0, len(ids), per):
                self.chunks.append(ids[s:s + per])

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    def face_mass(self, weights: np.ndarray) -> np.ndarray:
        """``(F, nfb, nfb)`` face mass matrices with pointwise weights ``(F, nqf)``."""
        return np.einsum("fq,qa,qb->fab", weights * self.face_weights, self.Lam, self.Lam)

    def project_to_faces(self, fn, faces, weights=None) -> np.ndarray:
        """Weighted L2 projection of ``fn`` onto the face space of the given faces."""
        faces = np.asarray(faces, dtype=np.int64)
        if len(faces) == 0:
            return np.zeros((0, self.nfb))
        pts = self.face_points[faces]
        vals = fn(pts.reshape(-1, self.dim)).reshape(len(faces), -1)
        w = np.ones_like(vals) if weights is None else weights
        mass = np.einsum("fq,qa,qb->fab", w * self.face_weights[faces], self.Lam, self.Lam)
        rhs = np.einsum("fq,qa->fa", w * vals * self.face_weights[faces], self.Lam)
        return np.linalg.solve(mass, rhs[..., None])[..., 0]


@dataclass
class FaceData:
    """Per-face coefficient and stabilization values at face quadrature points."""

    c1: np.ndarray  # (F, nqf)
    tau: np.ndarray  # (F, nqf)
    one_phase: np.ndarray  # (F,)
    g_d: np.ndarray  # (F, nqf), zero on interior faces
    tau_off: np.ndarray | None = None  # (E, nlf), element sides that see tau = 0

    def side_tau(self, elems, lf, faces) -> np.ndarray:
        """Tau seen from local face ``lf`` of each element."""
        tau = self.tau[faces]
        if self.tau_off is None:
            return tau
        return tau * ~self.tau_off[elems, lf][:, None]


def face_data(space: HDGSpace, case: ManufacturedCase, policy: StabilizationPolicy) -> FaceData:
    mesh = space.mesh
    pts = space.face_points.reshape(-1, space.dim)
    c1 = case.model.coefficients(pts).c1.reshape(mesh.n_faces, -1)
    onep = face_one_phase(mesh, case.model.one_phase)
    # c1 vanishes identically on faces inside the closed one-phase region
    c1[onep] = 0.0
    tau = eval_tau(policy, mesh.spacing, c1, onep)
    g = np.zeros_like(c1)
    bnd = mesh.face_boundary
    g[bnd] = case.dirichlet(space.face_points[bnd].reshape(-1, space.dim)).reshape(int(bnd.sum()), -1)
    tau_off = None
    if policy.one_sided_interface:
        two = ~element_one_phase(mesh, case.model.one_phase)
        tau_off = (onep & ~mesh.face_boundary)[mesh.element_faces] & two[:, None]
    return FaceData(c1, tau, onep, g, tau_off)


@dataclass
class LocalBlocks:
    """Element blocks of one chunk.

    ``K x + B lam = r`` are the local equations and ``C x + D lam`` the
    element's contribution to the conservation rows of its faces.
    Columns/rows of boundary faces in ``B``, ``C`` and ``D`` are zero.
    """

    elems: np.ndarray
    K: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    r: np.ndarray


def assemble_local(space: HDGSpace, case: ManufacturedCase, fdata: FaceData, elems,
                   tau_sign: float = 1.0) -> LocalBlocks:
    """Element matrices for a batch of elements sharing a Jacobian.

    ``tau_sign`` exists for fault-injection tests only.
    """
    elems = np.asarray(elems, dtype=np.int64)
    mesh = space.mesh
    dim, nb, nfb = space.dim, space.nb, space.nfb
    ne = len(elems)
    nq = len(space.vquad)
    grp = space.group[elems]
    if np.any(grp != grp[0]):
        raise ValueError("elements of one batch must share a Jacobian")
    G = space.grad_tables[grp[0]]  # (dim, nq, nb)
    B = space.B

    x = space.vol_points[elems].reshape(-1, dim)
    coef = case.model.coefficients(x)
    W = space.vol_weights[elems]
    c1 = coef.c1.reshape(ne, nq) * W
    c2 = coef.c2.reshape(ne, nq, dim) * W[..., None]
    c3 = coef.c3.reshape(ne, nq, dim) * W[..., None]
    fq = case.forcing(x).reshape(ne, nq) * W
    dg = case.dg(x).reshape(ne, nq, dim) * W[..., None]

    BB = (B[:, :, None] * B[:, None, :]).reshape(nq, nb * nb)

    def gram(w, table):
        return (w @ table).reshape(ne, nb, nb)

    N = space.nloc
    K = np.zeros((ne, N, N))
    mass = gram(W, BB)
    sl = [slice(i * nb, (i + 1) * nb) for i in range(dim + 1)]
    P = sl[dim]
    K[:, P, P] = mass
    r = np.zeros((ne, N))
    r[:, P] = fq @ B
    for i in range(dim):
        GB = (G[i][:, :, None] * B[:, None, :]).reshape(nq, nb * nb)  # grad_i(test) x trial
        c1GB = gram(c1, GB)
        K[:, sl[i], sl[i]] = mass
        K[:, sl[i], P] = -gram(c2[..., i], BB) - c1GB
        K[:, P, sl[i]] = gram(c3[..., i], BB) - c1GB
        r[:, sl[i]] = dg[..., i] @ B

    nF = space.nface_loc
    Bm = np.zeros((ne, N, nF))
    Cm = np.zeros((ne, nF, N))
    Dm = np.zeros((ne, nF, nF))
    Lam = space.Lam
    faces = mesh.element_faces[elems]
    for lf in range(space.nlf):
        f = faces[:, lf]
        Bt = space.trace_tables[space.trace_pattern[elems, lf]]  # (ne, nqf, nb)
        wf = space.face_weights[f]
        c1f = fdata.c1[f] * wf
        tauf = tau_sign * fdata.side_tau(elems, lf, f) * wf
        n = space.normals[elems, lf]  # (ne, dim)
        bnd = mesh.face_boundary[f]
        inner = (~bnd).astype(float)[:, None]
        fs = slice(lf * nfb, (lf + 1) * nfb)

        K[:, P, P] += np.einsum("eq,eqa,eqb->eab", tauf, Bt, Bt)
        tr_c1 = np.einsum("eq,eqa,eqb->eab", c1f, Bt, Bt)
        BtL_c1 = np.einsum("eq,eqa,qj->eaj", c1f * inner, Bt, Lam)
        BtL_tau = np.einsum("eq,eqa,qj->eaj", tauf * inner, Bt, Lam)
        for i in range(dim):
            K[:, P, sl[i]] += n[:, i, None, None] * tr_c1
            Bm[:, sl[i], fs] = n[:, i, None, None] * BtL_c1
            Cm[:, fs, sl[i]] = -n[:, i, None, None] * np.swapaxes(BtL_c1, 1, 2)
        Bm[:, P, fs] = -BtL_tau
        Cm[:, fs, P] = -np.swapaxes(BtL_tau, 1, 2)
        Dm[:, fs, fs] = np.einsum("eq,qa,qb->eab", tauf * inner, Lam, Lam)

        if np.any(bnd):
            gd = fdata.g_d[f] * bnd[:, None]
            gBt_c1 = np.einsum("eq,eqa->ea", c1f * gd, Bt)
            for i in range(dim):
                r[:, sl[i]] -= n[:, i, None] * gBt_c1
            r[:, P] += np.einsum("eq,eqa->ea", tauf * gd, Bt)
    return LocalBlocks(elems, K, Bm, Cm, Dm, r)


@dataclass
class Condensed:
    elems: np.ndarray
    S: np.ndarray  # (ne, nF, nF) Schur blocks
    g: np.ndarray  # (ne, nF)
    Z: np.ndarray  # (ne, N, nF)  K^-1 B
    z: np.ndarray  # (ne, N)      K^-1 r


def condense(blocks: LocalBlocks) -> Condensed:
    """Eliminate the element unknowns: ``S = D - C K^-1 B``, ``g = -C K^-1 r``."""
    rhs = np.concatenate([blocks.B, blocks.r[..., None]], axis=2)
    try:
        sol = linalg.batched_solve(blocks.K, rhs)
    except linalg.SingularMatrixError as exc:
        e = blocks.elems[exc.index] if exc.index is not None else blocks.elems[0]
        raise linalg.SingularMatrixError(f"singular local block on element {e}", index=int(e)) from None
    Z = sol[..., :-1]
    z = sol[..., -1]
    S = blocks.D - blocks.C @ Z
    g = -np.einsum("eij,ej->ei", blocks.C, z)
    return Condensed(blocks.elems, S, g, Z, z)


@dataclass
class TraceSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    face_dof_start: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def assemble_trace_system(space: HDGSpace, condensed: list[Condensed]) -> TraceSystem:
    rows, cols, vals = [], [], []
    rhs = np.zeros(space.n_trace)
    nF = space.nface_loc
    for c in condensed:
        ld = space.local_trace_dofs[c.elems]  # (ne, nF)
        rr = np.broadcast_to(ld[:, :, None], (len(ld), nF, nF))
        cc = np.broadcast_to(ld[:, None, :], (len(ld), nF, nF))
        keep = (rr >= 0) & (cc >= 0)
        rows.append(rr[keep])
        cols.append(cc[keep])
        vals.append(c.S[keep])
        m = ld >= 0
        np.add.at(rhs, ld[m], c.g[m])
    if rows:
        rows, cols, vals = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    mat = linalg.sparse_assemble(rows, cols, vals, space.n_trace)
    return TraceSystem(mat, rhs, space.face_dof_start)


@dataclass
class HDGSolution:
    """Coefficient arrays of an HDG solve.

    ``u``: ``(E, dim, nb)``; ``p``: ``(E, nb)``; ``phat``: ``(F, nfb)``.
    """

    space: HDGSpace
    case: ManufacturedCase
    policy: StabilizationPolicy
    u: np.ndarray
    p: np.ndarray
    phat: np.ndarray
    info: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.space.k

    @property
    def mesh(self) -> Mesh:
        return self.space.mesh

    def local_vector(self) -> np.ndarray:
        """``(E, N)`` local unknowns in (u_1, ..., u_dim, p) order."""
        return np.concatenate([self.u.reshape(len(self.u), -1), self.p], axis=1)

    def evaluate(self, ref_points: np.ndarray, elems=None):
        """Discrete ``p (ne, nq)`` and ``u (ne, nq, dim)`` at reference points."""
        tab = self.space.ref.eval(ref_points)
        sel = slice(None) if elems is None else elems
        p = self.p[sel] @ tab.T
        u = np.einsum("edb,qb->eqd", self.u[sel], tab)
        return p, u


def _check_alignment(space: HDGSpace, case: ManufacturedCase):
    if case.degenerate and not check_interface_alignment(space.mesh, case.model.one_phase):
        raise AlignmentError("mesh skeleton does not align with the one-phase/two-phase interface")


def dirichlet_traces(space: HDGSpace, fdata: FaceData) -> tuple[np.ndarray, np.ndarray]:
    """Boundary faces and their traces from ``<tau p_hat, mu> = <tau g_D, mu>``."""
    bnd = np.flatnonzero(space.mesh.face_boundary)
    if len(bnd) == 0:
        return bnd, np.zeros((0, space.nfb))
    w = fdata.tau[bnd] * space.face_weights[bnd]
    mass = np.einsum("fq,qa,qb->fab", w, space.Lam, space.Lam)
    rhs = np.einsum("fq,qa->fa", w * fdata.g_d[bnd], space.Lam)
    return bnd, np.linalg.solve(mass, rhs[..., None])[..., 0]


def solve(mesh_or_space, case: ManufacturedCase, k: int | None = None,
          policy: StabilizationPolicy | None = None, tau_sign: float = 1.0) -> HDGSolution:
    """Condense element unknowns, solve the trace system, recover (u, p)."""
    space = mesh_or_space if isinstance(mesh_or_space, HDGSpace) else HDGSpace(mesh_or_space, k)
    policy = policy or StabilizationPolicy.generalized()
    _check_alignment(space, case)
    fdata = face_data(space, case, policy)
    try:
        condensed = [condense(assemble_local(space, case, fdata, ch, tau_sign)) for ch in space.chunks]
    except linalg.SingularMatrixError as exc:
        if exc.index is None:
            raise
        faces = space.mesh.element_faces[exc.index]
        taus = ", ".join(f"{fdata.tau[f].min():.3g}..{fdata.tau[f].max():.3g}" for f in faces)
        raise linalg.SingularMatrixError(f"{exc}; tau on its faces: {taus}; {linalg.SINGULAR_HINT}",
                                         index=exc.index) from None
    trace = assemble_trace_system(space, condensed)
    lam = linalg.SparseLU(trace.matrix).solve(trace.rhs)
    res = linalg.relative_residual(trace.matrix, lam, trace.rhs) if trace.size else 0.0
    if res > 1e-10:
        raise linalg.SingularMatrixError(f"trace solve residual {res:.2e}; {linalg.SINGULAR_HINT}")

    E, N = space.n_elements, space.nloc
    xloc = np.zeros((E, N))
    lam_ext = np.concatenate([lam, [0.0]])
    for c in condensed:
        ld = space.local_trace_dofs[c.elems]
        lam_e = lam_ext[np.where(ld >= 0, ld, len(lam))]
        xloc[c.elems] = c.z - np.einsum("eij,ej->ei", c.Z, lam_e)
    phat = np.zeros((mesh_n_faces := space.mesh.n_faces, space.nfb))
    inner = np.flatnonzero(~space.mesh.face_boundary)
    phat[inner] = lam.reshape(-1, space.nfb)
    bnd, pd = dirichlet_traces(space, fdata)
    phat[bnd] = pd
    dim, nb = space.dim, space.nb
    sol = HDGSolution(space, case, policy,
                      u=xloc[:, :dim * nb].reshape(E, dim, nb).copy(),
                      p=xloc[:, dim * nb:].copy(), phat=phat,
                      info={"trace_residual": res, "n_trace": trace.size, "n_faces": mesh_n_faces})
    log.debug("solved k=%d E=%d trace dofs=%d residual=%.2e", space.k, E, trace.size, res)
    return sol


# ---------------------------------------------------------------------------
# monolithic oracle


@dataclass
class MonolithicSystem:
    matrix: sp.csr_matrix
    rhs: np.ndarray
    n_local: int  # E * N volume unknowns first, then F * nfb trace unknowns
    space: HDGSpace
    fdata: FaceData

    def split(self, x: np.ndarray):
        s = self.space
        E, N, dim, nb = s.n_elements, s.nloc, s.dim, s.nb
        xl = x[: self.n_local].reshape(E, N)
        u = xl[:, : dim * nb].reshape(E, dim, nb)
        p = xl[:, dim * nb:]
        phat = x[self.n_local:].reshape(-1, s.nfb)
        return u, p, phat

    def join(self, u, p, phat) -> np.ndarray:
        E = len(p)
        return np.concatenate([np.concatenate([u.reshape(E, -1), p], axis=1).ravel(), phat.ravel()])


def assemble_monolithic(mesh_or_space, case: ManufacturedCase, k: int | None = None,
                        policy: StabilizationPolicy | None = None,
                        tau_sign: float = 1.0) -> MonolithicSystem:
    """Full coupled system over (u, p, p_hat) without condensation."""
    space = mesh_or_space if isinstance(mesh_or_space, HDGSpace) else HDGSpace(mesh_or_space, k)
    if space.n_elements > MONOLITHIC_MAX_ELEMENTS:
        raise ValueError(f"monolithic assembly is limited to {MONOLITHIC_MAX_ELEMENTS} elements")
    policy = policy or StabilizationPolicy.generalized()
    fdata = face_data(space, case, policy)
    E, N, nfb = space.n_elements, space.nloc, space.nfb
    F = space.mesh.n_faces
    nl = E * N
    n = nl + F * nfb
    rows, cols, vals = [], [], []
    rhs = np.zeros(n)
    ef = space.mesh.element_faces
    for ch in space.chunks:
        blk = assemble_local(space, case, fdata, ch, tau_sign)
        ne = len(ch)
        vdofs = ch[:, None] * N + np.arange(N)[None, :]  # (ne, N)
        tdofs = (nl + ef[ch][:, :, None] * nfb + np.arange(nfb)).reshape(ne, -1)
        for R, C, M in ((vdofs, vdofs, blk.K), (vdofs, tdofs, blk.B), (tdofs, vdofs, blk.C),
                        (tdofs, tdofs, blk.D)):
            rr = np.broadcast_to(R[:, :, None], M.shape)
            cc = np.broadcast_to(C[:, None, :], M.shape)
            keep = M != 0
            rows.append(rr[keep])
            cols.append(cc[keep])
            vals.append(M[keep])
        rhs[vdofs.ravel()] += blk.r.ravel()
    bnd = np.flatnonzero(space.mesh.face_boundary)
    if len(bnd):
        w = tau_sign * fdata.tau[bnd] * space.face_weights[bnd]
        mass = np.einsum("fq,qa,qb->fab", w, space.Lam, space.Lam)
        b = np.einsum("fq,qa->fa", w * fdata.g_d[bnd], space.Lam)
        td = nl + bnd[:, None] * nfb + np.arange(nfb)
        rows.append(np.broadcast_to(td[:, :, None], mass.shape).ravel())
        cols.append(np.broadcast_to(td[:, None, :], mass.shape).ravel())
        vals.append(mass.ravel())
        rhs[td.ravel()] += b.ravel()
    mat = linalg.sparse_assemble(np.concatenate(rows), np.concatenate(cols), np.concatenate(vals), n)
    return MonolithicSystem(mat, rhs, nl, space, fdata)


def solve_monolithic(system: MonolithicSystem, case: ManufacturedCase,
                     policy: StabilizationPolicy) -> HDGSolution:
    x = linalg.sparse_lu_solve(system.matrix, system.rhs)
    u, p, phat = system.split(x)
    return HDGSolution(system.space, case, policy, u.copy(), p.copy(), phat.copy(),
                       info={"residual": linalg.relative_residual(system.matrix, x, system.rhs)})


# ---------------------------------------------------------------------------
# diagnostics


def energy_product(system: MonolithicSystem, u, p, phat) -> tuple[float, float]:
    """``a(x; x)`` from the monolithic matrix and the closed-form norm sum.

    The norm sum is ``|u|^2 + |p|^2 + |p_hat|^2_{G_D,tau} + |p|^2_{G_D,tau}
    + |p - p_hat|^2_{dOmega_h \\ G_D, tau}``.
    """
    space, fdata = system.space, system.fdata
    x = system.join(u, p, phat)
    a_xx = float(x @ (system.matrix @ x))

    W = space.vol_weights
    pq = p @ space.B.T
    uq = np.einsum("edb,qb->eqd", u, space.B)
    total = float(np.sum(W * pq**2) + np.sum(W[..., None] * uq**2))
    mesh = space.mesh
    ef = mesh.element_faces
    for lf in range(space.nlf):
        f = ef[:, lf]
        Bt = space.trace_tables[space.trace_pattern[:, lf]]
        p_tr = np.einsum("eqb,eb->eq", Bt, p)
        ph = phat[f] @ space.Lam.T
        wt = fdata.side_tau(np.arange(mesh.n_elements), lf, f) * space.face_weights[f]
        bnd = mesh.face_boundary[f]
        total += float(np.sum((wt * p_tr**2)[bnd]))
        total += float(np.sum((wt * (p_tr - ph) ** 2)[~bnd]))
    bf = np.flatnonzero(mesh.face_boundary)
    ph = phat[bf] @ space.Lam.T
    total += float(np.sum(fdata.tau[bf] * space.face_weights[bf] * ph**2))
    return a_xx, total


def conservation_residual(solution: HDGSolution) -> float:
    """Max over interior faces and face basis functions of the flux-jump residual."""
    space = solution.space
    fdata = face_data(space, solution.case, solution.policy)
    res = np.zeros(space.n_trace)
    xloc = solution.local_vector()
    for ch in space.chunks:
        blk = assemble_local(space, solution.case, fdata, ch)
        lam = solution.phat[space.mesh.element_faces[ch]].reshape(len(ch), -1)
        contrib = np.einsum("eij,ej->ei", blk.C, xloc[ch]) + np.einsum("eij,ej->ei", blk.D, lam)
        ld = space.local_trace_dofs[ch]
        m = ld >= 0
        np.add.at(res, ld[m], contrib[m])
    return float(np.abs(res).max()) if len(res) else 0.0


# ---------------------------------------------------------------------------
# unscaled fields and post-processing


def recover_unscaled(solution: HDGSolution, points: np.ndarray, elems: np.ndarray):
    """``p~ = phi^(-1/2) p`` and ``v~ = delta u`` at physical points inside the given elements.

    Points are ``(ne, npts, dim)``; both fields are zero on one-phase elements.
    """
    space = solution.space
    model = solution.case.model
    points = np.asarray(points, dtype=float)
    elems = np.asarray(elems, dtype=np.int64)
    ne, npts, dim = points.shape
    ptil = np.zeros((ne, npts))
    vtil = np.zeros((ne, npts, dim))
    two = np.flatnonzero(~element_one_phase(space.mesh, model.one_phase)[elems])
    if len(two) == 0:
        return ptil, vtil
    e = elems[two]
    x = points[two]
    ref = np.einsum("eij,eqj->eqi", space.inv_jac[e], x - space.origin[e][:, None, :])
    tab = space.ref.eval(ref.reshape(-1, dim)).reshape(len(e), npts, -1)
    pv = np.einsum("eqb,eb->eq", tab, solution.p[e])
    uv = np.einsum("eqb,edb->eqd", tab, solution.u[e])
    flat = x.reshape(-1, dim)
    ptil[two] = model.postprocess_coefficients(flat)[3].reshape(len(e), npts) * pv
    vtil[two] = model.delta(flat).reshape(len(e), npts, 1) * uv
    return ptil, vtil


@dataclass
class PostProcessed:
    """Degree k+1 element fields in a modal basis.

    Rows flagged in ``passthrough`` keep the HDG pressure itself, stored as
    nodal coefficients in ``nodal``.
    """

    space: HDGSpace
    basis: ModalBasis
    elems: np.ndarray
    coeffs: np.ndarray  # (ne, nbm)
    passthrough: np.ndarray | None = None  # (ne,) bool
    nodal: np.ndarray | None = None  # (ne, nb)

    def evaluate(self, ref_points: np.ndarray) -> np.ndarray:
        out = self.coeffs @ self.basis.eval(ref_points).T
        if self.passthrough is not None and self.passthrough.any():
            out[self.passthrough] = self.nodal[self.passthrough] @ self.space.ref.eval(ref_points).T
        return out


def _pp_setup(space: HDGSpace):
    basis = ModalBasis(space.mesh.shape, space.k + 1)
    quad = make_quadrature(space.mesh.shape, 2 * (space.k + 1) + 4)
    return basis, quad, basis.eval(quad.points), basis.grad(quad.points), space.ref.eval(quad.points)


def _pp_solve(space, elems, quad, psi, dpsi, rhs_grad_fn, mean_values):
    """Solve (grad s, grad w) = (R, grad w) with the constant-mode row replaced by the mean."""
    nbm = psi.shape[1]
    out = np.zeros((len(elems), nbm))
    for g in np.unique(space.group[elems]):
        sel = np.flatnonzero(space.group[elems] == g)
        e = elems[sel]
        inv = space.inv_jac[e[0]]
        G = np.einsum("ji,jqb->iqb", inv, dpsi)  # physical gradients of the modal basis
        W = space.det[e][:, None] * quad.weights[None, :]
        stiff = np.einsum("eq,iqa,iqb->eab", W, G, G)
        R = rhs_grad_fn(e)  # (ne, nq, dim)
        rhs = np.einsum("eq,eqi,iqa->ea", W, R, G)
        stiff[:, 0, :] = W @ psi
        rhs[:, 0] = mean_values(e, W)
        out[sel] = np.linalg.solve(stiff, rhs[..., None])[..., 0]
    return out


def post_process_scaled(solution: HDGSolution, elems=None) -> PostProcessed:
    """Local degree-(k+1) pressure from (u, p).

    Two-phase elements solve ``(grad p*, grad w) = -(phi^(1/2)/delta u, grad w)
    + 1/2 (grad(phi)/phi p, grad w)`` with ``(p*, 1) = (p, 1)``; on one-phase
    elements ``p* = p``.
    """
    space = solution.space
    model = solution.case.model
    elems = np.arange(space.n_elements) if elems is None else np.asarray(elems, dtype=np.int64)
    basis, quad, psi, dpsi, B = _pp_setup(space)
    dim = space.dim
    onep = element_one_phase(space.mesh, model.one_phase)[elems]
    coeffs = np.zeros((len(elems), basis.nbasis))

    two = np.flatnonzero(~onep)
    if len(two):
        e2 = elems[two]
        def rhs_grad(e):
            pts = space.origin[e][:, None, :] + np.einsum("eij,qj->eqi", space.jac[e], quad.points)
            flat = pts.reshape(-1, dim)
            scale, lg, _, _ = model.postprocess_coefficients(flat)
            nq = len(quad)
            pv = solution.p[e] @ B.T
            uv = np.einsum("edb,qb->eqd", solution.u[e], B)
            return -scale.reshape(len(e), nq, 1) * uv + 0.5 * lg.reshape(len(e), nq, dim) * pv[..., None]

        def means(e, W):
            return np.sum(W * (solution.p[e] @ B.T), axis=1)

        coeffs[two] = _pp_solve(space, e2, quad, psi, dpsi, rhs_grad, means)
    nodal = np.where(onep[:, None], solution.p[elems], 0.0)
    return PostProcessed(space, basis, elems, coeffs, onep, nodal)


def post_process_fluid(solution: HDGSolution, elems=None) -> PostProcessed:
    """Local degree-(k+1) unscaled pressure on strictly two-phase elements.

    Solves ``(grad s, grad w) = -(u/delta, grad w)`` with
    ``(s, 1) = (phi^(-1/2) p, 1)``.
    """
    space = solution.space
    model = solution.case.model
    mesh = space.mesh
    elems = np.arange(space.n_elements) if elems is None else np.asarray(elems, dtype=np.int64)
    verts = mesh.vertices[mesh.elements[elems]].reshape(-1, mesh.dim)
    touching = np.asarray(model.one_phase(verts), dtype=bool).reshape(len(elems), -1).any(axis=1)
    if np.any(touching):
        bad = elems[touching][:5].tolist()
        raise ValueError(f"elements {bad} touch the phi = 0 region; delta^-1 is unbounded there")
    basis, quad, psi, dpsi, B = _pp_setup(space)
    dim = space.dim
    nq = len(quad)

    def points(e):
        return space.origin[e][:, None, :] + np.einsum("eij,qj->eqi", space.jac[e], quad.points)

    def rhs_grad(e):
        flat = points(e).reshape(-1, dim)
        inv_delta = model.postprocess_coefficients(flat)[2].reshape(len(e), nq, 1)
        uv = np.einsum("edb,qb->eqd", solution.u[e], B)
        return -inv_delta * uv

    def means(e, W):
        inv_sqrt = model.postprocess_coefficients(points(e).reshape(-1, dim))[3].reshape(len(e), nq)
        return np.sum(W * inv_sqrt * (solution.p[e] @ B.T), axis=1)

    coeffs = _pp_solve(space, elems, quad, psi, dpsi, rhs_grad, means)
    return PostProcessed(space, basis, elems, coeffs)
