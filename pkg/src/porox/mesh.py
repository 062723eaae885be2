"""Structured meshes of axis-aligned boxes and their face skeleton."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Local faces of the reference cells, as local vertex lists.  Quads and hexes
# number their vertices lexicographically with x fastest.
_LOCAL_FACES = {
    "quad": ((0, 2), (1, 3), (0, 1), (2, 3)),
    "hex": ((0, 2, 4, 6), (1, 3, 5, 7), (0, 1, 4, 5), (2, 3, 6, 7), (0, 1, 2, 3), (4, 5, 6, 7)),
    "tri": ((1, 2), (0, 2), (0, 1)),
}


@dataclass(frozen=True)
class Face:
    vertices: tuple[int, ...]
    owner: tuple[int, int]
    neighbor: tuple[int, int] | None
    boundary: bool
    unit_normal: np.ndarray
    measure: float


class Mesh:
    """Conforming mesh with a uniquely enumerated face skeleton.

    Face data is stored as arrays; ``faces`` exposes per-face records.
    Normals are stored once per face with the owner's outward orientation.
    """

    def __init__(self, dim: int, shape: str, vertices: np.ndarray, elements: np.ndarray,
                 spacing: float):
        self.dim = dim
        self.shape = shape
        self.vertices = np.asarray(vertices, dtype=float)
        self.elements = np.asarray(elements, dtype=np.int64)
        #: largest grid cell side; the mesh size reported in tables and used by 1/h rules
        self.spacing = float(spacing)
        self._build_skeleton()
        for arr in (self.vertices, self.elements, self.face_vertices, self.face_owner,
                    self.face_neighbor, self.face_normal, self.face_measure,
                    self.element_faces, self.element_diameter):
            arr.setflags(write=False)

    # -- construction -------------------------------------------------------

    def _build_skeleton(self):
        local = _LOCAL_FACES[self.shape]
        nel = len(self.elements)
        nlf = len(local)
        keys = {}
        fverts, owner, owner_lf, neigh, neigh_lf = [], [], [], [], []
        elem_faces = np.empty((nel, nlf), dtype=np.int64)
        for e, conn in enumerate(self.elements):
            for lf, loc in enumerate(local):
                verts = tuple(sorted(int(conn[i]) for i in loc))
                fid = keys.get(verts)
                if fid is None:
                    fid = len(fverts)
                    keys[verts] = fid
                    fverts.append(verts)
                    owner.append(e)
                    owner_lf.append(lf)
                    neigh.append(-1)
                    neigh_lf.append(-1)
                else:
                    if neigh[fid] != -1:
                        raise ValueError(f"face {verts} shared by more than two elements")
                    neigh[fid] = e
                    neigh_lf[fid] = lf
                elem_faces[e, lf] = fid
        self.face_vertices = np.array(fverts, dtype=np.int64)
        self.face_owner = np.column_stack([owner, owner_lf]).astype(np.int64)
        self.face_neighbor = np.column_stack([neigh, neigh_lf]).astype(np.int64)
        self.element_faces = elem_faces
        self.face_boundary = self.face_neighbor[:, 0] < 0
        self.face_boundary.setflags(write=False)

        fx = self.vertices[self.face_vertices]  # (F, nvf, dim)
        self.face_centroid = fx.mean(axis=1)
        tang = self._face_tangents(fx)
        self.face_tangents = tang
        if self.dim == 2:
            t = tang[:, 0]
            normal = np.column_stack([t[:, 1], -t[:, 0]])
            measure = 2.0 * np.linalg.norm(t, axis=1)
        else:
            normal = np.cross(tang[:, 0], tang[:, 1])
            measure = 4.0 * np.linalg.norm(normal, axis=1)
        normal /= np.linalg.norm(normal, axis=1)[:, None]
        ecent = self.vertices[self.elements].mean(axis=1)
        flip = np.einsum("fd,fd->f", normal, self.face_centroid - ecent[self.face_owner[:, 0]]) < 0
        normal[flip] *= -1.0
        self.face_normal = normal
        self.face_measure = measure

        ex = self.vertices[self.elements]
        diam = np.zeros(nel)
        for a, b in itertools.combinations(range(ex.shape[1]), 2):
            diam = np.maximum(diam, np.linalg.norm(ex[:, a] - ex[:, b], axis=1))
        self.element_diameter = diam
        self.h = float(diam.max())
        for arr in (self.face_centroid, self.face_tangents):
            arr.setflags(write=False)

    def _face_tangents(self, fx: np.ndarray) -> np.ndarray:
        """Half-length tangent vectors of the face parametrisation over [-1,1]^(dim-1).

        Segments run from their lower to higher global vertex index; quad
        faces span their two non-constant axes in increasing axis order.
        """
        if self.dim == 2:
            return (0.5 * (fx[:, 1] - fx[:, 0]))[:, None, :]
        lo = fx.min(axis=1)
        hi = fx.max(axis=1)
        ext = hi - lo
        out = np.zeros((len(fx), 2, 3))
        for f in range(len(fx)):
            axes = np.flatnonzero(ext[f] > 0)
            if len(axes) != 2:
                raise ValueError("hexahedral faces must be axis aligned")
            for j, a in enumerate(axes):
                out[f, j, a] = 0.5 * ext[f, a]
        return out

    # -- queries ------------------------------------------------------------

    @property
    def n_elements(self) -> int:
        return len(self.elements)

    @property
    def n_faces(self) -> int:
        return len(self.face_vertices)

    @property
    def faces(self) -> list[Face]:
        out = []
        for f in range(self.n_faces):
            nb = self.face_neighbor[f]
            out.append(Face(
                vertices=tuple(int(v) for v in self.face_vertices[f]),
                owner=(int(self.face_owner[f, 0]), int(self.face_owner[f, 1])),
                neighbor=None if nb[0] < 0 else (int(nb[0]), int(nb[1])),
                boundary=bool(self.face_boundary[f]),
                unit_normal=self.face_normal[f].copy(),
                measure=float(self.face_measure[f]),
            ))
        return out

    def element_coords(self, elems=None) -> np.ndarray:
        conn = self.elements if elems is None else self.elements[elems]
        return self.vertices[conn]

    def element_volume(self) -> np.ndarray:
        from .discretization import element_map, reference_measure

        emap = element_map(self.shape, self.element_coords())
        return emap.det * reference_measure(self.shape)

    def element_centroid(self) -> np.ndarray:
        return self.vertices[self.elements].mean(axis=1)

    def face_points(self, ref_points: np.ndarray, faces=None) -> np.ndarray:
        """Physical points ``(F, npts, dim)`` of face reference points in [-1,1]^(dim-1)."""
        sel = slice(None) if faces is None else faces
        c = self.face_centroid[sel]
        t = self.face_tangents[sel]
        return c[:, None, :] + np.einsum("qj,fjd->fqd", np.atleast_2d(ref_points), t)

    def outward_normal(self, elem: int, local_face: int) -> np.ndarray:
        f = self.element_faces[elem, local_face]
        sign = 1.0 if self.face_owner[f, 0] == elem else -1.0
        return sign * self.face_normal[f]

    def normal_sign(self) -> np.ndarray:
        """``(E, nlf)`` array of +1 where the element owns the face, -1 otherwise."""
        own = self.face_owner[self.element_faces, 0] == np.arange(self.n_elements)[:, None]
        return np.where(own, 1.0, -1.0)

    def dump_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            fh.write("#vertices\n")
            w.writerows(self.vertices.tolist())
            fh.write("#elements\n")
            w.writerows(self.elements.tolist())
            fh.write("#faces\n")
            for f in range(self.n_faces):
                w.writerow(list(self.face_vertices[f]) + [self.face_owner[f, 0], self.face_neighbor[f, 0]])


def build_structured_mesh(domain: Sequence[Sequence[float]], shape: str, n: int) -> Mesh:
    """Uniform mesh of the box ``domain = [(lo, hi), ...]`` with ``n`` cells per axis.

    ``shape`` is ``"quad"``/``"tri"`` for 2D boxes and ``"hex"`` for 3D boxes.
    Triangles split every cell along its (lo, lo)-(hi, hi) diagonal.
    """
    box = np.asarray(domain, dtype=float)
    if box.ndim != 2 or box.shape[1] != 2:
        raise ValueError("domain must be a sequence of (lo, hi) pairs")
    dim = len(box)
    if not np.all(box[:, 1] > box[:, 0]):
        raise ValueError("box must have positive extent along every axis")
    if n < 1:
        raise ValueError("need at least one element per dimension")
    valid = {2: ("quad", "tri"), 3: ("hex",)}
    if dim not in valid or shape not in valid[dim]:
        raise ValueError(f"shape {shape!r} is not available in {dim}D")

    axes = [np.linspace(lo, hi, n + 1) for lo, hi in box]
    grids = np.meshgrid(*axes, indexing="ij")
    verts = np.column_stack([g.transpose().ravel() for g in grids])
    m = n + 1

    def vid(*idx):
        out = 0
        for d in reversed(range(dim)):
            out = out * m + idx[d]
        return out

    cells = []
    for idx in itertools.product(range(n), repeat=dim):
        idx = idx[::-1]  # x fastest
        corners = [vid(*(i + o for i, o in zip(idx, off)))
                   for off in (c[::-1] for c in itertools.product((0, 1), repeat=dim))]
        cells.append(corners)
    cells = np.array(cells, dtype=np.int64)
    if shape == "tri":
        v00, v10, v01, v11 = cells.T
        lower = np.column_stack([v00, v10, v11])
        upper = np.column_stack([v00, v11, v01])
        cells = np.stack([lower, upper], axis=1).reshape(-1, 3)
    spacing = float(np.max((box[:, 1] - box[:, 0]) / n))
    return Mesh(dim, shape, verts, cells, spacing)


def check_interface_alignment(mesh: Mesh, one_phase: Callable[[np.ndarray], np.ndarray]) -> bool:
    """True when every element lies entirely in one region.

    ``one_phase`` maps points ``(npts, dim)`` to booleans for the closed
    one-phase region.  An element is one-phase when its interior is; it is
    consistent when no interior probe point disagrees with its centroid.
    """
    probes = _interior_probes(mesh)
    flags = np.asarray(one_phase(probes.reshape(-1, mesh.dim)), dtype=bool).reshape(probes.shape[:2])
    return bool(np.all(flags == flags[:, :1]))


def _interior_probes(mesh: Mesh) -> np.ndarray:
    x = mesh.element_coords()
    cent = x.mean(axis=1, keepdims=True)
    # points pulled slightly towards the centroid from every vertex, plus the centroid
    eps = 1e-9
    pts = cent + (1.0 - eps) * (x - cent)
    mids = []
    nv = x.shape[1]
    for a, b in itertools.combinations(range(nv), 2):
        mids.append(cent[:, 0] + (1.0 - eps) * (0.5 * (x[:, a] + x[:, b]) - cent[:, 0]))
    return np.concatenate([cent, pts, np.stack(mids, axis=1)], axis=1)


def element_one_phase(mesh: Mesh, one_phase) -> np.ndarray:
    """Per-element one-phase flag, judged at the centroid of aligned elements."""
    return np.asarray(one_phase(mesh.element_centroid()), dtype=bool)


def face_one_phase(mesh: Mesh, one_phase) -> np.ndarray:
    """Per-face flag; faces lying in the closed one-phase region (interfaces included)."""
    return np.asarray(one_phase(mesh.face_centroid), dtype=bool)
