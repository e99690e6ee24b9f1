"""Triangle mesh representation, topology caches, normals, and OBJ I/O.

Vertices are meters. Plain-numpy operations live here alongside their
differentiable counterparts (suffix ``_t``) used by the loss and renderer.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

logger = logging.getLogger(__name__)

DEGENERATE_FACE_TOL = 1e-12  # on |cross| = 2*area


class MeshError(ValueError):
    """Invalid mesh topology, geometry, or file contents."""


@dataclass
class TriMesh:
    vertices: np.ndarray  # (V, 3) float
    faces: np.ndarray     # (F, 3) int

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.validate()

    def validate(self):
        if self.faces.size:
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("face repeats a vertex")

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same topology, new vertex positions."""
        return TriMesh(np.asarray(vertices, dtype=np.float64), self.faces)

    def copy(self):
        return TriMesh(self.vertices.copy(), self.faces.copy())


@dataclass
class TopologyCache:
    """Edge/adjacency structures precomputed from one mesh."""
    edges: np.ndarray              # (E, 2) sorted vertex pairs, lexicographic
    rest_edge_lengths: np.ndarray  # (E,) meters
    dihedral_pairs: np.ndarray     # (D, 2) adjacent face indices
    face_adjacency: list           # per-face neighbor index arrays
    num_vertices: int
    num_faces: int
    # flattened adjacency for the uniform face-normal Laplacian
    adj_src: np.ndarray = field(default=None)
    adj_dst: np.ndarray = field(default=None)
    face_degree: np.ndarray = field(default=None)

    def check_against(self, mesh):
        if mesh.num_vertices != self.num_vertices or mesh.num_faces != self.num_faces:
            raise MeshError(
                f"topology cache built for ({self.num_vertices}V, {self.num_faces}F), "
                f"got mesh with ({mesh.num_vertices}V, {mesh.num_faces}F)")


def build_topology(mesh):
    """Extract unique edges, rest lengths, and face adjacency from a mesh."""
    f = mesh.faces
    raw = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
    raw.sort(axis=1)
    face_of = np.tile(np.arange(len(f)), 3)
    edges, inverse, counts = np.unique(raw, axis=0, return_inverse=True,
                                       return_counts=True)
    if np.any(counts > 2):
        bad = edges[np.argmax(counts > 2)]
        raise MeshError(f"non-manifold edge ({bad[0]}, {bad[1]}) shared by "
                        f"{counts.max()} faces")
    rest = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]],
                          axis=1)
    if np.any(rest <= 0):
        raise MeshError("zero-length edge in template")

    incident = [[] for _ in range(len(edges))]
    for face_idx, edge_idx in zip(face_of, inverse):
        incident[edge_idx].append(int(face_idx))
    pairs = [sorted(fs) for fs in incident if len(fs) == 2]
    dihedral_pairs = (np.array(pairs, dtype=np.int64) if pairs
                      else np.zeros((0, 2), dtype=np.int64))

    neighbors = [[] for _ in range(len(f))]
    for a, b in dihedral_pairs:
        neighbors[a].append(int(b))
        neighbors[b].append(int(a))
    face_adjacency = [np.array(sorted(n), dtype=np.int64) for n in neighbors]

    adj_src = np.concatenate([np.full(len(n), i, dtype=np.int64)
                              for i, n in enumerate(face_adjacency)]) \
        if len(f) else np.zeros(0, dtype=np.int64)
    adj_dst = np.concatenate(face_adjacency) if len(f) else np.zeros(0, dtype=np.int64)
    degree = np.array([len(n) for n in face_adjacency], dtype=np.int64)

    return TopologyCache(edges=edges, rest_edge_lengths=rest,
                         dihedral_pairs=dihedral_pairs,
                         face_adjacency=face_adjacency,
                         num_vertices=mesh.num_vertices, num_faces=len(f),
                         adj_src=adj_src, adj_dst=adj_dst, face_degree=degree)


@dataclass
class MeshSequence:
    """Vertex-corresponded frames sharing one face list."""
    frames: list  # of TriMesh

    def __post_init__(self):
        if not self.frames:
            raise MeshError("empty mesh sequence")
        faces0 = self.frames[0].faces
        n0 = self.frames[0].num_vertices
        for i, fr in enumerate(self.frames):
            if fr.num_vertices != n0 or not np.array_equal(fr.faces, faces0):
                raise MeshError(f"frame {i} breaks vertex correspondence")

    def __len__(self):
        return len(self.frames)

    @property
    def faces(self):
        return self.frames[0].faces

    def vertex_stack(self):
        return np.stack([fr.vertices for fr in self.frames])


# -- normals ---------------------------------------------------------------

def face_normals(mesh):
    """Unit face normals, right-hand rule from the winding order."""
    v = mesh.vertices
    f = mesh.faces
    c = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norms = np.linalg.norm(c, axis=1)
    bad = np.nonzero(norms < DEGENERATE_FACE_TOL)[0]
    if bad.size:
        raise MeshError(f"zero-area face at index {bad[0]}")
    return c / norms[:, None]


def vertex_normals(mesh, with_warnings=False):
    """Area-weighted average of incident face normals, normalized.

    Isolated vertices get a zero normal and land in the warning list.
    """
    v = mesh.vertices
    f = mesh.faces
    c = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    accum = np.zeros_like(v)
    for k in range(3):
        np.add.at(accum, f[:, k], c)
    norms = np.linalg.norm(accum, axis=1)
    isolated = np.nonzero(norms < 1e-20)[0]
    out = accum / np.maximum(norms, 1e-20)[:, None]
    out[isolated] = 0.0
    if isolated.size:
        logger.warning("vertex_normals: %d vertices with no incident area",
                       isolated.size)
    if with_warnings:
        return out, isolated.tolist()
    return out


# -- differentiable counterparts -------------------------------------------

def scatter_rows(values, idx, num_rows):
    """Sum (M, C) rows into a (num_rows, C) array at integer indices."""
    values = ad.as_tensor(values)
    idx = np.asarray(idx)
    data = np.zeros((num_rows,) + values.data.shape[1:], dtype=values.data.dtype)
    np.add.at(data, idx, values.data)

    def bwd(g):
        if values.requires_grad:
            values.grad += g[idx]

    return ad.custom(data, (values,), bwd)


def face_cross_t(verts, faces):
    """Unnormalized face cross products (2 * area * normal) as a tape op."""
    a = ad.take(verts, faces[:, 0])
    b = ad.take(verts, faces[:, 1])
    c = ad.take(verts, faces[:, 2])
    return ad.cross(b - a, c - a)


def face_normals_t(verts, faces):
    c = face_cross_t(verts, faces)
    return c / (ad.vnorm(c, axis=1, keepdims=True) + 1e-12)


def vertex_normals_t(verts, faces, num_vertices):
    c = face_cross_t(verts, faces)
    tripled = ad.concatenate([c, c, c], axis=0)
    idx = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    accum = scatter_rows(tripled, idx, num_vertices)
    return accum / (ad.vnorm(accum, axis=1, keepdims=True) + 1e-12)


def edge_lengths_t(verts, edges):
    d = ad.take(verts, edges[:, 0]) - ad.take(verts, edges[:, 1])
    return ad.vnorm(d, axis=1)


# -- OBJ I/O ----------------------------------------------------------------

def load_obj(path):
    """Read v/f records; polygons are fan-triangulated, 1-based indices."""
    vertices = []
    faces = []
    with open(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise MeshError(f"{path}:{lineno}: bad vertex: {exc}") from exc
            elif tag == "f":
                if len(parts) < 4:
                    raise MeshError(f"{path}:{lineno}: face needs >= 3 vertices")
                idx = []
                for token in parts[1:]:
                    head = token.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as exc:
                        raise MeshError(f"{path}:{lineno}: bad face index "
                                        f"'{token}'") from exc
                    if i == 0:
                        raise MeshError(f"{path}:{lineno}: OBJ indices are 1-based")
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
            # vn/vt/usemtl/mtllib/o/g/s records are ignored
    if not vertices:
        raise MeshError(f"{path}: no vertices found")
    try:
        return TriMesh(np.array(vertices), np.array(faces, dtype=np.int64)
                       if faces else np.zeros((0, 3), dtype=np.int64))
    except MeshError as exc:
        raise MeshError(f"{path}: {exc}") from exc


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.8f} {v[1]:.8f} {v[2]:.8f}\n")
        for f in mesh.faces:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")
