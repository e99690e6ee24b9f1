"""Reconstruction quality metrics.

All distances are reported in centimeters; mesh coordinates are meters.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .geometry import MeshError

M_TO_CM = 100.0


def sample_surface(mesh, num_samples, seed):
    """Uniform area-weighted samples on the mesh surface.

    Faces are drawn proportionally to area, then a uniform barycentric
    point is taken inside each drawn face. Deterministic for a fixed seed.
    """
    v = mesh.vertices
    f = mesh.faces
    if len(f) == 0:
        raise MeshError("cannot sample a mesh with no faces")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    total = areas.sum()
    if total <= 0:
        raise MeshError("mesh has zero total area")
    rng = np.random.Generator(np.random.PCG64(seed))
    face_idx = rng.choice(len(f), size=num_samples, p=areas / total)
    uv = rng.random((num_samples, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    u = uv[:, 0:1]
    w = uv[:, 1:2]
    return a[face_idx] + u * (b[face_idx] - a[face_idx]) + w * (c[face_idx] - a[face_idx])


def _directed_mean_nn(points_a, points_b):
    tree = cKDTree(points_b)
    d, _ = tree.query(points_a, k=1)
    return float(np.mean(d))


def chamfer_distance(mesh_a, mesh_b, num_samples=10000, seed=0):
    """Symmetric Chamfer distance between two surfaces, in cm.

    Mean nearest-neighbor distance is computed in both directions over
    area-weighted samples and averaged. Both meshes are sampled with the
    same seed, so co-located surfaces measure exactly zero and nearby
    surfaces are compared through correlated clouds instead of through
    the sampling noise floor.
    """
    pa = sample_surface(mesh_a, num_samples, seed)
    pb = sample_surface(mesh_b, num_samples, seed)
    d = 0.5 * (_directed_mean_nn(pa, pb) + _directed_mean_nn(pb, pa))
    return d * M_TO_CM


def ccv(sequence):
    """Temporal coherence: RMS per-vertex displacement between adjacent
    frames, in cm. Needs at least two vertex-corresponded frames."""
    stack = sequence.vertex_stack() if hasattr(sequence, "vertex_stack") \
        else np.asarray(sequence)
    if stack.ndim != 3 or stack.shape[0] < 2:
        raise ValueError("ccv needs a (T>=2, V, 3) corresponded sequence")
    delta = stack[1:] - stack[:-1]
    return float(np.sqrt(np.mean(np.sum(delta ** 2, axis=2)))) * M_TO_CM


def rigid_align(source, target):
    """Best-fit rotation and translation mapping source onto target.

    Both are (N, 3) arrays in vertex correspondence. Returns
    ``(rotation, translation, aligned_source)`` where
    ``aligned = source @ rotation.T + translation``.
    """
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    if src.shape != tgt.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("rigid_align needs matching (N, 3) arrays")
    cs = src.mean(axis=0)
    ct = tgt.mean(axis=0)
    h = (src - cs).T @ (tgt - ct)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    flip = np.diag([1.0, 1.0, d])
    rotation = vt.T @ flip @ u.T
    translation = ct - rotation @ cs
    return rotation, translation, src @ rotation.T + translation
