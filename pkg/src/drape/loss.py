"""Training objective: image agreement plus cloth regularity.

Image terms compare rendered soft masks and normal maps against the
per-frame supervision through a fixed multi-scale feature transform
(pyramid + finite-difference gradient magnitudes), standing in for a
pretrained perceptual network: deterministic, parameter-free, and
differentiable. Cloth terms regularize edge strain, face-normal
smoothness, dihedral bending, and body collision.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy.ndimage import correlate1d
from scipy.spatial import cKDTree

from . import autodiff as ad
from .geometry import (TriMesh, edge_lengths_t, face_normals_t, scatter_rows,
                       vertex_normals, vertex_normals_t)
from .render import DEFAULT_SHARPNESS, rasterize_frame_t

_BLUR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
PYRAMID_LEVELS = 3


class LossError(ValueError):
    """Inconsistent loss inputs."""


@dataclass
class LossWeights:
    mask: float = 500.0
    normal: float = 1500.0
    edge: float = 100.0
    face: float = 2000.0
    angle: float = 1.0
    collision: float = 100.0
    epsilon: float = 0.004  # meters, collision offset

    def __post_init__(self):
        for name in ("mask", "normal", "edge", "face", "angle", "collision"):
            if getattr(self, name) < 0:
                raise LossError(f"weight {name} must be >= 0")
        if self.epsilon <= 0:
            raise LossError("epsilon must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LossBreakdown:
    """Weighted scalar terms; total is their sum."""
    total: float
    mask_term: float
    normal_term: float
    edge_term: float
    face_term: float
    angle_term: float
    collision_term: float

    def terms(self):
        return {"mask": self.mask_term, "normal": self.normal_term,
                "edge": self.edge_term, "face": self.face_term,
                "angle": self.angle_term, "collision": self.collision_term}


def _l2(diff):
    """Unsquared L2 over all entries; guarded so the zero point stays
    differentiable."""
    total = ad.sum_(diff * diff)
    return ad.sqrt(total + 1e-24)


def _blur(img):
    out = correlate1d(img, _BLUR_KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _BLUR_KERNEL, axis=1, mode="constant", cval=0.0)


def pyramid_down(img):
    """Binomial blur + stride-2 subsample as a fused self-adjoint tape op."""
    x = ad.as_tensor(img)
    kernel = _BLUR_KERNEL.astype(x.data.dtype)

    def blur(a):
        out = correlate1d(a, kernel, axis=0, mode="constant", cval=0.0)
        return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)

    data = blur(x.data)[::2, ::2]

    def bwd(g):
        if x.requires_grad:
            up = np.zeros_like(x.data)
            up[::2, ::2] = g
            x.grad += blur(up)

    return ad.custom(data, (x,), bwd)


def gradient_magnitude(img):
    """Per-pixel finite-difference gradient magnitude on the interior grid."""
    x = ad.as_tensor(img)
    h, w = x.shape[0], x.shape[1]
    if h < 2 or w < 2:
        raise LossError("image too small for gradients")
    dx = x[:, 1:] - x[:, :-1]
    dy = x[1:, :] - x[:-1, :]
    dxc = dx[:-1]
    dyc = dy[:, :-1]
    return ad.sqrt(dxc * dxc + dyc * dyc + 1e-12)


def feature_transform(img):
    """Image plus 3 pyramid levels plus per-level gradient magnitudes."""
    x = ad.as_tensor(img)
    levels = [x]
    for _ in range(PYRAMID_LEVELS):
        levels.append(pyramid_down(levels[-1]))
    return levels + [gradient_magnitude(level) for level in levels]


def _stack_distance(stack_a, stack_b):
    total = None
    for a, b in zip(stack_a, stack_b):
        d = a - b
        part = ad.sum_(d * d)
        total = part if total is None else total + part
    return ad.sqrt(total + 1e-24)


def mask_term(pred, gt):
    """Unsquared Frobenius norm of the mask difference."""
    pred = ad.as_tensor(pred)
    gt = ad.as_tensor(gt)
    if pred.shape != gt.shape:
        raise LossError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return _l2(pred - gt)


def normal_term(pred_normal, gt_mask, gt_normal):
    """Feature-space distance to the mask-gated ground-truth normal map."""
    pred = ad.as_tensor(pred_normal)
    gt_mask = np.asarray(gt_mask)
    gt_normal = np.asarray(gt_normal)
    if pred.shape != gt_normal.shape or gt_mask.shape != gt_normal.shape[:2]:
        raise LossError("normal/mask shapes are inconsistent")
    target = gt_normal * gt_mask[:, :, None]
    return _stack_distance(feature_transform(pred),
                           feature_transform(target.astype(pred.data.dtype)))


# -- cloth terms ----------------------------------------------------------------

def collision_indices(garment_vertices, body_vertices):
    """Nearest garment vertex per body vertex, recomputed each forward."""
    tree = cKDTree(np.asarray(garment_vertices))
    _, idx = tree.query(np.asarray(body_vertices), k=1)
    return np.asarray(idx, dtype=np.int64)


def cloth_terms_t(verts, rig, body_vertices, body_normals, w):
    """Weighted cloth scalars as tape nodes; verts is the posed garment.

    The nearest-neighbor pairing for collision is held constant within
    one forward/backward; gradients flow through the offset vectors.
    """
    v = ad.as_tensor(verts)
    topo = rig.topology
    if v.shape != (topo.num_vertices, 3):
        raise LossError(f"posed garment has {v.shape[0]} vertices, "
                        f"topology expects {topo.num_vertices}")
    dtype = v.data.dtype

    lengths = edge_lengths_t(v, topo.edges)
    rest = topo.rest_edge_lengths.astype(dtype)
    stretch = lengths - rest
    edge = w.edge * ad.sum_(stretch * stretch)

    normals = face_normals_t(v, rig.template.faces)
    if len(topo.adj_src):
        neighbor_sum = scatter_rows(ad.take(normals, topo.adj_dst),
                                    topo.adj_src, topo.num_faces)
        deg = np.maximum(topo.face_degree, 1).astype(dtype)[:, None]
        has_nbr = (topo.face_degree > 0).astype(dtype)[:, None]
        lap = (neighbor_sum / deg - normals) * has_nbr
        face = w.face * ad.sum_(lap * lap)
    else:
        face = ad.Tensor(dtype.type(0.0))

    if len(topo.dihedral_pairs):
        n_a = ad.take(normals, topo.dihedral_pairs[:, 0])
        n_b = ad.take(normals, topo.dihedral_pairs[:, 1])
        sin_norm = ad.vnorm(ad.cross(n_a, n_b), axis=1)
        cos_dot = ad.sum_(n_a * n_b, axis=1)
        theta = ad.atan2(sin_norm, cos_dot)
        angle = w.angle * ad.sum_(theta * theta)
    else:
        angle = ad.Tensor(dtype.type(0.0))

    body_vertices = np.asarray(body_vertices, dtype=dtype)
    body_normals = np.asarray(body_normals, dtype=dtype)
    idx = collision_indices(v.data, body_vertices)
    offset = ad.take(v, idx) - body_vertices
    depth = ad.sum_(offset * body_normals, axis=1)
    violation = ad.relu(dtype.type(w.epsilon) - depth)
    collision = w.collision * ad.sum_(violation * violation)

    return {"edge": edge, "face": face, "angle": angle, "collision": collision}


def cloth_loss(posed, rig, body_posed, body_vertex_normals, w):
    """Plain-number cloth breakdown for a posed garment mesh."""
    verts = posed.vertices if isinstance(posed, TriMesh) else np.asarray(posed)
    terms = cloth_terms_t(ad.Tensor(verts), rig, body_posed.vertices,
                          body_vertex_normals, w)
    vals = {k: float(t.data) for k, t in terms.items()}
    total = sum(vals.values())
    return LossBreakdown(total=total, mask_term=0.0, normal_term=0.0,
                         edge_term=vals["edge"], face_term=vals["face"],
                         angle_term=vals["angle"],
                         collision_term=vals["collision"])


# -- full objective ---------------------------------------------------------------

def total_loss_t(frame, posed, rig, body_posed, camera, w,
                 sharpness=DEFAULT_SHARPNESS):
    """Tape scalar for one frame plus its numeric breakdown.

    posed: garment vertices, Tensor (N, 3) on the tape. frame supplies the
    mask/normal supervision; body_posed the collision geometry.
    """
    v = ad.as_tensor(posed)
    dtype = v.data.dtype

    garment_normals = vertex_normals_t(v, rig.template.faces,
                                       rig.template.num_vertices)
    # One fused raster pass yields both supervision images.
    frame_img = rasterize_frame_t(v, garment_normals, rig.template.faces,
                                  camera, sharpness)
    pred_mask = ad.reshape(ad.take(frame_img, np.array([0])),
                           (camera.height, camera.width))
    pred_normal = ad.transpose(ad.take(frame_img, np.array([1, 2, 3])),
                               (1, 2, 0))
    # The target is the mask-gated gt normal image, so gate the prediction by
    # its own soft mask; a perfect reconstruction then scores exactly zero.
    pred_normal = pred_normal * ad.reshape(pred_mask,
                                           (camera.height, camera.width, 1))

    mask = w.mask * mask_term(pred_mask, frame.mask.astype(dtype))
    normal = w.normal * normal_term(pred_normal, frame.mask.astype(dtype),
                                    frame.normal.astype(dtype))
    body_normals = vertex_normals(body_posed)
    cloth = cloth_terms_t(v, rig, body_posed.vertices, body_normals, w)

    total = mask + normal + cloth["edge"] + cloth["face"] + cloth["angle"] \
        + cloth["collision"]
    breakdown = LossBreakdown(
        total=float(total.data), mask_term=float(mask.data),
        normal_term=float(normal.data), edge_term=float(cloth["edge"].data),
        face_term=float(cloth["face"].data),
        angle_term=float(cloth["angle"].data),
        collision_term=float(cloth["collision"].data))
    return total, breakdown


def total_loss(frame, posed, rig, body_posed, camera, w,
               sharpness=DEFAULT_SHARPNESS):
    verts = posed.vertices if isinstance(posed, TriMesh) else posed
    _, breakdown = total_loss_t(frame, ad.as_tensor(verts), rig, body_posed,
                                camera, w, sharpness)
    return breakdown
