"""Garment template layered on the body.

A garment rig is a T-pose template plus skinning weights transferred from
the body; posing adds a per-vertex displacement field before skinning.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import body as bodymod
from .geometry import TriMesh, TopologyCache, build_topology

CATEGORIES = ("upper_short", "upper_long", "pants_short", "pants_long",
              "skirt_short", "skirt_long")


class GarmentError(ValueError):
    """Invalid garment rig data."""


@dataclass
class Displacement:
    d: np.ndarray  # (N, 3) meters

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(self.d)):
            raise GarmentError("displacement contains non-finite values")


@dataclass
class GarmentRig:
    template: TriMesh
    topology: TopologyCache
    blend_weights: np.ndarray  # (N, K)
    category: str

    def __post_init__(self):
        self.blend_weights = np.asarray(self.blend_weights, dtype=np.float64)
        n = self.template.num_vertices
        if self.blend_weights.ndim != 2 or self.blend_weights.shape[0] != n:
            raise GarmentError("blend weights must have one row per template vertex")
        w = self.blend_weights
        if w.min() < -1e-9 or not np.allclose(w.sum(axis=1), 1.0, atol=1e-6):
            raise GarmentError("blend weight rows must be convex")
        if self.category not in CATEGORIES:
            raise GarmentError(f"unknown category {self.category!r}; "
                               f"expected one of {CATEGORIES}")
        self.topology.check_against(self.template)

    @property
    def num_vertices(self):
        return self.template.num_vertices


def transfer_blend_weights(template, body):
    """Copy each garment vertex's weights from the nearest body vertex.

    Ties break to the lowest body-vertex index (argmin order).
    """
    bverts = body.template.vertices
    if len(bverts) == 0:
        raise GarmentError("body template has no vertices")
    gverts = template.vertices
    d2 = np.sum((gverts[:, None, :] - bverts[None, :, :]) ** 2, axis=2)
    nearest = np.argmin(d2, axis=1)
    return body.blend_weights[nearest].copy()


def build_rig(template, body, category, blend_weights=None):
    weights = (blend_weights if blend_weights is not None
               else transfer_blend_weights(template, body))
    return GarmentRig(template=template, topology=build_topology(template),
                      blend_weights=weights, category=category)


def apply_displacement(rig, d):
    if isinstance(d, Displacement):
        d = d.d
    d = np.asarray(d, dtype=np.float64)
    if d.shape != rig.template.vertices.shape:
        raise GarmentError(f"displacement shape {d.shape} does not match "
                           f"template {rig.template.vertices.shape}")
    if not np.all(np.isfinite(d)):
        raise GarmentError("displacement contains non-finite values")
    return rig.template.with_vertices(rig.template.vertices + d)


def pose_garment(rig, d, body, params):
    """Skin (template + displacement) with the body's FK transforms."""
    if rig.blend_weights.shape[1] != body.num_joints:
        raise GarmentError("rig and body disagree on joint count")
    displaced = apply_displacement(rig, d)
    transforms = bodymod.body_transforms(body, params)
    posed = bodymod.lbs(displaced.vertices, rig.blend_weights, transforms)
    return rig.template.with_vertices(posed)


def pose_garment_t(rig, d, transforms, weights=None):
    """Tape version for training: d is a Tensor, weights optionally one.

    FK transforms are precomputed constants (the pose is an input, not a
    trainable), so gradients flow to the displacement and blend weights.
    """
    d = ad.as_tensor(d)
    # The whole pose pipeline runs in the displacement's dtype.
    verts = rig.template.vertices.astype(d.data.dtype) + d
    if weights is None:
        weights = rig.blend_weights.astype(d.data.dtype)
    return bodymod.lbs_t(verts, weights, transforms)


def project_weights_to_simplex(weights):
    """Row-wise Euclidean projection onto the probability simplex."""
    w = np.asarray(weights, dtype=np.float64)
    squeeze = w.ndim == 1
    if squeeze:
        w = w[None, :]
    n, k = w.shape
    u = -np.sort(-w, axis=1)  # descending
    cssv = np.cumsum(u, axis=1) - 1.0
    denom = np.arange(1, k + 1)
    cond = u > cssv / denom
    rho = k - 1 - np.argmax(cond[:, ::-1], axis=1)  # last True index
    tau = cssv[np.arange(n), rho] / (rho + 1)
    out = np.maximum(w - tau[:, None], 0.0)
    return out[0] if squeeze else out


# -- template files -----------------------------------------------------------

def save_garment(rig, dir_path, include_weights=True):
    os.makedirs(dir_path, exist_ok=True)
    from .geometry import save_obj
    save_obj(rig.template, os.path.join(dir_path, "garment.obj"))
    meta = {"version": 1, "category": rig.category}
    if include_weights:
        w = rig.blend_weights
        rows, cols = np.nonzero(w)
        meta["blend_weights"] = {
            "shape": list(w.shape),
            "triplets": [[int(r), int(c), float(w[r, c])]
                         for r, c in zip(rows, cols)],
        }
    with open(os.path.join(dir_path, "garment_meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_garment(dir_path, body=None):
    """Load garment.obj (+ optional garment_meta.json) into a rig.

    Weights come from the meta file when present, otherwise they are
    transferred from the body, which must then be given.
    """
    from .geometry import load_obj
    obj_path = os.path.join(dir_path, "garment.obj")
    if not os.path.exists(obj_path):
        raise GarmentError(f"{dir_path}: missing garment.obj")
    template = load_obj(obj_path)
    meta_path = os.path.join(dir_path, "garment_meta.json")
    category = "upper_short"
    weights = None
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        category = meta.get("category", category)
        if "blend_weights" in meta:
            entry = meta["blend_weights"]
            weights = np.zeros(entry["shape"])
            for r, c, val in entry["triplets"]:
                weights[int(r), int(c)] = val
    if weights is None:
        if body is None:
            raise GarmentError("no stored blend weights and no body to "
                               "transfer them from")
        weights = transfer_blend_weights(template, body)
    return build_rig(template, body, category, blend_weights=weights) \
        if body is not None else GarmentRig(template=template,
                                            topology=build_topology(template),
                                            blend_weights=weights,
                                            category=category)
