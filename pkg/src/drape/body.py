"""Parametric body: shaped template, skeleton, forward kinematics, skinning.

The body drives the garment but is not itself trained, so the posing path
is plain numpy. A tape version of skinning (lbs_t) exists because garment
displacements and blend weights receive gradients through it.
"""

from __future__ import annotations

import base64
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .geometry import TriMesh

NUM_JOINTS = 24
THETA_LEN = NUM_JOINTS * 3
BETA_LEN = 10
# pose blendshape coefficients: 23 non-root joints x 9 rotation entries
POSE_BASIS_LEN = (NUM_JOINTS - 1) * 9


class BodyError(ValueError):
    """Invalid body model data or parameters."""


@dataclass
class PoseParams:
    theta: np.ndarray  # (72,) axis-angle radians
    beta: np.ndarray   # (10,) shape coefficients

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        if len(self.theta) != THETA_LEN:
            raise BodyError(f"theta must have {THETA_LEN} values, got {len(self.theta)}")
        if len(self.beta) != BETA_LEN:
            raise BodyError(f"beta must have {BETA_LEN} values, got {len(self.beta)}")

    @classmethod
    def rest(cls):
        return cls(np.zeros(THETA_LEN), np.zeros(BETA_LEN))


@dataclass
class BodyModel:
    template: TriMesh
    shape_basis: np.ndarray       # (10, V, 3)
    joint_regressor: np.ndarray   # (K, V), rows sum to 1
    parents: np.ndarray           # (K,), parents[0] == -1
    blend_weights: np.ndarray     # (V, K), rows on the simplex
    pose_basis: np.ndarray = field(default=None)  # (207, V, 3) or None

    def __post_init__(self):
        v = self.template.num_vertices
        self.shape_basis = np.asarray(self.shape_basis, dtype=np.float64)
        self.joint_regressor = np.asarray(self.joint_regressor, dtype=np.float64)
        self.parents = np.asarray(self.parents, dtype=np.int64).reshape(-1)
        self.blend_weights = np.asarray(self.blend_weights, dtype=np.float64)
        if self.pose_basis is not None:
            self.pose_basis = np.asarray(self.pose_basis, dtype=np.float64)
            if self.pose_basis.shape != (POSE_BASIS_LEN, v, 3):
                raise BodyError("pose basis shape mismatch")
        k = len(self.parents)
        if self.shape_basis.shape != (BETA_LEN, v, 3):
            raise BodyError(f"shape basis must be ({BETA_LEN}, {v}, 3), "
                            f"got {self.shape_basis.shape}")
        if self.joint_regressor.shape != (k, v):
            raise BodyError("joint regressor shape mismatch")
        if self.blend_weights.shape != (v, k):
            raise BodyError("blend weight shape mismatch")
        if self.parents[0] != -1:
            raise BodyError("joint 0 must be the root (parent -1)")
        _toposort_joints(self.parents)  # raises on cycles
        if not np.allclose(self.joint_regressor.sum(axis=1), 1.0, atol=1e-6):
            raise BodyError("joint regressor rows must sum to 1")
        w = self.blend_weights
        if w.min() < -1e-9 or not np.allclose(w.sum(axis=1), 1.0, atol=1e-6):
            raise BodyError("blend weight rows must be convex")

    @property
    def num_joints(self):
        return len(self.parents)


def _toposort_joints(parents):
    """Processing order with every parent before its children."""
    k = len(parents)
    done = set()
    order = []
    while len(order) < k:
        progressed = False
        for j in range(k):
            if j in done:
                continue
            p = parents[j]
            if p == -1 or p in done:
                order.append(j)
                done.add(j)
                progressed = True
        if not progressed:
            raise BodyError("parents do not form a tree (cycle detected)")
    return order


# -- rotations ---------------------------------------------------------------

def _rot_coeffs(s):
    """sin(sqrt(s))/sqrt(s) and (1-cos(sqrt(s)))/s with a series branch.

    s is the squared rotation angle; the series keeps values and
    derivatives finite through s = 0.
    """
    s = np.asarray(s, dtype=np.float64)
    small = s < 1e-4
    safe = np.where(small, 1.0, s)
    th = np.sqrt(safe)
    a = np.where(small, 1.0 - s / 6.0 + s * s / 120.0, np.sin(th) / th)
    b = np.where(small, 0.5 - s / 24.0 + s * s / 720.0, (1.0 - np.cos(th)) / safe)
    return a, b


def _skew(r):
    x, y, z = r[..., 0], r[..., 1], r[..., 2]
    zero = np.zeros_like(x)
    return np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=-2)


def rodrigues(axis_angle):
    """Axis-angle vectors (..., 3) to rotation matrices (..., 3, 3)."""
    r = np.asarray(axis_angle, dtype=np.float64)
    s = np.sum(r * r, axis=-1)
    a, b = _rot_coeffs(s)
    k = _skew(r)
    k2 = k @ k
    eye = np.eye(3)
    return eye + a[..., None, None] * k + b[..., None, None] * k2


def rodrigues_t(axis_angle):
    """Tape version of rodrigues for differentiable pose inputs."""
    r = ad.as_tensor(axis_angle)
    s = ad.sum_(r * r, axis=-1)
    a = ad.rot_coeff_a(s)
    b = ad.rot_coeff_b(s)
    k = ad.skew(r)
    k2 = k @ k
    shape = s.shape + (1, 1)
    eye = np.eye(3)
    return eye + a.reshape(shape) * k + b.reshape(shape) * k2


# -- shape and skeleton -------------------------------------------------------

def shaped_template(model, beta):
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    if len(beta) != BETA_LEN:
        raise BodyError(f"beta must have {BETA_LEN} values")
    verts = model.template.vertices + np.tensordot(beta, model.shape_basis, axes=1)
    return TriMesh(verts, model.template.faces)


def skeleton_joints(model, beta):
    return model.joint_regressor @ shaped_template(model, beta).vertices


def forward_kinematics(theta, rest_joints, parents):
    """Per-joint world transforms (K, 4, 4) mapping rest-pose points to
    posed points, composed root to leaf."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    rest_joints = np.asarray(rest_joints, dtype=np.float64)
    parents = np.asarray(parents, dtype=np.int64)
    k = len(parents)
    if theta.size != 3 * k:
        raise BodyError("theta joint count does not match skeleton")
    theta = theta.reshape(k, 3)
    rots = rodrigues(theta)
    order = _toposort_joints(parents)

    world = [None] * k
    for j in order:
        p = parents[j]
        offset = rest_joints[j] - (rest_joints[p] if p >= 0 else 0.0)
        local = np.eye(4)
        local[:3, :3] = rots[j]
        local[:3, 3] = offset
        world[j] = local if p < 0 else world[p] @ local

    transforms = np.empty((k, 4, 4))
    for j in range(k):
        unpose = np.eye(4)
        unpose[:3, 3] = -rest_joints[j]
        transforms[j] = world[j] @ unpose
    return transforms


# -- skinning -----------------------------------------------------------------

def lbs(vertices, weights, transforms):
    """Blend per-joint rigid transforms: v' = sum_k w_k * (A_k v)."""
    vertices = np.asarray(vertices, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    transforms = np.asarray(transforms, dtype=np.float64)
    if vertices.shape[0] != weights.shape[0] or weights.shape[1] != transforms.shape[0]:
        raise BodyError("lbs dimension mismatch")
    blended = np.einsum("vk,kij->vij", weights, transforms)
    return np.einsum("vij,vj->vi", blended[:, :3, :3], vertices) + blended[:, :3, 3]


def lbs_t(vertices, weights, transforms):
    """Tape skinning: differentiable w.r.t. vertices and weights."""
    verts = ad.as_tensor(vertices)
    w = ad.as_tensor(weights)
    transforms = np.asarray(transforms, dtype=verts.data.dtype)
    k = transforms.shape[0]
    posed = [verts @ transforms[j, :3, :3].T + transforms[j, :3, 3]
             for j in range(k)]
    stacked = ad.stack(posed, axis=0)                # (K, V, 3)
    wt = ad.transpose(w, (1, 0)).reshape((k, w.shape[0], 1))  # (K, V, 1)
    return ad.sum_(stacked * wt, axis=0)


def pose_body(model, params):
    """Shaped template (plus pose blendshape when present) under FK + LBS."""
    shaped = shaped_template(model, params.beta)
    verts = shaped.vertices
    if model.pose_basis is not None:
        rots = rodrigues(params.theta.reshape(-1, 3)[1:])
        feat = (rots - np.eye(3)).reshape(-1)
        verts = verts + np.tensordot(feat, model.pose_basis, axes=1)
    joints = model.joint_regressor @ shaped.vertices
    transforms = forward_kinematics(params.theta, joints, model.parents)
    return TriMesh(lbs(verts, model.blend_weights, transforms), model.template.faces)


def body_transforms(model, params):
    """FK transforms for the given pose, shared by body and garment skinning."""
    joints = skeleton_joints(model, params.beta)
    return forward_kinematics(params.theta, joints, model.parents)


# -- model files --------------------------------------------------------------

def _encode_array(arr):
    blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return {"shape": list(arr.shape), "dtype": "f32",
            "data_b64": base64.b64encode(blob).decode("ascii")}


def _decode_array(entry):
    if entry.get("dtype") != "f32":
        raise BodyError(f"unsupported blob dtype {entry.get('dtype')!r}")
    flat = np.frombuffer(base64.b64decode(entry["data_b64"]), dtype="<f4")
    return flat.astype(np.float64).reshape(entry["shape"])


def _to_triplets(matrix):
    rows, cols = np.nonzero(matrix)
    return [[int(r), int(c), float(matrix[r, c])] for r, c in zip(rows, cols)]


def _from_triplets(triplets, shape):
    out = np.zeros(shape)
    for r, c, val in triplets:
        out[int(r), int(c)] = val
    return out


def save_body(model, dir_path):
    """Write body.obj + body_meta.json into a directory."""
    os.makedirs(dir_path, exist_ok=True)
    from .geometry import save_obj
    save_obj(model.template, os.path.join(dir_path, "body.obj"))
    meta = {
        "version": 1,
        "num_joints": model.num_joints,
        "parents": [int(p) for p in model.parents],
        "joint_regressor": {"shape": list(model.joint_regressor.shape),
                            "triplets": _to_triplets(model.joint_regressor)},
        "blend_weights": {"shape": list(model.blend_weights.shape),
                          "triplets": _to_triplets(model.blend_weights)},
        "shape_basis": _encode_array(model.shape_basis),
        "pose_basis": (_encode_array(model.pose_basis)
                       if model.pose_basis is not None else None),
    }
    with open(os.path.join(dir_path, "body_meta.json"), "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_body(dir_path):
    from .geometry import load_obj
    obj_path = os.path.join(dir_path, "body.obj")
    meta_path = os.path.join(dir_path, "body_meta.json")
    if not os.path.exists(obj_path) or not os.path.exists(meta_path):
        raise BodyError(f"{dir_path}: expected body.obj and body_meta.json")
    template = load_obj(obj_path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("version") != 1:
        raise BodyError(f"unsupported body model version {meta.get('version')!r}")
    reg = _from_triplets(meta["joint_regressor"]["triplets"],
                         meta["joint_regressor"]["shape"])
    weights = _from_triplets(meta["blend_weights"]["triplets"],
                             meta["blend_weights"]["shape"])
    pose_basis = (_decode_array(meta["pose_basis"])
                  if meta.get("pose_basis") else None)
    return BodyModel(template=template,
                     shape_basis=_decode_array(meta["shape_basis"]),
                     joint_regressor=reg,
                     parents=np.array(meta["parents"], dtype=np.int64),
                     blend_weights=weights,
                     pose_basis=pose_basis)
