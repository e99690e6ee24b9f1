"""Deterministic synthetic scene: capsule body, tube garment, known wrinkles.

The ground-truth displacement is an analytic sinusoid around the tube whose
phase follows one spine angle, so a sequence carries real pose-to-wrinkle
signal while staying cheap enough for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .body import NUM_JOINTS, THETA_LEN, BodyModel, PoseParams
from .data import FrameRecord, SequenceDataset
from .garment import build_rig, pose_garment
from .geometry import MeshSequence, TriMesh, vertex_normals
from .render import (DEFAULT_SHARPNESS, Camera, rasterize_normals,
                     rasterize_silhouette)

# SMPL-layout kinematic tree; joints we do not articulate stay identity.
SKELETON_PARENTS = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12,
                    13, 14, 16, 17, 18, 19, 20, 21)

# Spine chain carrying all the motion, bottom to top.
_CHAIN = (0, 3, 6, 9, 12)
_CHAIN_HEIGHTS = (-0.30, -0.12, 0.06, 0.24, 0.30)

# Height targets for every joint; off-chain joints just ride along.
_JOINT_HEIGHTS = {
    0: -0.30, 1: -0.32, 2: -0.32, 3: -0.12, 4: -0.33, 5: -0.33,
    6: 0.06, 7: -0.34, 8: -0.34, 9: 0.24, 10: -0.35, 11: -0.35,
    12: 0.30, 13: 0.28, 14: 0.28, 15: 0.34, 16: 0.27, 17: 0.27,
    18: 0.26, 19: 0.26, 20: 0.25, 21: 0.25, 22: 0.245, 23: 0.245,
}

BODY_RADIUS = 0.10
BODY_Y = (-0.35, 0.35)
GARMENT_RADIUS = 0.12
GARMENT_Y = (-0.25, 0.25)


def cylinder_mesh(radius, y_min, y_max, segments, rows, capped=False):
    """Axis-aligned tube along y with outward winding; optional end caps."""
    ys = np.linspace(y_min, y_max, rows + 1)
    ang = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), np.zeros(segments),
                     radius * np.sin(ang)], axis=1)
    verts = np.concatenate([ring + np.array([0.0, y, 0.0]) for y in ys])
    faces = []
    for r in range(rows):
        base = r * segments
        for s in range(segments):
            a = base + s
            b = base + (s + 1) % segments
            c = a + segments
            d = b + segments
            faces.append((a, c, d))
            faces.append((a, d, b))
    if capped:
        bot = len(verts)
        top = bot + 1
        verts = np.concatenate([verts, [[0.0, y_min, 0.0]], [[0.0, y_max, 0.0]]])
        last = rows * segments
        for s in range(segments):
            faces.append((bot, s, (s + 1) % segments))
            faces.append((top, last + (s + 1) % segments, last + s))
    return TriMesh(np.asarray(verts, dtype=np.float64),
                   np.asarray(faces, dtype=np.int64))


def make_synthetic_body(segments=20, rows=28):
    """Capsule body whose joints sit on the axis via ring-average regression."""
    mesh = cylinder_mesh(BODY_RADIUS, BODY_Y[0], BODY_Y[1], segments, rows,
                         capped=True)
    n = len(mesh.vertices)
    ring_y = np.linspace(BODY_Y[0], BODY_Y[1], rows + 1)

    regressor = np.zeros((NUM_JOINTS, n))
    for j in range(NUM_JOINTS):
        r = int(np.argmin(np.abs(ring_y - _JOINT_HEIGHTS[j])))
        regressor[j, r * segments:(r + 1) * segments] = 1.0 / segments

    # Hat functions over the spine chain; caps clamp to the chain ends.
    weights = np.zeros((n, NUM_JOINTS))
    h = np.asarray(_CHAIN_HEIGHTS)
    y = mesh.vertices[:, 1]
    for vi in range(n):
        yv = y[vi]
        if yv <= h[0]:
            weights[vi, _CHAIN[0]] = 1.0
        elif yv >= h[-1]:
            weights[vi, _CHAIN[-1]] = 1.0
        else:
            k = int(np.searchsorted(h, yv, side="right")) - 1
            t = (yv - h[k]) / (h[k + 1] - h[k])
            weights[vi, _CHAIN[k]] = 1.0 - t
            weights[vi, _CHAIN[k + 1]] = t

    shape_basis = np.zeros((10, n, 3))
    radial = mesh.vertices.copy()
    radial[:, 1] = 0.0
    norms = np.linalg.norm(radial, axis=1, keepdims=True)
    shape_basis[0] = 0.02 * radial / np.maximum(norms, 1e-12)
    shape_basis[1, :, 1] = 0.1 * y

    return BodyModel(template=mesh, shape_basis=shape_basis,
                     joint_regressor=regressor,
                     parents=np.asarray(SKELETON_PARENTS, dtype=np.int64),
                     blend_weights=weights)


def make_garment_template(segments=20, rows=9):
    """Open tube around the torso: 200 vertices, 360 faces by default."""
    return cylinder_mesh(GARMENT_RADIUS, GARMENT_Y[0], GARMENT_Y[1],
                         segments, rows, capped=False)


def default_camera(width=128, height=128):
    return Camera(s=2.5, tx=0.0, ty=0.0, width=width, height=height)


def default_scene():
    """Standard test scene: capsule body plus a tube garment rigged to it."""
    body = make_synthetic_body()
    rig = build_rig(make_garment_template(), body, category="upper_short")
    return body, rig


@dataclass
class SynthConfig:
    frames: int = 64
    width: int = 128
    height: int = 128
    pose_amplitude: float = 0.4
    wrinkle_amplitude: float = 0.01
    wrinkle_freq: float = 3.0
    phase_gain: float = 0.8
    camera_scale: float = 2.5
    sharpness: float = DEFAULT_SHARPNESS
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frames must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("image size too small")


def pose_trajectory(config):
    """Smooth spine motion; returns a list of (72,) axis-angle vectors."""
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(config.seed)))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    a = config.pose_amplitude
    out = []
    for f in range(config.frames):
        t = 2.0 * np.pi * f / max(config.frames, 1)
        theta = np.zeros(THETA_LEN)
        theta[3 * 3 + 0] = a * np.sin(t + phases[0])
        theta[6 * 3 + 0] = 0.7 * a * np.sin(2.0 * t + phases[1])
        theta[9 * 3 + 2] = 0.3 * a * np.sin(1.5 * t + phases[2])
        out.append(theta)
    return out


def gt_displacement(rig, theta, config):
    """Analytic wrinkle field in the garment's rest frame."""
    verts = rig.template.vertices
    u = np.arctan2(verts[:, 2], verts[:, 0])
    phase = config.wrinkle_freq * u + config.phase_gain * theta[6 * 3 + 0]
    normals = vertex_normals(rig.template)
    return (config.wrinkle_amplitude * np.sin(phase))[:, None] * normals


def synth_sequence(config, body, rig):
    """Render weak supervision for the analytic garment.

    Returns (dataset, gt_meshes); the supervision images come from the same
    rasterizer the reconstruction uses, so the only unknown during training
    is the displacement field.
    """
    camera = Camera(s=config.camera_scale, tx=0.0, ty=0.0,
                    width=config.width, height=config.height)
    beta = np.zeros(10)

    frames = []
    gt_frames = []
    for idx, theta in enumerate(pose_trajectory(config)):
        params = PoseParams(theta=theta, beta=beta)
        d = gt_displacement(rig, theta, config)
        posed = pose_garment(rig, d, body, params)
        gt_frames.append(posed)
        mask = rasterize_silhouette(posed, camera, config.sharpness)
        normal = rasterize_normals(posed, camera, config.sharpness)
        frames.append(FrameRecord(frame_index=idx, theta=theta, beta=beta,
                                  camera=camera, mask=mask.data,
                                  normal=normal.data))
    dataset = SequenceDataset.from_frames(frames)
    return dataset, MeshSequence(gt_frames)
