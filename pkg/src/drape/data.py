"""Sequence datasets: per-frame weak supervision plus scene assets on disk.

Directory layout:
    poses/NNNN.json      {"theta": [72], "beta": [10], "camera": [s, tx, ty]}
    masks/NNNN.png       8-bit grayscale
    normals/NNNN.png     8-bit RGB, (n + 1) / 2 encoding
    template/            garment.obj + garment_meta.json
    body/                body.obj + body_meta.json
    gt/NNNN.obj          optional ground-truth garment meshes
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .body import BETA_LEN, THETA_LEN, load_body, save_body
from .garment import load_garment, save_garment
from .geometry import MeshSequence, load_obj, save_obj
from .render import Camera, load_png, save_png


class DataError(ValueError):
    """Malformed or inconsistent sequence data."""


@dataclass
class FrameRecord:
    frame_index: int
    theta: np.ndarray   # (72,)
    beta: np.ndarray    # (10,)
    camera: Camera
    mask: np.ndarray    # (H, W) in [0, 1]
    normal: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.normal = np.asarray(self.normal, dtype=np.float64)
        if len(self.theta) != THETA_LEN or len(self.beta) != BETA_LEN:
            raise DataError(f"frame {self.frame_index}: bad pose vector lengths")
        if self.mask.ndim != 2 or self.normal.shape != self.mask.shape + (3,):
            raise DataError(f"frame {self.frame_index}: mask {self.mask.shape} and "
                            f"normal {self.normal.shape} are inconsistent")


def split_indices(n, train_fraction=0.8):
    """Stable 80/20 split keyed on frame-index digests, not RNG order."""
    digests = [hashlib.md5(f"frame:{i:06d}".encode()).hexdigest()
               for i in range(n)]
    order = sorted(range(n), key=lambda i: digests[i])
    n_train = int(round(train_fraction * n))
    return sorted(order[:n_train]), sorted(order[n_train:])


@dataclass
class SequenceDataset:
    frames: list
    train_indices: list = field(default_factory=list)
    test_indices: list = field(default_factory=list)

    @classmethod
    def from_frames(cls, frames, train_fraction=0.8):
        train, test = split_indices(len(frames), train_fraction)
        return cls(frames=frames, train_indices=train, test_indices=test)

    @property
    def train_frames(self):
        return [self.frames[i] for i in self.train_indices]

    @property
    def test_frames(self):
        return [self.frames[i] for i in self.test_indices]

    def __len__(self):
        return len(self.frames)


def save_dataset(dataset, dir_path, body=None, rig=None, gt=None):
    """Write the directory layout; body/rig/gt are optional extras."""
    for sub in ("poses", "masks", "normals"):
        os.makedirs(os.path.join(dir_path, sub), exist_ok=True)
    for fr in dataset.frames:
        stem = f"{fr.frame_index:04d}"
        pose = {"theta": [float(x) for x in fr.theta],
                "beta": [float(x) for x in fr.beta],
                "camera": [float(x) for x in fr.camera.params()]}
        with open(os.path.join(dir_path, "poses", stem + ".json"), "w") as fh:
            json.dump(pose, fh, sort_keys=True)
            fh.write("\n")
        save_png(os.path.join(dir_path, "masks", stem + ".png"), fr.mask)
        save_png(os.path.join(dir_path, "normals", stem + ".png"), fr.normal)
    if rig is not None:
        save_garment(rig, os.path.join(dir_path, "template"))
    if body is not None:
        save_body(body, os.path.join(dir_path, "body"))
    if gt is not None:
        gt_dir = os.path.join(dir_path, "gt")
        os.makedirs(gt_dir, exist_ok=True)
        for i, mesh in enumerate(gt.frames):
            save_obj(mesh, os.path.join(gt_dir, f"{i:04d}.obj"))


def load_sequence(dir_path, train_fraction=0.8):
    """Read frames and build the stable split. Models load separately."""
    poses_dir = os.path.join(dir_path, "poses")
    if not os.path.isdir(poses_dir):
        raise DataError(f"{dir_path}: missing poses/ directory")
    stems = sorted(os.path.splitext(f)[0] for f in os.listdir(poses_dir)
                   if f.endswith(".json"))
    if not stems:
        raise DataError(f"{dir_path}: no pose files found")

    frames = []
    shape0 = None
    beta0 = None
    for stem in stems:
        with open(os.path.join(poses_dir, stem + ".json")) as fh:
            pose = json.load(fh)
        mask_path = os.path.join(dir_path, "masks", stem + ".png")
        normal_path = os.path.join(dir_path, "normals", stem + ".png")
        for p in (mask_path, normal_path):
            if not os.path.exists(p):
                raise DataError(f"frame {stem}: missing {p}")
        mask = load_png(mask_path)
        normal = load_png(normal_path)
        if mask.ndim != 2:
            raise DataError(f"frame {stem}: mask must be grayscale")
        if shape0 is None:
            shape0 = mask.shape
        if mask.shape != shape0 or normal.shape != shape0 + (3,):
            raise DataError(f"frame {stem}: image size {mask.shape} does not "
                            f"match sequence size {shape0}")
        camera = Camera.from_params(pose["camera"], width=shape0[1],
                                    height=shape0[0])
        beta = np.asarray(pose["beta"], dtype=np.float64)
        if beta0 is None:
            beta0 = beta
        elif not np.array_equal(beta, beta0):
            raise DataError(f"frame {stem}: beta differs from the sequence's "
                            "(single subject expected)")
        frames.append(FrameRecord(frame_index=int(stem), theta=pose["theta"],
                                  beta=beta, camera=camera, mask=mask,
                                  normal=normal))
    return SequenceDataset.from_frames(frames, train_fraction)


def load_scene(dir_path, train_fraction=0.8):
    """Dataset plus the body model and garment rig stored alongside it."""
    dataset = load_sequence(dir_path, train_fraction)
    body = load_body(os.path.join(dir_path, "body"))
    rig = load_garment(os.path.join(dir_path, "template"), body=body)
    return dataset, body, rig


def load_gt_meshes(dir_path):
    gt_dir = os.path.join(dir_path, "gt")
    if not os.path.isdir(gt_dir):
        raise DataError(f"{dir_path}: no gt/ directory")
    files = sorted(f for f in os.listdir(gt_dir) if f.endswith(".obj"))
    if not files:
        raise DataError(f"{gt_dir}: no meshes")
    return MeshSequence([load_obj(os.path.join(gt_dir, f)) for f in files])
