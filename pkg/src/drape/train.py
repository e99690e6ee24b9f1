"""Training loop: weak supervision in, checkpoints and a loss log out.

One step optimizes the mean frame loss over a mini-batch on a single tape.
Blend weights, when trainable, are projected back onto the simplex after
every update so the skinning convexity invariant holds at all times.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .body import PoseParams, body_transforms, pose_body
from .garment import pose_garment_t, project_weights_to_simplex
from .loss import LossWeights, total_loss_t
from .network import predict_displacement, save_checkpoint
from .numerics import AdamState, adam_step, grads_of
from .render import DEFAULT_SHARPNESS

LOG_COLUMNS = ("step", "total", "mask", "normal", "edge", "face", "angle",
               "collision")
WEIGHTS_PARAM = "garment.blend_weights"


class TrainError(RuntimeError):
    """Training aborted; message names the offending frame when known."""


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    precision: str = "f32"
    optimize_blend_weights: bool = True
    sharpness: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class TrainResult:
    net: object
    blend_weights: np.ndarray
    log: list
    best_path: str
    checkpoint_paths: list


def frame_loss(net, rig, frame, transforms, body_posed, weights_t, config):
    """One frame's tape scalar plus its numeric breakdown."""
    d = predict_displacement(net, frame.theta)
    posed = pose_garment_t(rig, d, transforms, weights=weights_t)
    return total_loss_t(frame, posed, rig, body_posed, frame.camera,
                        config.weights, config.sharpness)


def write_loss_log(path, rows):
    with open(path, "w") as fh:
        fh.write(",".join(LOG_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(f"{row[c]:.10g}" if c != "step" else str(row[c])
                              for c in LOG_COLUMNS) + "\n")


def train(dataset, body, rig, net, config, out_dir):
    """Fit the network (and optionally blend weights) to the training split.

    Writes ckpt_epochK.bin per epoch plus best.bin (lowest epoch-mean total)
    and loss_log.csv under out_dir.
    """
    train_frames = dataset.train_frames
    if not train_frames:
        raise TrainError("training split is empty")
    os.makedirs(out_dir, exist_ok=True)

    dtype = config.dtype
    net.cast(dtype)
    params = dict(net.params)
    weights_t = None
    if config.optimize_blend_weights:
        weights_t = ad.Tensor(rig.blend_weights.astype(dtype),
                              requires_grad=True)
        params[WEIGHTS_PARAM] = weights_t

    # FK and collision geometry depend only on the pose: hoist per frame.
    cache = []
    for fr in train_frames:
        p = PoseParams(theta=fr.theta, beta=fr.beta)
        cache.append((body_transforms(body, p), pose_body(body, p)))

    state = AdamState.for_params(params)
    log = []
    ckpt_paths = []
    best_total = np.inf
    best_path = os.path.join(out_dir, "best.bin")
    step = 0
    for epoch in range(1, config.epochs + 1):
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([config.seed, epoch])))
        order = rng.permutation(len(train_frames))
        epoch_totals = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            total = None
            sums = dict.fromkeys(LOG_COLUMNS[1:], 0.0)
            for k in batch:
                fr = train_frames[k]
                transforms, body_posed = cache[k]
                ltot, bd = frame_loss(net, rig, fr, transforms, body_posed,
                                      weights_t, config)
                if not np.isfinite(bd.total):
                    raise TrainError(f"non-finite loss at frame "
                                     f"{fr.frame_index} (epoch {epoch})")
                total = ltot if total is None else total + ltot
                sums["total"] += bd.total
                for key, val in bd.terms().items():
                    sums[key] += val
            batch_loss = total * (1.0 / len(batch))
            grads = grads_of(batch_loss, params)
            adam_step(params, grads, state, config.lr)
            if weights_t is not None:
                weights_t.data = project_weights_to_simplex(
                    weights_t.data).astype(dtype)
            step += 1
            row = {"step": step}
            row.update((key, sums[key] / len(batch))
                       for key in LOG_COLUMNS[1:])
            log.append(row)
            epoch_totals.append(row["total"])

        extra = ({WEIGHTS_PARAM: weights_t.data}
                 if weights_t is not None else None)
        path = os.path.join(out_dir, f"ckpt_epoch{epoch}.bin")
        save_checkpoint(path, net.config, net.params, extra=extra)
        ckpt_paths.append(path)
        mean_total = float(np.mean(epoch_totals))
        if mean_total < best_total:
            best_total = mean_total
            save_checkpoint(best_path, net.config, net.params, extra=extra)

    write_loss_log(os.path.join(out_dir, "loss_log.csv"), log)
    final_weights = (weights_t.data.astype(np.float64)
                     if weights_t is not None else rig.blend_weights)
    return TrainResult(net=net, blend_weights=final_weights, log=log,
                       best_path=best_path, checkpoint_paths=ckpt_paths)
