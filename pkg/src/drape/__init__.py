"""Pose-driven garment deformation with weakly supervised training.

Reconstructs per-frame garment meshes from pose parameters, silhouette
masks, and normal maps, then re-animates the learned deformation under
unseen poses. Everything differentiable runs on the built-in reverse-mode
tape; rendering is a soft rasterizer with hand-written gradients.
"""

__version__ = "0.1.0"

from .autodiff import Tensor
from .body import BodyModel, PoseParams, body_transforms, lbs, pose_body
from .data import FrameRecord, SequenceDataset, load_scene, load_sequence, save_dataset
from .evaluate import animate, evaluate
from .garment import GarmentRig, build_rig, pose_garment
from .geometry import MeshSequence, TriMesh, load_obj, save_obj
from .loss import LossBreakdown, LossWeights, total_loss
from .metrics import ccv, chamfer_distance, rigid_align
from .network import DeformationNet, NetConfig, init_params, load_checkpoint, net_from_checkpoint, predict_displacement, save_checkpoint
from .numerics import AdamState, adam_step, gradcheck, grads_of
from .render import Camera, Image, rasterize_normals, rasterize_silhouette
from .synth import SynthConfig, default_scene, synth_sequence
from .train import TrainConfig, TrainResult, train

__all__ = [
    "AdamState", "BodyModel", "Camera", "DeformationNet", "FrameRecord",
    "GarmentRig", "Image", "LossBreakdown", "LossWeights", "MeshSequence",
    "NetConfig", "PoseParams", "SequenceDataset", "SynthConfig", "Tensor",
    "TrainConfig", "TrainResult", "TriMesh", "adam_step", "animate",
    "body_transforms", "build_rig", "ccv", "chamfer_distance",
    "default_scene", "evaluate", "gradcheck", "grads_of", "init_params",
    "lbs", "load_checkpoint", "load_obj", "load_scene", "load_sequence",
    "net_from_checkpoint", "pose_body", "pose_garment",
    "predict_displacement", "rasterize_normals", "rasterize_silhouette",
    "rigid_align", "save_checkpoint", "save_dataset", "save_obj",
    "synth_sequence", "total_loss", "train",
]
