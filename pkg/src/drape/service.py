"""HTTP inference service: a FastAPI layer over a trained checkpoint.

The app loads the checkpoint and scene assets once at startup; request and
response bodies are pydantic models so the wire format is self-documenting
(/docs). The CLI `serve` subcommand is the thin client entry point.
"""

from __future__ import annotations

import base64
import io
import os
from typing import List, Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException
from PIL import Image as PILImage
from pydantic import BaseModel, Field, field_validator

from .body import BETA_LEN, THETA_LEN, PoseParams, load_body
from .evaluate import animate, evaluate
from .garment import load_garment
from .geometry import MeshSequence, TriMesh
from .network import net_from_checkpoint, predict_displacement
from .render import Camera, rasterize_normals, rasterize_silhouette
from .train import WEIGHTS_PARAM


class PoseIn(BaseModel):
    theta: List[float]
    beta: List[float] = Field(default_factory=lambda: [0.0] * BETA_LEN)

    @field_validator("theta")
    @classmethod
    def _theta_len(cls, v):
        if len(v) != THETA_LEN:
            raise ValueError(f"theta must have {THETA_LEN} values, got {len(v)}")
        return v

    @field_validator("beta")
    @classmethod
    def _beta_len(cls, v):
        if len(v) != BETA_LEN:
            raise ValueError(f"beta must have {BETA_LEN} values, got {len(v)}")
        return v

    def to_params(self):
        return PoseParams(theta=np.asarray(self.theta),
                          beta=np.asarray(self.beta))


class AnimateRequest(BaseModel):
    poses: List[PoseIn] = Field(min_length=1)


class MeshOut(BaseModel):
    vertices: List[List[float]]
    faces: List[List[int]]


class AnimateResponse(BaseModel):
    meshes: List[MeshOut]


class RenderRequest(BaseModel):
    pose: PoseIn
    camera: List[float] = Field(default_factory=lambda: [2.5, 0.0, 0.0])
    width: int = 128
    height: int = 128
    sharpness: float = 0.01
    kind: Literal["mask", "normal"] = "normal"

    @field_validator("camera")
    @classmethod
    def _camera_len(cls, v):
        if len(v) != 3:
            raise ValueError("camera must be [s, tx, ty]")
        return v


class RenderResponse(BaseModel):
    png_base64: str
    width: int
    height: int
    kind: str


class SequenceIn(BaseModel):
    vertices: List[List[List[float]]]  # (frames, V, 3)
    faces: List[List[int]]


class MetricsRequest(BaseModel):
    pred: SequenceIn
    gt: SequenceIn
    samples: int = 2000
    seed: int = 0


class MetricsResponse(BaseModel):
    mean_cd_cm: float
    ccv_cm: Optional[float] = None
    gt_ccv_cm: Optional[float] = None


def _png_base64(array):
    quant = np.clip(np.round(np.asarray(array) * 255.0), 0, 255).astype(np.uint8)
    mode = "L" if quant.ndim == 2 else "RGB"
    buf = io.BytesIO()
    PILImage.fromarray(quant, mode=mode).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _sequence_from(payload):
    faces = np.asarray(payload.faces, dtype=np.int64)
    try:
        frames = [TriMesh(np.asarray(v, dtype=np.float64), faces)
                  for v in payload.vertices]
        return MeshSequence(frames)
    except ValueError as exc:
        raise HTTPException(status_code=400, detail=str(exc))


def create_app(checkpoint, data_dir):
    """Build the app around one checkpoint and its scene directory."""
    net, extra = net_from_checkpoint(checkpoint)
    body = load_body(os.path.join(data_dir, "body"))
    rig = load_garment(os.path.join(data_dir, "template"), body=body)
    if net.config.num_vertices != rig.template.num_vertices:
        raise ValueError(f"checkpoint is for {net.config.num_vertices} "
                         f"vertices, garment has {rig.template.num_vertices}")
    blend_weights = extra.get(WEIGHTS_PARAM)
    if blend_weights is not None:
        blend_weights = np.asarray(blend_weights, dtype=np.float64)

    app = FastAPI(title="garment deformation service", version="1.0")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok",
                "garment_vertices": rig.template.num_vertices,
                "joints": body.num_joints,
                "hypotheses": net.config.hypothesis_count}

    @app.post("/animate", response_model=AnimateResponse)
    def animate_endpoint(req: AnimateRequest):
        try:
            seq = animate(net, rig, body, [p.to_params() for p in req.poses],
                          blend_weights=blend_weights)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        meshes = [MeshOut(vertices=m.vertices.tolist(),
                          faces=m.faces.tolist()) for m in seq.frames]
        return AnimateResponse(meshes=meshes)

    @app.post("/render", response_model=RenderResponse)
    def render_endpoint(req: RenderRequest):
        try:
            seq = animate(net, rig, body, [req.pose.to_params()],
                          blend_weights=blend_weights)
            camera = Camera.from_params(req.camera, width=req.width,
                                        height=req.height)
            mesh = seq.frames[0]
            if req.kind == "mask":
                img = rasterize_silhouette(mesh, camera, req.sharpness)
            else:
                img = rasterize_normals(mesh, camera, req.sharpness)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return RenderResponse(png_base64=_png_base64(img.data),
                              width=req.width, height=req.height,
                              kind=req.kind)

    @app.post("/metrics", response_model=MetricsResponse)
    def metrics_endpoint(req: MetricsRequest):
        pred = _sequence_from(req.pred)
        gt = _sequence_from(req.gt)
        try:
            report = evaluate(pred, gt, samples=req.samples, seed=req.seed)
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return MetricsResponse(mean_cd_cm=report["mean_cd_cm"],
                               ccv_cm=report.get("ccv_cm"),
                               gt_ccv_cm=report.get("gt_ccv_cm"))

    return app
