"""Pose-conditioned displacement network.

A dense embedding of the 72-dim pose feeds a cascade of residual
hypothesis branches (each a learned tensor contraction producing an N x 3
field); a small shared per-vertex head fuses the hypotheses into the final
displacement. Several hypotheses are kept because a single silhouette is
consistent with many 3D wrinkle configurations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .body import THETA_LEN

CHECKPOINT_MAGIC = b"DRAPECKP"
CHECKPOINT_VERSION = 1


class NetworkError(ValueError):
    """Invalid network configuration or checkpoint data."""


@dataclass
class NetConfig:
    num_vertices: int
    hypothesis_count: int = 3
    embedding_widths: tuple = (256, 256, 512, 512)
    fusion_hidden: int = 32
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.embedding_widths = tuple(int(w) for w in self.embedding_widths)
        if self.hypothesis_count < 1:
            raise NetworkError("hypothesis_count must be >= 1")
        if self.num_vertices < 1:
            raise NetworkError("num_vertices must be >= 1")
        if any(w <= 0 for w in self.embedding_widths) or self.fusion_hidden <= 0:
            raise NetworkError("layer widths must be positive")

    @property
    def embed_dim(self):
        return self.embedding_widths[-1]

    def to_dict(self):
        d = asdict(self)
        d["embedding_widths"] = list(self.embedding_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _param_specs(config):
    """Ordered (name, shape) pairs; the order fixes initialization."""
    specs = []
    prev = THETA_LEN
    for i, width in enumerate(config.embedding_widths):
        specs.append((f"mlp1.w{i}", (prev, width)))
        specs.append((f"mlp1.b{i}", (width,)))
        prev = width
    n = config.num_vertices
    for k in range(config.hypothesis_count):
        specs.append((f"hyp{k}.g", (config.embed_dim, n, 3)))
        specs.append((f"hyp{k}.b", (n, 3)))
    fan_in = 3 * config.hypothesis_count
    specs.append(("mlp2.w0", (fan_in, config.fusion_hidden)))
    specs.append(("mlp2.b0", (config.fusion_hidden,)))
    specs.append(("mlp2.w1", (config.fusion_hidden, 3)))
    specs.append(("mlp2.b1", (3,)))
    return specs


def truncated_normal(rng, shape, std):
    """N(0, std^2) with samples beyond 2 std redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


@dataclass
class DeformationNet:
    config: NetConfig
    params: dict = field(default_factory=dict)  # name -> Tensor

    def param_arrays(self):
        return {name: t.data for name, t in self.params.items()}

    def cast(self, dtype):
        """In-place dtype change of every parameter (f32 training mode)."""
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        return self

    @classmethod
    def from_arrays(cls, config, arrays):
        net = cls(config=config)
        for name, shape in _param_specs(config):
            if name not in arrays:
                raise NetworkError(f"checkpoint missing parameter {name!r}")
            arr = np.asarray(arrays[name])
            if arr.shape != shape:
                raise NetworkError(f"parameter {name!r} has shape {arr.shape}, "
                                   f"expected {shape}")
            net.params[name] = ad.Tensor(arr, requires_grad=True)
        return net


def init_params(config):
    """Truncated-normal weights, zero biases, deterministic per seed."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    net = DeformationNet(config=config)
    for name, shape in _param_specs(config):
        is_bias = name.split(".")[-1].startswith("b")
        data = (np.zeros(shape) if is_bias
                else truncated_normal(rng, shape, config.init_std))
        net.params[name] = ad.Tensor(data, requires_grad=True)
    return net


def embed_pose(net, theta):
    """theta (72,) -> rectified embedding X (embed_dim,)."""
    theta = np.asarray(theta, dtype=net.params["mlp1.w0"].dtype).reshape(-1)
    if len(theta) != THETA_LEN:
        raise NetworkError(f"theta must have {THETA_LEN} values")
    if not np.all(np.isfinite(theta)):
        raise NetworkError("theta contains non-finite values")
    x = ad.Tensor(theta[None, :])
    for i in range(len(net.config.embedding_widths)):
        x = ad.relu(x @ net.params[f"mlp1.w{i}"] + net.params[f"mlp1.b{i}"])
    return x.reshape((net.config.embed_dim,))


def hypothesize(net, embedding):
    """Residual cascade of rectified displacement hypotheses."""
    if embedding.shape != (net.config.embed_dim,):
        raise NetworkError(f"embedding must have shape ({net.config.embed_dim},)")
    hyps = []
    prev = None
    for k in range(net.config.hypothesis_count):
        drive = ad.contract_embed(embedding, net.params[f"hyp{k}.g"]) \
            + net.params[f"hyp{k}.b"]
        d = ad.relu(drive if prev is None else prev + drive)
        hyps.append(d)
        prev = d
    return tuple(hyps)


def fuse(net, hypotheses):
    """Shared per-vertex head over concatenated hypotheses -> (N, 3) meters."""
    expected = net.config.hypothesis_count
    if len(hypotheses) != expected:
        raise NetworkError(f"expected {expected} hypotheses, got {len(hypotheses)}")
    x = hypotheses[0] if expected == 1 else ad.concatenate(hypotheses, axis=1)
    h = ad.relu(x @ net.params["mlp2.w0"] + net.params["mlp2.b0"])
    return h @ net.params["mlp2.w1"] + net.params["mlp2.b1"]


def predict_displacement(net, theta):
    """Full pose -> displacement forward pass (tape Tensor, (N, 3))."""
    return fuse(net, hypothesize(net, embed_pose(net, theta)))


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, config, params, extra=None):
    """Single-file container: magic, JSON header, little-endian f32 blobs.

    params maps names to Tensors or ndarrays; extra (e.g. trained garment
    blend weights) is merged in. Output bytes depend only on the values.
    """
    arrays = {}
    for name, value in params.items():
        arrays[name] = value.data if isinstance(value, ad.Tensor) else np.asarray(value)
    for name, value in (extra or {}).items():
        arrays[name] = value.data if isinstance(value, ad.Tensor) else np.asarray(value)

    names = sorted(arrays)
    tensors = {}
    offset = 0
    blobs = []
    for name in names:
        blob = np.ascontiguousarray(arrays[name], dtype="<f4").tobytes()
        tensors[name] = {"shape": list(arrays[name].shape), "dtype": "f32",
                         "offset": offset, "nbytes": len(blob)}
        blobs.append(blob)
        offset += len(blob)
    header = {"version": CHECKPOINT_VERSION, "config": config.to_dict(),
              "seed": config.seed, "tensors": tensors}
    header_bytes = json.dumps(header, sort_keys=True,
                              separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (NetConfig, {name: float32 ndarray})."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise NetworkError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != CHECKPOINT_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version "
                               f"{header.get('version')!r}")
        payload = fh.read()
    arrays = {}
    for name, entry in header["tensors"].items():
        start = entry["offset"]
        blob = payload[start:start + entry["nbytes"]]
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(entry["shape"]).copy()
    return NetConfig.from_dict(header["config"]), arrays


def net_from_checkpoint(path):
    """Rebuild the network; non-network tensors are returned separately."""
    config, arrays = load_checkpoint(path)
    names = {name for name, _ in _param_specs(config)}
    net = DeformationNet.from_arrays(config, {k: v for k, v in arrays.items()
                                              if k in names})
    rest = {k: v for k, v in arrays.items() if k not in names}
    return net, rest
