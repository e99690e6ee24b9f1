"""HTTP layer: request validation, payload shapes, and error mapping."""

import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from drape.data import save_dataset
from drape.network import NetConfig, init_params, save_checkpoint
from drape.service import create_app
from drape.synth import SynthConfig, default_scene, synth_sequence
from drape.train import TrainConfig, train

ZERO_POSE = {"theta": [0.0] * 72}


@pytest.fixture(scope="module")
def service(tmp_path_factory):
    body, rig = default_scene()
    dataset, _ = synth_sequence(SynthConfig(frames=4, width=24, height=24,
                                            seed=1), body, rig)
    data_dir = str(tmp_path_factory.mktemp("scene"))
    save_dataset(dataset, data_dir, body=body, rig=rig)
    run = tmp_path_factory.mktemp("run")
    net = init_params(NetConfig(num_vertices=rig.num_vertices, seed=0))
    res = train(dataset, body, rig, net, TrainConfig(epochs=1, batch_size=4),
                str(run))
    app = create_app(checkpoint=res.best_path, data_dir=data_dir)
    return TestClient(app), data_dir


def test_healthz_reports_scene_dimensions(service):
    client, _ = service
    r = client.get("/healthz")
    assert r.status_code == 200
    body = r.json()
    assert body["status"] == "ok"
    assert body["garment_vertices"] == 200
    assert body["joints"] == 24
    assert body["hypotheses"] == 3


def test_animate_returns_meshes(service):
    client, _ = service
    r = client.post("/animate", json={"poses": [ZERO_POSE, ZERO_POSE]})
    assert r.status_code == 200
    meshes = r.json()["meshes"]
    assert len(meshes) == 2
    v = np.asarray(meshes[0]["vertices"])
    assert v.shape == (200, 3) and np.isfinite(v).all()
    assert len(meshes[0]["faces"]) == 360
    # same pose in one request: identical reconstructions
    assert meshes[0]["vertices"] == meshes[1]["vertices"]
    again = client.post("/animate", json={"poses": [ZERO_POSE]})
    assert again.json()["meshes"][0]["vertices"] == meshes[0]["vertices"]


def test_animate_rejects_bad_pose_lengths(service):
    client, _ = service
    r = client.post("/animate", json={"poses": [{"theta": [0.0] * 7}]})
    assert r.status_code == 422
    r = client.post("/animate", json={"poses": [{"theta": [0.0] * 72,
                                                 "beta": [0.0] * 3}]})
    assert r.status_code == 422
    r = client.post("/animate", json={"poses": []})
    assert r.status_code == 422


def test_render_returns_decodable_pngs(service):
    client, _ = service
    req = {"pose": ZERO_POSE, "width": 48, "height": 40, "kind": "mask"}
    r = client.post("/render", json=req)
    assert r.status_code == 200
    out = r.json()
    assert (out["width"], out["height"], out["kind"]) == (48, 40, "mask")
    img = PILImage.open(io.BytesIO(base64.b64decode(out["png_base64"])))
    assert img.size == (48, 40) and img.mode == "L"

    req["kind"] = "normal"
    out = client.post("/render", json=req).json()
    img = PILImage.open(io.BytesIO(base64.b64decode(out["png_base64"])))
    assert img.size == (48, 40) and img.mode == "RGB"
    arr = np.asarray(img)
    assert arr.min() >= 0 and arr.max() <= 255


def test_render_validates_camera_and_kind(service):
    client, _ = service
    r = client.post("/render", json={"pose": ZERO_POSE, "camera": [1.0]})
    assert r.status_code == 422
    r = client.post("/render", json={"pose": ZERO_POSE, "kind": "depth"})
    assert r.status_code == 422


def test_metrics_round_trip_and_mismatch(service):
    client, _ = service
    square = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0],
              [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]]
    faces = [[0, 1, 2], [0, 2, 3]]
    seq = {"vertices": [square, square], "faces": faces}
    r = client.post("/metrics", json={"pred": seq, "gt": seq,
                                      "samples": 200})
    assert r.status_code == 200
    out = r.json()
    assert out["mean_cd_cm"] < 1e-9
    assert out["ccv_cm"] == out["gt_ccv_cm"]

    one = {"vertices": [square], "faces": faces}
    r = client.post("/metrics", json={"pred": one, "gt": seq})
    assert r.status_code == 400
    assert "frames" in r.json()["detail"]


def test_metrics_rejects_malformed_meshes(service):
    client, _ = service
    bad = {"vertices": [[[0.0, 0.0], [1.0, 0.0]]], "faces": [[0, 1, 1]]}
    ok = {"vertices": [[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]],
          "faces": [[0, 1, 2]]}
    r = client.post("/metrics", json={"pred": bad, "gt": ok})
    assert r.status_code == 400


def test_create_app_rejects_mismatched_checkpoint(service, tmp_path):
    _, data_dir = service
    other = init_params(NetConfig(num_vertices=10, seed=0))
    path = str(tmp_path / "small.bin")
    save_checkpoint(path, other.config, other.params)
    with pytest.raises(ValueError, match="vertices"):
        create_app(checkpoint=path, data_dir=data_dir)
