"""HTTP API: uploads, ROI round trips, async runs, artifact downloads."""

import io
import json
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image as PILImage

from osar.image import Image, save_image
from osar.service import create_app
from synthdata import make_two_class_image, two_class_rois


def _wait_done(client, run_id, timeout=120.0):
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        doc = client.get(f"/api/runs/{run_id}").json()
        if doc["status"] in ("done", "error"):
            return doc
        time.sleep(0.1)
    raise AssertionError(f"run {run_id} did not finish within {timeout}s")


TINY_OVERRIDES = {"seed": 31, "pair_count": 120, "augment_per_class": 40,
                  "batch_size": 27, "max_epochs": 1}


@pytest.fixture(scope="module")
def client(tmp_path_factory):
    data_dir = tmp_path_factory.mktemp("svc")
    with TestClient(create_app(data_dir)) as c:
        yield c


@pytest.fixture(scope="module")
def raw_image_bytes():
    image = make_two_class_image(np.random.default_rng(11), size=160)
    return image.pixels.astype("<f4").tobytes()


@pytest.fixture(scope="module")
def image_id(client, raw_image_bytes):
    resp = client.post("/api/images?format=raw&width=160&height=160",
                       content=raw_image_bytes)
    assert resp.status_code == 200
    doc = resp.json()
    assert (doc["width"], doc["height"]) == (160, 160)
    return doc["image_id"]


def _roi_doc(count_a=3, count_n=3):
    rois = two_class_rois(count_a, count_n, size=160)
    return {"patch_size": 32,
            "rois": [{"x": r.x, "y": r.y, "label": r.label} for r in rois]}


class TestImages:
    def test_upload_png(self, client):
        buf = io.BytesIO()
        PILImage.fromarray(np.full((40, 50), 128, dtype=np.uint8), "L").save(
            buf, format="PNG")
        resp = client.post("/api/images?format=png", content=buf.getvalue())
        assert resp.status_code == 200
        assert resp.json()["width"] == 50

    def test_upload_bad_format_param(self, client):
        resp = client.post("/api/images?format=tiff", content=b"xx")
        assert resp.status_code == 400

    def test_upload_truncated_raw(self, client):
        resp = client.post("/api/images?format=raw&width=64&height=64",
                           content=b"\0" * 100)
        assert resp.status_code == 400

    def test_upload_raw_needs_dims(self, client, raw_image_bytes):
        resp = client.post("/api/images?format=raw", content=raw_image_bytes)
        assert resp.status_code == 400

    def test_pixel_preview(self, client, image_id):
        resp = client.get(f"/api/images/{image_id}/pixels")
        assert resp.status_code == 200
        assert resp.headers["content-type"] == "image/png"
        with PILImage.open(io.BytesIO(resp.content)) as im:
            assert im.size == (160, 160)
            assert im.mode == "L"

    def test_pixel_preview_scaled(self, client, image_id):
        resp = client.get(f"/api/images/{image_id}/pixels?scale=0.5")
        with PILImage.open(io.BytesIO(resp.content)) as im:
            assert im.size == (80, 80)
        assert client.get(f"/api/images/{image_id}/pixels?scale=0").status_code == 400
        assert client.get(f"/api/images/{image_id}/pixels?scale=99").status_code == 400

    def test_unknown_image_404(self, client):
        assert client.get("/api/images/000000000000/pixels").status_code == 404
        assert client.get("/api/images/not-an-id/pixels").status_code == 404


class TestRois:
    def test_put_then_get_round_trip(self, client, image_id):
        doc = _roi_doc()
        resp = client.put(f"/api/images/{image_id}/rois", json=doc)
        assert resp.status_code == 204
        got = client.get(f"/api/images/{image_id}/rois").json()
        assert got == doc

    def test_get_before_put_is_empty(self, client, raw_image_bytes):
        resp = client.post("/api/images?format=raw&width=160&height=160",
                           content=raw_image_bytes)
        other = resp.json()["image_id"]
        assert client.get(f"/api/images/{other}/rois").json()["rois"] == []

    def test_wrong_patch_size_rejected(self, client, image_id):
        doc = _roi_doc()
        doc["patch_size"] = 16
        resp = client.put(f"/api/images/{image_id}/rois", json=doc)
        assert resp.status_code == 400

    def test_out_of_bounds_roi_rejected(self, client, image_id):
        doc = {"patch_size": 32, "rois": [{"x": 150, "y": 0, "label": "A"}]}
        resp = client.put(f"/api/images/{image_id}/rois", json=doc)
        assert resp.status_code == 400

    def test_unknown_image_404(self, client):
        resp = client.put("/api/images/000000000000/rois", json=_roi_doc())
        assert resp.status_code == 404


@pytest.fixture(scope="module")
def finished(client, image_id):
    client.put(f"/api/images/{image_id}/rois", json=_roi_doc())
    resp = client.post(f"/api/images/{image_id}/runs", json=TINY_OVERRIDES)
    assert resp.status_code == 200
    run_id = resp.json()["run_id"]
    status = _wait_done(client, run_id)
    return run_id, status


class TestRuns:
    def test_run_reaches_done(self, finished):
        run_id, status = finished
        assert status["status"] == "done", status.get("error")
        assert len(status["loss_history"]) == TINY_OVERRIDES["max_epochs"]
        assert status["metrics"] and "snr" in status["metrics"][0]

    def test_status_shape(self, finished):
        _, status = finished
        assert {"status", "stage", "loss_history", "metrics"} <= set(status)

    def test_metrics_match_persisted_record(self, client, finished, tmp_path_factory):
        run_id, status = finished
        data_dir = client.app.state.store.data_dir
        record = json.loads((data_dir / "runs" / run_id / "record.json").read_text())
        assert status["metrics"] == record["metrics"]
        assert status["loss_history"] == record["loss_history"]

    def test_output_and_attention_downloads(self, client, finished):
        run_id, _ = finished
        out = client.get(f"/api/runs/{run_id}/output.png")
        assert out.status_code == 200
        with PILImage.open(io.BytesIO(out.content)) as im:
            assert im.size == (160, 160)
        for step in (1, 2):
            resp = client.get(f"/api/runs/{run_id}/attention/{step}.png")
            assert resp.status_code == 200
            assert resp.headers["content-type"] == "image/png"
        assert client.get(f"/api/runs/{run_id}/attention/3.png").status_code == 404

    def test_concurrent_run_on_same_image_409(self, client, raw_image_bytes):
        resp = client.post("/api/images?format=raw&width=160&height=160",
                           content=raw_image_bytes)
        busy = resp.json()["image_id"]
        client.put(f"/api/images/{busy}/rois", json=_roi_doc())
        first = client.post(f"/api/images/{busy}/runs", json=TINY_OVERRIDES)
        assert first.status_code == 200
        second = client.post(f"/api/images/{busy}/runs", json=TINY_OVERRIDES)
        assert second.status_code == 409
        status = _wait_done(client, first.json()["run_id"])
        assert status["status"] == "done"
        third = client.post(f"/api/images/{busy}/runs", json=TINY_OVERRIDES)
        assert third.status_code == 200
        _wait_done(client, third.json()["run_id"])

    def test_run_without_rois_400(self, client, raw_image_bytes):
        resp = client.post("/api/images?format=raw&width=160&height=160",
                           content=raw_image_bytes)
        bare = resp.json()["image_id"]
        assert client.post(f"/api/images/{bare}/runs", json={}).status_code == 400

    def test_bad_config_override_400(self, client, image_id):
        resp = client.post(f"/api/images/{image_id}/runs",
                           json={"pair_cuont": 10})
        assert resp.status_code == 400
        resp = client.post(f"/api/images/{image_id}/runs",
                           json={"profile": "cluster"})
        assert resp.status_code == 400

    def test_failing_run_reports_error_status(self, client, raw_image_bytes):
        resp = client.post("/api/images?format=raw&width=160&height=160",
                           content=raw_image_bytes)
        doomed = resp.json()["image_id"]
        rois = two_class_rois(0, 3, size=160)
        doc = {"patch_size": 32,
               "rois": [{"x": r.x, "y": r.y, "label": r.label} for r in rois]}
        client.put(f"/api/images/{doomed}/rois", json=doc)
        resp = client.post(f"/api/images/{doomed}/runs", json=TINY_OVERRIDES)
        status = _wait_done(client, resp.json()["run_id"])
        assert status["status"] == "error"
        assert "no artifact patches" in status["error"]

    def test_unknown_run_404(self, client):
        assert client.get("/api/runs/000000000000").status_code == 404
        assert client.get("/api/runs/000000000000/output.png").status_code == 404

    def test_done_run_survives_restart(self, client, finished):
        run_id, status = finished
        fresh = create_app(client.app.state.store.data_dir)
        with TestClient(fresh) as c2:
            doc = c2.get(f"/api/runs/{run_id}").json()
            assert doc["status"] == "done"
            assert doc["metrics"] == status["metrics"]
