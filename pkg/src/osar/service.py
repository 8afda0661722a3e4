"""HTTP API for the annotation UI.

Uploads, ROI documents, and run artifacts live under one data directory:
``images/<image_id>.<fmt>`` plus ``images/<image_id>.rois.json``, and
``runs/<run_id>/`` as written by the pipeline.  Runs execute on a single
background worker thread; an image can have at most one queued-or-running
run at a time (409 on a second submission).
"""

from __future__ import annotations

import io
import json
import queue
import re
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Request, Response
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from PIL import Image as PILImage

from .image import FormatError, load_image, parse_rois, rois_to_json
from .pipeline import PipelineConfig, apply_profile, atomic_write_text, run_pipeline

_ID_RE = re.compile(r"^[0-9a-f]{12}$")
_FORMATS = ("png", "pgm", "raw")
_MAX_PREVIEW_SIDE = 4096


def _render_preview(pixels, vmin, vmax, scale=1.0):
    """8-bit PNG bytes; intensity windowed to [vmin, vmax], nearest-resized."""
    span = vmax - vmin
    if span <= 0:
        arr = np.zeros(pixels.shape, dtype=np.uint8)
    else:
        unit = np.clip((pixels - vmin) / span, 0.0, 1.0)
        arr = np.rint(unit * 255.0).astype(np.uint8)
    im = PILImage.fromarray(arr, mode="L")
    if scale != 1.0:
        w = max(1, round(im.width * scale))
        h = max(1, round(im.height * scale))
        if max(w, h) > _MAX_PREVIEW_SIDE:
            raise ValueError(f"preview would exceed {_MAX_PREVIEW_SIDE}px")
        im = im.resize((w, h), PILImage.NEAREST)
    buf = io.BytesIO()
    im.save(buf, format="PNG")
    return buf.getvalue()


class _Store:
    """Disk layout plus the in-memory run state shared with the worker."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        (self.data_dir / "images").mkdir(parents=True, exist_ok=True)
        (self.data_dir / "runs").mkdir(parents=True, exist_ok=True)
        self.lock = threading.Lock()
        self.runs = {}          # run_id -> mutable status dict
        self.active_image = {}  # image_id -> run_id while queued/running
        self.jobs = queue.Queue()
        self.worker = threading.Thread(target=self._drain, daemon=True)
        self.worker.start()

    # -- images ------------------------------------------------------------

    def image_path(self, image_id):
        for fmt in _FORMATS:
            p = self.data_dir / "images" / f"{image_id}.{fmt}"
            if p.exists():
                return p
        return None

    def roi_path(self, image_id):
        return self.data_dir / "images" / f"{image_id}.rois.json"

    def save_upload(self, body, fmt, width=None, height=None):
        image_id = uuid.uuid4().hex[:12]
        path = self.data_dir / "images" / f"{image_id}.{fmt}"
        path.write_bytes(body)
        if fmt == "raw":
            if not width or not height:
                path.unlink()
                raise FormatError("raw uploads need width and height query params")
            sidecar = {"width": int(width), "height": int(height), "dtype": "f32"}
            Path(str(path) + ".json").write_text(json.dumps(sidecar))
        try:
            image = load_image(path)
        except FormatError:
            path.unlink(missing_ok=True)
            Path(str(path) + ".json").unlink(missing_ok=True)
            raise
        return image_id, image

    # -- runs ----------------------------------------------------------------

    def submit_run(self, image_id, config):
        run_id = uuid.uuid4().hex[:12]
        with self.lock:
            if image_id in self.active_image:
                return None  # caller turns this into a 409
            self.active_image[image_id] = run_id
            self.runs[run_id] = {
                "status": "queued",
                "stage": None,
                "loss_history": [],
                "metrics": None,
                "image_id": image_id,
                "error": None,
            }
        self.jobs.put((run_id, image_id, config))
        return run_id

    def _drain(self):
        while True:
            run_id, image_id, config = self.jobs.get()
            self._execute(run_id, image_id, config)
            self.jobs.task_done()

    def _execute(self, run_id, image_id, config):
        with self.lock:
            state = self.runs[run_id]
            state["status"] = "running"

        def progress(stage, info):
            with self.lock:
                state["stage"] = stage
                if "loss_history" in info:
                    state["loss_history"] = info["loss_history"]

        try:
            record = run_pipeline(
                self.image_path(image_id), self.roi_path(image_id), config,
                out_root=self.data_dir, run_id=run_id, progress=progress,
            )
        except Exception as e:  # any failure becomes a terminal error status
            with self.lock:
                state["status"] = "error"
                state["error"] = str(e)
                self.active_image.pop(image_id, None)
            return
        with self.lock:
            state["status"] = "done"
            state["loss_history"] = list(record.loss_history)
            state["metrics"] = [m.to_dict() for m in record.metrics]
            self.active_image.pop(image_id, None)

    def run_status(self, run_id):
        with self.lock:
            if run_id in self.runs:
                st = self.runs[run_id]
                return {
                    "status": st["status"],
                    "stage": st["stage"],
                    "loss_history": list(st["loss_history"]),
                    "metrics": st["metrics"],
                    "error": st["error"],
                }
        # not in memory: a previous process may have persisted it
        run_dir = self.data_dir / "runs" / run_id
        record_path = run_dir / "record.json"
        if record_path.exists():
            doc = json.loads(record_path.read_text())
            return {
                "status": "done",
                "stage": "metrics",
                "loss_history": doc["loss_history"],
                "metrics": doc["metrics"],
                "error": None,
            }
        error_path = run_dir / "error.json"
        if error_path.exists():
            doc = json.loads(error_path.read_text())
            return {
                "status": "error",
                "stage": doc.get("stage"),
                "loss_history": [],
                "metrics": None,
                "error": doc.get("error"),
            }
        return None

    def run_dir(self, run_id):
        return self.data_dir / "runs" / run_id


def create_app(data_dir=".") -> FastAPI:
    store = _Store(data_dir)
    app = FastAPI(title="osar")
    app.state.store = store
    # the annotator page may be served from another origin (file://, a dev
    # server); the API is local and unauthenticated, so open CORS is fine
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])

    def bad_request(message):
        return JSONResponse({"detail": message}, status_code=400)

    def not_found(what):
        return JSONResponse({"detail": f"unknown {what}"}, status_code=404)

    @app.post("/api/images")
    async def upload_image(request: Request, format: str = Query(...),
                           width: int | None = None, height: int | None = None):
        if format not in _FORMATS:
            return bad_request(f"format must be one of {_FORMATS}")
        body = await request.body()
        if not body:
            return bad_request("empty upload")
        try:
            image_id, image = store.save_upload(body, format, width, height)
        except FormatError as e:
            return bad_request(str(e))
        return {"image_id": image_id, "width": image.width, "height": image.height}

    @app.get("/api/images/{image_id}/pixels")
    def image_pixels(image_id: str, scale: float = 1.0):
        if not _ID_RE.match(image_id) or store.image_path(image_id) is None:
            return not_found("image")
        if not 0 < scale <= 16:
            return bad_request("scale must be in (0, 16]")
        image = load_image(store.image_path(image_id))
        lo, hi = float(image.pixels.min()), float(image.pixels.max())
        try:
            png = _render_preview(image.pixels, lo, hi, scale)
        except ValueError as e:
            return bad_request(str(e))
        return Response(png, media_type="image/png")

    @app.put("/api/images/{image_id}/rois")
    def put_rois(image_id: str, doc: dict):
        path = store.image_path(image_id)
        if not _ID_RE.match(image_id) or path is None:
            return not_found("image")
        try:
            rois = parse_rois(doc, load_image(path))
        except FormatError as e:
            return bad_request(str(e))
        atomic_write_text(store.roi_path(image_id),
                          json.dumps(rois_to_json(rois), indent=2) + "\n")
        return Response(status_code=204)

    @app.get("/api/images/{image_id}/rois")
    def get_rois(image_id: str):
        if not _ID_RE.match(image_id) or store.image_path(image_id) is None:
            return not_found("image")
        path = store.roi_path(image_id)
        if not path.exists():
            return {"patch_size": 32, "rois": []}
        return json.loads(path.read_text())

    @app.post("/api/images/{image_id}/runs")
    def submit_run(image_id: str, overrides: dict | None = None):
        if not _ID_RE.match(image_id) or store.image_path(image_id) is None:
            return not_found("image")
        if not store.roi_path(image_id).exists():
            return bad_request("no ROIs uploaded for this image")
        overrides = dict(overrides or {})
        profile = overrides.pop("profile", None)
        try:
            config = PipelineConfig()
            if profile is not None:
                config = apply_profile(config, profile)
            config = config.with_overrides(overrides)
        except (TypeError, ValueError) as e:
            return bad_request(str(e))
        run_id = store.submit_run(image_id, config)
        if run_id is None:
            return JSONResponse(
                {"detail": "a run is already active for this image"},
                status_code=409,
            )
        return {"run_id": run_id}

    @app.get("/api/runs/{run_id}")
    def run_status(run_id: str):
        if not _ID_RE.match(run_id):
            return not_found("run")
        status = store.run_status(run_id)
        if status is None:
            return not_found("run")
        return status

    @app.get("/api/runs/{run_id}/output.png")
    def run_output(run_id: str):
        if not _ID_RE.match(run_id):
            return not_found("run")
        record_path = store.run_dir(run_id) / "record.json"
        if not record_path.exists():
            return not_found("run output")
        record = json.loads(record_path.read_text())
        output = load_image(store.run_dir(run_id) / record["output_path"])
        # window the preview to the input image's range so input and output
        # previews are directly comparable
        source = load_image(record["image_path"])
        lo, hi = float(source.pixels.min()), float(source.pixels.max())
        return Response(_render_preview(output.pixels, lo, hi),
                        media_type="image/png")

    @app.get("/api/runs/{run_id}/attention/{step}.png")
    def run_attention(run_id: str, step: int):
        if not _ID_RE.match(run_id) or step not in (1, 2):
            return not_found("attention map")
        path = store.run_dir(run_id) / f"attention{step}.png"
        if not path.exists():
            return not_found("attention map")
        return Response(path.read_bytes(), media_type="image/png")

    return app
