"""End-to-end orchestration: config, staged execution, and run persistence.

A run trains both networks from scratch on the target image, applies the
trained reducer, and leaves everything needed to reproduce or inspect the
run under ``<root>/runs/<run_id>/``.  All randomness derives from the
config seed, so a run is determined by (image, ROIs, config).
"""

from __future__ import annotations

import json
import os
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .aarn import AarnModel, forward_aarn, train_aarn
from .idsn import (
    PipelineError,
    classify_patches,
    dump_pairs,
    extract_artifact_pattern,
    synthesize_pairs,
    train_idsn,
)
from .image import (
    Image,
    Roi,
    augment_rois,
    denormalize_values,
    load_image,
    load_rois,
    normalize,
    parse_rois,
    rois_to_json,
    save_image,
    save_unit_png,
    slice_patches,
    _detect_format,
)
from .metrics import MetricReport, Region, compare, find_homogeneous_region

STAGES = (
    "normalize",
    "augment",
    "train_idsn",
    "classify",
    "extract_patterns",
    "synthesize_pairs",
    "train_aarn",
    "infer",
    "denormalize",
    "metrics",
)

_MAX_SEED = 2**64


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a run; the defaults are the full-quality settings."""

    seed: int = 0
    pair_count: int = 100_000
    identity_fraction: float = 0.1
    augment_per_class: int = 500
    batch_size: int = 270
    max_epochs: int = 4
    lr: float = 0.0005
    attention_enabled: bool = True
    classify_stride: int = 32
    synthesis_stride: int = 16
    threshold: float = 0.01

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or isinstance(self.seed, bool):
            raise ValueError(f"seed must be an integer, got {self.seed!r}")
        if not 0 <= self.seed < _MAX_SEED:
            raise ValueError(f"seed must fit in 64 bits, got {self.seed}")
        for name in ("pair_count", "augment_per_class", "batch_size", "max_epochs",
                     "classify_stride", "synthesis_stride"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 <= self.identity_fraction < 1.0:
            raise ValueError(
                f"identity_fraction must be in [0, 1), got {self.identity_fraction}")
        if not isinstance(self.attention_enabled, bool):
            raise ValueError("attention_enabled must be a bool")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc)

    def with_overrides(self, overrides: dict) -> "PipelineConfig":
        return self.from_dict({**self.to_dict(), **overrides})


# desk profile: small enough to train in minutes on a laptop CPU; the batch
# size drops with it so four epochs still provide enough optimizer steps
PROFILES = {
    "desk": {"pair_count": 5_000, "augment_per_class": 200, "batch_size": 27},
}


def apply_profile(config: PipelineConfig, name: str) -> PipelineConfig:
    try:
        overrides = PROFILES[name]
    except KeyError:
        raise ValueError(
            f"unknown profile {name!r}; available: {sorted(PROFILES)}") from None
    return replace(config, **overrides)


@dataclass
class RunRecord:
    """Everything persisted about one run.

    ``output_path`` and ``attention_paths`` are relative to the run
    directory.  Seed, config, and ROIs are captured, so re-running with the
    same input image reproduces the output artifacts byte-for-byte.
    """

    run_id: str
    image_path: str
    image_format: str
    rois: list
    config: PipelineConfig
    idsn_accuracy: float
    loss_history: list
    metrics: list
    output_path: str
    attention_paths: list
    timings: dict
    total_seconds: float

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "image_path": self.image_path,
            "image_format": self.image_format,
            "rois": rois_to_json(self.rois),
            "config": self.config.to_dict(),
            "idsn_accuracy": self.idsn_accuracy,
            "loss_history": list(self.loss_history),
            "metrics": [m.to_dict() for m in self.metrics],
            "output_path": self.output_path,
            "attention_paths": list(self.attention_paths),
            "timings": dict(self.timings),
            "total_seconds": self.total_seconds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        return cls(
            run_id=doc["run_id"],
            image_path=doc["image_path"],
            image_format=doc["image_format"],
            rois=parse_rois(doc["rois"]),
            config=PipelineConfig.from_dict(doc["config"]),
            idsn_accuracy=float(doc["idsn_accuracy"]),
            loss_history=[float(x) for x in doc["loss_history"]],
            metrics=[MetricReport.from_dict(m) for m in doc["metrics"]],
            output_path=doc["output_path"],
            attention_paths=list(doc["attention_paths"]),
            timings={k: float(v) for k, v in doc["timings"].items()},
            total_seconds=float(doc["total_seconds"]),
        )


def atomic_write_text(path, text: str):
    """Write-then-rename so readers never observe a half-written file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path, doc):
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def rng_streams(seed: int) -> dict:
    """Independent per-stage generators derived from the one run seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    names = ("augment", "idsn", "synth", "aarn")
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


class _StageTimer:
    def __init__(self, progress=None):
        self.timings = {}
        self.current = None
        self._progress = progress

    @contextmanager
    def stage(self, name):
        self.current = name
        if self._progress is not None:
            self._progress(name, {})
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = time.perf_counter() - t0


def default_run_root(explicit=None):
    return Path(explicit if explicit is not None
                else os.environ.get("OSAR_DATA_DIR", "."))


def run_pipeline(image_path, roi_path, config: PipelineConfig, *,
                 out_root=None, eval_regions=None, progress=None,
                 save_pairs=False, run_id=None) -> RunRecord:
    """Train on one image and return the persisted record.

    ``eval_regions`` defaults to the most homogeneous 32x32 window of the
    whole image.  ``progress(stage_name, info)`` is invoked at each stage
    entry and after every training epoch with the loss history so far.
    On failure the artifacts written so far stay on disk next to an
    ``error.json`` naming the failed stage.
    """
    t_start = time.perf_counter()
    run_id = run_id or uuid.uuid4().hex[:12]
    run_dir = default_run_root(out_root) / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    source = load_image(image_path)
    fmt = _detect_format(image_path)
    rois = load_rois(roi_path, source)
    _write_json(run_dir / "config.json", config.to_dict())

    timer = _StageTimer(progress)
    try:
        record = _run_stages(source, fmt, rois, config, run_dir, timer,
                             eval_regions, progress, save_pairs,
                             run_id, str(image_path), t_start)
    except BaseException as e:
        _write_json(run_dir / "error.json",
                    {"stage": timer.current, "error": str(e)})
        raise
    _write_json(run_dir / "record.json", record.to_dict())
    return record


def _run_stages(source, fmt, rois, config, run_dir, timer, eval_regions,
                progress, save_pairs, run_id, image_path, t_start):
    if not any(r.label == "A" for r in rois):
        raise PipelineError(
            "no artifact patches detected: the ROI set has no A-type "
            "annotations to harvest artifact patterns from"
        )
    if not any(r.label == "N" for r in rois):
        raise ValueError("ROI set needs at least one N-type annotation")

    rngs = rng_streams(config.seed)

    with timer.stage("normalize"):
        norm = normalize(source)
    with timer.stage("augment"):
        labeled = augment_rois(rois, norm, rngs["augment"], config.augment_per_class)
    with timer.stage("train_idsn"):
        idsn_model, idsn_report = train_idsn(labeled, rngs["idsn"])
    with timer.stage("classify"):
        grid = slice_patches(norm, config.classify_stride)
        grid_labels = classify_patches(idsn_model, grid)
    with timer.stage("extract_patterns"):
        patterns = [extract_artifact_pattern(p.values)
                    for p, label in zip(grid, grid_labels) if label == "A"]
    with timer.stage("synthesize_pairs"):
        pool = slice_patches(norm, config.synthesis_stride)
        pairs = synthesize_pairs(patterns, pool, config.pair_count,
                                 config.identity_fraction, rngs["synth"])
        if save_pairs:
            dump_pairs(pairs, run_dir / "pairs.bin")

    with timer.stage("train_aarn"):
        model = AarnModel(rngs["aarn"])
        on_batch = _epoch_progress(len(pairs), config.batch_size, progress)
        model, history = train_aarn(
            model, pairs, batch_size=config.batch_size,
            max_epochs=config.max_epochs, lr=config.lr, rng=rngs["aarn"],
            attention_enabled=config.attention_enabled,
            threshold=config.threshold, on_progress=on_batch,
        )

    with timer.stage("infer"):
        x = norm.pixels[None, None].astype(model.dtype)
        outs = forward_aarn(model, x, attention_enabled=config.attention_enabled)
    with timer.stage("denormalize"):
        output_image = Image(denormalize_values(outs.output.data[0, 0], norm))
        output_name = f"output.{fmt}"
        save_image(output_image, run_dir / output_name, format=fmt)
        save_unit_png(outs.a1.data[0, 0], run_dir / "attention1.png")
        save_unit_png(outs.a2.data[0, 0], run_dir / "attention2.png")
    with timer.stage("metrics"):
        regions = eval_regions
        if regions is None:
            whole = Region(0, 0, source.width, source.height)
            regions = [find_homogeneous_region(source, whole)]
        # reload what was just written so the reported numbers match what a
        # later `metrics --baseline` on the persisted artifact computes
        persisted = load_image(run_dir / output_name)
        reports = [compare(source, persisted, r) for r in regions]

    return RunRecord(
        run_id=run_id,
        image_path=image_path,
        image_format=fmt,
        rois=list(rois),
        config=config,
        idsn_accuracy=idsn_report.holdout_accuracy,
        loss_history=history,
        metrics=reports,
        output_path=output_name,
        attention_paths=["attention1.png", "attention2.png"],
        timings=timer.timings,
        total_seconds=time.perf_counter() - t_start,
    )


def _epoch_progress(n_pairs, batch_size, progress):
    """Rebuild exact per-epoch mean losses from per-batch callbacks."""
    if progress is None:
        return None
    history = []
    acc = {"sum": 0.0, "count": 0}

    def on_batch(epoch, max_epochs, bi, n_batches, batch_loss):
        size = min(batch_size, n_pairs - bi * batch_size)
        acc["sum"] += batch_loss * size
        acc["count"] += size
        if bi == n_batches - 1:
            history.append(acc["sum"] / acc["count"])
            acc["sum"], acc["count"] = 0.0, 0
            progress("train_aarn", {"loss_history": list(history)})

    return on_batch


def classify_image(image_path, roi_path, config: PipelineConfig):
    """Label map for inspection: the trained classifier over the whole grid.

    Returns (patches, labels) for the stride-``classify_stride`` grid.
    """
    source = load_image(image_path)
    rois = load_rois(roi_path, source)
    rngs = rng_streams(config.seed)
    norm = normalize(source)
    labeled = augment_rois(rois, norm, rngs["augment"], config.augment_per_class)
    model, _ = train_idsn(labeled, rngs["idsn"])
    grid = slice_patches(norm, config.classify_stride)
    return grid, classify_patches(model, grid)


def label_map(image, patches, labels) -> np.ndarray:
    """Paint each patch window white (A) or black (N) onto a unit-range map."""
    out = np.zeros((image.height, image.width))
    size = patches[0].values.shape[0] if patches else 0
    for p, label in zip(patches, labels):
        out[p.y:p.y + size, p.x:p.x + size] = 1.0 if label == "A" else 0.0
    return out


def synthesize_for_dump(image_path, roi_path, config: PipelineConfig):
    """The pair-synthesis front half of the pipeline, for the pair dump."""
    source = load_image(image_path)
    rois = load_rois(roi_path, source)
    if not any(r.label == "A" for r in rois):
        raise PipelineError(
            "no artifact patches detected: the ROI set has no A-type "
            "annotations to harvest artifact patterns from"
        )
    rngs = rng_streams(config.seed)
    norm = normalize(source)
    labeled = augment_rois(rois, norm, rngs["augment"], config.augment_per_class)
    model, _ = train_idsn(labeled, rngs["idsn"])
    grid = slice_patches(norm, config.classify_stride)
    grid_labels = classify_patches(model, grid)
    patterns = [extract_artifact_pattern(p.values)
                for p, label in zip(grid, grid_labels) if label == "A"]
    pool = slice_patches(norm, config.synthesis_stride)
    return synthesize_pairs(patterns, pool, config.pair_count,
                            config.identity_fraction, rngs["synth"])
