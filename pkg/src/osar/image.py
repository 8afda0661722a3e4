"""Image loading/saving, [0,1] normalization, ROI handling, and patch slicing.

Supported on-disk formats:
  * 8-bit grayscale PNG
  * 16-bit binary PGM (P5)
  * raw little-endian float32 with a JSON sidecar at ``<path>.json``
    holding ``{"width": ..., "height": ..., "dtype": "f32"}``

ROI files are JSON: ``{"patch_size": 32, "rois": [{"x", "y", "label"}, ...]}``
with labels "A" (artifacts on a uniform background) or "N" (everything else).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

PATCH_SIZE = 32


class FormatError(ValueError):
    """Malformed or unsupported image / ROI file."""


@dataclass
class Image:
    """2-d grayscale image; pixels are float64, row-major (height, width).

    ``value_min``/``value_max`` record the original physical range at
    normalization time so the mapping can be inverted exactly.
    """

    pixels: np.ndarray
    value_min: float | None = None
    value_max: float | None = None

    def __post_init__(self):
        self.pixels = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise FormatError(f"image pixels must be 2-d, got {self.pixels.ndim}-d")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class Roi:
    """Top-left corner of a 32x32 annotated window plus its class label."""

    x: int
    y: int
    label: str


@dataclass
class Patch:
    """32x32 window of a normalized image and where it came from."""

    values: np.ndarray
    x: int
    y: int


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def _detect_format(path):
    suffix = Path(path).suffix.lower()
    if suffix == ".png":
        return "png"
    if suffix == ".pgm":
        return "pgm"
    if suffix in (".raw", ".f32", ".bin"):
        return "raw"
    raise FormatError(f"cannot infer image format from {path!r}; pass format explicitly")


def _read_pgm(path):
    data = Path(path).read_bytes()
    # header: P5 <width> <height> <maxval> followed by one whitespace byte
    fields = []
    pos = 0
    while len(fields) < 4:
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PGM header")
        ch = data[pos:pos + 1]
        if ch == b"#":
            pos = data.find(b"\n", pos)
            if pos < 0:
                raise FormatError(f"{path}: truncated PGM header")
            continue
        if ch.isspace():
            pos += 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1  # single whitespace after maxval
    if fields[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (P5) file")
    try:
        width, height, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError as e:
        raise FormatError(f"{path}: bad PGM header field") from e
    if not (0 < maxval < 65536):
        raise FormatError(f"{path}: PGM maxval {maxval} out of range")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    payload = data[pos:pos + width * height * dtype.itemsize]
    if len(payload) != width * height * dtype.itemsize:
        raise FormatError(f"{path}: PGM payload truncated")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width).astype(np.float64)


def _write_pgm(image, path):
    pix = np.clip(np.rint(image.pixels), 0, 65535).astype(">u2")
    header = f"P5\n{image.width} {image.height}\n65535\n".encode()
    Path(path).write_bytes(header + pix.tobytes())


def _read_raw(path):
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise FormatError(f"{path}: missing sidecar {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        width, height = int(meta["width"]), int(meta["height"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{sidecar}: bad sidecar JSON") from e
    if meta.get("dtype", "f32") != "f32":
        raise FormatError(f"{sidecar}: unsupported dtype {meta.get('dtype')!r}")
    payload = Path(path).read_bytes()
    if len(payload) != width * height * 4:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, sidecar says {width}x{height} f32"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(height, width).astype(np.float64)


def _write_raw(image, path):
    Path(path).write_bytes(image.pixels.astype("<f4").tobytes())
    sidecar = {"width": image.width, "height": image.height, "dtype": "f32"}
    Path(str(path) + ".json").write_text(json.dumps(sidecar))


def load_image(path, format=None):
    fmt = format or _detect_format(path)
    if fmt == "png":
        with PILImage.open(path) as im:
            if im.mode != "L":
                im = im.convert("L")
            pixels = np.asarray(im, dtype=np.float64)
    elif fmt == "pgm":
        pixels = _read_pgm(path)
    elif fmt == "raw":
        pixels = _read_raw(path)
    else:
        raise FormatError(f"unknown image format {fmt!r}")
    return Image(pixels)


def save_image(image, path, format=None):
    fmt = format or _detect_format(path)
    if fmt == "png":
        arr = np.clip(np.rint(image.pixels), 0, 255).astype(np.uint8)
        PILImage.fromarray(arr, mode="L").save(path)
    elif fmt == "pgm":
        _write_pgm(image, path)
    elif fmt == "raw":
        _write_raw(image, path)
    else:
        raise FormatError(f"unknown image format {fmt!r}")


def save_unit_png(values, path):
    """Store an array of [0,1] values (e.g. an attention map) as 8-bit PNG."""
    arr = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def normalize(image):
    """Linearly map pixels to [0,1], remembering the original range."""
    lo = float(image.pixels.min())
    hi = float(image.pixels.max())
    if hi == lo:
        warnings.warn(f"constant image (value {lo}); normalizing to all zeros")
        return Image(np.zeros_like(image.pixels), value_min=lo, value_max=hi)
    return Image((image.pixels - lo) / (hi - lo), value_min=lo, value_max=hi)


def denormalize(image):
    """Invert ``normalize`` using the stored range."""
    if image.value_min is None or image.value_max is None:
        raise ValueError("denormalize needs an image produced by normalize")
    span = image.value_max - image.value_min
    return Image(image.pixels * span + image.value_min)


def denormalize_values(values, image):
    """Map a [0,1] array back to ``image``'s recorded physical range."""
    if image.value_min is None or image.value_max is None:
        raise ValueError("image carries no recorded range")
    return np.asarray(values, dtype=np.float64) * (image.value_max - image.value_min) + image.value_min


# ---------------------------------------------------------------------------
# ROI files
# ---------------------------------------------------------------------------

def load_rois(path, image=None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: not valid JSON") from e
    return parse_rois(doc, image)


def parse_rois(doc, image=None):
    """Validate an ROI JSON document; bounds-check against ``image`` if given."""
    if not isinstance(doc, dict) or "rois" not in doc:
        raise FormatError("ROI document must be an object with a 'rois' list")
    if doc.get("patch_size") != PATCH_SIZE:
        raise FormatError(f"patch_size must be {PATCH_SIZE}, got {doc.get('patch_size')}")
    rois = []
    for i, entry in enumerate(doc["rois"]):
        try:
            roi = Roi(x=int(entry["x"]), y=int(entry["y"]), label=str(entry["label"]))
        except (KeyError, TypeError, ValueError) as e:
            raise FormatError(f"roi #{i}: bad entry {entry!r}") from e
        if roi.label not in ("A", "N"):
            raise FormatError(f"roi #{i}: label must be 'A' or 'N', got {roi.label!r}")
        if roi.x < 0 or roi.y < 0:
            raise FormatError(f"roi #{i}: negative origin ({roi.x}, {roi.y})")
        if image is not None and (roi.x + PATCH_SIZE > image.width or roi.y + PATCH_SIZE > image.height):
            raise FormatError(
                f"roi #{i}: window ({roi.x}, {roi.y}) exceeds {image.width}x{image.height} image"
            )
        rois.append(roi)
    return rois


def save_rois(rois, path):
    doc = rois_to_json(rois)
    Path(path).write_text(json.dumps(doc, indent=2))


def rois_to_json(rois):
    return {
        "patch_size": PATCH_SIZE,
        "rois": [{"x": r.x, "y": r.y, "label": r.label} for r in rois],
    }


def roi_patch(image, roi):
    """Extract the 32x32 window an ROI points at."""
    return Patch(
        values=image.pixels[roi.y:roi.y + PATCH_SIZE, roi.x:roi.x + PATCH_SIZE].copy(),
        x=roi.x,
        y=roi.y,
    )


# ---------------------------------------------------------------------------
# patch slicing and augmentation
# ---------------------------------------------------------------------------

def _grid_origins(extent, stride):
    origins = list(range(0, extent - PATCH_SIZE + 1, stride))
    if origins[-1] != extent - PATCH_SIZE:
        origins.append(extent - PATCH_SIZE)  # clamp the remainder to the edge
    return origins


def slice_patches(image, stride):
    """Tile the image with 32x32 patches at the given stride.

    The last row/column of patches is clamped to the image edge so border
    pixels are always covered.
    """
    if stride < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    if image.width < PATCH_SIZE or image.height < PATCH_SIZE:
        raise ValueError(
            f"image {image.width}x{image.height} smaller than {PATCH_SIZE}x{PATCH_SIZE}"
        )
    patches = []
    for y in _grid_origins(image.height, stride):
        for x in _grid_origins(image.width, stride):
            patches.append(Patch(image.pixels[y:y + PATCH_SIZE, x:x + PATCH_SIZE].copy(), x, y))
    return patches


@dataclass
class LabeledPatch:
    values: np.ndarray
    label: str


# flips/rotations operate on the ROI window itself; translations re-window the image
AUGMENTATIONS = ("hflip", "vflip", "rot90", "rot180", "rot270", "translate")


def apply_flip_rotation(values, kind):
    if kind == "hflip":
        return values[:, ::-1].copy()
    if kind == "vflip":
        return values[::-1, :].copy()
    if kind == "rot90":
        return np.rot90(values, 1).copy()
    if kind == "rot180":
        return np.rot90(values, 2).copy()
    if kind == "rot270":
        return np.rot90(values, 3).copy()
    raise ValueError(f"unknown augmentation {kind!r}")


def augment_rois(rois, image, rng, target_count_per_class, max_shift=4):
    """Grow the ROI set into a balanced labeled-patch training set.

    Each output patch is a uniformly drawn source ROI under a uniformly drawn
    augmentation: horizontal/vertical flip, 90/180/270 degree rotation, or a
    translation of up to +/- ``max_shift`` pixels (redrawn until the shifted
    window stays inside the image; (0, 0) reproduces the ROI exactly).
    """
    by_label = {"A": [r for r in rois if r.label == "A"], "N": [r for r in rois if r.label == "N"]}
    for label, group in by_label.items():
        if not group:
            raise ValueError(f"need at least one {label}-labeled ROI")

    out = []
    for label in ("A", "N"):
        group = by_label[label]
        for _ in range(target_count_per_class):
            roi = group[rng.integers(len(group))]
            kind = AUGMENTATIONS[rng.integers(len(AUGMENTATIONS))]
            if kind == "translate":
                while True:
                    dx = int(rng.integers(-max_shift, max_shift + 1))
                    dy = int(rng.integers(-max_shift, max_shift + 1))
                    x, y = roi.x + dx, roi.y + dy
                    if 0 <= x <= image.width - PATCH_SIZE and 0 <= y <= image.height - PATCH_SIZE:
                        break
                values = image.pixels[y:y + PATCH_SIZE, x:x + PATCH_SIZE].copy()
            else:
                values = apply_flip_rotation(roi_patch(image, roi).values, kind)
            out.append(LabeledPatch(values=values, label=label))
    return out
