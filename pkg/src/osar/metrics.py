"""Region statistics: SNR, mean, and percent deltas between two images.

Statistics are computed on the pixel values as given; callers that want
numbers in the original physical units (the usual case for reports) must
pass a denormalized image.  SNR is the region mean divided by its population
standard deviation, so it is unitless and invariant under positive rescaling.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .image import Image

MIN_AREA = 4
DEFAULT_WINDOW = 32


class RegionError(ValueError):
    """Region not usable: outside the image, malformed, or below minimum area."""


@dataclass(frozen=True)
class Region:
    """Axis-aligned rectangle in image coordinates, at least 4 pixels."""

    x: int
    y: int
    width: int
    height: int

    def __post_init__(self):
        for name in ("x", "y", "width", "height"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise RegionError(f"region {name} must be an integer, got {v!r}")
        if self.width < 1 or self.height < 1:
            raise RegionError("region sides must be positive")
        if self.width * self.height < MIN_AREA:
            raise RegionError(
                f"region area {self.width * self.height} is below the minimum "
                f"of {MIN_AREA} pixels"
            )
        if self.x < 0 or self.y < 0:
            raise RegionError("region origin must be non-negative")

    def extract(self, image: Image) -> np.ndarray:
        if self.x + self.width > image.width or self.y + self.height > image.height:
            raise RegionError(
                f"region {self} exceeds image bounds "
                f"{image.width}x{image.height}"
            )
        return image.pixels[self.y:self.y + self.height, self.x:self.x + self.width]

    def to_dict(self) -> dict:
        return {"x": self.x, "y": self.y, "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, doc) -> "Region":
        try:
            return cls(int(doc["x"]), int(doc["y"]),
                       int(doc["width"]), int(doc["height"]))
        except (KeyError, TypeError, ValueError) as e:
            raise RegionError(f"bad region document: {doc!r}") from e


@dataclass(frozen=True)
class MetricReport:
    """Statistics for one region, optionally with deltas against a baseline.

    ``snr`` is +infinity for a constant region (zero std).  The delta fields
    are None when no baseline was compared, or when the baseline value made
    the ratio undefined.
    """

    region: Region
    mean: float
    std: float
    snr: float
    delta_snr_pct: float | None = None
    delta_mean_pct: float | None = None

    def to_dict(self) -> dict:
        return {
            "region": self.region.to_dict(),
            "mean": self.mean,
            "std": self.std,
            "snr": _encode_float(self.snr),
            "delta_snr_pct": _encode_float(self.delta_snr_pct),
            "delta_mean_pct": _encode_float(self.delta_mean_pct),
        }

    def to_json(self, indent=None) -> str:
        return json.dumps(self.to_dict(), indent=indent, allow_nan=False)

    @classmethod
    def from_dict(cls, doc) -> "MetricReport":
        return cls(
            region=Region.from_dict(doc["region"]),
            mean=float(doc["mean"]),
            std=float(doc["std"]),
            snr=_decode_float(doc["snr"]),
            delta_snr_pct=_decode_float(doc.get("delta_snr_pct")),
            delta_mean_pct=_decode_float(doc.get("delta_mean_pct")),
        )


def _encode_float(value):
    # strict JSON has no Infinity literal, so the flag travels as a string
    if value is None:
        return None
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return float(value)


def _decode_float(value):
    if value is None:
        return None
    if value == "inf":
        return math.inf
    if value == "-inf":
        return -math.inf
    return float(value)


def region_snr(image: Image, region: Region) -> MetricReport:
    """Mean, population std, and their ratio over one rectangular region.

    A constant region has zero std; its SNR is reported as +infinity rather
    than raising, so the report stays serializable.
    """
    window = region.extract(image)
    mean = float(window.mean())
    std = float(window.std())
    snr = math.inf if std == 0.0 else mean / std
    return MetricReport(region=region, mean=mean, std=std, snr=snr)


def improvement(input_report: MetricReport, output_report: MetricReport):
    """Percent SNR gain and absolute percent mean drift versus the input.

    Returns ``(delta_snr_pct, delta_mean_pct)``.  A delta is None when the
    input report's corresponding value is zero or non-finite, which leaves
    the ratio undefined.
    """
    if input_report.region != output_report.region:
        raise RegionError("improvement needs reports over the same region")
    if input_report.snr == 0 or not math.isfinite(input_report.snr):
        delta_snr = None
    else:
        delta_snr = 100.0 * (output_report.snr - input_report.snr) / input_report.snr
    if input_report.mean == 0 or not math.isfinite(input_report.mean):
        delta_mean = None
    else:
        delta_mean = (100.0 * abs(output_report.mean - input_report.mean)
                      / abs(input_report.mean))
    return delta_snr, delta_mean


def compare(input_image: Image, output_image: Image, region: Region) -> MetricReport:
    """Report on the output image with deltas relative to the input image."""
    base = region_snr(input_image, region)
    out = region_snr(output_image, region)
    delta_snr, delta_mean = improvement(base, out)
    return replace(out, delta_snr_pct=delta_snr, delta_mean_pct=delta_mean)


def find_homogeneous_region(image: Image, roi: Region,
                            window: int = DEFAULT_WINDOW) -> Region:
    """Most homogeneous window-sized square inside ``roi``, by variance.

    Scans every stride-1 placement and returns the minimum-variance window;
    ties go to the smallest (y, x).  A convenience for picking evaluation
    regions; callers can always pass an explicit region instead.
    """
    if roi.width < window or roi.height < window:
        raise RegionError(
            f"ROI {roi.width}x{roi.height} is smaller than the "
            f"{window}-pixel scan window"
        )
    pixels = roi.extract(image)
    windows = np.lib.stride_tricks.sliding_window_view(pixels, (window, window))
    # one row of placements at a time keeps the temporaries small
    best_var, best_dy, best_dx = math.inf, 0, 0
    for dy in range(windows.shape[0]):
        row_var = windows[dy].var(axis=(1, 2))
        dx = int(np.argmin(row_var))  # first minimum, so smallest x wins ties
        if float(row_var[dx]) < best_var:
            best_var, best_dy, best_dx = float(row_var[dx]), dy, dx
    return Region(x=roi.x + best_dx, y=roi.y + best_dy,
                  width=window, height=window)
