"""Radiance-image preprocessing: 8-bit conversion and suitability filtering.

Raw mission imagery arrives as non-negative radiance grids of varying depth.
``rescale_to_8bit`` compresses them to 8 bits using percentile-anchored gamma
mapping; ``filter_image`` rejects frames that are too small, contain missing
(black) rows, are saturated, or show too small a target.

Percentiles use linear interpolation between order statistics and quantization
rounds half away from zero; both choices are load-bearing for golden tests.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class RejectReason(str, Enum):
    TOO_SMALL = "too-small"
    BLACK_ROWS = "black-rows"
    DEGENERATE = "degenerate"
    SATURATED = "saturated"
    TARGET_TOO_SMALL = "target-too-small"


@dataclass(frozen=True)
class PreprocessParams:
    p_lo: float = 0.05            # percentile anchoring the dark end
    p_hi: float = 99.99           # percentile anchoring the bright end
    gamma: float = 1.8
    sat_p_lo: float = 99.8        # saturation check percentiles (8-bit image)
    sat_p_hi: float = 99.99
    bg_percentile: float = 4.0    # background level for the target-size check
    target_radius: float = 185.0  # expected target radius, px (per dataset)
    min_side: int = 256
    max_black_row_fraction: float = 0.01

    def __post_init__(self):
        if not (0.0 <= self.p_lo < self.p_hi <= 100.0):
            raise ValueError("percentiles must satisfy 0 <= p_lo < p_hi <= 100")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.target_radius <= 0:
            raise ValueError("target_radius must be positive")


class DegenerateImageError(ValueError):
    """Raised when the percentile anchors collapse (v_hi <= v_lo)."""


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rescale_map(values: np.ndarray, v_lo: float, v_hi: float, gamma: float = 1.8) -> np.ndarray:
    """Core 8-bit mapping given percentile anchors.

    v' = 255 * clip((v - v_lo) / (1.2*v_hi - v_lo), 0, 1) ** (1/gamma),
    quantized by rounding half away from zero. The 1.2 margin on the bright
    anchor keeps highlights from saturating.
    """
    if v_hi <= v_lo:
        raise DegenerateImageError(f"v_hi={v_hi} <= v_lo={v_lo}")
    values = np.asarray(values, dtype=np.float64)
    ratio = np.clip((values - v_lo) / (1.2 * v_hi - v_lo), 0.0, 1.0)
    mapped = 255.0 * np.power(ratio, 1.0 / gamma)
    return _round_half_away(mapped).astype(np.uint8)


def rescale_to_8bit(img: np.ndarray, params: PreprocessParams = PreprocessParams()) -> np.ndarray:
    """Percentile-anchored gamma compression of a raw radiance image to uint8."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2-D grid")
    if not np.all(np.isfinite(img)) or np.any(img < 0):
        raise ValueError("pixel values must be finite and non-negative")
    v_lo, v_hi = np.percentile(img, [params.p_lo, params.p_hi])
    return rescale_map(img, float(v_lo), float(v_hi), params.gamma)


def foreground_percentile(w: int, h: int, r: float) -> float:
    """Percentile at which a half-circle target of radius r would sit.

    p_fg = 1 - (pi * r^2 / 2) / (w * h), returned in [0, 1].
    """
    return 1.0 - (0.5 * np.pi * r * r) / (w * h)


@dataclass(frozen=True)
class FilterResult:
    accepted: bool
    reason: RejectReason | None = None
    image_8bit: np.ndarray | None = None


def filter_image(img: np.ndarray, params: PreprocessParams = PreprocessParams()) -> FilterResult:
    """Accept/reject a raw image for feature-extraction suitability.

    Rejection order: size/black-rows, degenerate anchors, saturation, target
    size. The black-row, saturation, and target checks run on the 8-bit
    result; a row counts as black when every quantized pixel equals 0.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    if min(w, h) < params.min_side:
        return FilterResult(False, RejectReason.TOO_SMALL)

    try:
        img8 = rescale_to_8bit(img, params)
    except DegenerateImageError:
        return FilterResult(False, RejectReason.DEGENERATE)

    black_rows = np.sum(~np.any(img8 > 0, axis=1))
    if black_rows / h > params.max_black_row_fraction:
        return FilterResult(False, RejectReason.BLACK_ROWS)

    sat_lo, sat_hi = np.percentile(img8, [params.sat_p_lo, params.sat_p_hi])
    if sat_hi - sat_lo <= 5:
        return FilterResult(False, RejectReason.SATURATED)

    p_fg = foreground_percentile(w, h, params.target_radius)
    v_fg = np.percentile(img8, 100.0 * p_fg)
    v_bg = np.percentile(img8, params.bg_percentile)
    if v_fg - v_bg < 50:
        return FilterResult(False, RejectReason.TARGET_TOO_SMALL)

    return FilterResult(True, None, img8)
