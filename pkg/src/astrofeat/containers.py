"""Binary container formats and dataset manifest I/O.

Three little-endian binary formats move data across the toolkit boundary:

  GEO1  geometry backplane: magic ``GEO1``, u32 height, u32 width, then
        H*W*3 float32 body-fixed coordinates (NaN marks background). Camera
        metadata lives in a YAML sidecar next to the file (``<path>.yaml``).
  COR1  dense correspondence field: magic ``COR1``, u32 height, u32 width,
        then H*W*2 float32 (x, y) pixel coordinates in the partner image,
        NaN where no correspondence exists.
  DFM1  dense feature map: magic ``DFM1``, u16 version, u32 height,
        u32 width, u16 descriptor dim, u8 detection-map count (1 or 2),
        f32 pyramid scale, then descriptors (H*W*D f32) and each detection
        map (H*W f32). External CNN extractors feed the toolkit through
        this format.

The pair manifest is a CSV with columns
``image_a,image_b,corr_file,phi,alpha,beta,source``.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import yaml

from .geometry import Intrinsics

_GEO_MAGIC = b"GEO1"
_COR_MAGIC = b"COR1"
_DFM_MAGIC = b"DFM1"


class ContainerError(ValueError):
    """Raised on malformed container files."""


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ContainerError("truncated file")
    return buf


# ---------------------------------------------------------------------------
# GEO1 geometry backplane
# ---------------------------------------------------------------------------

@dataclass
class GeoMeta:
    """Sidecar metadata accompanying a GEO1 backplane."""

    intrinsics: Intrinsics
    boresight: np.ndarray              # unit 3-vector, body frame
    cam_distance: float                # to body center, dataset length units
    light_dir: np.ndarray | None = None
    pixel_extent_p90: float | None = None


def write_geo(path: str | Path, coords: np.ndarray, meta: GeoMeta) -> None:
    coords = np.ascontiguousarray(coords, dtype="<f4")
    if coords.ndim != 3 or coords.shape[2] != 3:
        raise ContainerError("coords must be HxWx3")
    h, w = coords.shape[:2]
    with open(path, "wb") as f:
        f.write(_GEO_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(coords.tobytes())
    sidecar = {
        "fx": float(meta.intrinsics.fx),
        "fy": float(meta.intrinsics.fy),
        "cx": float(meta.intrinsics.cx),
        "cy": float(meta.intrinsics.cy),
        "boresight": [float(v) for v in meta.boresight],
        "cam_distance": float(meta.cam_distance),
    }
    if meta.light_dir is not None:
        sidecar["light_dir"] = [float(v) for v in meta.light_dir]
    if meta.pixel_extent_p90 is not None:
        sidecar["pixel_extent_p90"] = float(meta.pixel_extent_p90)
    with open(str(path) + ".yaml", "w") as f:
        yaml.safe_dump(sidecar, f, sort_keys=True)


def read_geo(path: str | Path) -> tuple[np.ndarray, GeoMeta]:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _GEO_MAGIC:
            raise ContainerError(f"{path}: not a GEO1 file")
        h, w = struct.unpack("<II", _read_exact(f, 8))
        coords = np.frombuffer(_read_exact(f, h * w * 3 * 4), dtype="<f4")
    coords = coords.reshape(h, w, 3).copy()
    with open(str(path) + ".yaml") as f:
        side = yaml.safe_load(f)
    meta = GeoMeta(
        intrinsics=Intrinsics(side["fx"], side["fy"], side["cx"], side["cy"]),
        boresight=np.asarray(side["boresight"], dtype=float),
        cam_distance=float(side["cam_distance"]),
        light_dir=np.asarray(side["light_dir"], dtype=float) if "light_dir" in side else None,
        pixel_extent_p90=float(side["pixel_extent_p90"]) if "pixel_extent_p90" in side else None,
    )
    return coords, meta


# ---------------------------------------------------------------------------
# COR1 correspondence field
# ---------------------------------------------------------------------------

def write_corr(path: str | Path, corr: np.ndarray) -> None:
    corr = np.ascontiguousarray(corr, dtype="<f4")
    if corr.ndim != 3 or corr.shape[2] != 2:
        raise ContainerError("corr must be HxWx2")
    h, w = corr.shape[:2]
    with open(path, "wb") as f:
        f.write(_COR_MAGIC)
        f.write(struct.pack("<II", h, w))
        f.write(corr.tobytes())


def read_corr(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _COR_MAGIC:
            raise ContainerError(f"{path}: not a COR1 file")
        h, w = struct.unpack("<II", _read_exact(f, 8))
        corr = np.frombuffer(_read_exact(f, h * w * 2 * 4), dtype="<f4")
    return corr.reshape(h, w, 2).copy()


# ---------------------------------------------------------------------------
# DFM1 dense feature map
# ---------------------------------------------------------------------------

def write_dfm(
    path: str | Path,
    descriptors: np.ndarray,
    detection: np.ndarray,
    reliability: np.ndarray | None = None,
    scale: float = 1.0,
) -> None:
    descriptors = np.ascontiguousarray(descriptors, dtype="<f4")
    detection = np.ascontiguousarray(detection, dtype="<f4")
    if descriptors.ndim != 3:
        raise ContainerError("descriptors must be HxWxD")
    h, w, d = descriptors.shape
    if detection.shape != (h, w):
        raise ContainerError("detection map shape mismatch")
    n_det = 1 if reliability is None else 2
    with open(path, "wb") as f:
        f.write(_DFM_MAGIC)
        f.write(struct.pack("<HIIHBf", 1, h, w, d, n_det, float(scale)))
        f.write(descriptors.tobytes())
        f.write(detection.tobytes())
        if reliability is not None:
            reliability = np.ascontiguousarray(reliability, dtype="<f4")
            if reliability.shape != (h, w):
                raise ContainerError("reliability map shape mismatch")
            f.write(reliability.tobytes())


def read_dfm(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, float]:
    """Returns (descriptors, detection, reliability-or-None, scale)."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != _DFM_MAGIC:
            raise ContainerError(f"{path}: not a DFM1 file")
        version, h, w, d, n_det, scale = struct.unpack("<HIIHBf", _read_exact(f, 17))
        if version != 1:
            raise ContainerError(f"{path}: unsupported DFM version {version}")
        if n_det not in (1, 2):
            raise ContainerError(f"{path}: detection-map count must be 1 or 2")
        desc = np.frombuffer(_read_exact(f, h * w * d * 4), dtype="<f4").reshape(h, w, d).copy()
        det = np.frombuffer(_read_exact(f, h * w * 4), dtype="<f4").reshape(h, w).copy()
        rel = None
        if n_det == 2:
            rel = np.frombuffer(_read_exact(f, h * w * 4), dtype="<f4").reshape(h, w).copy()
    return desc, det, rel, float(scale)


# ---------------------------------------------------------------------------
# Pair manifest CSV
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ["image_a", "image_b", "corr_file", "phi", "alpha", "beta", "source"]


def write_manifest(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            out = dict(row)
            for key in ("phi", "alpha", "beta"):
                if out.get(key) is None:
                    out[key] = ""
            writer.writerow(out)


def read_manifest(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            for key in ("phi", "alpha", "beta"):
                row[key] = float(row[key]) if row.get(key) not in (None, "") else None
            rows.append(row)
    return rows


# ---------------------------------------------------------------------------
# Raster images
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Load a grayscale image preserving bit depth (8/16-bit PNG, etc.)."""
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ContainerError(f"cannot read image: {path}")
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    return img


def save_png(path: str | Path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), img):
        raise ContainerError(f"cannot write image: {path}")


def load_raw_grid(path: str | Path) -> np.ndarray:
    """Read a flat binary radiance grid: magic ``RAW1``, u32 H, u32 W, f32 data."""
    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"RAW1":
            raise ContainerError(f"{path}: not a RAW1 grid")
        h, w = struct.unpack("<II", _read_exact(f, 8))
        data = np.frombuffer(_read_exact(f, h * w * 4), dtype="<f4")
    return data.reshape(h, w).astype(np.float64)


def save_raw_grid(path: str | Path, grid: np.ndarray) -> None:
    grid = np.ascontiguousarray(grid, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"RAW1")
        f.write(struct.pack("<II", *grid.shape))
        f.write(grid.tobytes())
