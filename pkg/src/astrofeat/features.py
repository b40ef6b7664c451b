"""Dense feature maps, sparse extraction, and descriptor matching.

The matching pipeline: build an image pyramid, run an extractor (external
maps via DFM1 files or the built-in corner/gradient baseline) per level,
sparsify each dense map with blurred non-maxima suppression and top-N
selection, match descriptors by mutual nearest neighbor (optionally with the
multi-scale constraint), and label matches against a ground-truth
correspondence field.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .imageops import box_blur3


@dataclass
class DenseFeatureMap:
    """Per-pixel descriptors plus one or two detection maps at a known scale."""

    descriptors: np.ndarray            # (H, W, D), unit L2 rows
    detection: np.ndarray              # (H, W) in [0, 1]
    reliability: np.ndarray | None = None
    scale: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.detection.shape

    def validate(self) -> None:
        h, w = self.detection.shape
        if self.descriptors.shape[:2] != (h, w):
            raise ValueError("descriptor grid shape mismatch")
        norms = np.linalg.norm(self.descriptors, axis=-1)
        if np.any(np.abs(norms - 1.0) > 1e-4):
            raise ValueError("descriptors must be L2-normalized")
        for m in (self.detection, self.reliability):
            if m is not None and (np.min(m) < 0.0 or np.max(m) > 1.0):
                raise ValueError("detection values must lie in [0, 1]")


@dataclass
class SparseFeatures:
    """Keypoints in original-image coordinates with scores and descriptors."""

    xy: np.ndarray                     # (N, 2) float, original image frame
    scale: np.ndarray                  # (N,)
    score: np.ndarray                  # (N,) combined detection value
    descriptors: np.ndarray            # (N, D)

    def __len__(self) -> int:
        return len(self.xy)

    @staticmethod
    def empty(dim: int = 128) -> "SparseFeatures":
        return SparseFeatures(
            np.zeros((0, 2)), np.zeros(0), np.zeros(0), np.zeros((0, dim))
        )

    @staticmethod
    def concatenate(parts: list["SparseFeatures"]) -> "SparseFeatures":
        parts = [p for p in parts if len(p)]
        if not parts:
            return SparseFeatures.empty()
        return SparseFeatures(
            np.concatenate([p.xy for p in parts]),
            np.concatenate([p.scale for p in parts]),
            np.concatenate([p.score for p in parts]),
            np.concatenate([p.descriptors for p in parts]),
        )


@dataclass
class MatchSet:
    """Mutual-NN matches with optional ground-truth labels.

    ``possible_total`` counts every first-image feature that has a
    ground-truth correspondence (matched or not); it is the M-Score
    denominator.
    """

    index_a: np.ndarray
    index_b: np.ndarray
    distance: np.ndarray
    possible: np.ndarray | None = None   # per match
    correct: np.ndarray | None = None
    gt_dist: np.ndarray | None = None    # px distance of the match to ground truth
    possible_total: int = 0
    correct_total: int = 0

    @property
    def proposed(self) -> int:
        return len(self.index_a)


# ---------------------------------------------------------------------------
# Pyramid
# ---------------------------------------------------------------------------

def build_pyramid(
    img: np.ndarray, s: int = 4, min_side: int = 128
) -> list[tuple[np.ndarray, float]]:
    """Downscale by k = 2**(1/s) per level until the short edge drops below min_side."""
    if s < 1:
        raise ValueError("s must be >= 1")
    h, w = img.shape[:2]
    k = 2.0 ** (1.0 / s)
    levels = []
    j = 0
    while True:
        scale = k ** (-j)
        nw, nh = round(w * scale), round(h * scale)
        if min(nw, nh) < min_side:
            if j == 0:
                levels.append((img, 1.0))
            break
        if j == 0:
            levels.append((img, 1.0))
        else:
            levels.append((cv2.resize(img, (nw, nh), interpolation=cv2.INTER_LINEAR), scale))
        j += 1
    return levels


# ---------------------------------------------------------------------------
# Sparse extraction
# ---------------------------------------------------------------------------

def extract_sparse(
    fmap: DenseFeatureMap,
    feat_ratio: float = 0.001,
    det_threshold: float = 0.5,
    nms_radius: int = 1,
) -> SparseFeatures:
    """Blurred-NMS sparsification of a dense map.

    The detection map is low-passed with a 3x3 box filter; a pixel survives
    NMS when its blurred value beats every neighbor in the (2r+1)^2 window,
    with exact blurred ties broken by the raw detection value (so a blurred
    impulse plateau keeps its center while constant regions yield nothing).
    Survivors below ``det_threshold`` on the raw map are dropped; the top
    N = round(feat_ratio * H * W) by combined score (detection *
    reliability when present) are kept. Coordinates are mapped back to the
    original frame by dividing by the map scale.
    """
    from scipy.ndimage import maximum_filter

    det = np.asarray(fmap.detection, dtype=np.float64)
    h, w = det.shape
    blurred = box_blur3(det)

    size = 2 * nms_radius + 1
    footprint = np.ones((size, size), dtype=bool)
    footprint[nms_radius, nms_radius] = False
    neigh_blur = maximum_filter(blurred, footprint=footprint, mode="constant", cval=-np.inf)
    is_max = blurred > neigh_blur
    tied = blurred == neigh_blur
    if np.any(tied):
        neigh_raw = maximum_filter(det, footprint=footprint, mode="constant", cval=-np.inf)
        is_max |= tied & (det > neigh_raw)

    ys, xs = np.nonzero(is_max)
    raw = det[ys, xs]
    keep = raw >= det_threshold
    ys, xs, raw = ys[keep], xs[keep], raw[keep]

    if fmap.reliability is not None:
        score = raw * np.asarray(fmap.reliability, dtype=np.float64)[ys, xs]
    else:
        score = raw

    n_keep = round(feat_ratio * h * w)
    if len(score) > n_keep:
        order = np.argsort(-score, kind="stable")[:n_keep]
        ys, xs, score = ys[order], xs[order], score[order]

    if len(xs) == 0:
        return SparseFeatures.empty(fmap.descriptors.shape[-1])
    xy = np.stack([xs, ys], axis=1).astype(np.float64) / fmap.scale
    return SparseFeatures(
        xy=xy,
        scale=np.full(len(xs), fmap.scale, dtype=np.float64),
        score=score.astype(np.float64),
        descriptors=np.asarray(fmap.descriptors, dtype=np.float64)[ys, xs],
    )


def extract_multiscale(
    maps: list[DenseFeatureMap],
    feat_ratio: float = 0.001,
    det_threshold: float = 0.5,
    nms_radius: int = 1,
) -> SparseFeatures:
    """Extract and concatenate sparse features from every pyramid level."""
    return SparseFeatures.concatenate(
        [extract_sparse(m, feat_ratio, det_threshold, nms_radius) for m in maps]
    )


# ---------------------------------------------------------------------------
# Built-in baseline extractor
# ---------------------------------------------------------------------------

_ORI_BINS = 8
_WINDOW = 16
_CELLS = 4


def baseline_dense_extract(img: np.ndarray) -> DenseFeatureMap:
    """Reference dense extractor so the pipeline runs without an external CNN.

    Detection is a max-normalized Harris-style corner response. Descriptors
    are 128-d Gaussian-weighted local gradient-orientation histograms
    (4x4 cells x 8 orientations over a 16x16 window), L2-normalized, which
    makes them invariant to global brightness gain.
    """
    from scipy.ndimage import gaussian_filter

    g = np.asarray(img, dtype=np.float64)
    if g.dtype != np.float64 or g.max() > 1.5:
        g = g / 255.0
    gy, gx = np.gradient(g)

    ixx = gaussian_filter(gx * gx, 1.5)
    iyy = gaussian_filter(gy * gy, 1.5)
    ixy = gaussian_filter(gx * gy, 1.5)
    response = ixx * iyy - ixy * ixy - 0.04 * (ixx + iyy) ** 2
    response = np.clip(response, 0.0, None)
    peak = response.max()
    detection = response / peak if peak > 0 else response

    mag = np.hypot(gx, gy)
    theta = np.arctan2(gy, gx)
    bins = np.floor((theta + np.pi) / (2 * np.pi / _ORI_BINS)).astype(int) % _ORI_BINS

    h, w = g.shape
    half = _WINDOW // 2
    cell = _WINDOW // _CELLS
    offs = np.arange(-half, half)
    wy = np.exp(-(offs**2) / (2.0 * (half**2)))
    weight = wy[:, None] * wy[None, :]

    channels = np.zeros((h, w, _CELLS * _CELLS * _ORI_BINS), dtype=np.float64)
    for b in range(_ORI_BINS):
        ori = np.where(bins == b, mag, 0.0)
        padded = np.pad(ori, half, mode="constant")
        for cy in range(_CELLS):
            for cx in range(_CELLS):
                ch = (cy * _CELLS + cx) * _ORI_BINS + b
                acc = channels[:, :, ch]
                for oy in range(cell):
                    for ox in range(cell):
                        dy = -half + cell * cy + oy
                        dx = -half + cell * cx + ox
                        acc += weight[dy + half, dx + half] * padded[
                            half + dy : half + dy + h, half + dx : half + dx + w
                        ]

    norms = np.linalg.norm(channels, axis=-1, keepdims=True)
    flat = norms[..., 0] < 1e-12
    channels = np.divide(channels, norms, out=channels, where=~flat[..., None])
    # textureless pixels get a fixed unit vector; their detection is zero anyway
    channels[flat] = 1.0 / np.sqrt(channels.shape[-1])
    return DenseFeatureMap(channels, detection, None, 1.0)


# ---------------------------------------------------------------------------
# Matching
# ---------------------------------------------------------------------------

def _pairwise_distances(da: np.ndarray, db: np.ndarray) -> np.ndarray:
    d2 = np.sum(da**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2.0 * da @ db.T
    return np.sqrt(np.maximum(d2, 0.0))


def _mutual_nn(dist: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices (ia, jb) of mutual nearest neighbors of a distance matrix.

    Rows/columns whose distances are all +inf never match; argmin ties take
    the lowest index on both sides.
    """
    if dist.size == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    best_j = np.argmin(dist, axis=1)
    best_i = np.argmin(dist, axis=0)
    rows = np.arange(dist.shape[0])
    finite = np.isfinite(dist[rows, best_j])
    mutual = (best_i[best_j] == rows) & finite
    ia = rows[mutual]
    return ia, best_j[ia]


def match_mutual_nn(fa: SparseFeatures, fb: SparseFeatures) -> MatchSet:
    """Mutual-nearest-neighbor matching on the full descriptor distance matrix."""
    if len(fa) == 0 or len(fb) == 0:
        return MatchSet(np.zeros(0, int), np.zeros(0, int), np.zeros(0))
    dist = _pairwise_distances(fa.descriptors, fb.descriptors)
    ia, jb = _mutual_nn(dist)
    return MatchSet(ia, jb, dist[ia, jb])


def multiscale_match(
    fa: SparseFeatures, fb: SparseFeatures, level_factor: float = 2.0 ** 0.25
) -> MatchSet:
    """Scale-constrained mutual-NN matching.

    Stage 1 matches ignoring scale, stage 2 estimates the intrinsic scale
    ratio as exp(median log scale ratio) of those matches, stage 3 rematches
    with candidates restricted to within one pyramid level of the estimate.
    """
    first = match_mutual_nn(fa, fb)
    if first.proposed == 0:
        return first
    log_ratio = np.log(fa.scale[first.index_a] / fb.scale[first.index_b])
    est = float(np.median(log_ratio))

    dist = _pairwise_distances(fa.descriptors, fb.descriptors)
    all_ratio = np.log(fa.scale[:, None] / fb.scale[None, :])
    allowed = np.abs(all_ratio - est) <= np.log(level_factor) + 1e-12
    dist = np.where(allowed, dist, np.inf)
    ia, jb = _mutual_nn(dist)
    return MatchSet(ia, jb, dist[ia, jb])


def estimated_scale_ratio(m: MatchSet, fa: SparseFeatures, fb: SparseFeatures) -> float:
    if m.proposed == 0:
        return 1.0
    return float(np.exp(np.median(np.log(fa.scale[m.index_a] / fb.scale[m.index_b]))))


def label_matches(
    m: MatchSet, fa: SparseFeatures, fb: SparseFeatures, corr: np.ndarray, tol: float = 5.0
) -> MatchSet:
    """Label matches against a dense correspondence field.

    A match is possible when the field at the first feature's pixel is
    finite; it is correct when additionally the matched second feature lies
    within ``tol`` pixels (inclusive) of the ground-truth location.
    ``possible_total`` counts all first-image features with correspondences.
    """
    corr = np.asarray(corr, dtype=np.float64)
    h, w = corr.shape[:2]

    def gt_at(xy: np.ndarray) -> np.ndarray:
        xs = np.clip(np.round(xy[:, 0]).astype(int), 0, w - 1)
        ys = np.clip(np.round(xy[:, 1]).astype(int), 0, h - 1)
        return corr[ys, xs]

    possible_total = 0
    if len(fa):
        possible_total = int(np.sum(np.all(np.isfinite(gt_at(fa.xy)), axis=1)))

    if m.proposed == 0:
        return MatchSet(
            m.index_a, m.index_b, m.distance,
            np.zeros(0, bool), np.zeros(0, bool), np.zeros(0),
            possible_total, 0,
        )

    gt = gt_at(fa.xy[m.index_a])
    possible = np.all(np.isfinite(gt), axis=1)
    matched_xy = fb.xy[m.index_b]
    err = np.hypot(matched_xy[:, 0] - gt[:, 0], matched_xy[:, 1] - gt[:, 1])
    correct = possible & (err <= tol)
    gt_dist = np.where(possible, err, np.nan)
    return MatchSet(
        m.index_a, m.index_b, m.distance,
        possible, correct, gt_dist,
        possible_total, int(np.sum(correct)),
    )


# ---------------------------------------------------------------------------
# Ground-truth descriptor injection (oracle mode)
# ---------------------------------------------------------------------------

def inject_ground_truth_features(
    corr: np.ndarray,
    spacing: int = 8,
    dim: int = 128,
    rng: np.random.Generator | int | None = None,
) -> tuple[SparseFeatures, SparseFeatures]:
    """Plant identical unique descriptors at corresponding locations.

    Samples a grid of first-image pixels with valid correspondences and
    creates one feature pair per pixel: the first at the pixel, the second
    exactly at the ground-truth location, both carrying the same random unit
    descriptor. Running the matching pipeline on the result must produce
    perfect metrics; used by self-test evaluation and oracle tests.
    """
    rng = np.random.default_rng(rng)
    corr = np.asarray(corr, dtype=np.float64)
    h, w = corr.shape[:2]
    ys, xs = np.mgrid[spacing // 2 : h : spacing, spacing // 2 : w : spacing]
    ys, xs = ys.ravel(), xs.ravel()
    tgt = corr[ys, xs]
    ok = np.all(np.isfinite(tgt), axis=1)
    ys, xs, tgt = ys[ok], xs[ok], tgt[ok]

    n = len(ys)
    desc = rng.normal(size=(n, dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)

    ones = np.ones(n)
    fa = SparseFeatures(np.stack([xs, ys], 1).astype(float), ones.copy(), ones.copy(), desc)
    fb = SparseFeatures(tgt.copy(), ones.copy(), ones.copy(), desc.copy())
    return fa, fb
