"""Forward evaluators for the detector/descriptor training losses.

Three loss families are implemented as plain numeric functions (no autodiff):

  * repeatability/reliability losses: local cosine similarity, peakiness,
    and the reliability-gated average-precision term with its quantized
    (bin-interpolated) AP approximation;
  * the policy-gradient matching loss: grid-cell feature sampling, factored
    match probabilities, and the reward-weighted log-probability sum with a
    keypoint-probability regularizer;
  * the teacher/student distillation loss with multitask log-variance
    weights.

Where the original gradient formulations rely on detached descriptor copies,
the forward value is unaffected; the evaluators compute it directly.
All losses that consume probabilities expect values in [0, 1] and descriptor
grids with unit-L2 rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imageops import bilinear_sample, window_max_mean


# ---------------------------------------------------------------------------
# Detection non-linearity
# ---------------------------------------------------------------------------

def detection_activation(x):
    """Map raw detection-head outputs to (0, 1): softplus(x) / (softplus(x) + 1).

    Numerically stable for large |x| via logaddexp.
    """
    sp = np.logaddexp(0.0, np.asarray(x, dtype=np.float64))
    out = sp / (sp + 1.0)
    return float(out) if np.isscalar(x) or out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Average precision: exact and quantized
# ---------------------------------------------------------------------------

def ap_exact(similarities: np.ndarray, positive_idx: int) -> float:
    """AP of a single-positive ranking.

    The label array is sorted by descending similarity (stable, so ties keep
    input order), cumulatively summed, and averaged.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise ValueError("similarities must be a non-empty 1-D array")
    if not 0 <= positive_idx < len(s):
        raise ValueError("positive index out of range")
    order = np.argsort(-s, kind="stable")
    labels = (order == positive_idx).astype(np.float64)
    return float(np.mean(np.cumsum(labels)))


def ap_quantized(similarities: np.ndarray, positive_idx: int, bins: int = 25) -> float:
    """Bin-interpolated approximation of :func:`ap_exact`.

    Similarities (cosine, in [-1, 1]) are soft-assigned to ``bins`` evenly
    spaced bin centers with a triangular kernel of one-bin width. The
    positive's soft rank counts distractor mass in higher-similarity bins
    plus half of the mass sharing its bin, replacing the hard sort.
    Converges to the exact value as the bin count grows.
    """
    s = np.asarray(similarities, dtype=np.float64)
    if s.ndim != 1 or len(s) == 0:
        raise ValueError("similarities must be a non-empty 1-D array")
    if not 0 <= positive_idx < len(s):
        raise ValueError("positive index out of range")
    if bins < 2:
        raise ValueError("need at least 2 bins")
    n = len(s)
    centers = np.linspace(-1.0, 1.0, bins)
    delta = centers[1] - centers[0]
    # (n, bins) triangular soft assignment; clip keeps out-of-range values in
    # the edge bins with full weight
    sc = np.clip(s, -1.0, 1.0)
    weights = np.maximum(0.0, 1.0 - np.abs(sc[:, None] - centers[None, :]) / delta)

    w_pos = weights[positive_idx]
    w_neg = np.delete(weights, positive_idx, axis=0)
    hist = w_neg.sum(axis=0)
    # distractor mass in strictly higher-similarity bins, per bin
    higher = np.concatenate([np.cumsum(hist[::-1])[::-1][1:], [0.0]])
    soft_rank = float(np.sum(w_pos * (higher + 0.5 * hist)))
    return (n - soft_rank) / n


# ---------------------------------------------------------------------------
# Repeatability / reliability losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class R2D2LossParams:
    alpha: float = 1.0              # repeatability weight (> 0)
    beta: float = 0.5               # peakiness share (in [0, 1])
    kappa: float = 0.5              # acceptable-AP threshold (in [0, 1))
    kappa_warmup_steps: int = 1500
    n_rep: int = 24                 # patch / window size, px
    r_pos: int = 2                  # positive search radius, px
    r_neg: int = 10                 # distractor ring radius, px
    ap_bins: int = 25
    query_ratio: float = 1.0 / 64.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError("beta must be in [0, 1]")
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must be in [0, 1)")

    @property
    def cosim_weight(self) -> float:
        return 2.0 * (1.0 - self.beta) * self.alpha

    @property
    def peaky_weight(self) -> float:
        return 2.0 * self.beta * self.alpha


def r2d2_cosim_loss(
    rep_a: np.ndarray,
    rep_b: np.ndarray,
    corr: np.ndarray,
    n_rep: int,
    stride: int | None = None,
) -> float:
    """Negated mean cosine similarity between corresponding repeatability patches.

    Patches of size n_rep tile the first map with the given stride (default
    n_rep // 2, overlapping). Partner values are bilinearly sampled from the
    second map through the correspondence field; pixels without a
    correspondence take the second map's bottom-right value. Zero-norm
    patches are skipped. Result lies in [-1, 0].
    """
    rep_a = np.asarray(rep_a, dtype=np.float64)
    rep_b = np.asarray(rep_b, dtype=np.float64)
    if stride is None:
        stride = max(1, n_rep // 2)
    h, w = rep_a.shape
    if n_rep > min(h, w):
        raise ValueError("patch larger than map")

    partner = bilinear_sample(rep_b, corr)
    partner = np.where(np.isfinite(partner), partner, rep_b[-1, -1])

    cosims = []
    for r0 in range(0, h - n_rep + 1, stride):
        for c0 in range(0, w - n_rep + 1, stride):
            s = rep_a[r0 : r0 + n_rep, c0 : c0 + n_rep].ravel()
            sp = partner[r0 : r0 + n_rep, c0 : c0 + n_rep].ravel()
            ns, nsp = np.linalg.norm(s), np.linalg.norm(sp)
            if ns == 0.0 or nsp == 0.0:
                continue
            cosims.append(float(np.dot(s, sp) / (ns * nsp)))
    if not cosims:
        return 0.0
    return -float(np.mean(cosims))


def r2d2_peaky_loss(maps: list[np.ndarray] | np.ndarray, n_rep: int) -> float:
    """Negated mean of (max - mean) over all sliding n_rep windows, stride 1.

    Every map in ``maps`` contributes equally per window; both images of a
    pair are passed individually. Result lies in [-1, 0] for maps in [0, 1].
    """
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        maps = [maps]
    total = 0.0
    count = 0
    for m in maps:
        mx, mn = window_max_mean(np.asarray(m, dtype=np.float64), n_rep)
        total += float(np.sum(mx - mn))
        count += mx.size
    if count == 0:
        return 0.0
    return -total / count


def kappa_effective(kappa: float, step: int, warmup_steps: int) -> float:
    """Linear warm-up of the acceptable-AP threshold from 0 to kappa."""
    if warmup_steps <= 0:
        return kappa
    return kappa * min(1.0, max(0.0, step) / warmup_steps)


def r2d2_ap_loss(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    rel_a: np.ndarray,
    corr: np.ndarray,
    params: R2D2LossParams = R2D2LossParams(),
    step: int = 0,
    rng: np.random.Generator | int | None = None,
) -> float:
    """Reliability-gated quantized-AP ranking loss.

    Query pixels are sampled from the first image at ``query_ratio`` of the
    pixels that have a correspondence. For each query, the positive is the
    most similar descriptor within ``r_pos`` pixels of the ideal location in
    the second image; distractors come from the one-pixel-wide ring at radius
    ``r_neg`` around the ideal match plus a ``query_ratio`` random sample of
    the second image excluding the ``r_neg`` disk. Each query contributes
    AP(q) * R_q + kappa_eff * (1 - R_q); the loss is the negated mean.
    Queries without a reachable positive are skipped.
    """
    rng = np.random.default_rng(rng)
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    rel_a = np.asarray(rel_a, dtype=np.float64)
    hb, wb = desc_b.shape[:2]

    valid = np.all(np.isfinite(corr), axis=-1)
    vy, vx = np.nonzero(valid)
    if len(vy) == 0:
        return 0.0
    n_q = max(1, round(len(vy) * params.query_ratio))
    pick = rng.choice(len(vy), size=min(n_q, len(vy)), replace=False)
    k_eff = kappa_effective(params.kappa, step, params.kappa_warmup_steps)

    by, bx = np.mgrid[0:hb, 0:wb]
    b_pos = np.stack([bx.ravel(), by.ravel()], axis=1).astype(np.float64)
    desc_b_flat = desc_b.reshape(-1, desc_b.shape[-1])
    n_global = max(1, round(len(b_pos) * params.query_ratio))

    terms = []
    for idx in pick:
        y, x = int(vy[idx]), int(vx[idx])
        q = desc_a[y, x]
        ideal = corr[y, x]
        d = np.hypot(b_pos[:, 0] - ideal[0], b_pos[:, 1] - ideal[1])

        pos_candidates = np.flatnonzero(d <= params.r_pos)
        if len(pos_candidates) == 0:
            continue
        pos_sims = desc_b_flat[pos_candidates] @ q
        positive = pos_candidates[int(np.argmax(pos_sims))]

        ring = np.flatnonzero((d >= params.r_neg) & (d < params.r_neg + 1.0))
        outside = np.flatnonzero(d > params.r_neg)
        globals_ = (
            rng.choice(outside, size=min(n_global, len(outside)), replace=False)
            if len(outside)
            else np.array([], dtype=int)
        )
        distractors = np.concatenate([ring, globals_])
        distractors = distractors[distractors != positive]

        sims = np.concatenate([[desc_b_flat[positive] @ q], desc_b_flat[distractors] @ q])
        ap = ap_quantized(sims, 0, params.ap_bins)
        r_q = rel_a[y, x]
        terms.append(ap * r_q + k_eff * (1.0 - r_q))

    if not terms:
        return 0.0
    return -float(np.mean(terms))


def r2d2_total_loss(
    ap_loss: float, cosim_loss: float, peaky_loss: float, alpha: float = 1.0, beta: float = 0.5
) -> float:
    """Weighted sum of the three components with a = 2(1-beta)alpha, b = 2 beta alpha."""
    a = 2.0 * (1.0 - beta) * alpha
    b = 2.0 * beta * alpha
    return ap_loss + a * cosim_loss + b * peaky_loss


# ---------------------------------------------------------------------------
# Policy-gradient matching loss
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiskLossParams:
    rho_tp: float = 1.0        # reward for a correct match
    rho_fp: float = -0.25      # penalty for a false match
    eps: float = 1.5           # correct-match radius, px
    theta_m: float = 50.0      # descriptor-distance scale (1 / softmax temperature)
    cell_size: int = 8         # sampling grid cell, px
    lambda_kp: float = 0.001   # keypoint regularizer weight

    def __post_init__(self):
        if not self.rho_tp > 0 >= self.rho_fp:
            raise ValueError("require rho_tp > 0 >= rho_fp")
        if self.cell_size not in (6, 8, 12):
            raise ValueError("cell_size must be one of 6, 8, 12")
        if self.theta_m <= 0:
            raise ValueError("theta_m must be positive")


@dataclass
class SampledFeatures:
    """Features drawn from a detection map, with their draw probabilities."""

    positions: np.ndarray                 # (N, 2) float (x, y)
    probs: np.ndarray                     # (N,) in-cell softmax * detection value
    descriptors: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.positions)


def disk_sample_features(
    detection: np.ndarray, cell_size: int, rng: np.random.Generator | int | None = None
) -> SampledFeatures:
    """Stochastic grid sampling of keypoints from a detection map.

    The map is partitioned into cell_size x cell_size cells (edge cells may
    be partial). Within each cell one pixel is proposed from the softmax of
    the raw values, then accepted with probability equal to its detection
    value, so an accepted feature carries probability softmax * detection.
    """
    rng = np.random.default_rng(rng)
    k = np.asarray(detection, dtype=np.float64)
    h, w = k.shape
    positions = []
    probs = []
    for r0 in range(0, h, cell_size):
        for c0 in range(0, w, cell_size):
            cell = k[r0 : r0 + cell_size, c0 : c0 + cell_size]
            flat = cell.ravel()
            ex = np.exp(flat - flat.max())
            soft = ex / ex.sum()
            choice = rng.choice(len(flat), p=soft)
            accept_p = flat[choice]
            if rng.random() < accept_p:
                cy, cx = divmod(choice, cell.shape[1])
                positions.append((c0 + cx, r0 + cy))
                probs.append(soft[choice] * accept_p)
    if not positions:
        return SampledFeatures(np.zeros((0, 2)), np.zeros(0))
    return SampledFeatures(np.asarray(positions, dtype=np.float64), np.asarray(probs))


def attach_descriptors(features: SampledFeatures, descriptors: np.ndarray) -> SampledFeatures:
    """Attach dense-map descriptors at the (integer) sampled positions."""
    if len(features) == 0:
        d = descriptors.shape[-1]
        return SampledFeatures(features.positions, features.probs, np.zeros((0, d)))
    xs = features.positions[:, 0].astype(int)
    ys = features.positions[:, 1].astype(int)
    return SampledFeatures(features.positions, features.probs, np.asarray(descriptors)[ys, xs])


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = np.max(z, axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def disk_match_probability(desc_a: np.ndarray, desc_b: np.ndarray, theta_m: float) -> np.ndarray:
    """Factored match-probability matrix: row-softmax(-theta*D) * col-softmax(-theta*D)."""
    da = np.asarray(desc_a, dtype=np.float64)
    db = np.asarray(desc_b, dtype=np.float64)
    if len(da) == 0 or len(db) == 0:
        return np.zeros((len(da), len(db)))
    d2 = np.maximum(
        np.sum(da**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2.0 * da @ db.T, 0.0
    )
    z = -theta_m * np.sqrt(d2)
    return np.exp(_log_softmax(z, axis=1) + _log_softmax(z, axis=0))


@dataclass(frozen=True)
class DiskLossResult:
    reinforce: float
    keypoint: float
    total: float


def disk_loss(
    feats_a: SampledFeatures,
    feats_b: SampledFeatures,
    corr: np.ndarray,
    params: DiskLossParams = DiskLossParams(),
) -> DiskLossResult:
    """Reward-weighted matching loss plus keypoint-probability regularizer.

    Rewards: rho_tp when the matched pixel lies within eps of the true
    correspondence of feature i, rho_fp otherwise, and 0 when feature i has
    no correspondence. The reinforce term sums match-probability * reward *
    log(full factored probability) over all pairs; the keypoint term sums
    log draw probabilities of both feature sets.
    """
    log_pa = np.log(feats_a.probs) if len(feats_a) else np.zeros(0)
    log_pb = np.log(feats_b.probs) if len(feats_b) else np.zeros(0)
    l_kp = float(log_pa.sum() + log_pb.sum())

    if len(feats_a) == 0 or len(feats_b) == 0:
        return DiskLossResult(0.0, l_kp, params.lambda_kp * l_kp)

    da = feats_a.descriptors
    db = feats_b.descriptors
    d2 = np.maximum(
        np.sum(da**2, axis=1)[:, None] + np.sum(db**2, axis=1)[None, :] - 2.0 * da @ db.T, 0.0
    )
    z = -params.theta_m * np.sqrt(d2)
    log_pm = _log_softmax(z, axis=1) + _log_softmax(z, axis=0)
    pm = np.exp(log_pm)

    xa = feats_a.positions[:, 0].astype(int)
    ya = feats_a.positions[:, 1].astype(int)
    true_b = np.asarray(corr, dtype=np.float64)[ya, xa]  # (Na, 2)
    has_corr = np.all(np.isfinite(true_b), axis=1)
    dist = np.hypot(
        feats_b.positions[None, :, 0] - true_b[:, None, 0],
        feats_b.positions[None, :, 1] - true_b[:, None, 1],
    )
    rewards = np.where(dist <= params.eps, params.rho_tp, params.rho_fp)
    rewards[~has_corr] = 0.0

    gamma = log_pm + np.log(feats_a.probs)[:, None] + np.log(feats_b.probs)[None, :]
    terms = pm * rewards * gamma
    terms[pm == 0.0] = 0.0  # lim p->0 of p*log(p) contributions
    l_re = -float(np.sum(terms))
    return DiskLossResult(l_re, l_kp, l_re + params.lambda_kp * l_kp)


# ---------------------------------------------------------------------------
# Distillation loss
# ---------------------------------------------------------------------------

@dataclass
class LafeLossInputs:
    student_desc: np.ndarray   # (..., D)
    teacher_desc: np.ndarray
    student_det: np.ndarray    # (...,), values in [0, 1]
    teacher_det: np.ndarray
    w1: float = 0.0            # multitask log-variance weights
    w2: float = 0.0

    def __post_init__(self):
        if np.shape(self.student_desc) != np.shape(self.teacher_desc):
            raise ValueError("descriptor grids must match in shape")
        if np.shape(self.student_det) != np.shape(self.teacher_det):
            raise ValueError("detection grids must match in shape")


_BCE_CLAMP = 1e-7


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Elementwise BCE with predictions clamped to [1e-7, 1 - 1e-7]."""
    p = np.clip(np.asarray(pred, dtype=np.float64), _BCE_CLAMP, 1.0 - _BCE_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    return -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))


def lafe_distill_loss(inputs: LafeLossInputs) -> float:
    """Multitask distillation loss over all grid positions (no sampling).

    exp(-w1) * sum ||d_s - d_t||^2 + 2 exp(-w2) * sum BCE(K_s, K_t) + w1 + w2.
    """
    ds = np.asarray(inputs.student_desc, dtype=np.float64)
    dt = np.asarray(inputs.teacher_desc, dtype=np.float64)
    desc_err = float(np.sum((ds - dt) ** 2))
    bce_sum = float(np.sum(binary_cross_entropy(inputs.student_det, inputs.teacher_det)))
    return float(
        np.exp(-inputs.w1) * desc_err + 2.0 * np.exp(-inputs.w2) * bce_sum + inputs.w1 + inputs.w2
    )
