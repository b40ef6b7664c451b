"""Relative pose estimation from 2-D/3-D matches and outcome classification.

RANSAC draws minimal samples of four matches, solves the three-point
perspective problem on the first three and disambiguates with the fourth,
then scores models by inlier count under the reprojection gate. The winning
pose is refined by Levenberg-Marquardt over the six pose parameters only
(structure fixed), minimizing a pseudo-Huber robust cost. Ground-truth poses
reuse the same machinery on subsampled dense correspondences with a tighter
0.75 px gate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import cv2
import numpy as np

from .geometry import (
    Intrinsics,
    matrix_to_quat,
    project_points,
    quat_normalize,
    quat_to_matrix,
    rotvec_to_matrix,
    skew,
)


class PoseEstimationError(RuntimeError):
    """Raised when no acceptable pose model can be found."""


@dataclass(frozen=True)
class Pose:
    """Rigid transform body frame -> camera frame (unit quaternion + translation)."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", quat_normalize(self.q))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float))

    @staticmethod
    def from_matrix(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(matrix_to_quat(R), t)

    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation().T + self.t


@dataclass(frozen=True)
class PoseOutcome:
    pose: Pose | None
    inlier_count: int
    orientation_error: float   # degrees vs ground truth; inf when unavailable
    failed: bool


def orientation_error(a: Pose | np.ndarray, b: Pose | np.ndarray) -> float:
    """Geodesic rotation distance in degrees: 2 acos(|<q_a, q_b>|)."""
    qa = a.q if isinstance(a, Pose) else quat_normalize(a)
    qb = b.q if isinstance(b, Pose) else quat_normalize(b)
    dot = float(np.clip(np.abs(np.dot(qa, qb)), 0.0, 1.0))
    return float(np.degrees(2.0 * np.arccos(dot)))


def reprojection_errors(pose: Pose, points3d: np.ndarray, pixels: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Per-match pixel error; points behind the camera get a huge sentinel."""
    cam = pose.to_camera(points3d)
    proj = project_points(cam, intr)
    err = np.hypot(proj[:, 0] - pixels[:, 0], proj[:, 1] - pixels[:, 1])
    return np.where(np.isfinite(err), err, 1e9)


# ---------------------------------------------------------------------------
# RANSAC with minimal three-point solves
# ---------------------------------------------------------------------------

def _solve_p3p(points3d: np.ndarray, pixels: np.ndarray, intr: Intrinsics) -> list[Pose]:
    obj = np.ascontiguousarray(points3d, dtype=np.float64).reshape(-1, 1, 3)
    img = np.ascontiguousarray(pixels, dtype=np.float64).reshape(-1, 1, 2)
    try:
        n, rvecs, tvecs = cv2.solveP3P(obj, img, intr.matrix(), None, flags=cv2.SOLVEPNP_P3P)
    except cv2.error:
        return []
    poses = []
    for i in range(n):
        R, _ = cv2.Rodrigues(rvecs[i])
        poses.append(Pose.from_matrix(R, tvecs[i].ravel()))
    return poses


def estimate_pose_ransac(
    points3d: np.ndarray,
    pixels: np.ndarray,
    intr: Intrinsics,
    max_reproj: float = 5.0,
    rng: np.random.Generator | int | None = None,
    confidence: float = 0.999,
    max_iterations: int = 10000,
) -> tuple[Pose, np.ndarray]:
    """Robust pose fit; returns (pose, inlier mask).

    Each iteration samples four distinct matches, solves the minimal problem
    on three, picks the candidate best explaining the fourth, and counts
    inliers with reprojection error below ``max_reproj``. The iteration
    budget adapts from the best inlier ratio at the given confidence, capped
    at ``max_iterations``. Fails when fewer than four matches exist or no
    model reaches four inliers.
    """
    points3d = np.asarray(points3d, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    n = len(points3d)
    if n < 4:
        raise PoseEstimationError(f"need at least 4 matches, got {n}")
    rng = np.random.default_rng(rng)

    best_pose: Pose | None = None
    best_inliers = 0
    best_mask = np.zeros(n, dtype=bool)
    needed = max_iterations
    i = 0
    while i < needed and i < max_iterations:
        idx = rng.choice(n, size=4, replace=False)
        candidates = _solve_p3p(points3d[idx[:3]], pixels[idx[:3]], intr)
        if candidates:
            fourth_err = [
                reprojection_errors(p, points3d[idx[3:4]], pixels[idx[3:4]], intr)[0]
                for p in candidates
            ]
            pose = candidates[int(np.argmin(fourth_err))]
            err = reprojection_errors(pose, points3d, pixels, intr)
            mask = err < max_reproj
            count = int(np.sum(mask))
            if count > best_inliers:
                best_inliers, best_pose, best_mask = count, pose, mask
                ratio = count / n
                if ratio >= 1.0:
                    break
                denom = np.log(max(1.0 - ratio**4, 1e-12))
                needed = min(max_iterations, int(np.ceil(np.log(1.0 - confidence) / denom)))
        i += 1

    if best_pose is None or best_inliers < 4:
        raise PoseEstimationError("no model with at least 4 inliers")
    return best_pose, best_mask


# ---------------------------------------------------------------------------
# Pose-only robust refinement
# ---------------------------------------------------------------------------

def pseudo_huber(e: np.ndarray, delta: float) -> np.ndarray:
    """delta^2 (sqrt(1 + (e/delta)^2) - 1): quadratic near zero, linear in the tails."""
    return delta**2 * (np.sqrt(1.0 + (np.asarray(e) / delta) ** 2) - 1.0)


@dataclass
class RefineResult:
    pose: Pose
    cost_history: list[float] = field(default_factory=list)
    converged: bool = True


def refine_pose(
    pose: Pose,
    points3d: np.ndarray,
    pixels: np.ndarray,
    intr: Intrinsics,
    huber_delta: float = 1.0,
    max_iterations: int = 100,
    cost_tolerance: float = 1e-10,
) -> RefineResult:
    """Minimize the pseudo-Huber reprojection cost over the 6 pose parameters.

    Levenberg-Marquardt with IRLS weights and a local rotation-tangent
    update; 3-D points stay fixed. Steps are accepted only when the robust
    cost decreases, so the accepted-cost sequence is non-increasing.
    Returns the best pose seen, flagged non-converged when the iteration
    budget runs out before the cost change drops below tolerance.
    """
    points3d = np.asarray(points3d, dtype=np.float64)
    pixels = np.asarray(pixels, dtype=np.float64)
    R = pose.rotation()
    t = np.asarray(pose.t, dtype=np.float64).copy()

    def residuals(Rc, tc):
        cam = points3d @ Rc.T + tc
        z = cam[:, 2]
        safe = z > 1e-12
        res = np.zeros((len(cam), 2))
        res[safe, 0] = intr.fx * cam[safe, 0] / z[safe] + intr.cx - pixels[safe, 0]
        res[safe, 1] = intr.fy * cam[safe, 1] / z[safe] + intr.cy - pixels[safe, 1]
        norms = np.hypot(res[:, 0], res[:, 1])
        norms[~safe] = 1e6
        return cam, res, norms

    def cost_of(norms):
        return float(np.sum(pseudo_huber(norms, huber_delta)))

    cam, res, norms = residuals(R, t)
    cost = cost_of(norms)
    history = [cost]
    lam = 1e-3
    converged = False

    for _ in range(max_iterations):
        weights = 1.0 / np.sqrt(1.0 + (norms / huber_delta) ** 2)
        z = np.maximum(cam[:, 2], 1e-12)
        n_pts = len(cam)
        jp = np.zeros((n_pts, 2, 3))
        jp[:, 0, 0] = intr.fx / z
        jp[:, 0, 2] = -intr.fx * cam[:, 0] / z**2
        jp[:, 1, 1] = intr.fy / z
        jp[:, 1, 2] = -intr.fy * cam[:, 1] / z**2
        jxi = np.zeros((n_pts, 3, 6))
        for k in range(n_pts):
            jxi[k, :, :3] = -skew(cam[k])
        jxi[:, :, 3:] = np.eye(3)
        J = np.einsum("nij,njk->nik", jp, jxi)

        A = np.einsum("n,nik,nil->kl", weights, J, J)
        g = np.einsum("n,nik,ni->k", weights, J, res)

        improved = False
        for _ in range(10):
            damped = A + lam * np.diag(np.maximum(np.diag(A), 1e-12))
            try:
                delta = np.linalg.solve(damped, -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            R_new = rotvec_to_matrix(delta[:3]) @ R
            t_new = rotvec_to_matrix(delta[:3]) @ t + delta[3:]
            cam_new, res_new, norms_new = residuals(R_new, t_new)
            cost_new = cost_of(norms_new)
            if cost_new < cost:
                R, t = R_new, t_new
                cam, res, norms = cam_new, res_new, norms_new
                improvement = cost - cost_new
                cost = cost_new
                history.append(cost)
                lam = max(lam / 3.0, 1e-12)
                improved = True
                if improvement < cost_tolerance:
                    converged = True
                break
            lam *= 10.0
        if not improved:
            converged = True  # stationary: no damping level improves the cost
            break
        if converged:
            break

    return RefineResult(Pose.from_matrix(R, t), history, converged)


# ---------------------------------------------------------------------------
# Ground truth from dense correspondences
# ---------------------------------------------------------------------------

def subsample_correspondences(items: np.ndarray, target: int = 10000) -> np.ndarray:
    """Thin a correspondence list only when it exceeds twice the target.

    Keeps every k-th entry, k = floor(n / target), in the given (row-major)
    order; guarantees at least ``target`` survivors.
    """
    items = np.asarray(items)
    n = len(items)
    if n <= 2 * target:
        return items
    k = n // target
    return items[::k]


def ground_truth_pose(
    corr: np.ndarray,
    coords_a: np.ndarray,
    intr_b: Intrinsics,
    rng: np.random.Generator | int | None = None,
    max_reproj: float = 0.75,
    huber_delta: float = 1.0,
    min_correspondences: int = 12,
) -> Pose | None:
    """Pose of image B's camera from dense pixel correspondences.

    Flattens valid (3-D coordinate, target-pixel) pairs row-major,
    subsamples, then runs the RANSAC + refinement pipeline with the tight
    reprojection gate. Returns None when there is not enough data or no
    model fits.
    """
    corr = np.asarray(corr, dtype=np.float64).reshape(-1, 2)
    coords = np.asarray(coords_a, dtype=np.float64).reshape(-1, 3)
    valid = np.all(np.isfinite(corr), axis=1) & np.all(np.isfinite(coords), axis=1)
    pts = np.concatenate([coords[valid], corr[valid]], axis=1)
    pts = subsample_correspondences(pts)
    if len(pts) < min_correspondences:
        return None
    try:
        pose, mask = estimate_pose_ransac(pts[:, :3], pts[:, 3:], intr_b, max_reproj, rng)
    except PoseEstimationError:
        return None
    refined = refine_pose(pose, pts[mask, :3], pts[mask, 3:], intr_b, huber_delta)
    return refined.pose


def classify_outcome(
    pose: Pose | None,
    gt: Pose,
    points3d: np.ndarray,
    pixels: np.ndarray,
    intr: Intrinsics,
    max_reproj: float = 5.0,
    min_inliers: int = 12,
    max_orientation_error: float = 20.0,
) -> PoseOutcome:
    """Failure gate: fewer than 12 features reprojecting under 5 px, or error > 20 deg."""
    if pose is None:
        return PoseOutcome(None, 0, float("inf"), True)
    err = reprojection_errors(pose, points3d, pixels, intr)
    inliers = int(np.sum(err < max_reproj))
    orient = orientation_error(pose, gt)
    failed = inliers < min_inliers or orient > max_orientation_error
    return PoseOutcome(pose, inliers, orient, failed)
