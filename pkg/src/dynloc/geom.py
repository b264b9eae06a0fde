"""Projective and epipolar geometry for calibrated cameras with known poses.

Conventions used throughout the package:
  * poses are world-to-camera: x_cam = R @ x_world + t
  * camera frame: x right, y down, z forward (depth = z)
  * pixel coordinates: origin at the top-left corner, x right, y down
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

ORTHONORMALITY_TOL = 1e-9
BASELINE_EPS = 1e-6


class DegeneratePair(Exception):
    """Pose pair with (near-)zero baseline: epipolar geometry undefined."""


class DegenerateGeometry(Exception):
    """Triangulation geometry is degenerate (parallel rays / zero baseline)."""


class CheiralityViolation(Exception):
    """Triangulated point has non-positive depth in some observing camera."""


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: single focal length, no distortion."""

    focal: float
    principal_point: tuple
    width: int
    height: int

    def __post_init__(self):
        px, py = self.principal_point
        if self.focal <= 0:
            raise ValueError("focal must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not (0 < px < self.width and 0 < py < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self):
        return calibration_matrix(self)

    def scaled(self, factor):
        """Intrinsics for an image resized by `factor` (e.g. 0.5 = half size)."""
        px, py = self.principal_point
        return CameraIntrinsics(
            focal=self.focal * factor,
            principal_point=(px * factor, py * factor),
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class Pose:
    """Rigid world-to-camera transform. Immutable after construction."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float).reshape(3, 3).copy()
        t = np.asarray(self.translation, dtype=float).reshape(3).copy()
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHONORMALITY_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > ORTHONORMALITY_TOL:
            raise ValueError("rotation determinant is not +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def center(self):
        return camera_center(self)

    def transform(self, points):
        """World points (N,3) or (3,) into the camera frame."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.rotation.T + self.translation


@dataclass(frozen=True)
class EpipolarConfig:
    residual_kind: str = "sampson"  # "sampson" (pixels) or "algebraic"
    threshold: float = 4.0

    def __post_init__(self):
        if self.residual_kind not in ("algebraic", "sampson"):
            raise ValueError("residual_kind must be 'algebraic' or 'sampson'")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class PoseError:
    angle_deg: float
    distance: float


def calibration_matrix(intr):
    """Upper-triangular K = [[f, 0, p1], [0, f, p2], [0, 0, 1]]."""
    px, py = intr.principal_point
    return np.array([[intr.focal, 0.0, px], [0.0, intr.focal, py], [0.0, 0.0, 1.0]])


def camera_center(pose):
    """World-frame camera center C = -R^T t."""
    return -pose.rotation.T @ pose.translation


def cross_matrix(v):
    """Skew-symmetric [v]_x so that [v]_x @ u = v x u."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def project(pose, intr, points):
    """Project world points into pixel coordinates.

    Returns (uv, depth): uv (N,2), depth (N,). Points at or behind the
    camera plane get depth <= 0 and non-finite pixels.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cam = pts @ pose.rotation.T + pose.translation
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = np.where(z > 0, cam[:, 0] / z, np.nan)
        y = np.where(z > 0, cam[:, 1] / z, np.nan)
    px, py = intr.principal_point
    uv = np.stack([intr.focal * x + px, intr.focal * y + py], axis=1)
    return uv, z


def back_project(pose, intr, uv, depth):
    """Pixels + depths back to world points (inverse of `project`)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    d = np.atleast_1d(np.asarray(depth, dtype=float))
    px, py = intr.principal_point
    x = (uv[:, 0] - px) / intr.focal * d
    y = (uv[:, 1] - py) / intr.focal * d
    cam = np.stack([x, y, d], axis=1)
    return (cam - pose.translation) @ pose.rotation


def fundamental_from_poses(pose1, pose2, intr):
    """F = K^-T R2 [C2 - C1]_x R1^T K^-1, normalized to unit Frobenius norm.

    Raises DegeneratePair when the baseline is shorter than BASELINE_EPS
    (pure rotation: epipolar geometry undefined).
    """
    c1 = camera_center(pose1)
    c2 = camera_center(pose2)
    baseline = c2 - c1
    if np.linalg.norm(baseline) <= BASELINE_EPS:
        raise DegeneratePair("camera centers coincide (baseline %.3g)" % np.linalg.norm(baseline))
    K = calibration_matrix(intr)
    Kinv = np.linalg.inv(K)
    F = Kinv.T @ pose2.rotation @ cross_matrix(baseline) @ pose1.rotation.T @ Kinv
    F = F / np.linalg.norm(F)
    # fix the overall sign so equal inputs give bit-equal outputs
    flat = F.ravel()
    lead = flat[np.argmax(np.abs(flat))]
    if lead < 0:
        F = -F
    return F


def epipolar_residual(u1, u2, F, cfg):
    """Epipolar residual of correspondence(s) u1 <-> u2 under F.

    algebraic: |x2^T F x1| (unitless).
    sampson:   the algebraic value divided by the norm of its gradient with
               respect to u2, i.e. the distance (pixels) of u2 to the
               epipolar line F x1.

    Accepts single points (2,) or batches (N,2); returns scalar or (N,).
    """
    p1 = np.atleast_2d(np.asarray(u1, dtype=float))
    p2 = np.atleast_2d(np.asarray(u2, dtype=float))
    x1 = np.concatenate([p1, np.ones((len(p1), 1))], axis=1)
    x2 = np.concatenate([p2, np.ones((len(p2), 1))], axis=1)
    lines = x1 @ F.T  # epipolar lines of u1 in image 2
    alg = np.abs(np.sum(x2 * lines, axis=1))
    if cfg.residual_kind == "algebraic":
        res = alg
    else:
        grad = np.sqrt(lines[:, 0] ** 2 + lines[:, 1] ** 2)
        res = alg / np.maximum(grad, 1e-15)
    return res[0] if np.asarray(u1).ndim == 1 else res


def triangulate(observations):
    """Linear (DLT) triangulation of one 3D point from >=2 posed observations.

    observations: list of (Pose, CameraIntrinsics, pixel) tuples.
    Returns (point (3,), max per-view reprojection error in pixels).
    """
    if len(observations) < 2:
        raise ValueError("need at least two observations")
    centers = np.array([camera_center(p) for p, _, _ in observations])
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) <= BASELINE_EPS:
        raise DegenerateGeometry("all camera centers coincide")

    rows = []
    for pose, intr, uv in observations:
        P = calibration_matrix(intr) @ np.hstack([pose.rotation, pose.translation[:, None]])
        u, v = np.asarray(uv, dtype=float)
        rows.append(u * P[2] - P[0])
        rows.append(v * P[2] - P[1])
    A = np.array(rows)
    _, _, vt = np.linalg.svd(A)
    X = vt[-1]
    if abs(X[3]) < 1e-12 * np.linalg.norm(X[:3]):
        raise DegenerateGeometry("triangulated point at infinity (parallel rays)")
    X = X[:3] / X[3]

    err = 0.0
    for pose, intr, uv in observations:
        z = pose.rotation[2] @ X + pose.translation[2]
        if z <= 0:
            raise CheiralityViolation("point behind camera")
        proj, _ = project(pose, intr, X)
        err = max(err, float(np.linalg.norm(proj[0] - np.asarray(uv, dtype=float))))
    return X, err


def pose_error(pose_a, pose_b):
    """Angular difference (degrees, via the trace formula) and distance
    between camera centers."""
    R = pose_a.rotation @ pose_b.rotation.T
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = float(np.degrees(np.arccos(c)))
    dist = float(np.linalg.norm(camera_center(pose_a) - camera_center(pose_b)))
    return PoseError(angle_deg=angle, distance=dist)


def similarity_target(err):
    """Pose-similarity target min(1, (theta + 10 t) / 50): 0 = identical pose,
    1 = at or past the similarity threshold."""
    return float(min(1.0, (err.angle_deg + 10.0 * err.distance) / 50.0))


# ---------------------------------------------------------------------------
# pose text format: one `image_id qw qx qy qz tx ty tz` per line (world->camera)

def pose_to_quat(pose):
    """Unit quaternion (w, x, y, z) of the world->camera rotation."""
    q = Rotation.from_matrix(pose.rotation).as_quat()  # scipy order: x, y, z, w
    w, x, y, z = q[3], q[0], q[1], q[2]
    if w < 0:  # canonical sign for stable round-trips
        w, x, y, z = -w, -x, -y, -z
    return np.array([w, x, y, z])


def pose_from_quat(qwxyz, t):
    q = np.asarray(qwxyz, dtype=float)
    q = q / np.linalg.norm(q)
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    return Pose(rotation=R, translation=np.asarray(t, dtype=float))


def save_poses(path, poses):
    """Write `image_id qw qx qy qz tx ty tz` lines, sorted by image id."""
    with open(path, "w") as f:
        for image_id in sorted(poses):
            pose = poses[image_id]
            q = pose_to_quat(pose)
            vals = list(q) + list(pose.translation)
            f.write(image_id + " " + " ".join("%.17g" % v for v in vals) + "\n")


def load_poses(path):
    poses = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError("bad pose line: %r" % line)
            image_id = parts[0]
            vals = [float(v) for v in parts[1:]]
            poses[image_id] = pose_from_quat(vals[:4], vals[4:])
    return poses


def save_intrinsics(path, intr):
    with open(path, "w") as f:
        px, py = intr.principal_point
        f.write("%.17g %.17g %.17g %d %d\n" % (intr.focal, px, py, intr.width, intr.height))


def load_intrinsics(path):
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 5:
        raise ValueError("intrinsics file must hold `f px py width height`")
    return CameraIntrinsics(
        focal=float(parts[0]),
        principal_point=(float(parts[1]), float(parts[2])),
        width=int(parts[3]),
        height=int(parts[4]),
    )


def random_rotation(rng):
    """Uniform random rotation matrix from a seeded generator."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Rotation.from_quat(q).as_matrix()


def look_at_pose(center, target, up=(0.0, 0.0, 1.0)):
    """World->camera pose for a camera at `center` looking toward `target`.

    Camera z axis points at the target; x is horizontal (right), y points
    downward-ish so images come out upright for a z-up world.
    """
    center = np.asarray(center, dtype=float)
    fwd = np.asarray(target, dtype=float) - center
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera center and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=float)
    right = np.cross(fwd, up)
    rn = np.linalg.norm(right)
    if rn < 1e-9:  # looking straight along `up`: pick any horizontal right
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
            rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])  # rows: camera axes in world coords
    return Pose(rotation=R, translation=-R @ center)
