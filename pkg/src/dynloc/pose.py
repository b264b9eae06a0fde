"""Robust absolute pose from 2D-3D correspondences: a P3P minimal solver
inside a locally-optimized RANSAC loop with a linear (DLT) PnP refit.
"""

from dataclasses import dataclass

import numpy as np

from . import geom


class CollinearPoints(Exception):
    """The three 3D points of a P3P instance are (near-)collinear."""


class InsufficientCorrespondences(Exception):
    """Fewer than 4 correspondences: P3P ambiguity cannot be resolved."""


class NoModelFound(Exception):
    """RANSAC found no pose with at least 4 inliers."""


@dataclass(frozen=True)
class Correspondence2D3D:
    pixel: tuple          # (x, y)
    point: tuple          # (X, Y, Z)
    source_track: int = -1


@dataclass(frozen=True)
class PoseCandidate:
    pose: geom.Pose
    inlier_count: int
    inlier_indices: np.ndarray
    source_image: str = ""


def _bearings(pixels, intr):
    """Unit bearing vectors in the camera frame for pixel positions (N,2)."""
    px, py = intr.principal_point
    x = (pixels[:, 0] - px) / intr.focal
    y = (pixels[:, 1] - py) / intr.focal
    b = np.stack([x, y, np.ones(len(pixels))], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def reprojection_errors(pose, intr, points, pixels):
    """Pixel reprojection error per correspondence; points behind the camera
    get infinite error."""
    uv, z = geom.project(pose, intr, points)
    err = np.linalg.norm(uv - pixels, axis=1)
    return np.where(z > 0, np.where(np.isfinite(err), err, np.inf), np.inf)


def _p3p_distances(dists, cosines):
    """Solve the three law-of-cosines equations of P3P for the camera-to-point
    distances (s1, s2, s3).

    dists = (a, b, c) with a = |P2-P3|, b = |P1-P3|, c = |P1-P2|;
    cosines = (cos_alpha, cos_beta, cos_gamma) of the angles between bearing
    pairs (2,3), (1,3), (1,2). Returns a list of (s1, s2, s3) triples.

    Uses the resultant of the two quadratics in u = s2/s1 obtained from the
    equation ratios, which is the classic quartic in v = s3/s1.
    """
    a, b, c = dists
    ca, cb, cg = cosines
    a2, b2, c2 = a * a, b * b, c * c

    # quadratics in u with coefficients polynomial in v (highest power first):
    #   p: b^2 u^2 - 2 b^2 ca v u + [(b^2 - a^2) v^2 + 2 a^2 cb v - a^2] = 0
    #   q: b^2 u^2 - 2 b^2 cg u   + [-c^2 v^2 + 2 c^2 cb v + (b^2 - c^2)] = 0
    p2 = np.array([b2])
    p1 = np.array([-2.0 * b2 * ca, 0.0])
    p0 = np.array([b2 - a2, 2.0 * a2 * cb, -a2])
    q2 = np.array([b2])
    q1 = np.array([-2.0 * b2 * cg])
    q0 = np.array([-c2, 2.0 * c2 * cb, b2 - c2])

    t1 = np.polysub(np.polymul(p2, q0), np.polymul(p0, q2))
    t2 = np.polysub(np.polymul(p1, q0), np.polymul(p0, q1))
    t3 = np.polysub(np.polymul(p2, q1), np.polymul(p1, q2))
    quartic = np.polysub(np.polymul(t1, t1), np.polymul(t2, t3))

    quartic = np.trim_zeros(quartic, "f")
    if quartic.size == 0:
        return []
    roots = np.roots(quartic)

    out = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = float(v.real)
        if v <= 0:
            continue
        denom = np.polyval(t3, v)
        if abs(denom) > 1e-12:
            u = -np.polyval(t1, v) / denom
        else:
            # fall back to the roots of q and keep the one satisfying p
            disc = cg * cg - 1.0 + (c2 / b2) * (1.0 + v * v - 2.0 * v * cb)
            if disc < 0:
                continue
            us = [cg + np.sqrt(disc), cg - np.sqrt(disc)]
            us = [x for x in us if x > 0]
            if not us:
                continue
            u = min(us, key=lambda x: abs(b2 * x * x - 2 * b2 * ca * v * x
                                          + np.polyval(p0, v)))
        if u <= 0:
            continue
        s1_sq = b2 / max(1.0 + v * v - 2.0 * v * cb, 1e-15)
        s1 = np.sqrt(s1_sq)
        s = np.array([s1, u * s1, v * s1])
        s = _newton_polish(s, (a, b, c), (ca, cb, cg))
        if s is not None and np.all(s > 0):
            out.append(s)

    # drop duplicate roots
    unique = []
    for s in out:
        if not any(np.linalg.norm(s - t) < 1e-7 * (1 + np.linalg.norm(t)) for t in unique):
            unique.append(s)
    return unique


def _newton_polish(s, dists, cosines, iters=6):
    a, b, c = dists
    ca, cb, cg = cosines
    target = np.array([a * a, b * b, c * c])
    for _ in range(iters):
        s1, s2, s3 = s
        f = np.array([
            s2 * s2 + s3 * s3 - 2 * s2 * s3 * ca,
            s1 * s1 + s3 * s3 - 2 * s1 * s3 * cb,
            s1 * s1 + s2 * s2 - 2 * s1 * s2 * cg,
        ]) - target
        J = np.array([
            [0.0, 2 * s2 - 2 * s3 * ca, 2 * s3 - 2 * s2 * ca],
            [2 * s1 - 2 * s3 * cb, 0.0, 2 * s3 - 2 * s1 * cb],
            [2 * s1 - 2 * s2 * cg, 2 * s2 - 2 * s1 * cg, 0.0],
        ])
        try:
            step = np.linalg.solve(J, f)
        except np.linalg.LinAlgError:
            return None
        s = s - step
        if np.max(np.abs(step)) < 1e-14 * (1 + np.max(np.abs(s))):
            break
    return s


def _rigid_align(src, dst):
    """R, t with R @ src_i + t ~= dst_i (Kabsch, exact for congruent triples)."""
    ms = src.mean(axis=0)
    md = dst.mean(axis=0)
    H = (src - ms).T @ (dst - md)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return R, md - R @ ms


def solve_p3p(corrs, intr):
    """All real solutions of the perspective-3-point problem.

    Returns up to 4 world->camera poses, each reprojecting the three input
    points to better than 1e-6 px. Raises CollinearPoints for a degenerate
    3D configuration.
    """
    if len(corrs) != 3:
        raise ValueError("solve_p3p needs exactly 3 correspondences")
    points = np.array([c.point for c in corrs], dtype=float)
    pixels = np.array([c.pixel for c in corrs], dtype=float)
    return _solve_p3p_arrays(points, pixels, intr)


def _solve_p3p_arrays(points, pixels, intr):
    scale = np.max(np.linalg.norm(points - points[0], axis=1))
    cross = np.cross(points[1] - points[0], points[2] - points[0])
    if scale <= 0 or np.linalg.norm(cross) < 1e-9 * scale * scale:
        raise CollinearPoints("3D points are collinear")

    bear = _bearings(pixels, intr)
    a = np.linalg.norm(points[1] - points[2])
    b = np.linalg.norm(points[0] - points[2])
    c = np.linalg.norm(points[0] - points[1])
    ca = float(bear[1] @ bear[2])
    cb = float(bear[0] @ bear[2])
    cg = float(bear[0] @ bear[1])

    poses = []
    for s in _p3p_distances((a, b, c), (ca, cb, cg)):
        cam_pts = s[:, None] * bear
        R, t = _rigid_align(points, cam_pts)
        try:
            pose = geom.Pose(rotation=R, translation=t)
        except ValueError:
            continue
        err = reprojection_errors(pose, intr, points, pixels)
        if np.max(err) < 1e-6:
            poses.append(pose)
    return poses


def dlt_pnp(points, pixels, intr):
    """Linear PnP on >= 6 correspondences: DLT for P = K [R|t] followed by
    orthogonality enforcement on R."""
    points = np.asarray(points, dtype=float)
    pixels = np.asarray(pixels, dtype=float)
    if len(points) < 6:
        raise ValueError("dlt_pnp needs >= 6 correspondences")
    px, py = intr.principal_point
    xn = (pixels[:, 0] - px) / intr.focal
    yn = (pixels[:, 1] - py) / intr.focal
    Xh = np.hstack([points, np.ones((len(points), 1))])

    A = np.zeros((2 * len(points), 12))
    A[0::2, 0:4] = -Xh
    A[0::2, 8:12] = xn[:, None] * Xh
    A[1::2, 4:8] = -Xh
    A[1::2, 8:12] = yn[:, None] * Xh
    _, _, vt = np.linalg.svd(A, full_matrices=False)
    M = vt[-1].reshape(3, 4)
    if np.linalg.det(M[:, :3]) < 0:
        M = -M
    U, S, Vt = np.linalg.svd(M[:, :3])
    R = U @ Vt
    lam = 3.0 / S.sum()
    t = lam * M[:, 3]
    pose = geom.Pose(rotation=R, translation=t)
    depths = points @ pose.rotation[2] + pose.translation[2]
    if np.median(depths) < 0:
        raise NoModelFound("DLT refit produced a behind-camera solution")
    return pose


def _adaptive_iterations(inlier_ratio, sample_size=3, confidence=0.99):
    p_good = inlier_ratio ** sample_size
    if p_good <= 1e-12:
        return np.inf
    if p_good >= 1.0:
        return 1
    return int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - p_good)))


def estimate_absolute_pose(corrs, intr, reproj_threshold=6.0, max_iters=10000,
                           seed=0, source_image=""):
    """Lo-RANSAC absolute pose: P3P on random 3-subsets, inliers by
    reprojection error, and an iterative DLT refit on each new best inlier
    set. Deterministic given the seed.
    """
    n = len(corrs)
    if n < 4:
        raise InsufficientCorrespondences("need >= 4 correspondences, got %d" % n)
    points = np.array([c.point for c in corrs], dtype=float)
    pixels = np.array([c.pixel for c in corrs], dtype=float)

    rng = np.random.default_rng(seed)
    best_pose = None
    best_count = 0
    best_errs = None
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(n, size=3, replace=False)
        try:
            sols = _solve_p3p_arrays(points[idx], pixels[idx], intr)
        except CollinearPoints:
            continue
        for pose in sols:
            errs = reprojection_errors(pose, intr, points, pixels)
            count = int(np.sum(errs < reproj_threshold))
            if count > best_count:
                pose, errs, count = _local_optimize(
                    pose, errs, count, points, pixels, intr, reproj_threshold
                )
                best_pose, best_errs, best_count = pose, errs, count
                needed = _adaptive_iterations(best_count / n)

    if best_pose is None or best_count < 4:
        raise NoModelFound("no pose with >= 4 inliers (best %d)" % best_count)

    inliers = np.nonzero(best_errs < reproj_threshold)[0]
    return PoseCandidate(
        pose=best_pose,
        inlier_count=int(len(inliers)),
        inlier_indices=inliers,
        source_image=source_image,
    )


def _local_optimize(pose, errs, count, points, pixels, intr, threshold,
                    max_rounds=10):
    """Iterative DLT refit on the current inlier set; keeps the refit only
    when it does not lose inliers, and stops once the set is stable."""
    for _ in range(max_rounds):
        inl = errs < threshold
        if inl.sum() < 6:
            break
        try:
            refit = dlt_pnp(points[inl], pixels[inl], intr)
        except (NoModelFound, ValueError, np.linalg.LinAlgError):
            break
        new_errs = reprojection_errors(refit, intr, points, pixels)
        new_count = int(np.sum(new_errs < threshold))
        if new_count < count:
            break
        same = np.array_equal(new_errs < threshold, inl)
        pose, errs, count = refit, new_errs, new_count
        if same:
            break
    return pose, errs, count


def sort_candidates(cands):
    """Descending inlier count; ties broken by ascending source image id."""
    return sorted(cands, key=lambda c: (-c.inlier_count, c.source_image))
