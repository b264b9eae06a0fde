"""Synthetic view rendering from the fused mesh and photometric pose
verification.

Rendering is a z-buffered software rasterizer with perspective-correct
per-vertex color interpolation (no back-face culling: scan meshes are open).
Verification compares dense gradient descriptors between the query image and
each candidate render, skipping movable-object pixels, and penalizes poses
whose renders see past the mapped geometry via a coverage term.
"""

import logging
import os
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage

from . import geom
from . import pose as posemod
from .features import to_gray, _CELL_W, CELLS, ORI_BINS, PATCH

log = logging.getLogger(__name__)


class EmptyMesh(Exception):
    """Mesh has no faces to render."""


class NoComparablePixels(Exception):
    """No patch survives the coverage and movable-mask gating."""


@dataclass
class SyntheticView:
    rgb: np.ndarray       # (H, W, 3) uint8
    depth: np.ndarray     # (H, W) float32, 0 where not covered
    coverage: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class PhotometricScore:
    value: float              # median descriptor distance + coverage penalty
    compared_fraction: float  # qualifying patches / total patches
    median: float             # the raw median term


@numba.njit(cache=True)
def _raster_kernel(xs, ys, zs, colors, faces, color_buf, depth_buf, znear):
    h, w = depth_buf.shape
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = zs[i0], zs[i1], zs[i2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0, y0 = xs[i0], ys[i0]
        x1, y1 = xs[i1], ys[i1]
        x2, y2 = xs[i2], ys[i2]
        minx = int(np.floor(min(x0, min(x1, x2))))
        maxx = int(np.ceil(max(x0, max(x1, x2))))
        miny = int(np.floor(min(y0, min(y1, y2))))
        maxy = int(np.ceil(max(y0, max(y1, y2))))
        if minx < 0:
            minx = 0
        if miny < 0:
            miny = 0
        if maxx > w - 1:
            maxx = w - 1
        if maxy > h - 1:
            maxy = h - 1
        if minx > maxx or miny > maxy:
            continue
        denom = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(denom) < 1e-12:
            continue
        inv0, inv1, inv2 = 1.0 / z0, 1.0 / z1, 1.0 / z2
        for py in range(miny, maxy + 1):
            fy = float(py)
            for px in range(minx, maxx + 1):
                fx = float(px)
                l0 = ((y1 - y2) * (fx - x2) + (x2 - x1) * (fy - y2)) / denom
                l1 = ((y2 - y0) * (fx - x2) + (x0 - x2) * (fy - y2)) / denom
                l2 = 1.0 - l0 - l1
                if l0 < 0.0 or l1 < 0.0 or l2 < 0.0:
                    continue
                wz = l0 * inv0 + l1 * inv1 + l2 * inv2
                z = 1.0 / wz
                if z < depth_buf[py, px]:
                    depth_buf[py, px] = z
                    for c in range(3):
                        color_buf[py, px, c] = z * (
                            l0 * colors[i0, c] * inv0
                            + l1 * colors[i1, c] * inv1
                            + l2 * colors[i2, c] * inv2
                        )


def clip_triangles_near(cam_tris, aux_tris, znear):
    """Clip camera-space triangles against the plane z = znear.

    cam_tris: (F, 3, 3) camera-space vertex positions; aux_tris: (F, 3, K)
    per-vertex attributes interpolated at clip points. Returns
    (cam', aux', face_origin) where face_origin maps each output triangle to
    its source index. Fully-behind triangles are dropped; straddling ones are
    Sutherland-Hodgman clipped and fan-retriangulated.
    """
    zlim = znear * 1.0001
    z = cam_tris[..., 2]
    front = z > znear
    keep = front.all(axis=1)
    crossing = front.any(axis=1) & ~keep

    out_cam = [cam_tris[keep]]
    out_aux = [aux_tris[keep]]
    out_idx = [np.nonzero(keep)[0]]
    extra_cam, extra_aux, extra_idx = [], [], []
    for f in np.nonzero(crossing)[0]:
        poly = []
        for i in range(3):
            a = cam_tris[f, i]
            b = cam_tris[f, (i + 1) % 3]
            aa = aux_tris[f, i]
            ab = aux_tris[f, (i + 1) % 3]
            if a[2] > zlim:
                poly.append((a, aa))
            if (a[2] > zlim) != (b[2] > zlim):
                t = (zlim - a[2]) / (b[2] - a[2])
                poly.append((a + t * (b - a), aa + t * (ab - aa)))
        for k in range(1, len(poly) - 1):  # fan triangulation
            extra_cam.append([poly[0][0], poly[k][0], poly[k + 1][0]])
            extra_aux.append([poly[0][1], poly[k][1], poly[k + 1][1]])
            extra_idx.append(f)
    if extra_cam:
        out_cam.append(np.array(extra_cam))
        out_aux.append(np.array(extra_aux))
        out_idx.append(np.array(extra_idx))
    return (
        np.concatenate(out_cam) if len(out_cam) > 1 else out_cam[0],
        np.concatenate(out_aux) if len(out_aux) > 1 else out_aux[0],
        np.concatenate(out_idx) if len(out_idx) > 1 else out_idx[0],
    )


def _project_soup(cam_tris, intr):
    z = cam_tris[..., 2]
    px, py = intr.principal_point
    sx = intr.focal * cam_tris[..., 0] / z + px
    sy = intr.focal * cam_tris[..., 1] / z + py
    return np.stack([sx, sy], axis=-1)


def render_view(mesh, pose, intr, znear=0.05):
    """Rasterize the mesh into an RGB-D view at the given pose/intrinsics."""
    if len(mesh.faces) == 0:
        raise EmptyMesh("mesh has no faces")
    cam_all = mesh.vertices @ pose.rotation.T + pose.translation
    cam_tris = cam_all[mesh.faces]                       # (F, 3, 3)
    aux = mesh.colors.astype(np.float64)[mesh.faces]     # (F, 3, 3)
    cam_tris, aux, _ = clip_triangles_near(cam_tris, aux, znear)

    color_buf = np.zeros((intr.height, intr.width, 3), dtype=np.float64)
    depth_buf = np.full((intr.height, intr.width), np.inf, dtype=np.float64)
    if len(cam_tris):
        screen = _project_soup(cam_tris, intr)
        nv = 3 * len(cam_tris)
        faces = np.arange(nv, dtype=np.int64).reshape(-1, 3)
        _raster_kernel(
            np.ascontiguousarray(screen[..., 0].ravel()),
            np.ascontiguousarray(screen[..., 1].ravel()),
            np.ascontiguousarray(cam_tris[..., 2].ravel()),
            np.ascontiguousarray(aux.reshape(nv, 3)),
            faces,
            color_buf,
            depth_buf,
            znear,
        )
    coverage = np.isfinite(depth_buf)
    depth = np.where(coverage, depth_buf, 0.0).astype(np.float32)
    rgb = np.clip(np.round(color_buf), 0, 255).astype(np.uint8)
    return SyntheticView(rgb=rgb, depth=depth, coverage=coverage)


def _integral(img):
    out = np.zeros((img.shape[0] + 1, img.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(img, axis=0), axis=1, out=out[1:, 1:])
    return out


def _block_sums(integral, y0s, x0s, size):
    """Sum over size x size blocks anchored at each (y0, x0) grid position."""
    a = integral[np.ix_(y0s + size, x0s + size)]
    b = integral[np.ix_(y0s + size, x0s)]
    c = integral[np.ix_(y0s, x0s + size)]
    d = integral[np.ix_(y0s, x0s)]
    return a - b - c + d


def dense_descriptor_field(image, patch=PATCH, stride=4):
    """Gradient-orientation descriptors (as in `features`) on a dense grid.

    Returns (grid_h, grid_w, 128); the descriptor at (i, j) covers the patch
    whose top-left corner is (j * stride, i * stride). Flat patches yield
    zero vectors.
    """
    gray = to_gray(image)
    h, w = gray.shape
    if patch > min(h, w):
        raise ValueError("patch larger than image")
    dx = ndimage.sobel(gray, axis=1, mode="nearest") / 8.0
    dy = ndimage.sobel(gray, axis=0, mode="nearest") / 8.0
    mag = np.hypot(dx, dy)
    ang = np.arctan2(dy, dx)
    obin = np.floor((ang + np.pi) / (2 * np.pi) * ORI_BINS).astype(int) % ORI_BINS

    integrals = [
        _integral(np.where(obin == o, mag, 0.0)) for o in range(ORI_BINS)
    ]
    cell = patch // CELLS
    y0s = np.arange(0, h - patch + 1, stride)
    x0s = np.arange(0, w - patch + 1, stride)
    gh, gw = len(y0s), len(x0s)
    desc = np.zeros((gh, gw, CELLS, CELLS, ORI_BINS))
    for ci in range(CELLS):
        for cj in range(CELLS):
            wgt = _CELL_W[ci, cj]
            for o in range(ORI_BINS):
                desc[:, :, ci, cj, o] = wgt * _block_sums(
                    integrals[o], y0s + ci * cell, x0s + cj * cell, cell
                )
    desc = desc.reshape(gh, gw, CELLS * CELLS * ORI_BINS)
    np.maximum(desc, 0.0, out=desc)  # integral-image cancellation guard
    s = desc.sum(axis=2, keepdims=True)
    nz = s[..., 0] > 0
    desc[nz] = np.sqrt(desc[nz] / s[nz])
    return desc


def compare_views(query, synth, movable_mask=None, patch=PATCH, stride=4,
                  coverage_penalty=1.0, min_cells=500):
    """Photometric score of a candidate render against the query image.

    A grid patch qualifies when it is fully covered by the render and free of
    movable-mask pixels. The score is the median descriptor distance over
    qualifying patches plus `coverage_penalty * (1 - compared_fraction)`,
    which ranks poses that look past the mapped geometry behind poses that
    explain the whole frame.
    """
    if query.shape[:2] != synth.rgb.shape[:2]:
        raise ValueError("query and render dimensions differ")
    dq = dense_descriptor_field(query, patch=patch, stride=stride)
    ds = dense_descriptor_field(synth.rgb, patch=patch, stride=stride)

    h, w = query.shape[:2]
    y0s = np.arange(0, h - patch + 1, stride)
    x0s = np.arange(0, w - patch + 1, stride)
    cov = _block_sums(_integral(synth.coverage.astype(np.float64)), y0s, x0s, patch)
    qualify = cov >= patch * patch - 0.5
    if movable_mask is not None:
        msk = _block_sums(
            _integral(np.asarray(movable_mask, dtype=np.float64)), y0s, x0s, patch
        )
        qualify &= msk < 0.5

    total = qualify.size
    n_ok = int(qualify.sum())
    if n_ok == 0:
        raise NoComparablePixels("no patch is covered and unmasked")
    if n_ok < min_cells:
        log.debug("compare_views: only %d qualifying patches (low confidence)", n_ok)
    dists = np.linalg.norm(dq - ds, axis=2)
    median = float(np.median(dists[qualify]))
    fraction = n_ok / total
    return PhotometricScore(
        value=median + coverage_penalty * (1.0 - fraction),
        compared_fraction=fraction,
        median=median,
    )


def select_best_pose(query, intr, candidates, mesh, masks=None, l=10,
                     patch=PATCH, stride=4, coverage_penalty=1.0,
                     dump_dir=None):
    """Render the top-l candidates (by inlier order) and return the one with
    the lowest photometric score.

    `masks` is either one query movable mask or a mapping from candidate
    source image id to a per-pair mask. Candidates whose comparison fails
    entirely rank last; ties break by higher inlier count, then ascending
    source id. Returns (best_candidate, scored) where scored lists
    (candidate, PhotometricScore or None) in render order.
    """
    if not candidates:
        raise ValueError("no candidates")
    ordered = posemod.sort_candidates(candidates)[:l]
    scored = []
    for cand in ordered:
        view = render_view(mesh, cand.pose, intr)
        mask = masks.get(cand.source_image) if isinstance(masks, dict) else masks
        try:
            score = compare_views(query, view, mask, patch=patch, stride=stride,
                                  coverage_penalty=coverage_penalty)
        except NoComparablePixels:
            score = None
        scored.append((cand, score))
        if dump_dir is not None:
            from PIL import Image

            os.makedirs(dump_dir, exist_ok=True)
            Image.fromarray(view.rgb).save(
                os.path.join(dump_dir, "%02d_%s.png" % (len(scored) - 1, cand.source_image))
            )
    if dump_dir is not None:
        with open(os.path.join(dump_dir, "scores.txt"), "w") as f:
            for cand, score in scored:
                if score is None:
                    f.write("%s nan nan inf\n" % cand.source_image)
                else:
                    f.write("%s %.6g %.6g %.6g\n" % (
                        cand.source_image, score.median,
                        score.compared_fraction, score.value))

    def rank(item):
        cand, score = item
        value = np.inf if score is None else score.value
        return (value, -cand.inlier_count, cand.source_image)

    best, best_score = min(scored, key=rank)
    if best_score is None:
        raise NoComparablePixels("every candidate failed the comparison")
    return best, scored
