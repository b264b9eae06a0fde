"""Offline map construction: RGB-D ingestion, weighted TSDF fusion into a
colored triangle mesh, and epipolar-verified sparse reconstruction
(keypoints, tracks, triangulated points, visibility index).

Map directory layout:
    map/images/<id>.png        RGB
    map/depth/<id>.bin         row-major float32 depth, header DLD1 + w + h
    map/depth/<id>.png         alternative: 16-bit PNG, millimeters
    map/poses.txt              `id qw qx qy qz tx ty tz` (world->camera)
    map/intrinsics.txt         `f px py width height`
    map/masks/<id>.mask.png    optional instance masks (+ .mask.json sidecar)
    map/mesh.ply               binary little-endian PLY (written by fuse step)
    map/sparse/                sparse model (written by reconstruction step)
"""

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage import measure

from . import features as feat
from . import geom, retrieval


class VolumeTooLarge(Exception):
    """Requested TSDF grid exceeds the voxel budget."""


class EmptyVolume(Exception):
    """TSDF volume holds no observations."""


@dataclass
class MapImage:
    id: str
    rgb: np.ndarray
    depth: np.ndarray
    pose: geom.Pose
    intrinsics: geom.CameraIntrinsics

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise ValueError("rgb and depth dimensions differ for %s" % self.id)
        if (self.depth < 0).any():
            raise ValueError("negative depth in %s" % self.id)


@dataclass
class TsdfVolume:
    voxel_size: float
    truncation: float
    origin: np.ndarray
    dims: tuple
    tsdf: np.ndarray      # (nx, ny, nz) float32, clamped to +-truncation
    weights: np.ndarray   # (nx, ny, nz) float32
    colors: np.ndarray    # (nx, ny, nz, 3) float32

    def __post_init__(self):
        if self.truncation < 2 * self.voxel_size:
            raise ValueError("truncation must be >= 2 * voxel_size")


@dataclass
class Mesh:
    vertices: np.ndarray  # (V, 3) float64, world units
    faces: np.ndarray     # (F, 3) int32
    colors: np.ndarray    # (V, 3) uint8

    def __len__(self):
        return len(self.faces)


def fuse_tsdf(images, voxel_size=0.05, truncation=0.2, max_voxels=40_000_000):
    """Weighted TSDF integration of posed RGB-D images.

    Volume bounds come from the back-projected valid depth samples padded by
    the truncation band. Voxels never observed keep weight 0.
    """
    if not images:
        raise ValueError("cannot fuse an empty image list")

    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for img in images:
        d = img.depth[::8, ::8]
        vs, us = np.nonzero(d > 0)
        if len(vs) == 0:
            continue
        uv = np.stack([us * 8, vs * 8], axis=1).astype(float)
        pts = geom.back_project(img.pose, img.intrinsics, uv, d[vs, us])
        lo = np.minimum(lo, pts.min(axis=0))
        hi = np.maximum(hi, pts.max(axis=0))
    if not np.isfinite(lo).all():
        raise ValueError("no valid depth in any input image")
    pad = truncation + voxel_size
    lo -= pad
    hi += pad
    dims = tuple(int(np.ceil((hi[i] - lo[i]) / voxel_size)) + 1 for i in range(3))
    n = int(np.prod(dims))
    if n > max_voxels:
        raise VolumeTooLarge("%s voxels exceed budget %d" % (dims, max_voxels))

    tsdf = np.zeros(n, dtype=np.float32)
    weights = np.zeros(n, dtype=np.float32)
    colors = np.zeros((n, 3), dtype=np.float32)
    ix, iy, iz = np.unravel_index(np.arange(n), dims)
    coords = lo[None, :] + voxel_size * np.stack([ix, iy, iz], axis=1)

    for img in images:
        h, w = img.depth.shape
        cam = coords @ img.pose.rotation.T + img.pose.translation
        z = cam[:, 2]
        infront = z > 1e-6
        px, py = img.intrinsics.principal_point
        u = np.full(n, -1, dtype=np.int64)
        v = np.full(n, -1, dtype=np.int64)
        u[infront] = np.round(img.intrinsics.focal * cam[infront, 0] / z[infront] + px).astype(np.int64)
        v[infront] = np.round(img.intrinsics.focal * cam[infront, 1] / z[infront] + py).astype(np.int64)
        inb = infront & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        idx = np.nonzero(inb)[0]
        d = img.depth[v[idx], u[idx]]
        sdf = d - z[idx]
        upd = (d > 0) & (sdf > -truncation)
        idx = idx[upd]
        obs = np.clip(sdf[upd], -truncation, truncation).astype(np.float32)
        wold = weights[idx]
        wnew = wold + 1.0
        tsdf[idx] = (tsdf[idx] * wold + obs) / wnew
        rgb = img.rgb[v[idx], u[idx]].astype(np.float32)
        colors[idx] = (colors[idx] * wold[:, None] + rgb) / wnew[:, None]
        weights[idx] = wnew

    return TsdfVolume(
        voxel_size=voxel_size,
        truncation=truncation,
        origin=lo,
        dims=dims,
        tsdf=tsdf.reshape(dims),
        weights=weights.reshape(dims),
        colors=colors.reshape(dims + (3,)),
    )


def extract_mesh(vol):
    """Marching-cubes surface at the TSDF zero level with vertex colors
    interpolated from the weighted color accumulator."""
    mask = vol.weights > 0
    if not mask.any():
        raise EmptyVolume("volume has no observed voxels")
    try:
        verts, faces, _, _ = measure.marching_cubes(
            vol.tsdf, level=0.0, spacing=(vol.voxel_size,) * 3, mask=mask
        )
    except (ValueError, RuntimeError) as e:
        raise EmptyVolume("no surface in volume: %s" % e)
    idx = (verts / vol.voxel_size).T
    cols = np.stack(
        [ndimage.map_coordinates(vol.colors[..., c], idx, order=1, mode="nearest")
         for c in range(3)],
        axis=1,
    )
    return Mesh(
        vertices=verts.astype(np.float64) + vol.origin[None, :],
        faces=np.ascontiguousarray(faces.astype(np.int32)),
        colors=np.clip(np.round(cols), 0, 255).astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# sparse reconstruction

@dataclass
class SparseModel:
    keypoints: dict       # image_id -> (N, 2) float positions
    points3d: np.ndarray  # (P, 3)
    visibility: set       # {(image_id, kp_idx, point_idx)}
    track_length: np.ndarray  # (P,) int
    obs_residual: dict    # (image_id, kp_idx) -> max epipolar residual seen

    def observation_point(self):
        """(image_id, kp_idx) -> point_idx lookup."""
        return {(i, k): p for (i, k, p) in self.visibility}

    def validate(self):
        for image_id, kp_idx, point_idx in self.visibility:
            assert image_id in self.keypoints
            assert 0 <= kp_idx < len(self.keypoints[image_id])
            assert 0 <= point_idx < len(self.points3d)
        counts = np.zeros(len(self.points3d), dtype=int)
        for _, _, p in self.visibility:
            counts[p] += 1
        assert np.array_equal(counts, self.track_length)
        assert (self.track_length >= 2).all()


class _UnionFind:
    """Union-find over (image, keypoint) nodes that refuses any merge which
    would place two keypoints of one image in the same track."""

    def __init__(self):
        self.parent = {}
        self.images = {}  # root -> set of image ids

    def add(self, node):
        if node not in self.parent:
            self.parent[node] = node
            self.images[node] = {node[0]}

    def find(self, node):
        root = node
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[node] != root:
            self.parent[node], node = root, self.parent[node]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return True
        ia, ib = self.images[ra], self.images[rb]
        if ia & ib:
            return False  # conflicting merge: keep the existing tracks
        if len(ia) < len(ib):
            ra, rb = rb, ra
            ia, ib = ib, ia
        self.parent[rb] = ra
        ia |= ib
        del self.images[rb]
        return True


def build_sparse_model(images, retrieval_k, epi, features_by_image=None,
                       max_keypoints=2048, exclusion_masks=None,
                       pair_matches=None, on_pair=None):
    """Detect, match, epipolar-verify and triangulate across database images.

    features_by_image / pair_matches allow ingesting precomputed features or
    per-pair matches; otherwise the built-in detector and matcher run. Pairs
    with a near-zero baseline are skipped (no epipolar check possible).
    Verified matches are linked into tracks by union-find, each track is
    triangulated, and tracks failing cheirality or with max reprojection
    error > 2 * epi.threshold are dropped.
    """
    by_id = {img.id: img for img in images}
    if features_by_image is None:
        features_by_image = {}
        for img in images:
            mask = exclusion_masks.get(img.id) if exclusion_masks else None
            features_by_image[img.id] = feat.detect_and_describe(
                img.rgb, exclusion_mask=mask, max_keypoints=max_keypoints
            )

    if pair_matches is None:
        index = {img.id: retrieval.describe(img.rgb) for img in images}
        pairs = set()
        for img in images:
            neighbors = retrieval.find_closest_images(
                index[img.id], index, retrieval_k + 1
            )
            for other in neighbors:
                if other != img.id:
                    pairs.add(tuple(sorted((img.id, other))))
        pair_matches = {}
        for i, j in sorted(pairs):
            pair_matches[(i, j)] = feat.match(
                features_by_image[i].descriptors, features_by_image[j].descriptors
            )

    uf = _UnionFind()
    obs_residual = {}
    for (i, j), matches in sorted(pair_matches.items()):
        if not matches:
            continue
        try:
            F = geom.fundamental_from_poses(by_id[i].pose, by_id[j].pose,
                                            by_id[i].intrinsics)
        except geom.DegeneratePair:
            continue  # pure-rotation pair: discard its matches
        ka = features_by_image[i].positions
        kb = features_by_image[j].positions
        ia = np.array([m.idx_a for m in matches])
        ib = np.array([m.idx_b for m in matches])
        res = geom.epipolar_residual(ka[ia], kb[ib], F, epi)
        ok = res < epi.threshold
        if on_pair is not None:
            on_pair(i, j, matches, res, ok)
        for m, r, good in zip(matches, res, ok):
            if not good:
                continue
            a = (i, m.idx_a)
            b = (j, m.idx_b)
            uf.add(a)
            uf.add(b)
            uf.union(a, b)
            obs_residual[a] = max(obs_residual.get(a, 0.0), float(r))
            obs_residual[b] = max(obs_residual.get(b, 0.0), float(r))

    tracks = {}
    for node in uf.parent:
        tracks.setdefault(uf.find(node), []).append(node)

    points = []
    visibility = set()
    for root in sorted(tracks):
        obs_nodes = sorted(tracks[root])
        if len(obs_nodes) < 2:
            continue
        obs = [
            (by_id[i].pose, by_id[i].intrinsics, features_by_image[i].positions[k])
            for i, k in obs_nodes
        ]
        try:
            X, err = geom.triangulate(obs)
        except (geom.DegenerateGeometry, geom.CheiralityViolation):
            continue
        if err > 2 * epi.threshold:
            continue
        pt_idx = len(points)
        points.append(X)
        for i, k in obs_nodes:
            visibility.add((i, k, pt_idx))

    points3d = np.array(points).reshape(-1, 3)
    track_length = np.zeros(len(points3d), dtype=int)
    for _, _, p in visibility:
        track_length[p] += 1

    kept_res = {
        (i, k): obs_residual[(i, k)]
        for (i, k, _) in visibility
        if (i, k) in obs_residual
    }
    return SparseModel(
        keypoints={i: f.positions for i, f in features_by_image.items()},
        points3d=points3d,
        visibility=visibility,
        track_length=track_length,
        obs_residual=kept_res,
    )


# ---------------------------------------------------------------------------
# file formats

DEPTH_MAGIC = b"DLD1"


def save_rgb(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


def load_rgb(path):
    return np.asarray(Image.open(path).convert("RGB"))


def save_depth_bin(path, depth):
    d = np.ascontiguousarray(depth, dtype="<f4")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(np.array([d.shape[1], d.shape[0]], dtype="<u4").tobytes())
        f.write(d.tobytes())


def load_depth_bin(path):
    with open(path, "rb") as f:
        if f.read(4) != DEPTH_MAGIC:
            raise ValueError("bad depth magic in %s" % path)
        w, h = np.frombuffer(f.read(8), dtype="<u4")
        data = np.frombuffer(f.read(int(w) * int(h) * 4), dtype="<f4")
    return data.reshape(int(h), int(w)).copy()


def save_depth_png(path, depth):
    """16-bit PNG in millimeters (0 stays 0 = invalid)."""
    mm = np.clip(np.round(np.asarray(depth) * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth_png(path):
    mm = np.asarray(Image.open(path)).astype(np.float32)
    return mm / 1000.0


def load_depth(path):
    path = str(path)
    if path.endswith(".bin"):
        return load_depth_bin(path)
    return load_depth_png(path)


def save_ply(path, mesh):
    """Binary little-endian PLY with xyz + rgb vertices and triangle faces."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        "element vertex %d\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "element face %d\n"
        "property list uchar int vertex_indices\nend_header\n"
        % (len(mesh.vertices), len(mesh.faces))
    )
    vert = np.zeros(
        len(mesh.vertices),
        dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)],
    )
    vert["xyz"] = mesh.vertices
    vert["rgb"] = mesh.colors
    face = np.zeros(len(mesh.faces), dtype=[("n", "u1"), ("idx", "<i4", 3)])
    face["n"] = 3
    face["idx"] = mesh.faces
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(vert.tobytes())
        f.write(face.tobytes())


def load_ply(path):
    with open(path, "rb") as f:
        data = f.read()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    nv = nf = 0
    for line in header:
        if line.startswith("element vertex"):
            nv = int(line.split()[-1])
        elif line.startswith("element face"):
            nf = int(line.split()[-1])
    vert = np.frombuffer(
        data, dtype=[("xyz", "<f4", 3), ("rgb", "u1", 3)], count=nv, offset=end
    )
    face = np.frombuffer(
        data,
        dtype=[("n", "u1"), ("idx", "<i4", 3)],
        count=nf,
        offset=end + vert.nbytes,
    )
    return Mesh(
        vertices=vert["xyz"].astype(np.float64),
        faces=face["idx"].astype(np.int32).copy(),
        colors=vert["rgb"].copy(),
    )


def save_sparse_model(sparse_dir, model):
    os.makedirs(sparse_dir, exist_ok=True)
    kdir = os.path.join(sparse_dir, "keypoints")
    os.makedirs(kdir, exist_ok=True)
    with open(os.path.join(sparse_dir, "points3d.txt"), "w") as f:
        for i, (p, tl) in enumerate(zip(model.points3d, model.track_length)):
            f.write("%d %.17g %.17g %.17g %d\n" % (i, p[0], p[1], p[2], tl))
    with open(os.path.join(sparse_dir, "visibility.txt"), "w") as f:
        for image_id, kp_idx, pt_idx in sorted(model.visibility):
            r = model.obs_residual.get((image_id, kp_idx), 0.0)
            f.write("%s %d %d %.17g\n" % (image_id, kp_idx, pt_idx, r))
    for image_id, pos in model.keypoints.items():
        feat.save_keypoints(os.path.join(kdir, image_id + ".kpts"), pos)


def load_sparse_model(sparse_dir):
    points = []
    lengths = []
    with open(os.path.join(sparse_dir, "points3d.txt")) as f:
        for line in f:
            parts = line.split()
            points.append([float(v) for v in parts[1:4]])
            lengths.append(int(parts[4]))
    visibility = set()
    obs_residual = {}
    with open(os.path.join(sparse_dir, "visibility.txt")) as f:
        for line in f:
            image_id, kp_idx, pt_idx, r = line.split()
            visibility.add((image_id, int(kp_idx), int(pt_idx)))
            obs_residual[(image_id, int(kp_idx))] = float(r)
    keypoints = {}
    kdir = os.path.join(sparse_dir, "keypoints")
    for name in sorted(os.listdir(kdir)):
        if name.endswith(".kpts"):
            pos, _ = feat.load_keypoints(os.path.join(kdir, name))
            keypoints[name[: -len(".kpts")]] = pos
    return SparseModel(
        keypoints=keypoints,
        points3d=np.array(points).reshape(-1, 3),
        visibility=visibility,
        track_length=np.array(lengths, dtype=int),
        obs_residual=obs_residual,
    )
