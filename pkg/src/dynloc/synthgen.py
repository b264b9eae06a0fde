"""Synthetic dynamic-dataset generator: procedural textured indoor scenes,
panorama-style cutout sampling, movable-object placement with collision
rejection, and emission of database/query splits with ground-truth poses and
masks.

Dataset layout (the root doubles as the map directory):
    <out>/images/, depth/, masks/, poses.txt, intrinsics.txt, taxonomy.txt
    <out>/query/images/, depth/, masks/, gt_poses.txt, occupancy.txt
    <out>/manifest.txt   seed, parameters, per-file checksums
"""

import hashlib
import math
import os
from dataclasses import dataclass, field, replace

import numba
import numpy as np

from . import dynfilter, geom, mapstore

QUERY_HEIGHT = 1.5  # camera height above the floor (map units)

DEFAULT_INTRINSICS = geom.CameraIntrinsics(
    focal=1034.0, principal_point=(672.0, 378.0), width=1344, height=756
)


class PlacementFailure(Exception):
    """Rejection sampling could not place an object collision-free."""


class InsufficientFreeSpace(Exception):
    """Too little free floor area for the requested camera positions."""


@dataclass(frozen=True)
class CutoutSampling:
    yaw_step_deg: float = 30.0
    pitch_levels_deg: tuple = (-30.0, 0.0, 30.0)

    @property
    def per_sweep(self):
        return int(round(360.0 / self.yaw_step_deg)) * len(self.pitch_levels_deg)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    room_size: tuple = (9.0, 7.0, 3.0)
    style: str = "textured"  # "textured" | "textureless"
    n_furniture: int = 7
    n_props: int = 2    # movable-class objects present in map AND queries
    n_placed: int = 3   # movable-class objects present only in queries
    n_walkers: int = 2  # dynamic-class objects present only in queries
    size_factor: float = 1.0


@dataclass
class SceneObject:
    name: str
    class_name: str       # segmentation class ("crate", "box", "person")
    role: str             # "prop" | "placed" | "walker"
    instance_id: int
    tris: np.ndarray      # (F, 3, 3) world-space triangles
    face_material: np.ndarray
    aabb: np.ndarray      # (2, 3) lo/hi


@dataclass
class Scene:
    spec: SceneSpec
    env_tris: np.ndarray
    env_face_material: np.ndarray
    materials: np.ndarray   # (M, 12) procedural texture parameters
    objects: list
    obstacles: np.ndarray   # (N, 2, 3) AABBs blocking camera placement

    def geometry(self, include_movables, movable_roles=("placed", "walker", "prop")):
        """Triangle soup + per-face material/instance arrays for rendering.

        Environment faces carry instance id 0; movable objects carry their
        instance ids. `include_movables=False` keeps only props (objects
        present in the map)."""
        tris = [self.env_tris]
        mats = [self.env_face_material]
        insts = [np.zeros(len(self.env_tris), dtype=np.int64)]
        for obj in self.objects:
            if obj.role == "prop" or (include_movables and obj.role in movable_roles):
                tris.append(obj.tris)
                mats.append(obj.face_material)
                insts.append(np.full(len(obj.tris), obj.instance_id, dtype=np.int64))
        return (
            np.concatenate(tris),
            np.concatenate(mats).astype(np.int64),
            np.concatenate(insts),
        )


# ---------------------------------------------------------------------------
# procedural texture kernels

@numba.njit(inline="always", cache=True)
def _hash3(ix, iy, iz, seed):
    h = ix * np.int64(73856093) ^ iy * np.int64(19349663) \
        ^ iz * np.int64(83492791) ^ seed * np.int64(2654435761)
    h = (h ^ (h >> 13)) * np.int64(1274126177)
    h = h ^ (h >> 16)
    return (h & np.int64(0xFFFFFF)) / 16777215.0


@numba.njit(inline="always", cache=True)
def _fade(t):
    return t * t * (3.0 - 2.0 * t)


@numba.njit(inline="always", cache=True)
def _value_noise(x, y, z, seed):
    ix = np.int64(np.floor(x))
    iy = np.int64(np.floor(y))
    iz = np.int64(np.floor(z))
    fx = _fade(x - ix)
    fy = _fade(y - iy)
    fz = _fade(z - iz)
    one = np.int64(1)
    c000 = _hash3(ix, iy, iz, seed)
    c100 = _hash3(ix + one, iy, iz, seed)
    c010 = _hash3(ix, iy + one, iz, seed)
    c110 = _hash3(ix + one, iy + one, iz, seed)
    c001 = _hash3(ix, iy, iz + one, seed)
    c101 = _hash3(ix + one, iy, iz + one, seed)
    c011 = _hash3(ix, iy + one, iz + one, seed)
    c111 = _hash3(ix + one, iy + one, iz + one, seed)
    x00 = c000 + (c100 - c000) * fx
    x10 = c010 + (c110 - c010) * fx
    x01 = c001 + (c101 - c001) * fx
    x11 = c011 + (c111 - c011) * fx
    y0 = x00 + (x10 - x00) * fy
    y1 = x01 + (x11 - x01) * fy
    return y0 + (y1 - y0) * fz


@numba.njit(inline="always", cache=True)
def _material_color(wx, wy, wz, mat):
    r = mat[0]
    g = mat[1]
    b = mat[2]
    seed = np.int64(mat[9])
    if mat[4] != 0.0:  # checker
        cs = mat[3]
        c = (np.int64(np.floor(wx / cs)) + np.int64(np.floor(wy / cs))
             + np.int64(np.floor(wz / cs))) & np.int64(1)
        amp = (2.0 * c - 1.0) * mat[4]
        r += amp
        g += amp
        b += amp
    if mat[6] != 0.0:  # mid-scale value noise (survives TSDF resolution)
        s = mat[5]
        v = (2.0 * _value_noise(wx / s, wy / s, wz / s, seed) - 1.0) * mat[6]
        r += v
        g += v * 0.8
        b += v * 0.9
    if mat[8] != 0.0:  # fine noise for local keypoint distinctiveness
        s = mat[7]
        v = (2.0 * _value_noise(wx / s, wy / s, wz / s, seed + np.int64(77)) - 1.0) * mat[8]
        r += v
        g += v
        b += v
    if mat[10] != 0.0:  # slow color ramp over world position (retrieval cue)
        hr = mat[10]
        r += hr * math.sin(0.9 * wx)
        g += hr * math.sin(1.1 * wy + 2.0)
        b += hr * math.sin(0.6 * (wx + wy) + 4.0)
    if r < 0.0:
        r = 0.0
    if r > 255.0:
        r = 255.0
    if g < 0.0:
        g = 0.0
    if g > 255.0:
        g = 255.0
    if b < 0.0:
        b = 0.0
    if b > 255.0:
        b = 255.0
    return r, g, b


@numba.njit(cache=True)
def _raster_textured(tri_screen, tri_z, tri_world, face_mat, face_inst,
                     materials, color_buf, depth_buf, inst_buf, znear):
    h, w = depth_buf.shape
    for f in range(tri_screen.shape[0]):
        z0 = tri_z[f, 0]
        z1 = tri_z[f, 1]
        z2 = tri_z[f, 2]
        if z0 <= znear or z1 <= znear or z2 <= znear:
            continue
        x0 = tri_screen[f, 0, 0]
        y0 = tri_screen[f, 0, 1]
        x1 = tri_screen[f, 1, 0]
        y1 = tri_screen[f, 1, 1]
        x2 = tri_screen[f, 2, 0]
        y2 = tri_screen[f, 2, 1]
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
        inv0 = 1.0 / z0
        inv1 = 1.0 / z1
        inv2 = 1.0 / z2
        mat = materials[face_mat[f]]
        inst = face_inst[f]
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
                    wx = z * (l0 * tri_world[f, 0, 0] * inv0
                              + l1 * tri_world[f, 1, 0] * inv1
                              + l2 * tri_world[f, 2, 0] * inv2)
                    wy = z * (l0 * tri_world[f, 0, 1] * inv0
                              + l1 * tri_world[f, 1, 1] * inv1
                              + l2 * tri_world[f, 2, 1] * inv2)
                    wwz = z * (l0 * tri_world[f, 0, 2] * inv0
                               + l1 * tri_world[f, 1, 2] * inv1
                               + l2 * tri_world[f, 2, 2] * inv2)
                    r, g, b = _material_color(wx, wy, wwz, mat)
                    color_buf[py, px, 0] = r
                    color_buf[py, px, 1] = g
                    color_buf[py, px, 2] = b
                    inst_buf[py, px] = inst


def render_scene_view(scene, pose, intr, include_movables, znear=0.05):
    """Render one textured RGB-D view plus the instance-id buffer."""
    from .render import clip_triangles_near, _project_soup

    tris, face_mat, face_inst = scene.geometry(include_movables)
    cam_tris = tris @ pose.rotation.T + pose.translation
    cam_tris, world_tris, origin = clip_triangles_near(cam_tris, tris, znear)

    color_buf = np.zeros((intr.height, intr.width, 3), dtype=np.float64)
    depth_buf = np.full((intr.height, intr.width), np.inf, dtype=np.float64)
    inst_buf = np.zeros((intr.height, intr.width), dtype=np.int64)
    if len(cam_tris):
        tri_screen = _project_soup(cam_tris, intr)
        _raster_textured(
            np.ascontiguousarray(tri_screen),
            np.ascontiguousarray(cam_tris[..., 2]),
            np.ascontiguousarray(world_tris),
            np.ascontiguousarray(face_mat[origin]),
            np.ascontiguousarray(face_inst[origin]),
            scene.materials,
            color_buf,
            depth_buf,
            inst_buf,
            znear,
        )
    covered = np.isfinite(depth_buf)
    rgb = np.clip(np.round(color_buf), 0, 255).astype(np.uint8)
    depth = np.where(covered, depth_buf, 0.0).astype(np.float32)
    return rgb, depth, inst_buf.astype(np.uint16)


# ---------------------------------------------------------------------------
# geometry helpers

def _box_tris(lo, hi):
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    v = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (0, 1, 2, 3), (4, 5, 6, 7),  # bottom, top
        (0, 1, 5, 4), (2, 3, 7, 6),  # y walls
        (1, 2, 6, 5), (3, 0, 4, 7),  # x walls
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append([v[a], v[b], v[c]])
        tris.append([v[a], v[c], v[d]])
    return np.array(tris)


def _prism_tris(cx, cy, radius, z0, z1, nsides=10):
    ang = np.linspace(0, 2 * np.pi, nsides, endpoint=False)
    ring0 = np.stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang),
                      np.full(nsides, z0)], axis=1)
    ring1 = ring0.copy()
    ring1[:, 2] = z1
    tris = []
    for i in range(nsides):
        j = (i + 1) % nsides
        tris.append([ring0[i], ring0[j], ring1[j]])
        tris.append([ring0[i], ring1[j], ring1[i]])
        tris.append([ring1[i], ring1[j], [cx, cy, z1]])
    return np.array(tris)


def _aabbs_overlap(a, b, margin=0.0):
    return (
        (a[0] < b[1] + margin).all() and (b[0] < a[1] + margin).all()
    )


def _material(rng, base, checker=(0.0, 0.0), mid=(0.0, 0.0), fine=(0.0, 0.0),
              ramp=0.0):
    row = np.zeros(12)
    row[0:3] = base
    row[3], row[4] = checker
    row[5], row[6] = mid
    row[7], row[8] = fine
    row[9] = float(rng.integers(1, 2 ** 31))
    row[10] = ramp
    return row


def generate_scene(spec, focus_poses=None):
    """Build the environment (room + furniture) and the movable objects.

    Deterministic from spec.seed. Movable objects (props / placed / walkers)
    are rejection-sampled into free space, biased toward the view cones of
    `focus_poses` when given so that query images actually see them. Raises
    PlacementFailure after 1000 attempts for any object.
    """
    rng = np.random.default_rng(spec.seed)
    W, L, H = spec.room_size
    textured = spec.style != "textureless"

    materials = []
    env_tris = []
    env_mat = []

    def add_face(quad, mat_idx):
        a, b, c, d = quad
        env_tris.append([a, b, c])
        env_tris.append([a, c, d])
        env_mat.extend([mat_idx, mat_idx])

    # room shell: one material per face so retrieval can tell walls apart
    wall_bases = rng.uniform(120, 210, size=(6, 3))
    for i, quad in enumerate([
        ([0, 0, 0], [W, 0, 0], [W, L, 0], [0, L, 0]),          # floor
        ([0, 0, H], [W, 0, H], [W, L, H], [0, L, H]),          # ceiling
        ([0, 0, 0], [W, 0, 0], [W, 0, H], [0, 0, H]),          # wall y=0
        ([0, L, 0], [W, L, 0], [W, L, H], [0, L, H]),          # wall y=L
        ([0, 0, 0], [0, L, 0], [0, L, H], [0, 0, H]),          # wall x=0
        ([W, 0, 0], [W, L, 0], [W, L, H], [W, 0, H]),          # wall x=W
    ]):
        if textured:
            mat = _material(
                rng, wall_bases[i],
                checker=(rng.uniform(0.25, 0.5), 14.0),
                mid=(rng.uniform(0.35, 0.6), 26.0),
                fine=(0.055, 30.0),
                ramp=18.0,
            )
        else:
            mat = _material(rng, wall_bases[i])
        materials.append(mat)
        add_face(np.array(quad, dtype=float), len(materials) - 1)

    obstacles = []

    def try_place(base_w, base_d, height, margin, attempts=1000, near=None):
        for _ in range(attempts):
            if near is not None and rng.uniform() < 0.85:
                # drop into the view cone of one focus pose
                pose = near[rng.integers(0, len(near))]
                c = geom.camera_center(pose)
                fwd = pose.rotation[2]  # camera z axis in world coords
                dist = rng.uniform(1.3, 4.0)
                side = rng.uniform(-0.45, 0.45) * dist
                x = c[0] + fwd[0] * dist - fwd[1] * side
                y = c[1] + fwd[1] * dist + fwd[0] * side
            else:
                x = rng.uniform(0.5 + base_w / 2, W - 0.5 - base_w / 2)
                y = rng.uniform(0.5 + base_d / 2, L - 0.5 - base_d / 2)
            lo = np.array([x - base_w / 2, y - base_d / 2, 0.0])
            hi = np.array([x + base_w / 2, y + base_d / 2, height])
            if lo[0] < 0.3 or lo[1] < 0.3 or hi[0] > W - 0.3 or hi[1] > L - 0.3:
                continue
            aabb = np.stack([lo, hi])
            if any(_aabbs_overlap(aabb, o, margin) for o in obstacles):
                continue
            if near is not None and any(
                _point_in_aabb(geom.camera_center(p), aabb, 0.3) for p in near
            ):
                continue
            obstacles.append(aabb)
            return aabb
        raise PlacementFailure("could not place object (%d attempts)" % attempts)

    # furniture: boxes fused into the environment
    for i in range(spec.n_furniture):
        bw = rng.uniform(0.5, 1.3)
        bd = rng.uniform(0.5, 1.3)
        bh = rng.uniform(0.5, 1.9)
        aabb = try_place(bw, bd, bh, margin=0.35)
        base = rng.uniform(60, 220, size=3)
        if textured:
            mat = _material(rng, base, checker=(rng.uniform(0.12, 0.3), 22.0),
                            mid=(0.3, 24.0), fine=(0.05, 34.0))
        else:
            mat = _material(rng, base)
        materials.append(mat)
        for tri in _box_tris(aabb[0], aabb[1]):
            env_tris.append(tri)
            env_mat.append(len(materials) - 1)

    objects = []
    next_instance = 1

    def add_object(name, class_name, role, tris, mat, aabb):
        nonlocal next_instance
        materials.append(mat)
        obj = SceneObject(
            name=name,
            class_name=class_name,
            role=role,
            instance_id=next_instance,
            tris=tris,
            face_material=np.full(len(tris), len(materials) - 1, dtype=np.int64),
            aabb=aabb,
        )
        next_instance += 1
        objects.append(obj)

    sf = spec.size_factor
    for i in range(spec.n_props):
        s = rng.uniform(0.55, 0.9) * sf
        h = rng.uniform(0.6, 1.1) * sf
        aabb = try_place(s, s, h, margin=0.3, near=focus_poses)
        mat = _material(rng, rng.uniform(90, 200, size=3),
                        checker=(0.11, 26.0 if textured else 0.0),
                        mid=(0.25, 22.0 if textured else 0.0),
                        fine=(0.045, 36.0 if textured else 0.0))
        add_object("prop%d" % i, "crate", "prop", _box_tris(aabb[0], aabb[1]),
                   mat, aabb)

    for i in range(spec.n_placed):
        s = rng.uniform(0.5, 0.95) * sf
        h = rng.uniform(0.55, 1.0) * sf
        aabb = try_place(s, s, h, margin=0.25, near=focus_poses)
        # palette and pattern deliberately unlike the environment
        mat = _material(rng, np.array([40.0, rng.uniform(120, 190), 60.0]),
                        fine=(0.035, 55.0 if textured else 0.0),
                        mid=(0.15, 30.0 if textured else 0.0))
        add_object("placed%d" % i, "box", "placed", _box_tris(aabb[0], aabb[1]),
                   mat, aabb)

    for i in range(spec.n_walkers):
        r = 0.28 * sf
        h = min(rng.uniform(1.55, 1.8) * sf, H - 0.2)
        aabb = try_place(2 * r, 2 * r, h, margin=0.25, near=focus_poses)
        cx, cy = (aabb[0, 0] + aabb[1, 0]) / 2, (aabb[0, 1] + aabb[1, 1]) / 2
        # high-contrast fine checker: strong corner responses, like clothing
        mat = _material(rng, np.array([128.0, 120.0, 125.0]),
                        checker=(0.06, 105.0), fine=(0.03, 25.0))
        add_object("walker%d" % i, "person", "walker",
                   _prism_tris(cx, cy, r, 0.0, h), mat, aabb)

    return Scene(
        spec=spec,
        env_tris=np.array(env_tris),
        env_face_material=np.array(env_mat, dtype=np.int64),
        materials=np.array(materials),
        objects=objects,
        obstacles=np.array(obstacles).reshape(-1, 2, 3),
    )


def _point_in_aabb(p, aabb, margin=0.0):
    return ((p >= aabb[0] - margin) & (p <= aabb[1] + margin)).all()


def _free_position(scene, rng, margin, existing, min_spacing, attempts=4000):
    W, L, _ = scene.spec.room_size
    for _ in range(attempts):
        p = np.array([rng.uniform(margin, W - margin),
                      rng.uniform(margin, L - margin), QUERY_HEIGHT])
        if any(_point_in_aabb(p, o, 0.3) for o in scene.obstacles):
            continue
        if existing and min(
            np.linalg.norm(p[:2] - e[:2]) for e in existing
        ) < min_spacing:
            continue
        return p
    return None


def sample_sweep_poses(scene, n_sweeps, min_spacing=1.5, seed=0,
                       sampling=CutoutSampling()):
    """Poisson-disk-style sweep centers at camera height, plus the cutout
    poses derived from the yaw/pitch sampling pattern.

    Returns (centers, cutouts) where cutouts maps image id -> Pose."""
    rng = np.random.default_rng(seed)
    centers = []
    for _ in range(n_sweeps):
        p = _free_position(scene, rng, margin=0.6, existing=centers,
                           min_spacing=min_spacing)
        if p is None:
            raise InsufficientFreeSpace(
                "placed %d of %d sweeps at spacing %.2f"
                % (len(centers), n_sweeps, min_spacing)
            )
        centers.append(p)
    cutouts = {}
    for si, c in enumerate(centers):
        for pitch in sampling.pitch_levels_deg:
            for yi in range(int(round(360.0 / sampling.yaw_step_deg))):
                yaw = yi * sampling.yaw_step_deg
                cutouts["sw%03d_p%+03d_y%03d" % (si, int(pitch), int(yaw))] = (
                    _cutout_pose(c, yaw, pitch)
                )
    return centers, cutouts


def _cutout_pose(center, yaw_deg, pitch_deg):
    yaw = np.radians(yaw_deg)
    pitch = np.radians(pitch_deg)
    fwd = np.array([
        np.cos(pitch) * np.cos(yaw),
        np.cos(pitch) * np.sin(yaw),
        np.sin(pitch),
    ])
    return geom.look_at_pose(center, np.asarray(center) + fwd)


def sample_query_poses(scene, n_queries, seed=1, min_spacing=0.8):
    """Horizontal-only query poses (robot-camera style), id -> Pose."""
    rng = np.random.default_rng(seed)
    positions = []
    poses = {}
    for i in range(n_queries):
        p = _free_position(scene, rng, margin=0.7, existing=positions,
                           min_spacing=min_spacing)
        if p is None:
            raise InsufficientFreeSpace("placed %d of %d queries" % (i, n_queries))
        positions.append(p)
        poses["q%03d" % i] = _cutout_pose(p, rng.uniform(0, 360), 0.0)
    return poses


# ---------------------------------------------------------------------------
# dataset emission

def render_dataset(scene, poses, intr, split, out_dir, movable=None):
    """Render one split into `out_dir`.

    database split: environment + props only, all-zero mask files.
    query split: everything, ground-truth instance masks, withheld
    gt_poses.txt, and per-image occupancy statistics.
    """
    movable = (split == "query") if movable is None else (movable == "include")
    img_dir = os.path.join(out_dir, "images")
    depth_dir = os.path.join(out_dir, "depth")
    mask_dir = os.path.join(out_dir, "masks")
    for d in (img_dir, depth_dir, mask_dir):
        os.makedirs(d, exist_ok=True)

    table = {obj.instance_id: obj.class_name for obj in scene.objects}
    occupancy = {}
    for image_id in sorted(poses):
        rgb, depth, inst = render_scene_view(scene, poses[image_id], intr, movable)
        mapstore.save_rgb(os.path.join(img_dir, image_id + ".png"), rgb)
        mapstore.save_depth_bin(os.path.join(depth_dir, image_id + ".bin"), depth)
        if not movable:
            inst = np.zeros_like(inst)
        counts = np.bincount(inst.ravel())
        instances = tuple(
            dynfilter.MaskInstance(
                instance_id=i, class_name=table[i], layer=dynfilter.UNKNOWN,
                pixel_count=int(counts[i]),
            )
            for i in sorted(table)
            if i < len(counts) and counts[i] > 0
        )
        masks = dynfilter.MaskSet(labels=inst, instances=instances)
        dynfilter.save_mask_set(os.path.join(mask_dir, image_id + ".mask.png"), masks)
        occupancy[image_id] = float((inst > 0).mean())

    if split == "query":
        geom.save_poses(os.path.join(out_dir, "gt_poses.txt"), poses)
        with open(os.path.join(out_dir, "occupancy.txt"), "w") as f:
            for image_id in sorted(occupancy):
                f.write("%s %.6f\n" % (image_id, occupancy[image_id]))
    else:
        geom.save_poses(os.path.join(out_dir, "poses.txt"), poses)
        geom.save_intrinsics(os.path.join(out_dir, "intrinsics.txt"), intr)
    return occupancy


def _estimate_occupancy(scene, query_poses, intr):
    small = intr.scaled(0.25)
    fractions = []
    for image_id in sorted(query_poses):
        _, _, inst = render_scene_view(scene, query_poses[image_id], small, True)
        fractions.append(float((inst > 0).mean()))
    return float(np.mean(fractions)) if fractions else 0.0


def generate_dataset(out_dir, kind="static", seed=0, n_sweeps=12, n_queries=15,
                     intrinsics=DEFAULT_INTRINSICS, sampling=CutoutSampling(),
                     occupancy_range=(0.15, 0.25), max_calibration_rounds=8):
    """Generate a full dataset: map split at the root plus the query subtree.

    kind: "static" (no movable objects), "dynamic" (props + placed objects +
    walkers, with the movable-mask occupancy calibrated into
    `occupancy_range`), or "textureless" (static scene, flat colors).
    Deterministic from `seed`; returns a summary dict.
    """
    if kind == "static":
        spec = SceneSpec(seed=seed, n_props=0, n_placed=0, n_walkers=0)
    elif kind == "textureless":
        spec = SceneSpec(seed=seed, style="textureless",
                         n_props=0, n_placed=0, n_walkers=0, n_furniture=5)
    elif kind == "dynamic":
        spec = SceneSpec(seed=seed)
    else:
        raise ValueError("kind must be static|dynamic|textureless")

    base_scene = generate_scene(replace(spec, n_props=0, n_placed=0, n_walkers=0))
    _, cutouts = sample_sweep_poses(base_scene, n_sweeps, seed=seed + 10,
                                    sampling=sampling)
    query_poses = sample_query_poses(base_scene, n_queries, seed=seed + 20)

    scene = None
    mean_occ = 0.0
    if kind == "dynamic":
        focus = list(query_poses.values())
        factor = spec.size_factor
        best = None
        for _ in range(max_calibration_rounds):
            candidate = generate_scene(replace(spec, size_factor=factor), focus)
            occ = _estimate_occupancy(candidate, query_poses, intrinsics)
            if best is None or abs(occ - np.mean(occupancy_range)) < best[0]:
                best = (abs(occ - np.mean(occupancy_range)), candidate, occ)
            if occupancy_range[0] <= occ <= occupancy_range[1]:
                scene, mean_occ = candidate, occ
                break
            target = np.mean(occupancy_range)
            factor *= float(np.clip(np.sqrt(target / max(occ, 1e-3)), 0.6, 1.6))
        if scene is None:
            _, scene, mean_occ = best
    else:
        scene = base_scene

    occ_db = render_dataset(scene, cutouts, intrinsics, "database", out_dir)
    occ_q = render_dataset(scene, query_poses, intrinsics, "query",
                           os.path.join(out_dir, "query"))
    dynfilter.save_taxonomy(
        os.path.join(out_dir, "taxonomy.txt"),
        dynfilter.ClassTaxonomy(mapping={
            "background": dynfilter.STATIC,
            "person": dynfilter.DYNAMIC,
            "crate": dynfilter.UNKNOWN,
            "box": dynfilter.UNKNOWN,
        }),
    )
    summary = {
        "kind": kind,
        "seed": seed,
        "n_sweeps": n_sweeps,
        "n_database": len(cutouts),
        "n_queries": n_queries,
        "mean_query_occupancy": float(np.mean(list(occ_q.values()))) if occ_q else 0.0,
        "size_factor": scene.spec.size_factor,
    }
    _write_manifest(out_dir, summary)
    return summary


def _write_manifest(out_dir, summary):
    lines = ["%s %s" % (k, summary[k]) for k in sorted(summary)]
    entries = []
    for root, _, files in os.walk(out_dir):
        for name in sorted(files):
            if name == "manifest.txt":
                continue
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir)
            with open(path, "rb") as f:
                digest = hashlib.sha256(f.read()).hexdigest()[:16]
            entries.append("file %s %s" % (digest, rel))
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(lines + sorted(entries)) + "\n")
