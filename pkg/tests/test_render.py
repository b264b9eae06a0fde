import numpy as np
import pytest

from dynloc import geom, mapstore, render
from dynloc.geom import CameraIntrinsics, Pose
from dynloc.pose import PoseCandidate

from test_mapstore import plane_map_image


INTR = CameraIntrinsics(focal=120.0, principal_point=(80.0, 60.0), width=160, height=120)


def plane_mesh(rng, step=0.1, half_x=3.0, half_y=2.5, z=0.0):
    """Colored triangle grid on the z=`z` plane with random vertex colors."""
    xs = np.arange(-half_x, half_x + step / 2, step)
    ys = np.arange(-half_y, half_y + step / 2, step)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    verts = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=1)
    nx, ny = len(xs), len(ys)
    faces = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            a = i * ny + j
            b = (i + 1) * ny + j
            faces.append([a, b, a + 1])
            faces.append([b, b + 1, a + 1])
    colors = rng.integers(0, 255, size=(len(verts), 3)).astype(np.uint8)
    return mapstore.Mesh(vertices=verts, faces=np.array(faces, dtype=np.int32),
                         colors=colors)


def plane_camera(x=0.0, y=0.0, z=-3.0):
    return geom.look_at_pose((x, y, z), (x * 0.5, y * 0.5, 0.0), up=(0, 1, 0))


class TestRenderView:
    def test_single_triangle_depth(self):
        # one triangle fronto-parallel at depth 2: every rasterized pixel
        # must carry exactly that depth
        verts = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 2.0], [0.0, 1.0, 2.0]])
        mesh = mapstore.Mesh(vertices=verts, faces=np.array([[0, 1, 2]], dtype=np.int32),
                             colors=np.full((3, 3), 200, dtype=np.uint8))
        pose = Pose(rotation=np.eye(3), translation=np.zeros(3))
        view = render.render_view(mesh, pose, INTR)
        assert view.coverage.sum() > 100
        assert np.abs(view.depth[view.coverage] - 2.0).max() < 1e-6
        assert (view.depth[~view.coverage] == 0).all()

    def test_interpolated_depth(self):
        # slanted triangle: rasterized depth must match the analytic plane
        verts = np.array([[-1.0, -1.0, 2.0], [1.0, -1.0, 3.0], [0.0, 1.0, 2.5]])
        mesh = mapstore.Mesh(vertices=verts, faces=np.array([[0, 1, 2]], dtype=np.int32),
                             colors=np.zeros((3, 3), dtype=np.uint8))
        pose = Pose(rotation=np.eye(3), translation=np.zeros(3))
        view = render.render_view(mesh, pose, INTR)
        vs, us = np.nonzero(view.coverage)
        # plane through the three vertices: n . X = d
        n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
        d = n @ verts[0]
        rays = np.stack([(us - 80.0) / 120.0, (vs - 60.0) / 120.0, np.ones(len(us))], axis=1)
        t = d / (rays @ n)
        assert np.abs(view.depth[vs, us] - t).max() < 1e-6

    def test_empty_frustum(self):
        rng = np.random.default_rng(0)
        mesh = plane_mesh(rng)
        pose = geom.look_at_pose((0, 0, -3.0), (0, 0, -10.0), up=(0, 1, 0))
        view = render.render_view(mesh, pose, INTR)
        assert not view.coverage.any()

    def test_empty_mesh(self):
        mesh = mapstore.Mesh(vertices=np.zeros((0, 3)),
                             faces=np.zeros((0, 3), dtype=np.int32),
                             colors=np.zeros((0, 3), dtype=np.uint8))
        with pytest.raises(render.EmptyMesh):
            render.render_view(mesh, plane_camera(), INTR)

    def test_deterministic(self):
        rng = np.random.default_rng(1)
        mesh = plane_mesh(rng)
        a = render.render_view(mesh, plane_camera(), INTR)
        b = render.render_view(mesh, plane_camera(), INTR)
        assert np.array_equal(a.rgb, b.rgb)
        assert np.array_equal(a.depth, b.depth)

    def test_map_roundtrip_depth(self):
        # fuse a plane scene, re-render from the database pose, and compare
        # against the stored depth
        img = plane_map_image(w=80, h=60, f=60.0)
        vol = mapstore.fuse_tsdf([img], voxel_size=0.02, truncation=0.08)
        mesh = mapstore.extract_mesh(vol)
        view = render.render_view(mesh, img.pose, img.intrinsics)
        valid = view.coverage & (img.depth > 0)
        assert valid.sum() > 0.5 * img.depth.size
        err = np.abs(view.depth[valid] - img.depth[valid])
        assert (err <= 2 * vol.voxel_size).mean() >= 0.9


class TestDenseDescriptors:
    def test_constant_image_zero(self):
        img = np.full((64, 64, 3), 77, dtype=np.uint8)
        field = render.dense_descriptor_field(img)
        assert np.abs(field).max() == 0.0

    def test_identical_fields(self):
        rng = np.random.default_rng(2)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        f1 = render.dense_descriptor_field(img)
        f2 = render.dense_descriptor_field(img.copy())
        assert np.array_equal(f1, f2)

    def test_shift_sensitivity(self):
        rng = np.random.default_rng(3)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        shifted = np.roll(img, 1, axis=1)
        unrelated = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        f0 = render.dense_descriptor_field(img)
        f1 = render.dense_descriptor_field(shifted)
        f2 = render.dense_descriptor_field(unrelated)
        d_shift = np.median(np.linalg.norm(f0 - f1, axis=2))
        d_unrel = np.median(np.linalg.norm(f0 - f2, axis=2))
        assert 0 < d_shift < d_unrel


def full_coverage_view(img):
    return render.SyntheticView(
        rgb=img, depth=np.ones(img.shape[:2], dtype=np.float32),
        coverage=np.ones(img.shape[:2], dtype=bool),
    )


class TestCompareViews:
    def test_self_comparison_zero_median(self):
        rng = np.random.default_rng(4)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        score = render.compare_views(img, full_coverage_view(img))
        assert score.median == 0.0
        assert score.compared_fraction == 1.0
        assert score.value == 0.0

    def test_full_mask_fails(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        mask = np.ones(img.shape[:2], dtype=bool)
        with pytest.raises(render.NoComparablePixels):
            render.compare_views(img, full_coverage_view(img), mask)

    def test_unrelated_scores_worse(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        other = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        self_score = render.compare_views(img, full_coverage_view(img))
        cross_score = render.compare_views(img, full_coverage_view(other))
        assert cross_score.value > self_score.value

    def test_mask_monotonicity(self):
        rng = np.random.default_rng(7)
        img = rng.integers(0, 255, size=(64, 80, 3)).astype(np.uint8)
        view = full_coverage_view(img)
        fractions = []
        for cols in (0, 20, 40, 60):
            mask = np.zeros(img.shape[:2], dtype=bool)
            mask[:, :cols] = True
            fractions.append(render.compare_views(img, view, mask).compared_fraction)
        assert all(a >= b for a, b in zip(fractions, fractions[1:]))

    def test_coverage_penalty_orders_equal_medians(self):
        img = np.full((64, 80, 3), 50, dtype=np.uint8)  # flat: median term 0
        full = full_coverage_view(img)
        partial_cov = np.ones(img.shape[:2], dtype=bool)
        partial_cov[:, 40:] = False
        partial = render.SyntheticView(
            rgb=img, depth=partial_cov.astype(np.float32), coverage=partial_cov
        )
        s_full = render.compare_views(img, full)
        s_part = render.compare_views(img, partial)
        assert s_part.median == s_full.median == 0.0
        assert s_part.value > s_full.value


class TestSelectBestPose:
    def _candidates(self, gt_pose, rng, n_wrong=4):
        cands = [PoseCandidate(pose=gt_pose, inlier_count=50,
                               inlier_indices=np.arange(50), source_image="gt")]
        for i in range(n_wrong):
            offset = rng.normal(size=3)
            offset = offset / np.linalg.norm(offset) * rng.uniform(1.2, 2.0)
            c = geom.camera_center(gt_pose) + offset
            wrong = geom.look_at_pose(c, rng.normal(scale=0.5, size=3), up=(0, 1, 0))
            cands.append(PoseCandidate(pose=wrong, inlier_count=60,
                                       inlier_indices=np.arange(60),
                                       source_image="wrong%d" % i))
        return cands

    def test_ground_truth_selected(self):
        rng = np.random.default_rng(8)
        mesh = plane_mesh(rng)
        gt = plane_camera()
        query = render.render_view(mesh, gt, INTR).rgb
        cands = self._candidates(gt, rng)
        best, scored = render.select_best_pose(query, INTR, cands, mesh, l=10)
        assert best.source_image == "gt"
        assert len(scored) == len(cands)

    def test_single_candidate(self):
        rng = np.random.default_rng(9)
        mesh = plane_mesh(rng)
        gt = plane_camera()
        query = render.render_view(mesh, gt, INTR).rgb
        only = PoseCandidate(pose=gt, inlier_count=1, inlier_indices=np.arange(1),
                             source_image="solo")
        best, _ = render.select_best_pose(query, INTR, [only], mesh, l=10)
        assert best.source_image == "solo"

    def test_l_one_is_inlier_argmax(self):
        rng = np.random.default_rng(10)
        mesh = plane_mesh(rng)
        gt = plane_camera()
        query = render.render_view(mesh, gt, INTR).rgb
        cands = self._candidates(gt, rng)  # wrong poses carry more inliers
        best, _ = render.select_best_pose(query, INTR, cands, mesh, l=1)
        assert best.inlier_count == max(c.inlier_count for c in cands)

    def test_dump(self, tmp_path):
        rng = np.random.default_rng(11)
        mesh = plane_mesh(rng)
        gt = plane_camera()
        query = render.render_view(mesh, gt, INTR).rgb
        cands = self._candidates(gt, rng, n_wrong=1)
        render.select_best_pose(query, INTR, cands, mesh, l=2,
                                dump_dir=tmp_path / "dump")
        assert (tmp_path / "dump" / "scores.txt").exists()
        lines = (tmp_path / "dump" / "scores.txt").read_text().splitlines()
        assert len(lines) == 2
