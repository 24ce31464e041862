import math

import numpy as np
import pytest
from scipy.spatial import ConvexHull

from voxtrack import _kernels
from voxtrack import field as fd
from voxtrack import geometry as geo
from voxtrack.geometry import Camera, Pose


def make_box_field(half=0.5, density=80.0, color=(0.8, 0.3, 0.2), res=48, extent=0.7):
    """Rasterize a solid axis-aligned cube into a fresh voxel field."""
    bbox = np.array([extent] * 3)
    f = fd.VoxelField.empty(-bbox, bbox, res)
    ax = np.linspace(-extent, extent, res)
    gx, gy, gz = np.meshgrid(ax, ax, ax, indexing="ij")
    inside = (np.abs(gx) <= half) & (np.abs(gy) <= half) & (np.abs(gz) <= half)
    draw = np.full(f.resolution, -np.inf, dtype=np.float32)
    draw[inside] = fd.softplus_inverse(density)
    craw = np.empty(f.resolution + (3,), dtype=np.float32)
    for c in range(3):
        craw[..., c] = fd.sigmoid_inverse(color[c])
    return fd.VoxelField(-bbox, bbox, draw, craw)


def box_sdf(points, half=0.5):
    """Exact signed distance to the surface of the cube [-half, half]^3."""
    q = np.abs(points) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(q.max(axis=-1), 0.0)
    return outside + inside


CAM = Camera(fx=300.0, fy=300.0, cx=96.0, cy=96.0, width=192, height=192)


class TestSampleField:
    def test_outside_bbox_is_empty(self):
        f = fd.VoxelField.constant([0, 0, 0], [1, 1, 1], 8, density=3.0, color=[0.4, 0.5, 0.6])
        s, c = fd.sample_field(f, [2.0, 0.5, 0.5])
        assert s == 0.0
        assert np.array_equal(c, [0.0, 0.0, 0.0])

    def test_grid_node_exact(self):
        rng = np.random.default_rng(0)
        draw = rng.normal(size=(5, 5, 5)).astype(np.float32)
        craw = rng.normal(size=(5, 5, 5, 3)).astype(np.float32)
        f = fd.VoxelField([0, 0, 0], [1, 1, 1], draw, craw)
        # node (1,2,3) sits at (0.25, 0.5, 0.75)
        s, c = fd.sample_field(f, [0.25, 0.5, 0.75])
        assert np.isclose(s, fd.softplus(np.float64(draw[1, 2, 3])), atol=1e-12)
        from scipy.special import expit

        assert np.allclose(c, expit(craw[1, 2, 3].astype(np.float64)), atol=1e-12)

    def test_midpoint_is_mean_of_activated(self):
        rng = np.random.default_rng(1)
        draw = rng.normal(size=(4, 4, 4)).astype(np.float32)
        craw = rng.normal(size=(4, 4, 4, 3)).astype(np.float32)
        f = fd.VoxelField([0, 0, 0], [1, 1, 1], draw, craw)
        d = f.density()
        # halfway between nodes (0,1,1) and (1,1,1) along x
        s, _ = fd.sample_field(f, [1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0])
        assert np.isclose(s, 0.5 * (d[0, 1, 1] + d[1, 1, 1]), atol=1e-12)


class TestComposeSample:
    def test_zero_object_is_bitexact_passthrough(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            sb = float(rng.uniform(0, 5))
            cb = rng.uniform(size=3)
            s, c = fd.compose_sample(sb, cb, 0.0, rng.uniform(size=3))
            assert s == sb
            assert np.array_equal(c, cb)

    def test_zero_background_passthrough(self):
        s, c = fd.compose_sample(0.0, [0.9, 0.9, 0.9], 2.5, [0.1, 0.2, 0.3])
        assert s == 2.5
        assert np.array_equal(c, [0.1, 0.2, 0.3])

    def test_worked_example(self):
        s, c = fd.compose_sample(1.0, [0.2, 0.2, 0.2], 3.0, [0.6, 0.6, 0.6])
        assert s == 4.0
        np.testing.assert_allclose(c, [0.5, 0.5, 0.5], rtol=0, atol=1e-15)

    def test_equal_densities_unweighted_mean(self):
        rng = np.random.default_rng(3)
        cb, co = rng.uniform(size=3), rng.uniform(size=3)
        _, c = fd.compose_sample(1.7, cb, 1.7, co)
        assert np.allclose(c, 0.5 * (cb + co), atol=1e-15)

    def test_matches_kernel_branch(self):
        rng = np.random.default_rng(4)
        cases = [(0.0, 1.3), (1.3, 0.0), (0.0, 0.0), (2e-13, 3e-13)]
        cases += [(float(rng.uniform(0, 4)), float(rng.uniform(0, 4))) for _ in range(50)]
        for sb, so in cases:
            cb, co = rng.uniform(size=3), rng.uniform(size=3)
            s_ref, c_ref = fd.compose_sample(sb, cb, so, co)
            out = _kernels._compose(sb, cb[0], cb[1], cb[2], so, co[0], co[1], co[2])
            assert out[0] == s_ref
            assert np.array_equal(np.array(out[1:]), c_ref)


class TestRenderRay:
    def test_empty_field(self):
        f = fd.VoxelField.empty([0, -1, -1], [1, 1, 1], 8)
        rgb, depth, op = fd.render_ray(f, [-0.5, 0, 0], [1, 0, 0], 0.0, 2.0, 0.01)
        assert np.array_equal(rgb, [0, 0, 0])
        assert depth == 0.0
        assert op == 0.0

    def test_slab_closed_form(self):
        f = fd.VoxelField.constant([0, -1, -1], [1, 1, 1], 16, density=2.0, color=[0.5] * 3)
        _, _, op = fd.render_ray(f, [0.0, 0, 0], [1, 0, 0], 0.0, 1.0, 1.0 / 1000)
        assert abs(op - (1 - math.exp(-2.0))) < 1e-3

    def test_quadrature_error_halves(self):
        f = fd.VoxelField.constant([0, -1, -1], [1, 1, 1], 16, density=2.0, color=[0.5] * 3)
        closed = 1 - math.exp(-2.0)
        errs = []
        for n in (50, 100, 200, 400):
            _, _, op = fd.render_ray(f, [0.0, 0, 0], [1, 0, 0], 0.0, 1.0, 1.0 / n)
            errs.append(abs(op - closed))
        for e0, e1 in zip(errs, errs[1:]):
            assert 0.8 * 2 <= e0 / e1 <= 1.2 * 2

    def test_opaque_slab_color_and_entry_depth(self):
        f = fd.VoxelField.constant(
            [0.25, -1, -1], [1.25, 1, 1], 16, density=1e4, color=[0.5] * 3
        )
        rgb, depth, op = fd.render_ray(f, [0.0, 0, 0], [1, 0, 0], 0.0, 1.5, 1e-3)
        assert np.allclose(rgb, [0.5, 0.5, 0.5], atol=1e-6)
        assert abs(depth - 0.25) < 1e-3
        assert op > 1 - 1e-9

    def test_invalid_rays(self):
        f = fd.VoxelField.empty([0, 0, 0], [1, 1, 1], 4)
        with pytest.raises(fd.InvalidRay):
            fd.render_ray(f, [0, 0, 0], [1, 1, 0], 0.0, 1.0, 0.01)  # non-unit
        with pytest.raises(fd.InvalidRay):
            fd.render_ray(f, [0, 0, 0], [1, 0, 0], 1.0, 1.0, 0.01)  # near >= far
        with pytest.raises(fd.InvalidRay):
            fd.render_ray(f, [0, 0, 0], [1, 0, 0], 0.0, 1.0, 0.0)  # bad step

    def test_opacity_monotone_in_density(self):
        rng = np.random.default_rng(5)
        dens = rng.uniform(0.1, 3.0, size=(6, 6, 6))
        color = rng.uniform(0.1, 0.9, size=(6, 6, 6, 3))
        f1 = fd.VoxelField(
            [0, 0, 0], [1, 1, 1], fd.softplus_inverse(dens).astype(np.float32),
            fd.sigmoid_inverse(color).astype(np.float32),
        )
        f2 = fd.VoxelField(
            [0, 0, 0], [1, 1, 1], fd.softplus_inverse(2 * dens).astype(np.float32),
            fd.sigmoid_inverse(color).astype(np.float32),
        )
        for _ in range(25):
            o = rng.uniform(-0.5, 0.0, size=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            _, _, op1 = fd.render_ray(f1, o, d, 0.0, 3.0, 0.01)
            _, _, op2 = fd.render_ray(f2, o, d, 0.0, 3.0, 0.01)
            assert op2 >= op1 - 1e-9


class TestRenderView:
    def test_all_empty_black(self):
        f = fd.VoxelField.empty([-1, -1, -1], [1, 1, 1], 8)
        bg = fd.VoxelField.empty([-2, -2, -2], [2, 2, 2], 8)
        pose = geo.look_at([0, 0, -3], [0, 0, 0])
        rr = fd.render_view(f, bg, CAM, pose)
        assert np.all(rr.rgb == 0.0)
        assert np.all(rr.opacity == 0.0)
        assert np.all(rr.depth == 0.0)

    def test_box_footprint_oracle(self):
        f = make_box_field()
        pose = geo.look_at([0.3, -2.6, 0.9], [0, 0, 0])
        rr = fd.render_view(f, None, CAM, pose)
        corners = np.array(
            [[sx * 0.5, sy * 0.5, sz * 0.5] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
        )
        uv, ok = geo.project_points(CAM, geo.transform_points(pose, corners))
        assert ok.all()
        hull = ConvexHull(uv)
        eqs = hull.equations  # unit normals: inside when A @ p + b <= 0
        xs, ys = np.meshgrid(np.arange(CAM.width), np.arange(CAM.height))
        pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
        sd = (pix @ eqs[:, :2].T + eqs[:, 2]).max(axis=1).reshape(CAM.height, CAM.width)
        # the rasterized box carries a one-voxel trilinear skirt beyond the
        # analytic surface; widen the 2 px band by its projected size
        depth_min = geo.transform_points(pose, corners)[:, 2].min()
        skirt_px = CAM.fx * f.min_spacing / depth_min
        assert rr.opacity[sd <= -(2.0 + skirt_px)].min() > 0.99
        assert rr.opacity[sd >= 2.0 + skirt_px].max() < 0.01

    def test_camera_roll_equals_image_rotation(self):
        f = make_box_field()
        bg = fd.VoxelField.constant([-2, -2, -2], [2, 2, 2], 16, density=0.4, color=[0.3, 0.5, 0.7])
        pose = geo.look_at([0.4, -2.5, 0.6], [0, 0, 0])
        roll = Pose(np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)]), np.zeros(3))
        img0 = fd.render_view(f, bg, CAM, pose).rgb
        img90 = fd.render_view(f, bg, CAM, geo.compose(roll, pose)).rgb
        # rolled pixel (u', v') shows what the original saw at
        # (cx + (v'-cy), cy - (u'-cx)); principal point at integer coords
        # makes this an exact lattice map.
        us, vs = np.meshgrid(np.arange(CAM.width), np.arange(CAM.height))
        src_u = (CAM.cx + (vs - CAM.cy)).astype(int)
        src_v = (CAM.cy - (us - CAM.cx)).astype(int)
        valid = (src_u >= 0) & (src_u < CAM.width) & (src_v >= 0) & (src_v < CAM.height)
        diff = np.abs(img90[valid] - img0[src_v[valid], src_u[valid]])
        assert diff.max() < 2.0 / 255.0

    def test_view_equals_render_ray_bitexact(self):
        f = make_box_field()
        bg = fd.VoxelField.constant([-2, -2, -2], [2, 2, 2], 12, density=0.5, color=[0.2, 0.6, 0.4])
        pose = geo.look_at([1.2, -2.2, 0.8], [0, 0, 0])
        rr = fd.render_view(f, bg, CAM, pose)
        origin, dirs = fd.camera_rays(CAM, pose)
        origins = np.broadcast_to(origin, dirs.shape).copy()
        nears, fars, steps, hit = fd.plan_rays(origins, dirs, f, bg, 1.0)
        fars = np.where(hit, fars, 0.0)
        rng = np.random.default_rng(6)
        for idx in rng.choice(dirs.shape[0], size=60, replace=False):
            if not hit[idx]:
                continue
            rgb, depth, op = fd.render_ray(
                f, origin, dirs[idx], float(nears[idx]), float(fars[idx]), float(steps[idx]), f_bg=bg
            )
            v, u = divmod(int(idx), CAM.width)
            assert np.array_equal(rgb, rr.rgb[v, u])
            assert depth == rr.depth[v, u]
            assert op == rr.opacity[v, u]

    def test_pixel_mask_matches_full_render(self):
        f = make_box_field()
        pose = geo.look_at([0, -2.5, 0.5], [0, 0, 0])
        full = fd.render_view(f, None, CAM, pose)
        rng = np.random.default_rng(7)
        mask = rng.uniform(size=(CAM.height, CAM.width)) < 0.2
        sparse = fd.render_view(f, None, CAM, pose, pixel_mask=mask)
        assert np.array_equal(sparse.rgb[mask], full.rgb[mask])
        assert np.array_equal(sparse.depth[mask], full.depth[mask])
        assert np.all(sparse.opacity[~mask] == 0.0)


def tiny_fit_scene():
    bg = fd.VoxelField.constant([-2, -2, -2], [2, 2, 2], 10, density=0.6, color=[0.3, 0.5, 0.7])
    obj = make_box_field(half=0.4, density=40.0, color=(0.8, 0.4, 0.2), res=14)
    init = fd.VoxelField.constant(obj.bbox_min, obj.bbox_max, 14, density=0.02, color=[0.5] * 3)
    cam = Camera(fx=90.0, fy=90.0, cx=32.0, cy=32.0, width=64, height=64)
    poses = [
        geo.look_at(2.4 * np.array([math.cos(a), math.sin(a), 0.35]), [0, 0, 0])
        for a in np.linspace(0, 2 * math.pi, 9)[:-1]
    ]
    return bg, obj, init, cam, poses


class TestFitDifferenceField:
    def test_zero_iters_returns_init_unchanged(self):
        bg, obj, init, cam, poses = tiny_fit_scene()
        before = init.checksum()
        res = fd.fit_difference_field([], None, init, iters=0)
        assert res.field.checksum() == before
        assert init.checksum() == before
        assert res.losses == []

    def test_gradient_matches_finite_differences(self):
        bg, obj, init, cam, poses = tiny_fit_scene()
        rng = np.random.default_rng(8)
        fld = fd.VoxelField.constant(obj.bbox_min, obj.bbox_max, 5, density=0.8, color=[0.5] * 3)
        fld.density_raw += rng.normal(scale=0.3, size=fld.density_raw.shape).astype(np.float32)
        fld.color_raw += rng.normal(scale=0.3, size=fld.color_raw.shape).astype(np.float32)
        fld.invalidate()
        n = 24
        dirs = rng.normal(size=(n, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.tile(np.array([0.0, -2.0, 0.0]), (n, 1))
        dirs = 0.6 * np.array([0.0, 1.0, 0.0]) + 0.25 * dirs
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        targets = rng.uniform(size=(n, 3))
        nears, fars, steps, hit = fd.plan_rays(origins, dirs, fld, bg, 1.0)
        fars = np.where(hit, fars, 0.0)
        nmax = int(np.floor((fars - nears).max() / steps.min() + 1e-9)) + 2
        loss0, g_sig, g_col = fd._fit_eval(
            origins, dirs, nears, fars, steps, nmax, fld, bg, targets, True
        )
        h = 1.0 / 256.0  # exactly representable in float32
        idx = [(1, 2, 3), (0, 0, 0), (2, 4, 1), (4, 4, 4)]
        for ix, iy, iz in idx:
            for which in ("sig", "col0", "col2"):
                f2 = fld.copy()
                if which == "sig":
                    f2.density_raw[ix, iy, iz] += h
                    g = g_sig[ix, iy, iz]
                elif which == "col0":
                    f2.color_raw[ix, iy, iz, 0] += h
                    g = g_col[ix, iy, iz, 0]
                else:
                    f2.color_raw[ix, iy, iz, 2] += h
                    g = g_col[ix, iy, iz, 2]
                f2.invalidate()
                lp, _, _ = fd._fit_eval(
                    origins, dirs, nears, fars, steps, nmax, f2, bg, targets, False
                )
                f3 = fld.copy()
                if which == "sig":
                    f3.density_raw[ix, iy, iz] -= h
                elif which == "col0":
                    f3.color_raw[ix, iy, iz, 0] -= h
                else:
                    f3.color_raw[ix, iy, iz, 2] -= h
                f3.invalidate()
                lm, _, _ = fd._fit_eval(
                    origins, dirs, nears, fars, steps, nmax, f3, bg, targets, False
                )
                fdiff = (lp - lm) / (2 * h)
                assert abs(fdiff - g) <= 2e-2 * max(abs(g), 1e-4), (which, ix, iy, iz, fdiff, g)

    def test_background_only_images_drive_density_down(self):
        bg, obj, init, cam, poses = tiny_fit_scene()
        empty = fd.VoxelField.empty(obj.bbox_min, obj.bbox_max, 4)
        images = [(fd.render_view(empty, bg, cam, p).rgb, p, cam) for p in poses]
        before = bg.checksum()
        res = fd.fit_difference_field(images, bg, init, iters=60, rays_per_view=600, seed=0)
        assert bg.checksum() == before
        assert fd.softplus(res.field.density_raw.astype(np.float64)).max() < 0.05

    def test_loss_trace_non_increasing(self):
        bg, obj, init, cam, poses = tiny_fit_scene()
        images = [(fd.render_view(obj, bg, cam, p).rgb, p, cam) for p in poses]
        res = fd.fit_difference_field(images, bg, init, iters=30, rays_per_view=400, seed=1)
        assert len(res.losses) > 5
        for a, b in zip(res.losses, res.losses[1:]):
            assert b <= a * (1 + 1e-6)

    def test_non_finite_targets_raise(self):
        bg, obj, init, cam, poses = tiny_fit_scene()
        img = fd.render_view(obj, bg, cam, poses[0]).rgb.copy()
        img[5, 5, 0] = np.nan
        with pytest.raises(fd.NonFiniteLoss) as exc:
            fd.fit_difference_field([(img, poses[0], cam)], bg, init, iters=5, rays_per_view=4096)
        assert exc.value.iteration == 0


class TestExtractObjectPoints:
    def test_empty_field_insufficient(self):
        f = fd.VoxelField.empty([-1, -1, -1], [1, 1, 1], 8)
        with pytest.raises(fd.InsufficientSurface):
            fd.extract_object_points(f, density_threshold=0.5, m=100, seed=0)

    def test_points_on_box_surface(self):
        f = make_box_field()
        omap = fd.extract_object_points(f, density_threshold=1.0, m=300, seed=0)
        assert len(omap) == 300
        voxel_diag = float(np.linalg.norm(f.node_spacing))
        assert np.abs(box_sdf(omap.points)).max() <= 1.5 * voxel_diag

    def test_seed_reproducible(self):
        f = make_box_field()
        a = fd.extract_object_points(f, density_threshold=1.0, m=120, seed=7)
        b = fd.extract_object_points(f, density_threshold=1.0, m=120, seed=7)
        assert np.array_equal(a.points, b.points)


class TestVisibilityMask:
    def test_behind_camera_false(self):
        f = make_box_field()
        pose = geo.look_at([0, -2.5, 0], [0, 0, 0])
        pts = np.array([[0.0, -6.0, 0.0]])  # behind the camera
        vis = fd.visibility_mask(f, None, CAM, pose, pts, depth_tol=0.1)
        assert not vis[0]

    def test_front_face_visible_back_face_hidden(self):
        f = make_box_field(density=100.0)
        pose = geo.look_at([0, -2.5, 0], [0, 0, 0])
        depth_tol = 2.0 * f.min_spacing
        pts = np.array([[0.1, -0.5, 0.1], [0.1, 0.5, 0.1]])  # facing / far face
        vis = fd.visibility_mask(f, None, CAM, pose, pts, depth_tol=depth_tol)
        assert vis[0]
        assert not vis[1]

    def test_empty_field_nothing_visible(self):
        f = fd.VoxelField.empty([-1, -1, -1], [1, 1, 1], 8)
        pose = geo.look_at([0, -2.5, 0], [0, 0, 0])
        vis = fd.visibility_mask(f, None, CAM, pose, np.array([[0.0, 0.0, 0.0]]), depth_tol=0.1)
        assert not vis[0]


class TestFileFormats:
    def test_vxf_roundtrip(self, tmp_path):
        f = make_box_field(res=12)
        path = tmp_path / "field.vxf"
        f.save(path)
        g = fd.VoxelField.load(path)
        assert np.array_equal(f.bbox_min, g.bbox_min)
        assert np.array_equal(f.bbox_max, g.bbox_max)
        assert np.array_equal(f.density_raw, g.density_raw)
        assert np.array_equal(f.color_raw, g.color_raw)

    def test_vxf_streams_x_fastest(self, tmp_path):
        f = fd.VoxelField.empty([0, 0, 0], [1, 2, 3], (2, 3, 4))
        f.density_raw[:, 0, 0] = [1.0, 2.0]  # x-run should be adjacent on disk
        path = tmp_path / "field.vxf"
        f.save(path)
        with open(path, "rb") as fh:
            for _ in range(3):
                fh.readline()
            first = np.frombuffer(fh.read(8), dtype="<f4")
        assert np.array_equal(first, [1.0, 2.0])

    def test_vxm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        omap = fd.ObjectMap(
            points=rng.normal(size=(40, 3)).astype(np.float32).astype(np.float64),
            descriptors=rng.normal(size=(40, 64)).astype(np.float32).astype(np.float64),
            point_colors=rng.uniform(size=(40, 3)).astype(np.float32).astype(np.float64),
        )
        path = tmp_path / "map.vxm"
        omap.save(path)
        m2 = fd.ObjectMap.load(path)
        assert np.array_equal(omap.points, m2.points)
        assert np.array_equal(omap.descriptors, m2.descriptors)
        assert np.array_equal(omap.point_colors, m2.point_colors)

    def test_ppm_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        img = rng.uniform(size=(24, 32, 3))
        path = tmp_path / "img.ppm"
        fd.write_ppm(path, img)
        back = fd.read_ppm(path)
        assert back.shape == img.shape
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-9
