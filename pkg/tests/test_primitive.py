import numpy as np
import pytest

from betasplat import primitive as bp
from betasplat.appearance import SbAppearance


def random_quats(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=-1, keepdims=True) * rng.uniform(0.5, 2.0, (n, 1))


def simple_camera(width=64, height=64, fov=0.8):
    return bp.Camera.from_lookat(
        eye=[0.0, 0.0, -5.0],
        target=[0.0, 0.0, 0.0],
        up=[0.0, 1.0, 0.0],
        fov_x=fov,
        width=width,
        height=height,
    )


def make_prim(position, scale, rotation=(1, 0, 0, 0), opacity=0.5, shape=0.0):
    return bp.BetaPrimitive(
        position=np.asarray(position, dtype=float),
        opacity=opacity,
        rotation=np.asarray(rotation, dtype=float),
        scale=np.asarray(scale, dtype=float),
        shape=shape,
        appearance=SbAppearance.lambertian(np.array([0.5, 0.5, 0.5]), 0),
    )


class TestCovariance:
    def test_identity(self):
        np.testing.assert_allclose(
            bp.covariance([1, 0, 0, 0], [1, 1, 1]), np.eye(3), atol=1e-15
        )

    def test_axis_aligned_scaling_squares(self):
        np.testing.assert_allclose(
            bp.covariance([1, 0, 0, 0], [2, 1, 1]), np.diag([4.0, 1.0, 1.0]), atol=1e-15
        )

    def test_eigenvalues_are_squared_scales(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            q = random_quats(rng, 1)[0]
            s = rng.uniform(0.1, 3.0, 3)
            eig = np.linalg.eigvalsh(bp.covariance(q, s))
            np.testing.assert_allclose(np.sort(eig), np.sort(s**2), rtol=1e-9)

    def test_quaternion_double_cover(self):
        rng = np.random.default_rng(1)
        q = random_quats(rng, 1)[0]
        s = rng.uniform(0.1, 2.0, 3)
        np.testing.assert_allclose(bp.covariance(q, s), bp.covariance(-q, s), atol=1e-14)

    def test_degenerate_quaternion(self):
        with pytest.raises(bp.DegenerateQuaternionError):
            bp.covariance([0.0, 0.0, 0.0, 0.0], [1, 1, 1])


class TestProject:
    def test_on_axis_isotropic(self):
        cam = simple_camera()
        proj = bp.project(make_prim([0, 0, 0], [0.3, 0.3, 0.3]), cam)
        eig = np.linalg.eigvalsh(proj.cov2d)
        assert abs(eig[0] - eig[1]) <= 1e-6 * eig[1]

    def test_depth_scaling_halves_extent(self):
        cam = simple_camera(width=256, height=256)
        p1 = bp.project(make_prim([0, 0, 0], [0.2, 0.2, 0.2]), cam)  # depth 5
        p2 = bp.project(make_prim([0, 0, 5.0], [0.2, 0.2, 0.2]), cam)  # depth 10
        raw1 = p1.cov2d - bp.COV_CONDITIONING * np.eye(2)
        raw2 = p2.cov2d - bp.COV_CONDITIONING * np.eye(2)
        np.testing.assert_allclose(raw2 * 4.0, raw1, rtol=1e-5)

    def test_culled_behind_near_plane(self):
        cam = simple_camera()
        assert bp.project(make_prim([0, 0, -10.0], [0.1, 0.1, 0.1]), cam) is None

    def test_culled_off_screen(self):
        cam = simple_camera()
        assert bp.project(make_prim([50.0, 0, 0], [0.01, 0.01, 0.01]), cam) is None

    def test_scale_homogeneity(self):
        cam = simple_camera()
        rng = np.random.default_rng(3)
        q = random_quats(rng, 1)[0]
        s = rng.uniform(0.05, 0.2, 3)
        pa = bp.project(make_prim([0.3, -0.2, 0.5], s, rotation=q), cam)
        pb = bp.project(make_prim([0.3, -0.2, 0.5], 1.7 * s, rotation=q), cam)
        raw_a = pa.cov2d - bp.COV_CONDITIONING * np.eye(2)
        raw_b = pb.cov2d - bp.COV_CONDITIONING * np.eye(2)
        np.testing.assert_allclose(raw_b, 1.7**2 * raw_a, rtol=1e-5)


class TestMahalanobis:
    def test_zero_at_center(self):
        cam = simple_camera()
        proj = bp.project(make_prim([0, 0, 0], [0.3, 0.3, 0.3]), cam)
        assert bp.mahalanobis_sq(proj.mean2d, proj) == 0.0

    def test_euclidean_case(self):
        proj = bp.ProjectedPrimitive(
            mean2d=np.array([10.0, 10.0]),
            cov2d=np.eye(2),
            cov2d_inv=np.eye(2),
            depth=1.0,
            bounds=bp.PixelRect(0, 0, 0, 0),
        )
        assert bp.mahalanobis_sq([13.0, 14.0], proj) == pytest.approx(25.0)

    def test_matches_linear_solve_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            a = rng.standard_normal((2, 2))
            cov = a @ a.T + 0.3 * np.eye(2)
            proj = bp.ProjectedPrimitive(
                mean2d=rng.standard_normal(2),
                cov2d=cov,
                cov2d_inv=np.linalg.inv(cov),
                depth=1.0,
                bounds=bp.PixelRect(0, 0, 0, 0),
            )
            x = rng.standard_normal(2) * 5
            d = x - proj.mean2d
            expected = float(d @ np.linalg.solve(cov, d))
            assert bp.mahalanobis_sq(x, proj) == pytest.approx(expected, abs=1e-10)

    def test_rotation_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            a = rng.standard_normal((2, 2))
            cov = a @ a.T + 0.5 * np.eye(2)
            th = rng.uniform(0, 2 * np.pi)
            rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
            d = rng.standard_normal(2)

            def proj_for(c):
                return bp.ProjectedPrimitive(
                    mean2d=np.zeros(2),
                    cov2d=c,
                    cov2d_inv=np.linalg.inv(c),
                    depth=1.0,
                    bounds=bp.PixelRect(0, 0, 0, 0),
                )

            r1 = bp.mahalanobis_sq(d, proj_for(cov))
            r2 = bp.mahalanobis_sq(rot @ d, proj_for(rot @ cov @ rot.T))
            assert r1 == pytest.approx(r2, rel=1e-10)


class TestScreenBounds:
    def test_worked_example(self):
        rect = bp.screen_bounds(np.array([10.0, 10.0]), np.diag([4.0, 9.0]), 100, 100)
        assert (rect.x0, rect.x1, rect.y0, rect.y1) == (7, 13, 6, 14)

    def test_identity_covariance_size(self):
        rect = bp.screen_bounds(np.array([50.0, 50.0]), np.eye(2), 100, 100)
        assert rect.x1 - rect.x0 + 1 == 2 * (1 + bp.BOUNDS_GUARD) + 1
        assert rect.y1 - rect.y0 + 1 == 2 * (1 + bp.BOUNDS_GUARD) + 1

    def test_off_screen_empty(self):
        rect = bp.screen_bounds(np.array([-50.0, -50.0]), np.eye(2), 100, 100)
        assert rect.is_empty

    def test_support_never_clipped(self):
        # every pixel with positive kernel support lies inside the bounds
        rng = np.random.default_rng(6)
        cam = simple_camera(width=96, height=96)
        for _ in range(25):
            prim = make_prim(
                rng.uniform(-0.8, 0.8, 3),
                rng.uniform(0.02, 0.4, 3),
                rotation=random_quats(rng, 1)[0],
            )
            proj = bp.project(prim, cam)
            if proj is None:
                continue
            ys, xs = np.mgrid[0 : cam.height, 0 : cam.width]
            pts = np.stack([xs.ravel(), ys.ravel()], axis=-1).astype(float)
            d = pts - proj.mean2d
            r2 = np.einsum("pi,ij,pj->p", d, proj.cov2d_inv, d)
            inside = (r2 < 1.0).reshape(cam.height, cam.width)
            b = proj.bounds
            mask = np.zeros_like(inside)
            mask[b.y0 : b.y1 + 1, b.x0 : b.x1 + 1] = True
            assert np.all(mask[inside])


class TestProjectBackward:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        cam = simple_camera(width=48, height=48)
        n = 6
        positions = rng.uniform(-0.6, 0.6, (n, 3))
        rotations = random_quats(rng, n)
        log_scales = np.log(rng.uniform(0.05, 0.3, (n, 3)))

        def forward(pos, rot, ls):
            batch = bp.project_arrays(pos, rot, np.exp(ls), cam)
            assert batch.count == n
            return batch

        batch = forward(positions, rotations, log_scales)
        gm = rng.standard_normal(batch.means2d.shape)
        gc = rng.standard_normal(batch.cov2d.shape)
        gc = 0.5 * (gc + np.swapaxes(gc, -1, -2))

        def scalar(pos, rot, ls):
            b = forward(pos, rot, ls)
            return float(np.sum(b.means2d * gm) + np.sum(b.cov2d * gc))

        d_pos, d_rot, d_ls = bp.project_backward(
            positions, rotations, np.exp(log_scales), cam, batch, gm, gc
        )

        h = 1e-6
        for arr, grad in [
            (positions, d_pos),
            (rotations, d_rot),
            (log_scales, d_ls),
        ]:
            flat = arr.ravel()
            fd = np.zeros_like(flat)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = scalar(positions, rotations, log_scales)
                flat[k] = orig - h
                down = scalar(positions, rotations, log_scales)
                flat[k] = orig
                fd[k] = (up - down) / (2 * h)
            np.testing.assert_allclose(
                grad.ravel(), fd, rtol=2e-5, atol=1e-7 * max(1.0, np.abs(fd).max())
            )


class TestPrimitiveSet:
    def test_round_trip_through_primitives(self):
        rng = np.random.default_rng(8)
        prims = [
            bp.BetaPrimitive(
                position=rng.standard_normal(3),
                opacity=float(rng.uniform(0.05, 0.95)),
                rotation=random_quats(rng, 1)[0],
                scale=rng.uniform(0.1, 1.0, 3),
                shape=float(rng.normal()),
                appearance=SbAppearance(
                    rng.standard_normal(3),
                    rng.standard_normal((2, 3)),
                    rng.standard_normal((2, 3)),
                ),
            )
            for _ in range(5)
        ]
        ps = bp.PrimitiveSet.from_primitives(prims)
        assert len(ps) == 5 and ps.lobe_count == 2
        back = ps.primitive(3)
        np.testing.assert_allclose(back.position, prims[3].position)
        np.testing.assert_allclose(back.opacity, prims[3].opacity, rtol=1e-12)
        np.testing.assert_allclose(back.scale, prims[3].scale, rtol=1e-12)

    def test_take_and_append(self):
        rng = np.random.default_rng(9)
        ps = bp.PrimitiveSet(
            positions=rng.standard_normal((4, 3)),
            opacity_raw=rng.standard_normal(4),
            rotations=random_quats(rng, 4),
            log_scales=rng.standard_normal((4, 3)),
            shapes=rng.standard_normal(4),
            base_colors=rng.standard_normal((4, 3)),
            lobe_axes=rng.standard_normal((4, 1, 3)),
            lobe_colors=rng.standard_normal((4, 1, 3)),
        )
        sub = ps.take(np.array([0, 2]))
        assert len(sub) == 2
        merged = sub.append(ps)
        assert len(merged) == 6
        np.testing.assert_array_equal(merged.positions[0], ps.positions[0])


class TestCamera:
    def test_rejects_non_orthonormal(self):
        w2c = np.eye(4)
        w2c[0, 1] = 0.01
        with pytest.raises(ValueError):
            bp.Camera(w2c, 50, 50, 32, 32, 64, 64)

    def test_center_round_trip(self):
        cam = simple_camera()
        np.testing.assert_allclose(cam.center, [0, 0, -5.0], atol=1e-12)
