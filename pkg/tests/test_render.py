import numpy as np
import pytest

from refinpaint import errors
from refinpaint.core import Ray
from refinpaint.field import VoxelRadianceField, sigmoid
from refinpaint.render import (
    SamplingSpec,
    render_image,
    render_ray,
    render_ray_backward,
    render_ray_view_substituted,
    render_rays,
    render_rays_backward,
)

from conftest import identity_camera, random_field


def constant_field(raw_sigma=0.0, bounds=((-2, -2, -4), (2, 2, 0))):
    f = VoxelRadianceField((4, 4, 4), bounds)
    f.density.fill(raw_sigma)
    return f


class TestForward:
    def test_zero_density(self):
        f = VoxelRadianceField((4, 4, 4), ((-2, -2, -4), (2, 2, 0)))
        f.density.fill(-60.0)  # softplus(-60) ~ 0
        s = render_ray(f, Ray((0, 0, 1.0), (0, 0, -1.0), 1.5, 4.5), SamplingSpec(16))
        assert np.allclose(s.color, 0.0, atol=1e-20)
        assert s.opacity == pytest.approx(0.0, abs=1e-20)
        assert s.disparity == 0.0

    @pytest.mark.parametrize("n", [8, 64, 512])
    def test_constant_medium_telescopes(self, n):
        raw = 0.7
        f = constant_field(raw)
        f.sh[:, 0] = 1.3  # constant pre-activation colour, channel R
        sigma = np.log1p(np.exp(raw))
        tn, tf = 1.0, 3.5
        s = render_ray(f, Ray((0, 0, 0.5), (0, 0, -1.0), tn, tf), SamplingSpec(n))
        expected_opacity = 1.0 - np.exp(-sigma * (tf - tn))
        assert s.opacity == pytest.approx(expected_opacity, abs=1e-6)
        from refinpaint.field import SH_C0

        c0 = sigmoid(1.3 * SH_C0)
        assert s.color[0] == pytest.approx(c0 * expected_opacity, abs=1e-6)

    def test_opaque_slab_depth(self):
        # huge density beyond t* = 2.0 -> expected depth ~ t* within one section
        f = VoxelRadianceField((64, 64, 64), ((-2, -2, -4), (2, 2, 0)))
        nx, ny, nz = f.resolution
        zs = np.linspace(-4, 0, nz)
        dens = np.full((nx, ny, nz), -60.0)
        dens[:, :, zs <= -2.0] = 60.0
        f.density[:] = dens.reshape(-1)
        n = 256
        s = render_ray(f, Ray((0, 0, 0.0), (0, 0, -1.0), 0.5, 3.5), SamplingSpec(n))
        assert abs(s.depth - 2.0) < (3.5 - 0.5) / n + 0.07  # plus trilinear ramp width

    def test_partition_of_unity(self, rng):
        f = random_field(rng, resolution=(6, 6, 6), scale=1.5)
        n_rays = 200
        o = np.column_stack([rng.uniform(-0.5, 0.5, (n_rays, 2)), np.zeros(n_rays)])
        d = rng.normal(size=(n_rays, 3))
        d[:, 2] = -np.abs(d[:, 2]) - 1.0
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        b = render_rays(f, o, d, np.full(n_rays, 0.5), np.full(n_rays, 3.5), SamplingSpec(32))
        total = b.weights.sum(axis=1) + b.trans[:, -1] * (1.0 - b.alpha[:, -1])
        assert np.abs(total - 1.0).max() < 1e-6

    def test_error_decreases_with_samples(self, rng):
        f = random_field(rng, resolution=(6, 6, 6), scale=1.0)
        ray = Ray((0, 0, 0.0), (0, 0, -1.0), 0.5, 3.5)
        ref = render_ray(f, ray, SamplingSpec(4096)).color
        errs = [np.abs(render_ray(f, ray, SamplingSpec(n)).color - ref).max() for n in (16, 64, 256)]
        assert errs[0] > errs[1] > errs[2]

    def test_degenerate_ray_raises(self, small_field):
        with pytest.raises(errors.DegenerateRay):
            render_rays(
                small_field,
                np.zeros((1, 3)),
                np.array([[0.0, 0, -1]]),
                np.array([2.0]),
                np.array([1.0]),
                SamplingSpec(8),
            )


class TestViewSubstitution:
    def test_identity_target_bitwise(self, rng):
        f = random_field(rng, scale=1.0)
        ray = Ray((0.1, -0.2, 0.0), (0.05, 0.0, -1.0) / np.linalg.norm((0.05, 0.0, -1.0)), 0.5, 3.0)
        a = render_ray(f, ray, SamplingSpec(32))
        b = render_ray_view_substituted(f, ray, ray.origin, SamplingSpec(32))
        assert (a.color == b.color).all()
        assert a.depth == b.depth and a.disparity == b.disparity

    def test_substituted_direction_arithmetic(self, rng):
        # field whose colour equals the direction response; check d = (x - o_t)/||..||
        f = VoxelRadianceField((4, 4, 4), ((-2, -2, 0), (2, 2, 2)))
        f.sh[:, 3] = 1.0  # -C1 * x term of channel R
        x_i = np.array([0.0, 0.0, 1.0])
        o_t = np.array([1.0, 0.0, 1.0])
        expected_dir = np.array([-1.0, 0.0, 0.0])
        sig, rgb_expected = f.sample_field(x_i, expected_dir)
        sig2, rgb_viewsub = f.sample_field(x_i, (x_i - o_t) / np.linalg.norm(x_i - o_t))
        assert np.allclose(rgb_viewsub, rgb_expected, atol=1e-15)

    def test_lambertian_invariant_to_target(self, rng):
        f = VoxelRadianceField((6, 6, 6), ((-2, -2, -4), (2, 2, 0)))
        f.density[:] = rng.normal(0, 1, f.n_vertices)
        f.sh[:, 0] = rng.normal(size=f.n_vertices)
        f.sh[:, 9] = rng.normal(size=f.n_vertices)
        f.sh[:, 18] = rng.normal(size=f.n_vertices)
        ray = Ray((0, 0, 0.5), (0, 0, -1.0), 0.7, 4.0)
        a = render_ray(f, ray, SamplingSpec(32))
        for _ in range(5):
            o_t = rng.uniform(-1, 1, 3) + [0, 0, 2.0]
            b = render_ray_view_substituted(f, ray, o_t, SamplingSpec(32))
            assert np.allclose(a.color, b.color, atol=1e-12)

    def test_degenerate_target_raises(self, small_field):
        ray = Ray((0, 0, 0.0), (0, 0, -1.0), 0.5, 2.5)
        # with 4 midpoint sections over [0.5, 2.5] the second sample sits at
        # exactly t = 1.25 (all dyadic arithmetic)
        mid = ray.origin + 1.25 * ray.direction
        with pytest.raises(errors.DegenerateDirection):
            render_rays(
                small_field,
                ray.origin[None],
                ray.direction[None],
                np.array([0.5]),
                np.array([2.5]),
                SamplingSpec(4, mode="midpoint"),
                view_origins=mid[None],
            )


class TestBackward:
    def test_zero_cotangents(self, rng):
        f = random_field(rng)
        g = f.new_gradients()
        ray = Ray((0, 0, 0.0), (0, 0, -1.0), 0.5, 3.0)
        render_ray_backward(f, ray, SamplingSpec(16), np.zeros(3), 0.0, False, g)
        assert not g.density.any() and not g.sh.any()

    @pytest.mark.parametrize("detach", [False, True])
    def test_finite_differences(self, rng, detach):
        f = random_field(rng, resolution=(8, 8, 8), scale=0.8)
        spec = SamplingSpec(16)
        h = 1e-3
        for _ in range(10):
            o = np.append(rng.uniform(-0.3, 0.3, 2), 0.0)
            d = rng.normal(size=3)
            d[2] = -abs(d[2]) - 1.5
            d /= np.linalg.norm(d)
            ray = Ray(o, d, 0.6, 3.2)
            u = rng.normal(size=3)
            v = rng.normal()

            def loss():
                s = render_ray(f, ray, spec)
                return float(u @ s.color) + v * s.disparity

            g = f.new_gradients()
            render_ray_backward(f, ray, spec, u, v, detach, g)

            # with detachment the density gradient must only carry the disparity path
            probe = rng.permutation(np.nonzero(np.abs(g.density) > 1e-9)[0])[:8]
            for idx in probe:
                old = f.density[idx]
                if detach:
                    # oracle: finite difference of the disparity-only loss
                    def loss_d():
                        return v * render_ray(f, ray, spec).disparity

                    f.density[idx] = old + h
                    lp = loss_d()
                    f.density[idx] = old - h
                    lm = loss_d()
                else:
                    f.density[idx] = old + h
                    lp = loss()
                    f.density[idx] = old - h
                    lm = loss()
                f.density[idx] = old
                fd = (lp - lm) / (2 * h)
                assert g.density[idx] == pytest.approx(fd, rel=1e-3, abs=1e-7)

            vs, cs = np.nonzero(np.abs(g.sh) > 1e-9)
            take = rng.permutation(len(vs))[:6]
            for v_i, c_i in zip(vs[take], cs[take]):
                old = f.sh[v_i, c_i]
                f.sh[v_i, c_i] = old + h
                lp = loss()
                f.sh[v_i, c_i] = old - h
                lm = loss()
                f.sh[v_i, c_i] = old
                fd = (lp - lm) / (2 * h)
                assert g.sh[v_i, c_i] == pytest.approx(fd, rel=1e-3, abs=1e-7)

    def test_detach_color_only_gives_zero_density_grad(self, rng):
        f = random_field(rng)
        g = f.new_gradients()
        ray = Ray((0, 0, 0.0), (0, 0, -1.0), 0.5, 3.0)
        render_ray_backward(f, ray, SamplingSpec(16), np.ones(3), 0.0, True, g)
        assert not g.density.any()
        assert g.sh.any()


class TestRenderImage:
    def test_zero_field_black(self):
        f = VoxelRadianceField((4, 4, 4), ((-2, -2, -4), (2, 2, -1)))
        f.density.fill(-60.0)
        cam = identity_camera(width=16, height=12)
        img = render_image(f, cam, "color", SamplingSpec(16))
        assert np.allclose(img.data, 0.0, atol=1e-12)

    def test_viewsub_with_own_origin_identical(self, rng):
        f = random_field(rng, bounds=((-2, -2, -4), (2, 2, -1)), scale=1.0)
        cam = identity_camera(width=16, height=12)
        a = render_image(f, cam, "color", SamplingSpec(16))
        b = render_image(f, cam, "viewsub", SamplingSpec(16), target_origin=cam.origin)
        assert (a.data == b.data).all()

    def test_opaque_plane_disparity(self):
        f = VoxelRadianceField((4, 4, 48), ((-4, -4, -6), (4, 4, -4)))
        f.density.fill(60.0)  # opaque slab starting at z = -4 (entry face)
        cam = identity_camera(width=16, height=12, fx=40, fy=40)
        img = render_image(f, cam, "disparity", SamplingSpec(256))
        ys, xs = np.mgrid[0:12, 0:16]
        u = (xs + 0.5 - (cam.cx + 0.5)) / cam.fx
        v = (ys + 0.5 - (cam.cy + 0.5)) / cam.fy
        expected = 1.0 / (4.0 * np.sqrt(1.0 + u**2 + v**2))
        assert np.abs(img.data[:, :, 0] - expected).max() < 2e-2
