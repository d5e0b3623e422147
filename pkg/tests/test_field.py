import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refinpaint import errors
from refinpaint.field import (
    SH_C0,
    VoxelRadianceField,
    sh_basis,
    sigmoid,
    softplus,
)

from conftest import random_field


def _random_unit(rng, n=1):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class TestShBasis:
    def test_z_axis_values(self):
        b = sh_basis((0.0, 0.0, 1.0))
        assert b[0] == pytest.approx(0.282095, abs=1e-6)
        # degree-1 block proportional to (0, 0, 1) pattern: only the z-term fires
        assert b[1] == pytest.approx(0.0, abs=1e-12)
        assert b[3] == pytest.approx(0.0, abs=1e-12)
        assert b[2] != 0.0

    def test_antipodal_parity(self, rng):
        d = _random_unit(rng)[0]
        b_pos = sh_basis(d)
        b_neg = sh_basis(-d)
        # degree 1 (indices 1..3) is odd; degree 0 and 2 are even
        assert np.allclose(b_neg[1:4], -b_pos[1:4], atol=1e-12)
        assert b_neg[0] == b_pos[0]
        assert np.allclose(b_neg[4:], b_pos[4:], atol=1e-12)

    def test_orthonormality_monte_carlo(self, rng):
        d = _random_unit(rng, 200_000)
        B = sh_basis(d)
        gram = 4.0 * np.pi * (B.T @ B) / d.shape[0]
        assert np.abs(gram - np.eye(9)).max() < 2e-2


class TestSampleField:
    def test_zero_parameters(self):
        f = VoxelRadianceField((4, 4, 4), ((-1, -1, -1), (1, 1, 1)))
        sigma, rgb = f.sample_field((0.2, -0.3, 0.1), (0.0, 0.0, 1.0))
        assert sigma == pytest.approx(np.log(2.0), abs=1e-12)
        assert np.allclose(rgb, 0.5, atol=1e-12)

    def test_out_of_bounds(self, small_field):
        sigma, rgb = small_field.sample_field((5.0, 5.0, 5.0), (0.0, 0.0, 1.0))
        assert sigma == 0.0
        assert (rgb == 0.0).all()

    def test_lambertian_direction_independent(self, rng):
        f = VoxelRadianceField((4, 4, 4), ((-1, -1, -1), (1, 1, 1)))
        f.sh[:, 0] = rng.normal(size=f.n_vertices)  # degree-0 of channel R
        f.sh[:, 9] = rng.normal(size=f.n_vertices)
        f.sh[:, 18] = rng.normal(size=f.n_vertices)
        x = (0.1, 0.2, -0.3)
        ref = f.sample_field(x, (0.0, 0.0, 1.0))[1]
        for d in _random_unit(rng, 100):
            assert np.allclose(f.sample_field(x, d)[1], ref, atol=1e-12)

    def test_non_unit_direction_rejected(self, small_field):
        with pytest.raises(errors.NonUnitDirection):
            small_field.sample_field((0, 0, -2), (0.0, 0.0, 2.0))

    def test_vertex_values_reproduced(self, rng):
        f = random_field(rng, resolution=(3, 4, 5), bounds=((0, 0, 0), (2, 3, 4)))
        nx, ny, nz = f.resolution
        xs = np.linspace(0, 2, nx)
        ys = np.linspace(0, 3, ny)
        zs = np.linspace(0, 4, nz)
        for i in (0, nx - 1, 1):
            for j in (0, ny - 1, 2):
                for k in (0, nz - 1, 3):
                    v = (i * ny + j) * nz + k
                    sigma, _ = f.sample_field((xs[i], ys[j], zs[k]), (0, 0, 1.0))
                    assert sigma == pytest.approx(softplus(f.density[v]), abs=1e-9)

    def test_continuity_across_voxel_faces(self, rng):
        f = random_field(rng, resolution=(4, 4, 4), bounds=((-1, -1, -1), (1, 1, 1)), scale=2.0)
        # voxel face at x = -1 + 2/3; approach from both sides
        face_x = -1.0 + 2.0 / 3.0
        d = (0.0, 0.0, 1.0)
        eps = 1e-9
        for y, z in [(-0.5, 0.2), (0.3, -0.9), (0.0, 0.0)]:
            lo = f.sample_field((face_x - eps, y, z), d)
            hi = f.sample_field((face_x + eps, y, z), d)
            assert abs(lo[0] - hi[0]) < 1e-6
            assert np.abs(lo[1] - hi[1]).max() < 1e-6


class TestFieldBackward:
    def test_zero_cotangents_leave_grads_unchanged(self, small_field):
        g = small_field.new_gradients()
        small_field.field_backward((0, 0, -2), (0, 0, 1.0), 0.0, np.zeros(3), g)
        assert not g.density.any()
        assert not g.sh.any()

    def test_finite_differences(self, rng):
        f = random_field(rng, resolution=(4, 4, 4), bounds=((-1, -1, -1), (1, 1, 1)))
        h = 1e-3
        for _ in range(50):
            x = rng.uniform(-0.95, 0.95, 3)
            d = _random_unit(rng)[0]
            u = rng.normal(size=3)
            w = rng.normal()

            def loss():
                sigma, rgb = f.sample_field(x, d)
                return w * sigma + float(u @ rgb)

            g = f.new_gradients()
            f.field_backward(x, d, w, u, g)
            touched = np.nonzero(g.density)[0]
            assert touched.size > 0
            for v in touched:
                old = f.density[v]
                f.density[v] = old + h
                lp = loss()
                f.density[v] = old - h
                lm = loss()
                f.density[v] = old
                fd = (lp - lm) / (2 * h)
                assert g.density[v] == pytest.approx(fd, rel=1e-3, abs=1e-8)
            vs, cs = np.nonzero(g.sh)
            for v, c in zip(vs[:6], cs[:6]):
                old = f.sh[v, c]
                f.sh[v, c] = old + h
                lp = loss()
                f.sh[v, c] = old - h
                lm = loss()
                f.sh[v, c] = old
                fd = (lp - lm) / (2 * h)
                assert g.sh[v, c] == pytest.approx(fd, rel=1e-3, abs=1e-8)

    def test_accumulation_is_additive(self, rng, small_field):
        x1, x2 = (0.1, 0.2, -2.0), (-0.4, 0.3, -1.5)
        d = (0.0, 0.0, 1.0)
        g1 = small_field.new_gradients()
        small_field.field_backward(x1, d, 1.0, np.ones(3), g1)
        g2 = small_field.new_gradients()
        small_field.field_backward(x2, d, 0.5, -np.ones(3), g2)
        g_both = small_field.new_gradients()
        small_field.field_backward(x1, d, 1.0, np.ones(3), g_both)
        small_field.field_backward(x2, d, 0.5, -np.ones(3), g_both)
        assert np.allclose(g_both.density, g1.density + g2.density, atol=1e-14)
        assert np.allclose(g_both.sh, g1.sh + g2.sh, atol=1e-14)


class TestCheckpoint:
    def test_roundtrip_float32_exact(self, tmp_path, rng):
        f = random_field(rng)
        f.density[:] = f.density.astype(np.float32)
        f.sh[:] = f.sh.astype(np.float32)
        f.save(tmp_path / "f.rfi")
        back = VoxelRadianceField.load(tmp_path / "f.rfi")
        assert back.resolution == f.resolution
        assert np.allclose(back.lo, f.lo) and np.allclose(back.hi, f.hi)
        assert (back.density == f.density).all()
        assert (back.sh == f.sh).all()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.rfi"
        p.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(errors.BadCheckpoint):
            VoxelRadianceField.load(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(errors.BadCheckpoint):
            VoxelRadianceField.load(tmp_path / "none.rfi")


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_trilinear_weights_partition_of_unity(seed):
    r = np.random.default_rng(seed)
    f = VoxelRadianceField((5, 6, 7), ((-1, -2, -3), (1, 2, 3)))
    pts = r.uniform(-0.9, 0.9, (32, 3)) * [1, 2, 3]
    idx, w, inb = f._setup(pts)
    assert np.allclose(w.sum(axis=1), 1.0, atol=1e-12)
    assert inb.all()
