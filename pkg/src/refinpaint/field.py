"""Explicit radiance field: dense voxel grid, trilinear interpolation,
degree-2 spherical-harmonic colour, softplus density, analytic gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange

from . import errors

# real SH constants, degree <= 2 (standard normalization, Y0 = 0.282095)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)

N_SH = 9


def sh_basis(d) -> np.ndarray:
    """Degree-2 real spherical harmonic basis for unit direction(s) d.

    Accepts (3,) or (n, 3); returns (9,) or (n, 9).
    """
    d = np.asarray(d, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    out = np.empty((d.shape[0], N_SH))
    out[:, 0] = SH_C0
    out[:, 1] = -SH_C1 * y
    out[:, 2] = SH_C1 * z
    out[:, 3] = -SH_C1 * x
    out[:, 4] = SH_C2[0] * x * y
    out[:, 5] = SH_C2[1] * y * z
    out[:, 6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
    out[:, 7] = SH_C2[3] * x * z
    out[:, 8] = SH_C2[4] * (x * x - y * y)
    return out[0] if single else out


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class FieldGradients:
    """Accumulation buffers matching VoxelRadianceField parameter layout."""

    density: np.ndarray  # (V,)
    sh: np.ndarray  # (V, 3*N_SH)

    def zero_(self):
        self.density.fill(0.0)
        self.sh.fill(0.0)

    def check_finite(self):
        if not (np.isfinite(self.density).all() and np.isfinite(self.sh).all()):
            raise errors.NonFiniteGradient("non-finite gradient entries")


@dataclass
class SampleCache:
    """Forward-pass intermediates needed by the analytic backward pass."""

    idx: np.ndarray  # (n, 8) flat vertex indices (0 for out-of-bounds rows)
    w: np.ndarray  # (n, 8) trilinear weights
    inb: np.ndarray  # (n,) in-bounds flags
    raw_sigma: np.ndarray  # (n,) pre-softplus density
    pre_rgb: np.ndarray  # (n, 3) pre-sigmoid colour
    basis: np.ndarray  # (n, 9)


@njit(cache=True, parallel=True)
def _gather(idx, w, inb, density, sh, basis):
    n = idx.shape[0]
    raw_sigma = np.zeros(n)
    pre_rgb = np.zeros((n, 3))
    for k in prange(n):
        if not inb[k]:
            continue
        acc = 0.0
        r = 0.0
        g = 0.0
        b = 0.0
        for c in range(8):
            v = idx[k, c]
            wc = w[k, c]
            acc += wc * density[v]
            t0 = 0.0
            t1 = 0.0
            t2 = 0.0
            for l in range(9):
                bl = basis[k, l]
                t0 += sh[v, l] * bl
                t1 += sh[v, 9 + l] * bl
                t2 += sh[v, 18 + l] * bl
            r += wc * t0
            g += wc * t1
            b += wc * t2
        raw_sigma[k] = acc
        pre_rgb[k, 0] = r
        pre_rgb[k, 1] = g
        pre_rgb[k, 2] = b
    return raw_sigma, pre_rgb


@njit(cache=True)
def _scatter(idx, w, inb, d_raw_sigma, d_pre_rgb, basis, g_density, g_sh):
    n = idx.shape[0]
    for k in range(n):
        if not inb[k]:
            continue
        for c in range(8):
            v = idx[k, c]
            wc = w[k, c]
            if wc == 0.0:
                continue
            g_density[v] += wc * d_raw_sigma[k]
            for ch in range(3):
                dk = wc * d_pre_rgb[k, ch]
                if dk != 0.0:
                    base = ch * 9
                    for l in range(9):
                        g_sh[v, base + l] += dk * basis[k, l]


class VoxelRadianceField:
    """Dense (Nx, Ny, Nz) vertex grid; 1 raw density + 27 SH coefficients
    per vertex. Out-of-bounds queries evaluate to (sigma=0, rgb=0).
    """

    MAGIC = b"RFI1"
    VERSION = 1

    def __init__(self, resolution, bounds, density=None, sh=None):
        self.resolution = tuple(int(r) for r in resolution)
        if min(self.resolution) < 2:
            raise ValueError("resolution must be >= 2 per axis")
        lo, hi = bounds
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if not (self.hi > self.lo).all():
            raise ValueError("degenerate bounds")
        nv = self.n_vertices
        self.density = np.zeros(nv) if density is None else np.asarray(density, dtype=np.float64).reshape(nv)
        self.sh = np.zeros((nv, 3 * N_SH)) if sh is None else np.asarray(sh, dtype=np.float64).reshape(nv, 3 * N_SH)

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def bounds(self):
        return self.lo, self.hi

    def new_gradients(self) -> FieldGradients:
        return FieldGradients(np.zeros_like(self.density), np.zeros_like(self.sh))

    # -- interpolation ------------------------------------------------------

    def _setup(self, pts):
        """Trilinear corner indices/weights for points (n, 3)."""
        nx, ny, nz = self.resolution
        res = np.array([nx, ny, nz], dtype=np.float64)
        u = (pts - self.lo) / (self.hi - self.lo) * (res - 1.0)
        inb = ((pts >= self.lo) & (pts <= self.hi)).all(axis=1)
        u = np.clip(u, 0.0, res - 1.0)
        i0 = np.minimum(u.astype(np.int64), (res - 2.0).astype(np.int64))
        f = u - i0
        ix, iy, iz = i0[:, 0], i0[:, 1], i0[:, 2]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        base = (ix * ny + iy) * nz + iz
        n = pts.shape[0]
        idx = np.empty((n, 8), dtype=np.int64)
        w = np.empty((n, 8))
        syz = ny * nz
        for c in range(8):
            bx, by, bz = (c >> 2) & 1, (c >> 1) & 1, c & 1
            idx[:, c] = base + bx * syz + by * nz + bz
            w[:, c] = (
                (fx if bx else 1.0 - fx)
                * (fy if by else 1.0 - fy)
                * (fz if bz else 1.0 - fz)
            )
        idx[~inb] = 0
        w[~inb] = 0.0
        return idx, w, inb

    def sample_many(self, pts, dirs):
        """Batch field query.

        pts: (n, 3) world positions; dirs: (n, 3) unit view directions.
        Returns (sigma (n,), rgb (n, 3), cache).
        """
        pts = np.asarray(pts, dtype=np.float64)
        dirs = np.asarray(dirs, dtype=np.float64)
        idx, w, inb = self._setup(pts)
        basis = np.ascontiguousarray(sh_basis(dirs))
        raw_sigma, pre_rgb = _gather(idx, w, inb, self.density, self.sh, basis)
        sigma = np.where(inb, softplus(raw_sigma), 0.0)
        rgb = np.where(inb[:, None], sigmoid(pre_rgb), 0.0)
        return sigma, rgb, SampleCache(idx, w, inb, raw_sigma, pre_rgb, basis)

    def backward_many(self, cache: SampleCache, dL_dsigma, dL_drgb, grads: FieldGradients):
        """Accumulate parameter gradients for a previous sample_many call."""
        d_raw = np.asarray(dL_dsigma, dtype=np.float64) * sigmoid(cache.raw_sigma)
        s = sigmoid(cache.pre_rgb)
        d_pre = np.asarray(dL_drgb, dtype=np.float64) * s * (1.0 - s)
        _scatter(
            cache.idx,
            cache.w,
            cache.inb,
            np.ascontiguousarray(d_raw),
            np.ascontiguousarray(d_pre),
            np.ascontiguousarray(cache.basis),
            grads.density,
            grads.sh,
        )

    # -- scalar spec API ----------------------------------------------------

    def sample_field(self, x, d):
        """Single query: (sigma, rgb). Raises NonUnitDirection for bad d."""
        d = np.asarray(d, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise errors.NonUnitDirection("view direction must be unit length")
        sigma, rgb, _ = self.sample_many(np.atleast_2d(x), np.atleast_2d(d))
        return float(sigma[0]), rgb[0]

    def field_backward(self, x, d, dL_dsigma, dL_drgb, grads: FieldGradients):
        sigma, rgb, cache = self.sample_many(np.atleast_2d(x), np.atleast_2d(d))
        self.backward_many(cache, np.atleast_1d(dL_dsigma), np.atleast_2d(dL_drgb), grads)

    # -- checkpoints ---------------------------------------------------------

    def save(self, path):
        with open(Path(path), "wb") as f:
            f.write(self.MAGIC)
            f.write(struct.pack("<I", self.VERSION))
            f.write(struct.pack("<3I", *self.resolution))
            f.write(struct.pack("<6d", *self.lo, *self.hi))
            f.write(self.density.astype("<f4").tobytes())
            f.write(self.sh.astype("<f4").tobytes())

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.exists():
            raise errors.BadCheckpoint(f"missing checkpoint {p}")
        with open(p, "rb") as f:
            if f.read(4) != cls.MAGIC:
                raise errors.BadCheckpoint(f"{p}: bad magic")
            (version,) = struct.unpack("<I", f.read(4))
            if version != cls.VERSION:
                raise errors.BadCheckpoint(f"{p}: unsupported version {version}")
            res = struct.unpack("<3I", f.read(12))
            b = struct.unpack("<6d", f.read(48))
            nv = res[0] * res[1] * res[2]
            density = np.frombuffer(f.read(nv * 4), dtype="<f4").astype(np.float64)
            sh = np.frombuffer(f.read(nv * 3 * N_SH * 4), dtype="<f4").astype(np.float64)
        return cls(res, (b[:3], b[3:]), density=density, sh=sh.reshape(nv, 3 * N_SH))
