"""Fast bilateral solver on a hard-assignment bilateral grid, used for
residual inpainting of view-substituted renders, plus edge-island filtering
and a dense pixel-space oracle for verification.

Grid space is (x / sigma_xy, y / sigma_xy, Y / sigma_l, U / sigma_uv,
V / sigma_uv) with luma/chroma taken from BT.601 YUV on 0..255 levels.
The smoothness operator is the bistochastised splat-blur-slice affinity;
the system is solved by Jacobi-preconditioned conjugate gradient with a
fixed iteration count.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from . import errors
from .core import ImageBuffer, MaskBuffer, dilate_mask

N_GRID_DIMS = 5
BISTOCHASTIZE_SWEEPS = 20


@dataclass(frozen=True)
class BilateralParams:
    spatial_bandwidth: float = 128.0
    luma_bandwidth: float = 4.0
    chroma_bandwidth: float = 4.0
    smoothness: float = 128.0
    pcg_iterations: int = 25
    c_max: float = 1.0

    def __post_init__(self):
        if min(self.spatial_bandwidth, self.luma_bandwidth, self.chroma_bandwidth) < 1:
            raise ValueError("bandwidths must be >= 1")
        if self.pcg_iterations < 1:
            raise ValueError("pcg_iterations must be >= 1")


def rgb_to_yuv255(rgb: np.ndarray) -> np.ndarray:
    """Linear RGB [0,1] -> BT.601 YUV on 0..255 levels (offsets at 128)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    u = 0.492 * (b - y) + 0.5
    v = 0.877 * (r - y) + 0.5
    return np.stack([y, u, v], axis=-1) * 255.0


class BilateralGrid:
    """Hard-assignment bilateral grid of an RGB guide image."""

    def __init__(self, guide: ImageBuffer, params: BilateralParams):
        if guide.channels != 3:
            raise errors.SizeMismatch("guide must be RGB")
        h, w = guide.height, guide.width
        yuv = rgb_to_yuv255(guide.data)
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        coords = np.stack(
            [
                xs / params.spatial_bandwidth,
                ys / params.spatial_bandwidth,
                yuv[:, :, 0] / params.luma_bandwidth,
                yuv[:, :, 1] / params.chroma_bandwidth,
                yuv[:, :, 2] / params.chroma_bandwidth,
            ],
            axis=-1,
        ).reshape(-1, N_GRID_DIMS)
        icoords = np.rint(coords).astype(np.int64)
        icoords -= icoords.min(axis=0)
        uniq, inverse = np.unique(icoords, axis=0, return_inverse=True)
        self.npixels = h * w
        self.nvertices = uniq.shape[0]
        self.assignment = inverse
        self.S = sp.csr_matrix(
            (np.ones(self.npixels), (inverse, np.arange(self.npixels))),
            shape=(self.nvertices, self.npixels),
        )
        # neighbour adjacency per grid dimension (offset +-1)
        key = {tuple(v): i for i, v in enumerate(uniq)}
        rows, cols = [], []
        for dim in range(N_GRID_DIMS):
            for off in (-1, 1):
                shifted = uniq.copy()
                shifted[:, dim] += off
                for i, v in enumerate(shifted):
                    j = key.get(tuple(v))
                    if j is not None:
                        rows.append(i)
                        cols.append(j)
        self.adj = sp.csr_matrix(
            (np.ones(len(rows)), (rows, cols)), shape=(self.nvertices, self.nvertices)
        )
        self._bistochastize()

    def blur(self, x):
        """[1,2,1] blur summed over the 5 grid dimensions."""
        return 2.0 * N_GRID_DIMS * x + self.adj @ x

    def _bistochastize(self):
        m = np.asarray(self.S.sum(axis=1)).ravel()
        n = np.ones(self.nvertices)
        # iterate to the fixed point n * blur(n) = m; extra sweeps past the
        # nominal count cost little and keep the affinity row sums tight
        for sweep in range(500):
            n_new = np.sqrt(n * m / self.blur(n))
            delta = np.abs(n_new - n).max()
            n = n_new
            if sweep >= BISTOCHASTIZE_SWEEPS and delta < 1e-13:
                break
        self.m = m
        self.n = n

    def splat(self, img_flat):
        return self.S @ img_flat

    def slice(self, vertex_vals):
        return vertex_vals[self.assignment]

    def smoothness_matrix(self) -> sp.csr_matrix:
        """Grid-space Laplacian-like operator Dm - Dn * blur * Dn."""
        dn = sp.diags(self.n)
        blur_mat = 2.0 * N_GRID_DIMS * sp.eye(self.nvertices) + self.adj
        return (sp.diags(self.m) - dn @ blur_mat @ dn).tocsr()


def _pcg(A_mv, b, precond, iterations):
    x = np.zeros_like(b)
    r = b - A_mv(x)
    z = precond * r
    p = z.copy()
    rz = r @ z
    for _ in range(iterations):
        Ap = A_mv(p)
        pAp = p @ Ap
        if pAp <= 0 or not np.isfinite(pAp):
            break
        a = rz / pAp
        x += a * p
        r -= a * Ap
        z = precond * r
        rz_new = r @ z
        if rz_new <= 1e-30:
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x


def bilateral_solve(
    guide: ImageBuffer,
    target: ImageBuffer,
    confidence: ImageBuffer,
    params: BilateralParams,
    grid: BilateralGrid | None = None,
) -> ImageBuffer:
    """Confidence-weighted screened smoothing of a 1-channel target in the
    guide's bilateral space.
    """
    if target.channels != 1 or confidence.channels != 1:
        raise errors.SizeMismatch("target and confidence must be 1-channel")
    if (guide.height, guide.width) != (target.height, target.width) or (
        guide.height,
        guide.width,
    ) != (confidence.height, confidence.width):
        raise errors.SizeMismatch("buffers must share dimensions")
    c = confidence.data[:, :, 0].reshape(-1)
    if not (c > 0).any():
        raise errors.AllZeroConfidence("confidence is identically zero")
    t = target.data[:, :, 0].reshape(-1)
    if grid is None:
        grid = BilateralGrid(guide, params)
    A_smooth = params.smoothness * grid.smoothness_matrix()
    sc = grid.splat(c)
    A_diag = A_smooth.diagonal() + sc
    b = grid.splat(c * t)

    def mv(y):
        return A_smooth @ y + sc * y

    precond = 1.0 / np.maximum(A_diag, 1e-12)
    y = _pcg(mv, b, precond, params.pcg_iterations)
    out = grid.slice(y).reshape(target.height, target.width)
    return ImageBuffer(out)


def bilateral_solve_dense(
    guide: ImageBuffer, target: ImageBuffer, confidence: ImageBuffer, params: BilateralParams
) -> ImageBuffer:
    """Dense pixel-space direct solve of the same screened objective, with
    the explicit bistochastised affinity matrix (test oracle).

    Exactly equivalent to the grid solver when every pixel occupies its own
    grid cell (e.g. spatial_bandwidth = 1).
    """
    grid = BilateralGrid(guide, params)
    c = confidence.data[:, :, 0].reshape(-1)
    t = target.data[:, :, 0].reshape(-1)
    dn = sp.diags(grid.n)
    dm_inv = sp.diags(1.0 / grid.m)
    blur_mat = 2.0 * N_GRID_DIMS * sp.eye(grid.nvertices) + grid.adj
    W = (grid.S.T @ dm_inv @ dn @ blur_mat @ dn @ dm_inv @ grid.S).toarray()
    deg = W.sum(axis=1)
    A = params.smoothness * (np.diag(deg) - W) + np.diag(c)
    x = np.linalg.solve(A, c * t)
    return ImageBuffer(x.reshape(target.height, target.width))


@dataclass
class ResidualSet:
    """Per-target residual inpainting products for the reference view."""

    targets: list  # target view indices
    residuals: list  # inpainted residuals res_t, ImageBuffer RGB
    corrected: list  # target colours I_hat_{r,t}, ImageBuffer RGB


def inpaint_residual(
    i_r: ImageBuffer,
    i_rt: ImageBuffer,
    m_r: MaskBuffer,
    params: BilateralParams,
    grid: BilateralGrid | None = None,
):
    """Bilaterally inpaint the view-substitution residual.

    res_t = solve(guide=I_r, target=I_r - I_{r,t}, conf=(1-M_r)*c_max),
    per channel; returns (res_t, I_hat_{r,t} = clamp(I_r - res_t)).
    """
    if (i_r.height, i_r.width) != (i_rt.height, i_rt.width) or (
        i_r.height,
        i_r.width,
    ) != (m_r.height, m_r.width):
        raise errors.SizeMismatch("buffers must share reference dimensions")
    if grid is None:
        grid = BilateralGrid(i_r, params)
    conf = ImageBuffer(np.where(m_r.data, 0.0, params.c_max))
    delta = i_r.data - i_rt.data
    res = np.empty_like(delta)
    for ch in range(3):
        res[:, :, ch] = bilateral_solve(
            i_r, ImageBuffer(delta[:, :, ch]), conf, params, grid=grid
        ).data[:, :, 0]
    corrected = np.clip(i_r.data - res, 0.0, 1.0)
    return ImageBuffer(res), ImageBuffer(corrected)


@dataclass
class EdgeIslandMask:
    per_target: list  # MaskBuffer per target
    union: MaskBuffer
    c_ei: float
    band_maxima: list  # res_t^max per target


def edge_island_mask(residuals, m_r: MaskBuffer, c_ei: float = 2.0) -> EdgeIslandMask:
    """Detect masked pixels whose inpainted residual is out of distribution
    relative to the residual band just outside the mask.

    Band statistic res_t^max is the max |res_t| over band pixels and all
    channels; a masked pixel joins the island mask when its max-channel
    magnitude exceeds c_ei * res_t^max. The output is the union over targets.
    """
    if c_ei < 1:
        raise ValueError("c_ei must be >= 1")
    if not residuals:
        raise ValueError("residuals must be non-empty")
    band = dilate_mask(m_r, kernel=5, iterations=1).data & ~m_r.data
    if not band.any():
        raise errors.EmptyBand("dilated ring around the mask is empty")
    per_target = []
    maxima = []
    union = np.zeros_like(m_r.data)
    for res in residuals:
        mag = np.abs(res.data).max(axis=2)
        res_max = float(mag[band].max())
        island = m_r.data & (mag > c_ei * res_max)
        per_target.append(MaskBuffer(island))
        maxima.append(res_max)
        union |= island
    return EdgeIslandMask(
        per_target=per_target, union=MaskBuffer(union), c_ei=float(c_ei), band_maxima=maxima
    )
