"""Align predicted monocular disparity to the field's rendered disparity
(weighted scale / offset / tilt fit) and smooth it at the mask boundary.

Pixel coordinates in the tilt columns are normalised to [0, 1] (divide by
W-1 and H-1) so the 4x4 normal system stays well conditioned; the tilt
coefficients are therefore reported in normalised units.

Rendered-disparity pixels with value <= 0 (empty rays under the renderer's
guarded definition) are excluded from both the alignment sum and the
smoothing data term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import errors
from .core import ImageBuffer, MaskBuffer

COND_LIMIT = 1e12
COM_EPS = 1.0  # pixel floor on distance to the mask centre of mass


@dataclass(frozen=True)
class WeightMap:
    weights: ImageBuffer

    def __post_init__(self):
        if not (self.weights.data > 0).all():
            raise ValueError("weights must be positive")


@dataclass(frozen=True)
class AlignmentSolution:
    a0: float  # scale
    a1: float  # offset
    a2: float  # x tilt (normalised coords)
    a3: float  # y tilt (normalised coords)
    aligned: ImageBuffer
    condition_number: float


@dataclass(frozen=True)
class SmoothedDisparity:
    correction: ImageBuffer
    smoothed: ImageBuffer
    gamma_smooth: float
    residual_norm: float


def coordinate_maps(height: int, width: int):
    """Normalised horizontal/vertical coordinate images (the tilt columns)."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return xs / max(width - 1, 1), ys / max(height - 1, 1)


def mask_weights(mask: MaskBuffer) -> WeightMap:
    """w(p) = 1 / max(||p - mask centre of mass||, 1 px) over the image."""
    m = mask.data
    if not m.any():
        raise errors.EmptyMask("mask has no true pixels")
    ys, xs = np.nonzero(m)
    com = np.array([xs.mean(), ys.mean()])
    gy, gx = np.mgrid[0 : m.shape[0], 0 : m.shape[1]].astype(np.float64)
    dist = np.hypot(gx - com[0], gy - com[1])
    w = 1.0 / np.maximum(dist, COM_EPS)
    return WeightMap(ImageBuffer(w))


def align_disparity(
    d_tilde: ImageBuffer,
    d_hat: ImageBuffer,
    mask: MaskBuffer,
    weights: WeightMap,
) -> AlignmentSolution:
    """Weighted least-squares fit of a0*D~ + a1 + a2*H + a3*V to D^ over the
    unmasked, valid pixels; the aligned buffer is materialised everywhere.
    """
    dt = d_tilde.data[:, :, 0]
    dh = d_hat.data[:, :, 0]
    if dt.shape != dh.shape or dt.shape != mask.data.shape:
        raise errors.SizeMismatch("alignment buffers must share dimensions")
    hmap, vmap = coordinate_maps(*dt.shape)
    use = (~mask.data) & (dh > 0)
    if use.sum() < 4:
        raise errors.RankDeficient("fewer than 4 usable pixels")
    w = weights.weights.data[:, :, 0][use]
    cols = np.stack([dt[use], np.ones(use.sum()), hmap[use], vmap[use]], axis=1)
    y = dh[use]
    ata = cols.T @ (cols * w[:, None])
    # conditioning is judged on the normal matrix so exact collinearity (e.g.
    # a constant input disparity) is always rejected before solving.
    cond = float(np.linalg.cond(ata))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise errors.RankDeficient(f"normal system condition {cond:.3e}")
    sw = np.sqrt(w)
    a, _, _, _ = np.linalg.lstsq(cols * sw[:, None], y * sw, rcond=None)
    aligned = a[0] * dt + a[1] + a[2] * hmap + a[3] * vmap
    return AlignmentSolution(
        a0=float(a[0]),
        a1=float(a[1]),
        a2=float(a[2]),
        a3=float(a[3]),
        aligned=ImageBuffer(aligned),
        condition_number=cond,
    )


def smoothing_system(shape, data_weight, gamma_smooth):
    """Sparse SPD system for the boundary-smoothing quadratic.

    Objective over the correction image c:
        sum_p u(p) * (c(p) - b(p))^2
      + gamma * sum_p sum_{p' in N4(p)} (c(p) - c(p'))^2
    Normal equations: (diag(u) + 2*gamma*L) c = u .* b, with L the 4-neighbour
    graph Laplacian (each undirected edge counted twice by the double sum).
    """
    h, w = shape
    n = h * w
    u = data_weight.reshape(-1)
    idx = np.arange(n).reshape(h, w)
    rows, cols = [], []
    for (dy, dx) in ((0, 1), (1, 0)):
        a = idx[: h - dy, : w - dx].reshape(-1)
        b = idx[dy:, dx:].reshape(-1)
        rows.append(a)
        cols.append(b)
    a = np.concatenate(rows)
    b = np.concatenate(cols)
    data = np.ones(a.size)
    adj = sp.coo_matrix((data, (a, b)), shape=(n, n))
    adj = adj + adj.T
    lap = sp.diags(np.asarray(adj.sum(axis=1)).ravel()) - adj
    return (sp.diags(u) + 2.0 * gamma_smooth * lap).tocsr()


def smooth_disparity(
    aligned: ImageBuffer,
    d_hat: ImageBuffer,
    mask: MaskBuffer,
    gamma_smooth: float,
    cg_tol: float = 1e-6,
    cg_maxiter: int = 2000,
) -> SmoothedDisparity:
    """Solve for the smoothed correction D_smooth = aligned + correction."""
    if gamma_smooth <= 0:
        raise ValueError("gamma_smooth must be > 0")
    al = aligned.data[:, :, 0]
    dh = d_hat.data[:, :, 0]
    if al.shape != dh.shape or al.shape != mask.data.shape:
        raise errors.SizeMismatch("smoothing buffers must share dimensions")
    data_pix = (~mask.data) & (dh > 0)
    if not data_pix.any():
        raise errors.EmptyMask("no unmasked valid pixels to pin the correction")
    u = data_pix.astype(np.float64)
    b = np.where(data_pix, dh - al, 0.0)
    A = smoothing_system(al.shape, u, gamma_smooth)
    rhs = (u * b).reshape(-1)
    x, info = spla.cg(A, rhs, rtol=cg_tol, maxiter=cg_maxiter)
    res = float(np.linalg.norm(A @ x - rhs))
    rhs_norm = float(np.linalg.norm(rhs))
    if info != 0 and res > cg_tol * max(rhs_norm, 1.0) * 10.0:
        raise errors.SolverDiverged(f"CG residual {res:.3e} after {cg_maxiter} iterations")
    corr = x.reshape(al.shape)
    return SmoothedDisparity(
        correction=ImageBuffer(corr),
        smoothed=ImageBuffer(al + corr),
        gamma_smooth=float(gamma_smooth),
        residual_norm=res,
    )


def smooth_disparity_dense(aligned, d_hat, mask, gamma_smooth):
    """Dense direct solve of the same quadratic (oracle for tests)."""
    al = aligned.data[:, :, 0]
    dh = d_hat.data[:, :, 0]
    data_pix = (~mask.data) & (dh > 0)
    u = data_pix.astype(np.float64)
    b = np.where(data_pix, dh - al, 0.0)
    A = smoothing_system(al.shape, u, gamma_smooth).toarray()
    x = np.linalg.solve(A, (u * b).reshape(-1))
    corr = x.reshape(al.shape)
    return SmoothedDisparity(
        correction=ImageBuffer(corr),
        smoothed=ImageBuffer(al + corr),
        gamma_smooth=float(gamma_smooth),
        residual_norm=0.0,
    )
