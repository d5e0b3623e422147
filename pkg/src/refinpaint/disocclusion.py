"""Disocclusion supervision: find masked target-view pixels invisible from
the reference, inpaint the colour render there, and bilaterally in-fill the
disparity render guided by the inpainted colour.
"""

from __future__ import annotations

import subprocess
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import errors
from .core import (
    Camera,
    ImageBuffer,
    MaskBuffer,
    dilate_mask,
    erode_mask,
    load_png,
    project_points,
    rays_for_pixels,
    save_mask_png,
    save_png,
)
from .bilateral import BilateralParams, BilateralGrid, bilateral_solve
from .render import SamplingSpec, render_image

EXTERNAL_TIMEOUT_S = 300.0


@dataclass(frozen=True)
class Inpainter2D:
    """Pluggable 2D colour inpainter.

    kind "builtin-diffusion" solves the Laplace equation inside the mask
    (harmonic infill); "external-command" shells out per the protocol
    `<cmd> <image.png> <mask.png> <out.png>`.
    """

    kind: str = "builtin-diffusion"
    command: str | None = None

    def __post_init__(self):
        if self.kind not in ("builtin-diffusion", "external-command"):
            raise ValueError(f"unknown inpainter kind {self.kind!r}")
        if self.kind == "external-command" and not self.command:
            raise ValueError("external-command inpainter needs a command")


@dataclass
class DisocclusionSet:
    target_indices: list  # indices into the scene's view list
    masks: list  # Gamma_t per target, MaskBuffer
    colors: list  # C_t per target, ImageBuffer RGB
    disparities: list  # D_t per target, ImageBuffer 1ch
    eta_do: float = 0.25

    @property
    def total_pixels(self) -> int:
        return int(sum(m.data.sum() for m in self.masks))


def disocclusion_mask(
    ref_cam: Camera,
    d_r: ImageBuffer,
    target_cam: Camera,
    m_t: MaskBuffer,
    cleanup: str = "open",
) -> MaskBuffer:
    """Masked pixels of the target view receiving no reprojected reference
    pixel when the reference is unprojected at depth 1 / D_r.

    Each reprojected point is splatted to its containing pixel plus the
    4-neighbourhood, preventing speckle holes from sub-pixel quantisation.
    cleanup: "open" (default; 4x erode then 4x dilate with a 3x3 kernel),
    "dilate" (4x dilate), or "none".
    """
    disp = d_r.data[:, :, 0]
    if not np.all(np.isfinite(disp)) or np.any(disp <= 0):
        raise errors.NonPositiveDisparity("reference disparity must be finite and > 0")
    if (m_t.height, m_t.width) != (target_cam.height, target_cam.width):
        raise errors.SizeMismatch("target mask size mismatch")
    h, w = ref_cam.height, ref_cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    origins, dirs = rays_for_pixels(ref_cam, xs.ravel(), ys.ravel(), 0.5, 0.5)
    depth = (1.0 / disp).ravel()
    pts = origins + depth[:, None] * dirs
    u, v, _, in_front = project_points(target_cam, pts)
    th, tw = target_cam.height, target_cam.width
    px = np.floor(u).astype(np.int64)
    py = np.floor(v).astype(np.int64)
    covered = np.zeros((th, tw), dtype=bool)
    for dy, dx in ((0, 0), (0, 1), (0, -1), (1, 0), (-1, 0)):
        qx = px + dx
        qy = py + dy
        ok = in_front & (qx >= 0) & (qx < tw) & (qy >= 0) & (qy < th)
        covered[qy[ok], qx[ok]] = True
    gamma = m_t.data & ~covered
    out = MaskBuffer(gamma)
    if cleanup == "open":
        out = dilate_mask(erode_mask(out, 3, 4), 3, 4)
    elif cleanup == "dilate":
        out = dilate_mask(out, 3, 4)
    elif cleanup != "none":
        raise ValueError(f"unknown cleanup mode {cleanup!r}")
    return MaskBuffer(out.data & m_t.data)


def _harmonic_infill(img: np.ndarray, mask: np.ndarray, tol=1e-6, maxiter=4000) -> np.ndarray:
    """Per-channel Laplace solve inside the mask with Dirichlet boundary from
    unmasked pixels (available neighbours only at image borders).
    """
    h, w = mask.shape
    if mask.all():
        raise errors.MaskCoversEverything("no unmasked boundary pixels")
    if not mask.any():
        return img.copy()
    idx_of = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(mask)
    idx_of[ys, xs] = np.arange(ys.size)
    n = ys.size
    rows, cols, vals = [], [], []
    rhs = np.zeros((n, img.shape[2]))
    diag = np.zeros(n)
    for dy, dx in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        qy, qx = ys + dy, xs + dx
        valid = (qy >= 0) & (qy < h) & (qx >= 0) & (qx < w)
        diag += valid.astype(np.float64)
        inside = valid.copy()
        inside[valid] &= mask[qy[valid], qx[valid]]
        rows.extend(np.nonzero(inside)[0])
        cols.extend(idx_of[qy[inside], qx[inside]])
        vals.extend(-np.ones(int(inside.sum())))
        boundary = valid & ~inside
        rhs[np.nonzero(boundary)[0]] += img[qy[boundary], qx[boundary]]
    A = sp.csr_matrix((vals, (rows, cols)), shape=(n, n)) + sp.diags(diag)
    out = img.copy()
    for ch in range(img.shape[2]):
        x, info = spla.cg(A, rhs[:, ch], rtol=tol, maxiter=maxiter)
        if info != 0:
            x = spla.spsolve(A.tocsc(), rhs[:, ch])
        out[ys, xs, ch] = x
    return out


def inpaint2d(inp: Inpainter2D, image: ImageBuffer, mask: MaskBuffer) -> ImageBuffer:
    """Fill the masked region of an image with the configured inpainter.

    Unmasked pixels are returned unchanged in both modes.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise errors.SizeMismatch("image/mask size mismatch")
    if not mask.data.any():
        return image
    if inp.kind == "builtin-diffusion":
        return ImageBuffer(_harmonic_infill(image.data, mask.data))
    with tempfile.TemporaryDirectory() as td:
        img_p = Path(td) / "image.png"
        msk_p = Path(td) / "mask.png"
        out_p = Path(td) / "out.png"
        save_png(img_p, image)
        save_mask_png(msk_p, mask)
        try:
            proc = subprocess.run(
                [inp.command, str(img_p), str(msk_p), str(out_p)],
                timeout=EXTERNAL_TIMEOUT_S,
                capture_output=True,
            )
        except (OSError, subprocess.TimeoutExpired) as e:
            raise errors.ExternalCommandFailed(str(e)) from e
        if proc.returncode != 0:
            raise errors.ExternalCommandFailed(
                f"{inp.command} exited {proc.returncode}: {proc.stderr[-500:]}"
            )
        if not out_p.exists():
            raise errors.BadExternalOutput("command produced no output file")
        result = load_png(out_p)
        if (result.height, result.width) != (image.height, image.width):
            raise errors.BadExternalOutput("output dimensions differ from input")
    out = np.where(mask.data[:, :, None], result.data[:, :, : image.channels], image.data)
    return ImageBuffer(out)


def select_extreme_targets(cameras, reference_index: int) -> list:
    """Indices of the cameras furthest leftward, rightward, and upward, in
    the reference camera's right/up axes.
    """
    ref = cameras[reference_index]
    right, up = ref.rotation[:, 0], ref.rotation[:, 1]
    offsets = [cam.origin - ref.origin for cam in cameras]
    proj_r = np.array([o @ right for o in offsets])
    proj_u = np.array([o @ up for o in offsets])
    proj_r[reference_index] = 0.0
    proj_u[reference_index] = 0.0
    picks = [int(np.argmin(proj_r)), int(np.argmax(proj_r)), int(np.argmax(proj_u))]
    out = []
    for p in picks:
        if p != reference_index and p not in out:
            out.append(p)
    return out


def build_do_supervision(
    field,
    scene,
    d_r: ImageBuffer,
    inp: Inpainter2D,
    params: BilateralParams | None = None,
    spec: SamplingSpec | None = None,
    cleanup: str = "open",
    target_indices=None,
) -> DisocclusionSet:
    """Build colour/disparity supervision for disoccluded pixels of the
    extreme target cameras (bilateral spatial bandwidth 8 per defaults).
    """
    if params is None:
        params = BilateralParams(spatial_bandwidth=8.0)
    if spec is None:
        spec = SamplingSpec(mode="midpoint")
    if target_indices is None:
        target_indices = select_extreme_targets(scene.cameras, scene.reference_index)
    ref_cam = scene.cameras[scene.reference_index]
    masks, colors, disparities = [], [], []
    for t in target_indices:
        cam = scene.cameras[t]
        gamma = disocclusion_mask(ref_cam, d_r, cam, scene.masks[t], cleanup=cleanup)
        color = render_image(field, cam, mode="color", spec=spec)
        disp = render_image(field, cam, mode="disparity", spec=spec)
        if gamma.data.any():
            color = inpaint2d(inp, color, gamma)
            conf = ImageBuffer(np.where(gamma.data, 0.0, params.c_max))
            grid = BilateralGrid(color, params)
            filled = bilateral_solve(color, disp, conf, params, grid=grid)
            disp = ImageBuffer(np.where(gamma.data, filled.data[:, :, 0], disp.data[:, :, 0]))
        masks.append(gamma)
        colors.append(color)
        disparities.append(disp)
    return DisocclusionSet(
        target_indices=list(target_indices),
        masks=masks,
        colors=colors,
        disparities=disparities,
    )
