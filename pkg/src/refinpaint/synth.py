"""Procedural synthetic scenes with an analytic ray-tracing oracle.

The oracle renders exact nearest-hit intersections with Phong-style shading
(specular lobes create measurable view-dependent effects), and the dataset
generator emits the on-disk layout consumed by load_dataset, including
ground-truth object-free renders and disparities for evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import errors
from .align import coordinate_maps
from .core import (
    Camera,
    ImageBuffer,
    MaskBuffer,
    ScenePackage,
    dilate_mask,
    rays_for_pixels,
    save_dataset,
    save_pfm,
    save_png,
)

DEPTH_INF = np.inf


@dataclass(frozen=True)
class Texture:
    kind: str = "solid"  # solid | checker | gradient
    color_a: tuple = (0.8, 0.8, 0.8)
    color_b: tuple = (0.2, 0.2, 0.2)
    period: float = 1.0  # world units per checker cell pair
    softness: float = 0.0  # 0 = hard edges, 1 = sinusoidal
    axis: int = 0  # gradient axis


@dataclass(frozen=True)
class Primitive:
    kind: str  # plane | sphere | box
    center: tuple = (0.0, 0.0, 0.0)
    size: tuple = (1.0, 1.0, 1.0)  # plane/box half extents; sphere (r,_,_)
    texture: Texture = dc_field(default_factory=Texture)
    specular_strength: float = 0.0
    specular_exponent: float = 8.0


@dataclass(frozen=True)
class CameraRig:
    n_views: int = 20
    width: int = 160
    height: int = 120
    fov_deg: float = 55.0
    radius: float = 1.2  # half-width of the arc in x
    lift: float = 0.35  # vertical amplitude along the arc
    look_at: tuple = (0.0, 0.0, -5.0)
    z: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    removable_object: int
    light_direction: tuple = (0.3, 0.5, 0.8)
    ambient: float = 0.35
    diffuse: float = 0.65
    background_color: tuple = (0.0, 0.0, 0.0)
    rig: CameraRig = dc_field(default_factory=CameraRig)

    def __post_init__(self):
        if self.removable_object is not None and not (
            0 <= self.removable_object < len(self.primitives)
        ):
            raise ValueError("removable_object index out of range")
        l = np.asarray(self.light_direction, dtype=np.float64)
        object.__setattr__(self, "light_direction", tuple(l / np.linalg.norm(l)))


# ---------------------------------------------------------------------------
# intersection


def _intersect_plane(prim, origins, dirs):
    c = np.asarray(prim.center)
    hx, hy = prim.size[0], prim.size[1]
    dz = dirs[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (c[2] - origins[:, 2]) / dz
    pts = origins + t[:, None] * dirs
    hit = (
        (np.abs(dz) > 1e-12)
        & (t > 1e-6)
        & (np.abs(pts[:, 0] - c[0]) <= hx)
        & (np.abs(pts[:, 1] - c[1]) <= hy)
    )
    normals = np.zeros_like(dirs)
    normals[:, 2] = 1.0
    return np.where(hit, t, DEPTH_INF), normals


def _intersect_sphere(prim, origins, dirs):
    c = np.asarray(prim.center)
    r = prim.size[0]
    oc = origins - c
    b = np.einsum("ij,ij->i", oc, dirs)
    disc = b * b - (np.einsum("ij,ij->i", oc, oc) - r * r)
    ok = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = -b - sq
    t1 = -b + sq
    t = np.where(t0 > 1e-6, t0, t1)
    hit = ok & (t > 1e-6)
    t = np.where(hit, t, DEPTH_INF)
    pts = origins + t[:, None] * dirs
    normals = pts - c
    with np.errstate(invalid="ignore"):
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return t, np.nan_to_num(normals)


def _intersect_box(prim, origins, dirs):
    c = np.asarray(prim.center)
    h = np.asarray(prim.size)
    lo, hi = c - h, c + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None] - origins) * inv
        t1 = (hi[None] - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    axis = np.argmax(tmin, axis=1)
    tn = np.nanmax(tmin, axis=1)
    tf = np.nanmin(tmax, axis=1)
    hit = (tf >= tn) & (tn > 1e-6)
    t = np.where(hit, tn, DEPTH_INF)
    pts = origins + t[:, None] * dirs
    normals = np.zeros_like(dirs)
    rows = np.arange(dirs.shape[0])
    normals[rows, axis] = np.sign(pts[rows, axis] - c[axis])
    return t, normals


_INTERSECT = {"plane": _intersect_plane, "sphere": _intersect_sphere, "box": _intersect_box}


def _albedo(prim: Primitive, pts):
    tex = prim.texture
    a = np.asarray(tex.color_a)
    b = np.asarray(tex.color_b)
    if tex.kind == "solid":
        return np.broadcast_to(a, pts.shape).copy()
    if tex.kind == "gradient":
        lo = prim.center[tex.axis] - prim.size[tex.axis]
        span = 2.0 * prim.size[tex.axis] if prim.size[tex.axis] > 0 else 1.0
        f = np.clip((pts[:, tex.axis] - lo) / span, 0.0, 1.0)
        return a[None] * (1 - f[:, None]) + b[None] * f[:, None]
    if tex.kind == "checker":
        # smooth square waves in x and y; softness interpolates between a
        # hard checkerboard and a sinusoidal plaid
        def wave(u):
            s = np.sin(2.0 * np.pi * u / tex.period)
            if tex.softness < 1e-6:
                return (s >= 0).astype(np.float64)
            return 0.5 + 0.5 * np.clip(s / max(tex.softness, 1e-6), -1.0, 1.0)

        wx, wy = wave(pts[:, 0]), wave(pts[:, 1])
        f = wx * wy + (1 - wx) * (1 - wy)
        return a[None] * f[:, None] + b[None] * (1 - f[:, None])
    raise ValueError(f"unknown texture kind {tex.kind!r}")


def _shade(spec: SceneSpec, prim: Primitive, pts, normals, view_dirs):
    l = np.asarray(spec.light_direction)
    n = normals * np.sign(np.einsum("ij,ij->i", normals, view_dirs))[:, None]
    ndotl = np.abs(n @ l)
    albedo = _albedo(prim, pts)
    color = albedo * (spec.ambient + spec.diffuse * ndotl[:, None])
    if prim.specular_strength > 0:
        refl = 2.0 * (n @ l)[:, None] * n - l[None]
        spec_term = np.clip(np.einsum("ij,ij->i", refl, view_dirs), 0.0, 1.0)
        color = color + prim.specular_strength * (spec_term ** prim.specular_exponent)[:, None]
    return np.clip(color, 0.0, 1.0)


def oracle_render(spec: SceneSpec, camera: Camera, include_removable: bool = True):
    """Exact nearest-hit render. Returns (color, depth, hit_object_id).

    depth is the ray parameter t (+inf where nothing is hit); hit ids are
    primitive indices, -1 for the background.
    """
    h, w = camera.height, camera.width
    ys, xs = np.mgrid[0:h, 0:w]
    origins, dirs = rays_for_pixels(camera, xs.ravel(), ys.ravel(), 0.5, 0.5)
    n = origins.shape[0]
    best_t = np.full(n, DEPTH_INF)
    best_id = np.full(n, -1, dtype=np.int64)
    best_normals = np.zeros((n, 3))
    for pid, prim in enumerate(spec.primitives):
        if pid == spec.removable_object and not include_removable:
            continue
        t, normals = _INTERSECT[prim.kind](prim, origins, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_id = np.where(closer, pid, best_id)
        best_normals = np.where(closer[:, None], normals, best_normals)
    color = np.broadcast_to(np.asarray(spec.background_color), (n, 3)).copy()
    for pid, prim in enumerate(spec.primitives):
        sel = best_id == pid
        if not sel.any():
            continue
        pts = origins[sel] + best_t[sel, None] * dirs[sel]
        color[sel] = _shade(spec, prim, pts, best_normals[sel], -dirs[sel])
    return (
        ImageBuffer(color.reshape(h, w, 3)),
        ImageBuffer(best_t.reshape(h, w)),
        best_id.reshape(h, w),
    )


# ---------------------------------------------------------------------------
# camera rig


def look_at_camera(position, target, width, height, fov_deg, up=(0.0, 1.0, 0.0)) -> Camera:
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    upv = np.cross(right, fwd)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = upv
    c2w[:3, 2] = -fwd
    c2w[:3, 3] = position
    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(
        width=width,
        height=height,
        fx=fx,
        fy=fx,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        c2w=c2w,
    )


def rig_cameras(rig: CameraRig) -> list:
    """Forward-facing arc of cameras, all looking at rig.look_at."""
    cams = []
    for i in range(rig.n_views):
        s = (i / max(rig.n_views - 1, 1)) * 2.0 - 1.0  # -1 .. 1
        x = rig.radius * s
        y = rig.lift * math.sin(math.pi * s)
        pos = (x, y, rig.z)
        cams.append(look_at_camera(pos, rig.look_at, rig.width, rig.height, rig.fov_deg))
    return cams


def scene_bounds(spec: SceneSpec, pad: float = 0.4):
    """Union AABB of all primitives, padded."""
    los, his = [], []
    for prim in spec.primitives:
        c = np.asarray(prim.center)
        if prim.kind == "sphere":
            h = np.full(3, prim.size[0])
        elif prim.kind == "plane":
            h = np.array([prim.size[0], prim.size[1], 1e-3])
        else:
            h = np.asarray(prim.size)
        los.append(c - h)
        his.append(c + h)
    return np.min(los, axis=0) - pad, np.max(his, axis=0) + pad


def build_scene_package(
    spec: SceneSpec,
    reference_index: int | None = None,
    disparity_warp=(1.7, -0.3, 0.05, -0.02),
) -> ScenePackage:
    """Render the dataset in memory.

    Images include the removable object; masks are its silhouettes; the
    reference 'inpainted' image is the oracle's object-free render; the
    predicted reference disparity is the object-free oracle disparity pushed
    through the inverse of an affine+tilt warp (a0, a1, a2, a3), so the
    alignment stage must recover exactly those coefficients.
    """
    cams = rig_cameras(spec.rig)
    if reference_index is None:
        reference_index = len(cams) // 2
    images, masks = [], []
    for cam in cams:
        color, _, hit = oracle_render(spec, cam, include_removable=True)
        images.append(color)
        silhouette = MaskBuffer(hit == spec.removable_object)
        masks.append(dilate_mask(silhouette, kernel=5, iterations=5))
    ref_cam = cams[reference_index]
    ref_color, ref_depth, _ = oracle_render(spec, ref_cam, include_removable=False)
    depth = ref_depth.data[:, :, 0]
    if not np.isfinite(depth).all():
        raise errors.IoError("object-free reference render has uncovered pixels")
    disp_gt = 1.0 / depth
    a0, a1, a2, a3 = disparity_warp
    hmap, vmap = coordinate_maps(*depth.shape)
    disp_pred = (disp_gt - a1 - a2 * hmap - a3 * vmap) / a0
    return ScenePackage(
        cameras=cams,
        images=images,
        masks=masks,
        reference_index=reference_index,
        reference_inpainted=ref_color,
        reference_pred_disparity=ImageBuffer(disp_pred),
        scene_bounds=scene_bounds(spec),
    )


def generate_dataset(spec: SceneSpec, out, seed: int = 0, reference_index=None):
    """Write the dataset directory plus gt/ and gt_disparity/ oracles."""
    try:
        pkg = build_scene_package(spec, reference_index=reference_index)
        root = Path(out)
        save_dataset(root, pkg)
        gt_dir = root / "gt"
        gtd_dir = root / "gt_disparity"
        gt_dir.mkdir(exist_ok=True)
        gtd_dir.mkdir(exist_ok=True)
        for i, cam in enumerate(pkg.cameras):
            color, depth, _ = oracle_render(spec, cam, include_removable=False)
            save_png(gt_dir / f"view_{i:03d}.png", color)
            save_pfm(gtd_dir / f"view_{i:03d}.pfm", ImageBuffer(1.0 / depth.data[:, :, 0]))
    except OSError as e:
        raise errors.IoError(str(e)) from e
    return pkg


def demo_scene(
    n_views: int = 20,
    width: int = 160,
    height: int = 120,
    soft_checker: float = 0.8,
    specular: float = 0.15,
    checker_period: float = 1.6,
) -> SceneSpec:
    """Removable box in front of a specular checkered background plane."""
    background = Primitive(
        kind="plane",
        center=(0.0, 0.0, -6.0),
        size=(4.8, 3.8, 0.0),
        texture=Texture(
            kind="checker",
            color_a=(0.85, 0.55, 0.25),
            color_b=(0.2, 0.35, 0.6),
            period=checker_period,
            softness=soft_checker,
        ),
        specular_strength=specular,
        specular_exponent=4.0,
    )
    # Static shelf between the removable box and the background.  Its
    # silhouette stays inside the (dilated) box silhouette from every rig
    # camera, so it is only ever observed through the inpainting pipeline,
    # and its depth edge against the background produces genuine
    # disocclusion bands between views.
    shelf = Primitive(
        kind="box",
        center=(0.1, -0.1, -5.0),
        size=(0.28, 0.5, 0.05),
        texture=Texture(kind="solid", color_a=(0.55, 0.5, 0.45)),
        specular_strength=0.0,
    )
    box = Primitive(
        kind="box",
        center=(0.1, -0.1, -4.2),
        size=(0.45, 0.55, 0.35),
        texture=Texture(kind="solid", color_a=(0.75, 0.15, 0.15)),
        specular_strength=0.0,
    )
    rig = CameraRig(n_views=n_views, width=width, height=height)
    return SceneSpec(primitives=(background, shelf, box), removable_object=2, rig=rig)
