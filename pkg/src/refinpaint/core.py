"""Dataset model, camera geometry, image/mask buffers and on-disk formats.

Conventions (fixed for the whole package):
  * cameras are right-handed, looking along -z, x right, y up;
  * image row 0 is the top row; the principal axis passes through the
    *centre* of pixel (cx, cy), i.e. continuous image coordinate cx + 0.5;
  * a ray for integer pixel p with jitter j in [0,1)^2 passes through the
    continuous coordinate p + j.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import errors

# ---------------------------------------------------------------------------
# buffers


@dataclass(frozen=True)
class ImageBuffer:
    """Row-major float image, (H, W, C) with C in {1, 3}.

    Colour data lives in linear [0,1]; disparity buffers are unbounded.
    """

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise errors.DimensionMismatch(f"bad image shape {d.shape}")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class MaskBuffer:
    """Boolean (H, W) mask; True marks the masked / unwanted region."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise errors.DimensionMismatch(f"bad mask shape {d.shape}")
        object.__setattr__(self, "data", d > 0.5 if d.dtype != bool else d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # 4x4 camera-to-world, row-major

    def __post_init__(self):
        m = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        object.__setattr__(self, "c2w", m)
        r = m[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise errors.BadCameraMatrix("rotation block not orthonormal")
        if not (self.fx > 0 and self.fy > 0):
            raise errors.BadCameraMatrix("non-positive focal length")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise errors.BadCameraMatrix("principal point outside image")

    @property
    def origin(self) -> np.ndarray:
        return self.c2w[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray  # unit
    t_near: float = 1e-3
    t_far: float = 1e6

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise errors.NonUnitDirection("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise errors.DegenerateRay("t_near >= t_far")


@dataclass(frozen=True)
class ScenePackage:
    cameras: list
    images: list
    masks: list
    reference_index: int
    reference_inpainted: ImageBuffer
    reference_pred_disparity: ImageBuffer
    scene_bounds: tuple  # (min3, max3) arrays

    def __post_init__(self):
        n = len(self.cameras)
        if not (n >= 2 and len(self.images) == n and len(self.masks) == n):
            raise errors.BadManifest("view lists must share length n >= 2")
        if not (0 <= self.reference_index < n):
            raise errors.BadManifest("reference_index out of range")
        cam = self.cameras[self.reference_index]
        for buf in (self.reference_inpainted, self.reference_pred_disparity):
            if (buf.height, buf.width) != (cam.height, cam.width):
                raise errors.DimensionMismatch("reference buffer size mismatch")
        for cam, img, msk in zip(self.cameras, self.images, self.masks):
            if (img.height, img.width) != (cam.height, cam.width):
                raise errors.DimensionMismatch("image size mismatch")
            if (msk.height, msk.width) != (cam.height, cam.width):
                raise errors.DimensionMismatch("mask size mismatch")
        lo, hi = self.scene_bounds
        object.__setattr__(
            self,
            "scene_bounds",
            (np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)),
        )

    @property
    def n(self) -> int:
        return len(self.cameras)


# ---------------------------------------------------------------------------
# camera geometry


def ray_for_pixel(camera: Camera, px, jitter=(0.5, 0.5), t_near=1e-3, t_far=1e6) -> Ray:
    """Ray through continuous image coordinate px + jitter."""
    x, y = float(px[0]), float(px[1])
    if not (0 <= x < camera.width and 0 <= y < camera.height):
        raise errors.OutOfBounds(f"pixel {px} out of bounds")
    u = x + jitter[0] - (camera.cx + 0.5)
    v = y + jitter[1] - (camera.cy + 0.5)
    d_cam = np.array([u / camera.fx, -v / camera.fy, -1.0])
    d = camera.rotation @ d_cam
    d /= np.linalg.norm(d)
    return Ray(camera.origin.copy(), d, t_near, t_far)


def rays_for_pixels(camera: Camera, xs, ys, jitter_x, jitter_y):
    """Vectorised ray bundle; returns (origins (n,3), unit directions (n,3))."""
    u = np.asarray(xs, dtype=np.float64) + jitter_x - (camera.cx + 0.5)
    v = np.asarray(ys, dtype=np.float64) + jitter_y - (camera.cy + 0.5)
    d_cam = np.stack([u / camera.fx, -v / camera.fy, -np.ones_like(u)], axis=-1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.origin, d.shape).copy()
    return o, d


def project(camera: Camera, x) -> tuple:
    """Project a world point; returns ((u, v) continuous pixel coords, ray depth t).

    u, v are in the same continuous convention as ray_for_pixel: the ray
    through pixel floor(u), floor(v) with jitter frac passes through x.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = camera.rotation.T @ (x - camera.origin)
    if xc[2] >= -1e-12:
        raise errors.BehindCamera("point not in front of camera")
    z = -xc[2]
    u = camera.fx * xc[0] / z + camera.cx + 0.5
    v = -camera.fy * xc[1] / z + camera.cy + 0.5
    t = float(np.linalg.norm(x - camera.origin))
    return (u, v), t


def project_points(camera: Camera, pts):
    """Vectorised projection. Returns (u, v, t, in_front) arrays."""
    pts = np.asarray(pts, dtype=np.float64)
    xc = (pts - camera.origin) @ camera.rotation
    z = -xc[:, 2]
    in_front = z > 1e-12
    zs = np.where(in_front, z, 1.0)
    u = camera.fx * xc[:, 0] / zs + camera.cx + 0.5
    v = -camera.fy * xc[:, 1] / zs + camera.cy + 0.5
    t = np.linalg.norm(pts - camera.origin, axis=1)
    return u, v, t, in_front


def intersect_aabb(origins, dirs, lo, hi, t_min=1e-3, t_max=1e6):
    """Per-ray entry/exit parameters against an axis-aligned box.

    Returns (t_near, t_far, hit). Rays missing the box get hit = False.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo[None, :] - origins) * inv
        t1 = (hi[None, :] - origins) * inv
    tn = np.nanmax(np.minimum(t0, t1), axis=1)
    tf = np.nanmin(np.maximum(t0, t1), axis=1)
    tn = np.maximum(tn, t_min)
    tf = np.minimum(tf, t_max)
    hit = tf > tn
    return tn, tf, hit


# ---------------------------------------------------------------------------
# morphology


def dilate_mask(mask: MaskBuffer, kernel: int = 5, iterations: int = 5) -> MaskBuffer:
    """Morphological dilation with a square structuring element."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    m = mask.data
    r = kernel // 2
    for _ in range(iterations):
        if not m.any():
            break
        acc = np.zeros_like(m)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                acc |= _shift(m, dy, dx)
        m = acc
    return MaskBuffer(m)


def erode_mask(mask: MaskBuffer, kernel: int = 3, iterations: int = 1) -> MaskBuffer:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError("kernel must be odd and >= 1")
    m = mask.data
    r = kernel // 2
    for _ in range(iterations):
        acc = np.ones_like(m)
        for dy in range(-r, r + 1):
            for dx in range(-r, r + 1):
                acc &= _shift(m, dy, dx, fill=False)
        m = acc
    return MaskBuffer(m)


def _shift(m, dy, dx, fill=False):
    """out[y, x] = m[y - dy, x - dx], padding with `fill`."""
    out = np.full_like(m, fill)
    h, w = m.shape
    yd0, yd1 = max(0, dy), min(h, h + dy)
    xd0, xd1 = max(0, dx), min(w, w + dx)
    if yd0 < yd1 and xd0 < xd1:
        out[yd0:yd1, xd0:xd1] = m[yd0 - dy : yd1 - dy, xd0 - dx : xd1 - dx]
    return out


# ---------------------------------------------------------------------------
# pixel formats


_SRGB_A = 0.055


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + _SRGB_A) / (1 + _SRGB_A)) ** 2.4)


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, (1 + _SRGB_A) * x ** (1 / 2.4) - _SRGB_A)


def load_png(path) -> ImageBuffer:
    """8-bit PNG -> linear [0,1] image (sRGB decoded for colour)."""
    p = Path(path)
    if not p.exists():
        raise errors.MissingFile(str(p))
    img = Image.open(p)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.ndim == 3:
        arr = srgb_to_linear(arr)
    return ImageBuffer(arr)


def save_png(path, img: ImageBuffer):
    """Linear [0,1] image -> 8-bit PNG (sRGB encoded for colour)."""
    arr = img.data
    if arr.shape[2] == 3:
        arr = linear_to_srgb(arr)
    else:
        arr = np.clip(arr[:, :, 0], 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(Path(path))


def load_mask_png(path) -> MaskBuffer:
    p = Path(path)
    if not p.exists():
        raise errors.MissingFile(str(p))
    arr = np.asarray(Image.open(p).convert("L"), dtype=np.float64) / 255.0
    return MaskBuffer(arr > 0.5)


def save_mask_png(path, mask: MaskBuffer):
    u8 = np.where(mask.data, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(Path(path))


def load_pfm(path) -> ImageBuffer:
    """Single-channel PFM, little-endian float32, bottom-up scanlines."""
    p = Path(path)
    if not p.exists():
        raise errors.MissingFile(str(p))
    with open(p, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise errors.BadManifest(f"{p}: not a 1-channel PFM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    arr = data.reshape(h, w)[::-1, :].astype(np.float64)  # bottom-up -> top-down
    return ImageBuffer(arr)


def save_pfm(path, img: ImageBuffer):
    if img.channels != 1:
        raise errors.DimensionMismatch("PFM writer expects 1 channel")
    arr = img.data[:, :, 0].astype("<f4")[::-1, :]  # top-down -> bottom-up
    with open(Path(path), "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{img.width} {img.height}\n".encode())
        f.write(b"-1.0\n")
        f.write(arr.tobytes())


# ---------------------------------------------------------------------------
# dataset directory


def load_dataset(path, dilate_kernel: int = 5, dilate_iterations: int = 5) -> ScenePackage:
    """Load a dataset directory (see save_dataset for the layout).

    Masks are dilated once here, so every downstream consumer sees the same
    mask set.
    """
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise errors.MissingFile(str(mpath))
    try:
        manifest = json.loads(mpath.read_text())
        views = manifest["views"]
        ref = manifest["reference"]
        bounds = manifest["bounds"]
    except (json.JSONDecodeError, KeyError) as e:
        raise errors.BadManifest(f"{mpath}: {e}") from e

    cameras, images, masks = [], [], []
    for view in views:
        c = view["camera"]
        cameras.append(
            Camera(
                width=int(c["width"]),
                height=int(c["height"]),
                fx=float(c["fx"]),
                fy=float(c["fy"]),
                cx=float(c["cx"]),
                cy=float(c["cy"]),
                c2w=np.array(c["c2w"], dtype=np.float64).reshape(4, 4),
            )
        )
        images.append(load_png(root / view["image"]))
        mask = load_mask_png(root / view["mask"])
        if dilate_iterations > 0:
            mask = dilate_mask(mask, dilate_kernel, dilate_iterations)
        masks.append(mask)

    pkg = ScenePackage(
        cameras=cameras,
        images=images,
        masks=masks,
        reference_index=int(ref["index"]),
        reference_inpainted=load_png(root / ref["inpainted"]),
        reference_pred_disparity=load_pfm(root / ref["disparity"]),
        scene_bounds=(np.array(bounds["min"]), np.array(bounds["max"])),
    )
    return pkg


def save_dataset(path, pkg: ScenePackage):
    """Write a dataset directory with a canonical (sorted-key) manifest."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    views = []
    for i, (cam, img, msk) in enumerate(zip(pkg.cameras, pkg.images, pkg.masks)):
        img_name = f"image_{i:03d}.png"
        msk_name = f"mask_{i:03d}.png"
        save_png(root / img_name, img)
        save_mask_png(root / msk_name, msk)
        views.append(
            {
                "camera": {
                    "c2w": [float(v) for v in cam.c2w.reshape(-1)],
                    "cx": cam.cx,
                    "cy": cam.cy,
                    "fx": cam.fx,
                    "fy": cam.fy,
                    "height": cam.height,
                    "width": cam.width,
                },
                "image": img_name,
                "mask": msk_name,
            }
        )
    save_png(root / "reference_inpainted.png", pkg.reference_inpainted)
    save_pfm(root / "reference_disparity.pfm", pkg.reference_pred_disparity)
    manifest = {
        "bounds": {
            "max": [float(v) for v in pkg.scene_bounds[1]],
            "min": [float(v) for v in pkg.scene_bounds[0]],
        },
        "reference": {
            "disparity": "reference_disparity.pfm",
            "index": pkg.reference_index,
            "inpainted": "reference_inpainted.png",
        },
        "views": views,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
