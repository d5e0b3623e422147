"""Command-line entry points (synth / fit / render / eval) and the image
metrics used for evaluation: region PSNR, Laplacian-variance sharpness, and
expanded-bounding-box regions.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import errors
from .core import (
    Camera,
    ImageBuffer,
    MaskBuffer,
    load_dataset,
    save_pfm,
    save_png,
)
from .disocclusion import Inpainter2D
from .field import VoxelRadianceField
from .render import SamplingSpec, render_image
from .synth import demo_scene, generate_dataset
from .trainer import TrainConfig, fit

PSNR_IDENTICAL = float("inf")  # sentinel returned when the images match exactly


# ---------------------------------------------------------------------------
# metrics


def metric_psnr(a: ImageBuffer, b: ImageBuffer, region: MaskBuffer) -> float:
    """10*log10(1/MSE) over the region; +inf when the images agree exactly."""
    if a.data.shape != b.data.shape or a.height != region.height or a.width != region.width:
        raise errors.DimensionMismatch("psnr inputs must share dimensions")
    sel = region.data
    if not sel.any():
        raise errors.EmptyRegion("psnr region is empty")
    diff = a.data[sel] - b.data[sel]
    mse = float((diff**2).mean())
    if mse == 0.0:
        return PSNR_IDENTICAL
    return 10.0 * math.log10(1.0 / mse)


def metric_sharpness(img: ImageBuffer, region: MaskBuffer) -> float:
    """Variance of the 4-neighbour Laplacian of the grayscale image over the
    region. Invariant to brightness offsets; scales with contrast squared.
    """
    if img.height != region.height or img.width != region.width:
        raise errors.DimensionMismatch("sharpness inputs must share dimensions")
    if int(region.data.sum()) < 9:
        raise errors.EmptyRegion("sharpness region must cover at least 9 pixels")
    gray = img.data.mean(axis=2) if img.channels == 3 else img.data[:, :, 0]
    # replicate-padded 4-neighbour Laplacian [0,1,0;1,-4,1;0,1,0]
    p = np.pad(gray, 1, mode="edge")
    lap = p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * gray
    return float(lap[region.data].var())


def metric_region(mask: MaskBuffer, expand: float = 0.10) -> MaskBuffer:
    """Tight bounding box of the mask, each side grown by `expand` of its
    length (rounded outward) and clipped to the image.
    """
    ys, xs = np.nonzero(mask.data)
    if ys.size == 0:
        raise errors.EmptyMask("cannot take bounding box of an empty mask")
    y0, y1 = int(ys.min()), int(ys.max())
    x0, x1 = int(xs.min()), int(xs.max())
    dy = expand * (y1 - y0 + 1)
    dx = expand * (x1 - x0 + 1)
    y0 = max(0, math.floor(y0 - dy))
    x0 = max(0, math.floor(x0 - dx))
    y1 = min(mask.height - 1, math.ceil(y1 + dy))
    x1 = min(mask.width - 1, math.ceil(x1 + dx))
    out = np.zeros((mask.height, mask.width), dtype=bool)
    out[y0 : y1 + 1, x0 : x1 + 1] = True
    return MaskBuffer(out)


# ---------------------------------------------------------------------------
# subcommands


def _spiral_cameras(cameras, k, bounds):
    """k poses interpolated along the dataset camera path, with a small
    spiral offset, all looking at the scene-bounds centre.
    """
    origins = np.stack([c.origin for c in cameras])
    ups = np.stack([c.rotation[:, 1] for c in cameras])  # camera up axis in world
    center = 0.5 * (np.asarray(bounds[0]) + np.asarray(bounds[1]))
    extent = float(np.linalg.norm(np.asarray(bounds[1]) - np.asarray(bounds[0])))
    base = cameras[0]
    out = []
    n_seg = len(cameras) - 1
    for i in range(k):
        u = i / max(k - 1, 1)
        f = u * n_seg
        j = min(int(f), n_seg - 1)
        a = f - j
        pos = (1 - a) * origins[j] + a * origins[j + 1]
        up = (1 - a) * ups[j] + a * ups[j + 1]
        up = up / np.linalg.norm(up)
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        pos = pos + 0.02 * extent * (math.cos(4 * math.pi * u) * right + math.sin(4 * math.pi * u) * up)
        fwd = center - pos
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        upv = np.cross(right, fwd)
        c2w = np.eye(4)
        c2w[:3, 0] = right
        c2w[:3, 1] = upv
        c2w[:3, 2] = -fwd
        c2w[:3, 3] = pos
        out.append(
            Camera(
                width=base.width,
                height=base.height,
                fx=base.fx,
                fy=base.fy,
                cx=base.cx,
                cy=base.cy,
                c2w=c2w,
            )
        )
    return out


def cmd_synth(args) -> int:
    generate_dataset(demo_scene(), Path(args.out), seed=args.seed)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_fit(args) -> int:
    dataset = Path(args.dataset)
    if not dataset.exists():
        print(f"error: dataset not found: {dataset}", file=sys.stderr)
        return 2
    scene = load_dataset(dataset)
    config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    inpainter = Inpainter2D(kind="external-command", command=args.inpaint_command) \
        if args.inpaint_command else Inpainter2D()
    fit(scene, config, inpainter, out_dir=args.out)
    print(f"finished {config.total_iterations} iterations; checkpoints in {args.out}")
    return 0


def cmd_render(args) -> int:
    field = VoxelRadianceField.load(args.ckpt)
    scene = load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = SamplingSpec(n_samples=args.n_samples)
    target_origin = None
    if args.mode == "viewsub":
        if args.target is None:
            raise errors.BadViewIndex("viewsub mode requires --target")
        if not 0 <= args.target < scene.n:
            raise errors.BadViewIndex(f"target {args.target} out of range 0..{scene.n - 1}")
        target_origin = scene.cameras[args.target].origin
    if args.view.startswith("spiral:"):
        k = int(args.view.split(":", 1)[1])
        cams = _spiral_cameras(scene.cameras, k, scene.scene_bounds)
    else:
        i = int(args.view)
        if not 0 <= i < scene.n:
            raise errors.BadViewIndex(f"view {i} out of range 0..{scene.n - 1}")
        cams = [scene.cameras[i]]
    for i, cam in enumerate(cams):
        img = render_image(field, cam, mode=args.mode, spec=spec, target_origin=target_origin)
        if args.mode == "disparity":
            save_pfm(out / f"frame_{i:04d}.pfm", img)
        else:
            save_png(out / f"frame_{i:04d}.png", img)
    print(f"wrote {len(cams)} frame(s) to {out}")
    return 0


def cmd_eval(args) -> int:
    field = VoxelRadianceField.load(args.ckpt)
    scene = load_dataset(args.dataset)
    spec = SamplingSpec(n_samples=args.n_samples)
    gt_dir = Path(args.gt) if args.gt else None
    per_view = []
    for i in range(scene.n):
        rendered = render_image(field, scene.cameras[i], mode="color", spec=spec)
        if gt_dir is not None:
            from .core import load_png

            ref = load_png(gt_dir / f"view_{i:03d}.png")
        else:
            ref = scene.images[i]
        mask = scene.masks[i]
        entry = {"view": i}
        inv = MaskBuffer(~mask.data)
        entry["psnr_unmasked"] = metric_psnr(rendered, ref, inv)
        if mask.data.any():
            bbox = metric_region(mask)
            entry["psnr_masked_bbox"] = metric_psnr(rendered, ref, bbox)
            entry["sharpness_masked_bbox"] = metric_sharpness(rendered, bbox)
        per_view.append(entry)
    summary = {"views": per_view}
    for key in ("psnr_masked_bbox", "psnr_unmasked", "sharpness_masked_bbox"):
        vals = [v[key] for v in per_view if key in v and math.isfinite(v[key])]
        if vals:
            summary[f"mean_{key}"] = sum(vals) / len(vals)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refinpaint", description="Reference-guided radiance-field inpainting")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("synth", help="generate the built-in synthetic dataset")
    ps.add_argument("--out", required=True)
    ps.add_argument("--seed", type=int, default=0)
    ps.set_defaults(func=cmd_synth)

    pf = sub.add_parser("fit", help="fit a radiance field to a dataset")
    pf.add_argument("--dataset", required=True)
    pf.add_argument("--config", default=None, help="JSON file mirroring TrainConfig fields")
    pf.add_argument("--out", required=True)
    pf.add_argument("--seed", type=int, default=None, help="override config seed")
    pf.add_argument("--inpaint-command", default=None, help="external 2D inpainter: <cmd> <image> <mask> <out>")
    pf.set_defaults(func=cmd_fit)

    pr = sub.add_parser("render", help="render views from a checkpoint")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--view", required=True, help="view index or spiral:k")
    pr.add_argument("--mode", default="color", choices=["color", "depth", "disparity", "viewsub"])
    pr.add_argument("--target", type=int, default=None, help="target view for viewsub mode")
    pr.add_argument("--out", required=True)
    pr.add_argument("--n-samples", type=int, default=192)
    pr.set_defaults(func=cmd_render)

    pe = sub.add_parser("eval", help="compute image metrics for every view")
    pe.add_argument("--ckpt", required=True)
    pe.add_argument("--dataset", required=True)
    pe.add_argument("--gt", default=None, help="directory of view_%%03d.png ground-truth frames")
    pe.add_argument("--out", required=True)
    pe.add_argument("--n-samples", type=int, default=192)
    pe.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except errors.RefInpaintError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
