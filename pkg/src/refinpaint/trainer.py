"""Staged fitting loop: unmasked reconstruction warm-up, then periodically
rebuilt masked-depth / view-substitution / disocclusion supervision, all
optimised with Adam over the voxel field parameters.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field as dc_field, asdict
from pathlib import Path

import numpy as np

from . import errors
from .align import align_disparity, mask_weights, smooth_disparity
from .bilateral import BilateralParams, BilateralGrid, edge_island_mask, inpaint_residual
from .core import ImageBuffer, ScenePackage, intersect_aabb, rays_for_pixels
from .disocclusion import DisocclusionSet, Inpainter2D, build_do_supervision
from .field import FieldGradients, VoxelRadianceField
from .render import SamplingSpec, render_image, render_rays, render_rays_backward

DISPARITY_FLOOR = 1e-3  # smoothed disparity is clamped here before unprojection


@dataclass
class TrainConfig:
    # loss weights (supplement defaults)
    gamma_depth_masked: float = 4.0
    gamma_rec_masked: float = 2.0
    gamma_do: float = 1.0
    eta_do: float = 0.25
    eta_opacity: float = 1.0  # hit-confidence term inside the masked depth loss
    gamma_smooth: float = 1000.0
    c_ei: float = 2.0
    # schedule
    n_depth: int = 2000
    n_bilateral: int = 2000
    n_do: int = 3000
    total_iterations: int = 10000
    # sampling / optimisation
    rays_per_batch: int = 1024
    n_samples: int = 192
    learning_rate: float = 1e-2
    learning_rate_sh: float = 1e-2
    seed: int = 0
    resolution: int = 96
    density_init: float = -4.0
    # batch mix once all losses are active
    frac_masked: float = 0.2
    frac_do: float = 0.1
    # supervision construction
    viewsub_targets_per_cycle: int = 0  # 0 = all targets
    bilateral: BilateralParams = dc_field(default_factory=BilateralParams)
    do_spatial_bandwidth: float = 8.0
    do_cleanup: str = "open"
    # optional regularisers
    enable_distortion: bool = False
    distortion_weight: float = 0.01
    opacity_prior: float = 0.0  # opaque-scene prior weight on unmasked rays
    # io
    checkpoint_every: int = 1000
    log_every: int = 100

    def __post_init__(self):
        if min(self.n_depth, self.n_bilateral, self.n_do) < 1:
            raise ValueError("schedule periods must be >= 1")
        for w in (self.gamma_depth_masked, self.gamma_rec_masked, self.gamma_do, self.eta_do, self.eta_opacity, self.opacity_prior):
            if w < 0:
                raise ValueError("loss weights must be >= 0")

    @classmethod
    def from_json(cls, path):
        raw = json.loads(Path(path).read_text())
        if "bilateral" in raw:
            raw["bilateral"] = BilateralParams(**raw["bilateral"])
        return cls(**raw)


@dataclass
class SupervisionCache:
    d_r_smooth: ImageBuffer | None = None
    depth_epoch: int = -1
    targets: list | None = None  # [(view index, I_hat_{r,t} ImageBuffer)]
    ei_mask: object | None = None  # MaskBuffer
    bilateral_epoch: int = -1
    disocc: DisocclusionSet | None = None
    do_epoch: int = -1


@dataclass
class AdamState:
    m_density: np.ndarray
    v_density: np.ndarray
    m_sh: np.ndarray
    v_sh: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_field(cls, f: VoxelRadianceField):
        return cls(
            m_density=np.zeros_like(f.density),
            v_density=np.zeros_like(f.density),
            m_sh=np.zeros_like(f.sh),
            v_sh=np.zeros_like(f.sh),
        )


def optimizer_step(
    field: VoxelRadianceField,
    grads: FieldGradients,
    state: AdamState,
    learning_rate: float,
    learning_rate_sh: float | None = None,
):
    """Bias-corrected adaptive-moment update; zeroes the gradients after."""
    grads.check_finite()
    if learning_rate_sh is None:
        learning_rate_sh = learning_rate
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**state.step
    corr2 = 1.0 - b2**state.step
    for param, g, m, v, lr in (
        (field.density, grads.density, state.m_density, state.v_density, learning_rate),
        (field.sh, grads.sh, state.m_sh, state.v_sh, learning_rate_sh),
    ):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        param -= lr * (m / corr1) / (np.sqrt(v / corr2) + state.eps)
    grads.zero_()


# ---------------------------------------------------------------------------
# loss operators


def loss_rec_unmasked(
    field, origins, dirs, tn, tf, gt_colors, spec, grads=None, weight=1.0, rng=None,
    opacity_prior=0.0,
):
    """Mean squared colour error over a batch of unmasked rays.

    opacity_prior > 0 adds lambda * mean((opacity - 1)^2), an opaque-scene
    prior: a semi-transparent medium with saturated colours can reproduce the
    observed images while leaving depth badly wrong, and the colour term alone
    escapes that basin very slowly.
    """
    n = len(origins)
    if n == 0:
        raise errors.EmptyBatch("no rays in batch")
    batch = render_rays(field, origins, dirs, tn, tf, spec, rng=rng)
    resid = batch.color - gt_colors
    o_res = batch.opacity - 1.0
    loss = float(((resid**2).sum() + opacity_prior * (o_res**2).sum()) / n)
    if grads is not None:
        dlw = None
        if opacity_prior > 0:
            # opacity is the sum of the sample weights, so its gradient is
            # uniform across the samples of a ray
            per_ray = (2.0 * weight * opacity_prior / n) * o_res
            dlw = np.broadcast_to(per_ray[:, None], batch.weights.shape)
        render_rays_backward(
            field, batch, (2.0 * weight / n) * resid, None, grads, dL_dweights=dlw
        )
    return loss


def loss_depth_masked(field, origins, dirs, tn, tf, d_target, spec, grads=None, weight=1.0, rng=None, cache_ok=True, eta_opacity=0.0):
    """Mean squared disparity error over masked reference rays.

    eta_opacity > 0 adds a hit-confidence term eta * mean((opacity - 1)^2):
    matching a disparity target with a semi-transparent medium at a nearer
    depth is otherwise a valid minimum, so the supervised rays are also pushed
    to terminate on opaque geometry.
    """
    if not cache_ok:
        raise errors.CacheStale("depth supervision not built yet")
    n = len(origins)
    if n == 0:
        raise errors.EmptyBatch("no rays in batch")
    batch = render_rays(field, origins, dirs, tn, tf, spec, rng=rng)
    resid = batch.disparity - d_target
    o_res = batch.opacity - 1.0
    loss = float(((resid**2).sum() + eta_opacity * (o_res**2).sum()) / n)
    if grads is not None:
        dlw = None
        if eta_opacity > 0:
            # opacity is the sum of the sample weights, so its gradient is
            # uniform across the samples of a ray
            per_ray = (2.0 * weight * eta_opacity / n) * o_res
            dlw = np.broadcast_to(per_ray[:, None], batch.weights.shape)
        render_rays_backward(
            field, batch, None, (2.0 * weight / n) * resid, grads, dL_dweights=dlw
        )
    return loss


def loss_rec_masked(
    field, origins, dirs, tn, tf, target_colors, target_origin, spec,
    skip=None, grads=None, weight=1.0, rng=None, cache_ok=True,
):
    """View-substituted colour loss against bilaterally corrected targets.

    skip: boolean per-ray edge-island flags (True rays are excluded).
    Density gradients are detached; only SH coefficients receive the
    colour gradient.
    """
    if not cache_ok:
        raise errors.CacheStale("view-substitution targets not built yet")
    n = len(origins)
    if n == 0:
        raise errors.EmptyBatch("no rays in batch")
    keep = np.ones(n, dtype=bool) if skip is None else ~np.asarray(skip)
    if not keep.any():
        return 0.0
    vo = np.broadcast_to(np.asarray(target_origin, dtype=np.float64), (n, 3))
    batch = render_rays(field, origins, dirs, tn, tf, spec, rng=rng, view_origins=vo)
    resid = np.where(keep[:, None], batch.color - target_colors, 0.0)
    n_kept = int(keep.sum())
    loss = float((resid**2).sum() / n_kept)
    if grads is not None:
        render_rays_backward(
            field, batch, (2.0 * weight / n_kept) * resid, None, grads, detach_density=True
        )
    return loss


def loss_do(
    field, origins, dirs, tn, tf, color_targets, disp_targets, eta_do, spec,
    grads=None, weight=1.0, rng=None, cache_ok=True,
):
    """Colour + eta_do-weighted disparity loss over disoccluded rays."""
    if not cache_ok:
        raise errors.CacheStale("disocclusion supervision not built yet")
    n = len(origins)
    if n == 0:
        return 0.0  # EmptyDisocclusion: valid when nothing is disoccluded
    batch = render_rays(field, origins, dirs, tn, tf, spec, rng=rng)
    cres = batch.color - color_targets
    dres = batch.disparity - disp_targets
    loss = float(((cres**2).sum() + eta_do * (dres**2).sum()) / n)
    if grads is not None:
        render_rays_backward(
            field,
            batch,
            (2.0 * weight / n) * cres,
            (2.0 * weight * eta_do / n) * dres,
            grads,
        )
    return loss


def total_loss(components: dict, config: TrainConfig) -> float:
    """Weighted sum of loss components; inactive components contribute 0."""
    return (
        components.get("rec_unmasked", 0.0)
        + config.gamma_depth_masked * components.get("depth_masked", 0.0)
        + config.gamma_rec_masked * components.get("rec_masked", 0.0)
        + config.gamma_do * components.get("do", 0.0)
        + (config.distortion_weight * components.get("distortion", 0.0) if config.enable_distortion else 0.0)
    )


def distortion_loss(field, origins, dirs, tn, tf, spec, grads=None, weight=1.0, rng=None):
    """Weight-compaction regulariser on ray sample weights (floater penalty):
    sum_ij w_i w_j |s_i - s_j| + (1/3) sum_i w_i^2 ds_i in normalised ray
    coordinates.
    """
    n = len(origins)
    if n == 0:
        raise errors.EmptyBatch("no rays in batch")
    batch = render_rays(field, origins, dirs, tn, tf, spec, rng=rng)
    span = (tf - tn)[:, None]
    s = (batch.ts - tn[:, None]) / span
    ds = batch.deltas / span
    w = batch.weights
    # prefix/suffix accumulators for sum_j w_j |s_i - s_j|
    cw = np.cumsum(w, axis=1)
    cws = np.cumsum(w * s, axis=1)
    pre_w = cw - w
    pre_ws = cws - w * s
    suf_w = cw[:, -1:] - cw
    suf_ws = cws[:, -1:] - cws
    cross = s * pre_w - pre_ws + suf_ws - s * suf_w
    loss = float(((w * cross).sum() + (w * w * ds).sum() / 3.0) / n)
    if grads is not None:
        g = (2.0 * cross + (2.0 / 3.0) * w * ds) * (weight / n)
        render_rays_backward(field, batch, None, None, grads, dL_dweights=g)
    return loss


# ---------------------------------------------------------------------------
# fit


def _pixel_pool_unmasked(scene: ScenePackage):
    views, ys, xs = [], [], []
    for i, m in enumerate(scene.masks):
        y, x = np.nonzero(~m.data)
        views.append(np.full(y.size, i))
        ys.append(y)
        xs.append(x)
    return np.concatenate(views), np.concatenate(ys), np.concatenate(xs)


def _rays_for(scene, cam, ys, xs, rng):
    jx = rng.random(ys.size)
    jy = rng.random(ys.size)
    origins, dirs = rays_for_pixels(cam, xs, ys, jx, jy)
    lo, hi = scene.scene_bounds
    tn, tf, hit = intersect_aabb(origins, dirs, lo, hi)
    tf = np.where(hit, tf, tn + 1.0)
    return origins, dirs, tn, tf, hit


class Trainer:
    """Owns the field, optimiser state and supervision caches during fit."""

    def __init__(self, scene: ScenePackage, config: TrainConfig, inpainter: Inpainter2D | None = None):
        self.scene = scene
        self.config = config
        self.inpainter = inpainter or Inpainter2D()
        self.rng = np.random.default_rng(config.seed)
        lo, hi = scene.scene_bounds
        res = config.resolution
        self.field = VoxelRadianceField((res, res, res), (lo, hi))
        self.field.density.fill(config.density_init)
        self.grads = self.field.new_gradients()
        self.adam = AdamState.for_field(self.field)
        self.cache = SupervisionCache()
        self.spec = SamplingSpec(n_samples=config.n_samples, mode="stratified", seed=config.seed)
        self.render_spec = SamplingSpec(n_samples=config.n_samples, mode="midpoint")
        self.pool_views, self.pool_ys, self.pool_xs = _pixel_pool_unmasked(scene)
        r = scene.reference_index
        self.masked_ys, self.masked_xs = np.nonzero(scene.masks[r].data)
        self._viewsub_cycle = 0

    # -- cache rebuilds ------------------------------------------------------

    def rebuild_depth(self, iteration: int):
        scene, cfg = self.scene, self.config
        r = scene.reference_index
        d_hat = render_image(self.field, scene.cameras[r], mode="disparity", spec=self.render_spec)
        weights = mask_weights(scene.masks[r])
        sol = align_disparity(scene.reference_pred_disparity, d_hat, scene.masks[r], weights)
        sm = smooth_disparity(sol.aligned, d_hat, scene.masks[r], cfg.gamma_smooth)
        self.cache.d_r_smooth = sm.smoothed
        self.cache.depth_epoch = iteration
        return sol

    def rebuild_bilateral(self, iteration: int):
        scene, cfg = self.scene, self.config
        r = scene.reference_index
        i_r = scene.reference_inpainted
        others = [t for t in range(scene.n) if t != r]
        k = cfg.viewsub_targets_per_cycle
        if k and k < len(others):
            start = (self._viewsub_cycle * k) % len(others)
            chosen = [others[(start + j) % len(others)] for j in range(k)]
        else:
            chosen = others
        self._viewsub_cycle += 1
        grid = BilateralGrid(i_r, cfg.bilateral)
        targets = [(r, i_r)]
        residuals = []
        for t in chosen:
            i_rt = render_image(
                self.field,
                scene.cameras[r],
                mode="viewsub",
                spec=self.render_spec,
                target_origin=scene.cameras[t].origin,
            )
            res, corrected = inpaint_residual(i_r, i_rt, scene.masks[r], cfg.bilateral, grid=grid)
            residuals.append(res)
            targets.append((t, corrected))
        self.cache.targets = targets
        if residuals:
            self.cache.ei_mask = edge_island_mask(residuals, scene.masks[r], cfg.c_ei).union
        self.cache.bilateral_epoch = iteration

    def rebuild_do(self, iteration: int):
        scene, cfg = self.scene, self.config
        if self.cache.d_r_smooth is None:
            self.rebuild_depth(iteration)
        disp = np.maximum(self.cache.d_r_smooth.data[:, :, 0], DISPARITY_FLOOR)
        params = BilateralParams(
            spatial_bandwidth=cfg.do_spatial_bandwidth,
            luma_bandwidth=cfg.bilateral.luma_bandwidth,
            chroma_bandwidth=cfg.bilateral.chroma_bandwidth,
            smoothness=cfg.bilateral.smoothness,
            pcg_iterations=cfg.bilateral.pcg_iterations,
            c_max=cfg.bilateral.c_max,
        )
        self.cache.disocc = build_do_supervision(
            self.field,
            scene,
            ImageBuffer(disp),
            self.inpainter,
            params=params,
            spec=self.render_spec,
            cleanup=cfg.do_cleanup,
        )
        self.cache.do_epoch = iteration

    # -- batches -------------------------------------------------------------

    def _unmasked_batch(self, n):
        sel = self.rng.integers(0, self.pool_views.size, n)
        views = self.pool_views[sel]
        origins = np.empty((n, 3))
        dirs = np.empty((n, 3))
        gt = np.empty((n, 3))
        jx = self.rng.random(n)
        jy = self.rng.random(n)
        for v in np.unique(views):
            rows = views == v
            pick = sel[rows]
            ys, xs = self.pool_ys[pick], self.pool_xs[pick]
            o, d = rays_for_pixels(self.scene.cameras[v], xs, ys, jx[rows], jy[rows])
            origins[rows] = o
            dirs[rows] = d
            gt[rows] = self.scene.images[v].data[ys, xs]
        lo, hi = self.scene.scene_bounds
        tn, tf, hit = intersect_aabb(origins, dirs, lo, hi)
        tf = np.where(hit, tf, tn + 1.0)
        return loss_rec_unmasked(
            self.field, origins, dirs, tn, tf, gt, self.spec,
            grads=self.grads, rng=self.rng,
            opacity_prior=self.config.opacity_prior,
        )

    def _masked_ref_rays(self, n):
        sel = self.rng.integers(0, self.masked_ys.size, n)
        ys, xs = self.masked_ys[sel], self.masked_xs[sel]
        cam = self.scene.cameras[self.scene.reference_index]
        origins, dirs, tn, tf, _ = _rays_for(self.scene, cam, ys, xs, self.rng)
        return ys, xs, origins, dirs, tn, tf

    def step(self, iteration: int) -> dict:
        cfg = self.config
        comps = {}
        depth_on = cfg.gamma_depth_masked > 0 and self.cache.d_r_smooth is not None
        rec_m_on = cfg.gamma_rec_masked > 0 and self.cache.targets is not None
        do_on = (
            cfg.gamma_do > 0
            and self.cache.disocc is not None
            and self.cache.disocc.total_pixels > 0
        )
        n = cfg.rays_per_batch
        n_m = int(n * cfg.frac_masked) if (depth_on or rec_m_on) else 0
        n_do = int(n * cfg.frac_do) if do_on else 0
        n_um = n - n_m - n_do

        comps["rec_unmasked"] = self._unmasked_batch(n_um)
        if cfg.enable_distortion:
            # the regulariser needs no ground truth, so it can sample any
            # pixel of a random view, masked cones included
            v = int(self.rng.integers(0, self.scene.n))
            cam = self.scene.cameras[v]
            k = min(128, n)
            ys = self.rng.integers(0, cam.height, k)
            xs = self.rng.integers(0, cam.width, k)
            origins, dirs, tn, tf, _ = _rays_for(self.scene, cam, ys, xs, self.rng)
            comps["distortion"] = distortion_loss(
                self.field, origins, dirs, tn, tf, self.spec,
                grads=self.grads, weight=cfg.distortion_weight, rng=self.rng,
            )

        if n_m > 0:
            ys, xs, origins, dirs, tn, tf = self._masked_ref_rays(n_m)
            if depth_on:
                d_t = self.cache.d_r_smooth.data[ys, xs, 0]
                comps["depth_masked"] = loss_depth_masked(
                    self.field, origins, dirs, tn, tf, d_t, self.spec,
                    grads=self.grads, weight=cfg.gamma_depth_masked, rng=self.rng,
                    eta_opacity=cfg.eta_opacity,
                )
            if rec_m_on:
                t_idx = self.rng.integers(0, len(self.cache.targets))
                t, target_img = self.cache.targets[t_idx]
                skip = None
                if t != self.scene.reference_index and self.cache.ei_mask is not None:
                    skip = self.cache.ei_mask.data[ys, xs]
                comps["rec_masked"] = loss_rec_masked(
                    self.field, origins, dirs, tn, tf,
                    target_img.data[ys, xs],
                    self.scene.cameras[t].origin,
                    self.spec,
                    skip=skip, grads=self.grads, weight=cfg.gamma_rec_masked, rng=self.rng,
                )

        if n_do > 0:
            ds = self.cache.disocc
            nonempty = [i for i, m in enumerate(ds.masks) if m.data.any()]
            ti = nonempty[self.rng.integers(0, len(nonempty))]
            t = ds.target_indices[ti]
            ys, xs = np.nonzero(ds.masks[ti].data)
            sel = self.rng.integers(0, ys.size, n_do)
            ys, xs = ys[sel], xs[sel]
            cam = self.scene.cameras[t]
            origins, dirs, tn, tf, _ = _rays_for(self.scene, cam, ys, xs, self.rng)
            comps["do"] = loss_do(
                self.field, origins, dirs, tn, tf,
                ds.colors[ti].data[ys, xs],
                ds.disparities[ti].data[ys, xs, 0],
                cfg.eta_do,
                self.spec,
                grads=self.grads, weight=cfg.gamma_do, rng=self.rng,
            )

        optimizer_step(self.field, self.grads, self.adam, cfg.learning_rate, cfg.learning_rate_sh)
        comps["total"] = total_loss(comps, cfg)
        return comps


def fit(
    scene: ScenePackage,
    config: TrainConfig,
    inpainter: Inpainter2D | None = None,
    out_dir=None,
) -> VoxelRadianceField:
    """Run the full staged optimisation; deterministic given config.seed."""
    trainer = Trainer(scene, config, inpainter)
    cfg = config
    out = Path(out_dir) if out_dir is not None else None
    log_f = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_f = open(out / "train_log.jsonl", "w")
    t0 = time.time()
    try:
        for i in range(1, cfg.total_iterations + 1):
            if cfg.gamma_depth_masked > 0 and i % cfg.n_depth == 0:
                trainer.rebuild_depth(i)
            if cfg.gamma_rec_masked > 0 and i % cfg.n_bilateral == 0:
                trainer.rebuild_bilateral(i)
            if cfg.gamma_do > 0 and i % cfg.n_do == 0:
                trainer.rebuild_do(i)
            comps = trainer.step(i)
            if log_f is not None and i % cfg.log_every == 0:
                rec = {"iteration": i, "wall_time_s": time.time() - t0}
                rec.update({k: float(v) for k, v in comps.items()})
                log_f.write(json.dumps(rec, sort_keys=True) + "\n")
                log_f.flush()
            if out is not None and (i % cfg.checkpoint_every == 0 or i == cfg.total_iterations):
                trainer.field.save(out / f"ckpt_{i}.rfi")
    finally:
        if log_f is not None:
            log_f.close()
    return trainer.field
