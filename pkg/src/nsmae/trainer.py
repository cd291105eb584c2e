"""Pre-training loop: mask, embed, render, reconstruct, update."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ndgrad as ng
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import config_hash
from .dataio import (DepthMap, Sample, VoxelGrid, load_manifest, make_bev_depth_target,
                     make_perspective_depth_target, voxelize)
from .embednet import NetShape, embed, init_params
from .geometry import CameraModel, GridSpec, RayBatch, bev_rays, look_at, perspective_rays
from .masking import mask_image, mask_voxels
from .objective import COLOR, DEPTH_BEV, DEPTH_PER, LossConfig, color_loss, modality_loss, total_loss
from .optim import OptimState, adamw_step, one_cycle_lr
from .renderer import render_view
from .synth import generate_scene, rasterize_image, sample_lidar

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


def grid_from_config(cfg: dict) -> GridSpec:
    g = cfg["grid"]
    return GridSpec(tuple(g["lo"]), tuple(g["hi"]), tuple(g["size"]))


def net_shape(cfg: dict) -> NetShape:
    m = cfg["model"]
    mods = set(m["modalities"])
    if not mods or not mods <= {"camera", "lidar"}:
        raise ValueError(f"model.modalities must be a non-empty subset of camera/lidar, got {m['modalities']}")
    return NetShape(m["cam_hidden"], m["c_img"], m["lidar_hidden"], m["c_lidar"], m["render_hidden"],
                    cfg["mask"]["image"]["patch"], "camera" in mods, "lidar" in mods)


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig.from_list(cfg["loss"])


# -- data -----------------------------------------------------------------------------

def rig_cameras(cfg: dict, grid: GridSpec) -> list[CameraModel]:
    """Cameras on a ring around the grid, elevated above its top, looking at its center."""
    w, h = cfg["data"]["image_size"]
    n = cfg["data"]["cameras"]
    lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
    center = 0.5 * (lo + hi)
    radius = 0.9 * float(np.max(hi[:2] - lo[:2]))
    cams = []
    for k in range(n):
        ang = math.pi + 0.4 + 2.0 * math.pi * k / n
        eye = center + np.array([radius * math.cos(ang), radius * math.sin(ang), 0.0])
        eye[2] = hi[2] + 0.5
        target = center - np.array([0.0, 0.0, 0.25 * (hi[2] - lo[2])])
        cams.append(CameraModel.from_fov(w, h, cfg["data"]["fov"], look_at(eye, target), eye))
    return cams


def synth_samples(cfg: dict, n: int, scene_seed: int) -> list[Sample]:
    grid = grid_from_config(cfg)
    d = cfg["data"]
    cams = rig_cameras(cfg, grid)
    samples = []
    for k in range(n):
        scene = generate_scene(scene_seed + k, tuple(d["primitives"]), grid, clear_radius=0.8)
        cloud = sample_lidar(scene, (0.0, 0.0, 0.0), d["lidar_azimuth"], d["lidar_elevation"],
                             tuple(d["lidar_elevation_range"]))
        images = [rasterize_image(scene, c) for c in cams]
        samples.append(Sample(images, cams, cloud, scene.to_dict()))
    return samples


def load_samples(cfg: dict) -> list[Sample]:
    if cfg["data"]["manifest"]:
        return load_manifest(cfg["data"]["manifest"])
    return synth_samples(cfg, cfg["data"]["scenes"], cfg["data"]["scene_seed"])


@dataclass
class Prepared:
    """A sample with its unmasked voxels, reconstruction targets and ray pools."""

    sample: Sample
    voxels: VoxelGrid
    per_targets: list[DepthMap]
    bev_target: DepthMap
    per_rays: list[RayBatch]
    per_range: list[np.ndarray]  # along-ray range of the depth target per pixel ray, 0 where invalid


def prepare(samples: list[Sample], cfg: dict) -> list[Prepared]:
    grid = grid_from_config(cfg)
    r = cfg["renderer"]
    out = []
    for s in samples:
        vox = voxelize(s.cloud, grid)
        per_t = [make_perspective_depth_target(s.cloud, c) for c in s.cameras]
        pools, ranges = [], []
        for cam, tgt in zip(s.cameras, per_t):
            rays = perspective_rays(cam, 1, r["delta_per"], r["n_per"], r["near_per"])
            cos = (rays.directions @ cam.R)[:, 2]
            z = tgt.depth[rays.index[:, 1], rays.index[:, 0]]
            pools.append(rays)
            ranges.append(z / cos)
        out.append(Prepared(s, vox, per_t, make_bev_depth_target(s.cloud, grid), pools, ranges))
    return out


# -- one step --------------------------------------------------------------------------

def _pick(rng: np.random.Generator, n_total: int, valid: np.ndarray, k: int) -> np.ndarray:
    """Half uniform rows, half rows with valid depth (when any)."""
    k = min(k, n_total)
    good = np.nonzero(valid)[0]
    k_valid = min(k // 2, good.size)
    rows = rng.choice(n_total, size=k - k_valid, replace=False)
    if k_valid:
        rows = np.concatenate([rows, rng.choice(good, size=k_valid, replace=False)])
    return rows


@dataclass
class StepPlan:
    batch: list[int]
    image_seeds: list[list[int]]
    voxel_seeds: list[int]
    per_rows: list[list[np.ndarray]]
    bev_rows: list[np.ndarray]
    jitter_seed: int


def plan_step(rng: np.random.Generator, data: list[Prepared], cfg: dict) -> StepPlan:
    """All random draws of one step, taken from the master generator in a fixed order."""
    B = min(cfg["optim"]["batch"], len(data))
    batch = [int(b) for b in rng.choice(len(data), size=B, replace=False)]
    r = cfg["renderer"]
    image_seeds, voxel_seeds, per_rows, bev_rows = [], [], [], []
    for b in batch:
        p = data[b]
        image_seeds.append([int(rng.integers(2 ** 62)) for _ in p.sample.cameras])
        voxel_seeds.append(int(rng.integers(2 ** 62)))
        per_rows.append([
            _pick(rng, len(pool), rng_valid > 0, r["rays_per_camera"])
            for pool, rng_valid in zip(p.per_rays, p.per_range)
        ])
        bev_rows.append(_pick(rng, p.bev_target.valid.size, p.bev_target.valid.reshape(-1), r["bev_rays"]))
    return StepPlan(batch, image_seeds, voxel_seeds, per_rows, bev_rows, int(rng.integers(2 ** 62)))


def step_graph(params: dict, data: list[Prepared], plan: StepPlan, cfg: dict, tape: ng.Tape | None = None):
    """Build the loss graph for one step.

    Returns ``(report, param_vars)``; ``report.total_var`` is the scalar to
    differentiate when a tape is supplied.
    """
    shape = net_shape(cfg)
    grid = grid_from_config(cfg)
    r = cfg["renderer"]
    mcfg = cfg["mask"]
    if tape is not None:
        pv = {k: tape.input(v, k) for k, v in params.items()}
    else:
        pv = dict(params)
    masked, cams, voxels = [], [], []
    for b, iseeds, vseed in zip(plan.batch, plan.image_seeds, plan.voxel_seeds):
        p = data[b]
        masked.append([mask_image(img, mcfg["image"]["patch"], mcfg["image"]["ratio"], None, s)
                       for img, s in zip(p.sample.images, iseeds)])
        cams.append(p.sample.cameras)
        kept, _ = mask_voxels(p.voxels, mcfg["voxel"]["ratio"], mcfg["voxel"]["mode"], vseed)
        voxels.append(kept)
    fused = embed(masked, cams, voxels, grid, pv, shape)

    # perspective rays of every camera of every sample share one render call
    origins, dirs, index, owner, colors, ranges = [], [], [], [], [], []
    for bi, (b, rows_per_cam) in enumerate(zip(plan.batch, plan.per_rows)):
        p = data[b]
        for cam_k, rows in enumerate(rows_per_cam):
            pool = p.per_rays[cam_k]
            origins.append(pool.origins[rows])
            dirs.append(pool.directions[rows])
            index.append(pool.index[rows])
            owner.append(np.full(rows.size, bi))
            uv = pool.index[rows]
            colors.append(p.sample.images[cam_k].pixels[uv[:, 1], uv[:, 0]])
            ranges.append(p.per_range[cam_k][rows])
    per = RayBatch(np.concatenate(origins), np.concatenate(dirs), r["near_per"], r["delta_per"],
                   r["n_per"], "PER", np.concatenate(index))
    per_owner = np.concatenate(owner)
    jitter = None
    if r["jitter"]:
        jitter = np.random.default_rng(plan.jitter_seed).uniform(-0.5, 0.5, size=len(per))
    per_maps = render_view(per, fused, pv, ("color", "depth"), per_owner, jitter)
    color_t = np.concatenate(colors)
    range_t = np.concatenate(ranges)
    per_valid = range_t > 0
    per_depth_t = np.where(per_valid, range_t - r["near_per"], 0.0)

    bev_all = bev_rays(grid, r["delta_bev"])
    b_rows = [bev_all.subset(rows) for rows in plan.bev_rows]
    bev = RayBatch(np.concatenate([x.origins for x in b_rows]), np.concatenate([x.directions for x in b_rows]),
                   bev_all.near, bev_all.delta, bev_all.n_samples, "BEV",
                   np.concatenate([x.index for x in b_rows]))
    bev_owner = np.concatenate([np.full(len(x), bi) for bi, x in enumerate(b_rows)])
    bev_maps = render_view(bev, fused, pv, ("depth",), bev_owner)
    bev_t = np.concatenate([data[b].bev_target.depth.reshape(-1)[rows] for b, rows in zip(plan.batch, plan.bev_rows)])
    bev_valid = np.concatenate([data[b].bev_target.valid.reshape(-1)[rows] for b, rows in zip(plan.batch, plan.bev_rows)])

    lcfg = loss_config(cfg)
    raws, counts = {}, {}
    for term in lcfg.terms:
        if term.target == COLOR:
            raws[COLOR] = modality_loss(per_maps["color"].value, color_t, term.p) if term.p != 2 \
                else color_loss(per_maps["color"].value, color_t)
            counts[COLOR] = len(per)
        elif term.target == DEPTH_PER:
            counts[DEPTH_PER] = int(per_valid.sum())
            raws[DEPTH_PER] = (modality_loss(per_maps["depth"].value, per_depth_t, term.p, per_valid)
                               if counts[DEPTH_PER] else 0.0)
        elif term.target == DEPTH_BEV:
            counts[DEPTH_BEV] = int(bev_valid.sum())
            raws[DEPTH_BEV] = (modality_loss(bev_maps["depth"].value, bev_t, term.p, bev_valid)
                               if counts[DEPTH_BEV] else 0.0)
        else:
            raise ValueError(f"unsupported reconstruction target {term.target!r}")
    return total_loss(raws, lcfg, counts), pv


# -- loop ----------------------------------------------------------------------------------

def initial_checkpoint(cfg: dict) -> Checkpoint:
    params = init_params(net_shape(cfg), cfg["seed"])
    o = cfg["optim"]
    state = OptimState.zeros_like(params, beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                                  weight_decay=o["weight_decay"])
    rng = np.random.default_rng(cfg["seed"])
    return Checkpoint(config_hash(cfg), params, state, rng.bit_generator.state, 0, cfg)


def learning_rate(cfg: dict, step: int) -> float:
    o = cfg["optim"]
    if o["schedule"] == "one-cycle":
        return one_cycle_lr(step, o["steps"], o["lr"], o["warmup"])
    if o["schedule"] == "constant":
        return o["lr"]
    raise ValueError(f"unknown schedule {o['schedule']!r}")


def train_step(ckpt: Checkpoint, data: list[Prepared], cfg: dict) -> tuple[Checkpoint, dict]:
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.rng_state
    plan = plan_step(rng, data, cfg)
    tape = ng.Tape()
    report, pv = step_graph(ckpt.params, data, plan, cfg, tape)
    if not math.isfinite(report.total):
        raise TrainingError(f"non-finite loss at step {ckpt.step + 1}")
    if report.total_var is None:
        # every sampled ray missed the volume: the loss does not depend on the parameters
        grads = {name: np.zeros_like(v) for name, v in ckpt.params.items()}
    else:
        grads_list = ng.grad(tape, report.total_var)
        grads = {name: g for name, g in zip(pv, grads_list)}
    lr = learning_rate(cfg, ckpt.step)
    params, state = adamw_step(ckpt.params, grads, ckpt.optim, lr)
    new = Checkpoint(ckpt.config_hash, params, state, rng.bit_generator.state, ckpt.step + 1, ckpt.config)
    entry = {"step": new.step, "lr": lr, "raw": report.raw, "weighted": report.weighted,
             "counts": report.counts, "total": report.total}
    return new, entry


def pretrain(cfg: dict, data: list[Prepared] | None = None, resume: Checkpoint | None = None,
             out: str | Path | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run ``cfg["optim"]["steps"]`` steps (from ``resume`` if given).

    Writes ``loss.jsonl`` and periodic ``ckpt_XXXXXX.nsmae`` files under ``out``.
    """
    if data is None:
        data = prepare(load_samples(cfg), cfg)
    chash = config_hash(cfg)
    ckpt = resume if resume is not None else initial_checkpoint(cfg)
    if ckpt.config_hash != chash:
        raise TrainingError("checkpoint was produced under a different configuration")
    out = Path(out) if out is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "loss.jsonl", "a" if resume is not None else "w")
    entries: list[dict] = []
    every = cfg["checkpoint_every"]
    try:
        while ckpt.step < cfg["optim"]["steps"]:
            try:
                ckpt_next, entry = train_step(ckpt, data, cfg)
            except (TrainingError, FloatingPointError) as exc:
                if out is not None:
                    save_checkpoint(ckpt, out / "last_good.nsmae")
                raise TrainingError(f"{exc}; last good checkpoint at step {ckpt.step}") from exc
            ckpt = ckpt_next
            entries.append(entry)
            if logf is not None:
                logf.write(json.dumps(entry) + "\n")
                logf.flush()
            if out is not None and every and ckpt.step % every == 0:
                save_checkpoint(ckpt, out / f"ckpt_{ckpt.step:06d}.nsmae")
            if ckpt.step % 50 == 0:
                log.info("step %d total %.6g", ckpt.step, entry["total"])
    finally:
        if logf is not None:
            logf.close()
    if out is not None:
        save_checkpoint(ckpt, out / "final.nsmae")
    return ckpt, entries


def resume_from(path, cfg: dict) -> Checkpoint:
    return load_checkpoint(path, config_hash(cfg))
