"""Embedding network: camera encoder, LiDAR encoder, camera-to-world alignment, fusion.

All builders are batched: several images (or voxel grids) are stacked
row-wise into one table so every layer is a single gather plus matmul.
Parameters may be numpy arrays or tape variables.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .dataio import VoxelGrid
from .geometry import CameraModel, GridSpec
from .masking import MaskedImage
from .renderer import FeatureVolume, init_render_params

CAMERA_STRIDE = 4
VOXEL_FEATURES = 5


@dataclass(frozen=True)
class NetShape:
    cam_hidden: int = 8
    c_img: int = 8
    lidar_hidden: int = 16
    c_lidar: int = 8
    render_hidden: int = 32
    patch: int = 8
    camera: bool = True
    lidar: bool = True

    @property
    def fused_channels(self) -> int:
        return self.c_img * self.camera + self.c_lidar * self.lidar


def init_params(shape: NetShape, seed: int) -> dict[str, np.ndarray]:
    """Seeded initialization; final encoder layers and all biases start at zero."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def he(n_in, n_out):
        return rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out))

    if shape.camera:
        h = shape.cam_hidden
        p["cam.conv1.w"] = he(9 * 3, h)
        p["cam.conv1.b"] = np.zeros(h)
        p["cam.conv2.w"] = he(9 * h, h)
        p["cam.conv2.b"] = np.zeros(h)
        p["cam.conv3.w"] = he(9 * h, shape.c_img) * 0.5
        p["cam.conv3.b"] = np.zeros(shape.c_img)
        p["mask.token"] = np.full((shape.patch * shape.patch, 3), 0.5)
    if shape.lidar:
        h = shape.lidar_hidden
        p["lidar.point.w"] = he(VOXEL_FEATURES, h)
        p["lidar.point.b"] = np.zeros(h)
        p["lidar.conv.w"] = he(27 * h, shape.c_lidar) * 0.5
        p["lidar.conv.b"] = np.zeros(shape.c_lidar)
    p.update(init_render_params(rng, shape.fused_channels, shape.render_hidden))
    return p


# -- index builders (cached; all constant for a given layout) --------------------

@functools.lru_cache(maxsize=64)
def conv2d_index(n: int, height: int, width: int, stride: int) -> tuple[ng.GatherIndex, int, int]:
    """im2col rows for a 3x3, pad-1 convolution over ``n`` stacked HxW images."""
    ho = (height - 1) // stride + 1
    wo = (width - 1) // stride + 1
    oy, ox = np.meshgrid(np.arange(ho) * stride, np.arange(wo) * stride, indexing="ij")
    dy, dx = np.meshgrid(np.arange(-1, 2), np.arange(-1, 2), indexing="ij")
    y = oy.reshape(-1, 1) + dy.reshape(1, -1)
    x = ox.reshape(-1, 1) + dx.reshape(1, -1)
    ok = (y >= 0) & (y < height) & (x >= 0) & (x < width)
    local = np.where(ok, y * width + x, -1)
    base = (np.arange(n) * height * width)[:, None, None]
    idx = np.where(ok[None], local[None] + base, -1).reshape(-1)
    w = np.where(idx >= 0, 1.0, 0.0)
    return ng.GatherIndex(idx, w, n * height * width), ho, wo


@functools.lru_cache(maxsize=16)
def conv3d_index(n: int, extents: tuple[int, int, int]) -> ng.GatherIndex:
    """im2col rows for a 3x3x3, pad-1, stride-1 convolution over ``n`` stacked volumes."""
    X, Y, Z = extents
    ii, jj, kk = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    base = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)
    offs = np.stack(np.meshgrid(*(np.arange(-1, 2),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    nb = base[:, None, :] + offs[None, :, :]
    ok = np.all((nb >= 0) & (nb < np.array(extents)), axis=-1)
    local = np.where(ok, (nb[..., 0] * Y + nb[..., 1]) * Z + nb[..., 2], -1)
    V = X * Y * Z
    idx = np.where(ok[None], local[None] + (np.arange(n) * V)[:, None, None], -1).reshape(-1)
    return ng.GatherIndex(idx, np.where(idx >= 0, 1.0, 0.0), n * V)


def conv2d(x, n: int, height: int, width: int, w, b, stride: int):
    index, ho, wo = conv2d_index(n, height, width, stride)
    cin = ng.value(x).shape[1]
    cols = ng.reshape(ng.gather(x, index), (n * ho * wo, 9 * cin))
    return cols @ w + b, ho, wo


def conv3d(x, n: int, extents: tuple, w, b):
    index = conv3d_index(n, tuple(extents))
    cin = ng.value(x).shape[1]
    cols = ng.reshape(ng.gather(x, index), (n * int(np.prod(extents)), 27 * cin))
    return cols @ w + b


# -- camera branch ---------------------------------------------------------------

@dataclass
class ImageEmbedding:
    values: object  # (n * Hf * Wf, C) rows, image-major
    n_images: int
    height: int  # Hf
    width: int  # Wf
    image_height: int
    image_width: int


def masked_input(masked: list[MaskedImage], token):
    """Stacked (n*H*W, 3) network input with masked pixels reading the token."""
    H, W = masked[0].source.height, masked[0].source.width
    s = masked[0].mask.patch
    pix = np.concatenate([m.source.pixels.reshape(-1, 3) for m in masked])
    msk = np.concatenate([m.mask.pixel_mask().reshape(-1) for m in masked]).astype(np.float64)
    v, u = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    tok = np.tile(((v % s) * s + (u % s)).reshape(-1), len(masked))
    index = ng.GatherIndex(tok, msk, s * s)
    base = pix * (1.0 - msk)[:, None]
    return base + ng.gather(token, index)


def encode_camera(images: list[MaskedImage] | MaskedImage, params) -> ImageEmbedding:
    """Two stride-2 conv + softplus blocks and a final conv; output at 1/4 resolution."""
    if isinstance(images, MaskedImage):
        images = [images]
    H, W = images[0].source.height, images[0].source.width
    if H % CAMERA_STRIDE or W % CAMERA_STRIDE:
        raise ValueError(f"image extents {W}x{H} must be divisible by {CAMERA_STRIDE}")
    n = len(images)
    token = params.get("mask.token")
    if token is None:
        token = np.full((images[0].mask.patch ** 2, 3), 0.5)
    x = masked_input(images, token)
    h, h1, w1 = conv2d(x, n, H, W, params["cam.conv1.w"], params["cam.conv1.b"], 2)
    h = ng.softplus(h)
    h, h2, w2 = conv2d(h, n, h1, w1, params["cam.conv2.w"], params["cam.conv2.b"], 2)
    h = ng.softplus(h)
    out, _, _ = conv2d(h, n, h2, w2, params["cam.conv3.w"], params["cam.conv3.b"], 1)
    return ImageEmbedding(out, n, h2, w2, H, W)


def bilinear_weights(fu: np.ndarray, fv: np.ndarray, width: int, height: int):
    """Four-corner indices (row-major in a height x width grid) and weights, edge-clamped."""
    fu = np.clip(fu, 0.0, width - 1)
    fv = np.clip(fv, 0.0, height - 1)
    u0 = np.minimum(np.floor(fu).astype(np.int64), max(width - 2, 0))
    v0 = np.minimum(np.floor(fv).astype(np.int64), max(height - 2, 0))
    u1 = np.minimum(u0 + 1, width - 1)
    v1 = np.minimum(v0 + 1, height - 1)
    a, b = fu - u0, fv - v0
    idx = np.stack([v0 * width + u0, v0 * width + u1, v1 * width + u0, v1 * width + u1], axis=1)
    w = np.stack([(1 - a) * (1 - b), a * (1 - b), (1 - a) * b, a * b], axis=1)
    return idx, w


def alignment_index(cameras: list[list[CameraModel]], grid: GridSpec, emb: ImageEmbedding) -> ng.GatherIndex:
    """Gather pattern lifting stacked image embeddings onto voxel centers.

    A voxel inside a camera frustum receives the bilinearly sampled feature
    at its projection divided by its camera depth; voxels seen by several
    cameras average over them.
    """
    centers = grid.voxel_centers()
    V = centers.shape[0]
    per_cam = emb.height * emb.width
    idx_rows, w_rows = [], []
    img = 0
    for cams in cameras:
        idx_s, w_s, seen = [], [], np.zeros(V)
        for cam in cams:
            uv, z = cam.project(centers)
            inside = (z > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
            su = emb.width / cam.width
            sv = emb.height / cam.height
            fu = np.where(inside, uv[:, 0] * su - 0.5, 0.0)
            fv = np.where(inside, uv[:, 1] * sv - 0.5, 0.0)
            idx, w = bilinear_weights(fu, fv, emb.width, emb.height)
            inv_z = np.where(inside, 1.0 / np.where(inside, z, 1.0), 0.0)
            idx_s.append(idx + img * per_cam)
            w_s.append(w * inv_z[:, None])
            seen += inside
            img += 1
        if not cams:
            idx_rows.append(np.zeros((V, 4), dtype=np.int64))
            w_rows.append(np.zeros((V, 4)))
            continue
        norm = np.where(seen > 0, 1.0 / np.maximum(seen, 1), 0.0)
        idx_rows.append(np.concatenate(idx_s, axis=1))
        w_rows.append(np.concatenate(w_s, axis=1) * norm[:, None])
    width = max(r.shape[1] for r in idx_rows)
    pad = lambda a, fill: np.pad(a, ((0, 0), (0, width - a.shape[1])), constant_values=fill)
    idx = np.concatenate([pad(r, 0) for r in idx_rows])
    w = np.concatenate([pad(r, 0.0) for r in w_rows])
    return ng.GatherIndex(idx, w, max(1, emb.n_images * per_cam))


def align_image_to_world(emb: ImageEmbedding | None, cameras, grid: GridSpec, params=None,
                         channels: int | None = None) -> FeatureVolume:
    """Lift camera-frame embeddings into the world grid (parameter-free).

    ``cameras`` is a list of cameras for one sample, or a list of such lists
    for a stacked batch matching ``emb``'s image order.
    """
    if cameras and isinstance(cameras[0], CameraModel):
        cameras = [cameras]
    n_samples = max(1, len(cameras))
    if emb is None or emb.n_images == 0:
        c = channels if channels is not None else 1
        return FeatureVolume(grid, np.zeros((n_samples * grid.n_voxels, c)), "image")
    index = alignment_index(cameras, grid, emb)
    return FeatureVolume(grid, ng.gather(emb.values, index), "image")


# -- LiDAR branch -----------------------------------------------------------------

def voxel_inputs(grid: VoxelGrid) -> np.ndarray:
    """Normalized encoder input: (2 * offset / voxel size, intensity, log1p(count))."""
    f = grid.features
    size = np.asarray(grid.grid.size)
    return np.concatenate([2.0 * f[:, :3] / size, f[:, 3:4], np.log1p(f[:, 4:5])], axis=1)


def encode_lidar(grids: list[VoxelGrid] | VoxelGrid, params) -> FeatureVolume:
    """Per-voxel linear + softplus, scatter to a dense volume, then a 3x3x3 conv."""
    if isinstance(grids, VoxelGrid):
        grids = [grids]
    spec = grids[0].grid
    V = spec.n_voxels
    n = len(grids)
    hidden = ng.value(params["lidar.point.w"]).shape[1]
    rows = sum(len(g) for g in grids)
    if rows:
        feats = np.concatenate([voxel_inputs(g) for g in grids])
        h = ng.softplus(feats @ params["lidar.point.w"] + params["lidar.point.b"])
        slot = np.full(n * V, -1, dtype=np.int64)
        start = 0
        for b, g in enumerate(grids):
            slot[b * V + g.flat] = start + np.arange(len(g))
            start += len(g)
        dense = ng.gather(h, ng.GatherIndex(slot, np.ones(n * V), rows))
    else:
        dense = np.zeros((n * V, hidden))
    out = conv3d(dense, n, spec.extents, params["lidar.conv.w"], params["lidar.conv.b"])
    return FeatureVolume(spec, out, "lidar")


def fuse(img_vol: FeatureVolume | None, lidar_vol: FeatureVolume | None) -> FeatureVolume:
    """Channel concatenation [image; lidar]; either branch may be absent."""
    if img_vol is None and lidar_vol is None:
        raise ValueError("fusion needs at least one modality")
    if img_vol is None:
        return FeatureVolume(lidar_vol.grid, lidar_vol.values, "fused")
    if lidar_vol is None:
        return FeatureVolume(img_vol.grid, img_vol.values, "fused")
    if img_vol.grid != lidar_vol.grid:
        raise ValueError("cannot fuse volumes defined on different grids")
    return FeatureVolume(img_vol.grid, ng.concat([img_vol.values, lidar_vol.values], axis=1), "fused")


def embed(masked_images: list[list[MaskedImage]], cameras: list[list[CameraModel]],
          voxels: list[VoxelGrid], grid: GridSpec, params, shape: NetShape) -> FeatureVolume:
    """Full embedding stack for a batch; returns the stacked fused volume."""
    img_vol = lidar_vol = None
    if shape.camera:
        flat = [m for ms in masked_images for m in ms]
        emb = encode_camera(flat, params) if flat else None
        img_vol = align_image_to_world(emb, cameras, grid, channels=shape.c_img)
    if shape.lidar:
        lidar_vol = encode_lidar(voxels, params)
    return fuse(img_vol, lidar_vol)
