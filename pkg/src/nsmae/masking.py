"""Image patch masking and non-empty voxel masking with exact masked counts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import ImageFrame, VoxelGrid

UNIFORM = "uniform"
RANGE_AWARE = "range-aware"
RANGE_BAND_OFFSETS = (0.05, 0.0, -0.05)  # near, middle, far


class MaskError(ValueError):
    pass


def masked_count(ratio: float, total: int) -> int:
    """round(ratio * total), halves rounded up."""
    if not 0.0 <= ratio <= 1.0:
        raise MaskError(f"masking ratio must lie in [0, 1], got {ratio}")
    return min(total, int(np.floor(ratio * total + 0.5)))


@dataclass
class PatchMask:
    patch: int
    mask: np.ndarray  # (H/s, W/s) bool, True = masked
    seed: int

    def pixel_mask(self) -> np.ndarray:
        s = self.patch
        return np.repeat(np.repeat(self.mask, s, axis=0), s, axis=1)

    @property
    def n_masked(self) -> int:
        return int(np.count_nonzero(self.mask))


@dataclass
class MaskedImage:
    image: ImageFrame
    mask: PatchMask
    token: np.ndarray  # (s, s, 3)
    source: ImageFrame


@dataclass
class VoxelMask:
    masked: np.ndarray  # rows of the source VoxelGrid that were removed
    mode: str
    seed: int


def default_token(patch: int) -> np.ndarray:
    return np.full((patch, patch, 3), 0.5)


def sample_patch_mask(height: int, width: int, patch: int, ratio: float, seed: int) -> PatchMask:
    if patch < 1 or height % patch or width % patch:
        raise MaskError(f"patch size {patch} does not tile a {width}x{height} image")
    gh, gw = height // patch, width // patch
    k = masked_count(ratio, gh * gw)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(gh * gw, size=k, replace=False)
    mask = np.zeros(gh * gw, dtype=bool)
    mask[chosen] = True
    return PatchMask(patch, mask.reshape(gh, gw), seed)


def mask_image(image: ImageFrame, patch: int, ratio: float, token=None, seed: int = 0) -> MaskedImage:
    """Replace a uniformly chosen set of exactly round(ratio * P) patches by ``token``."""
    pm = sample_patch_mask(image.height, image.width, patch, ratio, seed)
    token = default_token(patch) if token is None else np.asarray(token, dtype=np.float64)
    if token.shape != (patch, patch, 3):
        raise MaskError(f"token must have shape {(patch, patch, 3)}, got {token.shape}")
    pix = pm.pixel_mask()
    tiled = np.tile(token, (image.height // patch, image.width // patch, 1))
    out = np.where(pix[..., None], tiled, image.pixels)
    return MaskedImage(ImageFrame(np.clip(out, 0.0, 1.0)), pm, token, image)


def _choose(rng: np.random.Generator, rows: np.ndarray, ratio: float) -> np.ndarray:
    k = masked_count(ratio, rows.size)
    return np.sort(rng.choice(rows, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)


def range_bands(grid: VoxelGrid) -> np.ndarray:
    """Band 0/1/2 (near to far) by horizontal distance, three equal-width bands up to the farthest voxel."""
    r = np.hypot(*grid.centers()[:, :2].T)
    if r.size == 0:
        return np.zeros(0, dtype=np.int64)
    r_max = r.max()
    if r_max == 0:
        return np.zeros(r.size, dtype=np.int64)
    return np.minimum((3.0 * r / r_max).astype(np.int64), 2)


def mask_voxels(grid: VoxelGrid, ratio: float, mode: str = UNIFORM, seed: int = 0) -> tuple[VoxelGrid, VoxelMask]:
    """Drop an exact fraction of occupied voxels; returns (kept grid, mask)."""
    masked_count(ratio, 0)  # validates ratio
    rng = np.random.default_rng(seed)
    rows = np.arange(len(grid))
    if mode == UNIFORM:
        masked = _choose(rng, rows, ratio)
    elif mode == RANGE_AWARE:
        bands = range_bands(grid)
        parts = [
            _choose(rng, rows[bands == b], float(np.clip(ratio + off, 0.0, 1.0)))
            for b, off in enumerate(RANGE_BAND_OFFSETS)
        ]
        masked = np.sort(np.concatenate(parts)).astype(np.int64)
    else:
        raise MaskError(f"unknown voxel masking mode {mode!r}")
    keep = np.setdiff1d(rows, masked, assume_unique=True)
    return grid.select(keep), VoxelMask(masked, mode, seed)
