"""Sensor data containers, file formats, voxelization and reconstruction targets.

File formats:

* point clouds: raw little-endian float32 quadruplets ``(x, y, z, r)``
* images: binary PPM (``P6``, maxval 255)
* depth maps: grayscale PFM (``Pf``, scale -1.0, rows stored bottom-up)
* datasets: a JSON manifest listing per-sample files and camera parameters
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, GridSpec, project_points


class FormatError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray  # (P, 4): x, y, z in meters, intensity r

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite values")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


@dataclass
class ImageFrame:
    pixels: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.pixels.shape}")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class DepthMap:
    """Per-cell depth in meters; invalid cells hold 0.

    Perspective maps are indexed ``[v, u]``; BEV maps ``[i, j]`` over the
    grid's x and y cells.
    """

    depth: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.depth.shape != self.valid.shape:
            raise ValueError("depth and validity mask shapes differ")


@dataclass
class VoxelGrid:
    """Occupied voxels of a point cloud, sorted by flat voxel index.

    ``features`` rows are (mean x, y, z offset from voxel center, mean
    intensity, point count).
    """

    grid: GridSpec
    indices: np.ndarray  # (M, 3) int
    features: np.ndarray  # (M, 5)
    dropped: int = 0

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, 5)

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return self.features[:, 4]

    @property
    def flat(self) -> np.ndarray:
        return self.grid.flat_index(self.indices)

    def centers(self) -> np.ndarray:
        lo, size = np.asarray(self.grid.lo), np.asarray(self.grid.size)
        return lo + (self.indices + 0.5) * size

    def select(self, rows) -> "VoxelGrid":
        rows = np.asarray(rows, dtype=np.int64)
        return VoxelGrid(self.grid, self.indices[rows], self.features[rows], self.dropped)


# -- point clouds -------------------------------------------------------------

def load_point_cloud_bin(path) -> PointCloud:
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        whole = len(raw) // 16 * 16
        raise FormatError(f"{path}: truncated point record at byte offset {whole} (file is {len(raw)} bytes)")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(pts)


def save_point_cloud_bin(cloud: PointCloud, path) -> None:
    Path(path).write_bytes(np.asarray(cloud.points, dtype="<f4").tobytes())


# -- PPM ----------------------------------------------------------------------

_PPM_HEADER = re.compile(rb"\AP6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def load_image_ppm(path) -> ImageFrame:
    raw = Path(path).read_bytes()
    # comments are not supported: the writer never emits them
    m = _PPM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: malformed PPM header {raw[:16]!r}")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"{path}: unsupported PPM maxval {maxval} in header {m.group(0)!r}")
    body = raw[m.end():]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes, found {len(body)}")
    px = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return ImageFrame(px.astype(np.float64) / 255.0)


def quantize(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(pixels) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def save_image_ppm(image: ImageFrame, path) -> None:
    px = quantize(image.pixels)
    h, w, _ = px.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + px.tobytes())


# -- PFM ----------------------------------------------------------------------

_PFM_HEADER = re.compile(rb"\A(Pf|PF)\s+(\d+)\s+(\d+)\s+(\S+)\s")


def load_depth_pfm(path) -> np.ndarray:
    """Load a grayscale PFM as a float64 array indexed top row first."""
    raw = Path(path).read_bytes()
    m = _PFM_HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: malformed PFM header {raw[:24]!r}")
    if m.group(1) != b"Pf":
        raise FormatError(f"{path}: only grayscale PFM is supported, header {m.group(0)!r}")
    w, h = int(m.group(2)), int(m.group(3))
    try:
        scale = float(m.group(4))
    except ValueError:
        raise FormatError(f"{path}: bad PFM scale {m.group(4)!r}") from None
    if scale >= 0:
        raise FormatError(f"{path}: big-endian PFM (scale {m.group(4)!r}) is not supported")
    body = raw[m.end():]
    if len(body) != 4 * w * h:
        raise FormatError(f"{path}: expected {4 * w * h} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype="<f4").reshape(h, w)
    return np.flipud(data).astype(np.float64)


def save_depth_pfm(depth: np.ndarray, path) -> None:
    d = np.asarray(depth, dtype="<f4")
    if d.ndim != 2:
        raise ValueError(f"PFM depth must be 2-D, got shape {d.shape}")
    h, w = d.shape
    Path(path).write_bytes(b"Pf\n%d %d\n-1.0\n" % (w, h) + np.flipud(d).tobytes())


# -- voxelization and targets -------------------------------------------------

def voxelize(cloud: PointCloud, grid: GridSpec) -> VoxelGrid:
    """Bin points into ``grid`` with per-voxel mean features."""
    pts = cloud.points
    lo, size = np.asarray(grid.lo), np.asarray(grid.size)
    ext = np.asarray(grid.extents)
    ijk = np.floor((pts[:, :3] - lo) / size).astype(np.int64)
    keep = np.all((ijk >= 0) & (ijk < ext), axis=1)
    dropped = int(np.count_nonzero(~keep))
    pts, ijk = pts[keep], ijk[keep]
    if pts.shape[0] == 0:
        return VoxelGrid(grid, np.zeros((0, 3)), np.zeros((0, 5)), dropped)
    flat = grid.flat_index(ijk)
    uniq, inv = np.unique(flat, return_inverse=True)
    counts = np.bincount(inv).astype(np.float64)
    vox_ijk = grid.unflat_index(uniq)
    centers = lo + (vox_ijk + 0.5) * size
    offsets = pts[:, :3] - centers[inv]
    feats = np.zeros((uniq.size, 5))
    for c in range(3):
        feats[:, c] = _sorted_group_sum(offsets[:, c], inv, uniq.size) / counts
    feats[:, 3] = _sorted_group_sum(pts[:, 3], inv, uniq.size) / counts
    feats[:, 4] = counts
    return VoxelGrid(grid, vox_ijk, feats, dropped)


def _sorted_group_sum(values: np.ndarray, groups: np.ndarray, n: int) -> np.ndarray:
    # values within a group are summed in sorted-value order so the result does
    # not depend on input permutation
    order = np.lexsort((values, groups))
    v, g = values[order], groups[order]
    out = np.zeros(n)
    starts = np.searchsorted(g, np.arange(n))
    sums = np.add.reduceat(v, starts) if v.size else np.zeros(0)
    out[: sums.size] = sums
    return out


def make_perspective_depth_target(cloud: PointCloud, camera: CameraModel) -> DepthMap:
    """Z-buffer of camera-frame depths; ties keep the earlier point."""
    depth = np.zeros((camera.height, camera.width))
    valid = np.zeros_like(depth, dtype=bool)
    u, v, z, idx = project_points(cloud.points, camera)
    if z.size == 0:
        return DepthMap(depth, valid)
    ui, vi = np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)
    pix = vi * camera.width + ui
    order = np.lexsort((idx, z, pix))
    pix, z = pix[order], z[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    flat_d = depth.reshape(-1)
    flat_v = valid.reshape(-1)
    flat_d[pix[first]] = z[first]
    flat_v[pix[first]] = True
    return DepthMap(depth, valid)


def make_bev_depth_target(cloud: PointCloud, grid: GridSpec) -> DepthMap:
    """Distance from the grid top (z_max) down to the highest return per column."""
    X, Y, _ = grid.extents
    depth = np.zeros((X, Y))
    valid = np.zeros((X, Y), dtype=bool)
    pts = cloud.points
    if pts.shape[0] == 0:
        return DepthMap(depth, valid)
    lo, size = np.asarray(grid.lo), np.asarray(grid.size)
    ij = np.floor((pts[:, :2] - lo[:2]) / size[:2]).astype(np.int64)
    z = pts[:, 2]
    keep = (ij[:, 0] >= 0) & (ij[:, 0] < X) & (ij[:, 1] >= 0) & (ij[:, 1] < Y)
    keep &= (z >= grid.lo[2]) & (z <= grid.hi[2])
    ij, z = ij[keep], z[keep]
    top = np.full((X, Y), -np.inf)
    np.maximum.at(top, (ij[:, 0], ij[:, 1]), z)
    valid = np.isfinite(top)
    depth[valid] = grid.hi[2] - top[valid]
    return DepthMap(depth, valid)


# -- datasets -------------------------------------------------------------------

@dataclass
class Sample:
    """One training example: synchronized images, cameras and a LiDAR sweep."""

    images: list[ImageFrame]
    cameras: list[CameraModel]
    cloud: PointCloud
    scene: dict | None = None  # serialized scene, when known (synthetic data)
    meta: dict = field(default_factory=dict)


def save_manifest(samples: list[Sample], root, grid: GridSpec | None = None, extra: dict | None = None) -> Path:
    """Write samples under ``root`` and a ``manifest.json`` describing them."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, s in enumerate(samples):
        name = f"sample_{k:04d}"
        save_point_cloud_bin(s.cloud, root / f"{name}.bin")
        cams = []
        for c, (img, cam) in enumerate(zip(s.images, s.cameras)):
            fn = f"{name}_cam{c}.ppm"
            save_image_ppm(img, root / fn)
            cams.append({"image": fn, **cam.to_manifest()})
        entry = {"lidar": f"{name}.bin", "cameras": cams}
        if s.scene is not None:
            fn = f"{name}_scene.json"
            (root / fn).write_text(json.dumps(s.scene, indent=1))
            entry["scene"] = fn
        entries.append(entry)
    manifest = {"format": "nsmae-dataset-1", "samples": entries}
    if grid is not None:
        manifest["grid"] = grid.to_dict()
    if extra:
        manifest.update(extra)
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_manifest(path) -> list[Sample]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("format") != "nsmae-dataset-1":
        raise FormatError(f"{path}: not a dataset manifest (format={doc.get('format')!r})")
    root = path.parent
    samples = []
    for entry in doc["samples"]:
        cams = [CameraModel.from_manifest(c) for c in entry["cameras"]]
        images = [load_image_ppm(root / c["image"]) for c in entry["cameras"]]
        for img, cam, c in zip(images, cams, entry["cameras"]):
            if (img.width, img.height) != (cam.width, cam.height):
                raise FormatError(f"{c['image']}: image size does not match camera")
        scene = json.loads((root / entry["scene"]).read_text()) if "scene" in entry else None
        samples.append(Sample(images, cams, load_point_cloud_bin(root / entry["lidar"]), scene))
    return samples


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
