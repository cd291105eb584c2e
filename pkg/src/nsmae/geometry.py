"""Pinhole cameras, ray batches and the world-aligned voxel grid.

Conventions: camera frame is x right, y down, z forward.  ``pose`` maps
camera coordinates to world coordinates, ``X_w = R @ X_c + t``.  Integer
pixel (u, v) covers [u, u+1) x [v, v+1) and rays pass through its center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PER = "PER"
BEV = "BEV"

PERSPECTIVE_NEAR = 0.5
BEV_NEAR = 0.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    K: np.ndarray  # 3x3 intrinsics
    R: np.ndarray  # 3x3 rotation, camera -> world
    t: np.ndarray  # translation (camera center in world), meters
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        fx, fy, cx, cy = K[0, 0], K[1, 1], K[0, 2], K[1, 2]
        if not (fx > 0 and fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={fx}, fy={fy}")
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise GeometryError(f"principal point ({cx}, {cy}) outside {self.width}x{self.height} image")
        if K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise GeometryError("intrinsics must be upper triangular with K[2,2] == 1")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("pose rotation is not orthonormal with determinant +1")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float, R=np.eye(3), t=np.zeros(3)):
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
        K = np.array([[f, 0.0, width / 2.0], [0.0, f, height / 2.0], [0.0, 0.0, 1.0]])
        return cls(K, R, t, width, height)

    @property
    def center(self) -> np.ndarray:
        return self.t

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.t) @ self.R

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def backproject(self, uv: np.ndarray) -> np.ndarray:
        """Unit world-space directions through continuous pixel coordinates ``uv``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
        homog = np.concatenate([uv, np.ones((uv.shape[0], 1))], axis=1)
        d_cam = np.linalg.solve(self.K, homog.T).T
        d = d_cam @ self.R.T
        return d / np.linalg.norm(d, axis=1, keepdims=True)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates and camera-frame depth of world points."""
        pc = self.world_to_camera(np.atleast_2d(points))
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            proj = pc @ self.K.T
            uv = proj[:, :2] / proj[:, 2:3]
        return uv, z

    def to_manifest(self) -> dict:
        pose = np.concatenate([self.R, self.t[:, None]], axis=1)
        return {
            "width": self.width,
            "height": self.height,
            "K": self.K.reshape(-1).tolist(),
            "pose": pose.reshape(-1).tolist(),
        }

    @classmethod
    def from_manifest(cls, d: dict) -> "CameraModel":
        pose = np.asarray(d["pose"], dtype=np.float64).reshape(3, 4)
        return cls(np.asarray(d["K"]).reshape(3, 3), pose[:, :3], pose[:, 3], int(d["width"]), int(d["height"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``eye`` looking at ``target``."""
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    fwd = target - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-12:
        raise GeometryError("look_at: forward axis parallel to up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return np.stack([right, down, fwd], axis=1)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    delta: float
    n_samples: int

    def __post_init__(self):
        if abs(float(np.linalg.norm(self.direction)) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        if not (self.delta > 0 and self.n_samples >= 1):
            raise GeometryError(f"invalid sampling delta={self.delta}, N={self.n_samples}")


@dataclass
class RayBatch:
    """Struct-of-arrays batch of rays sharing a view tag and (delta, N)."""

    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3)
    near: float
    delta: float
    n_samples: int
    view: str
    index: np.ndarray  # (R, 2) pixel (u, v) or BEV cell (i, j)

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.float64).reshape(-1, 3)
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.index = np.asarray(self.index, dtype=np.int64).reshape(-1, 2)
        if self.view not in (PER, BEV):
            raise GeometryError(f"unknown view tag {self.view!r}")
        if self.origins.shape != self.directions.shape or self.index.shape[0] != self.origins.shape[0]:
            raise GeometryError("origins, directions and index disagree on the ray count")
        if self.directions.size and np.max(np.abs(np.linalg.norm(self.directions, axis=1) - 1.0)) > 1e-9:
            raise GeometryError("ray directions must be unit length")
        if not (self.delta > 0 and self.n_samples >= 1):
            raise GeometryError(f"invalid sampling delta={self.delta}, N={self.n_samples}")

    def __len__(self) -> int:
        return self.origins.shape[0]

    def __getitem__(self, k: int) -> Ray:
        return Ray(self.origins[k], self.directions[k], self.near, self.delta, self.n_samples)

    def subset(self, rows) -> "RayBatch":
        rows = np.asarray(rows, dtype=np.int64)
        return RayBatch(self.origins[rows], self.directions[rows], self.near, self.delta,
                        self.n_samples, self.view, self.index[rows])

    def sample_t(self) -> np.ndarray:
        """Midpoint sample distances t_i = near + (i - 1/2) delta, i = 1..N."""
        return self.near + (np.arange(self.n_samples) + 0.5) * self.delta

    def sample_points(self) -> np.ndarray:
        """World positions of every sample, shape (R, N, 3)."""
        t = self.sample_t()
        return self.origins[:, None, :] + t[None, :, None] * self.directions[:, None, :]

    @classmethod
    def from_rays(cls, rays: list[Ray], view: str, index) -> "RayBatch":
        if len({(r.delta, r.n_samples, r.near) for r in rays}) > 1:
            raise GeometryError("rays in a batch must share near, delta and N")
        r0 = rays[0]
        return cls(np.stack([r.origin for r in rays]), np.stack([r.direction for r in rays]),
                   r0.near, r0.delta, r0.n_samples, view, index)


@dataclass(frozen=True)
class GridSpec:
    lo: tuple  # (x_min, y_min, z_min) meters
    hi: tuple  # (x_max, y_max, z_max) meters
    size: tuple  # voxel edge per axis, meters
    extents: tuple = field(init=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        size = tuple(float(v) for v in self.size)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "size", size)
        if not all(math.isfinite(v) for v in lo + hi):
            raise GeometryError("grid range must be finite")
        if any(s <= 0 for s in size):
            raise GeometryError(f"voxel size must be positive, got {size}")
        ext = tuple(int(round((h - l) / s)) for l, h, s in zip(lo, hi, size))
        if any(e < 1 for e in ext):
            raise GeometryError(f"empty grid: extents {ext}")
        object.__setattr__(self, "extents", ext)

    @property
    def n_voxels(self) -> int:
        X, Y, Z = self.extents
        return X * Y * Z

    def flat_index(self, ijk: np.ndarray) -> np.ndarray:
        ijk = np.asarray(ijk, dtype=np.int64)
        X, Y, Z = self.extents
        return (ijk[..., 0] * Y + ijk[..., 1]) * Z + ijk[..., 2]

    def unflat_index(self, flat: np.ndarray) -> np.ndarray:
        X, Y, Z = self.extents
        flat = np.asarray(flat, dtype=np.int64)
        return np.stack([flat // (Y * Z), (flat // Z) % Y, flat % Z], axis=-1)

    def voxel_centers(self) -> np.ndarray:
        """Centers of all voxels in flat (x-major, z-fastest) order, shape (V, 3)."""
        axes = [l + (np.arange(e) + 0.5) * s for l, e, s in zip(self.lo, self.extents, self.size)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([a.reshape(-1) for a in g], axis=1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def to_dict(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi), "size": list(self.size)}


def perspective_rays(camera: CameraModel, stride: int, delta: float, n_samples: int,
                     near: float = PERSPECTIVE_NEAR) -> RayBatch:
    """One ray per ``stride``-th pixel, through the pixel center."""
    if stride < 1:
        raise GeometryError(f"stride must be positive, got {stride}")
    us = np.arange(0, camera.width, stride)
    vs = np.arange(0, camera.height, stride)
    vv, uu = np.meshgrid(vs, us, indexing="ij")
    index = np.stack([uu.ravel(), vv.ravel()], axis=1)
    dirs = camera.backproject(index + 0.5)
    origins = np.broadcast_to(camera.center, dirs.shape)
    return RayBatch(origins, dirs, near, delta, n_samples, PER, index)


def bev_rays(grid: GridSpec, delta: float) -> RayBatch:
    """Downward orthographic rays from z_max through every BEV cell center."""
    X, Y, _ = grid.extents
    z_lo, z_hi = grid.lo[2], grid.hi[2]
    n = int(math.ceil((z_hi - z_lo) / delta - 1e-9))
    ii, jj = np.meshgrid(np.arange(X), np.arange(Y), indexing="ij")
    index = np.stack([ii.ravel(), jj.ravel()], axis=1)
    xs = grid.lo[0] + (index[:, 0] + 0.5) * grid.size[0]
    ys = grid.lo[1] + (index[:, 1] + 0.5) * grid.size[1]
    origins = np.stack([xs, ys, np.full_like(xs, z_hi)], axis=1)
    dirs = np.broadcast_to(np.array([0.0, 0.0, -1.0]), origins.shape)
    return RayBatch(origins, dirs, BEV_NEAR, delta, max(n, 1), BEV, index)


def project_points(points: np.ndarray, camera: CameraModel):
    """Project world points into ``camera``.

    Returns ``(u, v, depth, index)`` arrays restricted to points in front of
    the camera whose projection falls inside the image.
    """
    pts = getattr(points, "points", points)
    xyz = np.asarray(pts, dtype=np.float64).reshape(-1, np.shape(pts)[-1])[:, :3]
    if xyz.shape[0] == 0:
        empty = np.zeros(0)
        return empty, empty, empty, np.zeros(0, dtype=np.int64)
    uv, z = camera.project(xyz)
    ok = z > 0
    with np.errstate(invalid="ignore"):
        ok &= (uv[:, 0] >= 0) & (uv[:, 0] < camera.width) & (uv[:, 1] >= 0) & (uv[:, 1] < camera.height)
    idx = np.nonzero(ok)[0]
    return uv[idx, 0], uv[idx, 1], z[idx], idx
