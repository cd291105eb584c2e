"""Synthetic scenes of constant-density boxes and spheres, with analytic oracles.

Density is piecewise constant along any ray, so the volume-rendering
integrals have closed forms between primitive boundaries.  The oracle here
never samples: it partitions each ray at the boundaries and integrates every
piece exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, special

from .dataio import ImageFrame, PointCloud
from .geometry import CameraModel, GridSpec, RayBatch

SURFACE_OPTICAL_DEPTH = math.log(2.0)
LUMA = np.array([0.2126, 0.7152, 0.0722])


@dataclass(frozen=True)
class Primitive:
    shape: str  # "box" | "sphere"
    center: tuple
    size: tuple  # box: half extents; sphere: (radius,)
    density: float  # per meter
    color: tuple

    def __post_init__(self):
        if self.shape not in ("box", "sphere"):
            raise ValueError(f"unknown primitive shape {self.shape!r}")
        if not self.density > 0:
            raise ValueError("primitive density must be positive")
        if any(s <= 0 for s in self.size):
            raise ValueError("primitive extents must be positive")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center, dtype=np.float64)
        h = np.full(3, self.size[0]) if self.shape == "sphere" else np.asarray(self.size, dtype=np.float64)
        return c - h, c + h

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        c = np.asarray(self.center)
        if self.shape == "sphere":
            return np.sum((p - c) ** 2, axis=-1) <= self.size[0] ** 2
        lo, hi = self.bounds()
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry/exit distances per ray; misses give entry = +inf, exit = -inf."""
        if self.shape == "sphere":
            oc = origins - np.asarray(self.center)
            b = np.einsum("ij,ij->i", dirs, oc)
            cc = np.einsum("ij,ij->i", oc, oc) - self.size[0] ** 2
            disc = b * b - cc
            hit = disc > 0
            root = np.sqrt(np.where(hit, disc, 0.0))
            return np.where(hit, -b - root, np.inf), np.where(hit, -b + root, -np.inf)
        lo, hi = self.bounds()
        t_in = np.full(origins.shape[0], -np.inf)
        t_out = np.full(origins.shape[0], np.inf)
        for ax in range(3):
            o, d = origins[:, ax], dirs[:, ax]
            par = d == 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (lo[ax] - o) / d
                t2 = (hi[ax] - o) / d
            near = np.where(par, np.where((o >= lo[ax]) & (o <= hi[ax]), -np.inf, np.inf), np.minimum(t1, t2))
            far = np.where(par, np.where((o >= lo[ax]) & (o <= hi[ax]), np.inf, -np.inf), np.maximum(t1, t2))
            t_in = np.maximum(t_in, near)
            t_out = np.minimum(t_out, far)
        miss = t_in >= t_out
        return np.where(miss, np.inf, t_in), np.where(miss, -np.inf, t_out)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": list(self.center), "size": list(self.size),
                "density": self.density, "color": list(self.color)}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["shape"], tuple(d["center"]), tuple(d["size"]), float(d["density"]), tuple(d["color"]))


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    seed: int | None = None

    def to_dict(self) -> dict:
        return {"seed": self.seed, "primitives": [p.to_dict() for p in self.primitives]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls([Primitive.from_dict(p) for p in d["primitives"]], d.get("seed"))

    def occupancy(self, points: np.ndarray) -> np.ndarray:
        """True where a point lies inside any primitive."""
        p = np.asarray(points, dtype=np.float64)
        out = np.zeros(p.shape[:-1], dtype=bool)
        for prim in self.primitives:
            out |= prim.contains(p)
        return out

    def field(self, points: np.ndarray, dirs: np.ndarray | None = None):
        """Point-wise density and density-weighted color, shapes (S,) and (S, 3)."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        sigma = np.zeros(p.shape[0])
        mix = np.zeros((p.shape[0], 3))
        for prim in self.primitives:
            inside = prim.contains(p)
            sigma += inside * prim.density
            mix += inside[:, None] * prim.density * np.asarray(prim.color)
        color = np.divide(mix, sigma[:, None], out=np.zeros_like(mix), where=sigma[:, None] > 0)
        return sigma, color


def generate_scene(seed: int, count_range: tuple[int, int] = (1, 4), grid: GridSpec | None = None,
                   shapes: tuple[str, ...] = ("box", "sphere"), clear_radius: float = 0.0,
                   size_range: tuple[float, float] = (0.3, 1.0),
                   density_range: tuple[float, float] = (4.0, 20.0)) -> SceneSpec:
    """Random primitives fully inside ``grid``, none within ``clear_radius`` of the origin."""
    lo_c, hi_c = count_range
    if lo_c < 1 or hi_c < lo_c:
        raise ValueError(f"invalid primitive count range {count_range}")
    if grid is None:
        grid = GridSpec((-4, -4, -2), (4, 4, 2), (0.5, 0.5, 0.5))
    rng = np.random.default_rng(seed)
    g_lo, g_hi = np.asarray(grid.lo), np.asarray(grid.hi)
    n = int(rng.integers(lo_c, hi_c + 1))
    prims: list[Primitive] = []
    while len(prims) < n:
        shape = shapes[int(rng.integers(len(shapes)))]
        if shape == "box":
            half = rng.uniform(*size_range, size=3)
            half = np.minimum(half, 0.49 * (g_hi - g_lo))
            size = tuple(float(h) for h in half)
        else:
            r = float(min(rng.uniform(*size_range), 0.49 * float(np.min(g_hi - g_lo))))
            half = np.full(3, r)
            size = (r,)
        center = rng.uniform(g_lo + half, g_hi - half)
        color = tuple(float(c) for c in rng.uniform(0.05, 1.0, size=3))
        density = float(rng.uniform(*density_range))
        prim = Primitive(shape, tuple(float(c) for c in center), size, density, color)
        if clear_radius > 0 and _min_distance_to_origin(prim) < clear_radius:
            continue
        prims.append(prim)
    return SceneSpec(prims, seed)


def _min_distance_to_origin(prim: Primitive) -> float:
    c = np.asarray(prim.center)
    if prim.shape == "sphere":
        return max(0.0, float(np.linalg.norm(c)) - prim.size[0])
    lo, hi = prim.bounds()
    nearest = np.clip(np.zeros(3), lo, hi)
    return float(np.linalg.norm(nearest))


# -- analytic oracle --------------------------------------------------------------

@dataclass
class OracleResult:
    color: np.ndarray  # (R, 3)
    depth: np.ndarray  # (R,) expected distance beyond ``near``
    transmittance: np.ndarray  # (R,) at the far end
    optical_depth: np.ndarray  # (R,)
    cell_depth: np.ndarray | None = None  # (R,) cell-start analog, when cells were given


def _segments(origins, dirs, near, far, scene: SceneSpec, cell: float | None):
    R = origins.shape[0]
    bounds = [np.full((R, 1), near), np.full((R, 1), far)]
    spans = []
    for prim in scene.primitives:
        t_in, t_out = prim.intersect(origins, dirs)
        a = np.clip(t_in, near, far)
        b = np.clip(t_out, near, far)
        miss = ~(a < b)
        a, b = np.where(miss, near, a), np.where(miss, near, b)
        spans.append((a, b, prim))
        bounds += [a[:, None], b[:, None]]
    if cell is not None:
        n_cells = int(round((far - near) / cell))
        bounds.append(np.broadcast_to(near + np.arange(n_cells + 1) * cell, (R, n_cells + 1)))
    t = np.sort(np.concatenate(bounds, axis=1), axis=1)
    lo, hi = t[:, :-1], t[:, 1:]
    mid = 0.5 * (lo + hi)
    sigma = np.zeros_like(mid)
    mix = np.zeros(mid.shape + (3,))
    for a, b, prim in spans:
        inside = (mid > a[:, None]) & (mid < b[:, None])
        sigma += inside * prim.density
        mix += inside[..., None] * prim.density * np.asarray(prim.color)
    color = np.divide(mix, sigma[..., None], out=np.zeros_like(mix), where=sigma[..., None] > 0)
    return lo, hi, sigma, color


def oracle_render(rays: RayBatch, scene: SceneSpec, far: float | None = None,
                  cell: float | None = None) -> OracleResult:
    """Exact volume rendering over [near, far] for a batch of rays.

    ``far`` defaults to the renderer's range ``near + N * delta``.  When
    ``cell`` is given, the result also carries the continuous analog of the
    discrete depth sum: the weight density integrated against the distance
    from ``near`` to the start of the containing cell of width ``cell``.
    """
    near = rays.near
    far = near + rays.n_samples * rays.delta if far is None else far
    lo, hi, sigma, color = _segments(rays.origins, rays.directions, near, far, scene, cell)
    length = hi - lo
    tau = sigma * length
    before = np.cumsum(tau, axis=1) - tau
    T_a = np.exp(-before)
    alpha = -np.expm1(-tau)
    w = T_a * alpha
    out_color = np.einsum("rs,rsc->rc", w, color)
    # integral of T(t) sigma (t - near) over a constant-density piece
    with np.errstate(divide="ignore", invalid="ignore"):
        inner = np.where(sigma > 0, (alpha - tau * np.exp(-tau)) / sigma, 0.0)
    depth = np.sum(T_a * ((lo - near) * alpha + inner), axis=1)
    total = tau.sum(axis=1)
    cell_depth = None
    if cell is not None:
        start = np.floor((0.5 * (lo + hi) - near) / cell) * cell
        cell_depth = np.sum(w * start, axis=1)
    return OracleResult(out_color, depth, np.exp(-total), total, cell_depth)


def first_surface(origins: np.ndarray, dirs: np.ndarray, scene: SceneSpec, near: float = 0.0,
                  far: float = 1e3, threshold: float = SURFACE_OPTICAL_DEPTH):
    """Distance where optical depth first reaches ``threshold`` (inf if never) and the color there."""
    lo, hi, sigma, color = _segments(origins, dirs, near, far, scene, None)
    tau = sigma * (hi - lo)
    after = np.cumsum(tau, axis=1)
    before = after - tau
    crossing = (before < threshold) & (after >= threshold) & (sigma > 0)
    hit = crossing.any(axis=1)
    k = np.argmax(crossing, axis=1)
    rows = np.arange(origins.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        t = lo[rows, k] + (threshold - before[rows, k]) / sigma[rows, k]
    t = np.where(hit, t, np.inf)
    return t, color[rows, k] * hit[:, None]


def sample_lidar(scene: SceneSpec, origin, n_azimuth: int, n_elevation: int,
                 elevation_range: tuple[float, float] = (-30.0, 30.0), max_range: float = 100.0,
                 threshold: float = SURFACE_OPTICAL_DEPTH) -> PointCloud:
    """Spinning-LiDAR simulation on a regular angular grid.

    Each ray returns the point where accumulated optical depth crosses
    ``threshold``, with intensity equal to the luminance of the material there.
    """
    if n_azimuth < 1 or n_elevation < 1:
        raise ValueError("angular sample counts must be positive")
    az = 2.0 * np.pi * np.arange(n_azimuth) / n_azimuth
    if n_elevation == 1:
        el = np.array([0.5 * (elevation_range[0] + elevation_range[1])])
    else:
        el = np.linspace(*elevation_range, n_elevation)
    el = np.radians(el)
    A, E = np.meshgrid(az, el, indexing="ij")
    dirs = np.stack([np.cos(E) * np.cos(A), np.cos(E) * np.sin(A), np.sin(E)], axis=-1).reshape(-1, 3)
    origin = np.asarray(origin, dtype=np.float64)
    origins = np.broadcast_to(origin, dirs.shape)
    t, col = first_surface(origins, dirs, scene, 0.0, max_range, threshold)
    hit = np.isfinite(t)
    pts = origin + t[hit, None] * dirs[hit]
    return PointCloud(np.concatenate([pts, (col[hit] @ LUMA)[:, None]], axis=1))


def rasterize_image(scene: SceneSpec, camera: CameraModel, far: float = 100.0) -> ImageFrame:
    """Oracle color through every pixel center (no quantization)."""
    vv, uu = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1) + 0.5
    dirs = camera.backproject(uv)
    rays = RayBatch(np.broadcast_to(camera.center, dirs.shape), dirs, 0.0, far, 1, "PER", uv.astype(np.int64))
    res = oracle_render(rays, scene, far=far)
    return ImageFrame(np.clip(res.color, 0.0, 1.0).reshape(camera.height, camera.width, 3))


# -- smooth fields ----------------------------------------------------------------

@dataclass
class SmoothField:
    """Sum of isotropic Gaussian density blobs, each carrying a constant color."""

    centers: np.ndarray  # (B, 3)
    widths: np.ndarray  # (B,)
    peaks: np.ndarray  # (B,) peak density per meter
    colors: np.ndarray  # (B, 3)

    @classmethod
    def random(cls, seed: int, n_blobs: int = 3, lo=(1.0, -1.0, -1.0), hi=(5.0, 1.0, 1.0)) -> "SmoothField":
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(lo, hi, size=(n_blobs, 3)), rng.uniform(0.5, 1.0, n_blobs),
                   rng.uniform(0.3, 1.5, n_blobs), rng.uniform(0.1, 1.0, size=(n_blobs, 3)))

    def __call__(self, points: np.ndarray, dirs: np.ndarray | None = None):
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d2 = np.sum((p[:, None, :] - self.centers[None]) ** 2, axis=-1)
        each = self.peaks * np.exp(-0.5 * d2 / self.widths ** 2)
        sigma = each.sum(axis=1)
        color = np.divide(each @ self.colors, sigma[:, None], out=np.zeros((p.shape[0], 3)),
                          where=sigma[:, None] > 0)
        return sigma, color

    def oracle(self, origin, direction, near: float, far: float) -> tuple[np.ndarray, float, float]:
        """Reference (color, depth beyond near, transmittance) via closed-form optical depth."""
        o, d = np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64)
        rel = self.centers - o
        tk = rel @ d
        rho2 = np.sum(rel ** 2, axis=1) - tk ** 2
        amp = self.peaks * np.exp(-0.5 * rho2 / self.widths ** 2)
        s = self.widths
        scale = amp * s * math.sqrt(math.pi / 2.0)

        def tau(t):
            return float(np.sum(scale * (special.erf((t - tk) / (s * math.sqrt(2.0)))
                                         - special.erf((near - tk) / (s * math.sqrt(2.0))))))

        def sig_each(t):
            return amp * np.exp(-0.5 * (t - tk) ** 2 / s ** 2)

        pts = [float(x) for x in tk if near < x < far]
        kw = dict(points=pts or None, limit=200, epsabs=1e-14, epsrel=1e-13)
        color = np.array([
            integrate.quad(lambda t, c=c: math.exp(-tau(t)) * float(sig_each(t) @ self.colors[:, c]),
                           near, far, **kw)[0]
            for c in range(3)
        ])
        depth = integrate.quad(lambda t: math.exp(-tau(t)) * float(sig_each(t).sum()) * (t - near),
                               near, far, **kw)[0]
        return color, depth, math.exp(-tau(far))
