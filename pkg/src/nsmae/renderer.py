"""Conditional radiance field and discrete volume rendering.

Rendering works on any *field*: an object with
``query(points (R, N, 3), dirs (R, 3), need_color) -> (sigma (R, N), color (R, N, 3) | None)``.
Analytic numpy fields and the learned :class:`NeuralField` share the same
compositing code; with a learned field every quantity is a tape variable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndgrad as ng
from .geometry import BEV, PER, GridSpec, Ray, RayBatch

N_FREQ = 4


@dataclass
class FeatureVolume:
    """Dense world-aligned features stored flat as (X*Y*Z, C), z fastest."""

    grid: GridSpec
    values: object  # ndarray or ng.Var of shape (V, C)
    tag: str = "fused"

    @property
    def channels(self) -> int:
        return ng.value(self.values).shape[1]

    def dense(self) -> np.ndarray:
        return ng.value(self.values).reshape(*self.grid.extents, self.channels)


@dataclass
class RenderedMap:
    value: object  # (R, K) for vector modalities, (R,) for depth
    weights: object  # (R, N)
    transmittance: object  # (R, N): T_i
    final_transmittance: object  # (R,): T_{N+1}
    view: str


class PointField:
    """Adapts ``fn(points (S, 3), dirs (S, 3)) -> (sigma (S,), color (S, 3))``."""

    def __init__(self, fn: Callable):
        self.fn = fn

    def query(self, points, dirs, need_color=True):
        R, N, _ = points.shape
        d = np.repeat(dirs, N, axis=0)
        sigma, color = self.fn(points.reshape(-1, 3), d)
        return np.asarray(sigma).reshape(R, N), np.asarray(color).reshape(R, N, 3)


def as_field(field):
    return field if hasattr(field, "query") else PointField(field)


def positional_encoding(u: np.ndarray, n_freq: int = N_FREQ) -> np.ndarray:
    """[sin(2^k pi u), cos(2^k pi u)] for k < n_freq, per input column."""
    freqs = np.pi * 2.0 ** np.arange(n_freq)
    ang = u[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).reshape(u.shape[0], 2 * n_freq * u.shape[-1])


def trilinear_index(grid: GridSpec, points: np.ndarray, offsets: np.ndarray | None = None,
                    n_rows: int | None = None) -> ng.GatherIndex:
    """Eight-corner interpolation weights between voxel centers (edge-clamped)."""
    lo, size = np.asarray(grid.lo), np.asarray(grid.size)
    ext = np.asarray(grid.extents)
    f = (points - lo) / size - 0.5
    f = np.clip(f, 0.0, ext - 1)
    i0 = np.minimum(np.floor(f).astype(np.int64), np.maximum(ext - 2, 0))
    frac = f - i0
    i1 = np.minimum(i0 + 1, ext - 1)
    idx = []
    wts = []
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                ijk = np.stack([(i1 if c else i0)[:, a] for a, c in enumerate((cx, cy, cz))], axis=1)
                w = np.ones(points.shape[0])
                for a, c in enumerate((cx, cy, cz)):
                    w = w * (frac[:, a] if c else 1.0 - frac[:, a])
                idx.append(grid.flat_index(ijk))
                wts.append(w)
    idx = np.stack(idx, axis=1)
    if offsets is not None:
        idx = idx + offsets[:, None]
    return ng.GatherIndex(idx, np.stack(wts, axis=1), n_rows or grid.n_voxels)


def init_render_params(rng: np.random.Generator, channels: int, hidden: int) -> dict[str, np.ndarray]:
    pe = 3 * 2 * N_FREQ

    def dense(n_in, n_out):
        return rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out))

    return {
        "render.sigma.w1": dense(channels + pe, hidden),
        "render.sigma.b1": np.zeros(hidden),
        "render.sigma.w2": dense(hidden, 1),
        "render.sigma.b2": np.zeros(1),
        "render.color.w1": dense(channels + 2 * pe, hidden),
        "render.color.b1": np.zeros(hidden),
        "render.color.w2": dense(hidden, 3),
        "render.color.b2": np.zeros(3),
    }


class NeuralField:
    """f(x, omega, e) -> (sigma, c) conditioned on one or more feature volumes.

    ``volume.values`` may stack several volumes of the same grid row-wise;
    ``ray_volume[r]`` then selects the volume that ray ``r`` reads.  Points
    outside the grid box have zero density and radiance.
    """

    def __init__(self, volume: FeatureVolume, params: dict, ray_volume: np.ndarray | None = None):
        self.volume = volume
        self.params = params
        self.ray_volume = ray_volume

    def features_at(self, points: np.ndarray, which: np.ndarray | None = None):
        grid = self.volume.grid
        table = self.volume.values
        offsets = None if which is None else which * grid.n_voxels
        index = trilinear_index(grid, points, offsets, ng.value(table).shape[0])
        return ng.gather(table, index)

    def query_samples(self, points: np.ndarray, dirs: np.ndarray, which: np.ndarray | None = None,
                      need_color: bool = True):
        """Density (S,) and color (S, 3) at in-grid sample points."""
        grid = self.volume.grid
        lo, hi = np.asarray(grid.lo), np.asarray(grid.hi)
        p = self.params
        feat = self.features_at(points, which)
        u = 2.0 * (points - lo) / (hi - lo) - 1.0
        pe = positional_encoding(u)
        h = ng.softplus(ng.concat([feat, pe], axis=1) @ p["render.sigma.w1"] + p["render.sigma.b1"])
        sigma = ng.reshape(ng.softplus(h @ p["render.sigma.w2"] + p["render.sigma.b2"]), (-1,))
        if not need_color:
            return sigma, None
        de = positional_encoding(dirs)
        hc = ng.softplus(ng.concat([feat, pe, de], axis=1) @ p["render.color.w1"] + p["render.color.b1"])
        color = ng.sigmoid(hc @ p["render.color.w2"] + p["render.color.b2"])
        return sigma, color

    def query(self, points, dirs, need_color=True):
        R, N, _ = points.shape
        flat = points.reshape(-1, 3)
        inside = np.nonzero(self.volume.grid.contains(flat))[0]
        ray_of = inside // N
        if inside.size == 0:
            return np.zeros((R, N)), (np.zeros((R, N, 3)) if need_color else None)
        which = None if self.ray_volume is None else np.asarray(self.ray_volume)[ray_of]
        sigma_in, color_in = self.query_samples(flat[inside], dirs[ray_of], which, need_color)
        # scatter in-grid samples into the dense (R*N) sample layout, zeros elsewhere
        slot = np.full(R * N, -1, dtype=np.int64)
        slot[inside] = np.arange(inside.size)
        scatter = ng.GatherIndex(slot, np.ones(R * N), inside.size)
        sigma = ng.reshape(ng.gather(ng.reshape(sigma_in, (-1, 1)), scatter), (R, N))
        color = None
        if need_color:
            color = ng.reshape(ng.gather(color_in, scatter), (R, N, 3))
        return sigma, color


def query_field(volume: FeatureVolume, x, omega, params):
    """Density and color at world points ``x`` (S, 3) viewed along ``omega`` (S, 3)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    omega = np.broadcast_to(np.asarray(omega, dtype=np.float64), x.shape)
    field = NeuralField(volume, params)
    sigma, color = field.query(x[:, None, :], omega, need_color=True)
    return ng.reshape(sigma, (-1,)), ng.reshape(color, (-1, 3))


# -- compositing ------------------------------------------------------------------

def composite(sigma, delta: float):
    """Transmittance T_i, weights w_i = T_i (1 - exp(-sigma_i delta)) and T_{N+1}."""
    tau = sigma * delta
    T = ng.exp(-ng.cumsum_exclusive(tau, axis=1))
    alpha = 1.0 - ng.exp(-tau)
    w = T * alpha
    T_final = ng.exp(-ng.sum_(tau, axis=1))
    return T, w, T_final


def cumulative_distance(rays: RayBatch) -> np.ndarray:
    """Distance from ``near`` to the start of each sample interval, sum_{j<i} delta_j."""
    return ng.cumsum_exclusive(np.full((1, rays.n_samples), rays.delta), axis=1)[0]


HEADS = ("color", "depth", "opacity")


def _jittered_points(rays: RayBatch, jitter: np.ndarray | None) -> np.ndarray:
    t = rays.sample_t()[None, :]
    if jitter is not None:
        t = t + np.asarray(jitter)[:, None] * rays.delta
    return rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]


def render_modality(rays: RayBatch | Ray, field, head: str | Callable, jitter=None) -> RenderedMap:
    """sum_i w_i a_i for one modality radiance ``a``.

    ``head`` is ``"color"``, ``"depth"`` (a = distance to the sample start),
    ``"opacity"`` (a = 1) or a callable ``points (R, N, 3) -> a (R, N, K)``.
    """
    if isinstance(rays, Ray):
        rays = RayBatch.from_rays([rays], PER, [(0, 0)])
    if not (callable(head) or head in HEADS):
        raise ValueError(f"unknown rendering head {head!r}; expected one of {HEADS} or a callable")
    field = as_field(field)
    points = _jittered_points(rays, jitter)
    need_color = head == "color"
    sigma, color = field.query(points, rays.directions, need_color=need_color)
    T, w, T_final = composite(sigma, rays.delta)
    return RenderedMap(_head_value(head, rays, w, color, points), w, T, T_final, rays.view)


def _head_value(head, rays: RayBatch, w, color, points):
    if head == "depth":
        return ng.sum_(w * cumulative_distance(rays)[None, :], axis=1)
    if head == "opacity":
        return ng.sum_(w, axis=1)
    a = color if head == "color" else head(points)
    return ng.sum_(ng.reshape(w, (len(rays), rays.n_samples, 1)) * a, axis=1)


def render_color(ray, field, jitter=None):
    m = render_modality(ray, field, "color", jitter)
    return m.value, m


def render_depth(ray, field, jitter=None):
    """Expected distance beyond ``near`` to the sample-interval start; add ``near`` for range."""
    m = render_modality(ray, field, "depth", jitter)
    return m.value, m


def render_view(rays: RayBatch, volume: FeatureVolume, params: dict, heads=None,
                ray_volume: np.ndarray | None = None, jitter=None) -> dict[str, RenderedMap]:
    """Render one homogeneous batch: color + depth for perspective, depth for BEV."""
    if heads is None:
        heads = ("color", "depth") if rays.view == PER else ("depth",)
    if len(rays) == 0:
        empty = {"color": np.zeros((0, 3)), "depth": np.zeros(0)}
        z = np.zeros((0, rays.n_samples))
        return {h: RenderedMap(empty.get(h, np.zeros(0)), z, z, np.zeros(0), rays.view) for h in heads}
    field = NeuralField(volume, params, ray_volume)
    points = _jittered_points(rays, jitter)
    need_color = "color" in heads
    sigma, color = field.query(points, rays.directions, need_color=need_color)
    T, w, T_final = composite(sigma, rays.delta)
    out = {}
    for h in heads:
        if h not in HEADS:
            raise ValueError(f"unknown rendering head {h!r}")
        out[h] = RenderedMap(_head_value(h, rays, w, color, points), w, T, T_final, rays.view)
    return out


__all__ = [
    "BEV", "PER", "FeatureVolume", "NeuralField", "PointField", "RenderedMap", "composite",
    "init_render_params", "positional_encoding", "query_field", "render_color", "render_depth",
    "render_modality", "render_view", "trilinear_index",
]
