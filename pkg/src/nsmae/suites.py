"""Verification suites shared by the command line and the acceptance tests.

* ``gradient_suite``: central-difference checks of every registered primitive
  and of the full mask -> embed -> render -> loss graph on a tiny instance.
* ``exactness_suite``: discrete rendering against the analytic oracle on
  piecewise-constant fields whose constancy intervals align with samples.
* ``convergence_sweep``: discrete rendering against the smooth-field oracle
  as the sample spacing shrinks.
"""

from __future__ import annotations

import math

import numpy as np

from . import ndgrad as ng
from .config import make_config
from .dataio import ImageFrame, PointCloud, Sample
from .geometry import CameraModel, RayBatch, look_at
from .renderer import PointField, render_modality
from .synth import Primitive, SceneSpec, SmoothField, oracle_render

# -- gradients ----------------------------------------------------------------------


def _primitive_case(name: str, rng: np.random.Generator) -> tuple[ng.Tape, list[np.ndarray]]:
    """A scalar tape exercising primitive ``name`` on random inputs."""
    tape = ng.Tape()
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(3, 4))
    a = tape.input(a0, "a")
    point = [a0]
    if name in ("add", "mul"):
        b = tape.input(b0[:1], "b")  # exercises broadcasting
        point.append(b0[:1])
        out = ng.add(a, b) if name == "add" else ng.mul(a, b)
    elif name == "neg":
        out = ng.neg(a)
    elif name == "exp":
        out = ng.exp(a)
    elif name == "reciprocal":
        a0 = np.abs(a0) + 0.5
        point = [a0]
        tape = ng.Tape()
        out = ng.reciprocal(tape.input(a0, "a"))
    elif name == "softplus":
        out = ng.softplus(a)
    elif name == "sigmoid":
        out = ng.sigmoid(a)
    elif name == "abspow":
        out = ng.abspow(a, 1) + ng.abspow(a, 2)
    elif name == "sin":
        out = ng.sin(a)
    elif name == "cos":
        out = ng.cos(a)
    elif name == "sum":
        out = ng.sum_(a, axis=1)
    elif name == "cumsum_exclusive":
        out = ng.cumsum_exclusive(a, axis=1)
    elif name == "matmul":
        b = tape.input(b0.T, "b")
        point.append(b0.T)
        out = ng.matmul(a, b)
    elif name == "reshape":
        out = ng.reshape(a, (4, 3))
    elif name == "concat":
        b = tape.input(b0, "b")
        point.append(b0)
        out = ng.concat([a, b], axis=0)
    elif name in ("gather", "gather_w"):
        idx = rng.integers(-1, 3, size=(5, 2))
        index = ng.GatherIndex(idx, rng.uniform(size=(5, 2)), 3)
        if name == "gather":
            out = ng.gather(a, index)
        else:
            w0 = rng.uniform(size=(5, 2))
            w = tape.input(w0, "w")
            point.append(w0)
            out = ng.gather(a, index, w)
    else:
        raise KeyError(f"no gradient case for primitive {name!r}")
    # a fixed random projection turns any output into a scalar
    proj = rng.normal(size=ng.value(out).shape)
    ng.sum_(out * proj)
    return tape, point


def primitive_errors(seed: int = 0) -> dict[str, float]:
    """Max relative gradient error for every registered primitive."""
    rng = np.random.default_rng(seed)
    out = {}
    for name in sorted(ng.PRIMITIVES):
        tape, point = _primitive_case(name, rng)
        out[name] = ng.check_gradients(tape, point)
    return out


def tiny_config(seed: int = 0) -> dict:
    """A 4x4x4-voxel, one-camera, two-ray configuration for whole-graph checks."""
    return make_config({
        "seed": seed,
        "data": {"image_size": [16, 16], "cameras": 1},
        "grid": {"lo": [0.0, -1.0, -1.0], "hi": [2.0, 1.0, 1.0], "size": [0.5, 0.5, 0.5]},
        "mask": {"image": {"ratio": 0.5, "patch": 4}, "voxel": {"ratio": 0.5, "mode": "uniform"}},
        "model": {"cam_hidden": 2, "c_img": 2, "lidar_hidden": 2, "c_lidar": 2, "render_hidden": 3},
        "renderer": {"delta_per": 0.25, "n_per": 12, "near_per": 0.5, "delta_bev": 0.25,
                     "rays_per_camera": 1, "bev_rays": 1},
        "optim": {"batch": 1},
    })


def tiny_sample(seed: int = 0) -> Sample:
    rng = np.random.default_rng(seed)
    eye = np.array([-1.0, 0.3, 0.4])
    cam = CameraModel.from_fov(16, 16, 60.0, look_at(eye, (1.0, 0.0, 0.0)), eye)
    img = ImageFrame(rng.uniform(size=(16, 16, 3)))
    pts = np.concatenate([rng.uniform((0.1, -0.9, -0.9), (1.9, 0.9, 0.9), size=(40, 3)),
                          rng.uniform(size=(40, 1))], axis=1)
    box = Primitive("box", (1.0, 0.0, 0.0), (0.4, 0.4, 0.4), 5.0, (0.8, 0.2, 0.1))
    return Sample([img], [cam], PointCloud(pts), SceneSpec([box], seed).to_dict())


def full_graph_error(seed: int = 0) -> float:
    """Central-difference check of every parameter through the full training graph."""
    from .trainer import initial_checkpoint, plan_step, prepare, step_graph

    cfg = tiny_config(seed)
    data = prepare([tiny_sample(seed)], cfg)
    ckpt = initial_checkpoint(cfg)
    # perturb all parameters off their (zero) initialization so no term is trivially flat
    rng = np.random.default_rng(seed + 1)
    params = {k: v + 0.3 * rng.normal(size=v.shape) for k, v in ckpt.params.items()}
    plan = plan_step(np.random.default_rng(seed), data, cfg)
    tape = ng.Tape()
    report, pv = step_graph(params, data, plan, cfg, tape)
    tape.mark_output(report.total_var)
    return ng.check_gradients(tape, [params[k] for k in pv])


def gradient_suite(seed: int = 0) -> dict[str, float]:
    errs = primitive_errors(seed)
    errs["full_graph"] = full_graph_error(seed)
    return errs


# -- analytic exactness ------------------------------------------------------------------

def aligned_scene(seed: int, delta: float, near: float, n_samples: int) -> SceneSpec:
    """Random boxes whose x-faces fall on sample-interval boundaries of +x rays."""
    rng = np.random.default_rng(seed)
    prims = []
    for _ in range(int(rng.integers(1, 5))):
        a, b = np.sort(rng.choice(np.arange(1, n_samples), size=2, replace=False))
        x0, x1 = near + a * delta, near + b * delta
        cy, cz = rng.uniform(-0.5, 0.5, size=2)
        hy, hz = rng.uniform(0.6, 1.2, size=2)
        prims.append(Primitive("box", (0.5 * (x0 + x1), cy, cz), (0.5 * (x1 - x0), hy, hz),
                               float(rng.uniform(0.5, 8.0)), tuple(rng.uniform(0.05, 1.0, size=3))))
    return SceneSpec(prims, seed)


def exactness_errors(n_fields: int = 50, n_rays: int = 16, delta: float = 0.1, n_samples: int = 40,
                     seed: int = 0) -> dict[str, float]:
    """Worst |discrete - oracle| over color, depth (cell-start analog) and transmittance."""
    worst = {"color": 0.0, "depth": 0.0, "transmittance": 0.0}
    near = 0.0
    for k in range(n_fields):
        scene = aligned_scene(seed * 100003 + k, delta, near, n_samples)
        rng = np.random.default_rng(seed * 7919 + k)
        origins = np.concatenate([np.zeros((n_rays, 1)), rng.uniform(-0.4, 0.4, size=(n_rays, 2))], axis=1)
        dirs = np.tile([1.0, 0.0, 0.0], (n_rays, 1))
        rays = RayBatch(origins, dirs, near, delta, n_samples, "PER", np.zeros((n_rays, 2), dtype=np.int64))
        field = PointField(scene.field)
        color = render_modality(rays, field, "color")
        depth = render_modality(rays, field, "depth")
        ref = oracle_render(rays, scene, cell=delta)
        worst["color"] = max(worst["color"], float(np.max(np.abs(color.value - ref.color))))
        worst["depth"] = max(worst["depth"], float(np.max(np.abs(depth.value - ref.cell_depth))))
        worst["transmittance"] = max(worst["transmittance"],
                                     float(np.max(np.abs(color.final_transmittance - ref.transmittance))))
    return worst


# -- convergence ---------------------------------------------------------------------------

def smooth_rays(n_rays: int = 20, seed: int = 0) -> tuple[SmoothField, np.ndarray]:
    """A smooth Gaussian-blob field and unit directions from the origin aimed into it."""
    field = SmoothField.random(seed)
    rng = np.random.default_rng(seed + 1)
    targets = field.centers[rng.integers(len(field.centers), size=n_rays)] + rng.normal(0.0, 0.3, (n_rays, 3))
    dirs = targets / np.linalg.norm(targets, axis=1, keepdims=True)
    return field, dirs


def convergence_sweep(deltas=(0.4, 0.2, 0.1, 0.05), n_rays: int = 20, seed: int = 0, far: float = 6.4):
    """Mean |discrete - oracle| of color and depth per ``delta`` over smooth-field rays.

    Every ``delta`` must divide ``far`` so the discrete and continuous integrals
    cover the same range.
    """
    field, dirs = smooth_rays(n_rays, seed)
    refs = [field.oracle(np.zeros(3), d, 0.0, far) for d in dirs]
    ref_c = np.array([r[0] for r in refs])
    ref_d = np.array([r[1] for r in refs])
    rows = []
    for delta in deltas:
        n = int(round(far / delta))
        if not math.isclose(n * delta, far, rel_tol=0, abs_tol=1e-9):
            raise ValueError(f"delta {delta} does not divide the range {far}")
        rays = RayBatch(np.zeros_like(dirs), dirs, 0.0, delta, n, "PER", np.zeros((n_rays, 2), dtype=np.int64))
        pf = PointField(field)
        c = render_modality(rays, pf, "color").value
        d = render_modality(rays, pf, "depth").value
        rows.append({"delta": delta, "color": float(np.mean(np.abs(c - ref_c))),
                     "depth": float(np.mean(np.abs(d - ref_d)))})
    return rows


def halving_ratios(rows: list[dict], key: str) -> list[float]:
    return [rows[k][key] / rows[k + 1][key] for k in range(len(rows) - 1)]
