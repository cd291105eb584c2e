"""Command-line entry point: ``nsmae <subcommand> [options] [--section.key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, dump, load_config, parse_value

log = logging.getLogger("nsmae")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
GRAD_TOLERANCE = 1e-5


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (defaults apply to missing keys)")
    p.add_argument("--out", help="output directory (overrides config 'out')")
    p.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    p.add_argument("--threads", type=int, help="BLAS worker threads; 1 is the bit-exact reference")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="nsmae", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth-gen", help="write a synthetic dataset with manifest")
    _common(p)

    p = sub.add_parser("pretrain", help="run masked pre-training")
    _common(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("render", help="render a view of one sample from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", type=int, default=0, help="dataset sample index")
    p.add_argument("--view", choices=("per", "bev"), default="per")
    p.add_argument("--camera", type=int, default=0)

    p = sub.add_parser("probe", help="linear-probe occupancy evaluation")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint to evaluate (random init when omitted)")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    _common(p)

    p = sub.add_parser("oracle-compare", help="renderer vs analytic oracle over sample spacings")
    _common(p)
    p.add_argument("--deltas", default="0.4,0.2,0.1,0.05", help="comma-separated spacings")
    p.add_argument("--rays", type=int, default=20)

    p = sub.add_parser("config", help="configuration utilities")
    csub = p.add_subparsers(dest="action", parser_class=_Parser)
    d = csub.add_parser("dump", help="print the complete defaulted config")
    _common(d)
    return parser


def split_overrides(argv: list[str]) -> tuple[list[str], dict]:
    """Separate ``--section.key=value`` / ``--section.key value`` overrides from flags."""
    rest, overrides = [], {}
    k = 0
    while k < len(argv):
        a = argv[k]
        if a.startswith("--") and "." in a.split("=", 1)[0]:
            key, sep, val = a[2:].partition("=")
            if not sep:
                if k + 1 >= len(argv):
                    raise UsageError(f"override --{key} needs a value")
                k += 1
                val = argv[k]
            overrides[key] = parse_value(val)
        else:
            rest.append(a)
        k += 1
    return rest, overrides


def resolve_config(args, overrides: dict) -> dict:
    cfg = load_config(args.config, overrides)
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    elif "NSMAE_THREADS" in os.environ and "threads" not in overrides:
        try:
            cfg["threads"] = int(os.environ["NSMAE_THREADS"])
        except ValueError:
            raise ConfigError(f"NSMAE_THREADS must be an integer, got {os.environ['NSMAE_THREADS']!r}")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def _write_json(path: Path, doc) -> None:
    from .dataio import atomic_write_bytes

    atomic_write_bytes(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())


# -- subcommands ----------------------------------------------------------------------

def cmd_synth_gen(cfg: dict) -> int:
    from .dataio import save_manifest
    from .trainer import grid_from_config, synth_samples

    d = cfg["data"]
    samples = synth_samples(cfg, d["scenes"], d["scene_seed"])
    path = save_manifest(samples, cfg["out"], grid_from_config(cfg), {"scene_seed": d["scene_seed"]})
    print(f"wrote {len(samples)} samples to {path}")
    return EXIT_OK


def cmd_pretrain(cfg: dict, resume: str | None) -> int:
    from .trainer import pretrain, resume_from

    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    start = resume_from(resume, cfg) if resume else None
    ckpt, entries = pretrain(cfg, resume=start, out=out)
    if entries:
        print(f"step {ckpt.step}: total loss {entries[-1]['total']:.6g}")
    print(f"final checkpoint {out / 'final.nsmae'}")
    return EXIT_OK


def render_sample(params: dict, sample, cfg: dict, view: str, camera: int, chunk: int = 1024):
    """Full-resolution unmasked render; returns (color (H, W, 3) or None, depth map)."""
    from .dataio import voxelize
    from .embednet import embed
    from .geometry import bev_rays, perspective_rays
    from .masking import mask_image
    from .renderer import render_view
    from .trainer import grid_from_config, net_shape

    grid = grid_from_config(cfg)
    shape = net_shape(cfg)
    r = cfg["renderer"]
    masked = [mask_image(img, shape.patch, 0.0) for img in sample.images]
    vol = embed([masked], [sample.cameras], [voxelize(sample.cloud, grid)], grid, params, shape)
    if view == "per":
        cam = sample.cameras[camera]
        rays = perspective_rays(cam, 1, r["delta_per"], r["n_per"], r["near_per"])
        heads = ("color", "depth")
    else:
        rays = bev_rays(grid, r["delta_bev"])
        heads = ("depth",)
    parts = {h: [] for h in heads}
    for s in range(0, len(rays), chunk):
        maps = render_view(rays.subset(np.arange(s, min(s + chunk, len(rays)))), vol, params, heads)
        for h in heads:
            parts[h].append(np.asarray(maps[h].value))
    if view == "per":
        H, W = cam.height, cam.width
        color = np.concatenate(parts["color"]).reshape(H, W, 3)
        depth = np.concatenate(parts["depth"]).reshape(H, W) + r["near_per"]
        return color, depth
    X, Y, _ = grid.extents
    return None, np.concatenate(parts["depth"]).reshape(X, Y)


def cmd_render(cfg: dict, checkpoint: str, sample_k: int, view: str, camera: int) -> int:
    from .checkpoint import load_checkpoint
    from .config import config_hash
    from .dataio import ImageFrame, save_depth_pfm, save_image_ppm
    from .trainer import load_samples

    ckpt = load_checkpoint(checkpoint, config_hash(cfg))
    samples = load_samples(cfg)
    if not 0 <= sample_k < len(samples):
        raise IndexError(f"sample {sample_k} out of range for {len(samples)} samples")
    sample = samples[sample_k]
    if view == "per" and not 0 <= camera < len(sample.cameras):
        raise IndexError(f"camera {camera} out of range for {len(sample.cameras)} cameras")
    color, depth = render_sample(ckpt.params, sample, cfg, view, camera)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = f"render_{sample_k:04d}_{view}" + (f"{camera}" if view == "per" else "")
    if color is not None:
        save_image_ppm(ImageFrame(np.clip(color, 0.0, 1.0)), out / f"{stem}.ppm")
    save_depth_pfm(depth, out / f"{stem}_depth.pfm")
    print(f"wrote {out / stem}*")
    return EXIT_OK


def cmd_probe(cfg: dict, checkpoint: str | None) -> int:
    from .checkpoint import load_checkpoint
    from .config import config_hash
    from .embednet import init_params
    from .probe import linear_probe_eval, probe_split
    from .trainer import net_shape

    params = (load_checkpoint(checkpoint, config_hash(cfg)).params if checkpoint
              else init_params(net_shape(cfg), cfg["seed"]))
    train, test = probe_split(cfg)
    metrics = linear_probe_eval(params, train, test, cfg, seed=cfg["seed"])
    doc = dict(metrics.to_json(), checkpoint=checkpoint or "random-init")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "probe.json", doc)
    print(json.dumps(doc, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(cfg: dict) -> int:
    from .suites import gradient_suite

    errs = gradient_suite(cfg["seed"])
    for name, e in errs.items():
        print(f"{name:18s} {e:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e}")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "gradcheck.json", {k: float(v) for k, v in errs.items()})
    return EXIT_OK if worst < GRAD_TOLERANCE else EXIT_RUNTIME


def cmd_oracle_compare(cfg: dict, deltas: str, n_rays: int) -> int:
    from .suites import convergence_sweep

    try:
        ds = [float(x) for x in deltas.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--deltas must be comma-separated numbers, got {deltas!r}")
    if not ds or min(ds) <= 0:
        raise UsageError("--deltas needs positive spacings")
    rows = convergence_sweep(ds, n_rays, cfg["seed"])
    print(f"{'delta':>8s} {'depth_err':>12s} {'ratio':>7s} {'color_err':>12s} {'ratio':>7s}")
    prev = None
    for row in rows:
        rd = rc = ""
        if prev is not None:
            rd = f"{prev['depth'] / row['depth']:.3f}"
            rc = f"{prev['color'] / row['color']:.3f}"
        print(f"{row['delta']:8.4f} {row['depth']:12.4e} {rd:>7s} {row['color']:12.4e} {rc:>7s}")
        prev = row
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "oracle_compare.json", rows)
    return EXIT_OK


def run(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        rest, overrides = split_overrides(argv)
        args = parser.parse_args(rest)
        if args.command is None or (args.command == "config" and args.action is None):
            raise UsageError(parser.format_usage() + "nsmae: error: a subcommand is required")
        cfg = resolve_config(args, overrides)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"nsmae: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        ctx = threadpool_limits(cfg["threads"]) if threadpool_limits else None
        try:
            if args.command == "config":
                print(dump(cfg))
                return EXIT_OK
            if args.command == "synth-gen":
                return cmd_synth_gen(cfg)
            if args.command == "pretrain":
                return cmd_pretrain(cfg, args.resume)
            if args.command == "render":
                return cmd_render(cfg, args.checkpoint, args.sample, args.view, args.camera)
            if args.command == "probe":
                return cmd_probe(cfg, args.checkpoint)
            if args.command == "gradcheck":
                return cmd_gradcheck(cfg)
            if args.command == "oracle-compare":
                return cmd_oracle_compare(cfg, args.deltas, args.rays)
        finally:
            if ctx is not None:
                ctx.unregister()
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failure: report, no traceback spam
        print(f"nsmae: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    raise AssertionError(f"unhandled command {args.command}")


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
