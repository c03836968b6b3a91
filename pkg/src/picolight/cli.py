"""Command-line frontend: render, temporal post-processing, NLOS capture and
reconstruction, gradients, and inverse-rendering runs.

Exit codes: 0 success, 1 runtime error, 2 scene/argument validation error.
Every run prints a one-line reproducibility stamp on stdout; progress and
diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import __version__
from .diff import (
    GradientError,
    ParamHandle,
    finite_difference_oracle,
    forward_grad,
    optimize,
)
from .film import (
    FilmError,
    TcubeError,
    TemporalAxis,
    TransientCube,
    peak_time_map,
    read_tcube,
    time_gate,
    tonemap_transient,
    write_frames,
    write_ppm,
    write_tcube,
)
from .integrators import IntegratorError, render, resolve_threads
from .nlos import (
    NlosError,
    NlosRig,
    apply_noise,
    backproject,
    capture,
    load_irf_kernel,
    point_target_rig,
    read_capture,
    two_patch_rig,
    write_capture,
)
from .polarization import PolarizationError, aolp_frames, dop_frames
from .scene import (
    MaterialDesc,
    SceneDescription,
    SceneError,
    ShapeDesc,
    compile_scene,
    cornell_box,
    parse_scene,
    polarizer_pair,
)

BUILTIN_SCENES = ("cornell-box", "polar-malus")
BUILTIN_RIGS = ("nlos-point", "nlos-two-patch")


def _stamp(seed=0, spp=0, threads=0):
    print(f"stamp version={__version__} seed={seed} spp={spp} threads={threads}")
    sys.stdout.flush()


def _progress(msg):
    print(msg, file=sys.stderr)


def _load_scene(args) -> SceneDescription:
    if getattr(args, "builtin", None):
        name = args.builtin
        if name == "cornell-box":
            return cornell_box()
        if name == "polar-malus":
            return polarizer_pair()
        if name in BUILTIN_RIGS:
            raise SceneError(name, "is an NLOS rig; use nlos-capture")
        raise SceneError(name, f"unknown builtin, expected one of {BUILTIN_SCENES + BUILTIN_RIGS}")
    with open(args.scene, encoding="utf-8") as f:
        return parse_scene(f.read())


def _load_rig(args) -> NlosRig:
    if getattr(args, "builtin", None):
        if args.builtin == "nlos-point":
            return point_target_rig()
        if args.builtin == "nlos-two-patch":
            return two_patch_rig()
        raise NlosError(f"unknown builtin rig {args.builtin!r}, expected one of {BUILTIN_RIGS}")
    import yaml

    with open(args.rig, encoding="utf-8") as f:
        data = yaml.safe_load(f.read())
    shapes = [ShapeDesc(**s) for s in data.pop("hidden_shapes", [])]
    mats = [MaterialDesc(**m) for m in data.pop("hidden_materials", [])]
    if "laser_grid" in data:
        data["laser_grid"] = tuple(data["laser_grid"])
    if "sensor_grid" in data and data["sensor_grid"] is not None:
        data["sensor_grid"] = tuple(data["sensor_grid"])
    return NlosRig(hidden_shapes=shapes, hidden_materials=mats, **data)


def _tonemap_image(data, gamma=2.2):
    peak = float(np.max(data)) if data.size else 0.0
    if peak <= 0.0:
        return np.zeros(data.shape, dtype=np.uint8)
    x = np.clip(data / peak, 0.0, 1.0) ** (1.0 / gamma)
    return np.clip(np.rint(x * 255.0), 0, 255).astype(np.uint8)


def _cmd_render(args):
    desc = _load_scene(args)
    threads = resolve_threads(args.threads)
    _stamp(args.seed, args.spp, threads)
    _progress(f"rendering {desc.camera.width}x{desc.camera.height} at {args.spp} spp")
    steady, cube = render(compile_scene(desc), args.spp, args.seed, threads)
    write_tcube(cube, args.out)
    stem, _ = os.path.splitext(args.out)
    steady_rgb = steady.data[..., 0:3] if steady.data.shape[-1] != 3 else steady.data
    write_ppm(stem + "_steady.ppm", _tonemap_image(steady_rgb, args.gamma))
    _progress(f"wrote {args.out} and {stem}_steady.ppm")
    return 0


def _cmd_gate(args):
    _stamp(threads=resolve_threads(args.threads))
    cube = read_tcube(args.cube)
    img = time_gate(cube, args.open, args.close)
    write_ppm(args.out, _tonemap_image(img.data[..., 0:3], args.gamma))
    _progress(f"wrote {args.out}")
    return 0


def _cmd_peak(args):
    _stamp(threads=resolve_threads(args.threads))
    cube = read_tcube(args.cube)
    times, mags, valid = peak_time_map(cube)
    from .polarization import rainbow_colormap

    ax = cube.axis
    norm = (np.nan_to_num(times, nan=ax.t_start) - ax.t_start) / max(ax.n_bins * ax.bin_width, 1e-12)
    time_img = rainbow_colormap(norm)
    time_img[~valid] = 0
    write_ppm(args.out_time, time_img)
    mag_img = _tonemap_image(np.repeat(mags[..., None], 3, axis=-1), args.gamma)
    write_ppm(args.out_magnitude, mag_img)
    _progress(f"wrote {args.out_time} and {args.out_magnitude}")
    return 0


def _cmd_export(args):
    _stamp(threads=resolve_threads(args.threads))
    cube = read_tcube(args.cube)
    if args.aolp or args.dop:
        if args.aolp:
            frames = aolp_frames(cube, halved=args.aolp_halved)
        else:
            frames = dop_frames(cube)
    else:
        frames = tonemap_transient(cube, args.gamma)
    paths = write_frames(args.frames, frames)
    _progress(f"wrote {len(paths)} frames to {args.frames}")
    return 0


def _cmd_nlos_capture(args):
    rig = _load_rig(args)
    threads = resolve_threads(args.threads)
    _stamp(args.seed, args.spp, threads)
    _progress(f"capturing {rig.mode} grid {rig.laser_grid} at {args.spp} spp")
    cap = capture(rig, args.spp, args.seed, threads, sampler=args.sampler)
    if args.noise_jitter is not None or args.noise_irf or args.photon_scale or args.dark_rate:
        kernel = load_irf_kernel(args.noise_irf) if args.noise_irf else None
        cap = apply_noise(
            cap,
            jitter_sigma=args.noise_jitter,
            irf_kernel=kernel,
            photon_scale=args.photon_scale,
            dark_count_rate=args.dark_rate or 0.0,
            seed=args.seed,
        )
    write_capture(cap, args.out)
    _progress(f"wrote {args.out}")
    return 0


def _cmd_nlos_reconstruct(args):
    _stamp(threads=resolve_threads(args.threads))
    cap = read_capture(args.capture)
    parts = [float(x) for x in args.volume.split(",")]
    if len(parts) != 7:
        raise NlosError("--volume expects ox,oy,oz,voxel_size,nx,ny,nz")
    origin = parts[0:3]
    voxel = parts[3]
    dims = tuple(int(x) for x in parts[4:7])
    field = backproject(cap, origin, voxel, dims, filter=args.filter)
    # volume stored as a z-stack cube: one "time" slice per z, RGB replicated
    vol = np.repeat(
        field.transpose(2, 1, 0)[..., None].astype(np.float32), 3, axis=-1
    )
    cube = TransientCube(vol, TemporalAxis(origin[2], voxel, dims[2]), cap.rig.speed_of_light)
    write_tcube(cube, args.out)
    _progress(f"wrote {args.out} (z-stack of {dims[2]} slices)")
    return 0


def _cmd_diff(args):
    desc = _load_scene(args)
    threads = resolve_threads(args.threads)
    _stamp(args.seed, args.spp, threads)
    param = ParamHandle(args.param)
    if args.fd_check is not None:
        grad, _ = forward_grad(desc, param, args.spp, args.seed, threads)
        fd = finite_difference_oracle(desc, param, args.fd_check, args.spp, args.seed, threads)
        num = float(np.linalg.norm(grad.data.astype(np.float64) - fd.data.astype(np.float64)))
        den = float(np.linalg.norm(fd.data.astype(np.float64)))
        rel = num / den if den > 0 else 0.0
        print(f"fd_relative_l2={rel:.6e}")
        write_tcube(grad, args.out)
        return 0
    grad, _ = forward_grad(desc, param, args.spp, args.seed, threads)
    write_tcube(grad, args.out)
    _progress(f"wrote {args.out}")
    return 0


def _cmd_optimize(args):
    desc = _load_scene(args)
    threads = resolve_threads(args.threads)
    _stamp(args.seed, args.spp, threads)
    target = read_tcube(args.target)
    params = [ParamHandle(p) for p in args.param]
    for p in params:
        if args.init is not None:
            desc = p.apply(desc, args.init)
    snapshots = []

    def callback(step, vals, loss, current):
        _progress(f"step {step}: loss={loss:.6e} params={list(np.round(vals, 4))}")
        if args.snapshot_every and (step % args.snapshot_every == 0):
            _, cube = render(compile_scene(current), args.spp, args.seed, threads)
            path = f"{args.snapshot_prefix}{step:04d}.tcube"
            write_tcube(cube, path)
            snapshots.append(path)

    result = optimize(
        desc,
        target,
        params,
        args.lr,
        args.steps,
        args.spp,
        args.seed,
        seed_policy=args.seed_policy,
        threads=threads,
        callback=callback if (args.snapshot_every or True) else None,
    )
    with open(args.out, "w", encoding="utf-8") as f:
        cols = ",".join(p.material_id for p in params)
        f.write(f"step,loss,{cols}\n")
        for i, loss in enumerate(result.losses):
            vals = ",".join(f"{v:.8g}" for v in result.values[i + 1])
            f.write(f"{i},{loss:.10g},{vals}\n")
    _progress(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="picolight", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_common(sp, spp_default=64):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--spp", type=int, default=spp_default)
        sp.add_argument("--threads", type=int, default=0, help="0 = MITR_THREADS or cpu count")

    def add_scene_source(sp):
        g = sp.add_mutually_exclusive_group(required=True)
        g.add_argument("--scene", help="scene file path")
        g.add_argument("--builtin", choices=BUILTIN_SCENES + BUILTIN_RIGS)

    sp = sub.add_parser("render", help="render steady + transient outputs")
    add_scene_source(sp)
    add_common(sp)
    sp.add_argument("--out", required=True, help="output .tcube path")
    sp.add_argument("--gamma", type=float, default=2.2)
    sp.set_defaults(func=_cmd_render)

    sp = sub.add_parser("gate", help="time-gated image from a transient cube")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--open", type=float, required=True)
    sp.add_argument("--close", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--gamma", type=float, default=2.2)
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=_cmd_gate)

    sp = sub.add_parser("peak", help="peak-time and peak-magnitude maps")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--out-time", required=True)
    sp.add_argument("--out-magnitude", required=True)
    sp.add_argument("--gamma", type=float, default=2.2)
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=_cmd_peak)

    sp = sub.add_parser("export", help="export a cube as PPM frames")
    sp.add_argument("--cube", required=True)
    sp.add_argument("--frames", required=True, help="output directory")
    sp.add_argument("--tonemap", action="store_true", help="tonemapped RGB frames (default)")
    sp.add_argument("--gamma", type=float, default=2.2)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--aolp", action="store_true", help="angle-of-linear-polarization frames")
    g.add_argument("--dop", action="store_true", help="degree-of-polarization frames")
    sp.add_argument("--aolp-halved", action="store_true", help="use the psi/2 convention")
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=_cmd_export)

    sp = sub.add_parser("nlos-capture", help="scan a relay-wall rig into a capture file")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--rig", help="rig file path (YAML)")
    g.add_argument("--builtin", choices=BUILTIN_RIGS)
    add_common(sp, spp_default=1024)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sampler", choices=("tailored", "hemisphere"), default="tailored")
    ng = sp.add_mutually_exclusive_group()
    ng.add_argument("--noise-jitter", type=float, default=None, help="Gaussian sigma (time units)")
    ng.add_argument("--noise-irf", default=None, help="IRF kernel file")
    sp.add_argument("--photon-scale", type=float, default=None)
    sp.add_argument("--dark-rate", type=float, default=None)
    sp.set_defaults(func=_cmd_nlos_capture)

    sp = sub.add_parser("nlos-reconstruct", help="backproject a capture onto a voxel grid")
    sp.add_argument("--capture", required=True)
    sp.add_argument("--volume", required=True, help="ox,oy,oz,voxel_size,nx,ny,nz")
    sp.add_argument("--out", required=True)
    sp.add_argument("--filter", choices=("laplacian",), default=None)
    sp.add_argument("--threads", type=int, default=0)
    sp.set_defaults(func=_cmd_nlos_reconstruct)

    sp = sub.add_parser("diff", help="forward albedo gradient of a render")
    add_scene_source(sp)
    add_common(sp)
    sp.add_argument("--param", required=True, help="material id to differentiate")
    sp.add_argument("--out", required=True)
    sp.add_argument("--fd-check", type=float, default=None, help="also run central FD with this h")
    sp.set_defaults(func=_cmd_diff)

    sp = sub.add_parser("optimize", help="recover parameters against a target cube")
    add_scene_source(sp)
    add_common(sp)
    sp.add_argument("--target", required=True, help="target .tcube")
    sp.add_argument("--param", action="append", required=True, help="material id (repeatable)")
    sp.add_argument("--init", type=float, default=None, help="initial value for all params")
    sp.add_argument("--lr", type=float, default=0.5)
    sp.add_argument("--steps", type=int, default=50)
    sp.add_argument("--seed-policy", choices=("fixed", "per_step"), default="fixed")
    sp.add_argument("--out", required=True, help="trajectory CSV")
    sp.add_argument("--snapshot-every", type=int, default=0)
    sp.add_argument("--snapshot-prefix", default="optim_")
    sp.set_defaults(func=_cmd_optimize)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SceneError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (NlosError, GradientError, FilmError, TcubeError, IntegratorError, PolarizationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
