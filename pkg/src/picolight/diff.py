"""Gradient layer: forward/backward albedo derivatives via seeded path
replay, a central finite-difference oracle, and gradient descent.

The differentiation scope is multiplicative reflectance (albedo) only, so
arrival times never depend on the parameters and the transient gradient is
the per-bin primal-weighted form.  Replays re-trace the exact primal paths
(same counter-based streams), which keeps finite-difference comparisons
tight: same-seed noise cancels structurally.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .film import Film, TransientCube, steady_collapse
from .integrators import (
    AdjointSink,
    _run_tiles,
    _tile_ranges,
    _trace_options,
    resolve_threads,
    trace_paths,
    render,
)
from .scene import SceneDescription, compile_scene


class GradientError(ValueError):
    pass


class GradientCube(TransientCube):
    """Per-bin parameter derivative with the same layout as a TransientCube."""


@dataclass
class ParamHandle:
    """A differentiable scene parameter: one scalar driving a set of albedo
    channels of one material (diffuse or rough_plastic substrate)."""

    material_id: str
    channels: tuple = (0, 1, 2)
    bounds: tuple = (0.0, 1.0)

    def resolve(self, desc: SceneDescription):
        for m in desc.materials:
            if m.id == self.material_id:
                if m.type not in ("diffuse", "rough_plastic"):
                    raise GradientError(
                        f"material '{self.material_id}' of type {m.type!r} has no "
                        "differentiable albedo"
                    )
                return m
        raise GradientError(f"unknown material '{self.material_id}'")

    def get(self, desc: SceneDescription) -> float:
        return float(self.resolve(desc).albedo[self.channels[0]])

    def apply(self, desc: SceneDescription, value: float) -> SceneDescription:
        """Return a copy of the scene with the parameter set to `value`."""
        lo, hi = self.bounds
        if not (lo <= value <= hi):
            raise GradientError(
                f"value {value:g} outside bounds [{lo:g}, {hi:g}] "
                f"for '{self.material_id}'"
            )
        out = copy.deepcopy(desc)
        mat = None
        for m in out.materials:
            if m.id == self.material_id:
                mat = m
        for c in self.channels:
            mat.albedo[c] = float(value)
        return out


def _param_indices(cs, params):
    return [cs.material_index[p.material_id] for p in params]


def _channel_mask(param: ParamHandle):
    mask = np.zeros(3)
    for c in param.channels:
        mask[c] = 1.0
    return mask


def forward_grad(
    desc: SceneDescription, param: ParamHandle, spp: int, seed: int = 0, threads: int = 0
):
    """Transient derivative of the render with respect to one parameter.

    Returns (GradientCube, steady gradient image); both come from the same
    replayed path set that the primal render with this seed uses.
    """
    param.resolve(desc)
    cs = compile_scene(desc)
    opts = _trace_options(cs, params=_param_indices(cs, [param]))
    if opts.polarized:
        raise GradientError("gradients are supported for unpolarized rendering only")
    nthreads = resolve_threads(threads)
    cam = cs.camera
    full = Film(cam.width, cam.height, cs.axis, 3, cs.speed_of_light)
    tiles = list(_tile_ranges(cam.width, cam.height))
    shards = _run_tiles(cs, tiles, spp, seed, opts, 1, nthreads)
    for (x0, y0, tw, th), (_, grad_films) in zip(tiles, shards):
        full.merge(grad_films[0], x0, y0)
    full.bins *= _channel_mask(param)[None, None, None, :]
    full.overflow *= _channel_mask(param)[None, None, :]
    cube = full.finalize(spp)
    gcube = GradientCube(cube.data, cube.axis, cube.speed_of_light, cube.overflow, cube.weight)
    return gcube, steady_collapse(gcube)


def finite_difference_oracle(
    desc: SceneDescription, param: ParamHandle, h: float, spp: int, seed: int = 0, threads: int = 0
):
    """Central finite differences with identical seeds on both sides."""
    if not h > 0.0:
        raise GradientError("finite-difference step h must be > 0")
    v = param.get(desc)
    plus = param.apply(desc, v + h)
    minus = param.apply(desc, v - h)
    _, cube_p = render(compile_scene(plus), spp, seed, threads)
    _, cube_m = render(compile_scene(minus), spp, seed, threads)
    data = (cube_p.data.astype(np.float64) - cube_m.data.astype(np.float64)) / (2.0 * h)
    over = (cube_p.overflow - cube_m.overflow) / (2.0 * h)
    return GradientCube(data.astype(np.float32), cube_p.axis, cube_p.speed_of_light, over)


def backward_grad(
    desc: SceneDescription,
    adjoint,
    params: list,
    spp: int,
    seed: int = 0,
    threads: int = 0,
):
    """Loss gradients for several parameters from one replay pass.

    `adjoint` is dL/dy with the film's [nt, h, w, 3] shape.  Returns one
    gradient per parameter.
    """
    cs = compile_scene(desc)
    adj = adjoint.data if isinstance(adjoint, TransientCube) else np.asarray(adjoint)
    nt = cs.axis.n_bins
    cam = cs.camera
    if adj.shape != (nt, cam.height, cam.width, 3):
        raise GradientError(
            f"adjoint shape {adj.shape} does not match film {(nt, cam.height, cam.width, 3)}"
        )
    for p in params:
        p.resolve(desc)
    opts = _trace_options(cs, params=_param_indices(cs, params))
    masks = np.stack([_channel_mask(p) for p in params])  # (K, 3)
    adj64 = adj.astype(np.float64)
    sink = AdjointSink(adj64, cs.axis, len(params), unwarp=cs.axis.unwarp)
    # fold each parameter's channel set into its own masked adjoint view
    sinks = [
        AdjointSink(adj64 * masks[k][None, None, None, :], cs.axis, 1, unwarp=cs.axis.unwarp)
        for k in range(len(params))
    ]

    class _Multi:
        def add(self, px, py, time, unwarp_off, value, stokes=None, dvalues=None, vertex=None):
            if dvalues is None:
                return
            for k, s in enumerate(sinks):
                s.add(px, py, time, unwarp_off, value, None, dvalues[k : k + 1], None)

    multi = _Multi()
    for x0, y0, tw, th in _tile_ranges(cam.width, cam.height):
        xs, ys = np.meshgrid(np.arange(x0, x0 + tw), np.arange(y0, y0 + th))
        px_tile = xs.ravel().astype(np.int64)
        py_tile = ys.ravel().astype(np.int64)
        lane_cap = max(1, (1 << 17) // max(1, px_tile.size))
        s = 0
        while s < spp:
            cnt = min(lane_cap, spp - s)
            px = np.tile(px_tile, cnt)
            py = np.tile(py_tile, cnt)
            sample_idx = np.repeat(np.arange(s, s + cnt, dtype=np.uint64), px_tile.size)
            trace_paths(cs, px, py, sample_idx, seed, multi, opts)
            s += cnt
    return np.array([s.grads[0] for s in sinks]) / float(spp)


def l2_loss(cube: TransientCube, target: TransientCube):
    """Mean squared per-bin error and its adjoint dL/dy."""
    y = cube.data.astype(np.float64)
    ystar = target.data.astype(np.float64)
    if y.shape != ystar.shape:
        raise GradientError(f"cube shape {y.shape} != target shape {ystar.shape}")
    diff = y - ystar
    n = diff.size
    return float(np.mean(diff**2)), (2.0 / n) * diff


@dataclass
class OptimizeResult:
    values: list  # per-step parameter vectors (after the update)
    losses: list  # per-step losses (before the update)
    learning_rates: list = field(default_factory=list)

    def best(self):
        i = int(np.argmin(self.losses))
        return self.values[i], self.losses[i]


def optimize(
    desc: SceneDescription,
    target: TransientCube,
    params: list,
    learning_rate: float,
    steps: int,
    spp: int,
    seed: int = 0,
    seed_policy: str = "fixed",
    threads: int = 0,
    loss_fn=l2_loss,
    callback=None,
):
    """Projected gradient descent on the transient L2 loss.

    seed_policy 'fixed' replays the same paths each step (deterministic
    trajectory); 'per_step' reseeds every iteration (stochastic gradients).
    If the loss rises above 5x the best seen, the learning rate halves.
    """
    if seed_policy not in ("fixed", "per_step"):
        raise GradientError(f"unknown seed policy {seed_policy!r}")
    current = desc
    values = [np.array([p.get(desc) for p in params])]
    result = OptimizeResult(values=[values[0].copy()], losses=[], learning_rates=[])
    eta = float(learning_rate)
    best = np.inf
    for step in range(steps):
        step_seed = seed if seed_policy == "fixed" else seed + step
        _, cube = render(compile_scene(current), spp, step_seed, threads)
        loss, adjoint = loss_fn(cube, target)
        if loss > 5.0 * best and best < np.inf:
            eta *= 0.5
        best = min(best, loss)
        grads = backward_grad(current, adjoint, params, spp, step_seed, threads)
        vals = np.array([p.get(current) for p in params])
        vals = vals - eta * grads
        for i, p in enumerate(params):
            vals[i] = float(np.clip(vals[i], p.bounds[0], p.bounds[1]))
            current = p.apply(current, vals[i])
        result.values.append(vals.copy())
        result.losses.append(loss)
        result.learning_rates.append(eta)
        if callback is not None:
            callback(step, vals, loss, current)
    return result
