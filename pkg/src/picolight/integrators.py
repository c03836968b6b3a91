"""Monte Carlo transport kernels: transient path tracing and transient
volumetric path tracing.

The tracer is a vectorized wavefront: a batch of paths advances one vertex
per iteration, with per-lane counter-based RNG streams so results are
independent of batching, tiling, and thread count.  Every contribution is
deposited with its optical arrival time (total optical path length over c,
with a shared t=0 clock at which all emitters pulse and the camera opens).

Sampling: next-event estimation at every non-delta vertex plus BSDF/phase
sampling, combined with the power heuristic (beta = 2).  Depth counts path
segments, so max_depth 1 sees only directly visible emitters.
"""

from __future__ import annotations

import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import rng as rnglib
from .film import Film, SteadyImage, TransientCube, steady_collapse
from .geometry import (
    Ray,
    build_frame,
    normalize,
    offset_origin,
    to_local,
    to_world,
)
from .materials import Diffuse, Mirror, Polarizer, RoughPlastic, fresnel_dielectric
from .media import hg_pdf, sample_distance, sample_hg_phase
from .polarization import (
    MuellerSpectrum,
    depolarizer_matrix,
    fresnel_reflection_matrix,
    linear_polarizer_matrix,
    propagation_frame,
    to_world_mueller,
    transport_frame,
)
from .scene import CompiledScene, SceneDescription, compile_scene

TILE_SIZE = 16
MAX_LANES = 1 << 17
MAX_LANES_POLARIZED = 1 << 14

# RNG usage slots within one path vertex iteration
_U_JITTER_X = 0
_U_JITTER_Y = 1
_U_NEE_PICK = 2
_U_NEE_A = 3
_U_NEE_B = 4
_U_LOBE = 5
_U_DIR_A = 6
_U_DIR_B = 7
_U_RR = 8
_U_MED_CH = 9
_U_MED_DIST = 10
_U_PHASE_A = 11
_U_PHASE_B = 12
_U_INTERFACE = 13
_SITE_STRIDE = 16


class IntegratorError(ValueError):
    pass


def power_heuristic(pa, pb):
    pa2 = pa * pa
    pb2 = pb * pb
    denom = pa2 + pb2
    return np.where(denom > 0.0, pa2 / np.where(denom > 0.0, denom, 1.0), 0.0)


def resolve_threads(threads):
    if threads and threads > 0:
        return int(threads)
    env = os.environ.get("MITR_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


# --------------------------------------------------------------------------
# sinks: where per-path contributions go
# --------------------------------------------------------------------------


class FilmSink:
    """Deposits contributions into a film shard (and gradient shards)."""

    def __init__(self, film: Film, grad_films=None, unwarp=False, x0=0, y0=0):
        self.film = film
        self.grad_films = grad_films or []
        self.unwarp = unwarp
        self.x0 = x0
        self.y0 = y0

    def add(self, px, py, time, unwarp_off, value, stokes=None, dvalues=None, vertex=None):
        t = time - unwarp_off if self.unwarp else time
        lx = px - self.x0
        ly = py - self.y0
        v = stokes.transpose(0, 2, 1).reshape(-1, 12) if stokes is not None else value
        self.film.add_samples(lx, ly, t, v)
        if dvalues is not None:
            for k, gf in enumerate(self.grad_films):
                gf.add_samples(lx, ly, t, dvalues[k])


class CollectSink:
    """Collects raw (arrival_time, contribution, last_visible_vertex) tuples."""

    def __init__(self):
        self.records = []

    def add(self, px, py, time, unwarp_off, value, stokes=None, dvalues=None, vertex=None):
        for i in range(len(time)):
            if np.max(np.abs(value[i])) > 0.0:
                self.records.append(
                    (
                        float(time[i]),
                        value[i].copy(),
                        None if vertex is None else vertex[i].copy(),
                    )
                )


class AdjointSink:
    """Accumulates per-parameter scalar gradients against an adjoint cube."""

    def __init__(self, adjoint, axis, n_params, unwarp=False):
        self.adjoint = adjoint  # [nt, h, w, ch]
        self.axis = axis
        self.grads = np.zeros(n_params)
        self.unwarp = unwarp

    def add(self, px, py, time, unwarp_off, value, stokes=None, dvalues=None, vertex=None):
        if dvalues is None:
            return
        t = time - unwarp_off if self.unwarp else time
        idx = np.floor((t - self.axis.t_start) / self.axis.bin_width)
        inside = (idx >= 0) & (idx < self.axis.n_bins)
        if not inside.any():
            return
        b = idx[inside].astype(np.int64)
        a = self.adjoint[b, py[inside], px[inside], :]
        for k in range(dvalues.shape[0]):
            self.grads[k] += float(np.sum(a * dvalues[k][inside]))


# --------------------------------------------------------------------------
# emitter connection sampling
# --------------------------------------------------------------------------


@dataclass
class EmitterSample:
    target: np.ndarray  # (m, 3) point to connect to
    radiance: np.ndarray  # (m, 3) radiance / intensity term, pick prob folded
    pdf_solid: np.ndarray  # (m,) solid-angle pdf of the NEE strategy (0: delta)
    geom: np.ndarray  # (m,) cos_l / r^2 / pdf_area  (area) or 1 / r^2 (delta)
    distance: np.ndarray  # (m,)
    extra_time: np.ndarray  # (m,) optical delay upstream of the connection point
    is_delta: np.ndarray  # (m,) bool
    valid: np.ndarray  # (m,) bool


def sample_emitter_connection(scene: CompiledScene, x, u_pick, u_a, u_b) -> EmitterSample:
    """Pick one emitter uniformly, then a point on it by area."""
    m = x.shape[0]
    ne = len(scene.emitters)
    out = EmitterSample(
        target=np.zeros((m, 3)),
        radiance=np.zeros((m, 3)),
        pdf_solid=np.zeros(m),
        geom=np.zeros(m),
        distance=np.full(m, np.inf),
        extra_time=np.zeros(m),
        is_delta=np.zeros(m, dtype=bool),
        valid=np.zeros(m, dtype=bool),
    )
    if ne == 0:
        return out
    pick = np.minimum((u_pick * ne).astype(np.int64), ne - 1)
    for ei, em in enumerate(scene.emitters):
        sel = pick == ei
        if not sel.any():
            continue
        xs = x[sel]
        if em.kind == "area":
            a = 2.0 * u_a[sel] - 1.0
            b = 2.0 * u_b[sel] - 1.0
            y = em.center[None, :] + a[:, None] * em.edge_u[None, :] + b[:, None] * em.edge_v[None, :]
            delta = y - xs
            r2 = np.maximum(np.sum(delta * delta, axis=-1), 1e-12)
            r = np.sqrt(r2)
            wdir = delta / r[:, None]
            cos_l = -np.sum(wdir * em.normal[None, :], axis=-1)
            front = cos_l > 1e-9
            pdf_area = 1.0 / (ne * em.area)
            out.target[sel] = y
            out.radiance[sel] = em.radiance[None, :]
            out.geom[sel] = np.where(front, cos_l / r2 / pdf_area, 0.0)
            out.pdf_solid[sel] = np.where(front, pdf_area * r2 / np.maximum(cos_l, 1e-12), 0.0)
            out.distance[sel] = r
            out.valid[sel] = front
        elif em.kind == "point":
            delta = em.position[None, :] - xs
            r2 = np.maximum(np.sum(delta * delta, axis=-1), 1e-12)
            out.target[sel] = em.position[None, :]
            out.radiance[sel] = em.intensity[None, :] * ne
            out.geom[sel] = 1.0 / r2
            out.distance[sel] = np.sqrt(r2)
            out.is_delta[sel] = True
            out.valid[sel] = True
        else:  # pulsed_laser: its first-bounce spot acts as a cosine point source
            if not em.spot_valid or em.spot_material < 0:
                continue
            wall = scene.materials[em.spot_material]
            if not isinstance(wall, Diffuse):
                continue
            delta = em.spot[None, :] - xs
            r2 = np.maximum(np.sum(delta * delta, axis=-1), 1e-12)
            r = np.sqrt(r2)
            wdir = delta / r[:, None]
            cos_out = np.abs(np.sum(wdir * em.spot_normal[None, :], axis=-1))
            intensity = (
                em.power[None, :] * wall.albedo[None, :] / np.pi * (em.spot_cos * cos_out)[:, None]
            )
            out.target[sel] = em.spot[None, :]
            out.radiance[sel] = intensity * ne
            out.geom[sel] = 1.0 / r2
            out.distance[sel] = r
            out.extra_time[sel] = em.spot_time
            out.is_delta[sel] = True
            out.valid[sel] = cos_out > 1e-9
    return out


def emitter_hit_nee_pdf(scene: CompiledScene, emitter_id, distance, cos_l):
    """Solid-angle pdf with which NEE would have produced this emitter hit."""
    ne = len(scene.emitters)
    pdf = np.zeros(emitter_id.shape[0])
    for ei, em in enumerate(scene.emitters):
        if em.kind != "area":
            continue
        sel = emitter_id == ei
        if not sel.any():
            continue
        pdf_area = 1.0 / (ne * em.area)
        pdf[sel] = pdf_area * distance[sel] ** 2 / np.maximum(cos_l[sel], 1e-12)
    return pdf


# --------------------------------------------------------------------------
# transmittance along a straight shadow segment (media-aware)
# --------------------------------------------------------------------------


def transmittance_walk(scene: CompiledScene, origin, target, start_medium, max_steps=8):
    """Beer-Lambert product and optical path length along origin -> target.

    Walks through pure interface surfaces (straight-line approximation, no
    refraction bending); opaque hits give zero transmittance.  The returned
    optical length scales in-medium sub-segments by the medium's ior, so
    connection times honor the optical (not geometric) path length.
    """
    m = origin.shape[0]
    trans = np.ones((m, 3))
    o = origin.copy()
    med = np.asarray(start_medium, dtype=np.int64).copy()
    delta = target - origin
    total = np.sqrt(np.sum(delta * delta, axis=-1))
    optical = total.copy()
    d = delta / np.maximum(total, 1e-300)[:, None]
    remaining = total * (1.0 - 1e-6)
    alive = remaining > 1e-9
    for _ in range(max_steps):
        if not alive.any():
            break
        si = scene.geometry.intersect(
            Ray(o, d, t_min=np.full(m, 1e-4), t_max=np.where(alive, remaining, 1e-4))
        )
        seg = np.where(si.valid & alive, si.distance, remaining)
        for mi, medium in enumerate(scene.media):
            msel = alive & (med == mi)
            if msel.any():
                trans[msel] *= np.exp(-medium.sigma_t[None, :] * seg[msel][:, None])
                optical[msel] += (medium.ior - 1.0) * seg[msel]
        hit = alive & si.valid
        opaque = hit & (si.material_id >= 0)
        trans[opaque] = 0.0
        cross = hit & ~opaque
        if not cross.any():
            break
        entering = cross & (med < 0)
        med = np.where(entering, si.medium_id, np.where(cross, -1, med))
        o = np.where(cross[:, None], si.position + d * 1e-4, o)
        remaining = np.where(cross, remaining - seg - 1e-4, remaining)
        alive = cross & (remaining > 1e-9)
    return trans, optical


# --------------------------------------------------------------------------
# polarized event matrices
# --------------------------------------------------------------------------


def _s_axis(u_in, u_out):
    s = np.cross(u_in, u_out)
    nrm = np.sqrt(np.sum(s * s, axis=-1, keepdims=True))
    fallback = propagation_frame(u_in)
    return np.where(nrm > 1e-8, s / np.where(nrm > 0, nrm, 1.0), fallback)


def event_mueller(material, f_value, wi_world, wo_world, n_shading, t_sh, b_sh):
    """Mueller BSDF value for a scattering event, (m,3,4,4) with frames.

    Light flows opposite to the traced path: in along -wo_world, out along
    -wi_world.  The matrix's (0,0) elements equal `f_value` so unpolarized
    S0 transport matches the scalar path exactly.
    """
    m = f_value.shape[0]
    u_in = -wo_world
    u_out = -wi_world
    if isinstance(material, Polarizer):
        axis = np.cos(material.axis_angle) * t_sh + np.sin(material.axis_angle) * b_sh
        f_axis = transport_frame(axis, u_in, u_in)
        base = linear_polarizer_matrix(np.zeros(m))  # horizontal in the axis frame
        mm = base[:, None, :, :] * (f_value / 0.5)[:, :, None, None]
        return MuellerSpectrum(mm, f_axis, f_axis.copy())
    if isinstance(material, Mirror):
        s_axis = _s_axis(u_in, u_out)
        mm = np.zeros((m, 3, 4, 4))
        for i in range(4):
            mm[:, :, i, i] = f_value
        return MuellerSpectrum(mm, s_axis, s_axis.copy())
    if isinstance(material, RoughPlastic):
        wi_l = to_local(wi_world, t_sh, b_sh, n_shading)
        wo_l = to_local(wo_world, t_sh, b_sh, n_shading)
        spec, diff_na, h = material._f_components(wi_l, wo_l)
        cos_ih = np.abs(np.sum(wi_l * h, axis=-1))
        f_h = material._fresnel(cos_ih)
        spec_no_f = np.where(spec > 0.0, spec / np.maximum(f_h, 1e-12), 0.0)
        mf = fresnel_reflection_matrix(material.ior, np.clip(cos_ih, 1e-6, 1.0))
        s_axis = _s_axis(u_in, u_out)
        m_spec = mf[:, None, :, :] * spec_no_f[:, None, None, None]
        m_diff = depolarizer_matrix(diff_na[:, None] * material.albedo[None, :])
        # scale so the S0 response to unpolarized light equals f_value
        total = m_spec + m_diff
        s0 = np.maximum(total[:, :, 0, 0], 1e-300)
        total = total * (f_value / s0)[:, :, None, None]
        return MuellerSpectrum(total, s_axis, s_axis.copy())
    # diffuse & anything depolarizing
    mm = depolarizer_matrix(f_value)
    return MuellerSpectrum(mm, propagation_frame(u_in), propagation_frame(u_out))


def chain_mueller(beta_m, event: MuellerSpectrum, f_out, f_in, u_in, u_out):
    """beta <- beta @ M_world, with M_world re-framed to (f_in -> f_out)."""
    world = to_world_mueller(event, f_in, f_out, u_in, u_out)
    return np.einsum("ncij,ncjk->ncik", beta_m, world.m, optimize=False)


def apply_beta(beta_m, rgb):
    """Stokes vector produced by the Mueller throughput acting on an
    unpolarized source of the given RGB magnitude."""
    s = np.zeros(rgb.shape[:-1] + (3, 4))
    s[..., :, 0] = rgb
    return np.einsum("ncij,ncj->nci", beta_m, s, optimize=False)


# --------------------------------------------------------------------------
# the wavefront tracer
# --------------------------------------------------------------------------


@dataclass
class TraceOptions:
    polarized: bool = False
    media: bool = False
    sampling: str = "full"  # full | bsdf_only | nee_only
    params: list = field(default_factory=list)  # material indices for d/d albedo
    max_depth: int = 8
    rr_depth: int = 4


def trace_paths(scene: CompiledScene, px, py, sample_idx, seed, sink, opts: TraceOptions, rays=None):
    """Trace one batch of camera paths and feed contributions into `sink`."""
    if opts.polarized and opts.media:
        raise IntegratorError("polarized volumetric transport is not supported")
    n = px.shape[0]
    cam = scene.camera
    c_light = scene.speed_of_light
    axis = scene.axis
    nparams = len(opts.params)

    pixel_flat = (py.astype(np.uint64) * np.uint64(max(cam.width, 1))) + px.astype(np.uint64)
    streams = rnglib.fold_key(
        rnglib.fold_key(np.zeros(n, dtype=np.uint64), pixel_flat),
        np.asarray(sample_idx, dtype=np.uint64),
    )

    def draw(it, usage, lanes=None):
        site = np.uint64((it + 1) * _SITE_STRIDE + usage)
        s = streams if lanes is None else streams[lanes]
        return rnglib.random_float(seed, s, np.full(s.shape, site, dtype=np.uint64))

    if rays is None:
        u1 = draw(-1, _U_JITTER_X)
        u2 = draw(-1, _U_JITTER_Y)
        d = cam.generate_rays(px.astype(np.float64), py.astype(np.float64), u1, u2)
        o = np.broadcast_to(cam.origin, (n, 3)).copy()
        t_opt = np.zeros(n)
    else:
        o = rays.origin.copy()
        d = rays.direction.copy()
        t_opt = rays.time_offset.copy()

    beta = np.ones((n, 3))
    dbeta = np.zeros((nparams, n, 3)) if nparams else None
    active = np.ones(n, dtype=bool)
    prev_pdf = np.zeros(n)
    prev_delta = np.ones(n, dtype=bool)
    depth = np.zeros(n, dtype=np.int64)
    cur_med = np.full(n, -1, dtype=np.int64)
    unwarp_off = np.zeros(n)
    first_vertex = np.zeros((n, 3))
    have_first = np.zeros(n, dtype=bool)

    if opts.polarized:
        mbeta = np.zeros((n, 3, 4, 4))
        for i in range(4):
            mbeta[:, :, i, i] = 1.0
        cur_frame = cam.stokes_frame(d) if rays is None else propagation_frame(-d)
    else:
        mbeta = None
        cur_frame = None

    def deposit(lanes, time, value, stokes=None, dvalues=None):
        if lanes.size == 0:
            return
        sink.add(
            px[lanes],
            py[lanes],
            time,
            unwarp_off[lanes],
            value,
            stokes,
            dvalues,
            vertex=first_vertex[lanes],
        )

    max_iters = opts.max_depth * 2 + 16
    for it in range(max_iters):
        if not active.any():
            break
        idx_act = np.where(active)[0]
        si = _expand_si(
            scene.geometry.intersect(Ray(o[idx_act], d[idx_act])), idx_act, n
        )
        dist_surf = np.where(si.valid, si.distance, np.inf)
        next_active = np.zeros(n, dtype=bool)

        # ---- free flight through media up to the surface ----
        med_event = np.zeros(n, dtype=bool)
        if opts.media and (cur_med >= 0).any():
            u_ch = draw(it, _U_MED_CH)
            u_md = draw(it, _U_MED_DIST)
            for mi, medium in enumerate(scene.media):
                msel = active & (cur_med == mi)
                if not msel.any():
                    continue
                dmed, _, event, weight = sample_distance(
                    medium, u_ch[msel], u_md[msel], dist_surf[msel]
                )
                beta[msel] *= weight
                if nparams:
                    dbeta[:, msel] *= weight[None, ...]
                t_opt[msel] += dmed * medium.ior / c_light
                lanes = np.where(msel)[0]
                ev_lanes = lanes[event]
                med_event[ev_lanes] = True
                beta[ev_lanes] *= medium.sigma_s[None, :]
                if nparams:
                    dbeta[:, ev_lanes] *= medium.sigma_s[None, None, :]
                o[ev_lanes] = o[ev_lanes] + d[ev_lanes] * dmed[event][:, None]

        # ---- medium scattering vertices ----
        if med_event.any():
            lanes = np.where(med_event)[0]
            depth[lanes] += 1
            ok_depth = depth[lanes] + 1 <= opts.max_depth
            pos = o[lanes]
            g_here = np.zeros(lanes.size)
            for mi, medium in enumerate(scene.media):
                g_here[cur_med[lanes] == mi] = medium.g
            # next-event estimation from the medium vertex
            if opts.sampling != "bsdf_only" and scene.emitters and ok_depth.any():
                es = sample_emitter_connection(
                    scene,
                    pos,
                    draw(it, _U_NEE_PICK, lanes),
                    draw(it, _U_NEE_A, lanes),
                    draw(it, _U_NEE_B, lanes),
                )
                wdir = normalize(es.target - pos)
                cos_t = np.sum(wdir * d[lanes], axis=-1)
                rho = hg_pdf(g_here, cos_t)
                if opts.sampling == "nee_only":
                    mis = np.ones(lanes.size)
                else:
                    mis = np.where(es.is_delta, 1.0, power_heuristic(es.pdf_solid, rho))
                base = es.radiance * (es.geom * rho * mis)[:, None]
                contrib = beta[lanes] * base
                cand = es.valid & ok_depth & (np.max(np.abs(contrib), axis=-1) > 0.0)
                if cand.any():
                    trans, opt_len = transmittance_walk(
                        scene, pos[cand], es.target[cand], cur_med[lanes][cand]
                    )
                    vals = contrib[cand] * trans
                    keep = np.max(vals, axis=-1) > 0.0
                    out_lanes = lanes[cand][keep]
                    time = (
                        t_opt[lanes][cand][keep]
                        + opt_len[keep] / c_light
                        + es.extra_time[cand][keep]
                    )
                    dv = None
                    if nparams:
                        dv = dbeta[:, lanes][:, cand][:, keep] * (base[cand][keep] * trans[keep])[None, ...]
                    deposit(out_lanes, time, vals[keep], None, dv)
            # phase-sampled continuation
            ua = draw(it, _U_PHASE_A, lanes)
            ub = draw(it, _U_PHASE_B, lanes)
            local_dir = np.zeros((lanes.size, 3))
            pdf_ph = np.zeros(lanes.size)
            for gv in np.unique(g_here):
                gs = g_here == gv
                ld, pp = sample_hg_phase(float(gv), ua[gs], ub[gs])
                local_dir[gs] = ld
                pdf_ph[gs] = pp
            t_fr, b_fr = build_frame(d[lanes])
            d[lanes] = to_world(local_dir, t_fr, b_fr, d[lanes])
            prev_pdf[lanes] = pdf_ph
            prev_delta[lanes] = False
            survive = _russian_roulette(lanes[ok_depth], depth, beta, dbeta, draw(it, _U_RR), opts)
            next_active[survive] = True

        # lanes that missed everything (and sampled no medium event) die here;
        # lanes that passed through a medium already advanced their clock
        surf = active & si.valid & ~med_event
        vac = surf & (cur_med < 0)
        t_opt[vac] += dist_surf[vac] / c_light

        if surf.any():
            pos_all = si.position
            n_geo = si.geometric_normal
            n_sh = si.shading_normal
            wi = -d

            newly = surf & ~have_first
            if newly.any():
                first_vertex[newly] = pos_all[newly]
                have_first[newly] = True
                if axis.unwarp:
                    unwarp_off[newly] = (
                        np.sqrt(np.sum((pos_all[newly] - cam.origin[None, :]) ** 2, axis=-1))
                        / c_light
                    )

            # ---- pure interface boundaries (medium holders without material)
            iface = surf & (si.material_id < 0) & (si.medium_id >= 0)
            if opts.media and iface.any():
                lanes = np.where(iface)[0]
                u_if = draw(it, _U_INTERFACE, lanes)
                entering = cur_med[lanes] < 0
                med_idx = np.where(entering, si.medium_id[lanes], cur_med[lanes])
                ior = np.ones(lanes.size)
                for mi, medium in enumerate(scene.media):
                    ior[med_idx == mi] = medium.ior
                eta_rel = np.where(entering, ior, 1.0 / np.maximum(ior, 1e-12))
                cos_i = np.abs(np.sum(wi[lanes] * n_geo[lanes], axis=-1))
                f_r, _, _ = fresnel_dielectric(cos_i, eta_rel)
                refl = u_if < f_r
                d_new = np.where(
                    refl[:, None],
                    normalize(
                        d[lanes]
                        - 2.0 * np.sum(d[lanes] * n_geo[lanes], axis=-1)[:, None] * n_geo[lanes]
                    ),
                    _refract(d[lanes], n_geo[lanes], eta_rel),
                )
                d[lanes] = d_new
                cur_med[lanes] = np.where(
                    refl, cur_med[lanes], np.where(entering, si.medium_id[lanes], -1)
                )
                o[lanes] = offset_origin(pos_all[lanes], n_geo[lanes], d_new)
                prev_delta[lanes] = True
                next_active[lanes] = True
                surf = surf & ~iface
            elif iface.any():
                surf = surf & ~iface  # no media support: boundary is invisible

            depth_here = depth + 1

            # ---- direct emitter hits ----
            hit_emit = surf & (si.emitter_id >= 0) & (depth_here <= opts.max_depth)
            if hit_emit.any():
                l_out = np.zeros((n, 3))
                cos_l = np.zeros(n)
                for ei, em in enumerate(scene.emitters):
                    if em.kind != "area":
                        continue
                    sel = hit_emit & (si.emitter_id == ei)
                    if not sel.any():
                        continue
                    cl = -np.sum(d[sel] * em.normal[None, :], axis=-1)
                    l_out[sel] = np.where((cl > 0.0)[:, None], em.radiance[None, :], 0.0)
                    cos_l[sel] = np.maximum(cl, 0.0)
                if opts.sampling == "nee_only":
                    w = np.where(prev_delta | (depth == 0), 1.0, 0.0)
                elif opts.sampling == "bsdf_only":
                    w = np.ones(n)
                else:
                    p_nee = emitter_hit_nee_pdf(scene, si.emitter_id, dist_surf, cos_l)
                    w = np.where(prev_delta | (depth == 0), 1.0, power_heuristic(prev_pdf, p_nee))
                contrib = beta * l_out * w[:, None]
                live = np.max(np.abs(contrib), axis=-1) > 0.0
                if nparams:
                    live |= np.max(np.abs(dbeta * (l_out * w[:, None])[None, ...]), axis=(0, 2)) > 0.0
                lanes = np.where(hit_emit & live)[0]
                if lanes.size:
                    st = (
                        apply_beta(mbeta[lanes], (l_out * w[:, None])[lanes])
                        if opts.polarized
                        else None
                    )
                    dv = (
                        dbeta[:, lanes] * (l_out * w[:, None])[None, lanes]
                        if nparams
                        else None
                    )
                    deposit(lanes, t_opt[lanes], contrib[lanes], st, dv)

            depth = np.where(surf, depth_here, depth)
            can_continue = surf & (depth + 1 <= opts.max_depth)

            # ---- next-event estimation per material ----
            if opts.sampling != "bsdf_only" and scene.emitters and can_continue.any():
                u_pick = draw(it, _U_NEE_PICK)
                u_a = draw(it, _U_NEE_A)
                u_b = draw(it, _U_NEE_B)
                for m_idx, mat in enumerate(scene.materials):
                    msel = can_continue & (si.material_id == m_idx)
                    if mat.is_delta or not msel.any():
                        continue
                    lanes = np.where(msel)[0]
                    t_sh, b_sh = build_frame(n_sh[lanes])
                    wi_l = to_local(wi[lanes], t_sh, b_sh, n_sh[lanes])
                    es = sample_emitter_connection(
                        scene, pos_all[lanes], u_pick[lanes], u_a[lanes], u_b[lanes]
                    )
                    wdir = normalize(es.target - pos_all[lanes])
                    wo_l = to_local(wdir, t_sh, b_sh, n_sh[lanes])
                    f_val, df_val = mat.eval(wi_l, wo_l)
                    cos_x = np.maximum(wo_l[:, 2], 0.0)
                    if opts.sampling == "nee_only":
                        mis = np.ones(lanes.size)
                    else:
                        pdf_b = mat.pdf(wi_l, wo_l)
                        mis = np.where(es.is_delta, 1.0, power_heuristic(es.pdf_solid, pdf_b))
                    base = es.radiance * (es.geom * cos_x * mis)[:, None]
                    contrib = beta[lanes] * f_val * base
                    live = np.max(np.abs(contrib), axis=-1) > 0.0
                    if nparams:
                        # pure-derivative deposits survive a zero primal
                        for k, pm in enumerate(opts.params):
                            term = dbeta[k, lanes] * f_val
                            if pm == m_idx:
                                term = term + beta[lanes] * df_val
                            live |= np.max(np.abs(term * base), axis=-1) > 0.0
                    cand = es.valid & live
                    if not cand.any():
                        continue
                    src = offset_origin(pos_all[lanes][cand], n_geo[lanes][cand], wdir[cand])
                    if opts.media:
                        trans, opt_len = transmittance_walk(
                            scene, src, es.target[cand], cur_med[lanes][cand]
                        )
                        keep = np.max(trans, axis=-1) > 0.0
                        conn_time = opt_len / c_light + es.extra_time[cand]
                    else:
                        trans = None
                        keep = ~scene.geometry.occluded(src, es.target[cand])
                        conn_time = (es.distance / c_light + es.extra_time)[cand]
                    if not keep.any():
                        continue
                    out_lanes = lanes[cand][keep]
                    vals = contrib[cand][keep]
                    if trans is not None:
                        vals = vals * trans[keep]
                    time = t_opt[lanes][cand][keep] + conn_time[keep]
                    dv = None
                    if nparams:
                        dv = np.zeros((nparams, out_lanes.size, 3))
                        for k, pm in enumerate(opts.params):
                            term = dbeta[k, lanes] * f_val
                            if pm == m_idx:
                                term = term + beta[lanes] * df_val
                            tv = (term * base)[cand][keep]
                            if trans is not None:
                                tv = tv * trans[keep]
                            dv[k] = tv
                    st = None
                    if opts.polarized:
                        ev = event_mueller(
                            mat,
                            f_val[cand][keep],
                            wi[out_lanes],
                            wdir[cand][keep],
                            n_sh[out_lanes],
                            t_sh[cand][keep],
                            b_sh[cand][keep],
                        )
                        f_conn = propagation_frame(-wdir[cand][keep])
                        bm = chain_mueller(
                            mbeta[out_lanes],
                            ev,
                            cur_frame[out_lanes],
                            f_conn,
                            -wdir[cand][keep],
                            -wi[out_lanes],
                        )
                        semit = base[cand][keep]
                        if trans is not None:
                            semit = semit * trans[keep]
                        st = apply_beta(bm, semit)
                    deposit(out_lanes, time, vals, st, dv)

            # ---- BSDF sampling continuation ----
            if can_continue.any():
                u_lobe = draw(it, _U_LOBE)
                u_1 = draw(it, _U_DIR_A)
                u_2 = draw(it, _U_DIR_B)
                for m_idx, mat in enumerate(scene.materials):
                    msel = can_continue & (si.material_id == m_idx)
                    if not msel.any():
                        continue
                    lanes = np.where(msel)[0]
                    t_sh, b_sh = build_frame(n_sh[lanes])
                    wi_l = to_local(wi[lanes], t_sh, b_sh, n_sh[lanes])
                    res = mat.sample(wi_l, u_lobe[lanes], u_1[lanes], u_2[lanes])
                    wo_w = to_world(res.wo, t_sh, b_sh, n_sh[lanes])
                    if opts.polarized:
                        ev = event_mueller(
                            mat, res.weight, wi[lanes], wo_w, n_sh[lanes], t_sh, b_sh
                        )
                        f_next = transport_frame(cur_frame[lanes], -wi[lanes], -wo_w)
                        mbeta[lanes] = chain_mueller(
                            mbeta[lanes], ev, cur_frame[lanes], f_next, -wo_w, -wi[lanes]
                        )
                        cur_frame[lanes] = f_next
                    if nparams:
                        for k, pm in enumerate(opts.params):
                            term = dbeta[k, lanes] * res.weight
                            if pm == m_idx:
                                term = term + beta[lanes] * res.dweight
                            dbeta[k, lanes] = term
                    beta[lanes] = beta[lanes] * res.weight
                    d[lanes] = wo_w
                    o[lanes] = offset_origin(pos_all[lanes], n_geo[lanes], wo_w)
                    prev_pdf[lanes] = res.pdf
                    prev_delta[lanes] = res.delta
                    alive = np.max(res.weight, axis=-1) > 0.0
                    if nparams:
                        # keep lanes whose derivative throughput is still live
                        alive |= np.max(np.abs(dbeta[:, lanes]), axis=(0, 2)) > 0.0
                    alive_lanes = lanes[alive]
                    survive = _russian_roulette(
                        alive_lanes, depth, beta, dbeta, draw(it, _U_RR), opts
                    )
                    next_active[survive] = True

        active = next_active


def _russian_roulette(lanes, depth, beta, dbeta, u_full, opts):
    """Returns the subset of `lanes` that survives roulette, rescaling beta."""
    if lanes.size == 0:
        return lanes
    rr = depth[lanes] >= opts.rr_depth
    if not rr.any():
        return lanes
    q = np.minimum(1.0, np.max(beta[lanes], axis=-1))
    u = u_full[lanes]
    kill = rr & ((q <= 0.0) | (u >= q))
    survive_mask = ~kill
    boost = rr & survive_mask
    if boost.any():
        scale = 1.0 / np.maximum(q[boost], 1e-300)
        beta[lanes[boost]] *= scale[:, None]
        if dbeta is not None and np.size(dbeta):
            dbeta[:, lanes[boost]] *= scale[None, :, None]
    return lanes[survive_mask]


def _expand_si(si_sub, idx, n):
    """Scatter a subset SurfaceInteraction back to full lane width."""
    from .geometry import SurfaceInteraction

    valid = np.zeros(n, dtype=bool)
    valid[idx] = si_sub.valid
    full = SurfaceInteraction(
        valid=valid,
        position=_scatter(si_sub.position, idx, (n, 3)),
        geometric_normal=_scatter(si_sub.geometric_normal, idx, (n, 3)),
        shading_normal=_scatter(si_sub.shading_normal, idx, (n, 3)),
        uv=_scatter(si_sub.uv, idx, (n, 2)),
        distance=_scatter(si_sub.distance, idx, (n,), fill=np.inf),
        shape_id=_scatter(si_sub.shape_id, idx, (n,), dtype=np.int64, fill=-1),
        material_id=_scatter(si_sub.material_id, idx, (n,), dtype=np.int64, fill=-1),
        prim_index=_scatter(si_sub.prim_index, idx, (n,), dtype=np.int64, fill=-1),
    )
    full.emitter_id = _scatter(si_sub.emitter_id, idx, (n,), dtype=np.int64, fill=-1)
    full.medium_id = _scatter(si_sub.medium_id, idx, (n,), dtype=np.int64, fill=-1)
    return full


def _scatter(values, idx, shape, dtype=np.float64, fill=0):
    out = np.full(shape, fill, dtype=dtype)
    out[idx] = values
    return out


def _refract(d, n_oriented, eta_rel):
    """Snell refraction; n_oriented faces against d; eta_rel = n_t / n_i."""
    cos_i = -np.sum(d * n_oriented, axis=-1)
    inv = 1.0 / eta_rel
    sin2_t = inv**2 * np.maximum(0.0, 1.0 - cos_i**2)
    cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, 1.0))
    t = inv[:, None] * d + (inv * cos_i - cos_t)[:, None] * n_oriented
    return normalize(t)


# --------------------------------------------------------------------------
# render orchestration
# --------------------------------------------------------------------------


def _trace_options(scene: CompiledScene, sampling="full", params=None) -> TraceOptions:
    integ = scene.integrator
    if integ.kind not in ("path", "volpath"):
        raise IntegratorError(f"integrator kind {integ.kind!r} is not renderable here")
    if integ.kind == "path" and scene.media:
        raise IntegratorError("scene contains participating media; use the volpath integrator")
    return TraceOptions(
        polarized=bool(integ.polarized),
        media=(integ.kind == "volpath"),
        sampling=sampling,
        params=list(params or []),
        max_depth=integ.max_depth,
        rr_depth=integ.rr_depth,
    )


def _tile_ranges(width, height):
    for y0 in range(0, height, TILE_SIZE):
        for x0 in range(0, width, TILE_SIZE):
            yield x0, y0, min(TILE_SIZE, width - x0), min(TILE_SIZE, height - y0)


def _render_tile(scene, x0, y0, tw, th, spp, seed, opts, n_grad):
    channels = 12 if opts.polarized else 3
    film = Film(tw, th, scene.axis, channels, scene.speed_of_light)
    grad_films = [
        Film(tw, th, scene.axis, 3, scene.speed_of_light) for _ in range(n_grad)
    ]
    sink = FilmSink(film, grad_films, unwarp=scene.axis.unwarp, x0=x0, y0=y0)
    xs, ys = np.meshgrid(np.arange(x0, x0 + tw), np.arange(y0, y0 + th))
    px_tile = xs.ravel().astype(np.int64)
    py_tile = ys.ravel().astype(np.int64)
    lane_cap = MAX_LANES_POLARIZED if opts.polarized else MAX_LANES
    spp_chunk = max(1, lane_cap // max(1, px_tile.size))
    s = 0
    while s < spp:
        cnt = min(spp_chunk, spp - s)
        px = np.tile(px_tile, cnt)
        py = np.tile(py_tile, cnt)
        sample_idx = np.repeat(np.arange(s, s + cnt, dtype=np.uint64), px_tile.size)
        trace_paths(scene, px, py, sample_idx, seed, sink, opts)
        film.add_weights(px_tile - x0, py_tile - y0, float(cnt))
        s += cnt
    return film, grad_films


def _run_tiles(cs, tiles, spp, seed, opts, n_grad, nthreads):
    """Run the tile jobs, optionally over a process pool (fork).

    Per-pixel RNG streams make every tile's arithmetic identical no matter
    where it runs, so results are byte-identical for any worker count.
    """
    if nthreads > 1 and len(tiles) > 1:
        ctx = multiprocessing.get_context("fork")
        with ProcessPoolExecutor(max_workers=nthreads, mp_context=ctx) as pool:
            futures = [
                pool.submit(_render_tile, cs, x0, y0, tw, th, spp, seed, opts, n_grad)
                for (x0, y0, tw, th) in tiles
            ]
            return [f.result() for f in futures]
    return [
        _render_tile(cs, x0, y0, tw, th, spp, seed, opts, n_grad)
        for (x0, y0, tw, th) in tiles
    ]


def render(
    scene: SceneDescription | CompiledScene,
    spp: int,
    seed: int = 0,
    threads: int = 0,
    sampling: str = "full",
):
    """Render steady and transient outputs from one shared path set.

    Deterministic for a fixed seed regardless of `threads`.  Returns
    (SteadyImage, TransientCube).
    """
    if spp < 1:
        raise IntegratorError("spp must be >= 1")
    cs = scene if isinstance(scene, CompiledScene) else compile_scene(scene)
    opts = _trace_options(cs, sampling=sampling)
    nthreads = resolve_threads(threads)
    cam = cs.camera
    channels = 12 if opts.polarized else 3
    full = Film(cam.width, cam.height, cs.axis, channels, cs.speed_of_light)

    tiles = list(_tile_ranges(cam.width, cam.height))
    shards = _run_tiles(cs, tiles, spp, seed, opts, 0, nthreads)
    for (x0, y0, tw, th), (shard, _) in zip(tiles, shards):
        full.merge(shard, x0, y0)

    _apply_pulse_profile(cs, full)
    cube = full.finalize(spp)
    steady = steady_collapse(cube)
    return steady, cube


def _apply_pulse_profile(scene: CompiledScene, film: Film):
    """Optional Gaussian emission profile applied as a temporal convolution.

    Energy pushed past the axis ends is moved to the overflow buffer so the
    steady collapse stays closed.
    """
    fwhm = 0.0
    for em in scene.emitters:
        if em.kind == "pulsed_laser":
            fwhm = max(fwhm, em.pulse_fwhm)
    if fwhm <= 0.0:
        return
    sigma = fwhm / (2.0 * np.sqrt(2.0 * np.log(2.0))) / scene.axis.bin_width
    radius = max(1, int(np.ceil(4.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma) ** 2)
    kernel /= kernel.sum()
    nt = film.bins.shape[0]
    data = film.bins
    out = np.zeros_like(data)
    lost = np.zeros_like(film.overflow)
    for j, kv in enumerate(kernel):
        shift = j - radius
        lo = max(0, -shift)
        hi = min(nt, nt - shift)
        if lo < hi:
            out[lo + shift : hi + shift] += kv * data[lo:hi]
        if lo > 0:
            lost += kv * data[:lo].sum(axis=0)
        if hi < nt:
            lost += kv * data[hi:].sum(axis=0)
    film.bins = out
    film.overflow = film.overflow + lost


# --------------------------------------------------------------------------
# single-ray sampling entry points
# --------------------------------------------------------------------------


def transient_path_sample(scene: CompiledScene, camera_ray: Ray, rng_state, sampling="full"):
    """Trace one camera ray; returns a list of
    (arrival_time, RGB contribution, last_visible_vertex)."""
    opts = TraceOptions(
        polarized=False,
        media=False,
        sampling=sampling,
        max_depth=scene.integrator.max_depth,
        rr_depth=scene.integrator.rr_depth,
    )
    return _sample_one(scene, camera_ray, rng_state, opts)


def transient_volpath_sample(scene: CompiledScene, camera_ray: Ray, rng_state, sampling="full"):
    """Volumetric variant of transient_path_sample."""
    opts = TraceOptions(
        polarized=False,
        media=True,
        sampling=sampling,
        max_depth=scene.integrator.max_depth,
        rr_depth=scene.integrator.rr_depth,
    )
    return _sample_one(scene, camera_ray, rng_state, opts)


def _sample_one(scene, camera_ray, rng_state, opts):
    sink = CollectSink()
    px = np.zeros(1, dtype=np.int64)
    py = np.zeros(1, dtype=np.int64)
    # the scalar RngState's (seed, stream) pair maps onto the lane stream
    seed = rnglib.fold_key(np.uint64(rng_state.seed), np.uint64(rng_state.stream))[()]
    trace_paths(scene, px, py, np.zeros(1, dtype=np.uint64), seed, sink, opts, rays=camera_ray)
    return sink.records


def next_event_estimation(scene: CompiledScene, position, normal, material_id, wi_world, rng_state):
    """One NEE connection from a surface vertex.

    Returns (contribution RGB, connection_time); the contribution folds the
    BSDF, geometry term, visibility, transmittance, and the MIS weight.
    """
    pos = np.atleast_2d(np.asarray(position, dtype=np.float64))
    nrm = np.atleast_2d(np.asarray(normal, dtype=np.float64))
    wi = np.atleast_2d(np.asarray(wi_world, dtype=np.float64))
    u_pick = np.array([rng_state.next_float()])
    u_a = np.array([rng_state.next_float()])
    u_b = np.array([rng_state.next_float()])
    es = sample_emitter_connection(scene, pos, u_pick, u_a, u_b)
    if not es.valid[0]:
        return np.zeros(3), 0.0
    mat = scene.materials[material_id]
    if mat.is_delta:
        return np.zeros(3), 0.0
    t_sh, b_sh = build_frame(nrm)
    wi_l = to_local(wi, t_sh, b_sh, nrm)
    wdir = normalize(es.target - pos)
    wo_l = to_local(wdir, t_sh, b_sh, nrm)
    f_val, _ = mat.eval(wi_l, wo_l)
    cos_x = np.maximum(wo_l[:, 2], 0.0)
    pdf_b = mat.pdf(wi_l, wo_l)
    mis = np.where(es.is_delta, 1.0, power_heuristic(es.pdf_solid, pdf_b))
    contrib = f_val * (es.radiance * (es.geom * cos_x * mis)[:, None])
    src = offset_origin(pos, nrm, wdir)
    time = float(es.distance[0] / scene.speed_of_light + es.extra_time[0])
    if scene.media:
        trans, opt_len = transmittance_walk(scene, src, es.target, np.full(1, -1))
        time = float(opt_len[0] / scene.speed_of_light + es.extra_time[0])
        return contrib[0] * trans[0], time
    if scene.geometry.occluded(src, es.target)[0]:
        return np.zeros(3), time
    return contrib[0], time
