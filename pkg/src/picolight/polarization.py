"""Stokes/Mueller algebra and polarization visualization maps.

Conventions:
  - A Stokes vector is stored per color channel as (..., 3, 4) together with
    a `frame` unit vector: the horizontal reference axis, perpendicular to
    the propagation direction.
  - rotate_frame(theta) re-expresses a Stokes vector in a frame rotated by
    +theta about the propagation direction (right-hand rule), which maps
    S1 -> S1 cos2t + S2 sin2t and S2 -> -S1 sin2t + S2 cos2t.
  - Mueller matrices carry an input and an output frame and act on the left:
    S_out = M @ S_in.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .film import LUMA_WEIGHTS, TransientCube
from .geometry import dot, normalize, signed_angle
from .materials import fresnel_dielectric

FRAME_PERP_TOL = 1e-6
AOLP_MAGNITUDE_THRESHOLD = 1e-4  # relative to S0


class PolarizationError(ValueError):
    pass


@dataclass
class StokesSpectrum:
    """Per-channel Stokes 4-vector with its reference frame."""

    s: np.ndarray  # (..., 3, 4)
    frame: np.ndarray  # (..., 3)

    def s0(self):
        return self.s[..., 0]


@dataclass
class MuellerSpectrum:
    m: np.ndarray  # (..., 3, 4, 4)
    in_frame: np.ndarray
    out_frame: np.ndarray


def _check_perp(frame, direction, what):
    if np.any(np.abs(dot(frame, direction)) > FRAME_PERP_TOL):
        raise PolarizationError(f"{what} must be perpendicular to propagation")


def rotator(theta):
    """Frame-rotation Mueller matrix R(theta); vectorized over theta."""
    theta = np.asarray(theta, dtype=np.float64)
    c2 = np.cos(2.0 * theta)
    s2 = np.sin(2.0 * theta)
    m = np.zeros(theta.shape + (4, 4))
    m[..., 0, 0] = 1.0
    m[..., 3, 3] = 1.0
    m[..., 1, 1] = c2
    m[..., 1, 2] = s2
    m[..., 2, 1] = -s2
    m[..., 2, 2] = c2
    return m


def apply_mueller(m, s):
    """S_out = M @ S_in over stacked channel axes."""
    return np.einsum("...ij,...j->...i", m, s)


def rotate_stokes_frame(stokes: StokesSpectrum, new_frame, direction) -> StokesSpectrum:
    """Re-express `stokes` in `new_frame` (same propagation direction)."""
    new_frame = np.asarray(new_frame, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    _check_perp(new_frame, direction, "new frame")
    theta = signed_angle(stokes.frame, new_frame, direction)
    r = rotator(theta)
    s = apply_mueller(r[..., None, :, :], stokes.s)
    return StokesSpectrum(s, np.broadcast_to(new_frame, stokes.frame.shape).copy())


def to_world_mueller(
    mueller: MuellerSpectrum,
    world_in_frame,
    world_out_frame,
    in_direction,
    out_direction,
) -> MuellerSpectrum:
    """Conjugate a local Mueller matrix into world reference frames.

    Incoming Stokes vectors expressed in `world_in_frame` are first rotated
    into the matrix's own input frame, and results are rotated out to
    `world_out_frame`: M' = R(theta_out) M R(-theta_in).
    """
    world_in_frame = np.asarray(world_in_frame, dtype=np.float64)
    world_out_frame = np.asarray(world_out_frame, dtype=np.float64)
    _check_perp(world_in_frame, in_direction, "world input frame")
    _check_perp(world_out_frame, out_direction, "world output frame")
    theta_in = signed_angle(world_in_frame, mueller.in_frame, np.asarray(in_direction))
    theta_out = signed_angle(mueller.out_frame, world_out_frame, np.asarray(out_direction))
    r_in = rotator(theta_in)
    r_out = rotator(theta_out)
    m = np.einsum(
        "...ij,...cjk,...kl->...cil",
        r_out,
        mueller.m,
        r_in,
        optimize=False,
    )
    return MuellerSpectrum(
        m,
        np.broadcast_to(world_in_frame, mueller.in_frame.shape).copy(),
        np.broadcast_to(world_out_frame, mueller.out_frame.shape).copy(),
    )


def linear_polarizer_matrix(axis_angle):
    """Ideal linear polarizer with its axis at `axis_angle` from the frame's
    horizontal axis: R(-a) M0 R(a) with M0 the horizontal polarizer."""
    a = np.asarray(axis_angle, dtype=np.float64)
    c2 = np.cos(2.0 * a)
    s2 = np.sin(2.0 * a)
    m = np.zeros(a.shape + (4, 4))
    m[..., 0, 0] = 1.0
    m[..., 0, 1] = c2
    m[..., 0, 2] = s2
    m[..., 1, 0] = c2
    m[..., 1, 1] = c2 * c2
    m[..., 1, 2] = c2 * s2
    m[..., 2, 0] = s2
    m[..., 2, 1] = c2 * s2
    m[..., 2, 2] = s2 * s2
    return 0.5 * m


def mueller_linear_polarizer(axis_angle, frame=None, direction=None) -> MuellerSpectrum:
    frame = np.array([1.0, 0.0, 0.0]) if frame is None else np.asarray(frame, dtype=np.float64)
    m = linear_polarizer_matrix(axis_angle)
    m3 = np.broadcast_to(m[..., None, :, :], np.shape(axis_angle) + (3, 4, 4)).copy()
    return MuellerSpectrum(m3, frame.copy(), frame.copy())


def fresnel_reflection_matrix(relative_ior, cos_theta_i):
    """Dielectric Fresnel reflection Mueller matrix (s/p frame aligned).

    Built from the amplitude coefficients: A=(rs^2+rp^2)/2, B=(rs^2-rp^2)/2,
    C=rs*rp (real amplitudes below the critical angle so S=0).
    """
    cos_theta_i = np.asarray(cos_theta_i, dtype=np.float64)
    if np.any(cos_theta_i <= 0.0) or np.any(cos_theta_i > 1.0):
        raise PolarizationError("cos_theta_i must lie in (0, 1]")
    _, r_s, r_p = fresnel_dielectric(cos_theta_i, relative_ior)
    a = 0.5 * (r_s**2 + r_p**2)
    b = 0.5 * (r_s**2 - r_p**2)
    c = r_s * r_p
    s = np.zeros_like(c)
    m = np.zeros(np.shape(cos_theta_i) + (4, 4))
    m[..., 0, 0] = a
    m[..., 0, 1] = b
    m[..., 1, 0] = b
    m[..., 1, 1] = a
    m[..., 2, 2] = c
    m[..., 2, 3] = s
    m[..., 3, 2] = -s
    m[..., 3, 3] = c
    return m


def mueller_fresnel_reflection(relative_ior, cos_theta_i) -> MuellerSpectrum:
    """Spec carrier for the dielectric reflection; the reference frames are
    the s-axis (perpendicular to the plane of incidence) on both sides."""
    frame = np.array([1.0, 0.0, 0.0])
    m = fresnel_reflection_matrix(relative_ior, cos_theta_i)
    m3 = np.broadcast_to(m[..., None, :, :], np.shape(cos_theta_i) + (3, 4, 4)).copy()
    return MuellerSpectrum(m3, frame.copy(), frame.copy())


def depolarizer_matrix(scale):
    """Complete depolarizer: keeps S0 (scaled per channel), kills S1..S3."""
    scale = np.asarray(scale, dtype=np.float64)
    m = np.zeros(scale.shape + (4, 4))
    m[..., 0, 0] = scale
    return m


def stokes_physical(s, eps_rel=1e-6):
    """S0 >= |(S1,S2,S3)| within a relative tolerance of the S0 peak."""
    s = np.asarray(s)
    pol = np.sqrt(np.sum(s[..., 1:] ** 2, axis=-1))
    s0max = np.max(np.abs(s[..., 0])) if s.size else 0.0
    return np.all(s[..., 0] >= pol - eps_rel * max(s0max, 1e-300))


def degree_of_polarization(s):
    s = np.asarray(s, dtype=np.float64)
    s0 = s[..., 0]
    pol = np.sqrt(np.sum(s[..., 1:] ** 2, axis=-1))
    return np.where(s0 > 0.0, pol / np.where(s0 > 0.0, s0, 1.0), 0.0)


# -- frame transport along a path --------------------------------------------


def propagation_frame(direction, hint=None):
    """A deterministic horizontal axis perpendicular to `direction`."""
    direction = np.atleast_2d(direction)
    if hint is None:
        hint = np.array([0.0, 1.0, 0.0])
    h = np.broadcast_to(np.asarray(hint, dtype=np.float64), direction.shape)
    f = h - dot(h, direction)[..., None] * direction
    n = np.sqrt(np.sum(f * f, axis=-1, keepdims=True))
    alt = np.array([1.0, 0.0, 0.0]) - direction * direction[..., 0:1]
    f = np.where(n > 1e-8, f, alt)
    return normalize(f)


def transport_frame(frame, old_direction, new_direction):
    """Parallel-transport a reference frame across a scattering event with
    minimal twist: project onto the new propagation plane and renormalize."""
    f = frame - dot(frame, new_direction)[..., None] * new_direction
    n = np.sqrt(np.sum(f * f, axis=-1, keepdims=True))
    fallback = propagation_frame(new_direction)
    return np.where(n > 1e-8, f / np.where(n > 0, n, 1.0), fallback)


# -- visualization maps -------------------------------------------------------


def _combined_stokes(cube: TransientCube):
    if not cube.polarized:
        raise PolarizationError("polarized (12-channel) cube required")
    nt, h, w, _ = cube.data.shape
    data = cube.data.reshape(nt, h, w, 4, 3).astype(np.float64)
    return np.tensordot(data, LUMA_WEIGHTS, axes=(4, 0))  # (nt, h, w, 4)


def aolp_map(cube: TransientCube, halved: bool = False):
    """Angle of linear polarization per pixel/bin: psi = arctan2(S2, S1),
    luminance-combined over RGB. Returns (psi, valid)."""
    s = _combined_stokes(cube)
    s0, s1, s2 = s[..., 0], s[..., 1], s[..., 2]
    mag = np.sqrt(s1**2 + s2**2)
    valid = mag >= AOLP_MAGNITUDE_THRESHOLD * np.maximum(s0, 0.0)
    valid &= mag > 0.0
    psi = np.arctan2(s2, s1)
    if halved:
        psi = 0.5 * psi
    return np.where(valid, psi, np.nan), valid


def dop_map(cube: TransientCube):
    """Degree of polarization per pixel/bin with clamp-violation count.

    Returns (dop, valid, violations).
    """
    s = _combined_stokes(cube)
    s0 = s[..., 0]
    pol = np.sqrt(np.sum(s[..., 1:] ** 2, axis=-1))
    valid = s0 > 0.0
    d = np.where(valid, pol / np.where(valid, s0, 1.0), 0.0)
    violations = int(np.count_nonzero(d > 1.0 + 1e-6))
    return np.clip(d, 0.0, 1.0 + 1e-6), valid, violations


def rainbow_colormap(values):
    """Map [0,1] to a blue->red rainbow (HSV hue sweep), uint8 RGB."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64)), 0.0, 1.0)
    hue = (1.0 - v) * (240.0 / 360.0)  # red at 1, blue at 0
    i = np.floor(hue * 6.0).astype(np.int64) % 6
    f = hue * 6.0 - np.floor(hue * 6.0)
    q = 1.0 - f
    r = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [1.0, q, 0.0, 0.0, f, 1.0])
    g = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [f, 1.0, 1.0, q, 0.0, 0.0])
    b = np.select([i == 0, i == 1, i == 2, i == 3, i == 4, i == 5], [0.0, 0.0, f, 1.0, 1.0, q])
    rgb = np.stack([r, g, b], axis=-1)
    return np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)


def reds_colormap(values):
    """Map [0,1] to a white->red scale, uint8 RGB."""
    v = np.clip(np.nan_to_num(np.asarray(values, dtype=np.float64)), 0.0, 1.0)
    r = np.full(v.shape, 255.0)
    gb = (1.0 - v) * 255.0
    rgb = np.stack([r, gb, gb], axis=-1)
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def aolp_frames(cube: TransientCube, halved: bool = False):
    psi, valid = aolp_map(cube, halved)
    span = np.pi if halved else 2.0 * np.pi
    lo = -span / 2.0
    frames = rainbow_colormap((psi - lo) / span)
    frames[~valid] = 0
    return frames


def dop_frames(cube: TransientCube):
    d, valid, _ = dop_map(cube)
    frames = reds_colormap(d)
    frames[~valid] = 0
    return frames
