"""Vector math substrate: rays, shading frames, and sampling primitives.

All routines are vectorized over a leading batch axis; points and
directions are float64 arrays of shape (..., 3).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS_NORMAL_OFFSET = 1e-4  # scale-aware self-intersection offset, see offset_origin


def dot(a, b):
    return np.sum(a * b, axis=-1)


def norm(a):
    return np.sqrt(np.sum(a * a, axis=-1))


def normalize(a):
    n = norm(a)
    return a / np.where(n > 0.0, n, 1.0)[..., None]


def cross(a, b):
    return np.cross(a, b)


def reflect(d, n):
    """Mirror direction `d` about normal `n` (d points toward the surface)."""
    return d - 2.0 * dot(d, n)[..., None] * n


def build_frame(n):
    """Orthonormal basis (t, b, n) for unit normals n, branch-free (Duff et al. style)."""
    n = np.atleast_2d(n)
    sign = np.where(n[:, 2] >= 0.0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=-1)
    bt = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=-1)
    return t, bt


def to_local(v, t, b, n):
    return np.stack([dot(v, t), dot(v, b), dot(v, n)], axis=-1)


def to_world(v, t, b, n):
    return v[..., 0:1] * t + v[..., 1:2] * b + v[..., 2:3] * n


def offset_origin(p, n_geo, direction):
    """Offset `p` along the geometric normal to suppress self-intersection.

    The offset is 1e-4 * max(1, |p|), signed so it lies on the side of the
    surface the new ray departs into.
    """
    scale = EPS_NORMAL_OFFSET * np.maximum(1.0, norm(p))
    side = np.where(dot(n_geo, direction) >= 0.0, 1.0, -1.0)
    return p + (scale * side)[..., None] * n_geo


@dataclass
class Ray:
    """A (batch of) rays with clip distances and accumulated optical time.

    `time_offset` is the optical path time already accumulated when the ray
    leaves its origin, so arrival times can be carried through scattering.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_min: np.ndarray | float = 0.0
    t_max: np.ndarray | float = np.inf
    time_offset: np.ndarray | float = 0.0

    def __post_init__(self):
        self.origin = np.atleast_2d(np.asarray(self.origin, dtype=np.float64))
        self.direction = np.atleast_2d(np.asarray(self.direction, dtype=np.float64))
        n = self.origin.shape[0]
        self.t_min = np.broadcast_to(np.asarray(self.t_min, dtype=np.float64), (n,)).copy()
        self.t_max = np.broadcast_to(np.asarray(self.t_max, dtype=np.float64), (n,)).copy()
        self.time_offset = np.broadcast_to(
            np.asarray(self.time_offset, dtype=np.float64), (n,)
        ).copy()

    def at(self, t):
        return self.origin + np.asarray(t)[..., None] * self.direction

    def validate(self):
        if np.any(np.abs(norm(self.direction) - 1.0) > 1e-6):
            raise ValueError("ray direction must be unit length")
        if np.any(self.t_min < 0.0) or np.any(self.t_max <= self.t_min):
            raise ValueError("require 0 <= t_min < t_max")


@dataclass
class SurfaceInteraction:
    """Batched hit record. Lanes where `valid` is False carry no meaning."""

    valid: np.ndarray
    position: np.ndarray
    geometric_normal: np.ndarray
    shading_normal: np.ndarray
    uv: np.ndarray
    distance: np.ndarray
    shape_id: np.ndarray
    material_id: np.ndarray
    prim_index: np.ndarray = field(default=None)

    def orient_to(self, wi_world):
        """Flip shading normals into the hemisphere of `wi_world` (incoming, away
        from surface) and keep geometric/shading normals consistently signed."""
        flip = np.where(dot(self.geometric_normal, wi_world) < 0.0, -1.0, 1.0)
        self.geometric_normal = self.geometric_normal * flip[..., None]
        sflip = np.where(dot(self.shading_normal, self.geometric_normal) < 0.0, -1.0, 1.0)
        self.shading_normal = self.shading_normal * sflip[..., None]


def sample_uniform_disk_concentric(u1, u2):
    """Shirley-Chiu concentric map from [0,1)^2 to the unit disk."""
    ox = 2.0 * np.asarray(u1) - 1.0
    oy = 2.0 * np.asarray(u2) - 1.0
    zero = (ox == 0.0) & (oy == 0.0)
    use_x = np.abs(ox) > np.abs(oy)
    safe_ox = np.where(ox == 0.0, 1.0, ox)
    safe_oy = np.where(oy == 0.0, 1.0, oy)
    r = np.where(use_x, ox, oy)
    theta = np.where(
        use_x,
        (np.pi / 4.0) * (oy / safe_ox),
        (np.pi / 2.0) - (np.pi / 4.0) * (ox / safe_oy),
    )
    x = np.where(zero, 0.0, r * np.cos(theta))
    y = np.where(zero, 0.0, r * np.sin(theta))
    return x, y


def sample_cosine_hemisphere(u1, u2):
    """Cosine-weighted direction on the z >= 0 hemisphere.

    Returns (direction, pdf) with pdf = cos(theta) / pi.
    """
    x, y = sample_uniform_disk_concentric(u1, u2)
    z = np.sqrt(np.maximum(0.0, 1.0 - x * x - y * y))
    d = np.stack([x, y, z], axis=-1)
    pdf = z / np.pi
    return d, pdf


def cosine_hemisphere_pdf(direction):
    z = np.asarray(direction)[..., 2]
    return np.where(z > 0.0, z / np.pi, 0.0)


def sample_uniform_sphere(u1, u2):
    """Uniform direction on the sphere, pdf = 1/(4 pi)."""
    z = 1.0 - 2.0 * np.asarray(u1)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * np.asarray(u2)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)


def signed_angle(a, b, axis):
    """Signed angle rotating `a` onto `b` about `axis` (right-hand rule)."""
    return np.arctan2(dot(cross(a, b), axis), dot(a, b))
