"""Material models: evaluation, importance sampling, and polarized forms.

All directions are unit vectors in the local shading frame (z = shading
normal, both `wi` and `wo` point away from the surface).  Sampling follows
the weight = eval * cos / pdf convention, so a cosine-sampled Lambertian
bounce has weight equal to its albedo.

Every eval/sample also returns the partial derivative of its value with
respect to the material's albedo so gradient replay never divides by the
albedo (exact at albedo 0).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import normalize, sample_cosine_hemisphere

LOBE_NONE = -1
LOBE_DIFFUSE = 0
LOBE_SPECULAR = 1
LOBE_TRANSMIT = 2


class MaterialError(KeyError):
    pass


def fresnel_dielectric(cos_i, eta):
    """Unpolarized dielectric reflectance plus (r_s, r_p) amplitudes.

    `eta` is the relative index (transmitted over incident); total internal
    reflection returns reflectance 1 with unit-magnitude amplitudes.
    """
    cos_i = np.clip(np.asarray(cos_i, dtype=np.float64), 0.0, 1.0)
    sin2_t = (1.0 - cos_i**2) / eta**2
    tir = sin2_t >= 1.0
    cos_t = np.sqrt(np.clip(1.0 - sin2_t, 0.0, 1.0))
    r_s = (cos_i - eta * cos_t) / (cos_i + eta * cos_t)
    r_p = (eta * cos_i - cos_t) / (eta * cos_i + cos_t)
    r_s = np.where(tir, 1.0, r_s)
    r_p = np.where(tir, 1.0, r_p)
    return 0.5 * (r_s**2 + r_p**2), r_s, r_p


def fresnel_conductor(cos_i, eta, k):
    """Per-channel unpolarized conductor reflectance (eta, k arrays of shape (3,))."""
    cos_i = np.clip(np.asarray(cos_i, dtype=np.float64), 0.0, 1.0)[..., None]
    c2 = cos_i**2
    e2k2 = eta**2 + k**2
    rs = (e2k2 - 2.0 * eta * cos_i + c2) / (e2k2 + 2.0 * eta * cos_i + c2)
    rp = (e2k2 * c2 - 2.0 * eta * cos_i + 1.0) / (e2k2 * c2 + 2.0 * eta * cos_i + 1.0)
    return 0.5 * (rs + rp)


# -- GGX microfacet helpers -------------------------------------------------


def _ggx_d(cos_h, alpha):
    c2 = np.clip(cos_h, 0.0, 1.0) ** 2
    denom = c2 * (alpha**2 - 1.0) + 1.0
    return alpha**2 / np.maximum(np.pi * denom**2, 1e-300)


def _smith_g1(cos_w, alpha):
    c = np.clip(np.abs(cos_w), 1e-9, 1.0)
    tan2 = (1.0 - c**2) / c**2
    return 2.0 / (1.0 + np.sqrt(1.0 + alpha**2 * tan2))


def _sample_ggx_h(u1, u2, alpha):
    tan2 = alpha**2 * u1 / np.maximum(1.0 - u1, 1e-12)
    cos_h = 1.0 / np.sqrt(1.0 + tan2)
    sin_h = np.sqrt(np.maximum(0.0, 1.0 - cos_h**2))
    phi = 2.0 * np.pi * u2
    return np.stack([sin_h * np.cos(phi), sin_h * np.sin(phi), cos_h], axis=-1)


@dataclass
class SampleResult:
    wo: np.ndarray  # (N, 3) local
    weight: np.ndarray  # (N, 3) throughput factor (cos folded)
    dweight: np.ndarray  # (N, 3) d weight / d albedo
    pdf: np.ndarray  # (N,) solid-angle pdf, 0 marks a discrete event
    delta: np.ndarray  # (N,) bool: discrete (specular) event
    lobe: np.ndarray  # (N,) int


class Diffuse:
    is_delta = False

    def __init__(self, albedo):
        self.albedo = np.asarray(albedo, dtype=np.float64)

    def eval(self, wi, wo):
        up = (wi[:, 2] > 0.0) & (wo[:, 2] > 0.0)
        f = np.where(up[:, None], self.albedo[None, :] / np.pi, 0.0)
        df = np.where(up[:, None], 1.0 / np.pi, 0.0)
        return f, df

    def pdf(self, wi, wo):
        up = (wi[:, 2] > 0.0) & (wo[:, 2] > 0.0)
        return np.where(up, wo[:, 2] / np.pi, 0.0)

    def sample(self, wi, u_lobe, u1, u2) -> SampleResult:
        n = wi.shape[0]
        wo, pdf = sample_cosine_hemisphere(u1, u2)
        ok = (wi[:, 2] > 0.0) & (wo[:, 2] > 0.0) & (pdf > 0.0)
        weight = np.where(ok[:, None], self.albedo[None, :], 0.0)
        dweight = np.where(ok[:, None], 1.0, 0.0)
        return SampleResult(
            wo,
            weight,
            dweight,
            np.where(ok, pdf, 0.0),
            np.zeros(n, dtype=bool),
            np.full(n, LOBE_DIFFUSE),
        )


class RoughPlastic:
    """Specular GGX coat over a diffuse substrate, Fresnel-weighted lobes."""

    is_delta = False

    def __init__(self, albedo, roughness, ior):
        self.albedo = np.asarray(albedo, dtype=np.float64)
        self.alpha = float(roughness) ** 2
        self.ior = float(ior)

    def _fresnel(self, cos_i):
        r, _, _ = fresnel_dielectric(cos_i, self.ior)
        return r

    def _f_components(self, wi, wo):
        up = (wi[:, 2] > 0.0) & (wo[:, 2] > 0.0)
        h = normalize(wi + wo)
        h = np.where((h[:, 2] < 0.0)[:, None], -h, h)
        cos_ih = np.sum(wi * h, axis=-1)
        d = _ggx_d(h[:, 2], self.alpha)
        g = _smith_g1(wi[:, 2], self.alpha) * _smith_g1(wo[:, 2], self.alpha)
        f_h = self._fresnel(np.abs(cos_ih))
        denom = np.maximum(4.0 * wi[:, 2] * wo[:, 2], 1e-12)
        spec = np.where(up, d * g * f_h / denom, 0.0)
        kd = (1.0 - self._fresnel(wi[:, 2])) * (1.0 - self._fresnel(wo[:, 2]))
        diff_no_albedo = np.where(up, kd / np.pi, 0.0)
        return spec, diff_no_albedo, h

    def eval(self, wi, wo):
        spec, diff_na, _ = self._f_components(wi, wo)
        f = spec[:, None] + diff_na[:, None] * self.albedo[None, :]
        return f, np.broadcast_to(diff_na[:, None], f.shape).copy()

    def _pdf_parts(self, wi, wo):
        up = (wi[:, 2] > 0.0) & (wo[:, 2] > 0.0)
        h = normalize(wi + wo)
        h = np.where((h[:, 2] < 0.0)[:, None], -h, h)
        cos_ih = np.maximum(np.sum(wi * h, axis=-1), 1e-12)
        pdf_spec = _ggx_d(h[:, 2], self.alpha) * np.abs(h[:, 2]) / (4.0 * cos_ih)
        pdf_diff = np.maximum(wo[:, 2], 0.0) / np.pi
        p_spec = self._fresnel(wi[:, 2])
        return np.where(up, p_spec * pdf_spec + (1.0 - p_spec) * pdf_diff, 0.0)

    def pdf(self, wi, wo):
        return self._pdf_parts(wi, wo)

    def sample(self, wi, u_lobe, u1, u2) -> SampleResult:
        n = wi.shape[0]
        p_spec = self._fresnel(wi[:, 2])
        take_spec = u_lobe < p_spec
        h = _sample_ggx_h(u1, u2, self.alpha)
        wo_spec = 2.0 * np.sum(wi * h, axis=-1)[:, None] * h - wi
        wo_diff, _ = sample_cosine_hemisphere(u1, u2)
        wo = np.where(take_spec[:, None], wo_spec, wo_diff)
        pdf = self._pdf_parts(wi, wo)
        f, df = self.eval(wi, wo)
        ok = (wo[:, 2] > 0.0) & (wi[:, 2] > 0.0) & (pdf > 1e-12)
        cos_o = np.maximum(wo[:, 2], 0.0)
        scale = np.where(ok, cos_o / np.maximum(pdf, 1e-300), 0.0)
        return SampleResult(
            wo,
            f * scale[:, None],
            df * scale[:, None],
            np.where(ok, pdf, 0.0),
            np.zeros(n, dtype=bool),
            np.where(take_spec, LOBE_SPECULAR, LOBE_DIFFUSE),
        )


class Mirror:
    """Perfect specular conductor; reflectance from the complex index per
    channel, treated as polarization-preserving."""

    is_delta = True

    def __init__(self, eta, k):
        self.eta = np.asarray(eta, dtype=np.float64)
        self.k = np.asarray(k, dtype=np.float64)

    def eval(self, wi, wo):
        z = np.zeros((wi.shape[0], 3))
        return z, z.copy()

    def pdf(self, wi, wo):
        return np.zeros(wi.shape[0])

    def sample(self, wi, u_lobe, u1, u2) -> SampleResult:
        n = wi.shape[0]
        wo = np.stack([-wi[:, 0], -wi[:, 1], wi[:, 2]], axis=-1)
        ok = wi[:, 2] > 0.0
        refl = fresnel_conductor(wi[:, 2], self.eta, self.k)
        weight = np.where(ok[:, None], refl, 0.0)
        return SampleResult(
            wo,
            weight,
            np.zeros((n, 3)),
            np.zeros(n),
            np.ones(n, dtype=bool),
            np.full(n, LOBE_SPECULAR),
        )


class Polarizer:
    """Ideal linear polarizing sheet: delta transmission straight through.

    In unpolarized RGB transport it passes half the radiance (Malus average
    over incoherent input); the polarized Mueller form lives in
    `polarization.polarizer_event_mueller`.
    """

    is_delta = True

    def __init__(self, transmission_axis_angle):
        self.axis_angle = float(transmission_axis_angle)

    def eval(self, wi, wo):
        z = np.zeros((wi.shape[0], 3))
        return z, z.copy()

    def pdf(self, wi, wo):
        return np.zeros(wi.shape[0])

    def sample(self, wi, u_lobe, u1, u2) -> SampleResult:
        n = wi.shape[0]
        wo = -wi  # continue through the sheet
        weight = np.full((n, 3), 0.5)
        return SampleResult(
            wo,
            weight,
            np.zeros((n, 3)),
            np.zeros(n),
            np.ones(n, dtype=bool),
            np.full(n, LOBE_TRANSMIT),
        )


def compile_material(desc):
    if desc.type == "diffuse":
        return Diffuse(desc.albedo)
    if desc.type == "rough_plastic":
        return RoughPlastic(desc.albedo, desc.roughness, desc.ior)
    if desc.type == "mirror":
        return Mirror(desc.eta, desc.k)
    if desc.type == "polarizer":
        return Polarizer(desc.transmission_axis_angle)
    raise MaterialError(f"unknown material type {desc.type!r}")


def lookup_material(materials, material_id):
    """Hard error on unresolved ids, per the evaluation contract."""
    if material_id < 0 or material_id >= len(materials):
        raise MaterialError(f"unknown material id {material_id}")
    return materials[material_id]
