"""Homogeneous participating media: Beer-Lambert transmittance, spectral-MIS
free-flight sampling, and the Henyey-Greenstein phase function."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class HomogeneousMedium:
    sigma_a: np.ndarray  # (3,) 1/length
    sigma_s: np.ndarray  # (3,)
    g: float
    ior: float = 1.0

    @property
    def sigma_t(self):
        return self.sigma_a + self.sigma_s


def eval_transmittance(medium: HomogeneousMedium, distance):
    """exp(-sigma_t * d) per channel; vectorized over distance."""
    d = np.asarray(distance, dtype=np.float64)
    return np.exp(-medium.sigma_t[None, :] * np.atleast_1d(d)[:, None]).reshape(
        np.shape(d) + (3,)
    )


def sample_distance(medium: HomogeneousMedium, u_channel, u_dist, t_max=np.inf):
    """Free-flight sampling with uniform channel selection (spectral MIS).

    Returns (distance, pdf, medium_event, weight):
      - medium_event True: a scattering/absorption event at `distance` < t_max;
        pdf is the channel-averaged density, weight = T(d) * sigma_t_mix / pdf
        convention folded by the caller via sigma arrays.
      - medium_event False: pass-through to t_max; pdf is the channel-averaged
        survival probability, weight = T(t_max) / pdf.
    """
    u_channel = np.atleast_1d(np.asarray(u_channel, dtype=np.float64))
    u_dist = np.atleast_1d(np.asarray(u_dist, dtype=np.float64))
    n = u_channel.shape[0]
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (n,))
    sig = medium.sigma_t
    if np.all(sig == 0.0):
        ones = np.ones((n, 3))
        return t_max.copy(), np.ones(n), np.zeros(n, dtype=bool), ones

    ch = np.minimum((u_channel * 3).astype(np.int64), 2)
    sig_ch = sig[ch]
    # channels with sigma 0 cannot trigger an event
    with np.errstate(divide="ignore"):
        dist = np.where(sig_ch > 0.0, -np.log1p(-u_dist) / np.where(sig_ch > 0, sig_ch, 1.0), np.inf)
    event = dist < t_max
    d = np.where(event, dist, t_max)

    tr = np.exp(-sig[None, :] * d[:, None])  # (n, 3)
    pdf_event = np.mean(sig[None, :] * tr, axis=-1)
    pdf_pass = np.mean(tr, axis=-1)
    pdf = np.where(event, pdf_event, pdf_pass)
    weight = np.where(
        event[:, None],
        tr / np.maximum(pdf_event, 1e-300)[:, None],
        tr / np.maximum(pdf_pass, 1e-300)[:, None],
    )
    return d, pdf, event, weight


def hg_pdf(g, cos_theta):
    denom = 1.0 + g * g + 2.0 * g * np.asarray(cos_theta)
    return (1.0 - g * g) / (4.0 * np.pi * np.maximum(denom, 1e-12) ** 1.5)


def sample_hg_phase(g, u1, u2):
    """Henyey-Greenstein direction in the frame where +z is the incoming
    propagation direction. Returns (direction, pdf)."""
    u1 = np.atleast_1d(np.asarray(u1, dtype=np.float64))
    u2 = np.atleast_1d(np.asarray(u2, dtype=np.float64))
    if abs(g) < 1e-4:
        cos_t = 1.0 - 2.0 * u1
    else:
        sq = (1.0 - g * g) / (1.0 - g + 2.0 * g * u1)
        cos_t = (1.0 + g * g - sq * sq) / (2.0 * g)
    cos_t = np.clip(cos_t, -1.0, 1.0)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t**2))
    phi = 2.0 * np.pi * u2
    d = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    return d, hg_pdf(g, cos_t)
