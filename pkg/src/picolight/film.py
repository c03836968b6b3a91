"""Transient film: time binning, the transient cube, and temporal post-processing.

The film accumulates time-stamped radiance samples into per-pixel histograms
(the transient cube).  Samples whose arrival time falls outside the temporal
axis are never dropped silently: their energy goes to a per-pixel overflow
buffer so that collapsing the cube over time plus overflow always reproduces
the steady image exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

TCUBE_MAGIC = b"TCUB"
TCUBE_VERSION = 1
# fixed header: magic (4), u32 version/nx/ny/nt/channels (20),
# f64 t_start/bin_width/speed_of_light/overflow_total (32) -> 56 bytes
TCUBE_HEADER_SIZE = 56

LUMA_WEIGHTS = np.array([0.2126, 0.7152, 0.0722])


class FilmError(ValueError):
    pass


@dataclass
class TemporalAxis:
    """Uniform time binning with optional gate and unwarp flags."""

    t_start: float
    bin_width: float
    n_bins: int
    gate: tuple[float, float] | None = None
    unwarp: bool = False

    def validate(self):
        if not self.bin_width > 0.0:
            raise FilmError("bin_width must be > 0")
        if self.n_bins < 1:
            raise FilmError("n_bins must be >= 1")
        if self.gate is not None:
            lo, hi = self.gate
            if not (lo < hi):
                raise FilmError("gate must satisfy t_open < t_close")
            if lo < self.t_start or hi > self.t_end:
                raise FilmError("gate must lie within the temporal axis")

    @property
    def t_end(self) -> float:
        return self.t_start + self.n_bins * self.bin_width

    def bin_centers(self) -> np.ndarray:
        return self.t_start + (np.arange(self.n_bins) + 0.5) * self.bin_width


def bin_index(axis: TemporalAxis, time):
    """Bin holding `time`, or -1 when outside the axis.

    A time exactly on a bin edge belongs to the higher bin (floor of the
    scaled offset).  Vectorized; scalar input gives a scalar int.
    """
    t = np.asarray(time, dtype=np.float64)
    idx = np.floor((t - axis.t_start) / axis.bin_width)
    out = np.where((idx >= 0) & (idx < axis.n_bins), idx, -1).astype(np.int64)
    if np.ndim(time) == 0:
        return int(out)
    return out


@dataclass
class TransientCube:
    """Finalized transient render: [n_bins, height, width, channels] float32.

    channels is 3 (RGB) or 12 (4 Stokes components x RGB, ordered
    S0R,S0G,S0B,S1R,...,S3B).  `overflow` keeps per-pixel energy that
    arrived outside the axis, same channel layout.
    """

    data: np.ndarray
    axis: TemporalAxis
    speed_of_light: float = 1.0
    overflow: np.ndarray = None
    weight: np.ndarray = None
    # set on cubes loaded from disk, where only the total survives
    overflow_total_stored: float = None

    def __post_init__(self):
        nt, h, w, c = self.data.shape
        if self.overflow is None:
            self.overflow = np.zeros((h, w, c), dtype=np.float64)
        if self.weight is None:
            self.weight = np.zeros((h, w), dtype=np.float64)

    @property
    def shape(self):
        return self.data.shape

    @property
    def polarized(self) -> bool:
        return self.data.shape[3] == 12

    @property
    def overflow_total(self) -> float:
        if self.overflow_total_stored is not None:
            return self.overflow_total_stored
        return float(np.sum(self.overflow))

    def s0(self) -> "TransientCube":
        """RGB intensity slice of a polarized cube (channels 0..2)."""
        if not self.polarized:
            return self
        return TransientCube(
            self.data[..., 0:3].copy(),
            self.axis,
            self.speed_of_light,
            self.overflow[..., 0:3].copy(),
            self.weight.copy(),
        )

    def allclose(self, other, rtol=1e-6, atol=1e-9):
        return (
            self.data.shape == other.data.shape
            and np.allclose(self.data, other.data, rtol=rtol, atol=atol)
            and np.allclose(self.overflow, other.overflow, rtol=rtol, atol=atol)
        )


@dataclass
class SteadyImage:
    data: np.ndarray  # [height, width, channels] float64


class Film:
    """Accumulation buffer for one render (a shard covers a pixel tile).

    Accumulates in float64; `finalize` normalizes by samples per pixel and
    converts to the float32 cube.  NaN contributions fail fast.
    """

    def __init__(
        self,
        width,
        height,
        axis: TemporalAxis,
        channels=3,
        speed_of_light=1.0,
        track_direct=False,
        temporal_filter="box",
    ):
        axis.validate()
        if temporal_filter not in ("box", "tent"):
            raise FilmError(f"unknown temporal filter {temporal_filter!r}")
        self.width = width
        self.height = height
        self.axis = axis
        self.channels = channels
        self.speed_of_light = speed_of_light
        self.temporal_filter = temporal_filter
        self.bins = np.zeros((axis.n_bins, height, width, channels), dtype=np.float64)
        self.overflow = np.zeros((height, width, channels), dtype=np.float64)
        self.weight = np.zeros((height, width), dtype=np.float64)
        # independent steady accumulator in deposit order (closure oracle)
        self.steady_direct = (
            np.zeros((height, width, channels), dtype=np.float64) if track_direct else None
        )
        self._finalized = False

    def add_sample(self, px, py, time, value):
        """Scalar convenience wrapper; the hot path is add_samples."""
        self.add_samples(
            np.asarray([px]), np.asarray([py]), np.asarray([time], dtype=np.float64),
            np.asarray(value, dtype=np.float64).reshape(1, self.channels),
        )

    def add_samples(self, px, py, time, value):
        """Accumulate a batch of contributions (px, py integer arrays)."""
        if self._finalized:
            raise FilmError("film already finalized")
        value = np.asarray(value, dtype=np.float64)
        if np.isnan(value).any():
            bad = np.argwhere(np.isnan(value))[0]
            raise FilmError(
                f"NaN radiance sample at pixel ({int(px[bad[0]])}, {int(py[bad[0]])}) "
                f"time {float(time[bad[0]]):g}"
            )
        if self.temporal_filter == "box":
            parts = [(bin_index(self.axis, time), value)]
        else:
            # tent: split each sample linearly between the two nearest bin
            # centers; the halves keep the exact energy (closure preserved)
            t = np.asarray(time, dtype=np.float64)
            pos = (t - self.axis.t_start) / self.axis.bin_width - 0.5
            lo = np.floor(pos)
            w_hi = pos - lo
            lo_idx = np.where((lo >= 0) & (lo < self.axis.n_bins), lo, -1).astype(np.int64)
            hi = lo + 1
            hi_idx = np.where((hi >= 0) & (hi < self.axis.n_bins), hi, -1).astype(np.int64)
            parts = [
                (lo_idx, value * (1.0 - w_hi)[:, None]),
                (hi_idx, value * w_hi[:, None]),
            ]
        for idx, val in parts:
            inside = idx >= 0
            if inside.any():
                flat = (idx[inside] * self.height + py[inside]) * self.width + px[inside]
                np.add.at(self.bins.reshape(-1, self.channels), flat, val[inside])
            out = ~inside
            if out.any():
                flat = py[out] * self.width + px[out]
                np.add.at(self.overflow.reshape(-1, self.channels), flat, val[out])
        if self.steady_direct is not None:
            np.add.at(
                self.steady_direct.reshape(-1, self.channels),
                py * self.width + px,
                value,
            )

    def add_weights(self, px, py, w):
        np.add.at(self.weight, (py, px), w)

    def merge(self, other, x0, y0):
        """Paste a tile shard at offset (x0, y0). Tiles are disjoint."""
        h, w = other.height, other.width
        self.bins[:, y0 : y0 + h, x0 : x0 + w, :] += other.bins
        self.overflow[y0 : y0 + h, x0 : x0 + w, :] += other.overflow
        self.weight[y0 : y0 + h, x0 : x0 + w] += other.weight

    def finalize(self, spp) -> TransientCube:
        self._finalized = True
        inv = 1.0 / float(spp)
        cube = TransientCube(
            (self.bins * inv).astype(np.float32),
            self.axis,
            self.speed_of_light,
            self.overflow * inv,
            self.weight.copy(),
        )
        if not np.isfinite(cube.data).all():
            raise FilmError("non-finite values in finalized cube")
        return cube


def steady_collapse(cube: TransientCube) -> SteadyImage:
    """Sum over all time bins plus per-pixel overflow energy."""
    total = np.sum(cube.data, axis=0, dtype=np.float64) + cube.overflow
    return SteadyImage(total)


def time_gate(cube: TransientCube, t_open: float, t_close: float) -> SteadyImage:
    """Integrate bins inside [t_open, t_close], boundary bins weighted by the
    linear fraction of their overlap with the gate."""
    ax = cube.axis
    if not (t_open < t_close):
        raise FilmError("gate must satisfy t_open < t_close")
    if t_open < ax.t_start - 1e-12 or t_close > ax.t_end + 1e-12:
        raise FilmError("gate must lie within the temporal axis")
    edges = ax.t_start + np.arange(ax.n_bins + 1) * ax.bin_width
    lo = np.clip((np.minimum(edges[1:], t_close) - np.maximum(edges[:-1], t_open)), 0.0, None)
    frac = lo / ax.bin_width
    out = np.tensordot(frac, cube.data.astype(np.float64), axes=(0, 0))
    return SteadyImage(out)


def unwarp_time(path_time, last_visible_vertex, camera_origin, c):
    """Shift arrival times to a shared world-time origin by removing the
    camera-to-first-hit propagation delay."""
    d = np.sqrt(np.sum((np.asarray(last_visible_vertex) - np.asarray(camera_origin)) ** 2, axis=-1))
    return np.asarray(path_time) - d / c


def peak_time_map(cube: TransientCube):
    """Per pixel: (bin-center time of the luminance peak, peak luminance, valid).

    Ties resolve to the earliest bin; all-zero pixels are flagged invalid.
    """
    rgb = cube.data[..., 0:3].astype(np.float64)
    luma = np.tensordot(rgb, LUMA_WEIGHTS, axes=(3, 0))  # [nt, h, w]
    peak_bin = np.argmax(luma, axis=0)  # first max wins ties
    peak_val = np.max(luma, axis=0)
    valid = peak_val > 0.0
    times = cube.axis.t_start + (peak_bin + 0.5) * cube.axis.bin_width
    times = np.where(valid, times, np.nan)
    return times, peak_val, valid


def tonemap_transient(cube: TransientCube, gamma: float = 2.2) -> np.ndarray:
    """8-bit frame sequence [nt, h, w, 3] under one global exposure.

    A single scale (1 / global max) is used for the whole video so relative
    brightness between frames is preserved; per channel x -> (scale*x)^(1/gamma).
    """
    rgb = cube.data[..., 0:3].astype(np.float64)
    peak = float(np.max(rgb)) if rgb.size else 0.0
    if peak <= 0.0:
        return np.zeros(rgb.shape, dtype=np.uint8)
    scaled = np.clip(rgb / peak, 0.0, 1.0) ** (1.0 / gamma)
    return np.clip(np.rint(scaled * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image_u8):
    """Binary PPM (P6) writer for one [h, w, 3] uint8 frame."""
    h, w, _ = image_u8.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(image_u8.tobytes())


def write_frames(dirpath, frames_u8, pattern="frame_%05d.ppm"):
    import os

    os.makedirs(dirpath, exist_ok=True)
    paths = []
    for i in range(frames_u8.shape[0]):
        p = os.path.join(dirpath, pattern % i)
        write_ppm(p, frames_u8[i])
        paths.append(p)
    return paths


class TcubeError(IOError):
    pass


def write_tcube(cube: TransientCube, path):
    """Serialize a finalized cube; see docs/scene-format.md for the layout."""
    nt, ny, nx, ch = cube.data.shape
    header = struct.pack(
        "<4sIIIII",
        TCUBE_MAGIC,
        TCUBE_VERSION,
        nx,
        ny,
        nt,
        ch,
    ) + struct.pack(
        "<dddd",
        cube.axis.t_start,
        cube.axis.bin_width,
        cube.speed_of_light,
        cube.overflow_total,
    )
    payload = np.ascontiguousarray(cube.data, dtype="<f4")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def read_tcube(path) -> TransientCube:
    with open(path, "rb") as f:
        raw = f.read()
    fixed = struct.calcsize("<4sIIIII") + struct.calcsize("<dddd")
    if len(raw) < fixed:
        raise TcubeError(f"truncated header: expected {fixed} bytes, got {len(raw)}")
    magic, version, nx, ny, nt, ch = struct.unpack_from("<4sIIIII", raw, 0)
    t_start, bin_width, c, overflow_total = struct.unpack_from(
        "<dddd", raw, struct.calcsize("<4sIIIII")
    )
    if magic != TCUBE_MAGIC:
        raise TcubeError(f"bad magic {magic!r}, expected {TCUBE_MAGIC!r}")
    if version != TCUBE_VERSION:
        raise TcubeError(f"unsupported version {version}, expected {TCUBE_VERSION}")
    if ch not in (3, 12) or min(nx, ny, nt) < 1:
        raise TcubeError(f"implausible dimensions nx={nx} ny={ny} nt={nt} channels={ch}")
    expected = fixed + nt * ny * nx * ch * 4
    if len(raw) != expected:
        raise TcubeError(f"payload size mismatch: expected {expected} bytes, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=fixed).reshape(nt, ny, nx, ch).copy()
    axis = TemporalAxis(t_start, bin_width, nt)
    # only the overflow total survives serialization, not its per-pixel split
    return TransientCube(data, axis, c, overflow_total_stored=overflow_total)
