"""picolight: a time-resolved (transient) physically based renderer.

Renders picosecond-scale light transport into transient cubes, supports
time gating / unwarping / peak-time visualization, Stokes-resolved
polarized transport, albedo gradients with inverse rendering, and
non-line-of-sight capture simulation with hardware-style noise.
"""

from .film import (
    SteadyImage,
    TemporalAxis,
    TransientCube,
    bin_index,
    peak_time_map,
    read_tcube,
    steady_collapse,
    time_gate,
    tonemap_transient,
    unwarp_time,
    write_tcube,
)
from .integrators import render, transient_path_sample, transient_volpath_sample
from .rng import RngState
from .scene import SceneDescription, compile_scene, cornell_box, parse_scene

__version__ = "0.1.0"

__all__ = [
    "RngState",
    "SceneDescription",
    "SteadyImage",
    "TemporalAxis",
    "TransientCube",
    "bin_index",
    "compile_scene",
    "cornell_box",
    "parse_scene",
    "peak_time_map",
    "read_tcube",
    "render",
    "steady_collapse",
    "time_gate",
    "tonemap_transient",
    "transient_path_sample",
    "transient_volpath_sample",
    "unwarp_time",
    "write_tcube",
    "__version__",
]
