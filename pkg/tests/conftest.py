"""Shared scene builders and Monte Carlo statistics helpers."""

import numpy as np
import pytest

from picolight.scene import (
    CameraDesc,
    EmitterDesc,
    FilmDesc,
    IntegratorDesc,
    MaterialDesc,
    SceneDescription,
    ShapeDesc,
)


def plane_point_scene(
    d=1.0,
    albedo=0.5,
    intensity=5.0,
    width=8,
    height=8,
    fov=20.0,
    n_bins=8,
    bin_width=0.25,
    t_start=None,
    max_depth=2,
    unwarp=False,
):
    """Colocated point light + pinhole camera, diffuse plane at distance d.

    With c = 1 every direct contribution arrives at ~2d (spread by the pixel
    footprint), so t_start defaults to put 2d inside bin 1.
    """
    if t_start is None:
        t_start = 2.0 * d - 1.5 * bin_width
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, d],
            look_at=[0.0, 0.0, 0.0],
            fov_degrees=fov,
            width=width,
            height=height,
        ),
        film=FilmDesc(t_start=t_start, bin_width=bin_width, n_bins=n_bins, unwarp=unwarp),
        shapes=[
            ShapeDesc(
                id="plane",
                type="rectangle",
                center=[0.0, 0.0, 0.0],
                edge_u=[4.0 * d, 0.0, 0.0],
                edge_v=[0.0, 4.0 * d, 0.0],
                material="m",
            )
        ],
        materials=[MaterialDesc(id="m", type="diffuse", albedo=[albedo] * 3)],
        emitters=[EmitterDesc(type="point", position=[0.0, 0.0, d], intensity=[intensity] * 3)],
        integrator=IntegratorDesc(kind="path", max_depth=max_depth, rr_depth=8),
    )


def emissive_wall_scene(width=16, height=16, unwarp=True, bin_width=0.01, n_bins=40):
    """A pulsed emitting wall seen directly: unwarped direct response is
    exactly t = 0 for every pixel."""
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, 1.0],
            look_at=[0.0, 0.0, 0.0],
            fov_degrees=50.0,
            width=width,
            height=height,
        ),
        film=FilmDesc(
            t_start=-5.5 * bin_width if unwarp else 1.0 - 2 * bin_width,
            bin_width=bin_width,
            n_bins=n_bins,
            unwarp=unwarp,
        ),
        shapes=[
            ShapeDesc(
                id="wall",
                type="rectangle",
                center=[0.0, 0.0, 0.0],
                edge_u=[2.0, 0.0, 0.0],
                edge_v=[0.0, 2.0, 0.0],
                material="wall_m",
            )
        ],
        materials=[MaterialDesc(id="wall_m", type="diffuse", albedo=[0.0, 0.0, 0.0])],
        emitters=[EmitterDesc(type="area", shape="wall", radiance=[1.0, 1.0, 1.0])],
        integrator=IntegratorDesc(kind="path", max_depth=2, rr_depth=8),
    )


def slab_scene(
    sigma_a=(0.5, 0.5, 0.5),
    sigma_s=(0.0, 0.0, 0.0),
    g=0.0,
    ior=1.0,
    thickness=1.0,
    intensity=5.0,
    width=4,
    height=4,
    n_bins=64,
    bin_width=0.05,
    max_depth=8,
):
    """Camera and colocated point light at z=3 looking at a plane at z=0,
    with a medium slab spanning z in [1, 1+thickness]."""
    z0 = 1.0
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, 3.0],
            look_at=[0.0, 0.0, 0.0],
            fov_degrees=10.0,
            width=width,
            height=height,
        ),
        film=FilmDesc(t_start=5.5, bin_width=bin_width, n_bins=n_bins),
        shapes=[
            ShapeDesc(
                id="screen",
                type="rectangle",
                center=[0.0, 0.0, 0.0],
                edge_u=[3.0, 0.0, 0.0],
                edge_v=[0.0, 3.0, 0.0],
                material="m",
            ),
            ShapeDesc(
                id="slab",
                type="box",
                min=[-2.0, -2.0, z0],
                max=[2.0, 2.0, z0 + thickness],
                interior_medium="fog",
            ),
        ],
        materials=[MaterialDesc(id="m", type="diffuse", albedo=[0.6, 0.6, 0.6])],
        media=[
            dict_medium("fog", sigma_a, sigma_s, g, ior),
        ],
        emitters=[EmitterDesc(type="point", position=[0.0, 0.0, 3.0], intensity=[intensity] * 3)],
        integrator=IntegratorDesc(kind="volpath", max_depth=max_depth, rr_depth=16),
    )


def groove_scene(albedo=0.6, intensity=9.0, width=6, height=6, max_depth=4):
    """Floor plus a perpendicular wall sharing one material: paths pick up
    one, two, or three albedo factors, so the render is cubic in the albedo."""
    desc = plane_point_scene(
        d=1.0,
        albedo=albedo,
        intensity=intensity,
        width=width,
        height=height,
        n_bins=16,
        bin_width=0.25,
        t_start=1.5,
        max_depth=max_depth,
    )
    desc.shapes.append(
        ShapeDesc(
            id="side_wall",
            type="rectangle",
            center=[0.5, 0.0, 0.4],
            edge_u=[0.0, 0.0, 0.4],
            edge_v=[0.0, 0.8, 0.0],
            material="m",
        )
    )
    return desc


def dict_medium(mid, sigma_a, sigma_s, g, ior):
    from picolight.scene import MediumDesc

    return MediumDesc(
        id=mid, sigma_a=list(sigma_a), sigma_s=list(sigma_s), g=float(g), ior=float(ior)
    )


def two_spot_scene(albedo_a=0.5, albedo_b=0.25, lead_a=1.6, lead_b=0.4, width=1, height=8):
    """Mirror-symmetric pair of laser-lit side panels reflecting onto a wall.

    Swapping the panel albedos leaves the steady image unchanged in
    expectation: the visible wall strip is centered on the symmetry plane
    (one pixel column, jitter symmetric about x = 0) and the lasers differ
    only in standoff distance, which shifts arrival time without touching
    throughput.  The transient cube moves energy between bins separated by
    (lead_a - lead_b)/c.
    """
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 0.0, 2.0],
            look_at=[0.0, 0.0, -2.0],
            fov_degrees=3.0,
            width=width,
            height=height,
        ),
        film=FilmDesc(t_start=5.2, bin_width=0.05, n_bins=56),
        shapes=[
            ShapeDesc(
                id="wall",
                type="rectangle",
                center=[0.0, 0.0, -2.0],
                edge_u=[0.4, 0.0, 0.0],
                edge_v=[0.0, 0.4, 0.0],
                material="wall_m",
            ),
            ShapeDesc(
                id="panel_a",
                type="rectangle",
                center=[-1.0, 0.0, -1.0],
                edge_u=[0.0, 0.15, 0.0],
                edge_v=[0.0, 0.0, 0.15],
                material="mat_a",
            ),
            ShapeDesc(
                id="panel_b",
                type="rectangle",
                center=[1.0, 0.0, -1.0],
                edge_u=[0.0, 0.0, 0.15],
                edge_v=[0.0, 0.15, 0.0],
                material="mat_b",
            ),
        ],
        materials=[
            MaterialDesc(id="wall_m", type="diffuse", albedo=[0.6, 0.6, 0.6]),
            MaterialDesc(id="mat_a", type="diffuse", albedo=[albedo_a] * 3),
            MaterialDesc(id="mat_b", type="diffuse", albedo=[albedo_b] * 3),
        ],
        emitters=[
            EmitterDesc(
                type="pulsed_laser",
                id="laser_a",
                origin=[-1.0 + lead_a, 0.0, -1.0],
                target=[-1.0, 0.0, -1.0],
                power=[40.0, 40.0, 40.0],
            ),
            EmitterDesc(
                type="pulsed_laser",
                id="laser_b",
                origin=[1.0 - lead_b, 0.0, -1.0],
                target=[1.0, 0.0, -1.0],
                power=[40.0, 40.0, 40.0],
            ),
        ],
        integrator=IntegratorDesc(kind="path", max_depth=4, rr_depth=8),
    )


def mc_mean_sigma(fn, seeds):
    """Mean and standard error of a per-seed statistic array."""
    vals = np.stack([np.asarray(fn(s), dtype=np.float64) for s in seeds])
    mean = vals.mean(axis=0)
    sem = vals.std(axis=0, ddof=1) / np.sqrt(len(seeds))
    return mean, sem


def assert_within_sigma(m1, s1, m2, s2, k=3.0, floor=1e-12):
    """|m1 - m2| <= k * combined standard error (with an absolute floor)."""
    diff = np.abs(np.asarray(m1) - np.asarray(m2))
    tol = k * np.sqrt(np.asarray(s1) ** 2 + np.asarray(s2) ** 2) + floor
    assert np.all(diff <= tol), f"max excess {np.max(diff - tol):g}"


@pytest.fixture(scope="session")
def cornell16():
    """Compiled small Cornell box shared across tests."""
    from picolight.scene import compile_scene, cornell_box

    return compile_scene(cornell_box(width=16, height=16))
