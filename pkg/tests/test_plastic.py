"""Rough plastic in full renders: sampling/pdf consistency through MIS and
the polarized Fresnel coat."""

import numpy as np

from picolight.film import read_tcube, write_tcube
from picolight.integrators import render
from picolight.polarization import stokes_physical
from picolight.scene import (
    CameraDesc,
    EmitterDesc,
    FilmDesc,
    IntegratorDesc,
    MaterialDesc,
    SceneDescription,
    ShapeDesc,
    compile_scene,
)
from tests.conftest import assert_within_sigma, mc_mean_sigma


def plastic_floor_scene(polarized=False, roughness=0.3):
    """Area light specularly reflected off a rough plastic floor into the
    camera at ~56 degrees incidence (the Brewster angle for ior 1.5), so
    the coat's Fresnel lobe carries strongly polarized light."""
    # lamp normal faces the floor center: normalize([0, -1, 1.5])
    ev = [0.0, 0.2496151, 0.1664101]  # 0.3 * normalize(cross(n, x-axis))
    return SceneDescription(
        camera=CameraDesc(
            origin=[0.0, 1.0, 1.5],
            look_at=[0.0, 0.0, 0.0],
            fov_degrees=25.0,
            width=6,
            height=6,
        ),
        film=FilmDesc(t_start=1.5, bin_width=0.25, n_bins=24),
        shapes=[
            ShapeDesc(
                id="floor",
                type="rectangle",
                center=[0.0, 0.0, 0.0],
                edge_u=[1.5, 0.0, 0.0],
                edge_v=[0.0, 0.0, 1.5],
                material="coat",
            ),
            ShapeDesc(
                id="lamp_panel",
                type="rectangle",
                center=[0.0, 1.0, -1.5],
                edge_u=[0.25, 0.0, 0.0],
                edge_v=ev,
                material="dark",
            ),
        ],
        materials=[
            MaterialDesc(id="coat", type="rough_plastic", albedo=[0.5, 0.3, 0.2], roughness=roughness, ior=1.5),
            MaterialDesc(id="dark", type="diffuse", albedo=[0.0, 0.0, 0.0]),
        ],
        emitters=[EmitterDesc(type="area", shape="lamp_panel", radiance=[8.0, 8.0, 8.0])],
        integrator=IntegratorDesc(kind="path", max_depth=3, rr_depth=8, polarized=polarized),
    )


def test_plastic_mis_strategies_agree():
    """NEE-only and BSDF-only converge to the same mean, which requires
    pdf() to match the actual sampling distribution of the two-lobe model."""
    cs = compile_scene(plastic_floor_scene())

    def stat(sampling, seeds):
        def run(seed):
            steady, _ = render(cs, spp=768, seed=seed, sampling=sampling)
            return steady.data.mean(axis=(0, 1))

        return mc_mean_sigma(run, seeds)

    m_nee, s_nee = stat("nee_only", range(5))
    m_bsdf, s_bsdf = stat("bsdf_only", range(50, 58))
    m_full, s_full = stat("full", range(100, 105))
    assert_within_sigma(m_nee, s_nee, m_bsdf, s_bsdf, k=3.0)
    assert_within_sigma(m_full, s_full, m_nee, s_nee, k=3.0)


def test_plastic_polarized_render_physical_with_linear_component():
    """Oblique specular reflection off the dielectric coat polarizes light:
    the Stokes output stays physical and carries nonzero linear components."""
    desc = plastic_floor_scene(polarized=True, roughness=0.15)
    _, cube = render(compile_scene(desc), spp=96, seed=4)
    assert cube.polarized
    nt, h, w, _ = cube.data.shape
    arr = cube.data.astype(np.float64).reshape(nt, h, w, 4, 3)
    flat = arr.transpose(0, 1, 2, 4, 3).reshape(-1, 4)
    assert stokes_physical(flat, eps_rel=1e-6)
    s0 = np.abs(arr[..., 0, :]).sum()
    linear = np.sqrt(arr[..., 1, :] ** 2 + arr[..., 2, :] ** 2).sum()
    assert s0 > 0
    assert linear > 1e-3 * s0, "Fresnel coat reflection should polarize"


def test_plastic_polarized_s0_matches_unpolarized():
    d_u = plastic_floor_scene(polarized=False)
    d_p = plastic_floor_scene(polarized=True)
    _, c_u = render(compile_scene(d_u), spp=48, seed=9)
    _, c_p = render(compile_scene(d_p), spp=48, seed=9)
    assert np.allclose(c_p.data[..., 0:3], c_u.data, rtol=1e-5, atol=1e-7)


def test_polarized_cube_io_round_trip(tmp_path):
    desc = plastic_floor_scene(polarized=True)
    _, cube = render(compile_scene(desc), spp=8, seed=2)
    path = tmp_path / "pol.tcube"
    write_tcube(cube, path)
    again = read_tcube(path)
    assert again.polarized
    assert np.array_equal(again.data, cube.data)
