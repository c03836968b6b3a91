"""NLOS subsystem: rig validation, tailored sampling, capture, noise model,
file I/O, and backprojection."""

import numpy as np
import pytest

from picolight.film import TemporalAxis
from picolight.nlos import (
    NlosCapture,
    NlosError,
    NlosRig,
    apply_noise,
    backproject,
    build_nlos_scene,
    capture,
    gaussian_kernel_bins,
    load_irf_kernel,
    make_runtime,
    nlos_path_contributions,
    nlos_path_sample,
    read_capture,
    two_patch_rig,
    write_capture,
    _capture_range,
)
from picolight.rng import RngState, fold_key
from picolight.scene import MaterialDesc, ShapeDesc, parse_scene


def small_point_rig(z=0.6, half=0.02, grid=(8, 8), n_bins=256, **kw):
    return NlosRig(
        wall_center=[0.0, 0.0, 0.0],
        wall_edge_u=[0.5, 0.0, 0.0],
        wall_edge_v=[0.0, 0.5, 0.0],
        laser_origin=[0.0, 0.0, 1.0],
        sensor_origin=[0.0, 0.0, 1.0],
        laser_grid=tuple(grid),
        hidden_shapes=[
            ShapeDesc(
                id="target",
                type="rectangle",
                center=[0.1, 0.05, z],
                edge_u=[half, 0.0, 0.0],
                edge_v=[0.0, half, 0.0],
                material="target_mat",
            )
        ],
        hidden_materials=[MaterialDesc(id="target_mat", type="diffuse", albedo=[0.9] * 3)],
        n_bins=n_bins,
        **kw,
    )


# -- rig and scene construction -----------------------------------------------------


def test_rig_validation_sides():
    rig = small_point_rig()
    rig.laser_origin = [0.0, 0.0, -1.0]
    with pytest.raises(NlosError):
        rig.validate()
    rig = small_point_rig()
    rig.hidden_shapes[0].center = [0.1, 0.05, -0.6]
    with pytest.raises(NlosError):
        build_nlos_scene(rig)


def test_build_scene_round_trip():
    rig = small_point_rig()
    desc = build_nlos_scene(rig)
    again = parse_scene(desc.to_yaml())
    assert again == desc


def test_empty_hidden_scene_zero_capture():
    rig = small_point_rig()
    rig.hidden_shapes = []
    rig.hidden_materials = []
    rig.n_bins = 64
    cap = capture(rig, spp=16, seed=0, threads=1)
    assert np.all(cap.H == 0.0)


def test_laser_aims_at_every_grid_point():
    # no hidden occluders in the beam cone for the aim oracle
    rig = small_point_rig(grid=(16, 16))
    rig.hidden_shapes = []
    rig.hidden_materials = []
    rig.n_bins = 32
    rt = make_runtime(rig)
    pts = rig.grid_points("laser")
    laser = np.asarray(rig.laser_origin, float)
    from picolight.geometry import Ray, normalize

    d = normalize(pts - laser[None, :])
    si = rt.compiled.geometry.intersect(Ray(np.tile(laser, (pts.shape[0], 1)), d))
    assert si.valid.all()
    assert np.max(np.linalg.norm(si.position - pts, axis=-1)) < 1e-6


# -- sampling -------------------------------------------------------------------------


def test_confocal_peak_time_oracle():
    rig = small_point_rig(grid=(4, 4))
    cap = capture(rig, spp=1024, seed=1, threads=1)
    pts = rig.grid_points("laser")
    target = np.array(rig.hidden_shapes[0].center)
    for gi in range(pts.shape[0]):
        d = np.linalg.norm(pts[gi] - target)
        t_pred = 2.0 * d
        peak = int(np.argmax(cap.H[gi]))
        lo = cap.axis.t_start + peak * cap.axis.bin_width
        hi = lo + cap.axis.bin_width
        # patch has finite extent; allow the analytic center time one bin off
        assert lo - cap.axis.bin_width <= t_pred <= hi + cap.axis.bin_width


def test_account_flags_shift_response():
    rig_off = small_point_rig(grid=(2, 2))
    rig_on = small_point_rig(grid=(2, 2), account_first_bounce=True)
    rig_on.t_start = 0.0
    rig_on.bin_width = None
    cap_off = capture(rig_off, spp=2048, seed=3, threads=1)
    # share the axis so the shift is a pure lag
    rig_on.t_start = cap_off.axis.t_start
    rig_on.bin_width = cap_off.axis.bin_width
    rig_on.n_bins = cap_off.axis.n_bins * 2
    cap_on = capture(rig_on, spp=2048, seed=3, threads=1)
    pts = rig_off.grid_points("laser")
    laser = np.asarray(rig_off.laser_origin, float)
    for gi in range(pts.shape[0]):
        lead = np.linalg.norm(pts[gi] - laser)
        expected_lag = lead / cap_off.axis.bin_width
        a = cap_off.H[gi]
        b = cap_on.H[gi][: a.size]
        corr = np.correlate(b, a, mode="full")
        lag = int(np.argmax(corr)) - (a.size - 1)
        assert abs(lag - expected_lag) <= 1.0


def test_radiometric_falloff_inverse_fourth():
    """Confocal response integrates to ~1/d^4 for a small patch."""
    totals = {}
    for d in (1.0, 1.5, 2.0):
        rig = NlosRig(
            wall_center=[0.0, 0.0, 0.0],
            wall_edge_u=[0.5, 0.0, 0.0],
            wall_edge_v=[0.0, 0.5, 0.0],
            laser_origin=[0.0, 0.0, 1.0],
            sensor_origin=[0.0, 0.0, 1.0],
            laser_grid=(1, 1),
            hidden_shapes=[
                ShapeDesc(
                    id="p",
                    type="rectangle",
                    center=[0.0, 0.0, d],
                    edge_u=[0.02, 0.0, 0.0],
                    edge_v=[0.0, 0.02, 0.0],
                    material="pm",
                )
            ],
            hidden_materials=[MaterialDesc(id="pm", type="diffuse", albedo=[0.9] * 3)],
            n_bins=512,
        )
        cap = capture(rig, spp=4096, seed=7, threads=1)
        totals[d] = cap.H[0].sum()
    for d in (1.5, 2.0):
        got = totals[d] / totals[1.0]
        expected = 1.0 / d**4
        assert got == pytest.approx(expected, rel=0.10)


def test_tof_invariant_random_points():
    """100/100 random hidden patch positions and grid points: the analytic
    arrival time falls inside the peak bin at 4096 spp."""
    rng = np.random.default_rng(5)
    failures = 0
    for trial in range(100):
        center = [
            float(rng.uniform(-0.3, 0.3)),
            float(rng.uniform(-0.3, 0.3)),
            float(rng.uniform(0.4, 1.0)),
        ]
        rig = small_point_rig(grid=(4, 4), half=0.005)
        rig.hidden_shapes[0].center = center
        rig.t_start = 0.0
        rig.bin_width = 0.02
        rig.n_bins = 300
        rt = make_runtime(rig)
        pts = rig.grid_points("laser")
        gi = int(rng.integers(0, pts.shape[0]))
        streams = fold_key(
            fold_key(np.zeros(4096, dtype=np.uint64), np.full(4096, gi, dtype=np.uint64)),
            np.arange(4096, dtype=np.uint64),
        )
        times, values = nlos_path_contributions(
            rt, pts[gi], pts[gi], streams, np.uint64(trial), "tailored", 3
        )
        hist = np.zeros(rt.axis.n_bins)
        idx = np.floor((times - rt.axis.t_start) / rt.axis.bin_width).astype(int)
        ok = (idx >= 0) & (idx < rt.axis.n_bins)
        np.add.at(hist, idx[ok], values[ok])
        peak = int(np.argmax(hist))
        t_pred = 2.0 * np.linalg.norm(pts[gi] - np.array(center))
        pred_bin = int((t_pred - rt.axis.t_start) / rt.axis.bin_width)
        if abs(pred_bin - peak) > 1:
            failures += 1
    assert failures == 0


def test_single_sample_contract():
    rig = small_point_rig(grid=(2, 2))
    rt = make_runtime(rig)
    pts = rig.grid_points("laser")
    records = nlos_path_sample(rt, pts[0], pts[0], RngState(0, 7))
    assert all(v > 0 for _, v in records)
    # deterministic per state
    again = nlos_path_sample(rt, pts[0], pts[0], RngState(0, 7))
    assert records == again


def test_tailored_vs_bruteforce_same_mean_and_variance_ratio():
    rig = small_point_rig(grid=(1, 1))
    rig.laser_grid = (1, 1)
    rig.sensor_grid = (1, 1)
    rt = make_runtime(rig)
    pts = rig.grid_points("laser")

    def batch_mean(sampler, seed, spp=512):
        streams = fold_key(
            fold_key(np.zeros(spp, dtype=np.uint64), np.zeros(spp, dtype=np.uint64)),
            np.arange(spp, dtype=np.uint64),
        )
        times, values = nlos_path_contributions(
            rt, pts[0], pts[0], streams, np.uint64(seed), sampler, 3
        )
        hist = np.zeros(rt.axis.n_bins)
        idx = np.floor((times - rt.axis.t_start) / rt.axis.bin_width).astype(int)
        ok = (idx >= 0) & (idx < rt.axis.n_bins)
        np.add.at(hist, idx[ok], values[ok])
        return hist / spp

    t_runs = np.stack([batch_mean("tailored", s) for s in range(12)])
    b_runs = np.stack([batch_mean("hemisphere", s) for s in range(100, 112)])
    # unbiasedness: totals agree within combined standard errors
    t_tot = t_runs.sum(axis=1)
    b_tot = b_runs.sum(axis=1)
    diff = abs(t_tot.mean() - b_tot.mean())
    sem = np.sqrt(t_tot.var(ddof=1) / 12 + b_tot.var(ddof=1) / 12)
    assert diff <= 3.0 * sem
    # efficiency: variance at the peak bin at least 50x smaller
    peak = int(np.argmax(t_runs.mean(axis=0)))
    var_t = t_runs[:, peak].var(ddof=1)
    var_b = b_runs[:, peak].var(ddof=1)
    assert var_b / max(var_t, 1e-300) >= 50.0


# -- capture ------------------------------------------------------------------------


def test_capture_large_grid_dimensions():
    rig = NlosRig(
        wall_center=[0.0, 0.0, 0.0],
        wall_edge_u=[0.9, 0.0, 0.0],
        wall_edge_v=[0.0, 0.65, 0.0],
        laser_origin=[0.0, 0.0, 1.0],
        sensor_origin=[0.0, 0.0, 1.0],
        laser_grid=(180, 130),
        n_bins=16,
    )
    cap = capture(rig, spp=1, seed=0, threads=1)
    assert cap.H.shape == (180 * 130, 16)


def test_capture_order_independent():
    rig = small_point_rig(grid=(3, 3), n_bins=64)
    rt = make_runtime(rig)
    pairs = [(i, i) for i in range(9)]
    rows = _capture_range(rt, rig, pairs, 64, 11, "tailored")
    perm = [4, 8, 0, 2, 6, 1, 7, 3, 5]
    rows_perm = _capture_range(rt, rig, [pairs[i] for i in perm], 64, 11, "tailored")
    assert np.array_equal(rows_perm, rows[perm])


def test_capture_exhaustive_shape():
    rig = small_point_rig(grid=(3, 2), n_bins=32)
    rig.mode = "exhaustive"
    rig.sensor_grid = (2, 2)
    cap = capture(rig, spp=8, seed=0, threads=1)
    assert cap.H.shape == (6, 4, 32)


def test_two_patch_superposition():
    base = small_point_rig(grid=(3, 3), n_bins=256)
    both = small_point_rig(grid=(3, 3), n_bins=256)
    both.hidden_shapes.append(
        ShapeDesc(
            id="target2",
            type="rectangle",
            center=[-0.15, -0.1, 0.45],
            edge_u=[0.02, 0.0, 0.0],
            edge_v=[0.0, 0.02, 0.0],
            material="target_mat",
        )
    )
    solo2 = small_point_rig(grid=(3, 3), n_bins=256)
    solo2.hidden_shapes = [both.hidden_shapes[1]]
    # fix a common axis across the three rigs
    rt = make_runtime(both)
    for rig in (base, solo2):
        rig.t_start = rt.axis.t_start
        rig.bin_width = rt.axis.bin_width
        rig.n_bins = rt.axis.n_bins

    def mean_capture(rig, seeds, spp=512):
        return np.stack([capture(rig, spp, seed=s, threads=1).H for s in seeds])

    h_both = mean_capture(both, range(8)).sum(axis=(1, 2))  # scalar per seed
    h_a = mean_capture(base, range(8, 16)).sum(axis=(1, 2))
    h_b = mean_capture(solo2, range(16, 24)).sum(axis=(1, 2))
    m = h_both.mean()
    ref = h_a.mean() + h_b.mean()
    sem = np.sqrt(
        h_both.var(ddof=1) / 8 + h_a.var(ddof=1) / 8 + h_b.var(ddof=1) / 8
    )
    assert abs(m - ref) <= 3.0 * sem


# -- noise model ----------------------------------------------------------------------


def delta_capture(n_points=4, n_bins=64, peak_bin=20, value=1.0):
    rig = small_point_rig(grid=(2, 2), n_bins=n_bins)
    rig.t_start = 0.0
    rig.bin_width = 0.01
    H = np.zeros((n_points, n_bins))
    H[:, peak_bin] = value
    return NlosCapture(H, TemporalAxis(0.0, 0.01, n_bins), rig)


def test_noise_noiseless_limit():
    cap = delta_capture(value=3.0)
    out = apply_noise(cap, jitter_sigma=0.0, photon_scale=1e9, seed=1)
    rel = np.abs(out.H / 1e9 - cap.H).max() / cap.H.max()
    assert rel < 1e-3


def test_noise_convolution_conserves_counts():
    cap = delta_capture(value=2.5)
    out = apply_noise(cap, jitter_sigma=0.03, seed=1)  # 3 bins sigma
    assert np.allclose(out.H.sum(axis=-1), cap.H.sum(axis=-1), rtol=1e-6)


def test_noise_gaussian_jitter_variance():
    cap = delta_capture(n_points=1, n_bins=101, peak_bin=50, value=1.0)
    out = apply_noise(cap, jitter_sigma=3 * cap.axis.bin_width, photon_scale=1e5, seed=2)
    counts = out.H[0]
    bins = np.arange(101, dtype=np.float64)
    total = counts.sum()
    mean = (bins * counts).sum() / total
    var = ((bins - mean) ** 2 * counts).sum() / total
    assert var == pytest.approx(9.0, rel=0.05)


def test_noise_poisson_dispersion():
    rig = small_point_rig(grid=(2, 2), n_bins=2500)
    rig.t_start = 0.0
    rig.bin_width = 0.01
    H = np.full((4, 2500), 0.7)
    cap = NlosCapture(H, TemporalAxis(0.0, 0.01, 2500), rig)
    out = apply_noise(cap, photon_scale=10.0, seed=3)
    counts = out.H.ravel()  # 10^4 bins, each Poisson(7)
    dispersion = counts.var(ddof=1) / counts.mean()
    assert abs(dispersion - 1.0) <= 0.05


def test_noise_reproducible_and_validated():
    cap = delta_capture()
    a = apply_noise(cap, jitter_sigma=0.02, photon_scale=50.0, dark_count_rate=0.1, seed=9)
    b = apply_noise(cap, jitter_sigma=0.02, photon_scale=50.0, dark_count_rate=0.1, seed=9)
    assert np.array_equal(a.H, b.H)
    c = apply_noise(cap, jitter_sigma=0.02, photon_scale=50.0, dark_count_rate=0.1, seed=10)
    assert not np.array_equal(a.H, c.H)
    with pytest.raises(NlosError):
        apply_noise(cap, jitter_sigma=-1.0)
    with pytest.raises(NlosError):
        apply_noise(cap, photon_scale=-5.0)
    with pytest.raises(NlosError):
        apply_noise(cap, dark_count_rate=-0.1)
    with pytest.raises(NlosError):
        apply_noise(cap, jitter_sigma=0.1, irf_kernel=np.ones(3) / 3)


def test_irf_kernel_file(tmp_path):
    path = tmp_path / "irf.txt"
    path.write_text("0.2\n0.5\n0.2\n")
    with pytest.warns(UserWarning):
        k = load_irf_kernel(path)
    assert k.size == 3 and k.sum() == pytest.approx(1.0)
    bad = tmp_path / "even.txt"
    bad.write_text("0.5\n0.5\n")
    with pytest.raises(NlosError):
        load_irf_kernel(bad)
    cap = delta_capture()
    out = apply_noise(cap, irf_kernel=k, seed=0)
    assert np.allclose(out.H.sum(axis=-1), cap.H.sum(axis=-1), rtol=1e-9)


def test_gaussian_kernel_normalized():
    k = gaussian_kernel_bins(2.5)
    assert k.sum() == pytest.approx(1.0)
    assert k.size % 2 == 1


# -- capture file I/O -----------------------------------------------------------------


def test_capture_round_trip(tmp_path):
    rig = small_point_rig(grid=(3, 2), n_bins=32)
    cap = capture(rig, spp=32, seed=4, threads=1)
    path = tmp_path / "c.nlos"
    write_capture(cap, path)
    again = read_capture(path)
    assert np.array_equal(again.H.astype(np.float32), cap.H.astype(np.float32))
    assert again.axis.n_bins == cap.axis.n_bins
    assert again.rig.laser_grid == rig.laser_grid
    assert again.rig.account_first_bounce == rig.account_first_bounce
    path2 = tmp_path / "c2.nlos"
    write_capture(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_capture_version_and_truncation_errors(tmp_path):
    rig = small_point_rig(grid=(2, 2), n_bins=16)
    cap = capture(rig, spp=4, seed=0, threads=1)
    path = tmp_path / "v.nlos"
    write_capture(cap, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 3  # version byte
    bad = tmp_path / "bad.nlos"
    bad.write_bytes(bytes(raw))
    with pytest.raises(NlosError) as exc:
        read_capture(bad)
    assert "3" in str(exc.value) and "1" in str(exc.value)
    bad.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(NlosError):
        read_capture(bad)


# -- backprojection --------------------------------------------------------------------


def test_backproject_zero_capture_zero_field():
    cap = delta_capture()
    cap.H[:] = 0.0
    vol = backproject(cap, [-0.2, -0.2, 0.2], 0.05, (8, 8, 8))
    assert np.all(vol == 0.0)


def test_backproject_point_target_argmax():
    rig = small_point_rig(grid=(8, 8), half=0.01, n_bins=320)
    cap = capture(rig, spp=1024, seed=6, threads=1)
    voxel = cap.axis.bin_width * rig.speed_of_light
    true = np.array([0.1, 0.05, 0.6])
    # center the true position in a voxel so "within 1 voxel" is well posed
    origin = true - voxel * 8.5
    vol = backproject(cap, origin, voxel, (17, 17, 17))
    am = np.unravel_index(np.argmax(vol), vol.shape)
    est = origin + voxel * (np.array(am) + 0.5)
    assert np.max(np.abs(est - true)) <= voxel * (1.0 + 1e-9)


def test_backproject_two_patches_depth_order():
    rig = two_patch_rig(grid=(8, 8))
    cap = capture(rig, spp=1024, seed=8, threads=1)
    voxel = 0.05
    vol = backproject(cap, [-0.4, -0.2, 0.2], voxel, (16, 8, 16), filter="laplacian")
    # strongest response in the near-depth half vs far half, both present
    zs = np.arange(16) * voxel + 0.2 + voxel / 2
    profile = vol.max(axis=(0, 1))
    near_peak_z = zs[int(np.argmax(profile[: 8]))]
    far_peak_z = zs[8 + int(np.argmax(profile[8:]))]
    assert abs(near_peak_z - 0.4) <= 2 * voxel
    assert abs(far_peak_z - 0.8) <= 2 * voxel


def test_backproject_volume_side_validation():
    cap = delta_capture()
    with pytest.raises(NlosError):
        backproject(cap, [-0.2, -0.2, -0.5], 0.05, (8, 8, 8))
    with pytest.raises(NlosError):
        backproject(cap, [-0.2, -0.2, -0.1], 0.05, (8, 8, 8))  # crosses the plane
