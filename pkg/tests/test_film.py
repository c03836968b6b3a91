"""Transient film: binning, accumulation, gating, unwarping, maps, file I/O."""

import hashlib
import json
import os

import numpy as np
import pytest

from picolight.film import (
    Film,
    FilmError,
    TcubeError,
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
from picolight.integrators import render
from picolight.scene import compile_scene, cornell_box

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "golden")


def make_cube(nt=8, h=2, w=2, ch=3, fill=0.0):
    axis = TemporalAxis(0.0, 0.1, nt)
    return TransientCube(np.full((nt, h, w, ch), fill, dtype=np.float32), axis)


# -- bin_index ------------------------------------------------------------------


def test_bin_index_arithmetic():
    axis = TemporalAxis(0.0, 0.1, 10)
    assert bin_index(axis, 0.25) == 2


def test_bin_index_exact_edge_goes_up():
    axis = TemporalAxis(0.0, 0.1, 10)
    assert bin_index(axis, 0.2) == 2
    assert bin_index(axis, 0.0) == 0


def test_bin_index_out_of_range():
    axis = TemporalAxis(0.0, 0.1, 10)
    assert bin_index(axis, -0.01) == -1
    assert bin_index(axis, 10 * 0.1) == -1
    arr = bin_index(axis, np.array([-0.01, 0.05, 1.0]))
    assert list(arr) == [-1, 0, -1]


# -- accumulation -----------------------------------------------------------------


def test_add_sample_additive():
    f = Film(2, 2, TemporalAxis(0.0, 0.1, 8))
    f.add_sample(1, 0, 0.25, [1.0, 2.0, 3.0])
    f.add_sample(1, 0, 0.25, [0.5, 0.5, 0.5])
    assert np.allclose(f.bins[2, 0, 1], [1.5, 2.5, 3.5])


def test_overflow_recorded_not_dropped():
    f = Film(2, 2, TemporalAxis(0.0, 0.1, 8))
    f.add_sample(0, 1, 99.0, [1.0, 1.0, 1.0])
    assert np.all(f.bins == 0.0)
    assert np.allclose(f.overflow[1, 0], 1.0)
    cube = f.finalize(1)
    assert cube.overflow_total == pytest.approx(3.0)


def test_nan_sample_hard_error():
    f = Film(2, 2, TemporalAxis(0.0, 0.1, 8))
    with pytest.raises(FilmError) as exc:
        f.add_sample(1, 1, 0.15, [np.nan, 0.0, 0.0])
    assert "(1, 1)" in str(exc.value)


def test_polarized_channel_layout():
    f = Film(1, 1, TemporalAxis(0.0, 0.1, 4), channels=12)
    stokes = np.arange(12, dtype=np.float64).reshape(1, 3, 4)  # [rgb][stokes]
    flat = stokes.transpose(0, 2, 1).reshape(1, 12)  # S0R S0G S0B S1R ...
    f.add_samples(np.array([0]), np.array([0]), np.array([0.05]), flat)
    # S0 channels are the [0, 4, 8] entries of the rgb-major input
    assert np.allclose(f.bins[0, 0, 0, 0:3], [0, 4, 8])
    assert np.allclose(f.bins[0, 0, 0, 3:6], [1, 5, 9])


# -- collapse and gating -----------------------------------------------------------


def test_collapse_zero_and_single():
    cube = make_cube()
    assert np.all(steady_collapse(cube).data == 0.0)
    cube.data[3, 1, 0] = [1.0, 2.0, 3.0]
    assert np.allclose(steady_collapse(cube).data[1, 0], [1.0, 2.0, 3.0])


def test_collapse_includes_overflow():
    cube = make_cube()
    cube.overflow[0, 0] = [0.5, 0.5, 0.5]
    assert np.allclose(steady_collapse(cube).data[0, 0], 0.5)


def test_gate_total_equals_collapse_minus_overflow():
    rng = np.random.default_rng(0)
    cube = make_cube()
    cube.data[:] = rng.uniform(size=cube.data.shape).astype(np.float32)
    cube.overflow[:] = rng.uniform(size=cube.overflow.shape)
    total = time_gate(cube, cube.axis.t_start, cube.axis.t_end)
    ref = steady_collapse(cube).data - cube.overflow
    assert np.allclose(total.data, ref, rtol=1e-12)


def test_gate_aligned_single_bin():
    cube = make_cube()
    cube.data[5] = 2.0
    img = time_gate(cube, 0.5, 0.6)
    assert np.allclose(img.data, 2.0)


def test_gate_fractional_bin():
    cube = make_cube()
    cube.data[5] = 2.0
    img = time_gate(cube, 0.5, 0.55)
    assert np.allclose(img.data, 1.0)


def test_gate_linearity():
    rng = np.random.default_rng(1)
    cube = make_cube(nt=16)
    cube.data[:] = rng.uniform(size=cube.data.shape).astype(np.float32)
    a, b, c = 0.13, 0.77, 1.31
    g1 = time_gate(cube, a, b).data
    g2 = time_gate(cube, b, c).data
    g3 = time_gate(cube, a, c).data
    assert np.allclose(g1 + g2, g3, rtol=1e-6)


def test_gate_outside_axis_errors():
    cube = make_cube()
    with pytest.raises(FilmError):
        time_gate(cube, -1.0, 0.5)
    with pytest.raises(FilmError):
        time_gate(cube, 0.5, 0.2)


# -- unwarping ---------------------------------------------------------------------


def test_unwarp_identity_and_shift():
    assert unwarp_time(5.0, [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0) == 5.0
    assert unwarp_time(5.0, [2.0, 0.0, 0.0], [0.0, 0.0, 0.0], 1.0) == 3.0
    t = unwarp_time(np.array([5.0, 6.0]), np.array([[2, 0, 0], [0, 0, 2]]), [0, 0, 0], 2.0)
    assert np.allclose(t, [4.0, 5.0])


def test_unwarped_emissive_wall_single_bin():
    from tests.conftest import emissive_wall_scene

    desc = emissive_wall_scene(width=12, height=12, unwarp=True)
    _, cube = render(compile_scene(desc), spp=8, seed=3)
    assert cube.overflow_total == 0.0
    lum = cube.data.sum(axis=-1)
    hit = lum.sum(axis=0) > 0
    first_bins = np.argmax(lum > 0, axis=0)
    assert hit.all()
    assert first_bins[hit].max() - first_bins[hit].min() == 0


def test_steady_invariant_under_unwarp():
    from tests.conftest import emissive_wall_scene

    warped = emissive_wall_scene(width=8, height=8, unwarp=False, n_bins=64)
    unwarped = emissive_wall_scene(width=8, height=8, unwarp=True, n_bins=64)
    s1, c1 = render(compile_scene(warped), spp=8, seed=3)
    s2, c2 = render(compile_scene(unwarped), spp=8, seed=3)
    assert c1.overflow_total == 0.0 and c2.overflow_total == 0.0
    assert np.array_equal(s1.data, s2.data)


# -- peak map ----------------------------------------------------------------------


def test_peak_time_single_impulse():
    cube = make_cube()
    cube.data[5, :, :] = 1.0
    times, mags, valid = peak_time_map(cube)
    assert np.allclose(times, 0.0 + (5 + 0.5) * 0.1)
    assert valid.all()


def test_peak_time_all_zero_invalid():
    cube = make_cube()
    times, mags, valid = peak_time_map(cube)
    assert not valid.any()
    assert np.isnan(times).all()


def test_peak_time_tie_break_earliest():
    cube = make_cube()
    cube.data[2] = 1.0
    cube.data[6] = 1.0
    times, _, valid = peak_time_map(cube)
    assert np.allclose(times, (2 + 0.5) * 0.1)


# -- tonemap -----------------------------------------------------------------------


def test_tonemap_constant_identical_frames():
    cube = make_cube(fill=0.25)
    frames = tonemap_transient(cube, gamma=2.2)
    assert frames.dtype == np.uint8
    assert np.all(frames == frames[0])


def test_tonemap_global_ratio():
    cube = make_cube()
    cube.data[2] = 1.0
    cube.data[4] = 2.0
    frames = tonemap_transient(cube, gamma=2.0)
    ratio = frames[2, 0, 0, 0] / 255.0
    assert abs(ratio - (0.5) ** (1 / 2.0)) < 1e-2
    assert frames[4, 0, 0, 0] == 255


def test_tonemap_all_zero_black():
    frames = tonemap_transient(make_cube(), gamma=2.2)
    assert np.all(frames == 0)


def test_tonemap_golden_frames():
    with open(os.path.join(GOLDEN_DIR, "tonemap_golden.json")) as f:
        golden = json.load(f)
    scene = compile_scene(cornell_box(width=16, height=16))
    _, cube = render(scene, spp=golden["spp"], seed=golden["seed"], threads=1)
    frames = tonemap_transient(cube, gamma=golden["gamma"])
    assert frames.shape[0] == golden["n_frames"]
    assert hashlib.sha256(frames.tobytes()).hexdigest() == golden["sha256"]
    for idx in (30, 60):
        path = os.path.join(GOLDEN_DIR, f"tonemap_frame_{idx:05d}.ppm")
        with open(path, "rb") as f:
            stored = f.read()
        h, w = frames.shape[1:3]
        expected = b"P6\n%d %d\n255\n" % (w, h) + frames[idx].tobytes()
        assert stored == expected


# -- tcube I/O ---------------------------------------------------------------------


def test_tcube_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    cube = make_cube(nt=6, h=3, w=4)
    cube.data[:] = rng.uniform(size=cube.data.shape).astype(np.float32)
    cube.overflow[:] = rng.uniform(size=cube.overflow.shape)
    path = tmp_path / "x.tcube"
    write_tcube(cube, path)
    again = read_tcube(path)
    assert np.array_equal(again.data, cube.data)
    assert again.axis == cube.axis or (
        again.axis.t_start == cube.axis.t_start
        and again.axis.bin_width == cube.axis.bin_width
        and again.axis.n_bins == cube.axis.n_bins
    )
    assert again.overflow_total == pytest.approx(cube.overflow_total, rel=0, abs=0)
    # bit-exact: rewriting reproduces the same bytes
    path2 = tmp_path / "y.tcube"
    write_tcube(again, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_tcube_header_is_56_bytes(tmp_path):
    cube = make_cube(nt=8, h=4, w=4)
    path = tmp_path / "h.tcube"
    write_tcube(cube, path)
    raw = path.read_bytes()
    assert len(raw) == 56 + 8 * 4 * 4 * 3 * 4


def test_tcube_truncation_reports_counts(tmp_path):
    cube = make_cube()
    path = tmp_path / "t.tcube"
    write_tcube(cube, path)
    raw = path.read_bytes()
    bad = tmp_path / "bad.tcube"
    bad.write_bytes(raw[:-7])
    with pytest.raises(TcubeError) as exc:
        read_tcube(bad)
    assert "expected" in str(exc.value) and "bytes" in str(exc.value)


def test_tcube_bad_magic_and_version(tmp_path):
    cube = make_cube()
    path = tmp_path / "m.tcube"
    write_tcube(cube, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"NOPE"
    bad = tmp_path / "bm.tcube"
    bad.write_bytes(bytes(raw))
    with pytest.raises(TcubeError):
        read_tcube(bad)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    bad.write_bytes(bytes(raw))
    with pytest.raises(TcubeError) as exc:
        read_tcube(bad)
    assert "9" in str(exc.value)


# -- energy closure -----------------------------------------------------------------


def test_energy_closure_dual_accumulation():
    """Deposit-order f64 steady accumulator agrees with the collapsed
    histogram to float rounding, including overflow."""
    axis = TemporalAxis(0.0, 0.05, 16)
    f = Film(4, 4, axis, track_direct=True)
    rng = np.random.default_rng(2)
    for _ in range(50):
        px = rng.integers(0, 4, size=64)
        py = rng.integers(0, 4, size=64)
        t = rng.uniform(-0.2, 1.2, size=64)  # some overflow on both sides
        v = rng.uniform(size=(64, 3))
        f.add_samples(px, py, t, v)
    direct = f.steady_direct.copy()
    # before the float32 cast: pure f64 reordering, tight tolerance
    pre = f.bins.sum(axis=0) + f.overflow
    assert np.allclose(pre, direct, rtol=1e-12, atol=1e-15)
    cube = f.finalize(1)
    collapsed = steady_collapse(cube).data
    # after the cast the cube carries float32 quantization
    assert np.allclose(collapsed, direct, rtol=1e-5, atol=1e-8)


def test_render_steady_equals_collapse_bit_exact():
    scene = compile_scene(cornell_box(width=16, height=16))
    steady, cube = render(scene, spp=16, seed=9)
    assert np.array_equal(steady_collapse(cube).data, steady.data)
