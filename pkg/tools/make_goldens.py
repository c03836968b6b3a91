#!/usr/bin/env python3
"""Regenerate the frozen golden files under tests/golden/.

Run from the repository root after an intentional change to the RNG or the
tonemapping pipeline:  python3 tools/make_goldens.py
"""

import hashlib
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from picolight.film import tonemap_transient, write_ppm  # noqa: E402
from picolight.integrators import render  # noqa: E402
from picolight.rng import RngState, random_u64  # noqa: E402
from picolight.scene import compile_scene, cornell_box  # noqa: E402

GOLDEN_DIR = os.path.join(os.path.dirname(__file__), "..", "tests", "golden")


def main():
    os.makedirs(GOLDEN_DIR, exist_ok=True)

    # -- counter-based RNG golden vector ------------------------------------
    state = RngState(seed=0, stream=0)
    floats = [state.next_float() for _ in range(8)]
    u64 = [int(random_u64(0, np.uint64(0), np.uint64(i))) for i in range(4)]
    with open(os.path.join(GOLDEN_DIR, "rng_golden.json"), "w") as f:
        json.dump({"seed": 0, "stream": 0, "floats": floats, "u64": u64}, f, indent=1)

    # -- seeded reference tonemap frames ------------------------------------
    scene = compile_scene(cornell_box(width=16, height=16))
    _, cube = render(scene, spp=8, seed=123, threads=1)
    frames = tonemap_transient(cube, gamma=2.2)
    digest = hashlib.sha256(frames.tobytes()).hexdigest()
    meta = {
        "scene": "cornell_box(16x16)",
        "spp": 8,
        "seed": 123,
        "gamma": 2.2,
        "n_frames": int(frames.shape[0]),
        "sha256": digest,
    }
    with open(os.path.join(GOLDEN_DIR, "tonemap_golden.json"), "w") as f:
        json.dump(meta, f, indent=1)
    write_ppm(os.path.join(GOLDEN_DIR, "tonemap_frame_00030.ppm"), frames[30])
    write_ppm(os.path.join(GOLDEN_DIR, "tonemap_frame_00060.ppm"), frames[60])

    # -- cornell steady smoke statistics ------------------------------------
    steady, cube64 = render(compile_scene(cornell_box(width=16, height=16)), spp=64, seed=5, threads=1)
    nonzero = float((steady.data.sum(axis=-1) > 0).mean())
    with open(os.path.join(GOLDEN_DIR, "cornell_smoke.json"), "w") as f:
        json.dump({"spp": 64, "seed": 5, "nonzero_fraction": nonzero}, f, indent=1)

    print("golden files written to", GOLDEN_DIR)


if __name__ == "__main__":
    main()
