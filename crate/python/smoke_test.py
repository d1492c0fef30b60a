#!/usr/bin/env python3
"""Smoke test for the sparse_fuse_py extension module.

Builds (or reuses) the cdylib, imports it without any packaging machinery,
and exercises every exposed function against hand-computed expectations.

Usage: python3 python/smoke_test.py [--profile release]
"""

import argparse
import math
import random
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def build_and_import(profile: str):
    cmd = ["cargo", "build", "-p", "sparse-fuse-py"]
    if profile == "release":
        cmd.append("--release")
    subprocess.run(cmd, cwd=REPO, check=True)
    lib = REPO / "target" / profile / "libsparse_fuse_py.so"
    if not lib.exists():
        sys.exit(f"cdylib not found at {lib}")
    workdir = Path(tempfile.mkdtemp(prefix="sparse_fuse_py_"))
    shutil.copy(lib, workdir / "sparse_fuse_py.so")
    sys.path.insert(0, str(workdir))
    import sparse_fuse_py

    return sparse_fuse_py


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol, f"{a} != {b} (tol {tol})"


def test_bilinear(m):
    # value at a grid node is exact
    shape = [1, 4, 5]
    data = [0.0] * 20
    data[2 * 5 + 3] = 7.0  # (row 2, col 3)
    out = m.bilinear_sample(shape, data, 3.0, 2.0)
    approx(out[0], 7.0)
    # center of a 2x2 cell is the mean
    out = m.bilinear_sample([1, 2, 2], [1.0, 2.0, 3.0, 4.0], 0.5, 0.5)
    approx(out[0], 2.5)
    # fully outside: zero padding
    out = m.bilinear_sample([1, 2, 2], [1.0, 2.0, 3.0, 4.0], -5.0, 9.0)
    approx(out[0], 0.0)
    print("bilinear_sample ok")


def test_project_anchor(m):
    # quarter turn about z with translation and dead reckoning
    a = m.Anchor(2.0, 0.0, 0.0, vx=1.0)
    motion = m.EgoMotion.planar(math.pi / 2, [1.0, 0.0, 0.0], 0.5)
    b = m.project_anchor(a, motion)
    vals = b.to_list()
    approx(vals[0], 1.0)  # x
    approx(vals[1], 2.5)  # y
    approx(vals[6], 1.0)  # sin yaw
    approx(vals[7], 0.0, 1e-12)  # cos yaw
    approx(vals[8], 0.0)  # vx rotated onto y
    approx(vals[9], 1.0)  # vy
    # round trip with zero velocity recovers the anchor
    c = m.Anchor(3.0, -1.0, 0.5)
    fwd = m.project_anchor(c, motion)
    back = m.project_anchor(fwd, motion.inverse())
    for x, y in zip(back.to_list(), c.to_list()):
        approx(x, y, 1e-9)
    print("project_anchor ok")


def test_aggregate(m):
    rng = random.Random(1234)
    k, n, s, g, c = 3, 2, 2, 2, 4
    h0, w0 = 8, 10
    maps = []
    for si in range(s):
        h, w = h0 >> si, w0 >> si
        maps.append(([n, c, h, w], [rng.gauss(0, 1) for _ in range(n * c * h * w)]))
    visible = [rng.random() < 0.8 for _ in range(k * n)]
    if not any(visible):
        visible[0] = True
    points = []
    for vis in visible:
        if vis:
            points += [rng.uniform(0, w0 - 1), rng.uniform(0, h0 - 1)]
        else:
            points += [-1.0, -1.0]
    logits = [rng.gauss(0, 1) for _ in range(k * n * s * g)]
    weights = m.normalize_aggregation_weights([k, n, s, g], logits, visible)
    # per-keypoint mass is 1 when anything is visible
    for ki in range(k):
        lane = weights[ki * n * s * g : (ki + 1) * n * s * g]
        if any(visible[ki * n : (ki + 1) * n]):
            approx(sum(lane), 1.0, 1e-9)

    args = (maps, [k, n, 2], points, visible, [k, n, s, g], weights)
    basic, led_b = m.aggregate(*args, mode="basic")
    fused, led_e = m.aggregate(*args, mode="efficient")
    for x, y in zip(basic, fused):
        approx(x, y, 1e-10)
    assert led_b["peak_intermediate_bytes"] >= k * n * s * c * 8
    assert led_e["peak_intermediate_bytes"] <= c * 8 + 64
    ratio = led_b["peak_intermediate_bytes"] / led_e["peak_intermediate_bytes"]
    assert ratio >= n * s / 2, f"traffic ratio {ratio} below {n * s / 2}"
    print(f"aggregate ok (basic/fused peak ratio {ratio:.1f})")


def test_simulation(m):
    shape, cloud = m.render_scene_frame(seed=3, frame=0)
    assert len(shape) == 4 and cloud > 0, (shape, cloud)
    r1 = m.run_toy_simulation(seed=3, frames=4, objects=4)
    r2 = m.run_toy_simulation(seed=3, frames=4, objects=4)
    assert r1 == r2, "same seed must reproduce identical metrics"
    assert r1["gt_total"] == 4 * 4
    assert 0.0 <= r1["recall"] <= 1.0
    print(f"toy simulation ok (recall {r1['recall']:.3f}, matched {r1['matched']})")


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--profile", default="release", choices=["debug", "release"])
    args = parser.parse_args()
    m = build_and_import(args.profile)
    assert m.SCHEMA_VERSION == 1
    test_bilinear(m)
    test_project_anchor(m)
    test_aggregate(m)
    test_simulation(m)
    print("smoke test OK")


if __name__ == "__main__":
    main()
