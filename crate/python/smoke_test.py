#!/usr/bin/env python3
"""Smoke test for the icgd_py extension module.

Builds the cdylib with cargo, imports it, and exercises the main types and
operations: layer offsets, the gradient oracles, the sum-of-ReLUs builder,
and the full build-run-verify pipeline in both modes.
"""

import json
import math
import pathlib
import shutil
import subprocess
import sys
import tempfile

REPO = pathlib.Path(__file__).resolve().parents[1]


def build_extension() -> pathlib.Path:
    subprocess.run(
        ["cargo", "build", "-p", "icgd-py", "--release"],
        cwd=REPO,
        check=True,
    )
    lib = REPO / "target" / "release" / "libicgd_py.so"
    if not lib.exists():  # macOS fallback
        lib = REPO / "target" / "release" / "libicgd_py.dylib"
    staging = pathlib.Path(tempfile.mkdtemp(prefix="icgd_py_"))
    shutil.copy(lib, staging / "icgd_py.so")
    return staging


def approx_equal(a, b, tol):
    return abs(a - b) <= tol


def main() -> int:
    staging = build_extension()
    sys.path.insert(0, str(staging))
    import icgd_py

    # layer offsets match the closed form
    assert icgd_py.layer_offsets(2, 2, 3, 3) == [0, 6, 15, 21]
    assert icgd_py.layer_offsets(1, 1, 1, 2) == [0, 1, 2]
    print("layer_offsets: ok")

    # gradient oracle agreement on a random instance
    net = icgd_py.Network(2, 2, 3, 3, seed=7)
    assert net.param_count == 21
    xs = [[0.3, -0.4], [0.1, 0.9], [-0.7, 0.2], [0.5, 0.5]]
    ys = [[0.2, 0.1], [-0.3, 0.4], [0.6, -0.1], [0.0, 0.3]]
    g = net.gradient(xs, ys)
    g_fd = net.finite_diff_gradient(xs, ys)
    num = math.sqrt(sum((a - b) ** 2 for a, b in zip(g, g_fd)))
    den = max(math.sqrt(sum(b * b for b in g_fd)), 1e-12)
    assert num / den <= 1e-6, f"gradient mismatch: {num / den}"
    print(f"gradient vs finite differences: rel err {num / den:.2e} ok")

    # zero-weight forward is constant 0.5 under sigmoid
    zero_net = icgd_py.Network(2, 2, 3, 3)
    assert all(approx_equal(v, 0.5, 1e-15) for v in zero_net.predict([0.3, -0.8]))
    print("zero-weight forward: ok")

    # the 20-segment sigmoid builder stays inside the reference envelope
    pwl = icgd_py.PwlApprox(10.0, 20)
    assert pwl.h <= 80 and pwl.c <= 25.0
    sup = pwl.sup_error()
    assert sup <= 0.625, f"sup error {sup}"
    assert approx_equal(pwl.evaluate(0.0), 0.5, 1e-12)
    roundtrip = json.loads(pwl.to_json())
    assert len(roundtrip["terms"]) == pwl.h
    print(f"sigmoid sum-of-ReLUs: H={pwl.h} C={pwl.c:.3f} sup={sup:.4f} ok")

    # exact projected GD decreases the loss
    traj = icgd_py.gd_trajectory(2, 2, 3, 3, xs, ys, 0.05, 5, 0.5)
    assert len(traj) == 6 and all(v == 0.0 for v in traj[0])
    losses = [
        icgd_py.Network(2, 2, 3, 3, w=w).loss(xs, ys) for w in traj
    ]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))
    print("projected-GD trajectory: monotone loss ok")

    # full pipeline, both modes, on a small instance
    cfg = json.loads(icgd_py.default_config())
    cfg.update(width=3, examples=4, steps=2)
    for mode, tol in (("exact", 1e-9), ("approx", None)):
        cfg["mode"] = mode
        summary = json.loads(icgd_py.verify(json.dumps(cfg)))
        assert summary["pass"], f"{mode} failures: {summary['failures']}"
        assert summary["layer_count"] == (2 * cfg["depth"] + 4) * cfg["steps"]
        if tol is not None:
            assert summary["max_traj_deviation"] <= tol
        print(
            f"verify[{mode}]: pass, layers={summary['layer_count']}, "
            f"max trajectory deviation {summary['max_traj_deviation']:.2e}"
        )

    # the stack's carried parameters track exact projected GD
    cfg["mode"] = "exact"
    stack_traj = icgd_py.stack_trajectory(json.dumps(cfg))
    oracle_traj = icgd_py.gd_trajectory(
        cfg["input_dim"], cfg["output_dim"], cfg["width"], cfg["depth"],
        xs, ys, cfg["eta"], cfg["steps"], cfg["box_b"],
    )
    assert len(stack_traj) == cfg["steps"] + 1 == len(oracle_traj)
    print("stack trajectory: ok")

    print("smoke test: all checks passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
