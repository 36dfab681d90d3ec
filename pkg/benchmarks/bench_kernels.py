"""Time the compiled scoring kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 200]

Inputs are the shapes one scorer call sees: 8 ego poses against 4 obstacles,
8 footprint corners against a corridor polygon, and 8 points against a
centerline. Outputs of both backends are compared before timing.
"""

import argparse
import timeit

import numpy as np

from histvla import _kernels_py, kernels
from histvla import scorer as sc
from histvla.scenario import generate_corpus


def workloads(seed: int = 0):
    g = next(g for g in generate_corpus(20, seed) if len(g.scene.obstacles) >= 2)
    rng = np.random.default_rng(seed)
    wp = g.gt.waypoints
    ego = sc.box_corners(wp, rng.uniform(-0.2, 0.2, len(wp)), 4.5, 2.0)
    obs = np.stack([sc.box_corners(np.asarray(o.center) + np.outer(0.5 * np.arange(1, 9), o.velocity), o.heading,
                                   o.length, o.width) for o in g.scene.obstacles], axis=1)
    pts = ego.reshape(-1, 2)
    return {
        "first_overlap": (ego, obs),
        "points_in_polygon": (pts, g.scene.corridor),
        "project_to_polyline": (wp, g.scene.centerline),
    }


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return all(np.allclose(x, y, atol=1e-12) for x, y in zip(a, b))
    return bool(np.all(np.asarray(a) == np.asarray(b)))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    args = ap.parse_args()
    if "cython" not in kernels.BACKENDS:
        print("compiled kernels are not built; run `pip install -e . --no-build-isolation` first")
        return
    fast = kernels.BACKENDS["cython"]
    print(f"{'kernel':<22}{'python [us]':>14}{'cython [us]':>14}{'speedup':>10}")
    for name, inputs in workloads().items():
        f_py, f_cy = getattr(_kernels_py, name), getattr(fast, name)
        if not same(f_py(*inputs), f_cy(*inputs)):
            raise SystemExit(f"{name}: backends disagree")
        t_py = min(timeit.repeat(lambda: f_py(*inputs), number=args.repeat, repeat=3)) / args.repeat
        t_cy = min(timeit.repeat(lambda: f_cy(*inputs), number=args.repeat, repeat=3)) / args.repeat
        print(f"{name:<22}{1e6 * t_py:>14.1f}{1e6 * t_cy:>14.1f}{t_py / t_cy:>9.1f}x")
    g = generate_corpus(1, 1)[0]
    cands = [g.gt] * 16
    for label, impl in (("python", _kernels_py), ("cython", fast)):
        saved = (sc.kernels.first_overlap, sc.kernels.points_in_polygon, sc.kernels.project_to_polyline)
        sc.kernels.first_overlap, sc.kernels.points_in_polygon, sc.kernels.project_to_polyline = (
            impl.first_overlap, impl.points_in_polygon, impl.project_to_polyline)
        try:
            t = min(timeit.repeat(lambda: sc.score_many(cands, g.scene), number=5, repeat=3)) / 5
        finally:
            sc.kernels.first_overlap, sc.kernels.points_in_polygon, sc.kernels.project_to_polyline = saved
        print(f"score 16 candidates ({label}): {1e3 * t:.2f} ms")


if __name__ == "__main__":
    main()
