"""Benchmark the numba kernels against the pure-numpy fallback.

Runs the three hot kernels (conv2d forward, conv2d backward, patch-prototype
distance maps) at desk-scale shapes under both backends and prints a table.
Select shapes with --profile. Results vary with core count: the numpy path
rides BLAS/SIMD, the numba path scales with threads.
"""

import argparse
import time

import numpy as np

from protopart import kernels

PROFILES = {
    "desk": dict(batch=8, image=224, cin=3, cout=16, k=7, stride=4, pad=3,
                 hz=7, depth=32, protos=18),
    "toy": dict(batch=16, image=128, cin=3, cout=8, k=7, stride=4, pad=3,
                hz=4, depth=32, protos=18),
}


def timeit(fn, repeat=5):
    fn()  # warm-up / JIT
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(profile: dict, repeat: int) -> list:
    rng = np.random.default_rng(0)
    p = profile
    x = rng.normal(size=(p["batch"], p["image"], p["image"], p["cin"]))
    w = rng.normal(size=(p["k"], p["k"], p["cin"], p["cout"]))
    b = rng.normal(size=p["cout"])
    out_sz = (p["image"] + 2 * p["pad"] - p["k"]) // p["stride"] + 1
    gy = rng.normal(size=(p["batch"], out_sz, out_sz, p["cout"]))
    z = rng.normal(size=(p["batch"], p["hz"], p["hz"], p["depth"]))
    protos = rng.normal(size=(p["protos"], p["depth"]))
    dist = None

    cases = {
        "conv2d fwd": lambda: kernels.conv2d(x, w, b, p["stride"], p["pad"]),
        "conv2d bwd-data": lambda: kernels.conv2d_input_grad(gy, w, x.shape, p["stride"], p["pad"]),
        "conv2d bwd-weights": lambda: kernels.conv2d_weight_grad(x, gy, w.shape, p["stride"], p["pad"]),
        "distance maps": lambda: kernels.distance_maps(z, protos),
        "distance bwd": None,  # needs dist computed per backend
    }

    rows = []
    for name, fn in cases.items():
        timings = {}
        for backend in ("numpy", "numba") if kernels.HAS_NUMBA else ("numpy",):
            kernels.set_backend(backend)
            if name == "distance bwd":
                dist = kernels.distance_maps(z, protos)
                gd = np.ones_like(dist)
                fn = lambda: kernels.distance_maps_backward(z, protos, dist, gd)
            timings[backend] = timeit(fn, repeat)
        rows.append((name, timings))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--profile", choices=sorted(PROFILES), default="desk")
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()

    print(f"profile: {args.profile}  numba available: {kernels.HAS_NUMBA}")
    rows = run(PROFILES[args.profile], args.repeat)
    header = f"{'kernel':20s} {'numpy':>10s} {'numba':>10s} {'numba/numpy':>12s}"
    print(header)
    print("-" * len(header))
    for name, t in rows:
        np_ms = t["numpy"] * 1e3
        if "numba" in t:
            nb_ms = t["numba"] * 1e3
            print(f"{name:20s} {np_ms:9.2f}ms {nb_ms:9.2f}ms {nb_ms / np_ms:11.2f}x")
        else:
            print(f"{name:20s} {np_ms:9.2f}ms {'n/a':>10s}")


if __name__ == "__main__":
    main()
