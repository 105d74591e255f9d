"""Compare the numba and numpy backends of the MLP kernels.

The backend is chosen at import time from ``TTD_NUMBA``, so each backend is
timed in its own subprocess. Run ``python3 benchmarks/bench_kernels.py``.
"""

import json
import os
import subprocess
import sys
import timeit

SHAPES = [
    ("critic 64x64, batch 64", (4, 64, 64, 1), 64),
    ("critic 400x400, batch 256", (4, 400, 400, 1), 256),
    ("model 4x512, batch 256", (4, 512, 512, 512, 512, 6), 256),
]


def _measure(repeat=5, number=20):
    import numpy as np

    from taylortd import kernels

    rng = np.random.default_rng(0)
    out = {"backend": kernels.backend(), "rows": []}
    for label, sizes, batch in SHAPES:
        sizes = np.array(sizes, dtype=np.int64)
        acts = np.array([kernels.RELU] * (len(sizes) - 2) + [kernels.IDENTITY], dtype=np.int64)
        n = int(sum(sizes[k] * sizes[k + 1] + sizes[k + 1] for k in range(len(sizes) - 1)))
        theta = rng.standard_normal(n) * 0.1
        X = rng.standard_normal((batch, sizes[0]))
        GY = rng.standard_normal((batch, sizes[-1]))
        alpha = rng.standard_normal(batch)
        U = rng.standard_normal((batch, sizes[0]))
        calls = {
            "forward": lambda: kernels.forward(theta, sizes, acts, X),
            "vjp": lambda: kernels.vjp(theta, sizes, acts, X, GY),
        }
        if sizes[-1] == 1:
            calls["value_tangent_grad"] = lambda: kernels.value_tangent_grad(theta, sizes, acts, X, alpha, U)
        for name, fn in calls.items():
            fn()  # compile / warm up
            best = min(timeit.repeat(fn, repeat=repeat, number=number)) / number
            out["rows"].append([label, name, best * 1e6])
    return out


def main():
    if os.environ.get("TTD_BENCH_CHILD"):
        print(json.dumps(_measure()))
        return
    results = {}
    for flag in ("1", "0"):
        env = {**os.environ, "TTD_NUMBA": flag, "TTD_BENCH_CHILD": "1"}
        proc = subprocess.run([sys.executable, __file__], env=env, capture_output=True, text=True, check=True)
        data = json.loads(proc.stdout.strip().splitlines()[-1])
        results[data["backend"]] = {(r[0], r[1]): r[2] for r in data["rows"]}
    keys = list(results["numpy"])
    print(f"{'shape':<28}{'kernel':<20}{'numpy us':>12}{'numba us':>12}{'speedup':>9}")
    for key in keys:
        a, b = results["numpy"][key], results.get("numba", {}).get(key, float("nan"))
        print(f"{key[0]:<28}{key[1]:<20}{a:>12.1f}{b:>12.1f}{a / b:>9.2f}")


if __name__ == "__main__":
    main()
