"""Compare the compiled rollout kernel against the pure-numpy fallback.

Run:  python3 benchmarks/bench_rollout.py [--horizon 2000] [--repeats 5]
"""
import argparse
import time

import numpy as np

from netren._accel import HAVE_COMPILED
from netren._accel import python_ref
from netren.ren import RenDims, build_ren

if HAVE_COMPILED:
    from netren._accel import _kernels


def timeit(fn, args, repeats):
    fn(*args)  # warm-up
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--horizon", type=int, default=2000)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--state-dim", type=int, default=25)
    parser.add_argument("--neuron-dim", type=int, default=25)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    dims = RenDims(c=args.state_dim, s=args.neuron_dim, q=8, r=2)
    mats = build_ren(0.1 * rng.standard_normal(dims.n_theta), 1.0, dims)
    inputs = rng.standard_normal((args.horizon, dims.q))
    call = (mats.A1, mats.B1, mats.B2, mats.C1, mats.D11, mats.D12,
            mats.C2, mats.D21, mats.D22, inputs, "tanh")

    t_py = timeit(python_ref.ren_rollout_kernel, call, args.repeats)
    print(f"numpy fallback : {t_py * 1e3:8.2f} ms "
          f"({args.horizon / t_py:,.0f} steps/s)")
    if HAVE_COMPILED:
        t_cy = timeit(_kernels.ren_rollout_kernel, call, args.repeats)
        z_py, _ = python_ref.ren_rollout_kernel(*call)
        z_cy, _ = _kernels.ren_rollout_kernel(*call)
        agree = float(np.max(np.abs(z_py - z_cy)))
        print(f"compiled kernel: {t_cy * 1e3:8.2f} ms "
              f"({args.horizon / t_cy:,.0f} steps/s)")
        print(f"speedup {t_py / t_cy:.1f}x, max output difference {agree:.2e}")
    else:
        print("compiled kernel not available in this installation")


if __name__ == "__main__":
    main()
