"""Benchmark the compiled kernel core against the pure-Python fallback.

Times the three hot paths: plant integration at the published 1e-5 s step,
batched differentiable rollouts (forward + backward), and the MPC per-node
kernels. Run from the repository root:

    python benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import importlib
import time

import numpy as np

THETA = np.array([1.0, 0.5, 0.05, 0.01, 1.0])
PLANT = np.array([1.0, 0.5, 0.05, 0.0, 1.0, np.radians(30), 9.81, 1e-3, 1e-3, 20000.0, 5.0])


def _timeit(fn, repeats):
    fn()  # warm up
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_backend(mod, repeats, plant_seconds):
    rng = np.random.default_rng(0)
    rows = {}

    state = np.array([0.3, 0.0, 0.3, 0.0])
    taus = rng.uniform(-1, 1, int(plant_seconds * 100))
    rows[f"plant_sim {plant_seconds:.1f}s @1e-5"] = _timeit(
        lambda: mod.plant_sim(state, taus, 1000, 1e-5, PLANT), max(1, repeats // 4))

    b, t = 128, 250
    x0 = rng.uniform(-1, 1, (b, 2))
    taus_b = rng.uniform(-1, 1, (b, t))
    theta = np.tile(THETA, (b, t, 1))
    grad = rng.normal(size=(b, t, 2))
    states, diverged = mod.rollout_fwd(x0, taus_b, theta, 0.01, 9.81, 0.05)
    rows["rollout_fwd 128x250"] = _timeit(
        lambda: mod.rollout_fwd(x0, taus_b, theta, 0.01, 9.81, 0.05), repeats)
    rows["rollout_bwd 128x250"] = _timeit(
        lambda: mod.rollout_bwd(x0, taus_b, theta, 0.01, 9.81, 0.05, states, grad, diverged),
        repeats)

    hid = 16
    w1 = rng.normal(scale=0.3, size=(4, hid))
    b1 = rng.normal(scale=0.1, size=hid)
    w2 = rng.normal(scale=0.3, size=(hid, 2))
    b2 = rng.normal(scale=0.1, size=2)
    res_states, res_div = mod.rollout_res_fwd(x0, taus_b, theta, w1, b1, w2, b2,
                                              8.0, 0.01, 9.81, 0.05)
    rows["rollout_res_fwd 128x250"] = _timeit(
        lambda: mod.rollout_res_fwd(x0, taus_b, theta, w1, b1, w2, b2, 8.0, 0.01, 9.81, 0.05),
        repeats)
    rows["rollout_res_bwd 128x250"] = _timeit(
        lambda: mod.rollout_res_bwd(x0, taus_b, theta, w1, b1, w2, b2, 8.0, 0.01, 9.81,
                                    0.05, res_states, grad, res_div), repeats)

    n = 125
    theta_n = np.tile(THETA, (n, 1))
    x0a = np.array([0.1, 0.0, 0.0])
    us = rng.uniform(-5, 5, n)
    zeros_ref = np.zeros((n, 3))
    kff = np.zeros(n)
    kfb = np.zeros((n, 3))
    xs, us_out, _ = mod.aug_forward(x0a, zeros_ref, us, kff, kfb, 0.0, theta_n,
                                    0.02, 9.81, 0.05, 10.0)
    rows["aug_forward N=125"] = _timeit(
        lambda: mod.aug_forward(x0a, zeros_ref, us, kff, kfb, 0.0, theta_n,
                                0.02, 9.81, 0.05, 10.0), repeats * 4)
    a_mats, b_mats = mod.aug_linearize(xs[:n], us_out, theta_n, 0.02, 9.81, 0.05)
    rows["aug_linearize N=125"] = _timeit(
        lambda: mod.aug_linearize(xs[:n], us_out, theta_n, 0.02, 9.81, 0.05), repeats * 4)

    lx = rng.normal(size=(n, 3))
    lu = rng.normal(size=n)
    lxx = np.tile(np.diag([2.0, 0.2, 0.002]), (n, 1, 1))
    luu = np.full(n, 2e-8)
    vx = rng.normal(size=3)
    vxx = np.diag([20.0, 2.0, 0.02])
    rows["ilqr_backward N=125"] = _timeit(
        lambda: mod.ilqr_backward_3(a_mats, b_mats, lx, lu, lxx, luu, vx, vxx, 0.0),
        repeats * 4)
    return rows


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=20)
    parser.add_argument("--plant-seconds", type=float, default=2.0)
    args = parser.parse_args()

    backends = {}
    for name, module in (("compiled", "hypermpc._kernels.core"),
                         ("python", "hypermpc._kernels.pyref")):
        try:
            backends[name] = importlib.import_module(module)
        except ImportError:
            print(f"backend '{name}' unavailable, skipping")

    results = {name: bench_backend(mod, args.repeats, args.plant_seconds)
               for name, mod in backends.items()}
    kernels = list(next(iter(results.values())))
    width = max(len(k) for k in kernels)
    header = f"{'kernel'.ljust(width)}  " + "  ".join(f"{n:>12s}" for n in results)
    if len(results) == 2:
        header += "  speedup"
    print(header)
    print("-" * len(header))
    for kernel in kernels:
        times = [results[n][kernel] for n in results]
        line = f"{kernel.ljust(width)}  " + "  ".join(f"{t * 1e3:9.3f} ms" for t in times)
        if len(times) == 2:
            line += f"  {times[1] / times[0]:6.1f}x"
        print(line)


if __name__ == "__main__":
    main()
