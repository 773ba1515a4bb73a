"""Time the numba kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--repeat 20] [--sweeps 50]

Reports per-call times of each kernel on the curse scenario, then the
wall time of whole Gibbs sweeps under both backends.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from dendrorecon import _kernels, models, simulate
from dendrorecon.mcmc.sampler import ChainState, initial_state


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_calls(data, state: ChainState):
    c0 = np.zeros(data.k)
    c1 = np.zeros(data.k)
    eta = np.zeros(data.n)
    n_dirs = state.bump_dirs.shape[1]
    z = np.zeros(n_dirs)
    par = np.array([0.1, 10.0, 0.06, 0.0025, 1.0, 0.06, 4e-6, 1.0, 0.5, -0.008, 10.0, 4.0, 20.0])

    def bump():
        _kernels.bump_sweep(state.bump_dirs, state.bump_c, state.bump_p, state.bump_q, state.bump_css,
                            state.observed, state.mis, state.tree, state.t, state.age, state.logy,
                            np.full(data.n, 10.0), eta.copy(), state.x.copy(), c0.copy(), c1.copy(),
                            np.zeros(0), par, False, False, z, z)

    return {
        "group_sums": lambda: _kernels.group_sums(data.logy, data.tree, data.t, data.age, eta, data.k),
        "year_sums": lambda: _kernels.year_sums(data.logy, data.tree, data.t, data.age, c0, c1, data.n),
        "sse": lambda: _kernels.sse(data.logy, data.tree, data.t, data.age, c0, c1, eta),
        "bump_sweep": bump,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--sweeps", type=int, default=50)
    ap.add_argument("--model", default="M_TS_spl")
    args = ap.parse_args(argv)

    sim = simulate.simulate_dataset(simulate.scenario("curse"), 1)
    spec = models.make_spec(args.model)
    data = models.prepare_data(spec, sim.dataset, sim.climate)
    print(f"{data.k} trees, {data.n} years, {data.n_obs} rings, model {spec.name}")

    results = {}
    for backend in ("numpy", "numba"):
        _kernels.set_backend(backend)
        rng = np.random.Generator(np.random.Philox(0))
        state = ChainState(spec, data, rng)
        state.load(initial_state(spec, data, rng, 1.0))
        calls = kernel_calls(data, state)
        for fn in calls.values():
            fn()  # compile
        state.sweep(adapt=True)
        row = {name: best_of(fn, args.repeat) for name, fn in calls.items()}
        t0 = time.perf_counter()
        for _ in range(args.sweeps):
            state.sweep(adapt=True)
        row["sweep"] = (time.perf_counter() - t0) / args.sweeps
        results[backend] = row

    print(f"{'kernel':<12}{'numpy (us)':>14}{'numba (us)':>14}{'speedup':>10}")
    for name in results["numpy"]:
        a, b = results["numpy"][name] * 1e6, results["numba"][name] * 1e6
        print(f"{name:<12}{a:>14.1f}{b:>14.1f}{a / b:>10.1f}")


if __name__ == "__main__":
    main()
