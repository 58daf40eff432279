"""Wall time of the hot paths under the numba and numpy backends.

Each backend runs in its own interpreter because ``VRSPH_BACKEND`` is read
at import. Every phase is called once to compile (numba) and then timed as
the median of ``--repeat`` calls.

    python benchmarks/bench_backends.py --k 6 --repeat 3 --out bench.csv
"""

import argparse
import csv
import json
import os
import subprocess
import sys

WORKER = r"""
import json, statistics, sys, time
import numpy as np
from vrsph import BACKEND
from vrsph.geometry import Box, build_neighbor_table, generate_perturbed
from vrsph.kernels import KernelSpec
from vrsph.poiseuille import FlowConfig, initial_state, step_leapfrog
from vrsph.poisson import PoissonStudyConfig, poisson_particles, solve_manufactured
from vrsph.reconstruction import Mode, reconstruct_volumes

k, repeat = int(sys.argv[1]), int(sys.argv[2])
ps = generate_perturbed(2**k, Box.cube(-1.0, 1.0, 2), seed=0, virtual_layers=3, layout="node")
kern = KernelSpec(2, 3 * ps.delta_x)
nbrs = build_neighbor_table(ps, kern.h)
pcfg = PoissonStudyConfig(distribution="perturbed")
pset = poisson_particles(2**k, pcfg)
fcfg = FlowConfig.for_reynolds(0.1, dx=1e-4, width_cells=10)
state = initial_state(fcfg)


def flow_steps():
    s = state
    for _ in range(10):
        s = step_leapfrog(s, fcfg, fcfg.stable_dt)


phases = {
    "neighbor_search": lambda: build_neighbor_table(ps, kern.h),
    "reconstruction": lambda: reconstruct_volumes(ps, nbrs, kern, Mode.LAPLACIAN),
    "poisson_gauss_seidel": lambda: solve_manufactured(pset, pcfg),
    "flow_10_steps": flow_steps,
}
out = {"backend": BACKEND, "particles": ps.n_total, "phases": {}}
for name, fn in phases.items():
    t0 = time.perf_counter()
    fn()
    first = time.perf_counter() - t0
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    out["phases"][name] = {"first": first, "median": statistics.median(times)}
print(json.dumps(out))
"""


def run_backend(backend, k, repeat):
    env = dict(os.environ, VRSPH_BACKEND=backend)
    r = subprocess.run([sys.executable, "-c", WORKER, str(k), str(repeat)], env=env, capture_output=True,
                       text=True, check=True)
    return json.loads(r.stdout.strip().splitlines()[-1])


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--k", type=int, default=6, help="N^(1/d) = 2^k particles per axis")
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--out", help="optional CSV path")
    a = p.parse_args(argv)

    res = {b: run_backend(b, a.k, a.repeat) for b in ("numba", "numpy")}
    rows = []
    print(f"{res['numba']['particles']} particles, median of {a.repeat}")
    print(f"{'phase':22s} {'numba [s]':>11s} {'numpy [s]':>11s} {'speed-up':>9s} {'compile [s]':>12s}")
    for name, nb in res["numba"]["phases"].items():
        npy = res["numpy"]["phases"][name]
        speedup = npy["median"] / nb["median"]
        compile_s = max(nb["first"] - nb["median"], 0.0)
        rows.append((name, nb["median"], npy["median"], speedup, compile_s))
        print(f"{name:22s} {nb['median']:11.4e} {npy['median']:11.4e} {speedup:9.1f} {compile_s:12.2f}")
    if a.out:
        with open(a.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["phase", "numba_seconds", "numpy_seconds", "speedup", "numba_compile_seconds"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
