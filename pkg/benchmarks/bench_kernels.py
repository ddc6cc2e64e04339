"""Timing comparison of the compiled and pure-python transition kernels.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

The compiled backend matters because the receding-horizon baseline calls
rollout/adjoint hundreds of times per planning cycle; the pure backend is
the always-available reference.
"""

import time

import numpy as np

from ecofollow import _core_py as pure
from ecofollow import kernels
from ecofollow.envmodel import CarFollowModel
from ecofollow.harness import build_episode, generate_lead, window_positions


def bench(fn, *args, repeat=200):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    model = CarFollowModel()
    lead = generate_lead("urban", 60.0, 0)
    spec = build_episode(window_positions(lead, 0, model.horizon),
                         30.0, 12.0, model)
    z0 = model.initial_state(spec)
    rng = np.random.default_rng(0)
    us = rng.uniform(model.u_min, model.u_max, model.horizon)
    p = model._packed

    backends = [("pure", pure)]
    if kernels.COMPILED:
        from ecofollow import _core
        backends.append(("compiled", _core))
    else:
        print("compiled backend unavailable; timing the fallback only")

    rows = []
    for name, mod in backends:
        t_step = bench(lambda: mod.step(z0, float(us[0]), p))
        t_jac = bench(lambda: mod.step_jacobian(z0, float(us[0]), p))
        t_roll = bench(lambda: mod.rollout(z0, us, p))
        t_adj = bench(lambda: mod.adjoint(z0, us, p))
        rows.append((name, t_step, t_jac, t_roll, t_adj))

    header = f"{'backend':>9} {'step':>10} {'jacobian':>10} {'rollout':>10} {'adjoint':>10}"
    print(header)
    for name, *ts in rows:
        print(f"{name:>9} " + " ".join(f"{t * 1e6:9.1f}u" for t in ts))
    if len(rows) == 2:
        speedups = [rows[0][i] / rows[1][i] for i in range(1, 5)]
        print(f"{'speedup':>9} " + " ".join(f"{s:9.1f}x" for s in speedups))


if __name__ == "__main__":
    main()
