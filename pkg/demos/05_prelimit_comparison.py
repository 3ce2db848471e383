"""The n-server system against its diffusion limit.

A single critically loaded class: n servers, Poisson arrivals at rate n,
unit exponential services.  Centering the headcount at n and scaling by
root-n gives a process whose law approaches the limiting diffusion as n
grows.  We simulate both sides and tabulate the discrepancy at a few system
sizes.
"""

import numpy as np

import hwsched as hw
from hwsched import sde

model = hw.TreeModel(
    classes=1, stations=1, edges=((0, 0),), mu=[[1.0]], theta=[0.0],
    ell=[0.0], r=[np.sqrt(2.0)], gamma=1.0, lam=[1.0], nu=[1.0],
    x_star=[1.0], psi_star=[[1.0]],
)
horizon = 1.0
reps = 3000
times = [0.5, 1.0]

# diffusion ensemble, matched start
policy = hw.StaticPriority.for_model(model, 0, 0)
paths = 20_000
idx = [500, 1000]
diffusion = np.empty((paths, 2, 1))
done = 0
for ci, size in enumerate(sde._chunk_sizes(paths, sde.CHUNK)):
    rng = np.random.default_rng([99, ci])
    _, snaps = sde._run_chunk(model, np.zeros((size, 1)), policy, 1000, 1e-3,
                              rng, snap_idx=idx)
    for s, k in enumerate(idx):
        diffusion[done : done + size, s] = snaps[k]
    done += size

print(f"{'n':>5} {'mean gap':>10} {'var gap':>10} {'mean z':>8} {'var z':>8}")
for n in (25, 100, 400):
    scaling = hw.ScalingSpec.centered(model, n)
    rule = hw.GreedyPriority(model, scaling)
    samples = hw.run_replications(model, scaling, rule, [0.0], horizon, reps,
                                  seed=11, sample_times=times)
    report = hw.compare_samples(samples, diffusion, times)
    mg = abs(report.mean_a[-1, 0] - report.mean_b[-1, 0])
    vg = abs(report.var_a[-1, 0] - report.var_b[-1, 0])
    print(f"{n:>5} {mg:>10.4f} {vg:>10.4f} {report.mean_z[-1, 0]:>8.2f} "
          f"{report.var_z[-1, 0]:>8.2f}")

print("\nevent counts grow linearly with n; the scaled law stabilizes.")
print("multiclass comparisons run the same way but are informational only:")
print("no single limiting law is claimed under an arbitrary control rule.")
