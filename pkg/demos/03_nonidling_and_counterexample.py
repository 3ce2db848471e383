"""Why trees matter: nonidling under growth, unbounded states off trees.

Two experiments with the deterministic flow system.  First: on a tree of
diameter three whose service rates dominate abandonment, strictly
increasing drivers keep every station busy, whatever the control does.
Second: add the one missing activity (creating a cycle) and a circulating
flow of any size k satisfies all the flow equations with zero drivers, so
the state is not controlled by the data once the tree structure is lost.
"""

import numpy as np

import hwsched as hw

mu = np.array([[1.0, 0.0], [2.0, 3.0]])
psi_star = np.array([[0.5, 0.0], [0.5, 1.0]])
lam, nu, x_star = hw.fluid_from_flows(mu, psi_star)
model = hw.TreeModel(
    classes=2, stations=2, edges=((0, 0), (1, 0), (1, 1)), mu=mu,
    theta=[0.5, 0.5], ell=[0.0, 0.0], r=[1.0, 1.0], gamma=1.0,
    lam=lam, nu=nu, x_star=x_star, psi_star=psi_star,
)
print("guarantee applicable:", hw.nonidling_hypothesis(model) == [])

dt = 1e-3
n = 2000
t = dt * np.arange(n + 1)
w = np.tile((1.0 + t)[:, None], (1, 2))  # positive start, strictly increasing

rng = np.random.default_rng(0)
worst = 0.0
for run in range(10):
    cu, cv = rng.normal(0, 1, (2, 2)), rng.normal(0, 1, (2, 2))

    def controls(s):
        eu = np.exp(cu[:, 0] * np.sin(s) + cu[:, 1] * np.cos(2 * s))
        ev = np.exp(cv[:, 0] * np.cos(s) + cv[:, 1] * np.sin(3 * s))
        return eu / eu.sum(), ev / ev.sum()

    path = hw.ControlPath.from_function(controls, n + 1, dt)
    worst = max(worst, hw.check_nonidling(model, w, path))
print("max idleness over 10 adversarial control paths:", worst)

# a decreasing driver breaks the hypothesis and idleness appears
w_bad = w.copy()
w_bad[:, 0] = 1.0 - 2.0 * t
traj = hw.integrate_det(model, w_bad, path)
print("with a falling driver instead:", traj.max_idleness())

print("\n-- off the tree --")
for k in (1.0, 10.0, 100.0):
    rep = hw.counterexample_flow(k, horizon=5.0, dt=1e-3)
    print(
        f"k={k:>5g}: flow equations hold to {rep.max_residual:.1e}, "
        f"sup state norm {rep.sup_state_norm:8.3f}, drivers identically zero"
    )
print("state norms scale with k while the driving data stays at zero:")
print("no driver-based bound on the state can hold with a cycle present.")
