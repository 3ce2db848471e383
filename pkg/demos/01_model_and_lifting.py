"""Build a buffer-station tree, validate it, and explore the flow lift.

The N-model is the canonical small network: two customer classes, two
server stations, three activities.  Class 0 can only be served at station
0; class 1 at either station.  We check the model's invariants, look at its
rooted level structure, and see how prescribing per-class and per-station
totals pins down every edge flow on a tree.
"""

import numpy as np

import hwsched as hw

mu = np.array([[1.0, 0.0], [2.0, 3.0]])
psi_star = np.array([[0.5, 0.0], [0.5, 1.0]])
lam, nu, x_star = hw.fluid_from_flows(mu, psi_star)
model = hw.TreeModel(
    classes=2, stations=2, edges=((0, 0), (1, 0), (1, 1)), mu=mu,
    theta=[0.5, 0.5], ell=[0.0, 0.0], r=[np.sqrt(2)] * 2, gamma=1.0,
    lam=lam, nu=nu, x_star=x_star, psi_star=psi_star,
)

report = hw.validate_model(model)
print("valid:", report.ok, "| diameter:", report.diameter)

cost = hw.RunningCostSpec(c=[3.0, 1.0], d=[1.0, 2.0])
print("well-posedness regimes:", sorted(hw.classify_case(model, cost)))

comb = hw.build_combinatorics(model, root=0)
print("levels from class 0:", comb.levels)
print("parents:", comb.parent)

# On a tree, class totals and station totals determine the edge flows
# uniquely (when they balance).  The peeling solve is exact.
alpha = np.array([1.0, 2.0])
beta = np.array([2.5, 0.5])
psi = hw.solve_psi(model, alpha, beta)
print("\nflows for class totals", alpha, "and station totals", beta)
print(psi)
print("row sums:", psi.sum(axis=1), "| column sums:", psi.sum(axis=0))

# The control lift: a control point splits the aggregate imbalance into
# queueing (by class) and idleness (by station); flows follow.
x = np.array([1.0, -2.0])
point = hw.ControlPoint([1.0, 0.0], [0.0, 1.0])
y, z, psi = hw.lift_control(model, x, point)
print("\nstate", x, "-> queues", y, "idleness", z)
print("drift:", hw.drift(model, x, point))

# A cycle breaks uniqueness: the complete bipartite system is rejected.
mu_bad = np.array([[1.0, 2.0], [1.0, 2.0]])
psi_bad = np.full((2, 2), 0.25)
lam_b, nu_b, xs_b = hw.fluid_from_flows(mu_bad, psi_bad)
loopy = hw.TreeModel(
    classes=2, stations=2, edges=((0, 0), (0, 1), (1, 0), (1, 1)), mu=mu_bad,
    theta=[0, 0], ell=[0, 0], r=[1, 1], gamma=1.0, lam=lam_b, nu=nu_b,
    x_star=xs_b, psi_star=psi_bad,
)
print("\ncomplete bipartite 2x2:", hw.validate_model(loopy).violations)
