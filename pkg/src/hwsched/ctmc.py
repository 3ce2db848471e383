"""Discrete-event simulation of the n-server pre-limit queueing system.

The n-th system has Poisson arrivals, exponential services and abandonment,
and a preemptive assignment rule that recomputes the in-service matrix as a
pure function of the headcounts after every event.  Emitted paths are the
centered, root-n-scaled processes, directly comparable with the diffusion
simulator output.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .model import ControlPoint, TreeModel


@dataclass(frozen=True)
class ScalingSpec:
    """System-size parametrization around the fluid operating point."""

    n: int
    lam_hat: np.ndarray
    mu_hat: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "lam_hat", np.asarray(self.lam_hat, dtype=float))
        object.__setattr__(self, "mu_hat", np.asarray(self.mu_hat, dtype=float))
        if self.n < 1:
            raise ValueError("n must be at least 1")

    @classmethod
    def centered(cls, model: TreeModel, n: int) -> "ScalingSpec":
        return cls(n, np.zeros(model.classes), np.zeros((model.classes, model.stations)))

    def arrival_rates(self, model: TreeModel) -> np.ndarray:
        return self.n * model.lam + np.sqrt(self.n) * self.lam_hat

    def service_rates(self, model: TreeModel) -> np.ndarray:
        rates = model.mu + self.mu_hat / np.sqrt(self.n)
        return np.where(model.edge_mask, rates, 0.0)

    def server_counts(self, model: TreeModel) -> np.ndarray:
        return np.rint(self.n * model.nu).astype(int)


def initial_headcounts(model: TreeModel, scaling: ScalingSpec, x_hat0):
    """Headcounts matching a scaled initial state, and the state realized
    after integer rounding."""
    x_hat0 = np.asarray(x_hat0, dtype=float)
    sqn = np.sqrt(scaling.n)
    X = np.rint(scaling.n * model.x_star + sqn * x_hat0).astype(int)
    X = np.maximum(X, 0)
    realized = (X - scaling.n * model.x_star) / sqn
    return X, realized


def _augment_work(model: TreeModel, X, Psi, caps):
    """Shuffle assignments along tree paths until no queued customer can
    reach idle capacity (preemption allowed).  Mutates ``Psi``."""
    while True:
        Y = X - Psi.sum(axis=1)
        Z = caps - Psi.sum(axis=0)
        if Y.sum() == 0 or Z.sum() == 0:
            return
        parent: dict = {}
        found = None
        queue = deque(("c", i) for i in range(model.classes) if Y[i] > 0)
        seen = set(queue)
        while queue and found is None:
            kind, a = queue.popleft()
            if kind == "c":
                for j in range(model.stations):
                    if model.edge_mask[a, j] and ("s", j) not in seen:
                        seen.add(("s", j))
                        parent[("s", j)] = a
                        if Z[j] > 0:
                            found = j
                            break
                        queue.append(("s", j))
            else:
                for i in range(model.classes):
                    if Psi[i, a] > 0 and ("c", i) not in seen:
                        seen.add(("c", i))
                        parent[("c", i)] = a
                        queue.append(("c", i))
        if found is None:
            return
        # walk back: station, class, station, ..., class with queue
        path = [("s", found)]
        while True:
            kind, a = path[-1]
            p = parent[path[-1]]
            path.append(("c", p) if kind == "s" else ("s", p))
            if kind == "s" and Y[p] > 0 and ("c", p) not in parent:
                break
        path.reverse()  # class, station, class, ..., station with idle room
        delta = min(Y[path[0][1]], Z[found])
        for k in range(1, len(path) - 1, 2):
            j = path[k][1]
            i_next = path[k + 1][1]
            delta = min(delta, Psi[i_next, j])
        for k in range(0, len(path) - 1, 2):
            i = path[k][1]
            j = path[k + 1][1]
            Psi[i, j] += delta
            if k + 2 < len(path):
                Psi[path[k + 2][1], j] -= delta


class GreedyPriority:
    """Preemptive greedy assignment concentrating queueing on one class and
    idleness at one station, with a rebalancing pass that moves service
    through the tree whenever queued work could fill idle capacity."""

    def __init__(self, model: TreeModel, scaling: ScalingSpec, queue_class: int = 0,
                 idle_station: int = 0):
        self.model = model
        self.caps = scaling.server_counts(model)
        self.class_order = [i for i in range(model.classes) if i != queue_class] + [queue_class]
        self.station_order = [j for j in range(model.stations) if j != idle_station]
        self.station_order.append(idle_station)

    def assign(self, X: np.ndarray) -> np.ndarray:
        model = self.model
        if model.classes == 1 and model.stations == 1:
            out = np.empty((1, 1), dtype=int)
            out[0, 0] = min(int(X[0]), int(self.caps[0]))
            return out
        Psi = np.zeros((model.classes, model.stations), dtype=int)
        free = self.caps.copy()
        for i in self.class_order:
            remaining = int(X[i])
            for j in self.station_order:
                if not model.edge_mask[i, j] or remaining == 0:
                    continue
                take = min(remaining, int(free[j]))
                Psi[i, j] = take
                free[j] -= take
                remaining -= take
        _augment_work(model, X, Psi, self.caps)
        return Psi


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights``."""
    raw = weights * total
    base = np.floor(raw).astype(int)
    short = total - base.sum()
    if short > 0:
        order = np.argsort(-(raw - base))
        base[order[:short]] += 1
    return base


def _cap_targets(targets: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Clamp integer targets to per-entry caps, redistributing the overflow
    to entries with headroom in index order."""
    out = np.minimum(targets, caps)
    overflow = int(targets.sum() - out.sum())
    for k in range(len(out)):
        if overflow == 0:
            break
        room = int(caps[k] - out[k])
        take = min(room, overflow)
        out[k] += take
        overflow -= take
    return out


class ImbalanceTracking:
    """Assignment targeting a fixed control point's queue and idle splits.

    The aggregate queue (or idleness) is forced by the headcounts; the rule
    splits it across classes (stations) by the control weights with
    largest-remainder rounding, then solves the tree flow equations for the
    matching integer assignment.  When the targets are infeasible on the
    tree (some flow would go negative), it falls back to greedy routing with
    the work-conserving rebalancing pass.
    """

    def __init__(self, model: TreeModel, scaling: ScalingSpec, point: ControlPoint):
        self.model = model
        self.caps = scaling.server_counts(model)
        self.point = point
        self._fallback = GreedyPriority(model, scaling)

    def assign(self, X: np.ndarray) -> np.ndarray:
        from .flows import solve_psi

        model = self.model
        total_x = int(X.sum())
        total_n = int(self.caps.sum())
        if total_x >= total_n:
            y_target = _cap_targets(_largest_remainder(self.point.u, total_x - total_n), X)
            z_target = np.zeros(model.stations, dtype=int)
        else:
            y_target = np.zeros(model.classes, dtype=int)
            z_target = _cap_targets(
                _largest_remainder(self.point.v, total_n - total_x), self.caps
            )
        alpha = (X - y_target).astype(float)
        beta = (self.caps - z_target).astype(float)
        psi = solve_psi(model, alpha, beta)
        if (psi >= 0).all():
            return np.rint(psi).astype(int)
        return self._fallback.assign(X)


@dataclass(frozen=True)
class CtmcPath:
    """Scaled sample path of one replication."""

    times: np.ndarray
    x_hat: np.ndarray  # (S, I)
    y_hat: np.ndarray  # (S, I)
    z_hat: np.ndarray  # (S, J)
    x_hat0: np.ndarray
    events: int


def _check_state(model, X, Psi, caps):
    if (Psi < 0).any():
        raise ValueError("assignment rule produced negative in-service counts")
    if Psi[~model.edge_mask].any():
        raise ValueError("assignment rule used a non-activity")
    if ((X - Psi.sum(axis=1)) < 0).any():
        raise ValueError("assignment rule violated the class headcount identity")
    if ((caps - Psi.sum(axis=0)) < 0).any():
        raise ValueError("assignment rule violated the station capacity identity")


def simulate_ctmc(
    model: TreeModel,
    scaling: ScalingSpec,
    rule,
    x_hat0,
    horizon: float,
    seed: int = 0,
    sample_times=None,
    check: bool = False,
) -> CtmcPath:
    """Run one replication of the n-th system and emit scaled samples.

    Events race exponentially among arrivals, per-activity service
    completions, and abandonments; after every event the rule reassigns all
    servers from scratch.
    """
    if sample_times is None:
        sample_times = np.linspace(0.0, horizon, 11)
    sample_times = np.asarray(sample_times, dtype=float)
    seed_key = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    rng = np.random.default_rng(seed_key + [31])
    lam_n = scaling.arrival_rates(model)
    mu_n = scaling.service_rates(model)
    caps = scaling.server_counts(model)
    theta = model.theta
    X, realized = initial_headcounts(model, scaling, x_hat0)
    n = scaling.n
    sqn = np.sqrt(n)

    if model.classes == 1 and model.stations == 1:
        return _simulate_single(
            model, float(lam_n[0]), float(mu_n[0, 0]), float(theta[0]), int(caps[0]),
            int(X[0]), realized, horizon, rng, sample_times, n,
        )

    edges = list(model.edges)
    S = len(sample_times)
    xs = np.empty((S, model.classes))
    ys = np.empty((S, model.classes))
    zs = np.empty((S, model.stations))
    Psi = rule.assign(X)
    if check:
        _check_state(model, X, Psi, caps)
    t = 0.0
    si = 0
    events = 0
    n_arr = model.classes
    n_svc = len(edges)
    buf = np.empty(n_arr + n_svc + model.classes)
    buf[:n_arr] = lam_n
    while si < S:
        for k, (i, j) in enumerate(edges):
            buf[n_arr + k] = Psi[i, j] * mu_n[i, j]
        Y = X - Psi.sum(axis=1)
        buf[n_arr + n_svc :] = theta * Y
        total = buf.sum()
        t_next = t + rng.exponential(1.0 / total) if total > 0 else np.inf
        while si < S and sample_times[si] < t_next:
            xs[si] = (X - n * model.x_star) / sqn
            ys[si] = Y / sqn
            zs[si] = (caps - Psi.sum(axis=0)) / sqn
            si += 1
        if si >= S or t_next > horizon + 1e-12:
            while si < S:
                xs[si] = (X - n * model.x_star) / sqn
                ys[si] = Y / sqn
                zs[si] = (caps - Psi.sum(axis=0)) / sqn
                si += 1
            break
        t = t_next
        events += 1
        r = rng.random() * total
        acc = 0.0
        pick = buf.size - 1
        for k in range(buf.size):
            acc += buf[k]
            if r < acc:
                pick = k
                break
        if pick < n_arr:
            X[pick] += 1
        elif pick < n_arr + n_svc:
            i, j = edges[pick - n_arr]
            X[i] -= 1
            Psi[i, j] -= 1
        else:
            X[pick - n_arr - n_svc] -= 1
        Psi = rule.assign(X)
        if check:
            _check_state(model, X, Psi, caps)
    return CtmcPath(sample_times, xs, ys, zs, realized, events)


def _simulate_single(model, lam, mu, theta, cap, X, realized, horizon, rng, sample_times, n):
    """Scalar event loop for the one-class one-station system."""
    S = len(sample_times)
    xs = np.empty((S, 1))
    ys = np.empty((S, 1))
    zs = np.empty((S, 1))
    sqn = np.sqrt(n)
    x_star = float(model.x_star[0])
    t = 0.0
    si = 0
    events = 0
    block = rng.random(4096)
    bi = 0
    while si < S:
        serve = X if X < cap else cap
        y = X - serve
        r_svc = mu * serve
        r_ab = theta * y
        total = lam + r_svc + r_ab
        if bi >= 4094:
            block = rng.random(4096)
            bi = 0
        u1 = block[bi]
        u2 = block[bi + 1]
        bi += 2
        t_next = t - np.log(u1) / total if total > 0 else np.inf
        while si < S and sample_times[si] < t_next:
            xs[si, 0] = (X - n * x_star) / sqn
            ys[si, 0] = y / sqn
            zs[si, 0] = (cap - serve) / sqn
            si += 1
        if si >= S or t_next > horizon + 1e-12:
            while si < S:
                xs[si, 0] = (X - n * x_star) / sqn
                ys[si, 0] = y / sqn
                zs[si, 0] = (cap - serve) / sqn
                si += 1
            break
        t = t_next
        events += 1
        r = u2 * total
        if r < lam:
            X += 1
        else:
            X -= 1
    return CtmcPath(sample_times, xs, ys, zs, realized, events)


def run_replications(
    model: TreeModel,
    scaling: ScalingSpec,
    rule,
    x_hat0,
    horizon: float,
    n_reps: int,
    seed: int = 0,
    sample_times=None,
    check: bool = False,
) -> np.ndarray:
    """Scaled state samples across independent replications, ``(R, S, I)``."""
    if sample_times is None:
        sample_times = np.linspace(0.0, horizon, 11)
    out = None
    for rep in range(n_reps):
        path = simulate_ctmc(
            model, scaling, rule, x_hat0, horizon,
            seed=[seed, rep], sample_times=sample_times, check=check,
        )
        if out is None:
            out = np.empty((n_reps, len(path.times), model.classes))
        out[rep] = path.x_hat
    return out


# -- comparison ---------------------------------------------------------------


def _safe_z(delta: np.ndarray, se: np.ndarray) -> np.ndarray:
    """Z-scores; a zero standard error counts as agreement only at zero gap."""
    delta = np.abs(delta)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = delta / se
    return np.where(se > 0, z, np.where(delta > 0, np.inf, 0.0))


def _var_se(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample variance and its standard error, along axis 0."""
    n = len(samples)
    mean = samples.mean(axis=0)
    dev = samples - mean
    s2 = (dev**2).sum(axis=0) / (n - 1)
    m4 = (dev**4).mean(axis=0)
    var_of_var = np.maximum(m4 - (n - 3) / (n - 1) * s2**2, 0.0) / n
    return s2, np.sqrt(var_of_var)


@dataclass(frozen=True)
class ComparisonReport:
    """Per-time, per-class discrepancies between two sample ensembles."""

    times: np.ndarray
    mean_a: np.ndarray
    mean_b: np.ndarray
    mean_se: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    var_se: np.ndarray

    @property
    def mean_z(self) -> np.ndarray:
        return _safe_z(self.mean_a - self.mean_b, self.mean_se)

    @property
    def var_z(self) -> np.ndarray:
        return _safe_z(self.var_a - self.var_b, self.var_se)

    @property
    def max_mean_z(self) -> float:
        return float(self.mean_z.max())

    @property
    def max_var_z(self) -> float:
        return float(self.var_z.max())

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "mean_a": self.mean_a.tolist(),
            "mean_b": self.mean_b.tolist(),
            "mean_z": self.mean_z.tolist(),
            "var_a": self.var_a.tolist(),
            "var_b": self.var_b.tolist(),
            "var_z": self.var_z.tolist(),
        }


def compare_samples(samples_a: np.ndarray, samples_b: np.ndarray, times) -> ComparisonReport:
    """Tabulate mean and variance discrepancies with combined errors.

    Both inputs have shape ``(replications, len(times), classes)``; the two
    replication counts may differ.
    """
    times = np.asarray(times, dtype=float)
    if samples_a.shape[1:] != samples_b.shape[1:]:
        raise ValueError("sample ensembles do not match in times or classes")
    if samples_a.shape[1] != len(times):
        raise ValueError("times do not match the sample arrays")
    na, nb = len(samples_a), len(samples_b)
    mean_a = samples_a.mean(axis=0)
    mean_b = samples_b.mean(axis=0)
    se_a = samples_a.std(axis=0, ddof=1) / np.sqrt(na)
    se_b = samples_b.std(axis=0, ddof=1) / np.sqrt(nb)
    var_a, vse_a = _var_se(samples_a)
    var_b, vse_b = _var_se(samples_b)
    return ComparisonReport(
        times=times,
        mean_a=mean_a,
        mean_b=mean_b,
        mean_se=np.sqrt(se_a**2 + se_b**2),
        var_a=var_a,
        var_b=var_b,
        var_se=np.sqrt(vse_a**2 + vse_b**2),
    )
