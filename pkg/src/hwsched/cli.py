"""Command-line entry point for reproducible experiments.

Every command loads a model file, writes a run manifest into the output
directory before computing, and emits CSV/JSON artifacts.  Check-style
commands exit 1 when their tolerance is violated; bad input exits 2.
"""

from __future__ import annotations

import argparse
import datetime
import json
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, ctmc, detsys, hjb, model as model_mod, pathops, sde


class CliError(Exception):
    """Invalid input or configuration; exits with status 2."""


def _write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=float) + "\n")


def _load_model(path):
    if path is None:
        raise CliError("--model is required")
    p = Path(path)
    if not p.exists():
        raise CliError(f"model file not found: {path}")
    try:
        return model_mod.load_model(p)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot parse model file: {exc}") from exc


def _require_cost(cost, flag="model file"):
    if cost is None:
        raise CliError(f"a cost spec is required; add one to the {flag}")
    return cost


def _floats(text, n=None, name="value"):
    try:
        vals = [float(tok) for tok in str(text).split(",")]
    except ValueError as exc:
        raise CliError(f"cannot parse {name}: {text!r}") from exc
    if n is not None and len(vals) != n:
        raise CliError(f"{name} needs {n} comma-separated numbers")
    return np.array(vals)


def _parse_policy(spec, model, horizon, seed):
    """Policy spec: ``uniform``, ``static:i,j``, ``switch:PERIOD``, or a
    policy-field file path."""
    if spec in (None, "uniform"):
        return sde.FixedControl(model_mod.ControlPoint.uniform(model.classes, model.stations))
    if spec.startswith("static:"):
        try:
            i, j = (int(tok) for tok in spec[7:].split(","))
        except ValueError as exc:
            raise CliError(f"bad static policy spec: {spec!r}") from exc
        if not (0 <= i < model.classes and 0 <= j < model.stations):
            raise CliError(f"static policy indices out of range: {spec!r}")
        return sde.StaticPriority.for_model(model, i, j)
    if spec.startswith("switch:"):
        return sde.SwitchingControl(model, float(spec[7:]), horizon, seed=seed)
    path = Path(spec)
    if not path.exists():
        raise CliError(f"policy file not found: {spec}")
    field, header = hjb.load_field(path)
    if header.get("kind") != "policy":
        raise CliError(f"{spec} is not a policy field file")
    if header.get("model_hash") != model_mod.model_hash(model):
        print("warning: policy file was built for a different model", file=sys.stderr)
    return sde.GridMarkov(field)


def _manifest(out: Path, command: str, params: dict):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "manifest.json", {
        "command": command,
        "parameters": params,
        "versions": {
            "hwsched": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": sys.version.split()[0],
        },
        "started": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    })


def _smooth_controls(model, n, dt, rng):
    I, J = model.classes, model.stations
    cu = rng.normal(0, 1, (I, 2))
    fu = rng.uniform(0.5, 2.0, (I, 2))
    cv = rng.normal(0, 1, (J, 2))
    fv = rng.uniform(0.5, 2.0, (J, 2))

    def fn(t):
        eu = np.exp(cu[:, 0] * np.sin(fu[:, 0] * t) + cu[:, 1] * np.cos(fu[:, 1] * t))
        ev = np.exp(cv[:, 0] * np.sin(fv[:, 0] * t) + cv[:, 1] * np.cos(fv[:, 1] * t))
        return eu / eu.sum(), ev / ev.sum()

    return detsys.ControlPath.from_function(fn, n, dt)


# -- command handlers (return True when the run's check passes) --------------


def cmd_validate(args, out):
    model, cost = _load_model(args.model)
    report = model_mod.validate_model(model)
    doc = {"ok": report.ok, "violations": list(report.violations), "diameter": report.diameter}
    if cost is not None and report.ok:
        doc["cases"] = sorted(model_mod.classify_case(model, cost))
    _write_json(out / "report.json", doc)
    print(("valid" if report.ok else "invalid") + f", diameter={report.diameter}")
    for v in report.violations:
        print("  -", v)
    return report.ok


def cmd_simulate(args, out):
    model, _ = _load_model(args.model)
    x0 = _floats(args.x0, model.classes, "--x0") if args.x0 else np.zeros(model.classes)
    policy = _parse_policy(args.policy, model, args.horizon, args.seed)
    path = sde.simulate_path(model, x0, policy, args.horizon, args.dt, seed=args.seed)
    path.to_csv(out / "path.csv")
    doc = {"horizon": args.horizon, "dt": args.dt, "terminal": path.x[-1].tolist()}
    if args.moments:
        times = _floats(args.moments, name="--moments")
        curve = sde.moment_curve(model, policy, x0, 2.0, times, args.paths,
                                 dt=args.dt, seed=args.seed, threads=args.threads)
        np.savetxt(out / "moments.csv",
                   np.column_stack([curve.times, curve.means, curve.stderrs]),
                   delimiter=",", header="t,moment2,stderr", comments="", fmt="%.17g")
        doc["moment_paths"] = args.paths
    _write_json(out / "summary.json", doc)
    print(f"terminal state: {path.x[-1]}")
    return True


def cmd_solve_hjb(args, out):
    model, cost = _load_model(args.model)
    cost = _require_cost(cost)
    grid = hjb.default_grid(model, points_per_dim=args.points, radius=args.radius)
    sol = hjb.solve_hjb(
        model, cost, grid, boundary=args.boundary, tol=args.tol,
        boundary_paths=args.boundary_paths, seed=args.seed,
    )
    hjb.save_field(sol.value, model, out / "value.field")
    _write_json(out / "solve.json", {
        "converged": sol.report.converged,
        "iterations": sol.report.iterations,
        "sup_update": sol.report.sup_update,
        "interior_residual": sol.report.interior_residual,
        "boundary": sol.report.boundary,
        "grid": grid.to_dict(),
    })
    print(f"converged={sol.report.converged} interior_residual={sol.report.interior_residual:.3e}")
    return sol.report.converged


def cmd_extract_policy(args, out):
    model, cost = _load_model(args.model)
    cost = _require_cost(cost)
    if not args.value or not Path(args.value).exists():
        raise CliError("--value must point to a value field file")
    field, header = hjb.load_field(args.value)
    if header.get("kind") != "value":
        raise CliError(f"{args.value} is not a value field file")
    policy = hjb.extract_policy(field, model, cost)
    hjb.save_field(policy, model, out / "policy.field")
    print(f"policy extracted on {field.grid.size} grid points")
    return True


def cmd_evaluate_policy(args, out):
    model, cost = _load_model(args.model)
    cost = _require_cost(cost)
    x0 = _floats(args.x0, model.classes, "--x0") if args.x0 else np.zeros(model.classes)
    policy = _parse_policy(args.policy, model, args.horizon or 12.0 / model.gamma, args.seed)
    est = sde.mc_cost(model, cost, x0, policy, args.paths, horizon=args.horizon,
                      dt=args.dt, seed=args.seed, threads=args.threads)
    _write_json(out / "cost.json", {
        "mean": est.mean, "stderr": est.stderr, "tail_bound": est.tail_bound,
        "n_paths": est.n_paths, "horizon": est.horizon, "dt": est.dt,
    })
    print(f"cost = {est.mean:.6f} +/- {est.stderr:.6f} (tail <= {est.tail_bound:.2e})")
    return True


def cmd_det_run(args, out):
    model, _ = _load_model(args.model)
    n = int(round(args.horizon / args.dt))
    w0 = _floats(args.w0, model.classes, "--w0") if args.w0 else np.ones(model.classes)
    slope = _floats(args.slope, model.classes, "--slope") if args.slope else np.ones(model.classes)
    t = args.dt * np.arange(n + 1)
    w = w0 + slope * t[:, None]
    if args.policy in (None, "uniform"):
        point = model_mod.ControlPoint.uniform(model.classes, model.stations)
        controls = detsys.ControlPath.constant(point, n + 1, args.dt)
    elif args.policy.startswith("static:"):
        i, j = (int(tok) for tok in args.policy[7:].split(","))
        point = model_mod.ControlPoint.vertex(i, j, model.classes, model.stations)
        controls = detsys.ControlPath.constant(point, n + 1, args.dt)
    elif args.policy == "random":
        controls = _smooth_controls(model, n + 1, args.dt, np.random.default_rng(args.seed))
    else:
        raise CliError(f"det-run supports uniform, static:i,j or random controls, got {args.policy!r}")
    traj = detsys.integrate_det(model, w, controls)
    traj.to_csv(out / "trajectory.csv")
    _write_json(out / "det.json", {
        "max_idleness": traj.max_idleness(),
        "sup_state_norm": float(np.abs(traj.x).sum(axis=1).max()),
    })
    print(f"max idleness {traj.max_idleness():.3e}")
    return True


def cmd_nonidling_check(args, out):
    model, _ = _load_model(args.model)
    reasons = detsys.nonidling_hypothesis(model)
    n = int(round(args.horizon / args.dt))
    t = args.dt * np.arange(n + 1)
    w = 1.0 + np.tile(t[:, None], (1, model.classes))
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for _ in range(args.runs):
        controls = _smooth_controls(model, n + 1, args.dt, rng)
        worst = max(worst, detsys.check_nonidling(model, w, controls))
    ok = worst <= args.tol
    _write_json(out / "nonidling.json", {
        "max_idleness": worst, "tol": args.tol, "runs": args.runs,
        "hypothesis_gaps": reasons, "pass": ok,
    })
    print(f"max idleness over {args.runs} runs: {worst:.3e} (tol {args.tol:g})")
    if reasons:
        print("note: hypothesis not satisfied:", "; ".join(reasons))
    return ok


def cmd_counterexample(args, out):
    rep = detsys.counterexample_flow(args.k, horizon=args.horizon, dt=args.dt)
    data = np.column_stack([rep.times, rep.x, rep.psi.reshape(len(rep.times), -1)])
    np.savetxt(out / "counterexample.csv", data, delimiter=",",
               header="t,x0,x1,psi0_0,psi0_1,psi1_0,psi1_1", comments="", fmt="%.17g")
    ok = rep.max_residual <= args.tol
    _write_json(out / "counterexample.json", {
        "k": rep.k, "max_residual": rep.max_residual,
        "sup_state_norm": rep.sup_state_norm, "driver_sup": rep.driver_sup,
        "tol": args.tol, "pass": ok,
    })
    print(f"k={rep.k:g}: residual {rep.max_residual:.2e}, sup state norm {rep.sup_state_norm:.4f}")
    return ok


def cmd_integral_residual(args, out):
    model, _ = _load_model(args.model)
    seqs = pathops.build_sequences(model)
    seqs.save(out / "sequences.json")
    n = int(round(args.horizon / args.dt))
    rng = np.random.default_rng(args.seed)
    t = args.dt * np.arange(n + 1)
    w0 = rng.uniform(0.05, 0.3, model.classes) * np.sign(rng.normal(size=model.classes))
    amps = rng.normal(0, 0.3, (model.classes, 2))
    freqs = rng.uniform(0.5, 2.5, (model.classes, 2))
    ph = rng.uniform(0, 2 * np.pi, (model.classes, 2))
    w = w0 + (amps[None] * np.sin(freqs[None] * t[:, None, None] + ph[None])).sum(-1)
    controls = _smooth_controls(model, n + 1, args.dt, rng)
    traj = detsys.integrate_det(model, w, controls)
    res = detsys.identity_residual(seqs, traj)
    sup = float(np.abs(res).max())
    tol = args.tol if args.tol is not None else 50.0 * args.dt
    ok = sup <= tol
    _write_json(out / "residual.json", {
        "sup_residual": sup, "tol": tol, "dt": args.dt, "horizon": args.horizon,
        "root": seqs.root, "pass": ok,
    })
    print(f"sup residual {sup:.3e} (tol {tol:g})")
    return ok


def _prelimit_samples(args, model):
    scaling = ctmc.ScalingSpec.centered(model, args.n)
    if args.rule.startswith("static:"):
        i, j = (int(tok) for tok in args.rule[7:].split(","))
        rule = ctmc.GreedyPriority(model, scaling, i, j)
    elif args.rule == "track":
        point = model_mod.ControlPoint.uniform(model.classes, model.stations)
        rule = ctmc.ImbalanceTracking(model, scaling, point)
    else:
        raise CliError(f"unknown rule {args.rule!r}; use static:i,j or track")
    x0 = _floats(args.x0, model.classes, "--x0") if args.x0 else np.zeros(model.classes)
    times = np.linspace(0.0, args.horizon, args.samples)
    samples = ctmc.run_replications(
        model, scaling, rule, x0, args.horizon, args.reps, seed=args.seed, sample_times=times
    )
    return scaling, x0, times, samples


def cmd_prelimit(args, out):
    model, _ = _load_model(args.model)
    scaling, _, times, samples = _prelimit_samples(args, model)
    R, S, I = samples.shape
    rows = np.column_stack([
        np.repeat(np.arange(R), S),
        np.tile(times, R),
        samples.reshape(R * S, I),
    ])
    header = "rep,t," + ",".join(f"xhat{i}" for i in range(I))
    np.savetxt(out / "prelimit.csv", rows, delimiter=",", header=header, comments="", fmt="%.17g")
    _write_json(out / "prelimit.json", {
        "n": scaling.n, "reps": R,
        "mean_terminal": samples[:, -1].mean(axis=0).tolist(),
        "var_terminal": samples[:, -1].var(axis=0, ddof=1).tolist(),
    })
    print(f"n={scaling.n}: terminal mean {samples[:, -1].mean(axis=0)}")
    return True


def cmd_compare(args, out):
    model, _ = _load_model(args.model)
    scaling, x0, times, samples = _prelimit_samples(args, model)
    x0_real = ctmc.initial_headcounts(model, scaling, x0)[1]
    policy = sde.FixedControl(model_mod.ControlPoint.uniform(model.classes, model.stations))
    if args.rule.startswith("static:"):
        i, j = (int(tok) for tok in args.rule[7:].split(","))
        policy = sde.StaticPriority.for_model(model, i, j)
    idx = [int(round(t / args.dt)) for t in times]
    sizes = sde._chunk_sizes(args.paths, sde.CHUNK)
    diff = np.empty((args.paths, len(times), model.classes))
    done = 0
    for ci, size in enumerate(sizes):
        rng = np.random.default_rng([args.seed, 1000 + ci])
        _, snaps = sde._run_chunk(
            model, np.tile(x0_real, (size, 1)), policy, max(idx), args.dt, rng, snap_idx=idx
        )
        for s, k in enumerate(idx):
            diff[done : done + size, s] = snaps[k]
        done += size
    report = ctmc.compare_samples(samples, diff, times)
    ok = report.max_mean_z <= args.z_max and report.max_var_z <= args.z_max
    doc = report.to_dict()
    doc.update({"n": scaling.n, "z_max": args.z_max, "pass": ok,
                "multiclass_note": "informational for more than one class"
                if model.classes > 1 else None})
    _write_json(out / "compare.json", doc)
    print(f"max mean z {report.max_mean_z:.2f}, max var z {report.max_var_z:.2f} (limit {args.z_max:g})")
    return ok


HANDLERS = {
    "validate": cmd_validate,
    "simulate": cmd_simulate,
    "solve-hjb": cmd_solve_hjb,
    "extract-policy": cmd_extract_policy,
    "evaluate-policy": cmd_evaluate_policy,
    "det-run": cmd_det_run,
    "nonidling-check": cmd_nonidling_check,
    "counterexample": cmd_counterexample,
    "integral-residual": cmd_integral_residual,
    "prelimit": cmd_prelimit,
    "compare": cmd_compare,
}


def _build_parser():
    parser = argparse.ArgumentParser(prog="hwsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--config", help="JSON file of defaults for this command")
        p.add_argument("--out", help="output directory (default out-<command>)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        return p

    p = add("validate", help="check a model file's invariants")
    p.add_argument("--model")

    p = add("simulate", help="simulate controlled diffusion paths")
    p.add_argument("--model")
    p.add_argument("--policy", default="uniform")
    p.add_argument("--x0")
    p.add_argument("--horizon", type=float, default=10.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--paths", type=int, default=1000)
    p.add_argument("--moments", help="comma list of times for a moment-curve CSV")

    p = add("solve-hjb", help="solve the dynamic-programming equation")
    p.add_argument("--model")
    p.add_argument("--points", type=int, default=121)
    p.add_argument("--radius", type=float, default=6.0)
    p.add_argument("--boundary", default="static-mc", choices=["static-mc", "extrapolate"])
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--boundary-paths", type=int, default=2000)

    p = add("extract-policy", help="extract the minimizing control field")
    p.add_argument("--model")
    p.add_argument("--value")

    p = add("evaluate-policy", help="Monte Carlo cost of a policy")
    p.add_argument("--model")
    p.add_argument("--policy", default="uniform")
    p.add_argument("--x0")
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--horizon", type=float)
    p.add_argument("--dt", type=float, default=1e-3)

    p = add("det-run", help="integrate the deterministic flow system")
    p.add_argument("--model")
    p.add_argument("--w0")
    p.add_argument("--slope")
    p.add_argument("--policy", default="uniform")
    p.add_argument("--horizon", type=float, default=2.0)
    p.add_argument("--dt", type=float, default=1e-3)

    p = add("nonidling-check", help="verify no idleness under increasing drivers")
    p.add_argument("--model")
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--horizon", type=float, default=2.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-8)

    p = add("counterexample", help="closed-form unbounded flow off the tree class")
    p.add_argument("--k", type=float, default=1.0)
    p.add_argument("--horizon", type=float, default=5.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-8)

    p = add("integral-residual", help="build operator sequences and check the identity")
    p.add_argument("--model")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--tol", type=float)

    p = add("prelimit", help="simulate the n-server system, scaled")
    p.add_argument("--model")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--x0")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--rule", default="static:0,0")
    p.add_argument("--samples", type=int, default=3)

    p = add("compare", help="pre-limit versus diffusion discrepancy check")
    p.add_argument("--model")
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--reps", type=int, default=2000)
    p.add_argument("--paths", type=int, default=10000)
    p.add_argument("--x0")
    p.add_argument("--horizon", type=float, default=1.0)
    p.add_argument("--rule", default="static:0,0")
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--z-max", dest="z_max", type=float, default=3.0)

    return parser


def _merge_config(args, argv):
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise CliError(f"config file not found: {args.config}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"cannot parse config: {exc}") from exc
    for key, value in doc.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise CliError(f"unknown config key {key!r}")
        # command-line flags that were given explicitly beat the config
        if f"--{key}" not in argv and f"--{attr}" not in argv:
            setattr(args, attr, value)
    return args


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    argv = [str(a) for a in argv]
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        args = _merge_config(args, argv)
        out = Path(args.out) if args.out else Path(f"out-{args.command}")
        params = {k: v for k, v in vars(args).items() if k not in ("command",)}
        _manifest(out, args.command, params)
        ok = HANDLERS[args.command](args, out)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
