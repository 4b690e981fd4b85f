"""Command line entry point: ``evofem <subcommand> --config FILE [--out DIR]``.

Every subcommand writes CSV files into the output directory and prints
one ``PASS|FAIL <check> <residual>`` line per check.  Exit status is 0
when all checks pass, 1 when one fails, 2 for configuration errors and 3
for numerical failures.
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import checks
from .config import Scenario, load_config
from .errors import ConfigError, NumericError, UnsupportedError
from .mesh import CLOSED_CURVE, INTERVAL
from .rng import Lcg
from .solver import (convergence_study, energy_certificate, manufactured_heat,
                     project_initial, solve, stability_experiment)
from .spaces import make_pivot

SUBCOMMANDS = ("check-flow", "check-lambda", "check-transport", "check-equivalence", "solve",
               "converge", "stability")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def csv_text(comments, columns, rows) -> str:
    lines = [f"# {c}" for c in comments]
    lines.append(",".join(columns))
    lines += [",".join(fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


class Run:
    """Collects reports and files of one subcommand invocation."""

    def __init__(self, out, workers=1, seed=0):
        self.out = out
        self.workers = max(1, int(workers))
        self.seed = int(seed)
        self.lines = []
        self.files = []
        self.passed = True

    def write(self, name, text):
        os.makedirs(self.out, exist_ok=True)
        path = os.path.join(self.out, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        self.files.append(path)

    def record(self, name, passed, residual):
        self.passed &= bool(passed)
        self.lines.append(f"{'PASS' if passed else 'FAIL'} {name} {residual:.3e}")

    def report(self, rep: checks.CheckReport):
        self.write(f"{rep.name}.csv", rep.to_csv())
        self.record(rep.name, rep.passed, rep.max_residual)

    def map(self, fn, items):
        """Apply ``fn`` over items, possibly in threads; results keep item order."""
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [fn(x) for x in items]
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))


def _pivots(sc: Scenario, mesh):
    choice = sc.get("problem", "pivot", "L2")
    if choice != "all":
        return [make_pivot(sc.pivot_spec(), mesh)]
    names = ["L2", "H1"]
    if mesh.topology == INTERVAL:
        names.append("Hminus1")
    elif sc.has("flow", "dual_field"):
        names.append("DualFlowL1")
    return [make_pivot(sc.pivot_spec(v), mesh) for v in names]


def _samples(run: Run, n, count):
    rng = Lcg(run.seed)
    return [(rng.uniform(n, -1.0, 1.0), rng.uniform(n, -1.0, 1.0)) for _ in range(count)]


def cmd_check_flow(sc: Scenario, run: Run):
    flow = sc.flow()
    mesh = sc.evolving_mesh()
    ref = mesh.reference
    t = sc.check_time
    tangents = ref.node_tangents() if ref.topology == CLOSED_CURVE else None
    run.report(checks.check_jacobian_ode(flow, ref.nodes, t, tangents=tangents))
    probe = ref.nodes[[1, ref.n_nodes // 3]]
    for k, p in enumerate(probe):
        run.report(checks.check_metric_derivative(flow, p, t, name=f"metric-derivative-{k}"))
        run.report(checks.check_variational_jacobian(flow, p, t,
                                                     name=f"variational-jacobian-{k}"))
    run.report(checks.check_round_trip(flow, ref.nodes, t))
    run.report(checks.check_group_property(flow, ref.nodes, 0.5 * t, t))
    u = Lcg(run.seed).uniform(ref.n_nodes, -1.0, 1.0)
    run.report(checks.check_gradient_pullback(mesh, u, t))


def _fd_suite(sc: Scenario, run: Run, transport: bool):
    mesh = sc.evolving_mesh()
    t = sc.check_time
    count = sc.get("run", "samples", 5)
    for pivot in _pivots(sc, mesh):
        n = pivot.size
        rng = Lcg(run.seed)
        if transport:
            paths = [(checks.PolynomialPath.random(rng, n), checks.PolynomialPath.random(rng, n))
                     for _ in range(count)]
        else:
            paths = _samples(run, n, count)

        def one(k, pivot=pivot, paths=paths):
            u, v = paths[k]
            if transport:
                return checks.check_transport_theorem(pivot, t, u, v,
                                                      name=f"transport-{pivot.variant}-{k}")
            return checks.check_lambda(pivot, t, u, v, name=f"lambda-{pivot.variant}-{k}")

        for rep in run.map(one, range(count)):
            run.report(rep)


def cmd_check_lambda(sc, run):
    _fd_suite(sc, run, transport=False)


def cmd_check_transport(sc, run):
    _fd_suite(sc, run, transport=True)


def cmd_check_equivalence(sc: Scenario, run: Run):
    mesh = sc.evolving_mesh()
    t = sc.check_time
    times = np.linspace(0.0, max(sc.T, t), 11)
    for pivot in _pivots(sc, mesh):
        n = pivot.size
        for k, (u, v) in enumerate(_samples(run, n, sc.get("run", "samples", 5))):
            run.report(checks.check_pi_round_trip(pivot, t, u,
                                                  name=f"pi-round-trip-{pivot.variant}-{k}"))
            run.report(checks.check_pi_consistency(pivot, t, u, v,
                                                   name=f"pi-consistency-{pivot.variant}-{k}"))
        norms = checks.pi_norms(pivot, times)
        name = f"pi-norms-{pivot.variant}"
        run.write(f"{name}.csv", csv_text(
            [f"check: {name}", "t: time", "forward: norm of Pi_t in the reference pairing norm",
             "inverse: norm of the inverse of Pi_t in the same norm"],
            ["t", "forward", "inverse"], zip(norms.times, norms.forward, norms.inverse)))
        worst = float(max(norms.forward.max(), norms.inverse.max()))
        run.record(name, norms.finite, worst)


def cmd_solve(sc: Scenario, run: Run):
    cfg = sc.problem_config()
    res = solve(cfg)
    drift = np.abs(res.mass - res.mass[0])
    lhs, rhs = energy_certificate(cfg, res)
    iters = np.concatenate([[0], res.newton_iters])
    rows = zip(res.times, res.mass, drift, res.hnorm2, res.xp, iters, lhs, rhs)
    run.write("solve.csv", csv_text(
        ["t: time", "mass: integral of u over the domain at t",
         "mass_drift: |mass(t) - mass(0)|",
         "hnorm2: squared L2 norm of u at t",
         "xp: running sum of tau * ||u||_X^p",
         "newton_iters: Newton iterations of the step ending at t",
         "energy: squared norm plus coercive part of the energy estimate",
         "energy_bound: propagated right side of the energy estimate"],
        ["t", "mass", "mass_drift", "hnorm2", "xp", "newton_iters", "energy", "energy_bound"],
        rows))
    run.record("newton", bool(np.all(res.newton_iters <= cfg.newton_maxit)),
               float(max((h[-1] for h in res.newton_history), default=0.0)))
    slack = lhs - rhs * (1.0 + 1e-12)
    run.record("energy-estimate", bool(np.all(slack <= 0.0)), float(max(0.0, slack.max())))
    conservative = (cfg.mesh.topology == CLOSED_CURVE and cfg.forcing is None
                    and cfg.operator.alpha == 0.0)
    if conservative:
        allowed = 1e-12 * np.maximum(1, np.arange(len(drift))) * max(1.0, abs(res.mass[0]))
        run.record("mass-conservation", bool(np.all(drift <= allowed)), float(drift.max()))


def cmd_converge(sc: Scenario, run: Run):
    if sc.kind != "interval":
        raise ConfigError("converge runs the manufactured solution on an interval",
                          sc.line("geometry", "kind"))
    levels = sc.get("run", "levels", 4)
    n0, N0 = sc.get("geometry", "n"), sc.N
    alpha = sc.get("flow", "alpha", 0.0) if sc.get("flow", "field", "zero") == "dilation" else 0.0
    exact, _, _ = manufactured_heat(alpha, sc.get("geometry", "a", 0.0),
                                    sc.get("geometry", "b", 1.0))
    space = [(n0 * 2**k, N0 * 4**k) for k in range(levels)]
    fine = sc.get("run", "fine_n", 256)
    time = [(fine, N0 * 2**k) for k in range(levels)]

    def study(item):
        mode, pairs = item
        cfgs = [sc.problem_config(n=n, N=N) for n, N in pairs]
        return convergence_study(cfgs, exact, refine=mode)

    results = run.map(study, [("space", space), ("time", time)])
    for (mode, expected), tab in zip((("space", 2.0), ("time", 1.0)), results):
        name = f"eoc-{mode}"
        run.write(f"{name}.csv", csv_text(
            [f"check: {name}", "h: largest reference element length", "tau: time step",
             "error: L2 error at the final time on the carried domain",
             f"order: observed order in {'h' if mode == 'space' else 'tau'}"],
            ["level", "h", "tau", "error", "order"],
            [(k, h, tau, e, o) for k, (h, tau, e, o) in
             enumerate(zip(tab.h, tab.tau, tab.error, tab.order))]))
        order = float(tab.order[-1])
        run.record(name, abs(order - expected) <= 0.2,
                   float(tab.error[-1]))


def cmd_stability(sc: Scenario, run: Run):
    cfg = sc.problem_config()
    free = cfg.free
    u0 = sc.initial()
    base = np.zeros(cfg.mesh.reference.n_nodes)
    if u0 is not None:
        base[free] = project_initial(cfg.mesh, u0)
    bump = np.zeros_like(base)
    bump[free] = sc.get("problem", "perturbation", 1e-3) * Lcg(run.seed).uniform(len(free),
                                                                                   -1.0, 1.0)
    table = stability_experiment(cfg, base, base + bump)
    run.write("stability.csv", csv_text(
        ["t: time", "difference: L2 norm of the difference of the two solutions at t",
         f"bound: exp(C_w t / 2) times the initial difference, C_w = {fmt(table.c_w)}",
         "ratio: difference / bound"],
        ["t", "difference", "bound", "ratio"],
        zip(table.times, table.difference, table.bound, table.ratio)))
    limit = 1.0 + 1e-12 if table.c_w == 0.0 else sc.get("run", "tolerance", 1.05)
    worst = float(table.ratio.max())
    run.record("stability", worst <= limit, worst)


COMMANDS = {
    "check-flow": cmd_check_flow,
    "check-lambda": cmd_check_lambda,
    "check-transport": cmd_check_transport,
    "check-equivalence": cmd_check_equivalence,
    "solve": cmd_solve,
    "converge": cmd_converge,
    "stability": cmd_stability,
}


def run_subcommand(name, scenario: Scenario, out="out", workers=1, seed=0):
    """Run one subcommand; returns (exit status, written files, summary lines)."""
    run = Run(out, workers, seed)
    COMMANDS[name](scenario, run)
    run.write("summary.txt", "\n".join(run.lines) + "\n")
    return (EXIT_OK if run.passed else EXIT_FAIL), run.files, run.lines


def build_parser():
    ap = argparse.ArgumentParser(prog="evofem", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, help="scenario file")
    ap.add_argument("--out", default="out", help="output directory for CSV files")
    ap.add_argument("--workers", type=int, default=1, help="threads for independent scenarios")
    ap.add_argument("--seed", type=int, default=0, help="seed of the random samples (u64)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers < 1 or not 0 <= args.seed < 2**64:
        print("error: --workers must be positive and --seed a u64", file=sys.stderr)
        return EXIT_CONFIG
    try:
        scenario = load_config(args.config)
        status, _, lines = run_subcommand(args.command, scenario, args.out, args.workers,
                                          args.seed)
    except (ConfigError, UnsupportedError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for line in lines:
        print(line)
    return status


if __name__ == "__main__":
    sys.exit(main())
