"""Command-line front end: ``drbsde run | validate | sweep``.

Every run writes CSV artifacts under ``<out>/<output prefix>`` and prints one
``PASS``/``FAIL`` line per check with the measured error and its tolerance.
Exit status: 0 when every check passes, 1 when a check fails, 2 for an invalid
scenario, 3 when a module error stops the run.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import dynkin, links, montecarlo, solver
from .errors import DRBSDEError
from .filtration import prefix_label
from .scenario import Scenario, ScenarioError, coarse_hazard_rule, load_yaml, parse_scenario

log = logging.getLogger("drbsde")

ENV_OUT = "DRBSDE_OUT"
DEFAULT_OUT = "drbsde-out"
EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_ERROR = 0, 1, 2, 3
ROUNDOFF_FLOOR = 1e-10


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return "%.12g" % float(v)
    return str(v)


@dataclass
class Check:
    name: str
    measured: float
    tolerance: float
    passed: bool
    note: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f" ({self.note})" if self.note else ""
        return f"{status} {self.name}: measured={fmt(self.measured)} tol={fmt(self.tolerance)}{extra}"


@dataclass
class RunReport:
    run: str
    summary: dict = field(default_factory=dict)
    checks: list = field(default_factory=list)
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def exit_code(self) -> int:
        return EXIT_PASS if self.passed else EXIT_FAIL


def _within(name: str, measured: float, sc: Scenario, default: float, note: str = "") -> Check:
    tol = sc.tolerance(name, default)
    return Check(name, float(measured), tol, bool(measured <= tol), note)


def write_csv(path: Path, header: list, rows) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


# ---------------------------------------------------------------------------
# run kinds


def _tree_solve(sc: Scenario, prefix: Path, rep: RunReport) -> None:
    sol = solver.solve_drbsde(sc.problem)
    sol2 = solver.solve_drbsde(sc.problem)
    m = sc.model
    rows = []
    for k in range(m.n_steps + 1):
        Kp = sol.Kplus.values[k].reshape(1 << k, k + 1)[:, k]
        Km = sol.Kminus.values[k].reshape(1 << k, k + 1)[:, k]
        for n in range(1 << k):
            z = sol.Z_alive[k][n] if k < m.n_steps else np.nan
            rows.append((k, n, prefix_label(k, n) or "root", m.node_B(k)[n], sol.Y_alive[k][n], z, Kp[n], Km[n],
                         sc.problem.lower_at(k)[n], sc.problem.upper_at(k)[n]))
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_tree.csv"),
                               ["step", "node", "label", "B", "Y", "Z", "Kplus", "Kminus", "lower", "upper"], rows))
    sp, sm = solver.skorokhod_products(sol)
    rep.summary.update(Y0=sol.Y0)
    rep.checks += [
        _within("skorokhod-plus", sp, sc, 0.0),
        _within("skorokhod-minus", sm, sc, 0.0),
        _within("barrier-order", solver.barrier_violation(sol), sc, 0.0),
        _within("balance", solver.balance_residual(sol), sc, 1e-12),
        _within("orthogonality", solver.orthogonality_defect(sol), sc, 1e-12),
        _within("rerun-identical", float(max(np.max(np.abs(a - b)) for a, b in zip(sol.Y_alive, sol2.Y_alive))), sc, 0.0),
    ]


def _penalize(sc: Scenario, prefix: Path, rep: RunReport) -> None:
    ref = solver.solve_drbsde(sc.problem)
    mode = sc.data["penalize"]["mode"]
    rows = []
    errs = []
    for n in sc.data["penalize"]["levels"]:
        pen = solver.solve_penalized(sc.problem, n, mode)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(pen.Y_alive, ref.Y_alive))
        errs.append(err)
        rows.append((n, pen.Y0, ref.Y0, err))
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_penalize.csv"), ["n", "Y0_penalized", "Y0_reflected", "max_node_error"], rows))
    rises = max([b - a for a, b in zip(errs, errs[1:])] + [0.0])
    rep.summary.update(Y0=ref.Y0, final_error=errs[-1])
    rep.checks += [
        _within("penalization-decreasing", rises, sc, 0.0, "largest increase of the error along n"),
        _within("penalization-final", errs[-1], sc, 1e-3, f"n = {fmt(sc.data['penalize']['levels'][-1])}"),
    ]


def _link_check(sc: Scenario, prefix: Path, rep: RunReport) -> None:
    d = sc.data
    lk = d["link"]
    if lk.get("levels"):
        hz = lk["hazard"]
        table_rep = links.first_link_refinement(lk["levels"], lk["horizon"], lk["coarse_steps"],
                                                coarse_hazard_rule(hz["intercept"], hz["slope"]), d["terminal"],
                                                d["driver"]["g"], d["barriers"]["lower"], d["barriers"]["upper"])
        table = table_rep.convergence_table
        rows = [(lv, dt, e, c) for lv, (dt, e, c) in zip(lk["levels"], table)]
        rep.files.append(write_csv(prefix.with_name(prefix.name + "_link.csv"), ["n_steps", "dt", "error", "node_count"], rows))
        floor = sc.tolerance("first-link-floor", ROUNDOFF_FLOOR)
        ok = links.refinement_is_monotone(table, 1.1, floor)
        rep.summary.update(final_error=table[-1][1])
        rep.checks += [
            Check("first-link-refinement", table[-1][1], floor, ok, "each level <= 1.1 x previous, errors below the floor count as zero"),
            _within("first-link-final", table[-1][1], sc, 5e-2),
        ]
        return
    lr = links.first_link_check(sc.problem, sc.bundle)
    rows = [(k, n, prefix_label(k, n) or "root", e) for k, errs in enumerate(lr.per_node_errors) for n, e in enumerate(errs)]
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_link.csv"), ["step", "node", "label", "error"], rows))
    rep.summary.update(first_link_error=lr.max_abs_error)
    rep.checks += [
        _within("first-link", lr.max_abs_error, sc, 1e-10),
        _within("first-link-reflection", lr.k_transport_error, sc, 1e-10),
        _within("first-link-martingale-jump", lr.m_jump_error, sc, 1e-10),
    ]
    coef = sc.problem.driver.coefficients(sc.model)
    for row in links.verify_integrability_transfer(sc.problem.zeta, sc.bundle, sc.problem.beta, coef["alpha_sq"],
                                                   coef["g"], sc.problem.lower, sc.problem.upper, sc.measure):
        rep.checks.append(_within(f"transfer-{row.name.replace('_', '-')}", row.error, sc, 1e-10))
    if sc.law.is_deterministic() and sc.problem.driver.kind != "linear":
        sol = solver.solve_drbsde(sc.problem)
        sr = links.project_second_link(sol, sc.bundle, sc.problem)
        rep.checks += [
            _within("second-link-balance", sr.balance_error, sc, 1e-10),
            _within("second-link-order", max(sr.ordering_violation, sr.survival_ordering_violation), sc, 1e-10),
            _within("second-link-skorokhod-plus", sr.skorokhod_plus, sc, 1e-10),
            _within("second-link-skorokhod-minus", sr.skorokhod_minus, sc, 1e-10),
        ]


def _dynkin_oracle(sc: Scenario, prefix: Path, rep: RunReport) -> None:
    theta = int(sc.data["game"].get("theta") or 0)
    res = dynkin.brute_force_value(sc.game, theta)
    rows = [(theta, n, prefix_label(theta, n) or "root", u, lo, y)
            for n, (u, lo, y) in enumerate(zip(res.upper, res.lower, res.y_at_theta))]
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_dynkin.csv"), ["step", "node", "label", "upper", "lower", "Y"], rows))
    tol = dynkin.default_tolerance(sc.game.driver)
    rep.summary.update(upper=float(res.upper[0]), lower=float(res.lower[0]), Y=float(res.y_at_theta[0]),
                       pairs=res.deviations_checked)
    rep.checks += [
        _within("game-value-gap", res.gap, sc, tol),
        _within("game-value-match", res.value_error, sc, tol),
    ]
    sens = dynkin.qproc_sensitivity(sc.game, theta)
    rep.summary.update(value_shift_qproc_lower=sens["lower"], value_shift_qproc_upper=sens["upper"])


def _saddle_verify(sc: Scenario, prefix: Path, rep: RunReport) -> None:
    theta = int(sc.data["game"].get("theta") or 0)
    sol = solver.solve_drbsde(sc.problem)
    pair = dynkin.saddle_from_solution(sol, theta)
    res = dynkin.verify_saddle(pair, sc.game, theta, tol=sc.tolerance("saddle", dynkin.default_tolerance(sc.game.driver)))
    rows = [(name, err, tol, "PASS" if ok else "FAIL") for name, err, tol, ok in res.checks()]
    rep.summary.update(Y=float(res.y_at_theta[0]), deviations=res.deviations_checked, sampled=res.sampled)
    rep.checks += [Check(name, err, tol, ok) for name, err, tol, ok in res.checks()]
    perturbed = dynkin.negative_control(pair, sc.game, theta)
    if perturbed is None:
        # every perturbation leaves the end of the game and the stopping players unchanged
        rep.checks.append(Check("negative-control", 0.0, res.tol, True, "skipped: no perturbation changes the game"))
    else:
        neg = dynkin.verify_saddle(perturbed, sc.game, theta, tol=res.tol)
        rows += [("negative-control:" + name, err, tol, "PASS" if ok else "FAIL") for name, err, tol, ok in neg.checks()]
        rep.checks.append(Check("negative-control", neg.value_error + neg.worst_left + neg.worst_right, res.tol,
                                not neg.passed, "perturbed pair must fail"))
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_saddle.csv"), ["check", "measured", "tolerance", "status"], rows))


def _basis(sc: Scenario) -> montecarlo.RegressionBasis:
    b = sc.data["mc"]["basis"]
    return montecarlo.RegressionBasis(b["kind"], b["degree"], b["bins"], b["ridge"])


def _surface_csv(prefix: Path, est: montecarlo.MCEstimate) -> Path:
    return write_csv(prefix.with_name(prefix.name + "_mc.csv"), ["step", "Y_mean", "std_error"], est.surface)


def _mc_solve(sc: Scenario, prefix: Path, rep: RunReport, threads: int) -> None:
    d = sc.data
    mc = d["mc"]
    m = d["model"]
    seed = d["seed"]
    if m["increments"] == "two-point":
        if mc["exact"]:
            batch = montecarlo.tree_batch(sc.measure)
        else:
            batch = montecarlo.sample_tree_batch(sc.measure, mc["n_paths"], seed, threads)
        est = montecarlo.lsmc_solve_drbsde(batch, sc.problem, _basis(sc), mc["penalty"])
        exact = solver.solve_drbsde(sc.problem).Y0 if mc["penalty"] is None else solver.solve_penalized(sc.problem, mc["penalty"]).Y0
        rep.summary.update(Y0=est.value, std_error=est.std_error, tree_Y0=exact)
        if mc["exact"]:
            rep.checks.append(_within("mc-tree-exact", abs(est.value - exact), sc, 1e-9))
        else:
            z = abs(est.value - exact) / est.std_error if est.std_error > 0 else (0.0 if est.value == exact else np.inf)
            rep.checks.append(_within("mc-tree-agreement", z, sc, 3.0, "standard errors"))
    else:
        cfg = montecarlo.MCConfig(m["n_steps"], m["dt"])
        batch = montecarlo.simulate_paths(cfg, mc["n_paths"], seed, threads)
        if d["default_law"]["kind"] == "cox":
            batch = montecarlo.apply_cox_default(batch, montecarlo.CoxIntensity(d["default_law"]["rate"]), threads)
        drv = d["driver"]
        coef = (0.0, 0.0) if drv["kind"] == "g" else (drv["r"], drv["theta"])
        prob = montecarlo.MCProblem(
            zeta=d["terminal"], lower=d["barriers"]["lower"], upper=d["barriers"]["upper"],
            driver=None if drv["kind"] == "zero" else (lambda t, x, y, z: drv["g"](t, x) - coef[0] * y - coef[1] * z))
        est = montecarlo.lsmc_solve_drbsde(batch, prob, _basis(sc), mc["penalty"])
        rep.summary.update(Y0=est.value, std_error=est.std_error)
        rep.checks.append(Check("mc-finite", 0.0 if np.isfinite(est.value) else np.inf, 0.0, bool(np.isfinite(est.value))))
    rep.files.append(_surface_csv(prefix, est))


def _example_bs(sc: Scenario, prefix: Path, rep: RunReport, threads: int) -> None:
    b = sc.data["black_scholes"]
    sigma = b["sigma"]
    cfg = montecarlo.BlackScholesConfig(S0=b["S0"], K=b["K"], T=b["T"], r=b["r"], mu=b["mu"],
                                        sigma=lambda t, _s=sigma: _s(t, 0.0), sigma_min=b["sigma_min"],
                                        n_steps=b["n_steps"], intensity=b["intensity"], recovery=b["recovery"],
                                        lower=sc.data["barriers"]["lower"], upper=sc.data["barriers"]["upper"])
    est = montecarlo.black_scholes_example(cfg, b["n_paths"], sc.data["seed"], threads=threads)
    rep.files.append(_surface_csv(prefix, est))
    rep.summary.update(Y0=est.value, std_error=est.std_error)
    plain = b["intensity"] == 0 and sc.data["barriers"]["lower"] is None and sc.data["barriers"]["upper"] is None
    if plain and b["r"] == b["mu"]:
        ref = montecarlo.black_scholes_call(b["S0"], b["K"], b["T"], b["r"], cfg.sigma)
        rep.summary.update(closed_form=ref)
        rep.checks.append(_within("bs-closed-form", abs(est.value - ref) / est.std_error, sc, 3.0, "standard errors"))


def run_scenario(sc: Scenario, out_dir: Path, name: str, threads: int = 1) -> RunReport:
    """Run one scenario and write its artifacts under ``out_dir``."""
    prefix = Path(out_dir) / (sc.data.get("output") or name)
    rep = RunReport(sc.run)
    kind = sc.run
    if kind == "tree-solve":
        _tree_solve(sc, prefix, rep)
    elif kind == "penalize":
        _penalize(sc, prefix, rep)
    elif kind == "link-check":
        _link_check(sc, prefix, rep)
    elif kind == "dynkin-oracle":
        _dynkin_oracle(sc, prefix, rep)
    elif kind == "saddle-verify":
        _saddle_verify(sc, prefix, rep)
    elif kind == "mc-solve":
        _mc_solve(sc, prefix, rep, threads)
    else:
        _example_bs(sc, prefix, rep, threads)
    rows = [(c.name, c.measured, c.tolerance, "PASS" if c.passed else "FAIL") for c in rep.checks]
    rows += [("summary:" + k, v, "", "") for k, v in rep.summary.items()]
    rep.files.append(write_csv(prefix.with_name(prefix.name + "_report.csv"), ["check", "measured", "tolerance", "status"], rows))
    return rep


# ---------------------------------------------------------------------------
# commands


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ScenarioError([f"<file>: cannot read {path}: {exc.strerror}"]) from None


def _parse_value(text: str):
    return yaml.safe_load(text)


def _print_report(rep: RunReport, out=None) -> None:
    out = out or sys.stdout
    print(f"run {rep.run}: " + ", ".join(f"{k}={fmt(v)}" for k, v in rep.summary.items()), file=out)
    for c in rep.checks:
        print(c.line(), file=out)
    for f in rep.files:
        print(f"wrote {f}", file=out)


def _out_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(ENV_OUT) or DEFAULT_OUT)


def cmd_run(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    try:
        sc = parse_scenario(_read(args.scenario), overrides)
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rep = run_scenario(sc, _out_dir(args.out), Path(args.scenario).stem, args.threads)
    except DRBSDEError as exc:
        print(f"error: {args.scenario} ({sc.run}): {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR
    _print_report(rep)
    return rep.exit_code


def cmd_validate(args) -> int:
    try:
        sc = parse_scenario(_read(args.scenario))
    except ScenarioError as exc:
        for e in exc.errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"OK {args.scenario}: run {sc.run}")
    return EXIT_PASS


def cmd_sweep(args) -> int:
    name, _, values = args.param.partition("=")
    if not name or not values:
        print("error: --param expects name=v1,v2,...", file=sys.stderr)
        return EXIT_CONFIG
    text = _read(args.scenario)
    base = load_yaml(text)
    out = _out_dir(args.out)
    stem = Path(args.scenario).stem
    worst = EXIT_PASS
    rows = []
    for raw in values.split(","):
        value = _parse_value(raw)
        label = f"{name}={raw}"
        try:
            sc = parse_scenario(text, {name: value} | ({"seed": args.seed} if args.seed is not None else {}))
        except ScenarioError as exc:
            for e in exc.errors:
                print(f"error: [{label}] {e}", file=sys.stderr)
            worst = max(worst, EXIT_CONFIG)
            continue
        tag = f"{base.get('output') or stem}_{name.replace('.', '-')}-{raw}"
        sc.data["output"] = tag
        try:
            rep = run_scenario(sc, out, tag, args.threads)
        except DRBSDEError as exc:
            print(f"error: [{label}] {type(exc).__name__}: {exc}", file=sys.stderr)
            worst = max(worst, EXIT_ERROR)
            continue
        print(f"[{label}]")
        _print_report(rep)
        worst = max(worst, rep.exit_code)
        rows += [(name, raw, c.name, c.measured, c.tolerance, "PASS" if c.passed else "FAIL") for c in rep.checks]
        rows += [(name, raw, "summary:" + k, v, "", "") for k, v in rep.summary.items()]
    path = write_csv(out / f"{base.get('output') or stem}_sweep.csv", ["param", "value", "check", "measured", "tolerance", "status"], rows)
    print(f"wrote {path}")
    return worst


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drbsde", description="Reflected backward equations with default: lattice and Monte Carlo runs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario")
    r.add_argument("--out", help=f"output directory (default ${ENV_OUT} or ./{DEFAULT_OUT})")
    r.add_argument("--seed", type=int)
    r.add_argument("--threads", type=int, default=1)
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a scenario without running it")
    v.add_argument("scenario")
    v.set_defaults(func=cmd_validate)
    s = sub.add_parser("sweep", help="run a scenario for several values of one field")
    s.add_argument("scenario")
    s.add_argument("--param", required=True, help="dotted field and values, e.g. model.n_steps=2,3,4")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int, default=1)
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
