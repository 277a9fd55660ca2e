"""Experiment runner tying the library together.

Subcommands:

    kernel-check    singularity index, shift stability, lift spectrum
    fit             discretize the kernel and report fit errors
    simulate        uncontrolled paths to CSV
    oracle-compare  lift solver against the convolution solver, shared noise
    solve-bsde      value solve plus a truncation-rate study
    verify-hjb      semigroup fixed-point residual of the value function
    synthesize      feedback policy and the optimality-inequality table
    all             the full pipeline, reusing one value solve

Configurations are strict JSON (unknown keys rejected, schema_version
required); ``--scenario`` loads a shipped configuration instead.  Every
output file embeds the configuration hash and seed, and reruns with equal
configuration, seed, and any worker count are bitwise identical.

Exit codes: 0 success, 1 a verification failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import bsde as bsde_mod
from . import control as control_mod
from .forward import oracle_solve, simulate
from .hamiltonian import hamiltonian_constants
from .kernels import (
    DiscreteKernel,
    KernelError,
    alpha_index,
    discretize,
    kernel_from_json,
    max_shift,
)
from .problem import CoefficientError, ControlProblem, problem_from_json
from .rng import derive_seed
from .scenarios import scenario_config
from .statespace import (
    LiftedSpace,
    StateSpaceError,
    history_from_json,
    lift_history,
    output_map,
    select_exponents,
    spectral_bound,
)


class ConfigError(ValueError):
    """Raised for malformed experiment configurations."""


_TOP_KEYS = {
    "schema_version",
    "kernel",
    "discretization",
    "space",
    "history",
    "problem",
    "scheme",
    "bsde",
    "seed",
    "output_dir",
}


def _require_keys(data: dict, keys: set, where: str):
    missing = keys - set(data)
    extra = set(data) - keys
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _check_multiple(horizon: float, dt: float, where: str):
    steps = horizon / dt
    if steps < 1 or abs(steps - round(steps)) > 1e-9 * max(1.0, steps):
        raise ConfigError(f"{where}: horizon {horizon} is not an integral multiple of dt {dt}")


@dataclasses.dataclass(eq=False)
class Experiment:
    """Validated configuration plus the objects built from it."""

    config: dict
    config_hash: str
    kernel: object
    lift_kernel: DiscreteKernel
    space: LiftedSpace
    problem: ControlProblem
    history: object
    x0: np.ndarray
    seed: int
    scheme_dt: float
    scheme_horizon: float
    bsde_config: bsde_mod.BsdeConfig
    output_dir: Path

    @property
    def meta(self) -> str:
        return f"config={self.config_hash} seed={self.seed}"


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:12]


def build_experiment(config: dict, overrides: dict | None = None) -> Experiment:
    """Validate a configuration dict (fail-closed) and build all objects."""
    if not isinstance(config, dict):
        raise ConfigError("configuration must be a JSON object")
    _require_keys(config, _TOP_KEYS, "config")
    if config["schema_version"] != 1:
        raise ConfigError(f"unsupported schema_version {config['schema_version']!r}")

    overrides = overrides or {}
    config = json.loads(json.dumps(config))  # defensive deep copy
    if "seed" in overrides and overrides["seed"] is not None:
        config["seed"] = int(overrides["seed"])
    if "paths" in overrides and overrides["paths"] is not None:
        config["bsde"]["paths"] = int(overrides["paths"])
    if "output_dir" in overrides and overrides["output_dir"] is not None:
        config["output_dir"] = str(overrides["output_dir"])

    try:
        kernel = kernel_from_json(config["kernel"])
    except KernelError as exc:
        raise ConfigError(f"kernel: {exc}") from exc

    disc = config["discretization"]
    try:
        if disc is None:
            if not isinstance(kernel, DiscreteKernel):
                raise ConfigError("analytic kernels require a discretization block")
            lift_kernel = kernel
        else:
            _require_keys(disc, {"bins", "kappa_min", "kappa_max"}, "discretization")
            lift_kernel = discretize(
                kernel, int(disc["bins"]), float(disc["kappa_min"]), float(disc["kappa_max"])
            ).as_kernel()
    except KernelError as exc:
        raise ConfigError(f"discretization: {exc}") from exc

    _require_keys(config["space"], {"a_matrix"}, "space")
    _require_keys(
        config["problem"],
        {"drift", "control_drift", "running_cost", "noise", "discount", "control_set"},
        "problem",
    )
    try:
        space = LiftedSpace.from_kernel(config["space"]["a_matrix"], lift_kernel)
        problem = problem_from_json(config["problem"])
        history = history_from_json(config["history"])
        x0 = lift_history(space, history)
    except (StateSpaceError, CoefficientError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc
    if problem.dim != space.dim:
        raise ConfigError("problem and space dimensions disagree")

    _require_keys(config["scheme"], {"dt", "horizon"}, "scheme")
    scheme_dt = float(config["scheme"]["dt"])
    scheme_horizon = float(config["scheme"]["horizon"])
    _check_multiple(scheme_horizon, scheme_dt, "scheme")
    if 1.0 / scheme_dt < float(lift_kernel.measure.nodes[-1]):
        print(
            f"warning: kappa_max {lift_kernel.measure.nodes[-1]:g} exceeds 1/dt "
            f"{1.0 / scheme_dt:g}; the stepper cannot resolve the fastest node",
            file=sys.stderr,
        )

    bsde_block = dict(config["bsde"])
    _require_keys(
        bsde_block,
        {"horizon", "dt", "paths", "basis_degree", "features", "clamp"},
        "bsde",
    )
    _check_multiple(float(bsde_block["horizon"]), float(bsde_block["dt"]), "bsde")
    try:
        bsde_config = bsde_mod.BsdeConfig(
            horizon=float(bsde_block["horizon"]),
            dt=float(bsde_block["dt"]),
            paths=int(bsde_block["paths"]),
            basis_degree=int(bsde_block["basis_degree"]),
            features=str(bsde_block["features"]),
            clamp=bool(bsde_block["clamp"]),
        )
    except ValueError as exc:
        raise ConfigError(f"bsde: {exc}") from exc

    return Experiment(
        config=config,
        config_hash=config_hash(config),
        kernel=kernel,
        lift_kernel=lift_kernel,
        space=space,
        problem=problem,
        history=history,
        x0=x0,
        seed=int(config["seed"]),
        scheme_dt=scheme_dt,
        scheme_horizon=scheme_horizon,
        bsde_config=bsde_config,
        output_dir=Path(config["output_dir"]),
    )


def _write_json(path: Path, payload: dict, exp: Experiment):
    payload = {"config_hash": exp.config_hash, "seed": exp.seed, **payload}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list, rows: list, exp: Experiment):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# {exp.meta}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_kernel_check(exp: Experiment, args) -> int:
    rep = alpha_index(exp.kernel)
    effective = rep.alpha
    source = "kernel"
    if isinstance(exp.kernel, DiscreteKernel) and exp.kernel.parent_alpha is not None:
        effective = exp.kernel.parent_alpha
        source = "analytic parent"
    lift_rep = alpha_index(exp.lift_kernel)
    shift = max_shift(exp.kernel)
    bound = spectral_bound(exp.space)
    feasible = effective > 0.5
    lines = [
        f"singularity index alpha = {rep.alpha:g} ({source} alpha = {effective:g})",
        f"requirement alpha > 1/2: {'pass' if feasible else 'FAIL'}",
        f"largest stable exponential shift sigma_max = {shift:g} "
        f"({'pass' if shift > 0 or not isinstance(exp.kernel, DiscreteKernel) else 'FAIL'})",
        f"lift spectral bound = {bound:g}",
    ]
    payload = {
        "alpha": rep.alpha,
        "effective_alpha": effective,
        "alpha_source": source,
        "lift_alpha": lift_rep.alpha,
        "singular_enough": feasible,
        "sigma_max": shift,
        "spectral_bound": bound,
    }
    if feasible:
        pair = select_exponents(effective)
        payload["eta"] = pair.eta
        payload["theta"] = pair.theta
        lines.append(f"exponent pair (eta, theta) = ({pair.eta:g}, {pair.theta:g})")
    print("\n".join(lines))
    _write_json(exp.output_dir / "kernel_check.json", payload, exp)
    return 0 if feasible else 1


def cmd_fit(exp: Experiment, args) -> int:
    disc = exp.config["discretization"]
    if disc is None:
        report = discretize(
            exp.kernel,
            len(exp.lift_kernel.measure),
            float(exp.lift_kernel.measure.nodes[0]),
            float(exp.lift_kernel.measure.nodes[-1]) * (1.0 + 1e-9),
        )
    else:
        report = discretize(
            exp.kernel, int(disc["bins"]), float(disc["kappa_min"]), float(disc["kappa_max"])
        )
    print(
        f"{len(report.measure)} nodes on [{report.measure.nodes[0]:g}, "
        f"{report.measure.nodes[-1]:g}]; sup rel error {report.sup_rel_error:.3e}, "
        f"L1 error {report.l1_error:.3e} on t in [{report.t_window[0]:g}, {report.t_window[1]:g}]"
    )
    _write_json(
        exp.output_dir / "fit_report.json",
        {
            "nodes": report.measure.nodes.tolist(),
            "weights": report.measure.weights.tolist(),
            "sup_rel_error": report.sup_rel_error,
            "l1_error": report.l1_error,
            "t_window": list(report.t_window),
            "parent_alpha": report.parent_alpha,
        },
        exp,
    )
    return 0


def cmd_simulate(exp: Experiment, args) -> int:
    paths = args.paths or 100
    bundle = simulate(
        exp.space,
        exp.problem,
        None,
        exp.x0,
        exp.scheme_horizon,
        exp.scheme_dt,
        paths,
        seed=exp.seed,
        workers=args.workers,
        store_states=args.states,
    )
    out = exp.output_dir / "paths.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        bundle.to_csv(fh, include_states=args.states, meta=exp.meta)
    _write_json(exp.output_dir / "paths_summary.json", bundle.summary(), exp)
    print(f"wrote {out} ({paths} paths, {bundle.n_steps} steps)")
    return 0


def cmd_oracle_compare(exp: Experiment, args) -> int:
    paths = args.paths or 20
    bundle = simulate(
        exp.space,
        exp.problem,
        None,
        exp.x0,
        exp.scheme_horizon,
        exp.scheme_dt,
        paths,
        seed=exp.seed,
        workers=args.workers,
        store_states=False,
    )
    u_oracle = oracle_solve(
        exp.lift_kernel,
        exp.problem,
        exp.space.a_matrix,
        exp.history,
        bundle.increments,
        exp.scheme_horizon,
        exp.scheme_dt,
        initial_output=bundle.outputs[0, 0],
    )
    scale = float(np.max(np.abs(bundle.outputs)))
    gaps = np.max(np.abs(u_oracle - bundle.outputs), axis=(1, 2))
    ratio = float(gaps.max() / max(scale, 1e-300))
    # the two discretizations agree to O(kappa_max * dt); at the scheme's
    # working step this smoke gate checks wiring, not the refinement rate
    tol = args.tolerance if args.tolerance is not None else 0.1
    ok = ratio <= tol or scale == 0.0
    rows = [[int(p), float(gaps[p]), scale] for p in range(paths)]
    _write_csv(exp.output_dir / "oracle_compare.csv", ["path", "max_abs_gap", "output_scale"], rows, exp)
    _write_json(
        exp.output_dir / "oracle_verdict.json",
        {"max_gap": float(gaps.max()), "output_scale": scale, "ratio": ratio, "tolerance": tol, "passed": bool(ok)},
        exp,
    )
    print(f"lift vs convolution oracle: max gap {gaps.max():.3e} on scale {scale:.3e} -> {'pass' if ok else 'FAIL'}")
    return 0 if ok else 1


def _truncation_horizons(cfg: bsde_mod.BsdeConfig) -> list:
    n = cfg.horizon
    dt = cfg.dt
    fractions = (0.25, 0.375, 0.5, 1.0)
    out = []
    for f in fractions:
        h = round(n * f / dt) * dt
        if h >= 4 * dt and h not in out:
            out.append(h)
    return out


def cmd_solve_bsde(exp: Experiment, args, solution=None):
    cfg = exp.bsde_config
    if solution is None:
        solution = bsde_mod.solve_truncated(
            exp.space, exp.problem, exp.x0, cfg, exp.seed, workers=args.workers
        )
    study = bsde_mod.truncation_study(
        exp.space, exp.problem, exp.x0, _truncation_horizons(cfg), cfg, exp.seed,
        workers=args.workers,
    )
    _write_json(exp.output_dir / "bsde_solution.json", solution.to_json(), exp)
    rows = [
        [float(h), float(v), float(d), float(c)]
        for h, v, d, c in zip(study.horizons, study.values, study.diffs, study.certificate_curve)
    ]
    rows.append([study.reference_horizon, study.reference_value, 0.0, float(solution.certificate)])
    _write_csv(
        exp.output_dir / "truncation_study.csv",
        ["horizon", "value", "abs_diff_to_reference", "certificate"],
        rows,
        exp,
    )
    slope = "n/a (noise floor)" if study.degenerate else f"{study.slope:.4f}"
    print(
        f"value at start = {solution.y0:.6f} (se {solution.se:.2e}); truncation "
        f"certificate {solution.certificate:.3e}; fitted decay slope {slope} "
        f"(discount {exp.problem.discount:g})"
    )
    return 0, solution


def cmd_verify_hjb(exp: Experiment, args, solution=None) -> int:
    cfg = exp.bsde_config
    t_check = 10 * cfg.dt
    report = bsde_mod.verify_mild_hjb(
        exp.space,
        exp.problem,
        cfg,
        exp.x0,
        t_check,
        exp.seed,
        solution=solution,
        probes=16,
        integral_paths=min(2048, cfg.paths),
        workers=args.workers,
    )
    _write_json(
        exp.output_dir / "hjb_verdict.json",
        {
            "residual": report.residual,
            "tolerance": report.tolerance,
            "lhs": report.lhs,
            "rhs": report.rhs,
            "passed": report.passed,
            "t_check": t_check,
        },
        exp,
    )
    print(
        f"fixed-point residual {report.residual:.4e} vs tolerance {report.tolerance:.4e} "
        f"-> {'pass' if report.passed else 'FAIL'}"
    )
    return 0 if report.passed else 1


def _candidate_controls(problem: ControlProblem) -> list:
    lo = np.asarray(problem.controls.lo)
    hi = np.asarray(problem.controls.hi)
    return [list(lo + f * (hi - lo)) for f in (0.0, 0.25, 0.5, 0.75, 1.0)]


def cmd_synthesize(exp: Experiment, args, solution=None) -> int:
    cfg = exp.bsde_config
    if solution is None:
        solution = bsde_mod.solve_truncated(
            exp.space, exp.problem, exp.x0, cfg, exp.seed, workers=args.workers
        )
    paths = args.paths or cfg.paths
    report = control_mod.fundamental_relation_check(
        exp.space,
        exp.problem,
        solution,
        exp.x0,
        _candidate_controls(exp.problem),
        exp.scheme_horizon,
        exp.scheme_dt,
        paths,
        seed=derive_seed(exp.seed, "synthesize"),
        workers=args.workers,
    )
    rows = [
        [r.name, r.cost.estimate, r.cost.std_error, r.cost.tail_bound, "candidate"]
        for r in report.rows
    ]
    fb = report.feedback_row
    rows.append([fb.name, fb.cost.estimate, fb.cost.std_error, fb.cost.tail_bound, "feedback"])
    _write_csv(
        exp.output_dir / "cost_report.csv",
        ["policy", "cost", "std_error", "tail_bound", "kind"],
        rows,
        exp,
    )
    gir = control_mod.girsanov_check(
        exp.space,
        exp.problem,
        _candidate_controls(exp.problem)[1],
        exp.x0,
        min(4.0, exp.scheme_horizon),
        exp.scheme_dt,
        paths,
        seed=derive_seed(exp.seed, "girsanov"),
        workers=args.workers,
    )
    _write_json(
        exp.output_dir / "synthesis_verdict.json",
        {
            "value": report.value,
            "epsilon": report.epsilon,
            "value_inequality": report.value_inequality,
            "feedback_optimality": report.feedback_optimality,
            "feedback_cost": fb.cost.estimate,
            "best_candidate_cost": report.best_candidate().cost.estimate,
            "girsanov_mean_weight": gir.mean_weight,
            "girsanov_unit_mean_ok": gir.unit_mean_ok,
            "girsanov_reweighting_ok": gir.reweighting_ok,
            "passed": report.passed and gir.passed,
        },
        exp,
    )
    print(
        f"value {report.value:.6f}; best candidate {report.best_candidate().cost.estimate:.6f}; "
        f"feedback {fb.cost.estimate:.6f}; eps {report.epsilon:.2e}; "
        f"inequality {'pass' if report.value_inequality else 'FAIL'}, "
        f"feedback optimality {'pass' if report.feedback_optimality else 'FAIL'}, "
        f"measure change {'pass' if gir.passed else 'FAIL'}"
    )
    return 0 if (report.passed and gir.passed) else 1


def cmd_all(exp: Experiment, args) -> int:
    statuses = {}
    statuses["kernel_check"] = cmd_kernel_check(exp, args)
    statuses["fit"] = cmd_fit(exp, args)
    statuses["simulate"] = cmd_simulate(exp, args)
    statuses["oracle_compare"] = cmd_oracle_compare(exp, args)
    code, solution = cmd_solve_bsde(exp, args)
    statuses["solve_bsde"] = code
    statuses["verify_hjb"] = cmd_verify_hjb(exp, args, solution=solution)
    statuses["synthesize"] = cmd_synthesize(exp, args, solution=solution)
    passed = all(v == 0 for v in statuses.values())
    _write_json(
        exp.output_dir / "verdicts.json",
        {"stages": {k: ("pass" if v == 0 else "fail") for k, v in statuses.items()}, "passed": passed},
        exp,
    )
    print("pipeline:", "pass" if passed else "FAIL")
    return 0 if passed else 1


COMMANDS = {
    "kernel-check": cmd_kernel_check,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "oracle-compare": cmd_oracle_compare,
    "verify-hjb": cmd_verify_hjb,
    "synthesize": cmd_synthesize,
    "all": cmd_all,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="volterra-control",
        description="simulation and optimal control of completely monotone memory equations",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "solve-bsde"]:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="path to a JSON experiment configuration")
        p.add_argument("--scenario", choices=["demo", "constant", "zero"], help="shipped configuration")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--tolerance", type=float, default=None)
        p.add_argument("--states", action="store_true", help="include state columns in CSV output")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.config is not None and args.scenario is not None:
            raise ConfigError("pass either --config or --scenario, not both")
        if args.config is not None:
            with open(args.config) as fh:
                config = json.load(fh)
        elif args.scenario is not None:
            config = scenario_config(args.scenario)
        else:
            raise ConfigError("one of --config or --scenario is required")
        exp = build_experiment(
            config,
            overrides={"seed": args.seed, "paths": args.paths, "output_dir": args.out},
        )
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2

    if args.command == "solve-bsde":
        code, _ = cmd_solve_bsde(exp, args)
        return code
    return COMMANDS[args.command](exp, args)


if __name__ == "__main__":
    sys.exit(main())
