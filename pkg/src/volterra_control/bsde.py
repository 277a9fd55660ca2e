"""Discounted value functions by finite-horizon regression Monte Carlo.

The infinite-horizon discounted pair (Y, Z) solving

    dY = (discount * Y - psi(u, Z)) dt + Z dW,   Y bounded

is approximated by the zero-terminal finite-horizon problem on [0, n];
truncation costs at most (M / discount) * exp(-discount * n) where M
bounds |psi(., 0)|.  The backward recursion regresses conditional
expectations on polynomial features of the lifted state:

    Z_k  ~ regression of (Y_{k+1} - E^[Y_{k+1} | x_k]) dW_k / dt
    Y_k  = (E^[Y_{k+1} | x_k] + dt * psi(u_k, Z_k)) / (1 + discount dt)

with the conditional mean subtracted from the Z target (an exact-mean
variance reduction; without it the estimator noise scales like Y / sqrt(dt)
and drowns the signal).  Values are clamped to [-M/discount, M/discount];
the pre-clamp violation rate is reported.  Default features are the output
u = J x and the measure-weighted state sum (the running convolution
value), the two physically meaningful linear functionals of the state.

The initial value Y_0 is the value function at the starting state; the
module also verifies the dynamic-programming structure (stored slice
values against fresh solves at visited states) and the semigroup
fixed-point identity of the value function by nested Monte Carlo.
"""

from __future__ import annotations

import functools
import itertools
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .forward import PathBundle, simulate
from .hamiltonian import HamiltonianConstants, hamiltonian_constants, minimize_hamiltonian_batch
from .problem import ControlProblem
from .rng import derive_seed
from .statespace import LiftedSpace, output_map


class RegressionError(RuntimeError):
    """Raised when a slice regression is rank-deficient or under-sampled."""


FEATURE_SETS = ("output_conv", "output_conv_raw")


@dataclass(frozen=True)
class BsdeConfig:
    """Solver configuration.

    ``horizon`` is the truncation time n (recommended n * discount >= 3 so
    the truncation certificate is small); ``basis_degree`` the total
    polynomial degree over the feature vector; ``features`` one of
    ``output_conv`` (u and the measure-weighted state sum) or
    ``output_conv_raw`` (additionally each raw state coordinate, suitable
    for small lifts only).
    """

    horizon: float
    dt: float
    paths: int
    basis_degree: int = 2
    features: str = "output_conv"
    clamp: bool = True

    def __post_init__(self):
        if self.horizon <= 0.0 or self.dt <= 0.0:
            raise ValueError("horizon and dt must be positive")
        if self.paths < 2:
            raise ValueError("need at least two paths")
        if self.basis_degree < 1:
            raise ValueError("basis degree must be at least 1")
        if self.features not in FEATURE_SETS:
            raise ValueError(f"features must be one of {FEATURE_SETS}")

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "dt": self.dt,
            "paths": self.paths,
            "basis_degree": self.basis_degree,
            "features": self.features,
            "clamp": self.clamp,
        }


def feature_matrix(space: LiftedSpace, config: BsdeConfig, states: np.ndarray) -> np.ndarray:
    """Raw features of states (..., N, d) -> (..., F)."""
    u = output_map(space, states)
    conv = np.einsum("...nd,n->...d", states, space.weights)
    feats = [u, conv]
    if config.features == "output_conv_raw":
        feats.append(states.reshape(states.shape[:-2] + (-1,)))
    return np.concatenate(feats, axis=-1)


@functools.lru_cache(maxsize=None)
def _monomial_exponents(n_feats: int, degree: int):
    """All exponent multi-indices with 1 <= total degree <= degree."""
    out = []
    for deg in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(n_feats), deg):
            out.append(tuple(np.bincount(combo, minlength=n_feats)))
    return tuple(out)


def basis_dimension(n_feats: int, degree: int) -> int:
    return 1 + len(_monomial_exponents(n_feats, degree))


@dataclass(eq=False)
class SliceRegression:
    """Standardization and regression coefficients of one time slice."""

    mean: np.ndarray
    scale: np.ndarray
    kept: np.ndarray
    coef_y: np.ndarray
    coef_z: np.ndarray  # (n_basis, m)

    def design(self, feats: np.ndarray, degree: int) -> np.ndarray:
        std = (feats[..., self.kept] - self.mean) / self.scale
        n_kept = std.shape[-1]
        powers = []
        for f in range(n_kept):
            base = std[..., f]
            per = [None, base]
            for _ in range(degree - 1):
                per.append(per[-1] * base)
            powers.append(per)
        cols = [np.ones(std.shape[:-1])]
        for exps in _monomial_exponents(n_kept, degree):
            col = None
            for f, e in enumerate(exps):
                if e:
                    col = powers[f][e] if col is None else col * powers[f][e]
            cols.append(col)
        return np.stack(cols, axis=-1)

    def to_json(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "kept": self.kept.astype(int).tolist(),
            "coef_y": self.coef_y.tolist(),
            "coef_z": self.coef_z.tolist(),
        }


def _fit_slice(feats: np.ndarray, y_next: np.ndarray, dw_k: np.ndarray, dt: float, degree: int):
    """Least-squares fits of one slice; returns (record, yhat, zhat).

    The martingale target is centered by the fitted conditional mean
    before regression, which leaves its expectation unchanged and removes
    the O(Y / sqrt(dt)) noise term.
    """
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    kept = scale > 1e-10 * (1.0 + np.abs(mean))
    # near the start all features can be driven by the same few noise
    # increments; drop exact duplicates so the design keeps full rank
    std_all = np.where(kept, (feats - mean) / np.where(kept, scale, 1.0), 0.0)
    cols = np.flatnonzero(kept)
    for pos, j in enumerate(cols):
        for i in cols[:pos]:
            if not kept[i]:
                continue
            corr = float(np.mean(std_all[:, i] * std_all[:, j]))
            if abs(corr) > 1.0 - 1e-9:
                kept[j] = False
                break
    record = SliceRegression(
        mean=mean[kept],
        scale=scale[kept],
        kept=kept,
        coef_y=np.zeros(0),
        coef_z=np.zeros((0, dw_k.shape[1])),
    )
    design = record.design(feats, degree)
    n_cols = design.shape[1]
    if feats.shape[0] < n_cols:
        raise RegressionError(f"{feats.shape[0]} paths cannot identify {n_cols} coefficients")
    coef_y, _, rank, sing = np.linalg.lstsq(design, y_next, rcond=None)
    if rank < n_cols:
        cond = float(sing[0] / sing[-1]) if sing[-1] > 0 else np.inf
        raise RegressionError(f"rank-deficient slice regression (cond={cond:.3e})")
    yhat = design @ coef_y
    ztarget = (y_next - yhat)[:, None] * (dw_k / dt)
    coef_z, _, _, _ = np.linalg.lstsq(design, ztarget, rcond=None)
    record.coef_y = coef_y
    record.coef_z = coef_z
    return record, yhat, design @ coef_z


@dataclass(eq=False)
class BsdeSolution:
    """Trained backward solution.

    ``y0`` is the value at the initial state; ``certificate`` the
    truncation bound (M / discount) exp(-discount * horizon) built from
    the sampled Hamiltonian constants; ``violation_fraction`` the share of
    (path, slice) values exceeding the bound before clamping.  States and
    slice values are retained when ``store_paths`` so consistency checks
    can restart solves from visited states.
    """

    y0: float
    se: float
    config: BsdeConfig
    seed: int
    grid: np.ndarray
    slices: list
    constants: HamiltonianConstants
    clamp_bound: float
    certificate: float
    violation_fraction: float
    x0: np.ndarray
    space: LiftedSpace
    states: np.ndarray | None = None
    y_values: np.ndarray | None = None

    @property
    def n_slices(self) -> int:
        return len(self.slices)

    def to_json(self) -> dict:
        return {
            "y0": self.y0,
            "std_error": self.se,
            "seed": int(self.seed),
            "config": self.config.to_json(),
            "z_lipschitz": self.constants.z_lipschitz,
            "psi_zero_bound": self.constants.zero_bound,
            "clamp_bound": self.clamp_bound,
            "truncation_certificate": self.certificate,
            "violation_fraction": self.violation_fraction,
            "slices": [s.to_json() for s in self.slices],
        }


def _sample_constants(
    space: LiftedSpace, problem: ControlProblem, bundle: PathBundle, seed: int
) -> HamiltonianConstants:
    rng = np.random.default_rng(derive_seed(seed, "psi-samples"))
    p_total, k_total = bundle.states.shape[0], bundle.states.shape[1]
    take = min(256, p_total * k_total)
    p_idx = rng.integers(0, p_total, size=take)
    k_idx = rng.integers(0, k_total, size=take)
    outputs = output_map(space, bundle.states[p_idx, k_idx])
    zs = rng.normal(size=(6, problem.noise_dim))
    return hamiltonian_constants(problem, outputs, zs)


def solve_truncated(
    space: LiftedSpace,
    problem: ControlProblem,
    x0: np.ndarray,
    config: BsdeConfig,
    seed: int,
    workers: int = 1,
    store_paths: bool = True,
) -> BsdeSolution:
    """Simulate the uncontrolled forward equation and run the backward pass."""
    if config.horizon * problem.discount < 3.0:
        warnings.warn(
            "horizon * discount < 3: the truncation certificate is loose", stacklevel=2
        )
    n_feats = 2 * space.dim + (space.n_nodes * space.dim if config.features == "output_conv_raw" else 0)
    n_basis = basis_dimension(n_feats, config.basis_degree)
    if config.paths < 10 * n_basis:
        raise RegressionError(
            f"{config.paths} paths < 10 x basis dimension {n_basis}; increase paths"
        )

    bundle = simulate(
        space,
        problem,
        None,
        x0,
        config.horizon,
        config.dt,
        config.paths,
        seed=derive_seed(seed, "bsde-forward"),
        workers=workers,
        store_states=True,
        store_increments=True,
    )
    constants = _sample_constants(space, problem, bundle, seed)
    lam = problem.discount
    bound = constants.zero_bound / lam if constants.zero_bound > 0.0 else np.inf
    dt = config.dt
    k_steps = bundle.n_steps
    p_total = config.paths
    # time-major copies: the backward pass walks slices, which are strided
    # (and cache-hostile) in the path-major bundle layout
    states_t = np.ascontiguousarray(bundle.states.transpose(1, 0, 2, 3))
    increments_t = np.ascontiguousarray(bundle.increments.transpose(1, 0, 2))

    y_next = np.zeros(p_total)
    y_values = np.empty((p_total, k_steps + 1)) if store_paths else None
    if store_paths:
        y_values[:, k_steps] = 0.0
    slices: list[SliceRegression | None] = [None] * k_steps
    violations = 0
    se = 0.0

    for k in range(k_steps - 1, -1, -1):
        feats = feature_matrix(space, config, states_t[k])
        record, yhat, zhat = _fit_slice(
            feats, y_next, increments_t[k], dt, config.basis_degree
        )
        u_k = feats[:, : space.dim]  # leading feature block is u = J x
        psi_k, _, _ = minimize_hamiltonian_batch(problem, u_k, zhat)
        y_pre = (yhat + dt * psi_k) / (1.0 + lam * dt)
        violations += int(np.count_nonzero(np.abs(y_pre) > bound * (1.0 + 1e-12)))
        y_k = np.clip(y_pre, -bound, bound) if config.clamp else y_pre
        if k == 0:
            se = float(np.std(y_next) / ((1.0 + lam * dt) * np.sqrt(p_total)))
        y_next = y_k
        slices[k] = record
        if store_paths:
            y_values[:, k] = y_k

    y0 = float(np.mean(y_next))
    certificate = (constants.zero_bound / lam) * np.exp(-lam * config.horizon)
    return BsdeSolution(
        y0=y0,
        se=se,
        config=config,
        seed=int(seed),
        grid=bundle.grid,
        slices=slices,
        constants=constants,
        clamp_bound=float(bound),
        certificate=float(certificate),
        violation_fraction=violations / float(p_total * k_steps),
        x0=np.asarray(x0, dtype=float),
        space=space,
        states=bundle.states if store_paths else None,
        y_values=y_values,
    )


def value(
    space: LiftedSpace,
    problem: ControlProblem,
    x: np.ndarray,
    config: BsdeConfig,
    seed: int,
    workers: int = 1,
) -> float:
    """Value function at x: initial value of a fresh truncated solve."""
    sol = solve_truncated(space, problem, x, config, seed, workers=workers, store_paths=False)
    return sol.y0


def z_estimate(solution: BsdeSolution, k: int, x: np.ndarray) -> np.ndarray:
    """Evaluate the slice-k martingale-integrand regression at state(s) x.

    x may be one state (N, d) or a batch (..., N, d); returns (..., m).
    """
    if not 0 <= k < solution.n_slices:
        raise IndexError(f"slice {k} out of range [0, {solution.n_slices})")
    record = solution.slices[k]
    feats = feature_matrix(solution.space, solution.config, np.asarray(x, dtype=float))
    return record.design(feats, solution.config.basis_degree) @ record.coef_z


def y_estimate(solution: BsdeSolution, k: int, x: np.ndarray) -> np.ndarray:
    """Evaluate the slice-k conditional-expectation regression at x."""
    if not 0 <= k < solution.n_slices:
        raise IndexError(f"slice {k} out of range [0, {solution.n_slices})")
    record = solution.slices[k]
    feats = feature_matrix(solution.space, solution.config, np.asarray(x, dtype=float))
    return record.design(feats, solution.config.basis_degree) @ record.coef_y


def picard_resweep(solution: BsdeSolution, problem: ControlProblem) -> float:
    """One frozen-Z backward sweep over the stored paths.

    Re-derives the slice values using the trained Z regressions instead of
    in-pass targets; on small problems the returned initial value should
    agree with ``solution.y0`` up to regression noise, which cross-checks
    the in-pass estimator.
    """
    if solution.states is None:
        raise RegressionError("resweep needs stored paths")
    space, config = solution.space, solution.config
    lam = problem.discount
    dt = config.dt
    k_steps = solution.n_slices
    p_total = solution.states.shape[0]
    y_next = np.zeros(p_total)
    for k in range(k_steps - 1, -1, -1):
        record = solution.slices[k]
        feats = feature_matrix(space, config, solution.states[:, k])
        design = record.design(feats, config.basis_degree)
        coef_y, _, _, _ = np.linalg.lstsq(design, y_next, rcond=None)
        yhat = design @ coef_y
        zhat = design @ record.coef_z
        u_k = output_map(space, solution.states[:, k])
        psi_k, _, _ = minimize_hamiltonian_batch(problem, u_k, zhat)
        y_pre = (yhat + dt * psi_k) / (1.0 + lam * dt)
        y_next = np.clip(y_pre, -solution.clamp_bound, solution.clamp_bound) if config.clamp else y_pre
    return float(np.mean(y_next))


# ---------------------------------------------------------------------------
# Truncation-rate study
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class TruncationReport:
    """Fitted decay of the truncation error against the horizon."""

    horizons: np.ndarray
    values: np.ndarray
    reference_horizon: float
    reference_value: float
    diffs: np.ndarray
    slope: float | None
    certificate_curve: np.ndarray
    noise_floor: float
    degenerate: bool


def truncation_study(
    space: LiftedSpace,
    problem: ControlProblem,
    x: np.ndarray,
    horizons,
    config: BsdeConfig,
    seed: int,
    workers: int = 1,
) -> TruncationReport:
    """Solve at several horizons (same seed: common noise) and fit the decay.

    The per-horizon values share path prefixes, so their differences
    cancel most Monte Carlo noise and isolate the truncation effect.  The
    slope of log |Y0(n) - Y0(n_max)| against n estimates the decay rate;
    when the differences sink below three combined standard errors the
    fit is flagged degenerate.
    """
    horizons = sorted(float(h) for h in horizons)
    if len(horizons) < 3:
        raise ValueError("need at least three horizons")
    solutions = []
    for h in horizons:
        cfg = replace(config, horizon=h)
        solutions.append(
            solve_truncated(space, problem, x, cfg, seed, workers=workers, store_paths=False)
        )
    ref = solutions[-1]
    lower = solutions[:-1]
    hs = np.array(horizons[:-1])
    values = np.array([s.y0 for s in lower])
    diffs = np.abs(values - ref.y0)
    noise_floor = 3.0 * float(np.sqrt(np.mean([s.se**2 for s in solutions])))
    degenerate = bool(np.any(diffs <= noise_floor))
    slope = None
    if not degenerate:
        slope = float(np.polyfit(hs, np.log(diffs), 1)[0])
    lam = problem.discount
    certificate_curve = (ref.constants.zero_bound / lam) * np.exp(-lam * hs)
    return TruncationReport(
        horizons=hs,
        values=values,
        reference_horizon=horizons[-1],
        reference_value=ref.y0,
        diffs=diffs,
        slope=slope,
        certificate_curve=certificate_curve,
        noise_floor=noise_floor,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Consistency diagnostics
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MarkovReport:
    rows: list
    max_discrepancy: float
    passed: bool


def markov_consistency(
    space: LiftedSpace,
    problem: ControlProblem,
    solution: BsdeSolution,
    probes: int,
    seed: int,
    workers: int = 1,
) -> MarkovReport:
    """Stored slice values against fresh solves restarted at visited states.

    For interior probe slices the stored value approximates the value
    function with the remaining horizon; a fresh full-horizon solve at the
    same state must agree within Monte Carlo noise plus both truncation
    certificates.
    """
    if solution.states is None or solution.y_values is None:
        raise RegressionError("markov consistency needs stored paths")
    rng = np.random.default_rng(derive_seed(seed, "markov-probes"))
    k_steps = solution.n_slices
    lam = problem.discount
    rows = []
    passed = True
    worst = 0.0
    for i in range(probes):
        k = int(rng.integers(k_steps // 5, max(k_steps // 2, k_steps // 5 + 1)))
        p = int(rng.integers(0, solution.states.shape[0]))
        x_probe = solution.states[p, k]
        stored = float(solution.y_values[p, k])
        fresh = solve_truncated(
            space,
            problem,
            x_probe,
            solution.config,
            derive_seed(seed, f"markov-fresh-{i}"),
            workers=workers,
            store_paths=False,
        )
        # certificates with the scheme's own discount factor (1 + lam dt)^-j,
        # which the discrete recursion realizes instead of exp(-lam t)
        step_disc = 1.0 + lam * solution.config.dt
        cert = (solution.constants.zero_bound / lam) * (
            step_disc ** -(k_steps - k) + step_disc**-k_steps
        )
        tol = 3.0 * (fresh.se + solution.se) + cert
        gap = abs(stored - fresh.y0)
        worst = max(worst, gap)
        ok = gap <= tol
        passed = passed and ok
        rows.append(
            {"slice": k, "path": p, "stored": stored, "fresh": fresh.y0, "gap": gap, "tol": tol, "ok": ok}
        )
    return MarkovReport(rows=rows, max_discrepancy=worst, passed=passed)


@dataclass(eq=False)
class HjbReport:
    residual: float
    tolerance: float
    passed: bool
    lhs: float
    rhs: float
    endpoint_term: float
    integral_term: float
    std_error: float


def verify_mild_hjb(
    space: LiftedSpace,
    problem: ControlProblem,
    config: BsdeConfig,
    x0: np.ndarray,
    t_check: float,
    seed: int,
    solution: BsdeSolution | None = None,
    probes: int = 16,
    integral_paths: int = 2048,
    workers: int = 1,
) -> HjbReport:
    """Monte Carlo check of the semigroup fixed-point identity of the value.

    Over a short window [0, T]: the value at x equals the discounted
    expected value at the endpoint state plus the discounted running
    Hamiltonian along the path, the latter evaluated at the trained
    martingale-integrand estimates.  Endpoint values come from nested
    fresh solves at ``probes`` sampled endpoint states.  The residual is
    compared against three combined standard errors plus the truncation
    certificates.
    """
    k_check = round(t_check / config.dt)
    if k_check < 1 or abs(k_check * config.dt - t_check) > 1e-9:
        raise ValueError("t_check must be a positive multiple of dt")
    if solution is None:
        solution = solve_truncated(space, problem, x0, config, seed, workers=workers)
    if k_check >= solution.n_slices:
        raise ValueError("t_check must be shorter than the solve horizon")
    lam = problem.discount
    dt = config.dt

    bundle = simulate(
        space,
        problem,
        None,
        x0,
        t_check,
        dt,
        integral_paths,
        seed=derive_seed(seed, "hjb-window"),
        workers=workers,
        store_states=True,
        store_increments=False,
    )
    discount_w = (1.0 + lam * dt) ** -(np.arange(1, k_check + 1))
    running = np.zeros(integral_paths)
    for k in range(k_check):
        states_k = bundle.states[:, k]
        u_k = output_map(space, states_k)
        z_k = z_estimate(solution, k, states_k)
        psi_k, _, _ = minimize_hamiltonian_batch(problem, u_k, z_k)
        running += discount_w[k] * psi_k * dt

    probes = min(probes, integral_paths)
    nested_vals = np.empty(probes)
    nested_ses = np.empty(probes)
    for j in range(probes):
        nested = solve_truncated(
            space,
            problem,
            bundle.states[j, k_check],
            config,
            derive_seed(seed, f"hjb-nested-{j}"),
            workers=workers,
            store_paths=False,
        )
        nested_vals[j] = nested.y0
        nested_ses[j] = nested.se

    w_end = float((1.0 + lam * dt) ** -k_check)
    endpoint_term = w_end * float(np.mean(nested_vals))
    integral_term = float(np.mean(running))
    rhs = endpoint_term + integral_term
    lhs = solution.y0
    residual = abs(lhs - rhs)

    se_int = float(np.std(running) / np.sqrt(integral_paths))
    se_end = w_end * float(np.std(nested_vals) / np.sqrt(probes))
    se_nested = w_end * float(np.sqrt(np.mean(nested_ses**2) / probes))
    combined = float(np.sqrt(solution.se**2 + se_int**2 + se_end**2 + se_nested**2))
    certs = w_end * solution.certificate + w_end * (
        solution.constants.zero_bound / lam
    ) * np.exp(-lam * (config.horizon - t_check))
    tolerance = 3.0 * combined + float(certs)
    return HjbReport(
        residual=residual,
        tolerance=tolerance,
        passed=residual <= tolerance,
        lhs=lhs,
        rhs=rhs,
        endpoint_term=endpoint_term,
        integral_term=integral_term,
        std_error=combined,
    )
