"""Pointwise minimized control Hamiltonian.

For an output value u and a row vector z the Hamiltonian is

    psi(u, z) = inf over gamma in U of [ ell(u, gamma) + z . r(u, gamma) ]

computed by dense grid search over the control box followed by
coordinate-wise golden-section refinement around the best grid point.
The function need not be convex in gamma, which is why the grid comes
first; ties are broken toward the lexicographically smallest control so
the selected minimizer is deterministic even on flat landscapes.

All routines have batch variants vectorized over a leading sample axis;
those are what the simulation and regression loops call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import ControlProblem

_INV_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class HamiltonianEval:
    """Minimized value, the minimizer, and the grid-to-refined improvement."""

    value: float
    minimizer: np.ndarray
    gap: float


def _objective(problem: ControlProblem, u: np.ndarray, z: np.ndarray, gamma: np.ndarray):
    cost = problem.running_cost(u, gamma)
    coupling = np.sum(z * problem.control_drift(u, gamma), axis=-1)
    return cost + coupling


def _grid_points(controls) -> np.ndarray:
    axes = [controls.axis(i) for i in range(controls.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def minimize_hamiltonian_batch(problem: ControlProblem, u: np.ndarray, z: np.ndarray):
    """Batched minimization.

    u has shape (P, d) and z shape (P, m); returns (values (P,),
    minimizers (P, q), gaps (P,)).
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    z = np.atleast_2d(np.asarray(z, dtype=float))
    n = u.shape[0]
    controls = problem.controls
    q = controls.dim

    # grid points are enumerated in lexicographic order; argmin takes the
    # first (= smallest) optimum, so ties break deterministically.  The
    # whole grid is evaluated by broadcasting, chunked to bound memory.
    grid = _grid_points(controls)
    n_grid = grid.shape[0]
    chunk = max(1, int(8_000_000 // max(n, 1)))
    best_val = np.full(n, np.inf)
    best_idx = np.zeros(n, dtype=np.intp)
    u_b = u[:, None, :]
    z_b = z[:, None, :]
    for start in range(0, n_grid, chunk):
        pts = grid[start : start + chunk]
        cost = problem.running_cost(u_b, pts[None, :, :])  # (n or 1, chunk)
        r_vals = problem.control_drift(u_b, pts[None, :, :])  # (n or 1, chunk, m)
        if r_vals.shape[0] == 1:
            coupling = z @ r_vals[0].T  # state-independent drift: one GEMM
        else:
            coupling = np.einsum("pm,pgm->pg", z, r_vals)
        vals = np.broadcast_to(cost, (n, pts.shape[0])) + coupling
        idx = np.argmin(vals, axis=1)
        cand = vals[np.arange(n), idx]
        better = cand < best_val
        best_val = np.where(better, cand, best_val)
        best_idx = np.where(better, idx + start, best_idx)
    best_gamma = grid[best_idx].copy()

    grid_val = best_val.copy()
    if controls.refinements > 0:
        for ax in range(q):
            spacing = (controls.hi[ax] - controls.lo[ax]) / (controls.resolution - 1)
            lo_b = np.maximum(best_gamma[:, ax] - spacing, controls.lo[ax])
            hi_b = np.minimum(best_gamma[:, ax] + spacing, controls.hi[ax])

            def eval_at(pos):
                gamma = best_gamma.copy()
                gamma[:, ax] = pos
                return _objective(problem, u, z, gamma)

            c = hi_b - _INV_GOLDEN * (hi_b - lo_b)
            d = lo_b + _INV_GOLDEN * (hi_b - lo_b)
            fc, fd = eval_at(c), eval_at(d)
            for _ in range(controls.refinements):
                left = fc < fd
                hi_b = np.where(left, d, hi_b)
                lo_b = np.where(left, lo_b, c)
                c_new = hi_b - _INV_GOLDEN * (hi_b - lo_b)
                d_new = lo_b + _INV_GOLDEN * (hi_b - lo_b)
                # one fresh evaluation per iteration; the surviving interior
                # point is reused
                c, d = np.where(left, c_new, d), np.where(left, c, d_new)
                f_new = eval_at(np.where(left, c, d))
                fc, fd = np.where(left, f_new, fd), np.where(left, fc, f_new)
            mid = 0.5 * (lo_b + hi_b)
            f_mid = eval_at(mid)
            improve = f_mid < best_val
            best_gamma[:, ax] = np.where(improve, mid, best_gamma[:, ax])
            best_val = np.where(improve, f_mid, best_val)

    return best_val, best_gamma, grid_val - best_val


def minimize_hamiltonian(problem: ControlProblem, u, z) -> HamiltonianEval:
    """Scalar wrapper around the batched minimizer."""
    u = np.atleast_1d(np.asarray(u, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    val, gamma, gap = minimize_hamiltonian_batch(problem, u[None, :], z[None, :])
    return HamiltonianEval(value=float(val[0]), minimizer=gamma[0], gap=float(gap[0]))


def select_control(problem: ControlProblem, u, z) -> np.ndarray:
    """The minimizing control alone (deterministic under ties)."""
    return minimize_hamiltonian(problem, u, z).minimizer


def select_control_batch(problem: ControlProblem, u: np.ndarray, z: np.ndarray) -> np.ndarray:
    return minimize_hamiltonian_batch(problem, u, z)[1]


@dataclass(frozen=True)
class HamiltonianConstants:
    """Sampled Lipschitz-in-z constant and bound at z = 0.

    Both are certified against the structural bounds: the z-slope can
    never exceed the uniform bound on r, and the value at z = 0 can never
    exceed the uniform bound on the running cost.
    """

    z_lipschitz: float
    zero_bound: float


def hamiltonian_constants(
    problem: ControlProblem, outputs: np.ndarray, zs: np.ndarray
) -> HamiltonianConstants:
    """Estimate (z-Lipschitz constant, sup |psi(., 0)|) from samples.

    ``outputs`` has shape (S, d) and ``zs`` shape (S2, m); all output/z
    pairs are combined.  Raises if a sampled value exceeds its structural
    certificate, which would indicate a minimizer failure.
    """
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    zs = np.atleast_2d(np.asarray(zs, dtype=float))
    if outputs.size == 0 or zs.size == 0:
        raise ValueError("need non-empty samples")

    m = zs.shape[1]
    zero = np.zeros((outputs.shape[0], m))
    psi_zero, _, _ = minimize_hamiltonian_batch(problem, outputs, zero)
    zero_bound = float(np.max(np.abs(psi_zero)))

    lip = 0.0
    for i in range(zs.shape[0]):
        zi = np.broadcast_to(zs[i], (outputs.shape[0], m))
        psi_i, _, _ = minimize_hamiltonian_batch(problem, outputs, zi)
        for j in range(i + 1, zs.shape[0]):
            dz = float(np.linalg.norm(zs[i] - zs[j]))
            if dz < 1e-14:
                continue
            zj = np.broadcast_to(zs[j], (outputs.shape[0], m))
            psi_j, _, _ = minimize_hamiltonian_batch(problem, outputs, zj)
            lip = max(lip, float(np.max(np.abs(psi_i - psi_j))) / dz)

    slack = 1e-7
    if lip > problem.r_bound * (1.0 + 1e-6) + slack:
        raise ValueError(
            f"sampled z-slope {lip:g} exceeds the structural bound {problem.r_bound:g}"
        )
    if zero_bound > problem.ell_bound * (1.0 + 1e-6) + slack:
        raise ValueError(
            f"sampled |psi(.,0)| {zero_bound:g} exceeds the cost bound {problem.ell_bound:g}"
        )
    return HamiltonianConstants(z_lipschitz=lip, zero_bound=zero_bound)
