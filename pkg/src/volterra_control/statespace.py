"""Finite Markovian lift of the Volterra memory equation.

The memory state is the family ``x(t, kappa) = integral_{-inf}^t
exp(-kappa (t-s)) u(s) ds`` sampled at the nodes of a finite Bernstein
measure, so a lifted state is an array of shape ``(N, d)`` (one H-vector
per relaxation rate).  The coupling constraint

    sum_i nu_i (-kappa_i x_i + u) = A u

defines the output map ``u = J x`` and, with it, the generator
``(B x)_i = -kappa_i x_i + J x`` whose resolvent has an explicit
two-stage form (one d x d solve plus per-node scaling).  The module also
provides the weighted state norm, power-weight surrogate interpolation
norms, the lifting of pre-time-zero histories, the memory inner product
carried by the kernel, and the admissible smoothing-exponent pair for a
given singularity index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .kernels import BernsteinMeasure, DiscreteKernel, KernelError


class StateSpaceError(ValueError):
    """Raised for invalid lifted-space data or arguments."""


class LiftedSpace:
    """Finite lift: drift matrix A on H = R^d plus a Bernstein measure.

    The factorization of ``total_mass * I - A`` is cached at construction;
    it must exist (the total mass has to lie in the resolvent set of A),
    and the instance is immutable afterwards.
    """

    __slots__ = ("a_matrix", "measure", "nodes", "weights", "total_mass", "_mass_lu")

    def __init__(self, a_matrix, measure: BernsteinMeasure):
        a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise StateSpaceError("A must be a square matrix")
        if not np.all(np.isfinite(a)):
            raise StateSpaceError("A must be finite")
        if not isinstance(measure, BernsteinMeasure):
            raise StateSpaceError("measure must be a BernsteinMeasure")
        a.setflags(write=False)
        self.a_matrix = a
        self.measure = measure
        self.nodes = measure.nodes
        self.weights = measure.weights
        self.total_mass = measure.total_mass
        mass_matrix = self.total_mass * np.eye(self.dim) - a
        try:
            self._mass_lu = lu_factor(mass_matrix)
        except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
            raise StateSpaceError("total mass is not in the resolvent set of A") from exc
        if not np.all(np.isfinite(self._mass_lu[0])):
            raise StateSpaceError("total mass is not in the resolvent set of A")

    @classmethod
    def from_kernel(cls, a_matrix, kernel: DiscreteKernel) -> "LiftedSpace":
        return cls(a_matrix, kernel.measure)

    @property
    def dim(self) -> int:
        return self.a_matrix.shape[0]

    @property
    def n_nodes(self) -> int:
        return len(self.measure)

    def zero_state(self) -> np.ndarray:
        return np.zeros((self.n_nodes, self.dim))

    def check_state(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-2:] != (self.n_nodes, self.dim):
            raise StateSpaceError(
                f"state must have trailing shape ({self.n_nodes}, {self.dim}), got {x.shape}"
            )
        return x

    def mass_solve(self, rhs: np.ndarray) -> np.ndarray:
        """Solve (total_mass * I - A) y = rhs for rhs of shape (..., d)."""
        flat = rhs.reshape(-1, self.dim)
        out = lu_solve(self._mass_lu, flat.T).T
        return out.reshape(rhs.shape)

    def to_json(self) -> dict:
        return {
            "a_matrix": self.a_matrix.tolist(),
            "nodes": self.nodes.tolist(),
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "LiftedSpace":
        return cls(data["a_matrix"], BernsteinMeasure(data["nodes"], data["weights"]))

    def __repr__(self) -> str:
        return f"LiftedSpace(d={self.dim}, n_nodes={self.n_nodes}, mass={self.total_mass:.6g})"


def output_map(space: LiftedSpace, x) -> np.ndarray:
    """Output u = J x solving (total_mass * I - A) u = sum_i nu_i kappa_i x_i.

    Accepts batched states of shape (..., N, d) and returns (..., d).
    """
    x = space.check_state(x)
    rhs = np.einsum("...nd,n->...d", x, space.weights * space.nodes)
    return space.mass_solve(rhs)


def generator_apply(space: LiftedSpace, x) -> np.ndarray:
    """(B x)_i = -kappa_i x_i + J x, batched like ``output_map``."""
    x = space.check_state(x)
    u = output_map(space, x)
    return -space.nodes[:, None] * x + u[..., None, :]


def generator_matrix(space: LiftedSpace) -> np.ndarray:
    """Dense (N d) x (N d) matrix of the generator, for spectra and tests."""
    n, d = space.n_nodes, space.dim
    c = lu_solve(space._mass_lu, np.eye(d))  # (total_mass I - A)^{-1}
    mat = np.kron(np.diag(-space.nodes), np.eye(d))
    coupling = np.kron(
        np.repeat((space.weights * space.nodes)[None, :], n, axis=0), c
    )
    return mat + coupling


def resolvent(space: LiftedSpace, s: float, x, return_inner: bool = False):
    """Apply (s I - B)^{-1} by the explicit two-stage formula.

    Stage one solves the d x d system ``(s a_hat(s) I - A) w = sum_j nu_j
    kappa_j x_j / (s + kappa_j)``; stage two scales per node:
    ``y_i = (x_i + w) / (s + kappa_i)``.  The inner vector ``w`` equals
    ``J y`` and can be returned for diagnostics.
    """
    x = space.check_state(x)
    s = float(s)
    if np.any(s + space.nodes == 0.0):
        raise StateSpaceError("s collides with a relaxation rate")
    ahat = float((space.weights / (s + space.nodes)).sum())
    inner_rhs = np.einsum(
        "...nd,n->...d", x, space.weights * space.nodes / (s + space.nodes)
    )
    core = s * ahat * np.eye(space.dim) - space.a_matrix
    try:
        w = np.linalg.solve(core, inner_rhs[..., None]).squeeze(-1)
    except np.linalg.LinAlgError as exc:
        raise StateSpaceError(f"s={s} is outside the resolvent set") from exc
    y = (x + w[..., None, :]) / (s + space.nodes)[:, None]
    if return_inner:
        return y, w
    return y


def spectral_bound(space: LiftedSpace) -> float:
    """Largest real part of the generator spectrum."""
    try:
        eigs = np.linalg.eigvals(generator_matrix(space))
    except np.linalg.LinAlgError as exc:
        raise StateSpaceError("eigenvalue computation failed") from exc
    return float(eigs.real.max())


def state_norm(space: LiftedSpace, x) -> float | np.ndarray:
    """Weighted norm: ||x||^2 = sum_i (kappa_i + 1) nu_i |x_i|^2."""
    x = space.check_state(x)
    w = (space.nodes + 1.0) * space.weights
    sq = np.einsum("...nd,...nd,n->...", x, x, w)
    out = np.sqrt(sq)
    return float(out) if out.ndim == 0 else out


def interp_norm(space: LiftedSpace, rho: float, x) -> float | np.ndarray:
    """Power-weight surrogate for smoothness-graded norms.

    ||x||_rho^2 = sum_i (1 + kappa_i)^(2 rho) (kappa_i + 1) nu_i |x_i|^2;
    rho = 0 reduces exactly to ``state_norm``.  Diagnostic only, never
    used in dynamics.
    """
    if not (0.0 <= rho <= 1.0):
        raise StateSpaceError("rho must lie in [0, 1]")
    x = space.check_state(x)
    w = (1.0 + space.nodes) ** (2.0 * rho) * (space.nodes + 1.0) * space.weights
    sq = np.einsum("...nd,...nd,n->...", x, x, w)
    out = np.sqrt(sq)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Histories on the negative half-line
# ---------------------------------------------------------------------------


def _as_h_vector(c, name="value") -> np.ndarray:
    arr = np.atleast_1d(np.asarray(c, dtype=float))
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise StateSpaceError(f"{name} must be a finite vector")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ZeroHistory:
    """u0 identically zero on (-inf, 0]."""

    def envelope(self):
        return 0.0, 1.0, 0.0  # (M1, omega, M2)

    def value_at_zero(self, dim: int) -> np.ndarray:
        return np.zeros(dim)

    def to_json(self):
        return {"variant": "zero"}


class ExponentialHistory:
    """u0(t) = c * exp(rate * t) for t <= 0, rate > 0."""

    __slots__ = ("value", "rate")

    def __init__(self, value, rate: float):
        self.value = _as_h_vector(value)
        if rate <= 0.0:
            raise StateSpaceError("rate must be positive")
        self.rate = float(rate)

    def envelope(self):
        m1 = float(np.linalg.norm(self.value))
        return m1, self.rate, m1 * self.rate

    def value_at_zero(self, dim: int) -> np.ndarray:
        if self.value.size != dim:
            raise StateSpaceError("history dimension mismatch")
        return self.value.copy()

    def to_json(self):
        return {"variant": "exponential", "value": self.value.tolist(), "rate": self.rate}


class StepHistory:
    """u0 = c on [-width, 0], zero before."""

    __slots__ = ("value", "width")

    def __init__(self, value, width: float):
        self.value = _as_h_vector(value)
        if width <= 0.0:
            raise StateSpaceError("width must be positive")
        self.width = float(width)

    def envelope(self):
        m1 = float(np.linalg.norm(self.value))
        omega = 1.0 / self.width
        return m1 * np.e, omega, 0.0

    def value_at_zero(self, dim: int) -> np.ndarray:
        if self.value.size != dim:
            raise StateSpaceError("history dimension mismatch")
        return self.value.copy()

    def to_json(self):
        return {"variant": "step", "value": self.value.tolist(), "width": self.width}


class TabulatedHistory:
    """Piecewise-linear history on a grid of times <= 0 (zero before the grid).

    The grid must be strictly increasing and end at 0; values has shape
    (len(times), d).
    """

    __slots__ = ("times", "values")

    def __init__(self, times, values):
        times = np.asarray(times, dtype=float)
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if times.ndim != 1 or times.size < 2:
            raise StateSpaceError("need at least two grid times")
        if np.any(np.diff(times) <= 0.0):
            raise StateSpaceError("times must be strictly increasing")
        if times[-1] != 0.0:
            raise StateSpaceError("grid must end at t = 0")
        if np.any(times > 0.0):
            raise StateSpaceError("grid times must be <= 0")
        if values.shape[0] != times.size:
            raise StateSpaceError("values and times must align")
        times.setflags(write=False)
        values.setflags(write=False)
        self.times = times
        self.values = values

    def envelope(self):
        m1 = float(np.max(np.linalg.norm(self.values, axis=1)))
        omega = 1.0 / max(-float(self.times[0]), 1e-12)
        dt = self.times[-1] - self.times[-2]
        m2 = float(np.linalg.norm(self.values[-1] - self.values[-2])) / dt
        return m1 * np.e, omega, m2

    def value_at_zero(self, dim: int) -> np.ndarray:
        if self.values.shape[1] != dim:
            raise StateSpaceError("history dimension mismatch")
        return self.values[-1].copy()

    def to_json(self):
        return {
            "variant": "tabulated",
            "times": self.times.tolist(),
            "values": self.values.tolist(),
        }


HistoryDatum = ZeroHistory | ExponentialHistory | StepHistory | TabulatedHistory


def history_from_json(data: dict) -> HistoryDatum:
    variant = data.get("variant")
    if variant == "zero":
        return ZeroHistory()
    if variant == "exponential":
        return ExponentialHistory(data["value"], data["rate"])
    if variant == "step":
        return StepHistory(data["value"], data["width"])
    if variant == "tabulated":
        return TabulatedHistory(data["times"], data["values"])
    raise StateSpaceError(f"unknown history variant {variant!r}")


def _exp_weighted_cell(kappa: np.ndarray, t0: float, t1: float):
    """(I0, I1) with I0 = int_{t0}^{t1} e^(kappa s) ds and
    I1 = int_{t0}^{t1} (s - t0) e^(kappa s) ds, stable for small kappa*(t1-t0)."""
    delta = t1 - t0
    kd = kappa * delta
    top = np.exp(kappa * t1)
    small = np.abs(kd) < 1e-6
    kappa_safe = np.where(kappa == 0.0, 1.0, kappa)
    i0_exact = top * (-np.expm1(-kd)) / kappa_safe
    i1_exact = top * (kd + np.expm1(-kd)) / (kappa_safe * kappa_safe)
    i0_series = top * delta * (1.0 - kd / 2.0 + kd * kd / 6.0)
    i1_series = top * delta * delta * (0.5 - kd / 6.0 + kd * kd / 24.0)
    return np.where(small, i0_series, i0_exact), np.where(small, i1_series, i1_exact)


def lift_values(nodes: np.ndarray, history: HistoryDatum, dim: int) -> np.ndarray:
    """Q-values (int_{-inf}^0 e^(kappa s) u0(s) ds) at the given rates."""
    n = nodes.size
    if isinstance(history, ZeroHistory):
        return np.zeros((n, dim))
    if isinstance(history, ExponentialHistory):
        c = history.value_at_zero(dim)
        return c[None, :] / (nodes + history.rate)[:, None]
    if isinstance(history, StepHistory):
        c = history.value_at_zero(dim)
        kd = nodes * history.width
        with np.errstate(divide="ignore", invalid="ignore"):
            factor = np.where(nodes > 0.0, -np.expm1(-kd) / np.where(nodes > 0, nodes, 1.0), history.width)
        return factor[:, None] * c[None, :]
    if isinstance(history, TabulatedHistory):
        if history.values.shape[1] != dim:
            raise StateSpaceError("history dimension mismatch")
        out = np.zeros((n, dim))
        times, vals = history.times, history.values
        for j in range(times.size - 1):
            t0, t1 = float(times[j]), float(times[j + 1])
            a = vals[j]
            b = (vals[j + 1] - vals[j]) / (t1 - t0)
            i0, i1 = _exp_weighted_cell(nodes, t0, t1)
            out += i0[:, None] * a[None, :] + i1[:, None] * b[None, :]
        return out
    raise StateSpaceError(f"unknown history {type(history).__name__}")


def lift_history(space: LiftedSpace, history: HistoryDatum) -> np.ndarray:
    """Initial lifted state from a pre-time-zero input history."""
    return lift_values(space.nodes, history, space.dim)


def history_inner(kernel: DiscreteKernel, u: HistoryDatum, v: HistoryDatum) -> float:
    """Memory inner product carried by a discrete kernel.

    Uses the factorization a(t+s) - a'(t+s) = sum_i nu_i (1 + kappa_i)
    e^(-kappa_i (t+s)), which turns the double time integral into
    sum_i nu_i (1 + kappa_i) <Qu(kappa_i), Qv(kappa_i)>.  By construction
    ``history_inner(u, u)`` equals ``state_norm(lift)**2`` exactly.
    """
    if not isinstance(kernel, DiscreteKernel):
        raise KernelError("history inner product requires a discrete kernel")
    measure = kernel.measure
    dim = _history_dim(u, v)
    qu = lift_values(measure.nodes, u, dim)
    qv = lift_values(measure.nodes, v, dim)
    w = measure.weights * (1.0 + measure.nodes)
    return float(np.einsum("nd,nd,n->", qu, qv, w))


def _history_dim(*histories: HistoryDatum) -> int:
    dims = set()
    for h in histories:
        if isinstance(h, ExponentialHistory) or isinstance(h, StepHistory):
            dims.add(h.value.size)
        elif isinstance(h, TabulatedHistory):
            dims.add(h.values.shape[1])
    if not dims:
        return 1
    if len(dims) > 1:
        raise StateSpaceError("histories have mismatched dimensions")
    return dims.pop()


@dataclass(frozen=True)
class ExponentPair:
    """Admissible smoothing exponents (eta, theta) for a singularity index.

    Constraints: eta > (1 - alpha)/2, theta < (1 + alpha)/2 and
    theta - eta > 1/2, which is feasible exactly when alpha > 1/2.
    """

    eta: float
    theta: float


def select_exponents(alpha: float) -> ExponentPair:
    """Fixed midpoint-slack choice of the exponent pair.

    With slack delta = (alpha - 1/2)/4: eta = (1 - alpha)/2 + delta and
    theta = (1 + alpha)/2 - delta, so theta - eta = alpha - 2 delta > 1/2.
    Deterministic so that runs are reproducible.
    """
    if not (0.0 < alpha <= 1.0):
        raise StateSpaceError("alpha must lie in (0, 1]")
    if alpha <= 0.5:
        raise StateSpaceError(
            f"alpha = {alpha:g} <= 1/2: no exponent pair satisfies theta - eta > 1/2"
        )
    delta = (alpha - 0.5) / 4.0
    return ExponentPair(eta=(1.0 - alpha) / 2.0 + delta, theta=(1.0 + alpha) / 2.0 - delta)
