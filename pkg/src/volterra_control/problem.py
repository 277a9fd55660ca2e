"""Problem data: coefficient registry, control sets, and verified constants.

Coefficients are selected by name with parameters so that experiment
configurations remain text-reproducible.  Every coefficient carries the
constants its contract promises (Lipschitz constants and uniform bounds);
``ControlProblem`` re-verifies the declared constants by sampling at
construction time, so a registry bug surfaces immediately rather than as
a silently wrong certificate downstream.

Shapes: drift f maps (..., d) -> (..., d); the control drift r maps
(..., d) x (..., q) -> (..., m); the running cost maps to (...,).  All
coefficient callables are vectorized over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class CoefficientError(ValueError):
    """Raised for unknown coefficient names, bad parameters, or violated bounds."""


@dataclass(frozen=True)
class ControlSet:
    """Box of admissible control actions with a search grid resolution."""

    lo: tuple
    hi: tuple
    resolution: int = 101
    refinements: int = 30

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if len(lo) != len(hi) or len(lo) == 0:
            raise CoefficientError("lo and hi must be non-empty and aligned")
        if any(l >= h for l, h in zip(lo, hi)):
            raise CoefficientError("need lo < hi componentwise")
        if self.resolution < 2:
            raise CoefficientError("resolution must be at least 2")
        if self.refinements < 0:
            raise CoefficientError("refinements must be non-negative")

    @property
    def dim(self) -> int:
        return len(self.lo)

    def axis(self, i: int) -> np.ndarray:
        return np.linspace(self.lo[i], self.hi[i], self.resolution)

    def clip(self, gamma: np.ndarray) -> np.ndarray:
        return np.clip(gamma, np.asarray(self.lo), np.asarray(self.hi))

    def contains(self, gamma: np.ndarray, tol: float = 1e-9) -> bool:
        g = np.asarray(gamma, dtype=float)
        return bool(
            np.all(g >= np.asarray(self.lo) - tol) and np.all(g <= np.asarray(self.hi) + tol)
        )

    def corner_norm(self) -> float:
        """Largest Euclidean norm over the box."""
        corner = np.maximum(np.abs(np.asarray(self.lo)), np.abs(np.asarray(self.hi)))
        return float(np.linalg.norm(corner))

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.uniform(np.asarray(self.lo), np.asarray(self.hi), size=(size, self.dim))

    def to_json(self) -> dict:
        return {
            "lo": list(self.lo),
            "hi": list(self.hi),
            "resolution": self.resolution,
            "refinements": self.refinements,
        }

    @classmethod
    def from_json(cls, data: dict) -> "ControlSet":
        return cls(
            lo=tuple(data["lo"]),
            hi=tuple(data["hi"]),
            resolution=int(data.get("resolution", 101)),
            refinements=int(data.get("refinements", 30)),
        )


@dataclass(frozen=True)
class Drift:
    """State drift f with declared Lipschitz constant and gradient bound."""

    name: str
    params: dict
    fn: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    grad_bound: float

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.fn(u)

    def jacobian(self, u: np.ndarray) -> np.ndarray:
        """Jacobian with shape (..., d, d)."""
        return self.jac(u)

    def to_json(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class ControlDrift:
    """Bounded control-to-noise-channel map r(u, gamma) in R^m."""

    name: str
    params: dict
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    noise_dim: int
    bound_fn: Callable[[ControlSet], float]
    lipschitz_u: float

    def __call__(self, u: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        return self.fn(u, gamma)

    def bound(self, controls: ControlSet) -> float:
        return self.bound_fn(controls)

    def to_json(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


@dataclass(frozen=True)
class RunningCost:
    """Bounded running cost rate (u, gamma) -> R."""

    name: str
    params: dict
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    bound_fn: Callable[[ControlSet], float]

    def __call__(self, u: np.ndarray, gamma: np.ndarray) -> np.ndarray:
        return self.fn(u, gamma)

    def bound(self, controls: ControlSet) -> float:
        return self.bound_fn(controls)

    def to_json(self) -> dict:
        return {"name": self.name, "params": dict(self.params)}


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------


def _eye_jac(scale: float):
    def jac(u):
        u = np.asarray(u, dtype=float)
        d = u.shape[-1]
        out = np.zeros(u.shape + (d,))
        idx = np.arange(d)
        out[..., idx, idx] = scale
        return out

    return jac


def make_drift(name: str, dim: int, params: dict | None = None) -> Drift:
    """Named state drifts.

    zero                     f = 0
    constant(value)          f = value (a d-vector)
    linear(gain)             f = gain * u
    saturating_ramp(scale, slope)
                             f = scale * tanh(slope * u), elementwise; a
                             smooth bounded ramp with |f'| <= scale*slope
    """
    params = dict(params or {})
    if name == "zero":
        _require(params, set())
        zero = np.zeros(dim)
        return Drift(
            name,
            params,
            fn=lambda u: np.zeros_like(np.asarray(u, dtype=float)),
            jac=_eye_jac(0.0),
            lipschitz=0.0,
            grad_bound=0.0,
        )
    if name == "constant":
        _require(params, {"value"})
        value = np.broadcast_to(np.asarray(params["value"], dtype=float), (dim,)).copy()
        return Drift(
            name,
            params,
            fn=lambda u: np.broadcast_to(value, np.asarray(u).shape).copy(),
            jac=_eye_jac(0.0),
            lipschitz=0.0,
            grad_bound=0.0,
        )
    if name == "linear":
        _require(params, {"gain"})
        gain = float(params["gain"])
        return Drift(
            name,
            params,
            fn=lambda u: gain * np.asarray(u, dtype=float),
            jac=_eye_jac(gain),
            lipschitz=abs(gain),
            grad_bound=abs(gain),
        )
    if name == "saturating_ramp":
        _require(params, {"scale", "slope"})
        scale, slope = float(params["scale"]), float(params["slope"])

        def fn(u):
            return scale * np.tanh(slope * np.asarray(u, dtype=float))

        def jac(u):
            u = np.asarray(u, dtype=float)
            d = u.shape[-1]
            diag = scale * slope / np.cosh(slope * u) ** 2
            out = np.zeros(u.shape + (d,))
            idx = np.arange(d)
            out[..., idx, idx] = diag
            return out

        lip = abs(scale * slope)
        return Drift(name, params, fn=fn, jac=jac, lipschitz=lip, grad_bound=lip)
    raise CoefficientError(f"unknown drift {name!r}")


def make_control_drift(name: str, dim: int, noise_dim: int, params: dict | None = None) -> ControlDrift:
    """Named control drifts r(u, gamma) into R^m.

    zero                      r = 0
    control_identity(gain)    r = gain * gamma (requires q == m)
    affine_saturating(control_gain, state_gain)
                              r = control_gain * gamma + state_gain *
                              tanh(mean(u)); bounded and Lipschitz in u
    """
    params = dict(params or {})
    if name == "zero":
        _require(params, set())
        return ControlDrift(
            name,
            params,
            fn=lambda u, g: np.zeros(np.broadcast_shapes(u.shape[:-1], g.shape[:-1]) + (noise_dim,)),
            noise_dim=noise_dim,
            bound_fn=lambda controls: 0.0,
            lipschitz_u=0.0,
        )
    if name == "control_identity":
        gain = float(params.get("gain", 1.0))
        _require(params, {"gain"}, optional={"gain"})

        def fn(u, g):
            g = np.asarray(g, dtype=float)
            if g.shape[-1] != noise_dim:
                raise CoefficientError("control_identity requires control dim == noise dim")
            return gain * g

        return ControlDrift(
            name,
            params,
            fn=fn,
            noise_dim=noise_dim,
            bound_fn=lambda controls: abs(gain) * controls.corner_norm(),
            lipschitz_u=0.0,
        )
    if name == "affine_saturating":
        _require(params, {"control_gain", "state_gain"})
        cg, sg = float(params["control_gain"]), float(params["state_gain"])

        def fn(u, g):
            u = np.asarray(u, dtype=float)
            g = np.asarray(g, dtype=float)
            if g.shape[-1] != noise_dim:
                raise CoefficientError("affine_saturating requires control dim == noise dim")
            state_part = sg * np.tanh(u.mean(axis=-1))
            return cg * g + state_part[..., None]

        def bound_fn(controls):
            return abs(cg) * controls.corner_norm() + abs(sg) * np.sqrt(noise_dim)

        return ControlDrift(
            name,
            params,
            fn=fn,
            noise_dim=noise_dim,
            bound_fn=bound_fn,
            lipschitz_u=abs(sg) * np.sqrt(noise_dim / dim),
        )
    raise CoefficientError(f"unknown control drift {name!r}")


def make_running_cost(name: str, dim: int, params: dict | None = None) -> RunningCost:
    """Named running costs.

    zero                       0
    constant(value)            a fixed rate
    bounded_quadratic(cap)     cap * |u|^2 / (1 + |u|^2), control-free
    bounded_quadratic_effort(cap, effort)
                               bounded state term plus effort * |gamma|^2
    """
    params = dict(params or {})
    if name == "zero":
        _require(params, set())
        return RunningCost(
            name,
            params,
            fn=lambda u, g: np.zeros(np.broadcast_shapes(np.asarray(u).shape[:-1], np.asarray(g).shape[:-1])),
            bound_fn=lambda controls: 0.0,
        )
    if name == "constant":
        _require(params, {"value"})
        value = float(params["value"])
        return RunningCost(
            name,
            params,
            fn=lambda u, g: np.full(
                np.broadcast_shapes(np.asarray(u).shape[:-1], np.asarray(g).shape[:-1]), value
            ),
            bound_fn=lambda controls: abs(value),
        )
    if name == "bounded_quadratic":
        _require(params, {"cap"})
        cap = float(params["cap"])

        def fn(u, g):
            sq = np.square(np.asarray(u, dtype=float)).sum(axis=-1)
            return cap * sq / (1.0 + sq)

        return RunningCost(name, params, fn=fn, bound_fn=lambda controls: abs(cap))
    if name == "bounded_quadratic_effort":
        _require(params, {"cap", "effort"})
        cap, effort = float(params["cap"]), float(params["effort"])

        def fn(u, g):
            sq = np.square(np.asarray(u, dtype=float)).sum(axis=-1)
            eff = np.square(np.asarray(g, dtype=float)).sum(axis=-1)
            return cap * sq / (1.0 + sq) + effort * eff

        def bound_fn(controls):
            return abs(cap) + abs(effort) * controls.corner_norm() ** 2

        return RunningCost(name, params, fn=fn, bound_fn=bound_fn)
    raise CoefficientError(f"unknown running cost {name!r}")


def _require(params: dict, allowed: set, optional: set | None = None):
    optional = optional or set()
    missing = (allowed - optional) - set(params)
    extra = set(params) - allowed
    if missing:
        raise CoefficientError(f"missing coefficient parameters {sorted(missing)}")
    if extra:
        raise CoefficientError(f"unknown coefficient parameters {sorted(extra)}")


# ---------------------------------------------------------------------------
# The assembled problem
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControlProblem:
    """Coefficients of the controlled equation plus verified constants.

    ``noise`` is the d x m loading of the Brownian channel; ``discount``
    the positive rate weighting the running cost.  ``r_bound`` and
    ``ell_bound`` are the uniform bounds implied by the coefficient
    declarations; construction samples random arguments and raises if a
    declared constant is violated.
    """

    drift: Drift
    noise: np.ndarray
    control_drift: ControlDrift
    running_cost: RunningCost
    discount: float
    controls: ControlSet
    r_bound: float = field(init=False)
    ell_bound: float = field(init=False)

    def __post_init__(self):
        noise = np.atleast_2d(np.asarray(self.noise, dtype=float))
        noise.setflags(write=False)
        object.__setattr__(self, "noise", noise)
        if self.discount <= 0.0:
            raise CoefficientError("discount rate must be positive")
        object.__setattr__(self, "r_bound", self.control_drift.bound(self.controls))
        object.__setattr__(self, "ell_bound", self.running_cost.bound(self.controls))
        self._verify_constants()

    @property
    def dim(self) -> int:
        return self.noise.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.noise.shape[1]

    @property
    def control_dim(self) -> int:
        return self.controls.dim

    def _verify_constants(self, samples: int = 200, scale: float = 4.0):
        rng = np.random.default_rng(0)
        d = self.dim
        u = rng.normal(scale=scale, size=(samples, d))
        v = rng.normal(scale=scale, size=(samples, d))
        gam = self.controls.sample(rng, samples)
        fu, fv = self.drift(u), self.drift(v)
        lhs = np.linalg.norm(fu - fv, axis=-1)
        rhs = self.drift.lipschitz * np.linalg.norm(u - v, axis=-1)
        if np.any(lhs > rhs * (1.0 + 1e-9) + 1e-12):
            raise CoefficientError(f"drift {self.drift.name!r} violates its Lipschitz constant")
        jac_norm = np.linalg.norm(self.drift.jacobian(u), ord=2, axis=(-2, -1))
        if np.any(jac_norm > self.drift.grad_bound * (1.0 + 1e-9) + 1e-12):
            raise CoefficientError(f"drift {self.drift.name!r} violates its gradient bound")
        r_norm = np.linalg.norm(self.control_drift(u, gam), axis=-1)
        if np.any(r_norm > self.r_bound * (1.0 + 1e-9) + 1e-12):
            raise CoefficientError(
                f"control drift {self.control_drift.name!r} violates its uniform bound"
            )
        ell = np.abs(self.running_cost(u, gam))
        if np.any(ell > self.ell_bound * (1.0 + 1e-9) + 1e-12):
            raise CoefficientError(
                f"running cost {self.running_cost.name!r} violates its uniform bound"
            )

    def to_json(self) -> dict:
        return {
            "drift": self.drift.to_json(),
            "control_drift": self.control_drift.to_json(),
            "running_cost": self.running_cost.to_json(),
            "noise": self.noise.tolist(),
            "discount": self.discount,
            "control_set": self.controls.to_json(),
        }


def problem_from_json(data: dict) -> ControlProblem:
    noise = np.atleast_2d(np.asarray(data["noise"], dtype=float))
    d, m = noise.shape
    controls = ControlSet.from_json(data["control_set"])
    return ControlProblem(
        drift=make_drift(data["drift"]["name"], d, data["drift"].get("params")),
        noise=noise,
        control_drift=make_control_drift(
            data["control_drift"]["name"], d, m, data["control_drift"].get("params")
        ),
        running_cost=make_running_cost(
            data["running_cost"]["name"], d, data["running_cost"].get("params")
        ),
        discount=float(data["discount"]),
        controls=controls,
    )
