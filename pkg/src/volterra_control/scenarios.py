"""Shipped experiment configurations.

``demo``     power-law kernel (singularity index 0.6) lifted on six nodes,
             saturating drift, quadratic control effort against a bounded
             state cost, identity control channel: the full synthesis
             pipeline has nontrivial dynamics, value, and feedback here.
``constant`` constant cost rate with no control channel: every value-side
             quantity has a closed form, so the pipeline output is exactly
             checkable.
``zero``     all coefficients zero: every artifact must vanish.
"""

from __future__ import annotations

import copy

SCENARIOS = {
    "demo": {
        "schema_version": 1,
        "kernel": {"variant": "fractional", "beta": 0.4, "scale": 1.0},
        "discretization": {"bins": 6, "kappa_min": 0.05, "kappa_max": 50.0},
        "space": {"a_matrix": [[-1.0]]},
        "history": {"variant": "exponential", "value": [0.6], "rate": 1.0},
        "problem": {
            "drift": {"name": "saturating_ramp", "params": {"scale": 0.4, "slope": 1.0}},
            "control_drift": {"name": "control_identity", "params": {"gain": 1.0}},
            "running_cost": {
                "name": "bounded_quadratic_effort",
                "params": {"cap": 1.0, "effort": 0.5},
            },
            "noise": [[0.5]],
            "discount": 0.5,
            "control_set": {"lo": [-1.0], "hi": [1.0], "resolution": 101, "refinements": 30},
        },
        "scheme": {"dt": 0.02, "horizon": 24.0},
        "bsde": {
            "horizon": 16.0,
            "dt": 0.02,
            "paths": 4000,
            "basis_degree": 2,
            "features": "output_conv",
            "clamp": True,
        },
        "seed": 2026,
        "output_dir": "out",
    },
    "constant": {
        "schema_version": 1,
        "kernel": {"variant": "discrete", "nodes": [0.5, 2.0], "weights": [0.6, 0.9]},
        "discretization": None,
        "space": {"a_matrix": [[-1.0]]},
        "history": {"variant": "zero"},
        "problem": {
            "drift": {"name": "zero", "params": {}},
            "control_drift": {"name": "zero", "params": {}},
            "running_cost": {"name": "constant", "params": {"value": 1.0}},
            "noise": [[0.4]],
            "discount": 0.5,
            "control_set": {"lo": [-1.0], "hi": [1.0], "resolution": 11, "refinements": 5},
        },
        "scheme": {"dt": 0.02, "horizon": 20.0},
        "bsde": {
            "horizon": 10.0,
            "dt": 0.02,
            "paths": 512,
            "basis_degree": 1,
            "features": "output_conv",
            "clamp": True,
        },
        "seed": 7,
        "output_dir": "out",
    },
    "zero": {
        "schema_version": 1,
        "kernel": {"variant": "discrete", "nodes": [1.0], "weights": [1.0]},
        "discretization": None,
        "space": {"a_matrix": [[-1.0]]},
        "history": {"variant": "zero"},
        "problem": {
            "drift": {"name": "zero", "params": {}},
            "control_drift": {"name": "zero", "params": {}},
            "running_cost": {"name": "zero", "params": {}},
            "noise": [[0.0]],
            "discount": 0.5,
            "control_set": {"lo": [-1.0], "hi": [1.0], "resolution": 11, "refinements": 5},
        },
        "scheme": {"dt": 0.05, "horizon": 1.0},
        "bsde": {
            "horizon": 4.0,
            "dt": 0.05,
            "paths": 64,
            "basis_degree": 1,
            "features": "output_conv",
            "clamp": True,
        },
        "seed": 1,
        "output_dir": "out",
    },
}


def scenario_config(name: str) -> dict:
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; available: {sorted(SCENARIOS)}")
    return copy.deepcopy(SCENARIOS[name])
