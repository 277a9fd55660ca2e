import numpy as np
import pytest

from volterra_control.kernels import FractionalKernel, discretize
from volterra_control.problem import (
    ControlProblem,
    ControlSet,
    make_control_drift,
    make_drift,
    make_running_cost,
)
from volterra_control.statespace import ExponentialHistory, LiftedSpace, lift_history


def make_problem(
    d=1,
    m=1,
    drift=("saturating_ramp", {"scale": 0.4, "slope": 1.0}),
    noise=((0.5,),),
    control_drift=("control_identity", {"gain": 1.0}),
    running_cost=("bounded_quadratic_effort", {"cap": 1.0, "effort": 0.5}),
    discount=0.5,
    controls=None,
):
    controls = controls or ControlSet(lo=(-1.0,), hi=(1.0,))
    return ControlProblem(
        drift=make_drift(drift[0], d, drift[1]),
        noise=np.asarray(noise, dtype=float),
        control_drift=make_control_drift(control_drift[0], d, m, control_drift[1]),
        running_cost=make_running_cost(running_cost[0], d, running_cost[1]),
        discount=discount,
        controls=controls,
    )


@pytest.fixture(scope="session")
def demo_space():
    """Six-node lift of the beta=0.4 power-law kernel, stable scalar A."""
    rep = discretize(FractionalKernel(0.4), 6, 0.05, 50.0)
    return LiftedSpace([[-1.0]], rep.measure)


@pytest.fixture(scope="session")
def demo_problem():
    return make_problem()


@pytest.fixture(scope="session")
def demo_x0(demo_space):
    return lift_history(demo_space, ExponentialHistory([0.6], 1.0))


@pytest.fixture(scope="session")
def uncontrolled_problem():
    """r = 0 and a control-free bounded cost: the value problem degenerates
    to a discounted cost of the uncontrolled flow."""
    return make_problem(
        control_drift=("zero", {}),
        running_cost=("bounded_quadratic", {"cap": 1.0}),
    )


@pytest.fixture(scope="session")
def constant_cost_problem():
    """Constant running cost and no control channel: closed-form value."""
    return make_problem(
        drift=("zero", {}),
        noise=((0.4,),),
        control_drift=("zero", {}),
        running_cost=("constant", {"value": 1.0}),
    )
