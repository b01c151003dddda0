import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermoisaacs.errors import InadmissibleInitialState, StepTooLarge
from thermoisaacs.hybrid import HybridState, discounted_cost, simulate, zeno_bound

from conftest import make_problem


def linear_problem(**kw):
    return make_problem(dynamics__f=["a"], dynamics__g=["0"], **kw)


def test_frozen_dynamics():
    p = make_problem(dynamics__f=["0"], dynamics__g=["0"])
    s0 = HybridState([0.2], [-0.3], 1, -1)
    tr = simulate(p, s0, [1.0] * 100, [0.0] * 100, 1.0, 0.01)
    assert not tr.events
    assert np.all(tr.xs == 0.2) and np.all(tr.ys == -0.3)
    assert np.all(tr.ws == 1) and np.all(tr.zs == -1)
    assert zeno_bound(p, 1.0) == 2


def test_single_x_event_at_half():
    p = linear_problem()
    tr = simulate(p, HybridState([0.0], [0.0], -1, 1), [1.0] * 100, [0.0] * 100, 1.0, 0.01)
    assert len(tr.events) == 1
    ev = tr.events[0]
    assert ev.kind == "X_only" and ev.new_wz == (1, 1)
    assert ev.time == pytest.approx(0.5, abs=1e-9)
    # left-continuity: the mode at the crossing sample itself is still the old one
    k = int(round(0.5 / 0.01))
    assert tr.ws[k - 1] == -1 and tr.ws[k + 1] == 1


def test_alternating_controls_never_switch():
    p = linear_problem()
    alpha = [1.0 if k % 2 == 0 else -1.0 for k in range(100)]
    tr = simulate(p, HybridState([0.0], [0.0], -1, 1), alpha, [0.0] * 100, 1.0, 0.01)
    assert not tr.events
    assert np.max(np.abs(tr.xs)) <= 0.01 + 1e-15


def test_simultaneous_event():
    p = make_problem(dynamics__f=["a"], dynamics__g=["b"])
    tr = simulate(p, HybridState([0.0], [0.0], -1, -1), [1.0] * 100, [1.0] * 100, 1.0, 0.01)
    assert [e.kind for e in tr.events] == ["simultaneous"]
    assert tr.events[0].new_wz == (1, 1)


def test_cost_examples():
    T, dt = 40.0, 0.005
    n = int(T / dt)
    p1 = make_problem(dynamics__f=["0"], dynamics__g=["0"], cost__ell1="1", cost__ell2="0")
    tr = simulate(p1, HybridState([0.0], [0.0], 1, 1), np.zeros(n), np.zeros(n), T, dt)
    assert discounted_cost(p1, tr) == pytest.approx(1 - math.exp(-40), abs=2 * dt)
    p0 = make_problem(dynamics__f=["0"], dynamics__g=["0"], cost__ell1="0", cost__ell2="0")
    assert discounted_cost(p0, tr) == 0.0

    # w flips from -1 to +1 at t = 0.5, then the state is held at the edge of Q
    p = make_problem(dynamics__f=["a*min(1, max(0, 4*(1 - a*x1)))"], dynamics__g=["0"],
                     cost__ell1="(w+1)/2", cost__ell2="0")
    tr = simulate(p, HybridState([0.0], [0.0], -1, 1), np.ones(n), np.zeros(n), T, dt)
    assert tr.events[0].time == pytest.approx(0.5, abs=1e-9)
    assert discounted_cost(p, tr) == pytest.approx(math.exp(-0.5) - math.exp(-40), abs=2 * dt)


def test_cost_quadrature_converges():
    p = make_problem(dynamics__f=["a*min(1, max(0, 4*(1 - a*x1)))"], dynamics__g=["0"],
                     cost__ell1="(w+1)/2", cost__ell2="0")
    exact = math.exp(-0.5) - math.exp(-10)
    errs = []
    for dt in (0.01, 0.005, 0.0025):
        n = int(round(10 / dt))
        tr = simulate(p, HybridState([0.0], [0.0], -1, 1), np.ones(n), np.zeros(n), 10.0, dt)
        errs.append(abs(discounted_cost(p, tr) - exact))
    assert errs[2] < errs[1] < errs[0] < 0.02


def test_zeno_bound_examples():
    p = linear_problem()
    assert zeno_bound(p, 1.0, M=1.0) == 4
    assert zeno_bound(p, 0.1, M=1.0) == 4
    assert zeno_bound(p, 1.0, M=0.0) == 2
    assert zeno_bound(p, 1.0) == 4


def test_step_too_large():
    p = linear_problem()
    with pytest.raises(StepTooLarge):
        simulate(p, HybridState([0.0], [0.0], -1, 1), [1.0] * 2, [0.0] * 2, 1.0, 0.6)
    assert issubclass(StepTooLarge, ValueError)


def test_inadmissible_initial_state():
    p = linear_problem()
    with pytest.raises(InadmissibleInitialState):
        simulate(p, HybridState([0.8], [0.0], -1, 1), [1.0] * 10, [0.0] * 10, 0.1, 0.01)
    with pytest.raises(InadmissibleInitialState):
        HybridState([0.0], [0.0], 0, 1)
    with pytest.raises(InadmissibleInitialState):
        simulate(p, HybridState([0.0, 0.0], [0.0], 1, 1), [1.0] * 10, [0.0] * 10, 0.1, 0.01)


def test_short_control_sequence_rejected():
    with pytest.raises(ValueError):
        simulate(linear_problem(), HybridState([0.0], [0.0], 1, 1), [1.0] * 5, [0.0] * 100,
                 1.0, 0.01)


def test_feedback_callable():
    p = linear_problem()
    # bang-bang towards the far threshold: each flip sends the state across the band
    tr = simulate(p, HybridState([0.0], [0.0], -1, 1), lambda k, s: -float(s.w),
                  lambda k, s: 0.0, 5.0, 0.01)
    times = [e.time for e in tr.events]
    assert times[0] == pytest.approx(0.5, abs=1e-9)
    assert np.diff(times) == pytest.approx(np.ones(len(times) - 1), abs=0.02)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), dwell=st.integers(1, 30))
def test_same_player_event_spacing(seed, dwell):
    p = make_problem(dynamics__f=["a*min(1, max(0, 4*(1 - a*x1)))"])
    rng = np.random.default_rng(seed)
    dt, T = 0.02, 8.0
    n = int(T / dt)
    alpha = np.repeat(rng.choice([-1.0, 0.0, 1.0], size=n // dwell + 1), dwell)[:n]
    beta = np.repeat(rng.choice([-1.0, 0.0, 1.0], size=n // dwell + 1), dwell)[:n]
    tr = simulate(p, HybridState([0.0], [0.0], 1, -1), alpha, beta, T, dt)
    assert len(tr.events) <= zeno_bound(p, T)
    for player, kinds in (("X", ("X_only", "simultaneous")), ("Y", ("Y_only", "simultaneous"))):
        t = [e.time for e in tr.events if e.kind in kinds]
        if len(t) > 1:
            assert np.min(np.diff(t)) >= 1.0 / 1.0 - 2 * dt
    # each event flips exactly what its kind says
    w, z = 1, -1
    for e in tr.events:
        nw, nz = e.new_wz
        assert (nw != w, nz != z) == {"X_only": (True, False), "Y_only": (False, True),
                                      "simultaneous": (True, True)}[e.kind]
        w, z = nw, nz


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), bump=st.floats(0.0, 2.0))
def test_cost_monotone_in_running_cost(seed, bump):
    base = make_problem(cost__ell1="x1^2 + (w+1)/2", cost__ell2="abs(y1)")
    more = make_problem(cost__ell1=f"x1^2 + (w+1)/2 + {bump}*(1 + sin(5*x1))",
                        cost__ell2="abs(y1)")
    rng = np.random.default_rng(seed)
    n = 200
    alpha, beta = rng.choice([-1.0, 0.0, 1.0], size=n), rng.choice([-1.0, 0.0, 1.0], size=n)
    tr = simulate(base, HybridState([0.0], [0.0], 1, 1), alpha, beta, 2.0, 0.01)
    assert discounted_cost(more, tr) >= discounted_cost(base, tr)


def test_refinement_endpoint_error_halves():
    p = make_problem(dynamics__f=["-x1 + 0.3*a"], dynamics__g=["-0.5*y1"], cube__Qx=[[-2, 2]],
                     cube__Qy=[[-2, 2]])
    x_exact = 0.3 + (0.2 - 0.3) * math.exp(-1.0)
    errs = []
    for dt in (0.02, 0.01, 0.005):
        n = int(round(1 / dt))
        tr = simulate(p, HybridState([0.2], [0.0], 1, 1), np.ones(n), np.zeros(n), 1.0, dt)
        errs.append(abs(tr.xs[-1, 0] - x_exact))
    for a, b in zip(errs, errs[1:]):
        assert b / a == pytest.approx(0.5, abs=0.05)
