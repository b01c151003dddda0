import itertools
import math

import numpy as np
import pytest

from thermoisaacs.errors import MaxIterExceeded
from thermoisaacs.grid import build_grid, classify_nodes
from thermoisaacs.problem import SECTORS, problem_from_dict
from thermoisaacs.solver import (IsaacsOperator, SolverConfig, ValueField, _median3, apply_S,
                                 apply_staged, chain_violation, local_isaacs, project_order, solve)

from conftest import make_dict, make_problem

NODES = [np.array([-1.0, -0.5, 0.0, 0.5, 1.0])]


def small_grid(problem, h=0.1, nodes=NODES):
    return classify_nodes(problem, nodes, nodes, h)


def random_field(grid, rng, lo=0.0, hi=1.0):
    return ValueField(grid, {s: rng.uniform(lo, hi, grid.sector_shape(*s)) for s in SECTORS})


def node_ids(grid, w, z):
    return [(int(i), int(j)) for i in grid.I(w) for j in grid.J(z)]


# --- literal oracle ---------------------------------------------------------------

def oracle_S(V, config, I=None, nb=None, base=None):
    """Row rules transcribed node by node; corners may read from ``nb``."""
    g = V.grid
    nb = nb or V
    out = {}
    for (w, z) in SECTORS:
        arr = np.empty(g.sector_shape(w, z))
        xsw, ysw = set(g.I_switch(w).tolist()), set(g.J_switch(z).tolist())
        for i, j in node_ids(g, w, z):
            li, lj = g.local_index("X", w, i), g.local_index("Y", z, j)
            loc = I[(w, z)][li, lj] if I is not None else local_isaacs(V, (w, z), i, j, config)
            sx, sy = i in xsw, j in ysw
            if sx and sy:
                val = sorted([nb.at_node(i, j, w, -z), loc, nb.at_node(i, j, -w, z)])[1]
            elif base is not None:
                val = base.data[(w, z)][li, lj]
            elif sx:
                val = min(V.at_node(i, j, -w, z), loc)
            elif sy:
                val = max(V.at_node(i, j, w, -z), loc)
            else:
                val = loc
            arr[li, lj] = val
        out[(w, z)] = arr
    return ValueField(g, out)


def oracle_staged(V, config):
    g = V.grid
    I = {}
    for (w, z) in SECTORS:
        arr = np.empty(g.sector_shape(w, z))
        for i, j in node_ids(g, w, z):
            arr[g.local_index("X", w, i), g.local_index("Y", z, j)] = local_isaacs(V, (w, z), i, j,
                                                                                   config)
        I[(w, z)] = arr
    V1 = oracle_S(V, config, I=I)
    V2 = oracle_S(V, config, I=I, nb=V1, base=V1)
    return oracle_S(V, config, I=I, nb=V2, base=V1)


def coupled_problem(**kw):
    args = dict(cost__ell1="x1^2 + 0.3*(w+1) + 0.1*a", cost__ell2="0.2*y1*z - 0.05*b",
                cost__coupled="0.3*a*b*x1")
    args.update(kw)
    return make_problem(**args)


# --- local rule -------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["lower", "upper"])
def test_local_rule_constant_examples(kind):
    p = make_problem(cost__ell1="1", cost__ell2="0")
    g = small_grid(p)
    cfg = SolverConfig(value_kind=kind)
    i, j = int(g.I(1)[2]), int(g.J(1)[1])
    assert local_isaacs(ValueField.constant(g, 1.0), (1, 1), i, j, cfg) == pytest.approx(1.0)
    assert local_isaacs(ValueField.constant(g, 0.0), (1, 1), i, j, cfg) == pytest.approx(0.1)


def test_local_rule_matrix_game():
    p = make_problem(controls__A=[1, 2], controls__B=[1, 2], dynamics__f=["0"],
                     dynamics__g=["0"], cost__ell1="0", cost__ell2="0",
                     cost__coupled="2*(b-1) + 3*(a-1) - 4*(a-1)*(b-1)")
    g = small_grid(p)
    table = np.array([[0.0, 2.0], [3.0, 1.0]])       # rows a, columns b
    lower = table.min(axis=0).max()
    upper = table.max(axis=1).min()
    assert (lower, upper) == (1.0, 2.0)
    V0 = ValueField.constant(g, 0.0)
    i, j = int(g.I(1)[0]), int(g.J(-1)[0])
    assert local_isaacs(V0, (1, -1), i, j, SolverConfig("lower")) == pytest.approx(0.1 * lower)
    assert local_isaacs(V0, (1, -1), i, j, SolverConfig("upper")) == pytest.approx(0.1 * upper)


@pytest.mark.parametrize("kind", ["lower", "upper"])
def test_vectorized_local_matches_per_node(kind, rng):
    d = make_dict(dims__n=2, cube__Qx=[[-1, 1], [-1, 1]],
                  dynamics__f=["a*min(1, max(0, 4*(1 - a*x1))) + 0.1*x2", "0.3*sin(2*x1) - 0.4*a"],
                  cost__ell1="x1^2 + x2*a + 0.2*(w+1)", cost__ell2="y1*b*z",
                  cost__coupled="0.5*a*b")
    p = problem_from_dict(d)
    g = build_grid(p, nx=[5, 4], ny=[9], h=0.1)
    cfg = SolverConfig(value_kind=kind)
    V = random_field(g, rng)
    op = IsaacsOperator(g, cfg)
    for s in SECTORS:
        vec = op.local(V, s)
        for i, j in node_ids(g, *s)[::3]:
            li, lj = g.local_index("X", s[0], i), g.local_index("Y", s[1], j)
            assert vec[li, lj] == pytest.approx(local_isaacs(V, s, i, j, cfg), abs=1e-13)


# --- exit rules -----------------------------------------------------------------------

def test_median_examples():
    for perm in itertools.permutations([0.2, 0.5, 0.4]):
        assert _median3(*perm) == 0.4
    assert _median3(1.0, 1.0, 0.0) == 1.0


@pytest.mark.parametrize("kind", ["lower", "upper"])
def test_apply_S_matches_oracle(kind, rng):
    p = coupled_problem()
    g = small_grid(p)
    assert g.n_double_switch > 0
    cfg = SolverConfig(value_kind=kind)
    for _ in range(3):
        V = random_field(g, rng)
        got, want = apply_S(V, cfg), oracle_S(V, cfg)
        assert got.sup_diff(want) <= 1e-13


def test_exit_rows_min_rule():
    p = make_problem(dynamics__g=["0"], cost__ell1="3", cost__ell2="0")
    g = small_grid(p)
    cfg = SolverConfig("lower")
    V = ValueField.constant(g, 3.0)
    V.data[(-1, 1)][:] = 0.0
    out = apply_S(V, cfg)
    i = int(g.I_switch(1)[0])
    j = int(g.J(1)[2])
    assert out.at_node(i, j, 1, 1) == 0.0                           # X prefers to switch
    i_in = int(g.I_in(1)[1])
    assert out.at_node(i_in, j, 1, 1) == pytest.approx(3.0)         # interior keeps local value


@pytest.mark.parametrize("kind", ["lower", "upper"])
def test_staged_matches_literal_oracle(kind, rng):
    p = coupled_problem()
    g = small_grid(p)
    cfg = SolverConfig(value_kind=kind, staging="staged_S3")
    for _ in range(3):
        V = random_field(g, rng)
        got = apply_staged(V, cfg)
        assert got.sup_diff(oracle_staged(V, cfg)) <= 1e-13
        # corners really do differ from the single sweep on random input
    assert apply_staged(V, cfg).sup_diff(apply_S(V, cfg)) > 0


def test_staged_equals_plain_without_corners(rng):
    p = make_problem(dynamics__g=["0"])
    g = small_grid(p)
    assert g.n_double_switch == 0
    cfg = SolverConfig()
    V = random_field(g, rng)
    assert apply_staged(V, cfg).sup_diff(apply_S(V, cfg)) == 0.0


def test_constant_field_is_fixed_point():
    p = make_problem(cost__ell1="0.7", cost__ell2="0")
    g = small_grid(p)
    V = ValueField.constant(g, 0.7)
    for kind in ("lower", "upper"):
        assert apply_S(V, SolverConfig(kind)).sup_diff(V) <= 1e-15
        assert apply_staged(V, SolverConfig(kind)).sup_diff(V) <= 1e-15


# --- projection -------------------------------------------------------------------------

def chain_field(values):
    p = make_problem(dynamics__f=["a"], dynamics__g=["b"])
    g = small_grid(p)
    V = ValueField.constant(g, 0.0)
    i = int(g.I_switch(1)[0])
    j = int(g.J_switch(1)[0])
    for s, val in zip([(1, -1), (-1, -1), (-1, 1)], values):
        V.data[s][g.local_index("X", s[0], i), g.local_index("Y", s[1], j)] = val
    return V, i, j


def read_chain(V, i, j):
    return [V.at_node(i, j, *s) for s in [(1, -1), (-1, -1), (-1, 1)]]


@pytest.mark.parametrize("chain, expected, count", [
    ((0.1, 0.2, 0.3), (0.1, 0.2, 0.3), 0),
    ((0.3, 0.2, 0.1), (0.1, 0.2, 0.3), 1),
    ((0.2, 0.1, 0.3), (0.1, 0.2, 0.3), 1),
])
def test_project_order_examples(chain, expected, count):
    V, i, j = chain_field(chain)
    out, n = project_order(V)
    assert n == count
    assert read_chain(out, i, j) == list(expected)
    again, n2 = project_order(out)
    assert n2 == 0 and again.sup_diff(out) == 0.0
    assert chain_violation(out) == 0.0


def test_project_order_tolerance():
    V, i, j = chain_field((0.2 + 1e-13, 0.2, 0.3))
    assert project_order(V, 1e-12)[1] == 0
    assert project_order(V, 0.0)[1] == 1


# --- structural properties -----------------------------------------------------------------

@pytest.mark.parametrize("staging", ["plain_S", "staged_S3"])
def test_monotone_and_constant_consistency(staging, rng):
    p = coupled_problem()
    g = small_grid(p)
    cfg = SolverConfig("lower", staging=staging)
    d = cfg.discount(p.lam, g.h)
    for _ in range(20):
        V1 = random_field(g, rng)
        V2 = ValueField(g, {s: v + rng.uniform(0, 0.5, v.shape) for s, v in V1.data.items()})
        S1, S2 = (apply_S(V1, cfg), apply_S(V2, cfg)) if staging == "plain_S" else \
            (apply_staged(V1, cfg), apply_staged(V2, cfg))
        for s in SECTORS:
            assert np.all(S2.data[s] >= S1.data[s] - 1e-14)
        c = rng.uniform(0.1, 1.0)
        Vc = ValueField(g, {s: v + c for s, v in V1.data.items()})
        Sc = apply_S(Vc, cfg) if staging == "plain_S" else apply_staged(Vc, cfg)
        for (w, z) in SECTORS:
            diff = Sc.data[(w, z)] - S1.data[(w, z)]
            assert np.all(diff >= d * c - 1e-12) and np.all(diff <= c + 1e-12)
            interior = np.ix_(~g.X[w].switch, ~g.Y[z].switch)
            assert np.allclose(diff[interior], d * c, atol=1e-12)
        # 1-Lipschitz overall, d-Lipschitz on interior rows
        gap = V2.sup_diff(V1)
        assert S2.sup_diff(S1) <= gap + 1e-12
        for (w, z) in SECTORS:
            interior = np.ix_(~g.X[w].switch, ~g.Y[z].switch)
            assert np.max(np.abs(S2.data[(w, z)] - S1.data[(w, z)])[interior]) <= d * gap + 1e-12


def test_discount_forms():
    assert SolverConfig().discount(1.0, 0.1) == pytest.approx(0.9)
    assert SolverConfig(discount_form="exp_minus_lambda_h").discount(2.0, 0.6) == \
        pytest.approx(math.exp(-1.2))
    with pytest.raises(ValueError):
        SolverConfig().discount(2.0, 0.6)
    with pytest.raises(ValueError):
        SolverConfig(value_kind="middle")
    with pytest.raises(ValueError):
        SolverConfig(tol=0.0)


# --- solve -------------------------------------------------------------------------------

@pytest.mark.parametrize("kind", ["lower", "upper"])
@pytest.mark.parametrize("staging", ["plain_S", "staged_S3"])
def test_constant_cost_solves_to_constant(kind, staging):
    p = coupled_problem(cost__ell1="1.5", cost__ell2="0", cost__coupled="0", **{"lambda": 2.0})
    g = small_grid(p, h=0.05)
    V, st = solve(p, g, SolverConfig(kind, staging=staging))
    assert st.converged and st.final_residual <= 1e-8
    assert abs(V.max() - 0.75) <= 1e-8 and abs(V.min() - 0.75) <= 1e-8


def p2_problem(n=41, h=0.02):
    d = make_dict(cost__ell1="(w+1)/2", cost__ell2="0", grid__nx=[n], grid__ny=[n], grid__h=h)
    p = problem_from_dict(d)
    return p, build_grid(p)


def test_p2_closed_form():
    p, g = p2_problem()
    V, st = solve(p, g, SolverConfig("lower"))
    xs = g.X[1].coords[:, 0]
    exact = 1 - np.exp(-(xs + 0.5))
    assert np.max(np.abs(V.data[(1, 1)] - exact[:, None])) <= 0.05
    assert np.max(np.abs(V.data[(-1, 1)])) <= 1e-8
    assert chain_violation(V) <= 1e-12
    assert sum(st.projections_per_iteration[-10:]) == 0


def test_max_iter_exceeded():
    p, g = p2_problem(21, 0.05)
    with pytest.raises(MaxIterExceeded) as err:
        solve(p, g, SolverConfig(max_iter=3))
    assert err.value.residual > 1e-8
    assert len(err.value.factors) == 2
    assert err.value.field is not None


def test_stats_contraction_factors_below_one():
    p, g = p2_problem(21, 0.05)
    V, st = solve(p, g, SolverConfig())
    f = st.empirical_contraction_factors
    assert len(f) == st.iterations - 1
    assert max(f[-20:]) < 1.0
    assert st.to_dict()["iterations"] == st.iterations


def test_broken_initial_chain_is_repaired(rng):
    p = make_problem(cost__ell1="(w+1)/2 + 0.2*(1 - w*z)", cost__ell2="0")
    g = build_grid(p, nx=[21], ny=[21], h=0.05)
    init = random_field(g, rng, 0.0, 1.0)
    # reverse every chain by a wide margin
    for (w, z) in SECTORS:
        for i in g.I_switch(w):
            for j in g.J_switch(z):
                for s, val in zip([(w, -z), (-w, -z), (-w, z)], (1.0, 0.5, 0.0)):
                    li, lj = g.local_index("X", s[0], i), g.local_index("Y", s[1], j)
                    init.data[s][li, lj] = val
    assert chain_violation(init) >= 0.5
    V, st = solve(p, g, SolverConfig(), initial=init)
    assert sum(st.projections_per_iteration[-10:]) == 0
    q = 1 - p.lam * g.h
    assert chain_violation(V) <= 1e-12 + 2 * q / (1 - q) * st.final_residual


def test_grid_of_other_problem_rejected():
    p, g = p2_problem(21, 0.05)
    other, _ = p2_problem(21, 0.05)
    with pytest.raises(ValueError):
        solve(other, g, SolverConfig())
