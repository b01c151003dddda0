"""Feedback controls from a solved value field, and rollouts that check it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import OutsideCube
from .grid import SectorGrid, multilinear
from .hybrid import HybridState, check_step_size, integrate_batch, simulate, discounted_cost
from .relay import relay_step
from .solver import SolverConfig, ValueField

__all__ = [
    "FeedbackPolicy",
    "feedback_controls",
    "closed_loop_value",
    "closed_loop_values",
    "adversarial_check",
    "adversarial_gaps",
    "start_states",
]

_TIE = 1e-11


def _first_argmin(v: np.ndarray, axis: int) -> np.ndarray:
    # near-ties resolve to the first-listed control
    m = v.min(axis=axis, keepdims=True)
    return np.argmax(v <= m + _TIE * (1.0 + np.abs(m)), axis=axis)


def _first_argmax(v: np.ndarray, axis: int) -> np.ndarray:
    return _first_argmin(-v, axis)


@dataclass
class FeedbackPolicy:
    field: ValueField
    config: SolverConfig
    _full: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self._full = np.nan_to_num(self.field.full_arrays(), nan=0.0)
        self.d = self.config.discount(self.problem.lam, self.grid.h)

    @property
    def grid(self) -> SectorGrid:
        return self.field.grid

    @property
    def problem(self):
        return self.field.grid.problem

    def _batch(self, x, y, w, z):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        w = np.atleast_1d(np.asarray(w, dtype=int))
        z = np.atleast_1d(np.asarray(z, dtype=int))
        p = self.problem
        tol = 1e-9
        if (np.any(x < p.Qx[:, 0] - tol) or np.any(x > p.Qx[:, 1] + tol)
                or np.any(y < p.Qy[:, 0] - tol) or np.any(y > p.Qy[:, 1] + tol)):
            raise OutsideCube("policy queried outside the cube Q")
        return x, y, w, z

    def lookahead(self, x, y, w, z):
        """One-step lookahead values for every control pair.

        Returns ``(Q, wn, zn)``: ``Q`` has shape (B, Na, Nb) and ``wn`` (B, Na)
        and ``zn`` (B, Nb) are the relay outputs after the step.  Foot points
        that leave the current sector are read from the switched sector, as
        the relay would do along the trajectory.
        """
        x, y, w, z = self._batch(x, y, w, z)
        p, g = self.problem, self.grid
        h = g.h
        fx = x[:, None, :] + h * p.f(x[:, None, :], w[:, None], p.A[None])
        fy = y[:, None, :] + h * p.g(y[:, None, :], z[:, None], p.B[None])
        fx = np.clip(fx, p.Qx[:, 0], p.Qx[:, 1])
        fy = np.clip(fy, p.Qy[:, 0], p.Qy[:, 1])
        wn, _ = relay_step(x[:, None, 0], fx[..., 0], w[:, None], p.rho)
        zn, _ = relay_step(y[:, None, 0], fy[..., 0], z[:, None], p.eta)
        ix, wx = multilinear(g.nodes_x, fx)
        iy, wy = multilinear(g.nodes_y, fy)
        sidx = (wn[:, :, None] + 1) + (zn[:, None, :] + 1) // 2
        vals = self._full[sidx[..., None, None], ix[:, :, None, :, None], iy[:, None, :, None, :]]
        interp = np.einsum("bpqkl,bpk,bql->bpq", vals, wx, wy)
        cost = p.ell(x[:, None, None, :], y[:, None, None, :], w[:, None, None], z[:, None, None],
                     p.A[None, :, None, :], p.B[None, None, :, :])
        return self.d * interp + h * cost, wn, zn

    def q_values(self, x, y, w, z) -> np.ndarray:
        """One-step lookahead values for every control pair, shape (B, Na, Nb)."""
        return self.lookahead(x, y, w, z)[0]

    def control_indices(self, x, y, w, z):
        """Feedback control indices for a batch of states.

        The decision mirrors one update of the scheme.  The local game is
        played over controls that keep the state in its sector.  A player
        leaves only when the exit rule selects that player's switched-sector
        value: ``min`` for X, ``max`` for Y, the median when both can leave.
        """
        x, y, w, z = self._batch(x, y, w, z)
        Q, wn, zn = self.lookahead(x, y, w, z)
        exit_a = wn != w[:, None]
        exit_b = zn != z[:, None]
        Qm = np.where(exit_a[:, :, None], np.inf, np.where(exit_b[:, None, :], -np.inf, Q))
        rows = np.arange(len(Q))
        with np.errstate(invalid="ignore"):
            if self.config.value_kind == "lower":
                inner = Qm.min(axis=1)
                ib = _first_argmax(inner, axis=1)
                I = inner[rows, ib]
                ia = _first_argmin(Qm[rows, :, ib], axis=1)
            else:
                inner = Qm.max(axis=2)
                ia = _first_argmin(inner, axis=1)
                I = inner[rows, ia]
                ib = _first_argmax(Qm[rows, ia, :], axis=1)
        has_x, has_y = exit_a.any(axis=1), exit_b.any(axis=1)
        ex = np.where(has_x, self._value_masked(x, y, -w, z, has_x), np.inf)
        ey = np.where(has_y, self._value_masked(x, y, w, -z, has_y), -np.inf)
        # Each player leaves exactly when leaving strictly improves its side:
        # X-only min(ex, I), Y-only max(ey, I).  For a compatible game
        # (ey <= ex) this coincides with the median rule median(ey, I, ex);
        # off the grid the ordering can fail at the O(h) level, and acting on
        # each player's own gain keeps either side from waiting on the other.
        x_leaves = ex < I
        y_leaves = ey > I
        if np.any(x_leaves):
            r = np.flatnonzero(x_leaves)
            cand = np.where(exit_a[r], Q[r, :, ib[r]], np.inf)
            ia[r] = _first_argmin(cand, axis=1)
        if np.any(y_leaves):
            r = np.flatnonzero(y_leaves)
            cand = np.where(exit_b[r], Q[r, ia[r], :], -np.inf)
            ib[r] = _first_argmax(cand, axis=1)
        return ia, ib

    def best_response_x(self, x, y, w, z, ib):
        """Minimizer's reply to known opponent control indices ``ib``."""
        x, y, w, z = self._batch(x, y, w, z)
        Q, wn, zn = self.lookahead(x, y, w, z)
        rows = np.arange(len(Q))
        ib = np.asarray(ib)
        col = Q[rows, :, ib]
        exit_a = wn != w[:, None]
        stay = np.where(exit_a, np.inf, col)
        leave = np.where(exit_a, col, np.inf)
        ia = _first_argmin(stay, axis=1)
        has_x = exit_a.any(axis=1)
        ex = np.where(has_x, self._value_masked(x, y, -w, zn[rows, ib], has_x), np.inf)
        go = ex < stay.min(axis=1)
        ia[go] = _first_argmin(leave[go], axis=1)
        return ia

    def best_response_y(self, x, y, w, z, ia):
        """Maximizer's reply to known opponent control indices ``ia``."""
        x, y, w, z = self._batch(x, y, w, z)
        Q, wn, zn = self.lookahead(x, y, w, z)
        rows = np.arange(len(Q))
        ia = np.asarray(ia)
        row = Q[rows, ia, :]
        exit_b = zn != z[:, None]
        stay = np.where(exit_b, -np.inf, row)
        leave = np.where(exit_b, row, -np.inf)
        ib = _first_argmax(stay, axis=1)
        has_y = exit_b.any(axis=1)
        ey = np.where(has_y, self._value_masked(x, y, wn[rows, ia], -z, has_y), -np.inf)
        go = ey > stay.max(axis=1)
        ib[go] = _first_argmax(leave[go], axis=1)
        return ib

    def _value_masked(self, x, y, w, z, mask):
        out = np.zeros(len(x))
        if np.any(mask):
            out[mask] = self.value(x[mask], y[mask], w[mask], z[mask])
        return out

    def value(self, x, y, w, z) -> np.ndarray:
        """Interpolated value at a batch of states."""
        x, y, w, z = self._batch(x, y, w, z)
        g = self.grid
        ix, wx = multilinear(g.nodes_x, x)
        iy, wy = multilinear(g.nodes_y, y)
        sidx = (w + 1) + (z + 1) // 2
        vals = self._full[sidx[:, None, None], ix[:, :, None], iy[:, None, :]]
        return np.einsum("bkl,bk,bl->b", vals, wx, wy)


def feedback_controls(policy: FeedbackPolicy, s: HybridState):
    """Control values (a, b) chosen by the policy at state ``s``."""
    s.check(policy.problem)
    ia, ib = policy.control_indices(s.x, s.y, s.w, s.z)
    return policy.problem.A[ia[0]], policy.problem.B[ib[0]]


def _horizon(policy, T, dt):
    lam = policy.problem.lam
    T = 40.0 / lam if T is None else T
    dt = policy.grid.h if dt is None else dt
    return T, dt


def closed_loop_value(policy: FeedbackPolicy, s0: HybridState, T: float | None = None,
                      dt: float | None = None) -> float:
    """Discounted cost of the rollout where both players follow the policy."""
    T, dt = _horizon(policy, T, dt)
    if policy.problem.lam * T < 35:
        raise ValueError("horizon too short: need lambda*T >= 35")
    memo = {}

    def decide(k, st):
        if k not in memo:
            memo.clear()
            memo[k] = feedback_controls(policy, st)
        return memo[k]

    traj = simulate(policy.problem, s0, lambda k, st: decide(k, st)[0],
                    lambda k, st: decide(k, st)[1], T, dt)
    return discounted_cost(policy.problem, traj)


def _states_arrays(states):
    x = np.stack([s.x for s in states])
    y = np.stack([s.y for s in states])
    w = np.array([s.w for s in states])
    z = np.array([s.z for s in states])
    return x, y, w, z


def closed_loop_values(policy: FeedbackPolicy, states, T: float | None = None,
                       dt: float | None = None) -> np.ndarray:
    """Batched :func:`closed_loop_value` over many start states."""
    T, dt = _horizon(policy, T, dt)
    p = policy.problem
    for s in states:
        s.check(p)
    check_step_size(p, dt)
    A, B = p.A, p.B

    def controller(k, x, y, w, z):
        ia, ib = policy.control_indices(x, y, w, z)
        return A[ia], B[ib]

    x, y, w, z = _states_arrays(states)
    return integrate_batch(p, x, y, w, z, controller, math.ceil(T / dt - 1e-9), dt)["cost"]


def random_dwell_sequences(rng, count: int, nsteps: int, nchoices: int, dwell: int) -> np.ndarray:
    blocks = math.ceil(nsteps / dwell)
    picks = rng.integers(0, nchoices, size=(count, blocks))
    return np.repeat(picks, dwell, axis=1)[:, :nsteps]


def adversarial_gaps(policy: FeedbackPolicy, states, trials: int, T: float | None = None,
                     dt: float | None = None, dwell: int = 5, seed: int = 0) -> np.ndarray:
    """Gaps of :func:`adversarial_check` for many start states, shape (S, trials).

    Every start state sees the same opponent sequences (drawn from ``seed``),
    and all rollouts are integrated together.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    T, dt = _horizon(policy, T, dt)
    p = policy.problem
    for s in states:
        s.check(p)
    check_step_size(p, dt)
    nsteps = math.ceil(T / dt - 1e-9)
    lower = policy.config.value_kind == "lower"
    seq = random_dwell_sequences(np.random.default_rng(seed), trials, nsteps,
                                 len(p.B) if lower else len(p.A), dwell)
    ns = len(states)
    seq = np.tile(seq, (ns, 1))

    def controller(k, x, y, w, z):
        if lower:
            ib = seq[:, k]
            ia = policy.best_response_x(x, y, w, z, ib)
        else:
            ia = seq[:, k]
            ib = policy.best_response_y(x, y, w, z, ia)
        return p.A[ia], p.B[ib]

    x, y, w, z = _states_arrays(states)
    rep = lambda arr: np.repeat(arr, trials, axis=0)
    costs = integrate_batch(p, rep(x), rep(y), rep(w), rep(z), controller, nsteps, dt)["cost"]
    costs = costs.reshape(ns, trials)
    v0 = policy.value(x, y, w, z)[:, None]
    return costs - v0 if lower else v0 - costs


def adversarial_check(policy: FeedbackPolicy, s0: HybridState, trials: int,
                      T: float | None = None, dt: float | None = None, dwell: int = 5,
                      seed: int = 0) -> float:
    """Largest observed advantage a random opponent gains against the policy.

    For the lower value the minimizer keeps its feedback (a best response to
    the current opponent control) while the maximizer plays random
    piecewise-constant controls; the gap is ``cost - V(s0)``.  For the upper
    value the roles swap and the gap is ``V(s0) - cost``.
    """
    return float(np.max(adversarial_gaps(policy, [s0], trials, T, dt, dwell, seed)))


def start_states(problem, points_per_axis: int = 3) -> list[HybridState]:
    """A deterministic grid of admissible start states over the first axes of Q.

    Other coordinates sit at the centre of Q.  Modes cycle through the four
    sectors, falling back to an admissible one.
    """
    def axis_points(box):
        lo, hi = box
        return lo + (hi - lo) * (np.arange(points_per_axis) + 1) / (points_per_axis + 1)

    cx = problem.Qx.mean(axis=1)
    cy = problem.Qy.mean(axis=1)
    modes = [(1, 1), (-1, 1), (1, -1), (-1, -1)]
    out = []
    k = 0
    for x1 in axis_points(problem.Qx[0]):
        for y1 in axis_points(problem.Qy[0]):
            x = cx.copy()
            y = cy.copy()
            x[0], y[0] = x1, y1
            for shift in range(4):
                w, z = modes[(k + shift) % 4]
                st = HybridState(x, y, w, z)
                if st.admissible(problem):
                    out.append(st)
                    break
            k += 1
    return out
