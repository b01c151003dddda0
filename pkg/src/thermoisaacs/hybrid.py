"""Explicit Euler integration of the two relay-switched systems."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .errors import InadmissibleInitialState, StepTooLarge
from .problem import GameProblem
from .relay import is_admissible, relay_step

logger = logging.getLogger(__name__)

__all__ = [
    "HybridState",
    "SwitchingEvent",
    "Trajectory",
    "simulate",
    "discounted_cost",
    "zeno_bound",
    "check_step_size",
    "integrate_batch",
]


@dataclass(frozen=True)
class HybridState:
    x: np.ndarray
    y: np.ndarray
    w: int
    z: int

    def __post_init__(self):
        object.__setattr__(self, "x", np.atleast_1d(np.asarray(self.x, dtype=float)))
        object.__setattr__(self, "y", np.atleast_1d(np.asarray(self.y, dtype=float)))
        if self.w not in (-1, 1) or self.z not in (-1, 1):
            raise InadmissibleInitialState("switching variables must be -1 or 1")

    def admissible(self, problem: GameProblem) -> bool:
        return (is_admissible(self.x[0], self.w, problem.rho)
                and is_admissible(self.y[0], self.z, problem.eta))

    def check(self, problem: GameProblem) -> "HybridState":
        if self.x.shape != (problem.n,) or self.y.shape != (problem.m,):
            raise InadmissibleInitialState(
                f"state dimensions {self.x.shape}, {self.y.shape} do not match (n, m) = "
                f"({problem.n}, {problem.m})")
        if not self.admissible(problem):
            raise InadmissibleInitialState(
                f"(x1={self.x[0]}, w={self.w}), (y1={self.y[0]}, z={self.z}) is outside the sector")
        return self


@dataclass(frozen=True)
class SwitchingEvent:
    time: float
    kind: str          # "X_only" | "Y_only" | "simultaneous"
    new_wz: tuple[int, int]


@dataclass(frozen=True)
class Trajectory:
    dt: float
    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    ws: np.ndarray
    zs: np.ndarray
    alphas: np.ndarray
    betas: np.ndarray
    events: tuple[SwitchingEvent, ...] = ()
    clamp_count: int = 0

    @property
    def states(self) -> list[HybridState]:
        return [HybridState(x, y, int(w), int(z))
                for x, y, w, z in zip(self.xs, self.ys, self.ws, self.zs)]

    def __len__(self):
        return len(self.times)


def zeno_bound(problem: GameProblem, T: float, M: float | None = None) -> int:
    """A priori bound on the number of switching events on [0, T]."""
    if M is None:
        M = problem.dynamics_bound
    band = min(problem.rho.width, problem.eta.width)
    return 2 * (math.ceil(T * M / band) + 1)


def check_step_size(problem: GameProblem, dt: float) -> None:
    M = problem.dynamics_bound
    if dt * M > problem.rho.width / 2 or dt * M > problem.eta.width / 2:
        raise StepTooLarge(
            f"dt*M = {dt * M:.6g} exceeds half a hysteresis band "
            f"({problem.rho.width / 2:.6g}, {problem.eta.width / 2:.6g})")


def euler_step(problem: GameProblem, x, y, w, z, a, b, dt):
    """One Euler step for a batch of states (leading axis), with relay updates.

    Returns new ``(x, y, w, z)``, the in-step crossing fractions for each
    player (NaN where no switch happened) and the number of clamped states.
    """
    xn = x + dt * problem.f(x, w, a)
    yn = y + dt * problem.g(y, z, b)
    cx = np.clip(xn, problem.Qx[:, 0], problem.Qx[:, 1])
    cy = np.clip(yn, problem.Qy[:, 0], problem.Qy[:, 1])
    nclamp = int(np.count_nonzero(np.any(cx != xn, axis=-1) | np.any(cy != yn, axis=-1)))
    wn, fx = relay_step(x[..., 0], cx[..., 0], w, problem.rho)
    zn, fy = relay_step(y[..., 0], cy[..., 0], z, problem.eta)
    return cx, cy, wn, zn, fx, fy, nclamp


ControlSource = Union[Sequence, np.ndarray, Callable]


def _control_fn(src: ControlSource, ctrls: np.ndarray, nsteps: int, label: str):
    if callable(src):
        return src
    arr = np.asarray(src, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if len(arr) < nsteps:
        raise ValueError(f"{label} has {len(arr)} entries, need at least {nsteps}")
    if arr.shape[1] != ctrls.shape[1]:
        raise ValueError(f"{label} controls have width {arr.shape[1]}, expected {ctrls.shape[1]}")
    return lambda k, state: arr[k]


def integrate_batch(problem: GameProblem, x0, y0, w0, z0, controller, nsteps: int, dt: float,
                    record: bool = False):
    """Integrate a batch of trajectories driven by ``controller(k, x, y, w, z)``.

    The controller returns control value arrays of shape (B, ka) and (B, kb).
    Returns a dict with the discounted left-endpoint cost of each trajectory
    and, when ``record`` is set, the full state and crossing histories.
    """
    x = np.array(x0, dtype=float)
    y = np.array(y0, dtype=float)
    w = np.array(w0, dtype=int)
    z = np.array(z0, dtype=int)
    cost = np.zeros(len(x))
    clamps = 0
    hist = {"x": [x], "y": [y], "w": [w], "z": [z], "a": [], "b": [], "fx": [], "fy": []}
    for k in range(nsteps):
        a, b = controller(k, x, y, w, z)
        a = np.asarray(a, dtype=float).reshape(len(x), -1)
        b = np.asarray(b, dtype=float).reshape(len(x), -1)
        lv = problem.ell(x, y, w, z, a, b)
        cost += math.exp(-problem.lam * k * dt) * lv * dt
        x, y, w, z, fx, fy, nc = euler_step(problem, x, y, w, z, a, b, dt)
        clamps += nc
        if record:
            for key, val in (("x", x), ("y", y), ("w", w), ("z", z), ("a", a), ("b", b),
                             ("fx", fx), ("fy", fy)):
                hist[key].append(val)
    out = {"cost": cost, "clamps": clamps, "final": (x, y, w, z)}
    if record:
        out.update({key: np.stack(val, axis=1) for key, val in hist.items() if val})
    return out


def simulate(problem: GameProblem, s0: HybridState, alpha: ControlSource, beta: ControlSource,
             T: float, dt: float) -> Trajectory:
    """Integrate one trajectory under open-loop sequences or feedback callables.

    Callables are invoked as ``alpha(k, state)`` with the current
    :class:`HybridState` and must return a control value.
    """
    if not (T > 0 and dt > 0):
        raise ValueError("T and dt must be positive")
    s0.check(problem)
    check_step_size(problem, dt)
    nsteps = math.ceil(T / dt - 1e-9)
    afn = _control_fn(alpha, problem.A, nsteps, "alpha")
    bfn = _control_fn(beta, problem.B, nsteps, "beta")

    def controller(k, x, y, w, z):
        st = HybridState(x[0], y[0], int(w[0]), int(z[0]))
        return np.atleast_1d(afn(k, st))[None], np.atleast_1d(bfn(k, st))[None]

    res = integrate_batch(problem, s0.x[None], s0.y[None], [s0.w], [s0.z], controller,
                          nsteps, dt, record=True)
    if res["clamps"]:
        logger.warning("%d integration steps left the cube Q and were clamped", res["clamps"])
    ws, zs = res["w"][0], res["z"][0]
    fx, fy = res["fx"][0], res["fy"][0]
    events = []
    for k in range(nsteps):
        hx, hy = not np.isnan(fx[k]), not np.isnan(fy[k])
        if not (hx or hy):
            continue
        if hx and hy:
            kind, frac = "simultaneous", max(fx[k], fy[k])
        elif hx:
            kind, frac = "X_only", fx[k]
        else:
            kind, frac = "Y_only", fy[k]
        events.append(SwitchingEvent(float(k * dt + frac * dt), kind,
                                     (int(ws[k + 1]), int(zs[k + 1]))))
    xs, ys = res["x"][0], res["y"][0]
    lo_ok = np.where(ws == -1, xs[:, 0] <= problem.rho.hi, xs[:, 0] >= problem.rho.lo)
    ly_ok = np.where(zs == -1, ys[:, 0] <= problem.eta.hi, ys[:, 0] >= problem.eta.lo)
    assert np.all(lo_ok) and np.all(ly_ok), "sector invariant violated along trajectory"
    assert len(events) <= zeno_bound(problem, T), "switch count exceeds the a priori bound"
    return Trajectory(dt=dt, times=dt * np.arange(nsteps + 1), xs=xs, ys=ys, ws=ws, zs=zs,
                      alphas=res["a"][0], betas=res["b"][0], events=tuple(events),
                      clamp_count=res["clamps"])


def discounted_cost(problem: GameProblem, traj: Trajectory, alpha=None, beta=None,
                    T: float | None = None) -> float:
    """Left-endpoint quadrature of the discounted running cost along ``traj``."""
    alpha = traj.alphas if alpha is None else np.asarray(alpha, dtype=float).reshape(len(alpha), -1)
    beta = traj.betas if beta is None else np.asarray(beta, dtype=float).reshape(len(beta), -1)
    nsteps = len(traj) - 1
    if T is not None:
        nsteps = min(nsteps, math.ceil(T / traj.dt - 1e-9))
    k = np.arange(nsteps)
    lv = problem.ell(traj.xs[k], traj.ys[k], traj.ws[k], traj.zs[k], alpha[k], beta[k])
    return float(np.sum(np.exp(-problem.lam * k * traj.dt) * lv) * traj.dt)
