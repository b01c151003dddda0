"""Semi-Lagrangian fixed-point solver for the four coupled Isaacs problems.

A value field holds one array per sector ``(w, z)``, indexed by the
sector-local x-node and y-node.  One sweep evaluates the discrete Isaacs
operator at every node and then applies the exit rules at switch nodes:

* X may exit: ``min(V(-w, z), I)``
* Y may exit: ``max(V(w, -z), I)``
* both may exit: the median of ``V(w, -z)``, ``I`` and ``V(-w, z)``
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyAdmissibleSet, MaxIterExceeded
from .grid import SectorGrid, foot_weights, multilinear
from .problem import MODES, SECTORS, GameProblem

logger = logging.getLogger(__name__)

__all__ = [
    "SolverConfig",
    "ValueField",
    "IterationStats",
    "IsaacsOperator",
    "local_isaacs",
    "apply_S",
    "apply_staged",
    "project_order",
    "solve",
]

KINDS = ("lower", "upper")
STAGINGS = ("plain_S", "staged_S3")
DISCOUNTS = ("one_minus_lambda_h", "exp_minus_lambda_h")


@dataclass(frozen=True)
class SolverConfig:
    value_kind: str = "lower"
    staging: str = "staged_S3"
    tol: float = 1e-8
    max_iter: int = 100_000
    discount_form: str = "one_minus_lambda_h"
    order_tol: float = 1e-12
    threads: int = 1

    def __post_init__(self):
        if self.value_kind not in KINDS:
            raise ValueError(f"value_kind must be one of {KINDS}")
        if self.staging not in STAGINGS:
            raise ValueError(f"staging must be one of {STAGINGS}")
        if self.discount_form not in DISCOUNTS:
            raise ValueError(f"discount_form must be one of {DISCOUNTS}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")

    def discount(self, lam: float, h: float) -> float:
        if self.discount_form == "exp_minus_lambda_h":
            return math.exp(-lam * h)
        if lam * h >= 1:
            raise ValueError(f"lambda*h = {lam * h} must be < 1 for the 1 - lambda*h discount")
        return 1.0 - lam * h

    def to_dict(self) -> dict:
        return {"value_kind": self.value_kind, "staging": self.staging, "tol": self.tol,
                "max_iter": self.max_iter, "discount_form": self.discount_form,
                "order_tol": self.order_tol}


@dataclass
class ValueField:
    grid: SectorGrid = field(repr=False)
    data: dict

    @classmethod
    def constant(cls, grid: SectorGrid, c: float) -> "ValueField":
        return cls(grid, {s: np.full(grid.sector_shape(*s), float(c)) for s in SECTORS})

    def copy(self) -> "ValueField":
        return ValueField(self.grid, {s: v.copy() for s, v in self.data.items()})

    def __getitem__(self, sector):
        return self.data[sector]

    def sup_diff(self, other: "ValueField") -> float:
        return max(float(np.max(np.abs(self.data[s] - other.data[s]))) for s in SECTORS)

    def min(self) -> float:
        return min(float(v.min()) for v in self.data.values())

    def max(self) -> float:
        return max(float(v.max()) for v in self.data.values())

    def at_node(self, i: int, j: int, w: int, z: int) -> float:
        li = self.grid.local_index("X", w, i)
        lj = self.grid.local_index("Y", z, j)
        return float(self.data[(w, z)][li, lj])

    def full_arrays(self) -> np.ndarray:
        """Stack of the four sectors embedded in the full grid (NaN off-sector).

        Shape (4, Kx, Ky) in the order of ``SECTORS``.
        """
        kx = int(np.prod(self.grid.shape_x))
        ky = int(np.prod(self.grid.shape_y))
        out = np.full((4, kx, ky), np.nan)
        for s_idx, (w, z) in enumerate(SECTORS):
            gx = self.grid.X[w].global_ids
            gy = self.grid.Y[z].global_ids
            out[s_idx][np.ix_(gx, gy)] = self.data[(w, z)]
        return out

    def value_at(self, x, y, w: int, z: int) -> float:
        """Multilinear interpolation of the sector field at an off-node point."""
        sx, sy = self.grid.X[w], self.grid.Y[z]
        ix, wx = multilinear(sx.axes, np.asarray(x, dtype=float)[None])
        iy, wy = multilinear(sy.axes, np.asarray(y, dtype=float)[None])
        vals = self.data[(w, z)][ix[0][:, None], iy[0][None, :]]
        return float(wx[0] @ vals @ wy[0])


@dataclass
class IterationStats:
    iterations: int = 0
    final_residual: float = math.inf
    empirical_contraction_factors: list = field(default_factory=list)
    projection_count: int = 0
    residuals: list = field(default_factory=list)
    projections_per_iteration: list = field(default_factory=list)
    converged: bool = False

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_residual": self.final_residual,
            "converged": self.converged,
            "projection_count": self.projection_count,
            "empirical_contraction_factors": self.empirical_contraction_factors,
            "residuals": self.residuals,
            "projections_per_iteration": self.projections_per_iteration,
        }


def _median3(a, b, c):
    return np.maximum(np.minimum(a, b), np.minimum(np.maximum(a, b), c))


class IsaacsOperator:
    """Vectorized discrete Isaacs operator and exit rules for one grid and config."""

    def __init__(self, grid: SectorGrid, config: SolverConfig):
        self.grid = grid
        self.config = config
        problem = grid.problem
        self.problem = problem
        self.h = grid.h
        self.d = config.discount(problem.lam, grid.h)
        for label, secs in (("X", grid.X), ("Y", grid.Y)):
            for md, sec in secs.items():
                empty = ~np.any(sec.admissible, axis=1)
                if np.any(empty):
                    gid = int(sec.global_ids[np.argmax(empty)])
                    raise EmptyAdmissibleSet(
                        f"{label}: no admissible control at node {gid} in mode {md}")
        self.cost = {}
        for w, z in SECTORS:
            xs = grid.X[w].coords
            ys = grid.Y[z].coords
            L = problem.ell(xs[None, None, :, None, :], ys[None, None, None, :, :],
                            np.full((1, 1, 1, 1), w), np.full((1, 1, 1, 1), z),
                            problem.A[:, None, None, None, :], problem.B[None, :, None, None, :])
            self.cost[(w, z)] = np.ascontiguousarray(
                np.broadcast_to(L, (len(problem.A), len(problem.B), len(xs), len(ys))))
        self.cost_min = min(float(L.min()) for L in self.cost.values())
        self.cost_max = max(float(L.max()) for L in self.cost.values())
        self._py = {z: grid.Y[z].interp for z in MODES}
        self._pool = ThreadPoolExecutor(config.threads) if config.threads > 1 else None

    # scheme-consistent invariant interval; equals [min ell, max ell] / lambda
    # for the default discount 1 - lambda*h
    @property
    def bounds(self) -> tuple[float, float]:
        scale = self.h / (1.0 - self.d)
        return self.cost_min * scale, self.cost_max * scale

    def q_table(self, V: ValueField, sector) -> np.ndarray:
        """One-step values for all control pairs, shape (Na, Nb, Ni, Nj)."""
        w, z = sector
        Vs = V.data[sector]
        Px = self.grid.X[w].interp
        Py = self._py[z]
        Q = np.empty(self.cost[sector].shape)
        for ia, P in enumerate(Px):
            Ut = (P @ Vs).T
            for ib, Pb in enumerate(Py):
                Q[ia, ib] = (Pb @ Ut).T
        Q *= self.d
        Q += self.h * self.cost[sector]
        return Q

    def local(self, V: ValueField, sector) -> np.ndarray:
        w, z = sector
        Q = self.q_table(V, sector)
        adm_a = self.grid.X[w].admissible.T[:, None, :, None]
        adm_b = self.grid.Y[z].admissible.T[None, :, None, :]
        if self.config.value_kind == "lower":
            inner = np.where(adm_a, Q, np.inf).min(axis=0)
            return np.where(adm_b[0], inner, -np.inf).max(axis=0)
        inner = np.where(adm_b, Q, -np.inf).max(axis=1)
        return np.where(adm_a[:, 0], inner, np.inf).min(axis=0)

    def local_all(self, V: ValueField) -> dict:
        if self._pool is not None:
            vals = list(self._pool.map(lambda s: self.local(V, s), SECTORS))
            return dict(zip(SECTORS, vals))
        return {s: self.local(V, s) for s in SECTORS}

    def exit_rows(self, nb: ValueField, I: dict, base: Optional[dict] = None) -> dict:
        """Apply the exit rules, reading switched-sector values from ``nb``.

        With ``base`` given, only the double-switch entries are recomputed and
        every other entry is copied from ``base``.
        """
        out = {}
        g = self.grid
        for w, z in SECTORS:
            sx, sy = g.X[w], g.Y[z]
            xs, ys = sx.switch, sy.switch
            S = I[(w, z)].copy() if base is None else base[(w, z)].copy()
            xi, yj = np.flatnonzero(xs), np.flatnonzero(ys)
            xin, yin = np.flatnonzero(~xs), np.flatnonzero(~ys)
            # switched-sector values at the same nodes
            vx = nb.data[(-w, z)][sx.to_other[xi], :]          # (nxs, Nj)
            vy = nb.data[(w, -z)][:, sy.to_other[yj]]           # (Ni, nys)
            Iv = I[(w, z)]
            if base is None:
                S[np.ix_(xi, yin)] = np.minimum(vx[:, yin], Iv[np.ix_(xi, yin)])
                S[np.ix_(xin, yj)] = np.maximum(vy[xin, :], Iv[np.ix_(xin, yj)])
            S[np.ix_(xi, yj)] = _median3(vy[xi, :], Iv[np.ix_(xi, yj)], vx[:, yj])
            out[(w, z)] = S
        return out

    def apply_S(self, V: ValueField, I: Optional[dict] = None) -> ValueField:
        I = self.local_all(V) if I is None else I
        return ValueField(self.grid, self.exit_rows(V, I))

    def apply_staged(self, V: ValueField) -> ValueField:
        I = self.local_all(V)
        V1 = ValueField(self.grid, self.exit_rows(V, I))
        V2 = ValueField(self.grid, self.exit_rows(V1, I, base=V1.data))
        return ValueField(self.grid, self.exit_rows(V2, I, base=V1.data))

    def step(self, V: ValueField) -> ValueField:
        if self.config.staging == "staged_S3":
            return self.apply_staged(V)
        return self.apply_S(V)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()


def _operator(grid: SectorGrid, config: SolverConfig) -> IsaacsOperator:
    cache = grid.__dict__.setdefault("_operators", {})
    key = (config.value_kind, config.discount_form)
    if key not in cache:
        cache[key] = IsaacsOperator(grid, SolverConfig(value_kind=config.value_kind,
                                                       discount_form=config.discount_form))
    return cache[key]


def local_isaacs(V: ValueField, sector, i: int, j: int, config: SolverConfig) -> float:
    """Discrete Isaacs value at global nodes ``i`` (x) and ``j`` (y), evaluated directly.

    This is the per-node transcription of the one-step max-min; the solver
    uses the vectorized :class:`IsaacsOperator` instead.
    """
    w, z = sector
    grid = V.grid
    problem = grid.problem
    d = config.discount(problem.lam, grid.h)
    A_adm = [int(k) for k in np.flatnonzero(grid.X[w].admissible[grid.local_index("X", w, i)])]
    B_adm = [int(k) for k in np.flatnonzero(grid.Y[z].admissible[grid.local_index("Y", z, j)])]
    if not A_adm or not B_adm:
        raise EmptyAdmissibleSet(f"empty admissible control set at nodes ({i}, {j}) in {sector}")
    xi, yj = grid.coords_x(i), grid.coords_y(j)
    table = np.empty((len(A_adm), len(B_adm)))
    for ka, a in enumerate(A_adm):
        for kb, b in enumerate(B_adm):
            mu, nu = foot_weights(grid, sector, i, j, a, b)
            interp = sum(cm * cn * V.at_node(int(gi), int(gj), w, z)
                         for gi, cm in zip(mu.node_ids, mu.coeffs)
                         for gj, cn in zip(nu.node_ids, nu.coeffs))
            cost = float(problem.ell(xi, yj, np.array(w), np.array(z), problem.A[a], problem.B[b]))
            table[ka, kb] = d * interp + grid.h * cost
    if config.value_kind == "lower":
        return float(table.min(axis=0).max())
    return float(table.max(axis=1).min())


def apply_S(V: ValueField, config: SolverConfig) -> ValueField:
    """One Jacobi sweep of the boundary-coupled map."""
    return _operator(V.grid, config).apply_S(V)


def apply_staged(V: ValueField, config: SolverConfig) -> ValueField:
    """Three-stage sweep: corner exit values re-read from the previous stage."""
    return _operator(V.grid, config).apply_staged(V)


def project_order(V: ValueField, tol: float = 0.0) -> tuple[ValueField, int]:
    """Sort violated chains V(w,-z) <= V(-w,-z) <= V(-w,z) at double-switch nodes.

    Returns the projected field and the number of chains that were rearranged.
    """
    grid = V.grid
    out = V.copy()
    count = 0
    for w, z in SECTORS:
        sx, sy = grid.X[w], grid.Y[z]
        xi, yj = np.flatnonzero(sx.switch), np.flatnonzero(sy.switch)
        if len(xi) == 0 or len(yj) == 0:
            continue
        oi, oj = sx.to_other[xi], sy.to_other[yj]
        lo = out.data[(w, -z)][np.ix_(xi, oj)]
        mid = out.data[(-w, -z)][np.ix_(oi, oj)]
        hi = out.data[(-w, z)][np.ix_(oi, yj)]
        bad = (lo > mid + tol) | (mid > hi + tol)
        if not np.any(bad):
            continue
        srt = np.sort(np.stack([lo, mid, hi]), axis=0)
        out.data[(w, -z)][np.ix_(xi, oj)] = np.where(bad, srt[0], lo)
        out.data[(-w, -z)][np.ix_(oi, oj)] = np.where(bad, srt[1], mid)
        out.data[(-w, z)][np.ix_(oi, yj)] = np.where(bad, srt[2], hi)
        count += int(bad.sum())
    return out, count


def chain_violation(V: ValueField) -> float:
    """Largest violation of the compatibility chain at double-switch nodes (0 if none)."""
    grid = V.grid
    worst = 0.0
    for w, z in SECTORS:
        sx, sy = grid.X[w], grid.Y[z]
        xi, yj = np.flatnonzero(sx.switch), np.flatnonzero(sy.switch)
        if len(xi) == 0 or len(yj) == 0:
            continue
        oi, oj = sx.to_other[xi], sy.to_other[yj]
        lo = V.data[(w, -z)][np.ix_(xi, oj)]
        mid = V.data[(-w, -z)][np.ix_(oi, oj)]
        hi = V.data[(-w, z)][np.ix_(oi, yj)]
        worst = max(worst, float(np.max(lo - mid)), float(np.max(mid - hi)))
    return worst


def solve(problem: GameProblem, grid: SectorGrid, config: SolverConfig = SolverConfig(),
          initial: Optional[ValueField] = None) -> tuple[ValueField, IterationStats]:
    """Iterate the configured map with order projection until the sup-norm step is below tol."""
    if grid.problem is not problem:
        raise ValueError("grid was built for a different problem")
    op = IsaacsOperator(grid, config)
    lo, hi = op.bounds
    slack = 1e-9 * max(1.0, abs(lo), abs(hi))
    V = initial.copy() if initial is not None else ValueField.constant(grid, lo)
    stats = IterationStats()
    q = config.discount(problem.lam, grid.h)
    prev = None
    try:
        for k in range(1, config.max_iter + 1):
            Vs = op.step(V)
            # A chain violation smaller than twice the a-posteriori distance
            # to the fixed point can still vanish by itself; only violations
            # beyond that are projected away.
            step = Vs.sup_diff(V)
            Vn, nproj = project_order(Vs, config.order_tol + 2.0 * q / (1.0 - q) * step)
            if Vn.min() < lo - slack or Vn.max() > hi + slack:
                raise AssertionError(
                    f"iterate left the invariant interval [{lo}, {hi}]: [{Vn.min()}, {Vn.max()}]")
            res = Vn.sup_diff(V)
            stats.residuals.append(res)
            stats.projections_per_iteration.append(nproj)
            stats.projection_count += nproj
            if prev is not None and prev > 0:
                stats.empirical_contraction_factors.append(res / prev)
            prev = res
            V = Vn
            stats.iterations = k
            stats.final_residual = res
            if res <= config.tol:
                stats.converged = True
                break
    finally:
        op.close()
    if not stats.converged:
        raise MaxIterExceeded(
            f"no convergence after {config.max_iter} iterations (residual {stats.final_residual:.3e})",
            residual=stats.final_residual, factors=stats.empirical_contraction_factors, field=V)
    logger.info("%s/%s converged in %d iterations, residual %.3e", config.value_kind,
                config.staging, stats.iterations, stats.final_residual)
    return V, stats
