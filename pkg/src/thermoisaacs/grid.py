"""Tensor-product node grids on Q with per-sector node classification.

Node ids used by the public functions are flat C-order indices into the full
x-grid (resp. y-grid).  Each sector's node set is a sub-box of the full grid
truncated on the first axis, so sector-local arrays are plain slices.
"""

from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DiscreteZenoViolation, EmptyAdmissibleSet, InadmissibleControl
from .problem import MODES, GameProblem
from .relay import RelayConfig

logger = logging.getLogger(__name__)

__all__ = [
    "InterpWeights",
    "PlayerSector",
    "SectorGrid",
    "build_axis",
    "interp_weights",
    "classify_nodes",
    "build_grid",
    "foot_weights",
    "admissible_controls",
]

_SNAP = 1e-9


def build_axis(lo: float, hi: float, count: int, required=()) -> np.ndarray:
    """Uniform nodes on [lo, hi] with every ``required`` value present exactly.

    A node within a tiny relative distance of a required value is snapped onto
    it; otherwise the value is inserted and a warning is emitted.
    """
    if count < 2:
        raise ValueError("an axis needs at least two nodes")
    nodes = np.linspace(lo, hi, count)
    span = hi - lo
    for r in required:
        k = int(np.argmin(np.abs(nodes - r)))
        if abs(nodes[k] - r) <= _SNAP * span:
            nodes[k] = r
        else:
            warnings.warn(f"inserting threshold {r} as an extra node; spacing is no longer uniform",
                          stacklevel=2)
            nodes = np.sort(np.append(nodes, r))
    return nodes


def axis_locate(nodes: np.ndarray, p: np.ndarray):
    """Cell index and fractional position of points ``p`` on a sorted axis (clamped)."""
    p = np.clip(p, nodes[0], nodes[-1])
    k = np.clip(np.searchsorted(nodes, p, side="right") - 1, 0, len(nodes) - 2)
    t = (p - nodes[k]) / (nodes[k + 1] - nodes[k])
    return k, np.clip(t, 0.0, 1.0)


def multilinear(axes: list[np.ndarray], pts: np.ndarray):
    """Corner flat indices and weights of multilinear interpolation.

    ``pts`` has shape (..., dim); returns arrays of shape (..., 2**dim).
    Points outside the box are clamped onto it.
    """
    dim = len(axes)
    shape = tuple(len(ax) for ax in axes)
    ks, ts = zip(*(axis_locate(axes[d], pts[..., d]) for d in range(dim)))
    idx, wts = [], []
    for corner in itertools.product((0, 1), repeat=dim):
        flat = np.zeros(pts.shape[:-1], dtype=np.int64)
        wt = np.ones(pts.shape[:-1])
        for d, c in enumerate(corner):
            flat = flat * shape[d] + ks[d] + c
            wt = wt * (ts[d] if c else 1.0 - ts[d])
        idx.append(flat)
        wts.append(wt)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


@dataclass(frozen=True)
class InterpWeights:
    node_ids: np.ndarray
    coeffs: np.ndarray
    clamped: bool = False

    def __post_init__(self):
        if np.any(self.coeffs < 0) or abs(float(np.sum(self.coeffs)) - 1.0) > 1e-12:
            raise ValueError("interpolation weights must be convex")


def interp_weights(axes, point) -> InterpWeights:
    """Convex multilinear weights of ``point`` over a tensor grid given by ``axes``."""
    axes = [np.asarray(ax, dtype=float) for ax in axes]
    point = np.asarray(point, dtype=float).reshape(len(axes))
    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])
    clamped = bool(np.any(point < lo) | np.any(point > hi))
    idx, wts = multilinear(axes, np.clip(point, lo, hi))
    wts = wts / wts.sum()
    return InterpWeights(idx, wts, clamped)


@dataclass
class PlayerSector:
    """Node set of one player in one mode, with its one-step data."""

    mode: int
    start: int                      # first-axis slice [start, stop) of the full grid
    stop: int
    shape: tuple[int, ...]
    axes: list[np.ndarray]          # sector axes (first axis truncated)
    coords: np.ndarray              # (Ni, dim)
    global_ids: np.ndarray          # (Ni,) flat ids in the full grid
    switch: np.ndarray              # (Ni,) bool
    admissible: np.ndarray          # (Ni, Nc) bool
    interp: list                    # per control: csr (Ni, Ni)
    feet: np.ndarray                # (Ni, Nc, dim) clamped foot points
    clamped: np.ndarray             # (Ni, Nc) bool, foot left Q
    to_other: np.ndarray = field(default=None)  # (Ni,) local id in the opposite mode, -1 if absent

    @property
    def size(self) -> int:
        return len(self.coords)


def _full_coords(axes: list[np.ndarray]) -> np.ndarray:
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=-1)


def _player_sector(dyn, ctrls, full_axes, relay: RelayConfig, mode: int, h: float) -> PlayerSector:
    first = full_axes[0]
    if mode == 1:
        start, stop = int(np.searchsorted(first, relay.lo, side="left")), len(first)
    else:
        start, stop = 0, int(np.searchsorted(first, relay.hi, side="right"))
    axes = [first[start:stop]] + list(full_axes[1:])
    shape = tuple(len(ax) for ax in axes)
    if shape[0] < 2:
        raise ValueError("sector needs at least two nodes on the switching axis")
    coords = _full_coords(axes)
    full_shape = tuple(len(ax) for ax in full_axes)
    local_multi = np.stack(np.unravel_index(np.arange(len(coords)), shape), axis=-1)
    local_multi[:, 0] += start
    global_ids = np.ravel_multi_index(tuple(local_multi.T), full_shape)

    vel = dyn(coords[:, None, :], np.full((1, 1), mode), ctrls[None, :, :])
    raw = coords[:, None, :] + h * vel
    # sector membership is decided on the first coordinate only
    admissible = raw[..., 0] >= relay.lo if mode == 1 else raw[..., 0] <= relay.hi
    switch = ~np.all(admissible, axis=1)
    qlo = np.array([ax[0] for ax in full_axes])
    qhi = np.array([ax[-1] for ax in full_axes])
    feet = np.clip(raw, qlo, qhi)
    clamped = np.any(feet != raw, axis=-1)

    lo = np.array([ax[0] for ax in axes])
    hi = np.array([ax[-1] for ax in axes])
    inside = np.clip(feet, lo, hi)
    interp = []
    n = len(coords)
    for c in range(ctrls.shape[0]):
        idx, wts = multilinear(axes, inside[:, c, :])
        rows = np.repeat(np.arange(n), idx.shape[1])
        mat = sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n, n))
        mat.sum_duplicates()
        interp.append(mat)
    return PlayerSector(mode=mode, start=start, stop=stop, shape=shape, axes=axes, coords=coords,
                        global_ids=global_ids, switch=switch, admissible=admissible,
                        interp=interp, feet=feet, clamped=clamped & admissible)


@dataclass
class SectorGrid:
    nodes_x: list[np.ndarray]
    nodes_y: list[np.ndarray]
    h: float
    X: dict                 # mode -> PlayerSector
    Y: dict
    problem: GameProblem = field(repr=False)
    warnings: list = field(default_factory=list)
    clamp_events: int = 0

    @property
    def shape_x(self):
        return tuple(len(ax) for ax in self.nodes_x)

    @property
    def shape_y(self):
        return tuple(len(ax) for ax in self.nodes_y)

    def sector_shape(self, w: int, z: int) -> tuple[int, int]:
        return self.X[w].size, self.Y[z].size

    def _player(self, player):
        return self.X if player == "X" else self.Y

    # index sets, as global node ids
    def I(self, w):
        return self.X[w].global_ids

    def I_switch(self, w):
        return self.X[w].global_ids[self.X[w].switch]

    def I_in(self, w):
        return self.X[w].global_ids[~self.X[w].switch]

    def J(self, z):
        return self.Y[z].global_ids

    def J_switch(self, z):
        return self.Y[z].global_ids[self.Y[z].switch]

    def J_in(self, z):
        return self.Y[z].global_ids[~self.Y[z].switch]

    def local_index(self, player: str, mode: int, gid: int) -> int:
        sec = self._player(player)[mode]
        pos = np.searchsorted(sec.global_ids, gid)
        if pos >= sec.size or sec.global_ids[pos] != gid:
            raise KeyError(f"node {gid} is not in the {player} sector of mode {mode}")
        return int(pos)

    def coords_x(self, gid) -> np.ndarray:
        return np.array([ax[k] for ax, k in zip(self.nodes_x, np.unravel_index(gid, self.shape_x))])

    def coords_y(self, gid) -> np.ndarray:
        return np.array([ax[k] for ax, k in zip(self.nodes_y, np.unravel_index(gid, self.shape_y))])

    @property
    def n_double_switch(self) -> int:
        return sum(int(self.X[w].switch.sum() * self.Y[z].switch.sum()) for w in MODES for z in MODES)


def _link(a: PlayerSector, b: PlayerSector) -> np.ndarray:
    pos = np.searchsorted(b.global_ids, a.global_ids)
    pos = np.clip(pos, 0, b.size - 1)
    return np.where(b.global_ids[pos] == a.global_ids, pos, -1)


def classify_nodes(problem: GameProblem, nodes_x, nodes_y, h: float) -> SectorGrid:
    """Split the nodes into sector index sets and precompute the foot-point data."""
    if not h > 0:
        raise ValueError("time step h must be positive")
    nodes_x = [np.asarray(ax, dtype=float) for ax in nodes_x]
    nodes_y = [np.asarray(ax, dtype=float) for ax in nodes_y]
    for thr in (problem.rho.lo, problem.rho.hi):
        if not np.any(nodes_x[0] == thr):
            raise ValueError(f"threshold {thr} is not a node of the first x-axis")
    for thr in (problem.eta.lo, problem.eta.hi):
        if not np.any(nodes_y[0] == thr):
            raise ValueError(f"threshold {thr} is not a node of the first y-axis")

    X = {md: _player_sector(problem.f, problem.A, nodes_x, problem.rho, md, h) for md in MODES}
    Y = {md: _player_sector(problem.g, problem.B, nodes_y, problem.eta, md, h) for md in MODES}
    grid_warnings = []
    for label, secs, relay in (("X", X, problem.rho), ("Y", Y, problem.eta)):
        # a single step may not traverse the whole band
        speed = max(float(np.max(np.abs(s.feet[..., 0] - s.coords[:, None, 0]))) for s in secs.values())
        if speed >= relay.width:
            raise DiscreteZenoViolation(
                f"{label}: one step of length h={h} moves the switching coordinate by up to "
                f"{speed:.6g} >= band width {relay.width:.6g}")
        for md in MODES:
            secs[md].to_other = _link(secs[md], secs[-md])
            sw = secs[md].switch
            other = secs[-md]
            lk = secs[md].to_other[sw]
            if np.any(lk < 0) or np.any(other.switch[lk[lk >= 0]]):
                msg = (f"{label}: some switch nodes of mode {md} are switch nodes of mode {-md} "
                       "as well; consider a smaller h")
                grid_warnings.append(msg)
                logger.warning(msg)
            if np.any(lk < 0):
                raise DiscreteZenoViolation(f"{label}: switch nodes of mode {md} missing from mode {-md}")
    grid = SectorGrid(nodes_x=nodes_x, nodes_y=nodes_y, h=float(h), X=X, Y=Y, problem=problem,
                      warnings=grid_warnings)
    nclamp = sum(int(s.clamped.sum()) for s in list(X.values()) + list(Y.values()))
    if nclamp:
        logger.info("%d admissible foot points were clamped onto the boundary of Q", nclamp)
    grid.clamp_events = nclamp
    return grid


def build_grid(problem: GameProblem, nx=None, ny=None, h=None) -> SectorGrid:
    """Build a uniform tensor grid (thresholds inserted as nodes) and classify it."""
    spec = problem.grid
    nx = tuple(nx if nx is not None else spec.nx)
    ny = tuple(ny if ny is not None else spec.ny)
    h = float(h if h is not None else spec.h)
    if len(nx) != problem.n or len(ny) != problem.m:
        raise ValueError("grid node counts must match the state dimensions")
    axes_x = [build_axis(*problem.Qx[d], nx[d], (problem.rho.lo, problem.rho.hi) if d == 0 else ())
              for d in range(problem.n)]
    axes_y = [build_axis(*problem.Qy[d], ny[d], (problem.eta.lo, problem.eta.hi) if d == 0 else ())
              for d in range(problem.m)]
    return classify_nodes(problem, axes_x, axes_y, h)


def admissible_controls(grid: SectorGrid, i: int, w: int, player: str = "X",
                        indices: bool = False) -> np.ndarray:
    """Controls whose one-step foot point from node ``i`` stays in the sector of mode ``w``."""
    sec = grid._player(player)[w]
    loc = grid.local_index(player, w, i)
    mask = sec.admissible[loc]
    if not np.any(mask):
        raise EmptyAdmissibleSet(
            f"{player}: no admissible control at node {i} in mode {w} (h too large or "
            "controllability fails)")
    if indices:
        return np.flatnonzero(mask)
    ctrls = grid.problem.A if player == "X" else grid.problem.B
    return ctrls[mask]


def foot_weights(grid: SectorGrid, sector, i: int, j: int, a: int, b: int,
                 require_admissible: bool = True) -> tuple[InterpWeights, InterpWeights]:
    """Convex weights of the x- and y-foot points from nodes ``i``, ``j``.

    ``a`` and ``b`` index into the control sets.  Returned node ids are global.
    """
    w, z = sector
    out = []
    for player, mode, gid, c in (("X", w, i, a), ("Y", z, j, b)):
        sec = grid._player(player)[mode]
        loc = grid.local_index(player, mode, gid)
        if require_admissible and not sec.admissible[loc, c]:
            raise InadmissibleControl(f"{player}: control {c} leaves the sector of mode {mode} "
                                      f"from node {gid}")
        raw = sec.coords[loc] + grid.h * (grid.problem.f if player == "X" else grid.problem.g)(
            sec.coords[loc][None], np.full(1, mode),
            (grid.problem.A if player == "X" else grid.problem.B)[c][None])[0]
        wts = interp_weights(sec.axes, raw)
        if wts.clamped:
            grid.clamp_events += 1
        gids = sec.global_ids[wts.node_ids]
        out.append(InterpWeights(gids, wts.coeffs, wts.clamped))
    return out[0], out[1]
