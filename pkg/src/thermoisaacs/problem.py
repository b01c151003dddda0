"""Game instances: switched dynamics, running cost, controls and the cube Q.

All problem callables are vectorized.  With ``...`` standing for any
broadcastable batch shape:

* ``f(x[..., n], w[...], a[..., ka]) -> [..., n]``
* ``g(y[..., m], z[...], b[..., kb]) -> [..., m]``
* ``ell1(x, y, w, z, a) -> [...]`` and ``ell2(x, y, w, z, b) -> [...]``

The switching variable of each player follows the first coordinate of its
state.
"""

from __future__ import annotations

import functools
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ProblemSpecError
from .expr import Expression, vector_env, vector_names
from .relay import RelayConfig

logger = logging.getLogger(__name__)

MODES = (-1, 1)
SECTORS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True)
class GridSpec:
    nx: tuple[int, ...]
    ny: tuple[int, ...]
    h: float


@dataclass(frozen=True, eq=False)
class GameProblem:
    n: int
    m: int
    rho: RelayConfig
    eta: RelayConfig
    f: Callable
    g: Callable
    ell1: Callable
    ell2: Callable
    lam: float
    A: np.ndarray
    B: np.ndarray
    Qx: np.ndarray
    Qy: np.ndarray
    ell_coupled: Optional[Callable] = None
    grid: Optional[GridSpec] = None
    name: str = ""
    source: Optional[dict] = field(default=None, repr=False)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        A = A.reshape(len(A), -1)
        B = B.reshape(len(B), -1)
        Qx = np.asarray(self.Qx, dtype=float).reshape(self.n, 2)
        Qy = np.asarray(self.Qy, dtype=float).reshape(self.m, 2)
        for arr in (A, B, Qx, Qy):
            arr.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Qx", Qx)
        object.__setattr__(self, "Qy", Qy)
        if self.n < 1 or self.m < 1:
            raise ProblemSpecError("dimensions n and m must be positive")
        if len(A) == 0 or len(B) == 0:
            raise ProblemSpecError("control sets A and B must be nonempty")
        if not self.lam > 0:
            raise ProblemSpecError("discount lambda must be positive")
        if np.any(Qx[:, 0] >= Qx[:, 1]) or np.any(Qy[:, 0] >= Qy[:, 1]):
            raise ProblemSpecError("cube extents must satisfy lo < hi on every axis")
        if not (Qx[0, 0] < self.rho.lo and self.rho.hi < Qx[0, 1]):
            raise ProblemSpecError("thresholds rho must lie strictly inside the first axis of Qx")
        if not (Qy[0, 0] < self.eta.lo and self.eta.hi < Qy[0, 1]):
            raise ProblemSpecError("thresholds eta must lie strictly inside the first axis of Qy")

    def ell(self, x, y, w, z, a, b):
        """Full running cost, broadcasting over the leading axes."""
        out = self.ell1(x, y, w, z, a) + self.ell2(x, y, w, z, b)
        if self.ell_coupled is not None:
            out = out + self.ell_coupled(x, y, w, z, a, b)
        return out

    @property
    def is_decoupled(self) -> bool:
        return self.ell_coupled is None

    def in_cube(self, x, y, tol=1e-12) -> bool:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        return bool(np.all(x >= self.Qx[:, 0] - tol) and np.all(x <= self.Qx[:, 1] + tol)
                    and np.all(y >= self.Qy[:, 0] - tol) and np.all(y <= self.Qy[:, 1] + tol))

    @functools.cached_property
    def dynamics_bound(self) -> float:
        """Sampled sup of ||f|| and ||g|| over Q, both modes and all controls."""
        return sampled_bounds(self)["dynamics"]

    @functools.cached_property
    def first_component_bound(self) -> tuple[float, float]:
        """Sampled sup of |f_1| and |g_1| (the speeds along the switching axes)."""
        b = sampled_bounds(self)
        return b["f1"], b["g1"]


# ---------------------------------------------------------------------------
# problem files

def _broadcast(val, shape):
    return np.broadcast_to(np.asarray(val, dtype=float), shape)


def _dynamics_from_spec(spec: Any, dim: int, state: str, mode: str, ctrl: str, kctrl: int):
    if isinstance(spec, (str, int, float)):
        spec = {"kind": "expression", "expr": [spec]}
    elif isinstance(spec, list):
        spec = {"kind": "expression", "expr": spec}
    kind = spec.get("kind", "expression")
    if kind == "expression":
        exprs = spec["expr"]
        if isinstance(exprs, (str, int, float)):
            exprs = [exprs]
        if len(exprs) != dim:
            raise ProblemSpecError(f"dynamics for {state} needs {dim} components, got {len(exprs)}")
        names = vector_names(state, dim) + [mode] + vector_names(ctrl, kctrl)
        compiled = [Expression(e, names) for e in exprs]

        def fn(s, md, c):
            s = np.asarray(s, dtype=float)
            c = np.asarray(c, dtype=float)
            md = np.asarray(md, dtype=float)
            shape = np.broadcast_shapes(s.shape[:-1], md.shape, c.shape[:-1])
            env = {**vector_env(state, s), mode: md, **vector_env(ctrl, c)}
            return np.stack([_broadcast(e(env), shape) for e in compiled], axis=-1)
        return fn
    if kind in ("affine", "affine_family"):
        modes = spec["modes"]
        mats = {}
        for md in MODES:
            entry = modes.get(str(md)) or modes.get(f"{md:+d}")
            if entry is None:
                raise ProblemSpecError(f"affine dynamics missing mode {md}")
            c = np.asarray(entry.get("c", np.zeros(dim)), dtype=float).reshape(dim)
            D = np.asarray(entry.get("D", np.zeros((dim, dim))), dtype=float).reshape(dim, dim)
            E = np.asarray(entry.get("E", np.zeros((dim, kctrl))), dtype=float).reshape(dim, kctrl)
            mats[md] = (c, D, E)

        def fn(s, md, c):
            s = np.asarray(s, dtype=float)
            c = np.asarray(c, dtype=float)
            md = np.asarray(md)
            shape = np.broadcast_shapes(s.shape[:-1], md.shape, c.shape[:-1])
            out = np.zeros(shape + (dim,))
            for key, (c0, D, E) in mats.items():
                val = c0 + s @ D.T + c @ E.T
                out = np.where((md == key)[..., None], _broadcast(val, shape + (dim,)), out)
            return out
        fn.affine = mats
        return fn
    raise ProblemSpecError(f"unknown dynamics kind {kind!r}")


def _cost_from_spec(spec: Any, n: int, m: int, ctrl: str, kctrl: int, extra=None):
    if isinstance(spec, dict):
        spec = spec.get("expr", 0)
    names = vector_names("x", n) + vector_names("y", m) + ["w", "z"] + vector_names(ctrl, kctrl)
    if extra:
        names += vector_names(extra[0], extra[1])
    expr = Expression(spec, names)

    def fn(x, y, w, z, c, c2=None):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        c = np.asarray(c, dtype=float)
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        env = {**vector_env("x", x), **vector_env("y", y), "w": w, "z": z,
               **vector_env(ctrl, c)}
        shapes = [x.shape[:-1], y.shape[:-1], w.shape, z.shape, c.shape[:-1]]
        if extra:
            c2 = np.asarray(c2, dtype=float)
            env.update(vector_env(extra[0], c2))
            shapes.append(c2.shape[:-1])
        return _broadcast(expr(env), np.broadcast_shapes(*shapes))
    return fn


def _controls(raw) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or len(arr) == 0:
        raise ProblemSpecError("control sets must be nonempty lists of numbers or of equal-length lists")
    return arr


def _box(raw, dim, key) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape == (2,) and dim == 1:
        arr = arr[None, :]
    if arr.shape != (dim, 2):
        raise ProblemSpecError(f"cube {key} must be a list of {dim} [lo, hi] pairs")
    return arr


def problem_from_dict(d: dict, name: str = "") -> GameProblem:
    try:
        n, m = int(d["dims"]["n"]), int(d["dims"]["m"])
        rho = RelayConfig(*map(float, d["thresholds"]["rho"]))
        eta = RelayConfig(*map(float, d["thresholds"]["eta"]))
        lam = float(d["lambda"])
        A = _controls(d["controls"]["A"])
        B = _controls(d["controls"]["B"])
        Qx = _box(d["cube"]["Qx"], n, "Qx")
        Qy = _box(d["cube"]["Qy"], m, "Qy")
        f = _dynamics_from_spec(d["dynamics"]["f"], n, "x", "w", "a", A.shape[1])
        g = _dynamics_from_spec(d["dynamics"]["g"], m, "y", "z", "b", B.shape[1])
        cost = d["cost"]
        ell1 = _cost_from_spec(cost.get("ell1", 0), n, m, "a", A.shape[1])
        ell2 = _cost_from_spec(cost.get("ell2", 0), n, m, "b", B.shape[1])
        coupled = None
        if cost.get("coupled") is not None:
            coupled = _cost_from_spec(cost["coupled"], n, m, "a", A.shape[1], extra=("b", B.shape[1]))
        grid = None
        if "grid" in d:
            gd = d["grid"]
            grid = GridSpec(tuple(int(k) for k in gd["nx"]), tuple(int(k) for k in gd["ny"]),
                            float(gd["h"]))
    except KeyError as exc:
        raise ProblemSpecError(f"problem file is missing key {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ProblemSpecError):
            raise
        raise ProblemSpecError(f"malformed problem file: {exc}") from None
    return GameProblem(n=n, m=m, rho=rho, eta=eta, f=f, g=g, ell1=ell1, ell2=ell2, lam=lam,
                       A=A, B=B, Qx=Qx, Qy=Qy, ell_coupled=coupled, grid=grid,
                       name=name or d.get("name", ""), source=d)


def load_problem(path) -> GameProblem:
    path = Path(path)
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ProblemSpecError(f"{path}: invalid JSON ({exc})") from None
    return problem_from_dict(d, name=d.get("name", path.stem))


def problem_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# sampling helpers

def _halton(dim: int, count: int, seed: int = 0) -> np.ndarray:
    # unscrambled Halton: a larger sample always extends a smaller one
    if count <= 0:
        return np.zeros((0, dim))
    pts = qmc.Halton(d=dim, scramble=False).random(count + 1 + seed)[1 + seed:]
    return pts


def sample_box(box: np.ndarray, count: int, seed: int = 0) -> np.ndarray:
    u = _halton(len(box), count, seed)
    return box[:, 0] + u * (box[:, 1] - box[:, 0])


def _with_corners(box: np.ndarray, pts: np.ndarray) -> np.ndarray:
    grids = np.meshgrid(*[b for b in box], indexing="ij")
    corners = np.stack([g.ravel() for g in grids], axis=-1)
    return np.concatenate([corners, pts], axis=0)


def sampled_bounds(problem: GameProblem, count: int = 2048) -> dict:
    """Sampled suprema of the dynamics and the running cost over Q."""
    xs = _with_corners(problem.Qx, sample_box(problem.Qx, count))
    ys = _with_corners(problem.Qy, sample_box(problem.Qy, count, seed=7))
    fmax = f1 = 0.0
    gmax = g1 = 0.0
    for md in MODES:
        fv = problem.f(xs[:, None, :], np.full((1, 1), md), problem.A[None, :, :])
        gv = problem.g(ys[:, None, :], np.full((1, 1), md), problem.B[None, :, :])
        fmax = max(fmax, float(np.max(np.linalg.norm(fv, axis=-1))))
        gmax = max(gmax, float(np.max(np.linalg.norm(gv, axis=-1))))
        f1 = max(f1, float(np.max(np.abs(fv[..., 0]))))
        g1 = max(g1, float(np.max(np.abs(gv[..., 0]))))
    lmin, lmax = cost_range(problem, xs[: count // 4 + 1], ys[: count // 4 + 1])
    return {"f": fmax, "g": gmax, "dynamics": max(fmax, gmax), "f1": f1, "g1": g1,
            "ell_min": lmin, "ell_max": lmax}


def cost_range(problem: GameProblem, xs: np.ndarray, ys: np.ndarray) -> tuple[float, float]:
    """Min and max of the running cost over the product of the given points."""
    lo, hi = np.inf, -np.inf
    for w in MODES:
        for z in MODES:
            val = problem.ell(xs[:, None, None, None, :], ys[None, :, None, None, :],
                              np.full((1, 1, 1, 1), w), np.full((1, 1, 1, 1), z),
                              problem.A[None, None, :, None, :], problem.B[None, None, None, :, :])
            lo = min(lo, float(np.min(val)))
            hi = max(hi, float(np.max(val)))
    return lo, hi


# ---------------------------------------------------------------------------
# validation

@dataclass
class Verdicts:
    """Per-(player, mode) outcome of a sampled check, with failing points."""

    verdicts: dict
    failures: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.verdicts[key]

    def __bool__(self):
        return all(self.verdicts.values())


def _face_points(box: np.ndarray, axis: int, value: float, count: int) -> np.ndarray:
    dim = len(box)
    if dim == 1:
        return np.array([[value]])
    others = [k for k in range(dim) if k != axis]
    pts = sample_box(box[others], count)
    out = np.empty((len(pts), dim))
    out[:, axis] = value
    out[:, others] = pts
    return out


def validate_controllability(problem: GameProblem, samples_per_face: int = 64) -> Verdicts:
    """Check that on each threshold face both signs of the first velocity are reachable."""
    if samples_per_face < 1:
        raise ValueError("samples_per_face must be >= 1")
    result = Verdicts({})
    for player, dyn, box, relay, ctrls in (("X", problem.f, problem.Qx, problem.rho, problem.A),
                                           ("Y", problem.g, problem.Qy, problem.eta, problem.B)):
        for md in MODES:
            # boundary of the sector of mode md is the threshold of index -md
            thr = relay.lo if md == 1 else relay.hi
            pts = _face_points(box, 0, thr, samples_per_face)
            v1 = dyn(pts[:, None, :], np.full((1, 1), md), ctrls[None, :, :])[..., 0]
            ok = (v1.min(axis=1) < 0) & (v1.max(axis=1) > 0)
            result.verdicts[(player, md)] = bool(np.all(ok))
            for p in pts[~ok]:
                result.failures.append({"player": player, "mode": md, "point": p.tolist()})
    return result


def validate_invariance(problem: GameProblem, samples_per_face: int = 64,
                        tol: float = 1e-12) -> Verdicts:
    """Check that no control pushes the state out through a face of Q.

    Tangential (zero normal) velocity counts as non-exiting.
    """
    if samples_per_face < 1:
        raise ValueError("samples_per_face must be >= 1")
    result = Verdicts({})
    for player, dyn, box, relay, ctrls in (("X", problem.f, problem.Qx, problem.rho, problem.A),
                                           ("Y", problem.g, problem.Qy, problem.eta, problem.B)):
        ok_all = True
        for axis in range(len(box)):
            for side, sign in ((0, -1.0), (1, 1.0)):
                pts = _face_points(box, axis, box[axis, side], samples_per_face)
                for md in MODES:
                    adm = pts[:, 0] <= relay.hi if md == -1 else pts[:, 0] >= relay.lo
                    if not np.any(adm):
                        continue
                    p = pts[adm]
                    v = dyn(p[:, None, :], np.full((1, 1), md), ctrls[None, :, :])[..., axis]
                    bad = sign * v > tol
                    if np.any(bad):
                        ok_all = False
                        for k, c in zip(*np.nonzero(bad)):
                            result.failures.append({"player": player, "mode": md, "axis": axis,
                                                    "side": "hi" if side else "lo",
                                                    "point": p[k].tolist(),
                                                    "control": ctrls[c].tolist()})
        result.verdicts[player] = ok_all
    return result


def hamiltonian_table(problem: GameProblem, x, y, w, z, p, q) -> np.ndarray:
    """-f.p - g.q - ell over all control pairs, shape [..., Na, Nb]."""
    x = np.asarray(x, dtype=float)[..., None, None, :]
    y = np.asarray(y, dtype=float)[..., None, None, :]
    w = np.asarray(w)[..., None, None]
    z = np.asarray(z)[..., None, None]
    p = np.asarray(p, dtype=float)[..., None, None, :]
    q = np.asarray(q, dtype=float)[..., None, None, :]
    a = problem.A[:, None, :]
    b = problem.B[None, :, :]
    fv = problem.f(x, w, a)
    gv = problem.g(y, z, b)
    return -(fv * p).sum(-1) - (gv * q).sum(-1) - problem.ell(x, y, w, z, a, b)


def check_isaacs_condition(problem: GameProblem, sample_count: int = 4096, seed: int = 0) -> float:
    """Largest sampled |UH - LH| over the discrete control sets."""
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    xs = sample_box(problem.Qx, sample_count)
    ys = sample_box(problem.Qy, sample_count, seed=11)
    w = rng.choice(MODES, size=sample_count)
    z = rng.choice(MODES, size=sample_count)
    p = rng.uniform(-1, 1, size=(sample_count, problem.n))
    q = rng.uniform(-1, 1, size=(sample_count, problem.m))
    H = hamiltonian_table(problem, xs, ys, w, z, p, q)
    upper = H.max(axis=1).min(axis=1)    # min_b max_a
    lower = H.min(axis=2).max(axis=1)    # max_a min_b
    return float(np.max(np.abs(upper - lower)))


def lipschitz_estimate(problem: GameProblem, which: str = "all", count: int = 256,
                       eps: float = 1e-6) -> float:
    """Sampled central-difference estimate of the state Lipschitz constant.

    Uses the spectral norm of the finite-difference Jacobian at each sample,
    which is exact for affine dynamics.
    """
    xs = sample_box(problem.Qx, count)
    ys = sample_box(problem.Qy, count, seed=3)
    est = 0.0

    def jac_norm(fn, pts, md, ctrls, dim):
        cols = []
        for k in range(dim):
            e = np.zeros(dim)
            e[k] = eps
            fp = fn((pts + e)[:, None, :], np.full((1, 1), md), ctrls[None])
            fm = fn((pts - e)[:, None, :], np.full((1, 1), md), ctrls[None])
            cols.append((fp - fm) / (2 * eps))
        J = np.stack(cols, axis=-1)
        return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1))))

    for md in MODES:
        if which in ("all", "f"):
            est = max(est, jac_norm(problem.f, xs, md, problem.A, problem.n))
        if which in ("all", "g"):
            est = max(est, jac_norm(problem.g, ys, md, problem.B, problem.m))
    if which in ("all", "ell"):
        for w in MODES:
            for z in MODES:
                a = problem.A[None, :, None, :]
                b = problem.B[None, None, :, :]
                grads = []
                for k in range(problem.n + problem.m):
                    dx = np.zeros(problem.n)
                    dy = np.zeros(problem.m)
                    if k < problem.n:
                        dx[k] = eps
                    else:
                        dy[k - problem.n] = eps
                    lp = problem.ell((xs + dx)[:, None, None, :], (ys + dy)[:, None, None, :],
                                     np.full((1, 1, 1), w), np.full((1, 1, 1), z), a, b)
                    lm = problem.ell((xs - dx)[:, None, None, :], (ys - dy)[:, None, None, :],
                                     np.full((1, 1, 1), w), np.full((1, 1, 1), z), a, b)
                    grads.append((lp - lm) / (2 * eps))
                est = max(est, float(np.max(np.linalg.norm(np.stack(grads, -1), axis=-1))))
    return est


@dataclass
class ValidationReport:
    bound_M: float
    lipschitz_L: float
    controllability_ok: dict
    invariance_ok: bool
    isaacs_gap: float
    warnings: list = field(default_factory=list)
    controllability_failures: list = field(default_factory=list)
    invariance_failures: list = field(default_factory=list)
    ell_min: float = 0.0
    ell_max: float = 0.0

    @property
    def hard_failure(self) -> bool:
        return not (all(self.controllability_ok.values()) and self.invariance_ok)

    def to_dict(self) -> dict:
        return {
            "bound_M": self.bound_M,
            "lipschitz_L": self.lipschitz_L,
            "controllability_ok": {f"{p}{md:+d}": v for (p, md), v in
                                   sorted(self.controllability_ok.items())},
            "invariance_ok": self.invariance_ok,
            "isaacs_gap": self.isaacs_gap,
            "ell_min": self.ell_min,
            "ell_max": self.ell_max,
            "warnings": list(self.warnings),
            "controllability_failures": self.controllability_failures,
            "invariance_failures": self.invariance_failures,
        }


def validate(problem: GameProblem, samples_per_face: int = 64,
             isaacs_samples: int = 4096) -> ValidationReport:
    bounds = sampled_bounds(problem)
    ctrl = validate_controllability(problem, samples_per_face)
    inv = validate_invariance(problem, samples_per_face)
    gap = check_isaacs_condition(problem, isaacs_samples)
    warnings = []
    if bounds["ell_min"] < 0:
        warnings.append(f"running cost takes negative values (sampled min {bounds['ell_min']:.6g})")
    if not problem.is_decoupled:
        warnings.append("running cost couples the two players' controls")
    if gap > 1e-12:
        warnings.append(f"Isaacs condition fails on samples (gap {gap:.6g}); "
                        "lower and upper values may differ")
    if not np.all(np.isfinite([bounds["dynamics"], bounds["ell_max"]])):
        warnings.append("non-finite values sampled in dynamics or cost")
    return ValidationReport(
        bound_M=max(bounds["dynamics"], abs(bounds["ell_max"]), abs(bounds["ell_min"])),
        lipschitz_L=lipschitz_estimate(problem),
        controllability_ok=dict(ctrl.verdicts),
        invariance_ok=bool(inv),
        isaacs_gap=gap,
        warnings=warnings,
        controllability_failures=ctrl.failures,
        invariance_failures=inv.failures,
        ell_min=bounds["ell_min"],
        ell_max=bounds["ell_max"],
    )
