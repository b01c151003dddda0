"""Delayed thermostatic relay on piecewise-linear sampled inputs.

The relay output is -1 or +1.  It flips from -1 to +1 only when the input
strictly bypasses the upper threshold while increasing, and from +1 to -1
only when it strictly bypasses the lower threshold while decreasing.  The
output is left-continuous: at a switching instant it still holds the old
value.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InadmissibleInitialPair

__all__ = [
    "RelayConfig",
    "SampledSignal",
    "RelayTrace",
    "relay_evaluate",
    "relay_output_at",
    "relay_variation",
    "relay_step",
    "is_admissible",
]


@dataclass(frozen=True)
class RelayConfig:
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.lo < self.hi):
            raise ValueError(f"relay thresholds must satisfy lo < hi, got ({self.lo}, {self.hi})")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class SampledSignal:
    """Scalar input sampled at strictly increasing times, linear in between."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or t.size == 0:
            raise ValueError("times and values must be 1-D arrays of equal, nonzero length")
        if t[0] != 0.0:
            raise ValueError("times[0] must be 0")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_function(cls, fn, t_end: float, num: int) -> "SampledSignal":
        t = np.linspace(0.0, t_end, num)
        return cls(t, np.array([fn(s) for s in t]))

    def shifted(self, k: int) -> "SampledSignal":
        """The signal X(. + times[k]) restricted to the remaining samples."""
        return SampledSignal(self.times[k:] - self.times[k], self.values[k:])


@dataclass(frozen=True)
class RelayTrace:
    initial_output: int
    switch_times: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.initial_output not in (-1, 1):
            raise ValueError("initial_output must be -1 or 1")
        st = tuple(float(s) for s in self.switch_times)
        if any(b <= a for a, b in zip(st, st[1:])):
            raise ValueError("switch_times must be strictly increasing")
        object.__setattr__(self, "switch_times", st)

    def outputs_after_switches(self) -> list[int]:
        """Output value taken just after each switch (alternating signs)."""
        out, w = [], self.initial_output
        for _ in self.switch_times:
            w = -w
            out.append(w)
        return out

    @property
    def final_output(self) -> int:
        return self.initial_output * (-1) ** len(self.switch_times)


def is_admissible(value: float, w: int, config: RelayConfig) -> bool:
    """(value, w) lies in the closed set where the output may persist."""
    return value <= config.hi if w == -1 else value >= config.lo


def relay_step(v_old, v_new, w, config: RelayConfig, tol: float = 0.0):
    """Advance the relay across one linear segment, vectorized.

    Returns ``(w_new, frac)`` where ``frac`` is the position of the crossing
    inside the segment in ``[0, 1)`` and NaN where no switch happened.
    """
    v_old = np.asarray(v_old, dtype=float)
    v_new = np.asarray(v_new, dtype=float)
    w = np.asarray(w)
    up = (w == -1) & (v_new > config.hi + tol)
    down = (w == 1) & (v_new < config.lo - tol)
    level = np.where(up, config.hi, config.lo)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        frac = (level - v_old) / (v_new - v_old)
    switched = up | down
    frac = np.where(switched, np.clip(frac, 0.0, np.nextafter(1.0, 0.0)), np.nan)
    return np.where(switched, -w, w), frac


def relay_evaluate(signal: SampledSignal, config: RelayConfig, w0: int,
                   tol: float = 0.0) -> RelayTrace:
    """Run the relay over a sampled signal and return its switching trace."""
    if w0 not in (-1, 1):
        raise ValueError("w0 must be -1 or 1")
    t, v = signal.times, signal.values
    if not is_admissible(v[0], w0, config):
        raise InadmissibleInitialPair(
            f"initial pair (X(0)={v[0]}, w={w0}) is outside the admissible set "
            f"for thresholds ({config.lo}, {config.hi})")
    w = w0
    switches: list[float] = []
    for k in range(len(t) - 1):
        w_new, frac = relay_step(v[k], v[k + 1], w, config, tol)
        w_new = int(w_new)
        if w_new != w:
            tc = t[k] + float(frac) * (t[k + 1] - t[k])
            # crossing lies in [t_k, t_{k+1}); guard against rounding up to t_{k+1}
            switches.append(min(tc, math.nextafter(t[k + 1], -math.inf)))
            w = w_new
    return RelayTrace(w0, tuple(switches))


def relay_output_at(trace: RelayTrace, t: float) -> int:
    """Left-continuous output: only switches strictly before ``t`` count."""
    n = bisect.bisect_left(trace.switch_times, t)
    return trace.initial_output * (-1) ** n


def relay_variation(trace: RelayTrace, t: float) -> int:
    """Total variation on [0, t], i.e. twice the number of switches up to t."""
    return 2 * bisect.bisect_right(trace.switch_times, t)


def output_on_samples(trace: RelayTrace, times: Sequence[float]) -> np.ndarray:
    return np.array([relay_output_at(trace, s) for s in times], dtype=int)
