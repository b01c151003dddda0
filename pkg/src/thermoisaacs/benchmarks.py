"""The shipped benchmark problems."""

from __future__ import annotations

from importlib import resources

from .problem import GameProblem, load_problem

__all__ = ["BENCHMARKS", "benchmark_path", "load_benchmark", "load_all"]

BENCHMARKS = ("constant_cost", "p2_switch_off", "separable", "weighted_switch_off", "no_switch")


def benchmark_path(name: str):
    if name not in BENCHMARKS:
        raise KeyError(f"unknown benchmark {name!r}; choose from {', '.join(BENCHMARKS)}")
    return resources.files("thermoisaacs") / "data" / "benchmarks" / f"{name}.json"


def load_benchmark(name: str) -> GameProblem:
    with resources.as_file(benchmark_path(name)) as path:
        return load_problem(path)


def load_all() -> dict[str, GameProblem]:
    return {name: load_benchmark(name) for name in BENCHMARKS}
