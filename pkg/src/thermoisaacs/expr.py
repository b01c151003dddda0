"""Vectorized arithmetic expressions for problem files.

Expressions are parsed with :mod:`ast` and compiled into closures over numpy
arrays.  Only numbers, declared variable names, ``+ - * / **`` (``^`` is an
alias for ``**``), unary minus and a fixed set of functions are accepted.
"""

from __future__ import annotations

import ast
from typing import Callable, Mapping

import numpy as np

from .errors import ProblemSpecError

_FUNCS: dict[str, Callable] = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
    "sign": np.sign,
    "min": np.minimum,
    "max": np.maximum,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_BINOPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
    ast.Pow: np.power,
}

Env = Mapping[str, np.ndarray]


def _compile(node: ast.AST, names: frozenset[str], src: str) -> Callable[[Env], np.ndarray]:
    if isinstance(node, ast.Expression):
        return _compile(node.body, names, src)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        c = float(node.value)
        return lambda env: c
    if isinstance(node, ast.Name):
        if node.id in names:
            key = node.id
            return lambda env: env[key]
        if node.id in _CONSTS:
            c = _CONSTS[node.id]
            return lambda env: c
        raise ProblemSpecError(f"unknown variable {node.id!r} in expression {src!r}")
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        inner = _compile(node.operand, names, src)
        if isinstance(node.op, ast.USub):
            return lambda env: -inner(env)
        return inner
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        op = _BINOPS[type(node.op)]
        lhs = _compile(node.left, names, src)
        rhs = _compile(node.right, names, src)
        return lambda env: op(lhs(env), rhs(env))
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
        fname = node.func.id
        if fname not in _FUNCS:
            raise ProblemSpecError(f"unknown function {fname!r} in expression {src!r}")
        args = [_compile(a, names, src) for a in node.args]
        fn = _FUNCS[fname]
        if fname in ("min", "max"):
            if len(args) < 2:
                raise ProblemSpecError(f"{fname} needs at least two arguments in {src!r}")

            def reduce_(env, fn=fn, args=args):
                out = args[0](env)
                for a in args[1:]:
                    out = fn(out, a(env))
                return out
            return reduce_
        if len(args) != 1:
            raise ProblemSpecError(f"{fname} takes one argument in {src!r}")
        arg = args[0]
        return lambda env: fn(arg(env))
    raise ProblemSpecError(f"unsupported syntax in expression {src!r}: {ast.dump(node)[:60]}")


class Expression:
    """A compiled scalar expression over a fixed set of variable names."""

    def __init__(self, source: str | float | int, names):
        self.source = str(source)
        self.names = frozenset(names)
        text = self.source.replace("^", "**")
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ProblemSpecError(f"cannot parse expression {self.source!r}: {exc.msg}") from None
        self._fn = _compile(tree, self.names, self.source)

    def __call__(self, env: Env) -> np.ndarray:
        with np.errstate(all="ignore"):
            return self._fn(env)

    def __repr__(self):
        return f"Expression({self.source!r})"


def vector_env(prefix: str, arr: np.ndarray) -> dict[str, np.ndarray]:
    """Expose the last axis of ``arr`` as ``prefix1, prefix2, ...`` (and ``prefix`` if 1-D)."""
    env = {f"{prefix}{k + 1}": arr[..., k] for k in range(arr.shape[-1])}
    if arr.shape[-1] == 1:
        env[prefix] = arr[..., 0]
    return env


def vector_names(prefix: str, dim: int) -> list[str]:
    names = [f"{prefix}{k + 1}" for k in range(dim)]
    if dim == 1:
        names.append(prefix)
    return names
