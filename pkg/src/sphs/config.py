"""Scenario configuration: JSON loading, ``--set`` overrides, schema checks and
a small arithmetic expression language for inline models.

Expressions use ``+ - * / **``, unary minus, numbers, the state variables
``x1 .. xn`` (and ``z1 ..`` where relevant), named parameters, and the
functions ``sin cos exp log``.  Expressions are parsed with :mod:`ast` but
only the node types above are accepted; derivatives are exact (symbolic).
"""

from __future__ import annotations

import ast
import copy
import json
import math
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .model import EnergyFunction

SCHEMA_VERSION = 1

ANALYSES = (
    "validate",
    "passivity",
    "shaping-check",
    "casimir-check",
    "simulate",
    "invariant",
    "fp-solve",
    "dynkin-audit",
)

# analysis -> config keys it needs (dotted paths)
REQUIRED = {
    "validate": (),
    "passivity": ("passivity.radii", "passivity.eps"),
    "shaping-check": ("shaping.plan",),
    "casimir-check": ("casimir",),
    "simulate": ("simulation.dt", "simulation.T", "simulation.paths"),
    "invariant": ("histogram.bins", "domain.lo", "domain.hi"),
    "fp-solve": ("grid.shape", "domain.lo", "domain.hi"),
    "dynkin-audit": ("dynkin.T", "dynkin.dt", "dynkin.paths"),
}

DEPENDS = {"invariant": "simulate"}

# dotted key -> expected kind
TYPES = {
    "schema_version": "int",
    "name": "str",
    "seed": "int",
    "equilibrium": "numbers",
    "model": "dict",
    "model.builtin": "str",
    "model.params": "dict",
    "model.inline": "dict",
    "shaping": "dict",
    "shaping.plan": "str",
    "shaping.check_ultimate_passivity": "bool",
    "passivity": "dict",
    "passivity.radii": "numbers",
    "passivity.eps": "numbers",
    "passivity.n_samples": "int",
    "passivity.require": "str",
    "passivity.center": "numbers",
    "casimir": "dict",
    "simulation": "dict",
    "simulation.dt": "positive",
    "simulation.T": "positive",
    "simulation.paths": "int",
    "simulation.max_divergent": "number",
    "simulation.stride": "int",
    "simulation.x0": "numbers",
    "domain": "dict",
    "domain.lo": "numbers",
    "domain.hi": "numbers",
    "grid": "dict",
    "grid.shape": "ints",
    "histogram": "dict",
    "histogram.bins": "ints",
    "histogram.burn_in": "number",
    "histogram.cov_tol": "number",
    "histogram.mean_se": "number",
    "fp": "dict",
    "fp.cov_tol": "number",
    "fp.conservation_tol": "number",
    "fp.scheme": "str",
    "dynkin": "dict",
    "dynkin.T": "positive",
    "dynkin.dt": "positive",
    "dynkin.paths": "int",
    "dynkin.function": "str",
    "dynkin.x0": "numbers",
    "output": "dict",
    "output.format": "str",
    "analyses": "strings",
}

CHOICES = {
    "passivity.require": ("strict", "ultimate", "none"),
    "output.format": ("csv", "binary", "both"),
    "fp.scheme": ("central", "upwind"),
}


class ConfigError(ValueError):
    """Carries the offending dotted key."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


# ---------------------------------------------------------------------------
# loading and overrides
# ---------------------------------------------------------------------------


def load(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"invalid JSON ({exc.msg} at line {exc.lineno})") from None


def builtin_path(name: str) -> Optional[Path]:
    base = Path(__file__).parent / "scenarios"
    stem = Path(name).stem
    cand = base / f"{stem}.json"
    return cand if cand.is_file() else None


def builtin_names() -> list:
    return sorted(p.stem for p in (Path(__file__).parent / "scenarios").glob("*.json"))


def get(cfg: dict, key: str, default: Any = None) -> Any:
    cur: Any = cfg
    for part in key.split("."):
        if isinstance(cur, dict) and part in cur:
            cur = cur[part]
        elif isinstance(cur, list) and part.isdigit() and int(part) < len(cur):
            cur = cur[int(part)]
        else:
            return default
    return cur


def has(cfg: dict, key: str) -> bool:
    sentinel = object()
    return get(cfg, key, sentinel) is not sentinel


def parse_override(text: str) -> tuple:
    if "=" not in text:
        raise ConfigError("--set", f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError("--set", "empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def apply_overrides(cfg: dict, overrides) -> dict:
    """Return a copy of ``cfg`` with dotted-key assignments applied in order."""
    out = copy.deepcopy(cfg)
    for key, value in overrides:
        parts = key.split(".")
        cur: Any = out
        for i, part in enumerate(parts[:-1]):
            if isinstance(cur, list) and part.isdigit():
                cur = cur[int(part)]
                continue
            if not isinstance(cur, dict):
                raise ConfigError(key, f"cannot descend into {'.'.join(parts[:i + 1])}")
            nxt = cur.get(part)
            if not isinstance(nxt, (dict, list)):
                nxt = cur[part] = {}
            cur = nxt
        last = parts[-1]
        if isinstance(cur, list):
            if not last.isdigit() or int(last) >= len(cur):
                raise ConfigError(key, "list index out of range")
            cur[int(last)] = value
        else:
            cur[last] = value
    return out


# ---------------------------------------------------------------------------
# schema
# ---------------------------------------------------------------------------


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _check_type(key: str, value: Any, kind: str) -> None:
    ok = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "bool": lambda v: isinstance(v, bool),
        "dict": lambda v: isinstance(v, dict),
        "number": _is_number,
        "positive": lambda v: _is_number(v) and v > 0,
        "numbers": lambda v: _is_number(v) or (isinstance(v, list) and len(v) > 0 and all(_is_number(a) for a in v)),
        "ints": lambda v: (isinstance(v, int) and not isinstance(v, bool))
        or (isinstance(v, list) and len(v) > 0 and all(isinstance(a, int) and not isinstance(a, bool) for a in v)),
        "strings": lambda v: isinstance(v, list) and all(isinstance(a, str) for a in v),
    }[kind]
    if not ok(value):
        raise ConfigError(key, f"expected {kind}, got {json.dumps(value)}")


def validate_config(cfg: dict) -> list:
    """Check types, analysis names and required parameters; return the
    analyses in execution order."""
    if not isinstance(cfg, dict):
        raise ConfigError("config", "top level must be an object")
    version = cfg.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {version}")
    for key, kind in TYPES.items():
        if has(cfg, key):
            _check_type(key, get(cfg, key), kind)
    for key, choices in CHOICES.items():
        if has(cfg, key) and get(cfg, key) not in choices:
            raise ConfigError(key, f"must be one of {', '.join(choices)}")
    if "model" not in cfg:
        raise ConfigError("model", "missing")
    model = cfg["model"]
    if ("builtin" in model) == ("inline" in model):
        raise ConfigError("model", "give exactly one of 'builtin' or 'inline'")
    requested = cfg.get("analyses")
    if not requested:
        raise ConfigError("analyses", "no analyses requested")
    for a in requested:
        if a not in ANALYSES:
            raise ConfigError("analyses", f"unknown analysis {a!r}")
    for a in requested:
        for key in REQUIRED[a]:
            if not has(cfg, key):
                raise ConfigError(key, f"missing (required by analysis '{a}')")
        dep = DEPENDS.get(a)
        if dep and dep not in requested:
            raise ConfigError("analyses", f"'{a}' requires '{dep}'")
    if has(cfg, "domain.lo") and has(cfg, "domain.hi"):
        lo, hi = np.atleast_1d(get(cfg, "domain.lo")), np.atleast_1d(get(cfg, "domain.hi"))
        if lo.shape != hi.shape or np.any(hi <= lo):
            raise ConfigError("domain", "need lo < hi componentwise with equal lengths")
    if has(cfg, "simulation.T") and has(cfg, "simulation.dt"):
        n = get(cfg, "simulation.T") / get(cfg, "simulation.dt")
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ConfigError("simulation.T", "must be an integer multiple of simulation.dt")
    return [a for a in ANALYSES if a in requested]


# ---------------------------------------------------------------------------
# expressions
# ---------------------------------------------------------------------------

_FUNCS = {"sin": np.sin, "cos": np.cos, "exp": np.exp, "log": np.log}
_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.Pow: "**"}


class ExprError(ValueError):
    pass


def _num(v: float) -> tuple:
    return ("num", float(v))


def _is(node, v) -> bool:
    return node[0] == "num" and node[1] == v


def parse_expr(text: str, names) -> tuple:
    """Parse ``text`` into a tree of tuples, rejecting anything outside the grammar."""
    try:
        tree = ast.parse(str(text), mode="eval").body
    except SyntaxError:
        raise ExprError(f"cannot parse {text!r}") from None
    names = set(names)

    def conv(n):
        if isinstance(n, ast.Constant) and _is_number(n.value):
            return _num(n.value)
        if isinstance(n, ast.Name):
            if n.id not in names:
                raise ExprError(f"unknown name {n.id!r} in {text!r}")
            return ("var", n.id)
        if isinstance(n, ast.UnaryOp) and isinstance(n.op, (ast.USub, ast.UAdd)):
            a = conv(n.operand)
            return a if isinstance(n.op, ast.UAdd) else _neg(a)
        if isinstance(n, ast.BinOp) and type(n.op) in _BINOPS:
            return _bin(_BINOPS[type(n.op)], conv(n.left), conv(n.right))
        if isinstance(n, ast.Call) and isinstance(n.func, ast.Name) and n.func.id in _FUNCS and len(n.args) == 1 and not n.keywords:
            return ("call", n.func.id, conv(n.args[0]))
        raise ExprError(f"unsupported syntax in {text!r}")

    return conv(tree)


def _neg(a):
    if a[0] == "num":
        return _num(-a[1])
    return ("neg", a)


def _bin(op, a, b):
    if a[0] == "num" and b[0] == "num" and not (op == "/" and b[1] == 0.0):
        return _num(_eval_scalar(op, a[1], b[1]))
    if op == "+":
        if _is(a, 0.0):
            return b
        if _is(b, 0.0):
            return a
    elif op == "-":
        if _is(b, 0.0):
            return a
        if _is(a, 0.0):
            return _neg(b)
    elif op == "*":
        if _is(a, 0.0) or _is(b, 0.0):
            return _num(0.0)
        if _is(a, 1.0):
            return b
        if _is(b, 1.0):
            return a
    elif op == "/":
        if _is(a, 0.0):
            return _num(0.0)
        if _is(b, 1.0):
            return a
    elif op == "**":
        if _is(b, 0.0):
            return _num(1.0)
        if _is(b, 1.0):
            return a
    return ("bin", op, a, b)


def _eval_scalar(op, a, b):
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    return a**b


def eval_expr(node, env: dict):
    kind = node[0]
    if kind == "num":
        return node[1]
    if kind == "var":
        return env[node[1]]
    if kind == "neg":
        return -eval_expr(node[1], env)
    if kind == "call":
        return _FUNCS[node[1]](eval_expr(node[2], env))
    op, a, b = node[1], eval_expr(node[2], env), eval_expr(node[3], env)
    with np.errstate(divide="ignore", invalid="ignore"):
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            return np.divide(a, b)
        return np.power(a, b)


def diff_expr(node, var: str):
    kind = node[0]
    if kind == "num":
        return _num(0.0)
    if kind == "var":
        return _num(1.0 if node[1] == var else 0.0)
    if kind == "neg":
        return _neg(diff_expr(node[1], var))
    if kind == "call":
        f, a = node[1], node[2]
        da = diff_expr(a, var)
        if _is(da, 0.0):
            return _num(0.0)
        outer = {
            "sin": ("call", "cos", a),
            "cos": _neg(("call", "sin", a)),
            "exp": ("call", "exp", a),
            "log": _bin("/", _num(1.0), a),
        }[f]
        return _bin("*", outer, da)
    op, a, b = node[1], node[2], node[3]
    da, db = diff_expr(a, var), diff_expr(b, var)
    if op in ("+", "-"):
        return _bin(op, da, db)
    if op == "*":
        return _bin("+", _bin("*", da, b), _bin("*", a, db))
    if op == "/":
        return _bin("/", _bin("-", _bin("*", da, b), _bin("*", a, db)), _bin("**", b, _num(2.0)))
    # power
    if b[0] == "num":
        return _bin("*", _bin("*", b, _bin("**", a, _num(b[1] - 1.0))), da)
    return _bin(
        "*",
        node,
        _bin("+", _bin("*", db, ("call", "log", a)), _bin("/", _bin("*", b, da), a)),
    )


def _env(x, n: int, params: dict, prefix: str = "x") -> dict:
    x = np.asarray(x, dtype=float)
    env = dict(params)
    for i in range(n):
        env[f"{prefix}{i + 1}"] = x[..., i]
    return env


def _broadcast(val, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return np.broadcast_to(np.asarray(val, dtype=float), x.shape[:-1]).astype(float)


def state_names(n: int, prefix: str = "x") -> list:
    return [f"{prefix}{i + 1}" for i in range(n)]


def scalar_field(text, n: int, params: Optional[dict] = None, prefix: str = "x"):
    """Batch map ``x -> value`` for a number or an expression string."""
    params = dict(params or {})
    if _is_number(text):
        c = float(text)
        return lambda x: _broadcast(c, x)
    node = parse_expr(text, state_names(n, prefix) + list(params))
    return lambda x: _broadcast(eval_expr(node, _env(x, n, params, prefix)), x)


def matrix_field(entries, n: int, params: Optional[dict] = None, key: str = "matrix"):
    """Batch map from a nested list of numbers/expressions; constant when all numeric."""
    rows = entries if isinstance(entries, list) else [[entries]]
    if not rows or not all(isinstance(r, list) and r for r in rows):
        raise ConfigError(key, "expected a non-empty list of rows")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigError(key, "ragged matrix")
    if all(_is_number(v) for r in rows for v in r):
        return np.array(rows, dtype=float)
    try:
        cells = [[scalar_field(v, n, params) for v in r] for r in rows]
    except ExprError as exc:
        raise ConfigError(key, str(exc)) from None

    def fn(x):
        return np.stack([np.stack([c(x) for c in r], axis=-1) for r in cells], axis=-2)

    return fn


def vector_field(entries, n: int, params: Optional[dict] = None, key: str = "vector"):
    if not isinstance(entries, list) or len(entries) != n:
        raise ConfigError(key, f"expected a list of {n} entries")
    try:
        cells = [scalar_field(v, n, params) for v in entries]
    except ExprError as exc:
        raise ConfigError(key, str(exc)) from None
    return lambda x: np.stack([c(x) for c in cells], axis=-1)


def energy_from_expr(text: str, n: int, params: Optional[dict] = None, name: str = "", prefix: str = "x") -> EnergyFunction:
    """:class:`EnergyFunction` with symbolic gradient and Hessian."""
    params = dict(params or {})
    names = state_names(n, prefix)
    node = parse_expr(text, names + list(params))
    grad = [diff_expr(node, v) for v in names]
    hess = [[diff_expr(g, v) for v in names] for g in grad]

    def value(x):
        return _broadcast(eval_expr(node, _env(x, n, params, prefix)), x)

    def gradient(x):
        env = _env(x, n, params, prefix)
        return np.stack([_broadcast(eval_expr(g, env), x) for g in grad], axis=-1)

    def hessian(x):
        env = _env(x, n, params, prefix)
        return np.stack([np.stack([_broadcast(eval_expr(h, env), x) for h in row], axis=-1) for row in hess], axis=-2)

    return EnergyFunction(n, value, gradient, hessian, name=name or str(text))
