import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sphs import config as cfgmod
from sphs.config import (
    ConfigError,
    ExprError,
    apply_overrides,
    diff_expr,
    energy_from_expr,
    eval_expr,
    matrix_field,
    parse_expr,
    parse_override,
    scalar_field,
    validate_config,
    vector_field,
)
from sphs.model import derivative_residuals


def base():
    return {
        "model": {"builtin": "ou"},
        "simulation": {"dt": 0.01, "T": 1.0, "paths": 4},
        "domain": {"lo": [-3, -3], "hi": [3, 3]},
        "histogram": {"bins": 8},
        "analyses": ["simulate", "validate", "invariant"],
    }


def test_analyses_sorted_into_execution_order():
    assert validate_config(base()) == ["validate", "simulate", "invariant"]


@pytest.mark.parametrize(
    "mutate, key",
    [
        (lambda c: c["simulation"].pop("dt"), "simulation.dt"),
        (lambda c: c.update(analyses=["invariant"]), "analyses"),
        (lambda c: c.update(analyses=["bogus"]), "analyses"),
        (lambda c: c.update(analyses=[]), "analyses"),
        (lambda c: c.update(seed="x"), "seed"),
        (lambda c: c["simulation"].update(T=1.005), "simulation.T"),
        (lambda c: c["domain"].update(hi=[3, -4]), "domain"),
        (lambda c: c.update(schema_version=2), "schema_version"),
        (lambda c: c.update(model={"builtin": "ou", "inline": {}}), "model"),
        (lambda c: c.update(fp={"scheme": "weird"}), "fp.scheme"),
    ],
)
def test_schema_errors_name_the_key(mutate, key):
    c = base()
    mutate(c)
    with pytest.raises(ConfigError) as exc:
        validate_config(c)
    assert exc.value.key == key
    assert str(exc.value).startswith(key)


def test_override_equals_edit():
    c = base()
    over = apply_overrides(c, [parse_override("simulation.paths=16"), parse_override("domain.lo.1=-5")])
    edited = json.loads(json.dumps(c))
    edited["simulation"]["paths"] = 16
    edited["domain"]["lo"][1] = -5
    assert over == edited
    assert c["simulation"]["paths"] == 4


def test_override_parsing():
    assert parse_override("a.b=[1, 2]") == ("a.b", [1, 2])
    assert parse_override("name=hello") == ("name", "hello")
    assert parse_override("x=true") == ("x", True)
    assert apply_overrides({}, [("a.b.c", 1)]) == {"a": {"b": {"c": 1}}}
    with pytest.raises(ConfigError):
        parse_override("novalue")
    with pytest.raises(ConfigError):
        apply_overrides({"a": [1]}, [("a.3", 0)])


def test_load_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        cfgmod.load(p)
    with pytest.raises(ConfigError):
        cfgmod.load(tmp_path / "missing.json")


def test_builtins_validate():
    names = cfgmod.builtin_names()
    assert {"pendulum_shaped", "counterexample", "rlc", "casimir3d", "interconnection"} <= set(names)
    for n in names:
        validate_config(cfgmod.load(cfgmod.builtin_path(n)))


@pytest.mark.parametrize(
    "text",
    [
        "__import__('os')",
        "x1.real",
        "x1[0]",
        "open('f')",
        "lambda: 1",
        "x1 if x2 else 0",
        "sin(x1, x2)",
        "y",
        "x1 +",
        "'a'",
        "x1 @ x2",
    ],
)
def test_rejects_outside_grammar(text):
    with pytest.raises(ExprError):
        parse_expr(text, ["x1", "x2"])


def test_eval_with_params():
    f = scalar_field("a * x1**2 - cos(x2) / 2", 2, {"a": 3.0})
    X = np.array([[1.0, 0.0], [2.0, np.pi]])
    np.testing.assert_allclose(f(X), [2.5, 12.5])
    np.testing.assert_allclose(scalar_field(4, 2)(X), [4.0, 4.0])


def test_constant_folding():
    assert parse_expr("2 * 3 + 1", []) == ("num", 7.0)
    assert diff_expr(parse_expr("x1 * 0 + 5", ["x1"]), "x1") == ("num", 0.0)
    assert eval_expr(parse_expr("-(2 ** 3)", []), {}) == -8.0


exprs = st.sampled_from(
    [
        "x1**2 * x2 - 3 * x2",
        "sin(x1) * exp(-x2**2)",
        "log(1 + x1**2) + cos(x1 * x2)",
        "x1 / (2 + x2**2)",
        "-x1**3 / 3 + x1 * x2",
    ]
)


@given(exprs, st.integers(0, 100))
def test_symbolic_derivatives_match_fd(text, seed):
    H = energy_from_expr(text, 2)
    X = np.random.default_rng(seed).uniform(-2, 2, (6, 2))
    res = derivative_residuals(H, X)
    assert res["gradient"] < 1e-6 and res["hessian"] < 1e-5


def test_matrix_and_vector_fields():
    assert isinstance(matrix_field([[1, 0], [0, 1]], 2), np.ndarray)
    M = matrix_field([[0, "x1"], ["-x1", 0]], 2)
    out = M(np.array([[2.0, 0.0]]))
    np.testing.assert_allclose(out, [[[0, 2], [-2, 0]]])
    v = vector_field(["x2", "-x1"], 2)
    np.testing.assert_allclose(v(np.array([1.0, 2.0])), [2.0, -1.0])
    with pytest.raises(ConfigError):
        matrix_field([[1, 2], [3]], 2)
    with pytest.raises(ConfigError):
        vector_field(["x1"], 2)
