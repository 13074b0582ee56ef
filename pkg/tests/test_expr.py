import math

import pytest
from hypothesis import given, settings, strategies as st

from gnat.expr import (
    ArityError,
    EvalError,
    ParseError,
    ScalarExpr,
    UnboundVariableError,
    UnknownIdentifierError,
    parse_expression,
)


def central_diff(f, x, h=1e-5):
    """Central difference with one Richardson step (O(h^4) for smooth f)."""
    d1 = (f(x + h) - f(x - h)) / (2 * h)
    d2 = (f(x + h / 2) - f(x - h / 2)) / h
    return (4 * d2 - d1) / 3


def test_parse_weight_polynomial():
    e = parse_expression("a1*(a1+a3)-a2^2", ["a1", "a2", "a3"])
    assert e.free_vars == {"a1", "a2", "a3"}
    assert e.evaluate({"a1": 1.0, "a2": 0.0, "a3": 0.0}) == 1.0


def test_parse_rational_weight():
    e = parse_expression("1/(1+t)", ["t"])
    assert e.evaluate({"t": 0.0}) == 1.0
    assert e.evaluate({"t": 1.0}) == 0.5


def test_parse_unicode_names():
    e = parse_expression("sin(θ)^2", ["θ", "φ"])
    assert e.free_vars == {"θ"}
    assert e.evaluate({"θ": math.pi / 2}) == pytest.approx(1.0)


def test_parse_errors_carry_position():
    with pytest.raises(ParseError) as err:
        parse_expression("1 + * 2", ["t"])
    assert err.value.position == 4
    with pytest.raises(UnknownIdentifierError):
        parse_expression("1 + q", ["t"])
    with pytest.raises(ArityError):
        parse_expression("sin(t, t)", ["t"])
    with pytest.raises(ParseError):
        parse_expression("t^t", ["t"])  # exponent must be a rational constant


def test_unbound_variable_and_domain_errors():
    e = parse_expression("log(t)/u", ["t", "u"])
    with pytest.raises(UnboundVariableError):
        e.evaluate({"t": 1.0})
    with pytest.raises(EvalError):
        e.evaluate({"t": -1.0, "u": 1.0})
    with pytest.raises(EvalError):
        e.evaluate({"t": 1.0, "u": 0.0})


def test_derivative_simple_polynomial():
    e = parse_expression("t^2", ["t"])
    d = e.diff("t")
    for t in (-2.0, 0.0, 0.7, 3.1):
        assert d.evaluate({"t": t}) == pytest.approx(2 * t)


def test_derivative_cheeger_gromoll_weight_at_zero():
    # d/dt (1/(1+t)) at t=0 is exactly -1
    e = parse_expression("1/(1+t)", ["t"])
    assert e.diff("t").evaluate({"t": 0.0}) == -1.0


def test_derivative_sin_squared_matches_finite_difference():
    e = parse_expression("sin(θ)^2", ["θ"])
    d = e.diff("θ")
    x = math.pi / 4
    assert d.evaluate({"θ": x}) == pytest.approx(1.0, abs=1e-12)
    fd = central_diff(lambda v: e.evaluate({"θ": v}), x)
    assert abs(d.evaluate({"θ": x}) - fd) < 1e-8


def test_second_derivatives_are_closed():
    e = parse_expression("tan(x) + sqrt(1 + x^2) - exp(2*x)*log(2 + x)", ["x"])
    d2 = e.diff("x").diff("x")
    fd = central_diff(lambda v: e.diff("x").evaluate({"x": v}), 0.3)
    assert d2.evaluate({"x": 0.3}) == pytest.approx(fd, rel=1e-7)


# ---------------------------------------------------------------------------
# Random expression trees: derivative-vs-finite-difference and round trips


def random_expr(rng, depth=3):
    choice = rng.randrange(8 if depth > 0 else 2)
    if choice == 0:
        return ScalarExpr.const(round(rng.uniform(-3, 3), 3))
    if choice == 1:
        return ScalarExpr.var("x")
    a = random_expr(rng, depth - 1)
    b = random_expr(rng, depth - 1)
    if choice == 2:
        return a + b
    if choice == 3:
        return a - b
    if choice == 4:
        return a * b
    if choice == 5:
        return a / (b * b + 2)  # keep denominators away from zero
    if choice == 6:
        return a ** rng.choice([2, 3])
    return (a * 0.25).apply(rng.choice(["sin", "cos", "exp"]))


def test_random_derivatives_match_finite_difference():
    import random

    rng = random.Random(20240811)
    checked = 0
    while checked < 100:
        e = random_expr(rng)
        if "x" not in e.free_vars:
            continue
        d = e.diff("x")
        x0 = rng.uniform(-1.0, 1.0)
        try:
            sym = d.evaluate({"x": x0})
            fd = central_diff(lambda v: e.evaluate({"x": v}), x0, h=1e-5)
        except EvalError:
            continue
        scale = max(1.0, abs(sym), abs(fd))
        assert abs(sym - fd) / scale < 1e-6, f"{e} at {x0}"
        checked += 1


@st.composite
def expr_nodes(draw, depth=3):
    if depth == 0:
        if draw(st.booleans()):
            return ScalarExpr.const(draw(st.integers(-9, 9)))
        return ScalarExpr.var(draw(st.sampled_from(["x", "y", "θ"])))
    kind = draw(st.integers(0, 6))
    if kind <= 1:
        return draw(expr_nodes(depth=0))
    a = draw(expr_nodes(depth=depth - 1))
    b = draw(expr_nodes(depth=depth - 1))
    if kind == 2:
        return a + b
    if kind == 3:
        return a - b
    if kind == 4:
        return a * b
    if kind == 5:
        return a ** draw(st.sampled_from([2, 3]))
    return a.apply(draw(st.sampled_from(["sin", "cos", "tan", "exp"])))


@settings(max_examples=200, deadline=None)
@given(expr_nodes())
def test_print_parse_round_trip(e):
    printed = str(e)
    reparsed = ScalarExpr.parse(printed, ["x", "y", "θ"])
    assert reparsed == e, f"{printed} -> {reparsed}"
    assert str(reparsed) == printed


def test_substitution_composes():
    f = parse_expression("1/(1+t)", ["t"])
    t_of_xu = parse_expression("x^2 + u^2", ["x", "u"])
    g = f.subs({"t": t_of_xu})
    assert g.evaluate({"x": 1.0, "u": 2.0}) == pytest.approx(1 / 6)
    # chain rule through the substitution
    assert g.diff("u").evaluate({"x": 1.0, "u": 2.0}) == pytest.approx(-4 / 36)


def test_compiled_matches_interpreted():
    e = parse_expression("sin(x)*cos(y) + x^2/(1+y^2) - sqrt(2+x)", ["x", "y"])
    fn = e.compile(["x", "y"])
    for xy in [(0.1, -0.3), (1.5, 2.0), (-1.0, 0.0)]:
        assert fn(xy) == pytest.approx(e.evaluate({"x": xy[0], "y": xy[1]}), abs=1e-15)


def test_compiled_shares_subtrees():
    e = parse_expression("(x + y)^2", ["x", "y"])
    big = e * e + e  # shared subtree by identity
    fn = big.compile(["x", "y"])
    assert fn((1.0, 2.0)) == pytest.approx(9 * 9 + 9)
