"""Scalar expressions: parse, evaluate, differentiate exactly.

Expressions are trees over constants, named variables, the arithmetic
operators ``+ - * / ^`` and the functions ``sin cos tan exp log sqrt``.
The exponent of ``^`` must fold to a rational constant so that symbolic
differentiation never leaves this basis.  Construction folds constants but
performs no other rewriting: correctness over beauty.
"""

from __future__ import annotations

import math
import sys
from fractions import Fraction
from typing import Callable, Iterable, Mapping, Sequence

# Derivative trees of deeply composed metrics can nest past CPython's
# conservative default before evaluation flattens them.
if sys.getrecursionlimit() < 20000:
    sys.setrecursionlimit(20000)


class ExprError(ValueError):
    """Base class for every expression failure."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownIdentifierError(ParseError):
    pass


class ArityError(ParseError):
    pass


class EvalError(ExprError):
    """Evaluation left the numeric domain (zero divide, log of <= 0, ...)."""


class UnboundVariableError(EvalError):
    pass


# ---------------------------------------------------------------------------
# AST nodes


class Node:
    __slots__ = ()

    def __eq__(self, other):
        if type(self) is not type(other):
            return False
        return all(getattr(self, s) == getattr(other, s) for s in self.__slots__)

    def __hash__(self):
        return hash((type(self).__name__,) + tuple(getattr(self, s) for s in self.__slots__))


class Const(Node):
    __slots__ = ("value",)

    def __init__(self, value: float):
        self.value = float(value)


class Var(Node):
    __slots__ = ("name",)

    def __init__(self, name: str):
        self.name = name


class Add(Node):
    __slots__ = ("left", "right")

    def __init__(self, left, right):
        self.left, self.right = left, right


class Sub(Node):
    __slots__ = ("left", "right")

    def __init__(self, left, right):
        self.left, self.right = left, right


class Mul(Node):
    __slots__ = ("left", "right")

    def __init__(self, left, right):
        self.left, self.right = left, right


class Div(Node):
    __slots__ = ("left", "right")

    def __init__(self, left, right):
        self.left, self.right = left, right


class Neg(Node):
    __slots__ = ("operand",)

    def __init__(self, operand):
        self.operand = operand


class Pow(Node):
    """Power with a rational exponent (kept exact as a Fraction)."""

    __slots__ = ("base", "exponent")

    def __init__(self, base, exponent: Fraction):
        self.base = base
        self.exponent = exponent


class Call(Node):
    __slots__ = ("func", "arg")

    def __init__(self, func: str, arg):
        self.func = func
        self.arg = arg


FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt")

_ZERO = Const(0.0)
_ONE = Const(1.0)


def _is_const(n: Node, v: float | None = None) -> bool:
    return isinstance(n, Const) and (v is None or n.value == v)


# Smart constructors: fold constants and drop obvious identities so the
# trees produced by repeated differentiation stay small.


def add(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def sub(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return Sub(a, b)


def mul(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a, -1.0):
        return neg(b)
    if _is_const(b, -1.0):
        return neg(a)
    return Mul(a, b)


def div(a: Node, b: Node) -> Node:
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return _ZERO
    if _is_const(b, 1.0):
        return a
    return Div(a, b)


def neg(a: Node) -> Node:
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def power(base: Node, exponent: Fraction) -> Node:
    exponent = Fraction(exponent)
    if exponent == 0:
        return _ONE
    if exponent == 1:
        return base
    if _is_const(base):
        try:
            return Const(_pow_value(base.value, exponent))
        except EvalError:
            pass  # out-of-domain constants fail at evaluation, not construction
    return Pow(base, exponent)


def call(func: str, arg: Node) -> Node:
    if _is_const(arg):
        try:
            return Const(_call_value(func, arg.value))
        except EvalError:
            pass
    return Call(func, arg)


def _pow_value(b: float, e: Fraction) -> float:
    if e.denominator == 1:
        if b == 0.0 and e < 0:
            raise EvalError("zero raised to a negative power")
        return float(b ** int(e))
    if b < 0.0:
        raise EvalError(f"negative base {b} for fractional exponent {e}")
    if b == 0.0 and e < 0:
        raise EvalError("zero raised to a negative power")
    return float(b) ** float(e)


def _call_value(func: str, x: float) -> float:
    try:
        if func == "sin":
            return math.sin(x)
        if func == "cos":
            return math.cos(x)
        if func == "tan":
            return math.tan(x)
        if func == "exp":
            return math.exp(x)
        if func == "log":
            if x <= 0.0:
                raise EvalError(f"log of non-positive value {x}")
            return math.log(x)
        if func == "sqrt":
            if x < 0.0:
                raise EvalError(f"sqrt of negative value {x}")
            return math.sqrt(x)
    except OverflowError as exc:
        raise EvalError(str(exc)) from None
    raise EvalError(f"unknown function {func!r}")


# ---------------------------------------------------------------------------
# Core tree walks


def _evaluate(node: Node, env: Mapping[str, float]) -> float:
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return float(env[node.name])
        except KeyError:
            raise UnboundVariableError(f"unbound variable {node.name!r}") from None
    if isinstance(node, Add):
        return _evaluate(node.left, env) + _evaluate(node.right, env)
    if isinstance(node, Sub):
        return _evaluate(node.left, env) - _evaluate(node.right, env)
    if isinstance(node, Mul):
        return _evaluate(node.left, env) * _evaluate(node.right, env)
    if isinstance(node, Div):
        denom = _evaluate(node.right, env)
        if denom == 0.0:
            raise EvalError("division by zero")
        return _evaluate(node.left, env) / denom
    if isinstance(node, Neg):
        return -_evaluate(node.operand, env)
    if isinstance(node, Pow):
        return _pow_value(_evaluate(node.base, env), node.exponent)
    if isinstance(node, Call):
        return _call_value(node.func, _evaluate(node.arg, env))
    raise TypeError(f"not an expression node: {node!r}")


def _diff(node: Node, var: str) -> Node:
    if isinstance(node, Const):
        return _ZERO
    if isinstance(node, Var):
        return _ONE if node.name == var else _ZERO
    if isinstance(node, Add):
        return add(_diff(node.left, var), _diff(node.right, var))
    if isinstance(node, Sub):
        return sub(_diff(node.left, var), _diff(node.right, var))
    if isinstance(node, Mul):
        return add(mul(_diff(node.left, var), node.right), mul(node.left, _diff(node.right, var)))
    if isinstance(node, Div):
        num = sub(mul(_diff(node.left, var), node.right), mul(node.left, _diff(node.right, var)))
        return div(num, power(node.right, Fraction(2)))
    if isinstance(node, Neg):
        return neg(_diff(node.operand, var))
    if isinstance(node, Pow):
        # d(b^e) = e * b^(e-1) * b'
        return mul(mul(Const(float(node.exponent)), power(node.base, node.exponent - 1)), _diff(node.base, var))
    if isinstance(node, Call):
        inner = _diff(node.arg, var)
        f, a = node.func, node.arg
        if f == "sin":
            outer: Node = call("cos", a)
        elif f == "cos":
            outer = neg(call("sin", a))
        elif f == "tan":
            outer = add(_ONE, power(call("tan", a), Fraction(2)))
        elif f == "exp":
            outer = call("exp", a)
        elif f == "log":
            outer = div(_ONE, a)
        elif f == "sqrt":
            outer = div(Const(0.5), call("sqrt", a))
        else:
            raise ExprError(f"unknown function {f!r}")
        return mul(outer, inner)
    raise TypeError(f"not an expression node: {node!r}")


def _subs(node: Node, mapping: Mapping[str, Node]) -> Node:
    if isinstance(node, Const):
        return node
    if isinstance(node, Var):
        return mapping.get(node.name, node)
    if isinstance(node, Add):
        return add(_subs(node.left, mapping), _subs(node.right, mapping))
    if isinstance(node, Sub):
        return sub(_subs(node.left, mapping), _subs(node.right, mapping))
    if isinstance(node, Mul):
        return mul(_subs(node.left, mapping), _subs(node.right, mapping))
    if isinstance(node, Div):
        return div(_subs(node.left, mapping), _subs(node.right, mapping))
    if isinstance(node, Neg):
        return neg(_subs(node.operand, mapping))
    if isinstance(node, Pow):
        return power(_subs(node.base, mapping), node.exponent)
    if isinstance(node, Call):
        return call(node.func, _subs(node.arg, mapping))
    raise TypeError(f"not an expression node: {node!r}")


def _free_vars(node: Node, acc: set):
    stack = [node]
    while stack:
        n = stack.pop()
        if isinstance(n, Var):
            acc.add(n.name)
        elif isinstance(n, (Add, Sub, Mul, Div)):
            stack.append(n.left)
            stack.append(n.right)
        elif isinstance(n, Neg):
            stack.append(n.operand)
        elif isinstance(n, Pow):
            stack.append(n.base)
        elif isinstance(n, Call):
            stack.append(n.arg)


# Printing.  Precedence levels: add/sub 1, mul/div 2, unary minus 3, power 4.


def _fmt_const(v: float) -> str:
    if v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def _to_str(node: Node, parent_prec: int) -> str:
    if isinstance(node, Const):
        s = _fmt_const(node.value)
        if node.value < 0 and parent_prec > 1:
            return f"({s})"
        return s
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Add):
        s = f"{_to_str(node.left, 1)} + {_to_str(node.right, 2)}"
        return f"({s})" if parent_prec > 1 else s
    if isinstance(node, Sub):
        s = f"{_to_str(node.left, 1)} - {_to_str(node.right, 2)}"
        return f"({s})" if parent_prec > 1 else s
    if isinstance(node, Mul):
        s = f"{_to_str(node.left, 2)}*{_to_str(node.right, 3)}"
        return f"({s})" if parent_prec > 2 else s
    if isinstance(node, Div):
        s = f"{_to_str(node.left, 2)}/{_to_str(node.right, 3)}"
        return f"({s})" if parent_prec > 2 else s
    if isinstance(node, Neg):
        s = f"-{_to_str(node.operand, 3)}"
        return f"({s})" if parent_prec > 3 else s
    if isinstance(node, Pow):
        e = node.exponent
        es = str(e.numerator) if e.denominator == 1 else f"({e.numerator}/{e.denominator})"
        if e.numerator < 0:
            es = f"({e})"
        s = f"{_to_str(node.base, 5)}^{es}"
        return f"({s})" if parent_prec > 4 else s
    if isinstance(node, Call):
        return f"{node.func}({_to_str(node.arg, 0)})"
    raise TypeError(f"not an expression node: {node!r}")


# ---------------------------------------------------------------------------
# Compilation: emit a Python function with one assignment per distinct
# subtree (identity-based CSE), so shared subtrees are evaluated once and
# the generated source stays linear in the DAG size.

_COMPILE_GLOBALS = {
    "sin": math.sin,
    "cos": math.cos,
    "tan": math.tan,
    "exp": math.exp,
    "log": math.log,
    "sqrt": math.sqrt,
}


def _compile(root: Node, var_order: Sequence[str]) -> Callable:
    index = {name: i for i, name in enumerate(var_order)}
    lines: list[str] = []
    names: dict[int, str] = {}

    def emit(node: Node) -> str:
        key = id(node)
        if key in names:
            return names[key]
        if isinstance(node, Const):
            code = repr(node.value)
        elif isinstance(node, Var):
            if node.name not in index:
                raise UnboundVariableError(f"variable {node.name!r} not in compile order {list(var_order)}")
            code = f"_v[{index[node.name]}]"
        elif isinstance(node, Add):
            code = f"{emit(node.left)} + {emit(node.right)}"
        elif isinstance(node, Sub):
            code = f"{emit(node.left)} - {emit(node.right)}"
        elif isinstance(node, Mul):
            code = f"{emit(node.left)} * {emit(node.right)}"
        elif isinstance(node, Div):
            code = f"{emit(node.left)} / {emit(node.right)}"
        elif isinstance(node, Neg):
            code = f"-{emit(node.operand)}"
        elif isinstance(node, Pow):
            e = node.exponent
            es = repr(int(e)) if e.denominator == 1 else repr(float(e))
            code = f"{emit(node.base)} ** {es}"
        elif isinstance(node, Call):
            code = f"{node.func}({emit(node.arg)})"
        else:
            raise TypeError(f"not an expression node: {node!r}")
        name = f"_t{len(names)}"
        names[key] = name
        lines.append(f" {name} = {code}")
        return name

    result = emit(root)
    src = "def _f(_v):\n" + "\n".join(lines) + f"\n return {result}"
    ns = dict(_COMPILE_GLOBALS)
    exec(src, ns)
    return ns["_f"]


# ---------------------------------------------------------------------------
# Public wrapper


class ScalarExpr:
    """Immutable scalar expression over named variables.

    Values are pure functions of their variable bindings; instances are
    safe to share across threads.
    """

    __slots__ = ("root", "free_vars", "_compiled")

    def __init__(self, root: Node):
        self.root = root
        fv: set = set()
        _free_vars(root, fv)
        self.free_vars = frozenset(fv)
        self._compiled: dict = {}

    # -- construction -------------------------------------------------

    @staticmethod
    def parse(text: str, allowed_vars: Iterable[str]) -> "ScalarExpr":
        return ScalarExpr(_Parser(text, frozenset(allowed_vars)).parse())

    @staticmethod
    def const(value: float) -> "ScalarExpr":
        return ScalarExpr(Const(value))

    @staticmethod
    def var(name: str) -> "ScalarExpr":
        return ScalarExpr(Var(name))

    @staticmethod
    def zero() -> "ScalarExpr":
        return ScalarExpr(_ZERO)

    @staticmethod
    def one() -> "ScalarExpr":
        return ScalarExpr(_ONE)

    # -- algebra (used heavily when assembling metrics symbolically) ---

    @staticmethod
    def _node_of(x) -> Node:
        if isinstance(x, ScalarExpr):
            return x.root
        if isinstance(x, (int, float)):
            return Const(float(x))
        raise TypeError(f"cannot coerce {x!r} to ScalarExpr")

    def __add__(self, other):
        return ScalarExpr(add(self.root, self._node_of(other)))

    __radd__ = __add__

    def __sub__(self, other):
        return ScalarExpr(sub(self.root, self._node_of(other)))

    def __rsub__(self, other):
        return ScalarExpr(sub(self._node_of(other), self.root))

    def __mul__(self, other):
        return ScalarExpr(mul(self.root, self._node_of(other)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return ScalarExpr(div(self.root, self._node_of(other)))

    def __rtruediv__(self, other):
        return ScalarExpr(div(self._node_of(other), self.root))

    def __neg__(self):
        return ScalarExpr(neg(self.root))

    def __pow__(self, exponent):
        return ScalarExpr(power(self.root, Fraction(exponent)))

    def apply(self, func: str) -> "ScalarExpr":
        if func not in FUNCTIONS:
            raise ExprError(f"unknown function {func!r}")
        return ScalarExpr(call(func, self.root))

    # -- semantics ------------------------------------------------------

    def evaluate(self, bindings: Mapping[str, float]) -> float:
        value = _evaluate(self.root, bindings)
        if not math.isfinite(value):
            raise EvalError(f"non-finite value {value} for {self}")
        return value

    def diff(self, var: str) -> "ScalarExpr":
        return ScalarExpr(_diff(self.root, var))

    def subs(self, mapping: Mapping[str, "ScalarExpr | float"]) -> "ScalarExpr":
        node_map = {k: self._node_of(v) for k, v in mapping.items()}
        return ScalarExpr(_subs(self.root, node_map))

    def compile(self, var_order: Sequence[str]) -> Callable:
        """Fast positional-argument evaluator, cached per variable order."""
        key = tuple(var_order)
        fn = self._compiled.get(key)
        if fn is None:
            fn = _compile(self.root, key)
            self._compiled[key] = fn
        return fn

    def is_zero(self) -> bool:
        return _is_const(self.root, 0.0)

    def is_const(self) -> bool:
        return isinstance(self.root, Const)

    # -- identity -------------------------------------------------------

    def __str__(self):
        return _to_str(self.root, 0)

    def __repr__(self):
        return f"ScalarExpr({self})"

    def __eq__(self, other):
        return isinstance(other, ScalarExpr) and self.root == other.root

    def __hash__(self):
        return hash(self.root)


# ---------------------------------------------------------------------------
# Parser: plain recursive descent over a hand-rolled token stream.  Unicode
# identifiers are allowed (any Python-style name, so θ and φ work).


class _Token:
    __slots__ = ("kind", "text", "pos")

    def __init__(self, kind, text, pos):
        self.kind, self.text, self.pos = kind, text, pos


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()):
            j = i
            seen_dot = False
            while j < n and (text[j].isdigit() or (text[j] == "." and not seen_dot)):
                if text[j] == ".":
                    seen_dot = True
                j += 1
            if j < n and text[j] in "eE":
                k = j + 1
                if k < n and text[k] in "+-":
                    k += 1
                if k < n and text[k].isdigit():
                    j = k
                    while j < n and text[j].isdigit():
                        j += 1
            tokens.append(_Token("number", text[i:j], i))
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] == "_"):
                j += 1
            tokens.append(_Token("name", text[i:j], i))
            i = j
            continue
        if ch in "+-*/^(),":
            tokens.append(_Token(ch, ch, i))
            i += 1
            continue
        raise ParseError(f"unexpected character {ch!r}", i)
    tokens.append(_Token("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, allowed_vars: frozenset):
        self.text = text
        self.allowed = allowed_vars
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def next(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str) -> _Token:
        tok = self.next()
        if tok.kind != kind:
            raise ParseError(f"expected {kind!r}, found {tok.text or 'end of input'!r}", tok.pos)
        return tok

    def parse(self) -> Node:
        node = self.expr()
        tok = self.peek()
        if tok.kind != "end":
            raise ParseError(f"unexpected trailing input {tok.text!r}", tok.pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek().kind in ("+", "-"):
            op = self.next().kind
            rhs = self.term()
            node = add(node, rhs) if op == "+" else sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek().kind in ("*", "/"):
            op = self.next().kind
            rhs = self.unary()
            node = mul(node, rhs) if op == "*" else div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.peek().kind == "-":
            self.next()
            return neg(self.unary())
        if self.peek().kind == "+":
            self.next()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek().kind == "^":
            tok = self.next()
            exponent_node = self.unary()
            exponent = _rational_of(exponent_node)
            if exponent is None:
                raise ParseError("power exponent must be a rational constant", tok.pos)
            return power(base, exponent)
        return base

    def atom(self) -> Node:
        tok = self.next()
        if tok.kind == "number":
            return Const(float(tok.text))
        if tok.kind == "(":
            node = self.expr()
            self.expect(")")
            return node
        if tok.kind == "name":
            if self.peek().kind == "(":
                if tok.text not in FUNCTIONS:
                    raise UnknownIdentifierError(f"unknown function {tok.text!r}", tok.pos)
                self.next()
                args = [self.expr()]
                while self.peek().kind == ",":
                    self.next()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != 1:
                    raise ArityError(f"{tok.text} takes 1 argument, got {len(args)}", tok.pos)
                return call(tok.text, args[0])
            if tok.text in FUNCTIONS:
                raise ParseError(f"function {tok.text!r} used without arguments", tok.pos)
            if tok.text not in self.allowed:
                raise UnknownIdentifierError(f"unknown identifier {tok.text!r}", tok.pos)
            return Var(tok.text)
        raise ParseError(f"expected a value, found {tok.text or 'end of input'!r}", tok.pos)


def _rational_of(node: Node) -> Fraction | None:
    """Exact rational value of a constant subtree, None if non-constant."""
    if isinstance(node, Const):
        return Fraction(node.value)  # exact for binary floats
    if isinstance(node, Neg):
        v = _rational_of(node.operand)
        return None if v is None else -v
    if isinstance(node, (Add, Sub, Mul, Div)):
        a, b = _rational_of(node.left), _rational_of(node.right)
        if a is None or b is None:
            return None
        if isinstance(node, Add):
            return a + b
        if isinstance(node, Sub):
            return a - b
        if isinstance(node, Mul):
            return a * b
        if b == 0:
            return None
        return a / b
    if isinstance(node, Pow):
        a = _rational_of(node.base)
        if a is None or node.exponent.denominator != 1:
            return None
        return a ** int(node.exponent)
    return None


def parse_expression(text: str, allowed_vars: Iterable[str]) -> ScalarExpr:
    """Parse ``text`` into a ScalarExpr whose variables lie in ``allowed_vars``."""
    return ScalarExpr.parse(text, allowed_vars)


def differentiate(e: ScalarExpr, var: str) -> ScalarExpr:
    """Exact symbolic derivative of ``e`` with respect to ``var``."""
    return e.diff(var)


def evaluate(e: ScalarExpr, bindings: Mapping[str, float]) -> float:
    """Evaluate ``e`` with every free variable bound."""
    return e.evaluate(bindings)
