"""Arithmetic expressions for exponent fields and data.

Grammar (whitespace insensitive)::

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-" factor | atom ("^" factor)?
    atom   := number | "pi" | variable | function "(" expr ("," expr)* ")"
            | "(" expr ")"

`^` binds tighter than unary minus and is right-associative, so `-x^2` is
`-(x^2)` and `2^3^2` is `2^9`. Evaluation is vectorized over numpy arrays and
never returns a non-finite value: division by zero, square roots of negative
numbers and every other operation that would produce inf/nan raise
`DomainError`.
"""

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

Value = Union[float, np.ndarray]


class ExpressionSyntaxError(ValueError):
    def __init__(self, message: str, position: int) -> None:
        self.message = f"{message} (at position {position})"
        self.position = position
        super().__init__(self.message)


class UnknownVariable(ValueError):
    def __init__(self, name: str, allowed: Tuple[str, ...]) -> None:
        self.name = name
        self.allowed = allowed
        self.message = (
            f"Unknown variable '{name}'; allowed variables are "
            f"{', '.join(allowed)} and the constant pi"
        )
        super().__init__(self.message)


class DomainError(ArithmeticError):
    def __init__(self, message: str) -> None:
        self.message = message
        super().__init__(self.message)


class Role(str, Enum):
    pairwise = "pairwise"
    pointwise = "pointwise"


def variables_for(dimension: int, role: Role) -> Tuple[str, ...]:
    if dimension == 1:
        return ("x", "y") if role == Role.pairwise else ("x",)
    if dimension == 2:
        if role == Role.pairwise:
            return ("x1", "x2", "y1", "y2")
        return ("x1", "x2")
    raise ValueError(f"Unsupported dimension {dimension}, expected 1 or 2")


def _finite(result: Value, what: str) -> Value:
    if not np.all(np.isfinite(result)):
        raise DomainError(f"{what} produced a non-finite value")
    return result


class Node:
    def evaluate(self, env: Mapping[str, Value]) -> Value:
        raise NotImplementedError

    def to_source(self) -> str:
        raise NotImplementedError

    def free_variables(self) -> frozenset:
        return frozenset()


@dataclass(frozen=True)
class Number(Node):
    value: float

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        return np.float64(self.value)

    def to_source(self) -> str:
        if math.copysign(1.0, self.value) < 0:
            return f"(-{repr(-self.value)})"
        return repr(self.value)


@dataclass(frozen=True)
class Constant(Node):
    name: str

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        return np.float64(math.pi)

    def to_source(self) -> str:
        return self.name


@dataclass(frozen=True)
class Variable(Node):
    name: str

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        try:
            return np.asarray(env[self.name], dtype=float)
        except KeyError:
            raise ValueError(f"No value supplied for variable '{self.name}'")

    def to_source(self) -> str:
        return self.name

    def free_variables(self) -> frozenset:
        return frozenset({self.name})


@dataclass(frozen=True)
class Negate(Node):
    operand: Node

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        return -self.operand.evaluate(env)

    def to_source(self) -> str:
        return f"(-{self.operand.to_source()})"

    def free_variables(self) -> frozenset:
        return self.operand.free_variables()


@dataclass(frozen=True)
class BinaryOp(Node):
    op: str
    left: Node
    right: Node

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        lhs = self.left.evaluate(env)
        rhs = self.right.evaluate(env)
        if self.op == "+":
            return _finite(lhs + rhs, "addition")
        if self.op == "-":
            return _finite(lhs - rhs, "subtraction")
        if self.op == "*":
            return _finite(lhs * rhs, "multiplication")
        if self.op == "/":
            if np.any(rhs == 0):
                raise DomainError("division by zero")
            return _finite(lhs / rhs, "division")
        with np.errstate(all="ignore"):
            result = np.power(lhs, rhs)
        return _finite(result, f"power {self.to_source()}")

    def to_source(self) -> str:
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"

    def free_variables(self) -> frozenset:
        return self.left.free_variables() | self.right.free_variables()


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: Tuple[Node, ...]

    def evaluate(self, env: Mapping[str, Value]) -> Value:
        values = [arg.evaluate(env) for arg in self.args]
        if self.name == "sqrt":
            if np.any(values[0] < 0):
                raise DomainError("sqrt of a negative number")
            return np.sqrt(values[0])
        if self.name == "min":
            return np.minimum.reduce(np.broadcast_arrays(*values))
        if self.name == "max":
            return np.maximum.reduce(np.broadcast_arrays(*values))
        with np.errstate(all="ignore"):
            result = UNARY_FUNCTIONS[self.name](values[0])
        return _finite(result, f"{self.name}()")

    def to_source(self) -> str:
        return f"{self.name}({', '.join(arg.to_source() for arg in self.args)})"

    def free_variables(self) -> frozenset:
        names: frozenset = frozenset()
        for arg in self.args:
            names |= arg.free_variables()
        return names


UNARY_FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "abs": np.abs,
    "sqrt": np.sqrt,
}
VARIADIC_FUNCTIONS = ("min", "max")
FUNCTIONS = tuple(UNARY_FUNCTIONS) + VARIADIC_FUNCTIONS

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int


def tokenize(source: str) -> List[Token]:
    tokens: List[Token] = []
    pos = 0
    stripped_end = len(source.rstrip())
    while pos < stripped_end:
        match = _TOKEN_RE.match(source, pos)
        if match is None or match.lastgroup is None:
            offending = source[pos:].lstrip()[:1]
            where = pos + (len(source[pos:]) - len(source[pos:].lstrip()))
            raise ExpressionSyntaxError(
                f"unexpected character '{offending}', expected a number, "
                "name, operator or parenthesis",
                where,
            )
        kind = match.lastgroup
        tokens.append(Token(kind, match.group(kind), match.start(kind)))
        pos = match.end()
    tokens.append(Token("end", "", len(source)))
    return tokens


class Parser:
    def __init__(self, source: str, allowed: Tuple[str, ...]) -> None:
        self.source = source
        self.allowed = allowed
        self.tokens = tokenize(source)
        self.index = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.current
        self.index += 1
        return token

    def expect(self, text: str) -> Token:
        token = self.current
        if token.text != text:
            found = f"'{token.text}'" if token.kind != "end" else "end of input"
            raise ExpressionSyntaxError(
                f"expected '{text}', found {found}", token.position
            )
        return self.advance()

    def parse(self) -> Node:
        node = self.expr()
        if self.current.kind != "end":
            raise ExpressionSyntaxError(
                f"expected an operator or end of input, found '{self.current.text}'",
                self.current.position,
            )
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.text in ("+", "-"):
            op = self.advance().text
            node = BinaryOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.current.text in ("*", "/"):
            op = self.advance().text
            node = BinaryOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.current.text == "-":
            self.advance()
            return Negate(self.factor())
        base = self.atom()
        if self.current.text == "^":
            self.advance()
            return BinaryOp("^", base, self.factor())
        return base

    def atom(self) -> Node:
        token = self.current
        if token.kind == "number":
            self.advance()
            return Number(float(token.text))
        if token.text == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        if token.kind == "ident":
            self.advance()
            if token.text in FUNCTIONS:
                return self.call(token)
            if self.current.text == "(":
                raise ExpressionSyntaxError(
                    f"unknown function '{token.text}', expected one of "
                    f"{', '.join(FUNCTIONS)}",
                    token.position,
                )
            if token.text == "pi":
                return Constant("pi")
            if token.text in self.allowed:
                return Variable(token.text)
            raise UnknownVariable(token.text, self.allowed)
        found = f"'{token.text}'" if token.kind != "end" else "end of input"
        raise ExpressionSyntaxError(
            f"expected a number, name or '(', found {found}", token.position
        )

    def call(self, name: Token) -> Node:
        self.expect("(")
        args = [self.expr()]
        while self.current.text == ",":
            self.advance()
            args.append(self.expr())
        self.expect(")")
        if name.text in UNARY_FUNCTIONS and len(args) != 1:
            raise ExpressionSyntaxError(
                f"{name.text}() takes exactly one argument, got {len(args)}",
                name.position,
            )
        if name.text in VARIADIC_FUNCTIONS and len(args) < 2:
            raise ExpressionSyntaxError(
                f"{name.text}() takes at least two arguments", name.position
            )
        return Call(name.text, tuple(args))


@dataclass(frozen=True)
class Expression:
    root: Node
    dimension: int
    role: Role
    source: str

    @property
    def allowed_variables(self) -> Tuple[str, ...]:
        return variables_for(self.dimension, self.role)

    def free_variables(self) -> frozenset:
        return self.root.free_variables()

    def evaluate_many(self, env: Mapping[str, Value]) -> np.ndarray:
        """Evaluate on broadcastable coordinate arrays."""
        shape = np.broadcast_shapes(*(np.shape(v) for v in env.values()))
        return np.broadcast_to(self.root.evaluate(env), shape).astype(float)

    def to_source(self) -> str:
        return self.root.to_source()

    def __str__(self) -> str:
        return self.source


def parse_expression(
    source: str, dimension: int, role: Union[Role, str]
) -> Expression:
    role = Role(role)
    if not source or not source.strip():
        raise ExpressionSyntaxError("empty expression", 0)
    root = Parser(source, variables_for(dimension, role)).parse()
    return Expression(root=root, dimension=dimension, role=role, source=source)


def evaluate(expr: Expression, point: Mapping[str, float]) -> float:
    missing = [name for name in expr.free_variables() if name not in point]
    if missing:
        raise ValueError(f"No value supplied for {', '.join(sorted(missing))}")
    return float(expr.root.evaluate({k: float(v) for k, v in point.items()}))


def coordinate_env(
    expr: Expression,
    x: np.ndarray,
    y: Optional[np.ndarray] = None,
) -> Dict[str, np.ndarray]:
    """Bind point arrays of shape (..., N) to the expression's variable names."""
    x = np.asarray(x, dtype=float)
    if expr.dimension == 1:
        env = {"x": x[..., 0]}
        if y is not None:
            env["y"] = np.asarray(y, dtype=float)[..., 0]
        return env
    env = {"x1": x[..., 0], "x2": x[..., 1]}
    if y is not None:
        y = np.asarray(y, dtype=float)
        env.update({"y1": y[..., 0], "y2": y[..., 1]})
    return env
