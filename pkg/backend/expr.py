"""Arithmetic expression DSL for synthetic value functions.

Source text such as ``-0.185*x1*(x2+x3)^2.432 - x4*x5*x6*x7`` is parsed into an
immutable ``ExprGraph``: a topologically ordered node list where every operand
index precedes its consumer. Graphs are evaluated on whole batches of input
rows with numpy, and differentiated with respect to the inputs by a reverse
sweep over the same node list.

Grammar (lowest to highest binding)::

    expr    := term (("+" | "-") term)*
    term    := unary (("*" | "/") unary)*
    unary   := "-" unary | power
    power   := primary ("^" unary)?          # right associative
    primary := NUMBER | "pi" | "x" INDEX | FUNC "(" expr ("," expr)* ")" | "(" expr ")"

Unary minus binds looser than ``^`` so ``-2^2`` is -4. Implicit multiplication
is not supported.
"""

import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from exceptions import (
    DimensionError,
    DomainError,
    ExprSyntaxError,
    LexError,
    UnknownIdentifierError,
    VariableIndexError,
)

logger = logging.getLogger(__name__)

MAX_VARIABLE_INDEX = 25
POLE_TOLERANCE = 1e-12

# name -> argument count
FUNCTIONS: Dict[str, int] = {
    "sigmoid": 1, "exp": 1, "log": 1, "sqrt": 1, "abs": 1,
    "sin": 1, "cos": 1, "tan": 1, "asin": 1, "acos": 1, "atan": 1,
    "sinh": 1, "tanh": 1, "sec": 1,
    "max": 2, "min": 2,
}
CONSTANTS: Dict[str, float] = {"pi": math.pi}

BINARY_SYMBOLS = {"add": "+", "sub": "-", "mul": "*", "div": "/", "pow": "^"}
_SYMBOL_OPS = {"+": "add", "-": "sub", "*": "mul", "/": "div"}
_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}

_START_OF_OPERAND = ["number", "variable", "constant", "function", "'('", "'-'"]


# ============================================================================
# LEXER
# ============================================================================

class Token(NamedTuple):
    kind: str          # number | name | op | end
    text: str
    position: int


_TOKEN_PATTERN = re.compile(
    r"(?P<ws>\s+)"
    r"|(?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),])"
)


def tokenize(source: str) -> List[Token]:
    tokens: List[Token] = []
    position = 0
    while position < len(source):
        match = _TOKEN_PATTERN.match(source, position)
        if match is None:
            raise LexError(position, source[position])
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, match.group(), position))
        position = match.end()
    tokens.append(Token("end", "", len(source)))
    return tokens


# ============================================================================
# GRAPH
# ============================================================================

class Node(NamedTuple):
    op: str
    args: Tuple[int, ...] = ()
    payload: Optional[float] = None     # constant value, or 1-based variable index


class GradResult(NamedTuple):
    value: float
    gradient: np.ndarray


@dataclass(frozen=True)
class ExprGraph:
    """Immutable expression DAG over variables x1..x_arity."""

    nodes: Tuple[Node, ...]
    arity: int
    root: int
    source: str = ""

    # ------------------------------------------------------------------
    # Forward sweep
    # ------------------------------------------------------------------
    def _check_inputs(self, inputs: np.ndarray) -> np.ndarray:
        inputs = np.asarray(inputs, dtype=float)
        if inputs.ndim == 1:
            inputs = inputs[None, :]
        if inputs.ndim != 2 or inputs.shape[1] < self.arity:
            raise DimensionError(f"expression reads {self.arity} inputs, got shape {inputs.shape}")
        return inputs

    def _forward(self, inputs: np.ndarray) -> List[np.ndarray]:
        rows = inputs.shape[0]
        vals: List[np.ndarray] = []
        with np.errstate(all="ignore"):
            for k, node in enumerate(self.nodes):
                args = [vals[i] for i in node.args]
                out = _forward_op(k, node, args, inputs, rows)
                _require(k, np.isfinite(out), out, "non-finite result")
                vals.append(out)
        return vals

    def eval_batch(self, inputs: np.ndarray) -> np.ndarray:
        """f on each row of a (B, >= arity) matrix."""
        return self._forward(self._check_inputs(inputs))[self.root]

    def evaluate(self, inputs: Sequence[float]) -> float:
        return float(self.eval_batch(np.asarray(inputs, dtype=float)[None, :])[0])

    # ------------------------------------------------------------------
    # Reverse sweep
    # ------------------------------------------------------------------
    def grad_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Values (B,) and input gradients (B, arity) by reverse accumulation."""
        inputs = self._check_inputs(inputs)
        vals = self._forward(inputs)
        rows = inputs.shape[0]
        adjoint: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        adjoint[self.root] = np.ones(rows)
        gradient = np.zeros((rows, self.arity))
        with np.errstate(all="ignore"):
            for k in range(len(self.nodes) - 1, -1, -1):
                g = adjoint[k]
                if g is None:
                    continue
                node = self.nodes[k]
                if node.op == "var":
                    gradient[:, int(node.payload) - 1] += g
                    continue
                args = [vals[i] for i in node.args]
                for i, local in zip(node.args, _backward_op(k, node, args, vals[k], g)):
                    adjoint[i] = local if adjoint[i] is None else adjoint[i] + local
        return vals[self.root], gradient

    def grad(self, inputs: Sequence[float]) -> GradResult:
        values, gradient = self.grad_batch(np.asarray(inputs, dtype=float)[None, :])
        return GradResult(float(values[0]), gradient[0])

    def __str__(self) -> str:
        return unparse(self)


def _require(node: int, ok: np.ndarray, operand: np.ndarray, message: str) -> None:
    if not np.all(ok):
        row = int(np.argmin(ok))
        raise DomainError(message, node=node, operand=float(np.asarray(operand)[row]), row=row)


def _forward_op(k: int, node: Node, args: List[np.ndarray], inputs: np.ndarray, rows: int) -> np.ndarray:
    op = node.op
    if op == "const":
        return np.full(rows, float(node.payload))
    if op == "var":
        return inputs[:, int(node.payload) - 1].copy()
    a = args[0]
    if op == "neg":
        return -a
    if op == "add":
        return a + args[1]
    if op == "sub":
        return a - args[1]
    if op == "mul":
        return a * args[1]
    if op == "div":
        _require(k, args[1] != 0, args[1], "division by zero")
        return a / args[1]
    if op == "pow":
        return _pow_forward(k, a, args[1])
    if op == "sigmoid":
        return expit(a)
    if op == "exp":
        return np.exp(a)
    if op == "log":
        _require(k, a > 0, a, "log of a non-positive value")
        return np.log(a)
    if op == "sqrt":
        _require(k, a >= 0, a, "sqrt of a negative value")
        return np.sqrt(a)
    if op == "abs":
        return np.abs(a)
    if op == "sin":
        return np.sin(a)
    if op == "cos":
        return np.cos(a)
    if op == "tan":
        _require(k, np.abs(np.cos(a)) >= POLE_TOLERANCE, a, "tan pole")
        return np.tan(a)
    if op == "asin":
        _require(k, np.abs(a) <= 1, a, "asin outside [-1, 1]")
        return np.arcsin(a)
    if op == "acos":
        _require(k, np.abs(a) <= 1, a, "acos outside [-1, 1]")
        return np.arccos(a)
    if op == "atan":
        return np.arctan(a)
    if op == "sinh":
        return np.sinh(a)
    if op == "tanh":
        return np.tanh(a)
    if op == "sec":
        c = np.cos(a)
        _require(k, np.abs(c) >= POLE_TOLERANCE, a, "sec pole")
        return 1.0 / c
    if op == "max":
        return np.maximum(a, args[1])
    if op == "min":
        return np.minimum(a, args[1])
    raise ValueError(f"unknown operator {op!r}")


def _pow_forward(k: int, base: np.ndarray, exponent: np.ndarray) -> np.ndarray:
    integral = exponent == np.round(exponent)
    _require(k, (base >= 0) | integral, base, "negative base with a non-integer exponent")
    zero = base == 0
    _require(k, ~zero | (exponent >= 0), base, "zero base with a negative exponent")
    _require(k, ~zero | (exponent == 0) | (exponent >= 1), base, "zero base with an exponent below 1")
    return np.power(base, exponent)


def _backward_op(k: int, node: Node, args: List[np.ndarray], out: np.ndarray,
                 g: np.ndarray) -> Tuple[np.ndarray, ...]:
    op = node.op
    if op == "const":
        return ()
    a = args[0]
    if op == "neg":
        return (-g,)
    if op == "add":
        return g, g
    if op == "sub":
        return g, -g
    if op == "mul":
        return g * args[1], g * a
    if op == "div":
        c = args[1]
        return g / c, -g * a / (c * c)
    if op == "pow":
        c = args[1]
        zero = a == 0
        safe_base = np.where(zero, 1.0, a)
        # d/da at a=0: 0 for p>1 (and p=0), 1 for p=1
        d_base = np.where(zero, np.where(c == 1, 1.0, 0.0), c * np.power(safe_base, c - 1))
        d_exp = np.where(a > 0, out * np.log(np.where(a > 0, a, 1.0)), 0.0)
        return g * d_base, g * d_exp
    if op == "sigmoid":
        return (g * out * (1.0 - out),)
    if op == "exp":
        return (g * out,)
    if op == "log":
        return (g / a,)
    if op == "sqrt":
        _require(k, out > 0, a, "sqrt is not differentiable at 0")
        return (g / (2.0 * out),)
    if op == "abs":
        return (g * np.sign(a),)
    if op == "sin":
        return (g * np.cos(a),)
    if op == "cos":
        return (-g * np.sin(a),)
    if op == "tan":
        return (g * (1.0 + out * out),)
    if op in ("asin", "acos"):
        _require(k, np.abs(a) < 1, a, f"{op} is not differentiable at +-1")
        d = 1.0 / np.sqrt(1.0 - a * a)
        return (g * d,) if op == "asin" else (-g * d,)
    if op == "atan":
        return (g / (1.0 + a * a),)
    if op == "sinh":
        return (g * np.cosh(a),)
    if op == "tanh":
        return (g * (1.0 - out * out),)
    if op == "sec":
        return (g * out * np.tan(a),)
    if op in ("max", "min"):
        # ties go to the first argument
        first = a >= args[1] if op == "max" else a <= args[1]
        return g * first, g * ~first
    raise ValueError(f"unknown operator {op!r}")


# ============================================================================
# PARSER
# ============================================================================

class _Parser:
    """Precedence-climbing parser that emits nodes in topological order."""

    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.index = 0
        self.nodes: List[Node] = []
        self.arity = 0

    def peek(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, text: str, expected: List[str]) -> Token:
        token = self.peek()
        if token.text != text or token.kind == "end":
            raise ExprSyntaxError(token.position, expected, token.text or None)
        return self.advance()

    def emit(self, op: str, args: Tuple[int, ...] = (), payload: Optional[float] = None) -> int:
        self.nodes.append(Node(op, args, payload))
        return len(self.nodes) - 1

    # --- grammar -------------------------------------------------------
    def parse(self) -> ExprGraph:
        root = self.expression(1)
        token = self.peek()
        if token.kind != "end":
            raise ExprSyntaxError(token.position, ["operator", "end of input"], token.text)
        return ExprGraph(tuple(self.nodes), self.arity, root, self.source)

    def expression(self, min_prec: int) -> int:
        lhs = self.unary()
        while True:
            token = self.peek()
            prec = _PRECEDENCE.get(token.text) if token.kind == "op" else None
            if prec is None or prec < min_prec:
                return lhs
            self.advance()
            rhs = self.expression(prec + 1)   # left associative
            lhs = self.emit(_SYMBOL_OPS[token.text], (lhs, rhs))

    def unary(self) -> int:
        if self.peek().text == "-" and self.peek().kind == "op":
            self.advance()
            return self.emit("neg", (self.unary(),))
        return self.power()

    def power(self) -> int:
        base = self.primary()
        if self.peek().text == "^":
            self.advance()
            exponent = self.unary()
            return self.emit("pow", (base, exponent))
        return base

    def primary(self) -> int:
        token = self.peek()
        if token.kind == "number":
            self.advance()
            return self.emit("const", payload=float(token.text))
        if token.kind == "name":
            self.advance()
            return self.name(token)
        if token.text == "(":
            self.advance()
            inner = self.expression(1)
            self.expect(")", ["')'", "operator"])
            return inner
        raise ExprSyntaxError(token.position, _START_OF_OPERAND, token.text or None)

    def name(self, token: Token) -> int:
        text = token.text
        if text in CONSTANTS:
            return self.emit("const", payload=CONSTANTS[text])
        if text in FUNCTIONS:
            self.expect("(", ["'('"])
            args = [self.expression(1)]
            for _ in range(FUNCTIONS[text] - 1):
                self.expect(",", ["','"])
                args.append(self.expression(1))
            self.expect(")", ["')'"])
            return self.emit(text, tuple(args))
        match = re.fullmatch(r"x(\d+)", text)
        if match is None:
            raise UnknownIdentifierError(token.position, text)
        index = int(match.group(1))
        if not 1 <= index <= MAX_VARIABLE_INDEX:
            raise VariableIndexError(token.position, index, MAX_VARIABLE_INDEX)
        self.arity = max(self.arity, index)
        return self.emit("var", payload=index)


def parse(source: str) -> ExprGraph:
    """Parse DSL source text into an ExprGraph."""
    return _Parser(source).parse()


def evaluate(graph: ExprGraph, inputs: Sequence[float]) -> float:
    return graph.evaluate(inputs)


def grad(graph: ExprGraph, inputs: Sequence[float]) -> GradResult:
    return graph.grad(inputs)


def unparse(graph: ExprGraph) -> str:
    """Fully parenthesized source text that reparses to an equivalent graph."""
    text: List[str] = []
    for node in graph.nodes:
        if node.op == "const":
            text.append(repr(float(node.payload)))
        elif node.op == "var":
            text.append(f"x{int(node.payload)}")
        elif node.op == "neg":
            text.append(f"(-{text[node.args[0]]})")
        elif node.op in BINARY_SYMBOLS:
            a, b = node.args
            text.append(f"({text[a]}{BINARY_SYMBOLS[node.op]}{text[b]})")
        else:
            text.append(f"{node.op}({','.join(text[i] for i in node.args)})")
    return text[graph.root]


# ============================================================================
# BACKEND ADAPTER
# ============================================================================

class ExprBackend:
    """Value-function backend over an ExprGraph (see game_core.ValueBackend)."""

    kind = "expr"

    def __init__(self, graph: ExprGraph, n: Optional[int] = None):
        n = graph.arity if n is None else n
        if graph.arity > n:
            raise DimensionError(f"expression references x{graph.arity} but the game has n={n}")
        self.graph = graph
        self.arity = n

    def evaluate_batch(self, inputs: np.ndarray) -> np.ndarray:
        return self.graph.eval_batch(inputs)

    def gradient_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        values, gradient = self.graph.grad_batch(inputs)
        if gradient.shape[1] < self.arity:
            gradient = np.hstack([gradient, np.zeros((gradient.shape[0], self.arity - gradient.shape[1]))])
        return values, gradient
