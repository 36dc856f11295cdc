"""Exception hierarchy shared by every module of the toolkit.

The CLI maps these families onto exit codes (see ``cli.EXIT_CODES``) and the
HTTP service maps them onto status codes, so new errors should subclass one of
the families below rather than ``Exception`` directly.
"""

from typing import List, Optional


class AttributionToolkitError(Exception):
    """Base class for every error raised on purpose by the toolkit."""


# ============================================================================
# CONFIGURATION / ARGUMENT ERRORS (exit code 2)
# ============================================================================

class ConfigError(AttributionToolkitError, ValueError):
    """Invalid configuration, manifest or command-line input."""


class DimensionError(AttributionToolkitError, ValueError):
    """Vector or matrix shapes do not agree."""


class ArgumentError(AttributionToolkitError, ValueError):
    """An operation was called with arguments outside its contract."""


class CapacityError(AttributionToolkitError):
    """The requested exact computation exceeds the configured player cap."""

    def __init__(self, n: int, limit: int, what: str = "exact enumeration"):
        self.n = n
        self.limit = limit
        super().__init__(f"{what} supports at most {limit} variables, got n={n}")


class CapabilityError(AttributionToolkitError):
    """The value-function backend cannot provide what was asked of it."""


# ============================================================================
# EXPRESSION PARSING ERRORS (exit code 2)
# ============================================================================

class ExpressionError(AttributionToolkitError, ValueError):
    """Base class for errors raised while reading expression source text."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class LexError(ExpressionError):
    def __init__(self, position: int, character: str):
        self.character = character
        super().__init__(f"unexpected character {character!r}", position)


class ExprSyntaxError(ExpressionError):
    def __init__(self, position: int, expected: List[str], found: Optional[str] = None):
        self.expected = list(expected)
        self.found = found
        got = "end of input" if found is None else repr(found)
        super().__init__(f"expected one of {', '.join(self.expected)} but found {got}", position)


class UnknownIdentifierError(ExpressionError):
    def __init__(self, position: int, name: str):
        self.name = name
        super().__init__(f"unknown identifier {name!r}", position)


class VariableIndexError(ExpressionError):
    def __init__(self, position: int, index: int, limit: int):
        self.index = index
        self.limit = limit
        super().__init__(f"variable index {index} outside [1, {limit}]", position)


# ============================================================================
# EVALUATION ERRORS (exit code 3)
# ============================================================================

class DomainError(AttributionToolkitError, ArithmeticError):
    """A backend hit a point outside the domain of one of its operations."""

    def __init__(self, message: str, node: Optional[int] = None,
                 operand: Optional[float] = None, row: Optional[int] = None):
        self.node = node
        self.operand = operand
        self.row = row
        details = []
        if node is not None:
            details.append(f"node {node}")
        if operand is not None:
            details.append(f"operand {operand!r}")
        if row is not None:
            details.append(f"row {row}")
        suffix = f" ({', '.join(details)})" if details else ""
        super().__init__(f"{message}{suffix}")


class EvaluationError(AttributionToolkitError):
    """Evaluating v(S) failed; carries the coalition that triggered it."""

    def __init__(self, coalition_bits: int, cause: Exception):
        self.coalition_bits = coalition_bits
        self.cause = cause
        super().__init__(f"evaluation of coalition {coalition_bits:#b} failed: {cause}")


class TrainingError(AttributionToolkitError):
    """MLP training diverged."""
