"""Coalitions, the masking operator and the value-function contract.

Every attribution routine consumes a ``Game``: something that maps coalitions
S of the variables N = {0, ..., n-1} to real payoffs v(S). ``GameSpec`` builds
v(S) = transform(f(mask(x, S, b))) from a backend f (an expression graph or an
MLP); ``TableGame`` wraps an explicit table of 2^n payoffs.

Coalitions are plain bit patterns: bit i set <=> variable x_{i+1} is present.
"""

import json
import logging
import math
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from exceptions import (
    ArgumentError,
    CapabilityError,
    CapacityError,
    ConfigError,
    DimensionError,
    DomainError,
    EvaluationError,
)
from settings import DEFAULT_SETTINGS, Settings

logger = logging.getLogger(__name__)

MAX_PLAYERS = 25
LOGODDS_EPS = 1e-12
TRANSFORMS = ("identity", "logodds", "probability", "crossentropy")


# ============================================================================
# COALITIONS
# ============================================================================

def popcount(bits: np.ndarray) -> np.ndarray:
    """Vectorized population count for non-negative integer arrays."""
    bits = np.asarray(bits, dtype=np.int64)
    counts = np.zeros(bits.shape, dtype=np.int64)
    remaining = bits.copy()
    while np.any(remaining):
        counts += remaining & 1
        remaining >>= 1
    return counts


def member_matrix(bits: np.ndarray, n: int) -> np.ndarray:
    """Boolean matrix M with M[r, i] = (bit i of bits[r] is set)."""
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    return ((bits[:, None] >> np.arange(n, dtype=np.int64)) & 1).astype(bool)


def _check_n(n: int) -> None:
    if not 1 <= n <= MAX_PLAYERS:
        raise ArgumentError(f"variable count must be in [1, {MAX_PLAYERS}], got {n}")


@dataclass(frozen=True, order=True)
class Coalition:
    """A subset S of {0, ..., n-1} stored as a bit pattern."""

    bits: int
    n: int

    def __post_init__(self):
        _check_n(self.n)
        if self.bits < 0 or self.bits >> self.n:
            raise ArgumentError(f"bit pattern {self.bits:#b} has members outside n={self.n}")

    @classmethod
    def empty(cls, n: int) -> "Coalition":
        return cls(0, n)

    @classmethod
    def full(cls, n: int) -> "Coalition":
        return cls((1 << n) - 1, n)

    @classmethod
    def from_members(cls, n: int, members: Iterable[int]) -> "Coalition":
        bits = 0
        for i in members:
            if not 0 <= i < n:
                raise ArgumentError(f"variable {i} outside [0, {n})")
            bits |= 1 << i
        return cls(bits, n)

    @property
    def cardinality(self) -> int:
        return bin(self.bits).count("1")

    def __len__(self) -> int:
        return self.cardinality

    def __contains__(self, i: int) -> bool:
        return 0 <= i < self.n and bool(self.bits >> i & 1)

    def members(self) -> Tuple[int, ...]:
        return tuple(i for i in range(self.n) if self.bits >> i & 1)

    def with_member(self, i: int) -> "Coalition":
        return Coalition.from_members(self.n, self.members() + (i,))

    def without_member(self, i: int) -> "Coalition":
        return Coalition(self.bits & ~(1 << i), self.n)

    def complement(self) -> "Coalition":
        return Coalition(((1 << self.n) - 1) & ~self.bits, self.n)

    def union(self, other: "Coalition") -> "Coalition":
        return Coalition(self.bits | other.bits, self.n)

    def issubset(self, other: "Coalition") -> bool:
        return self.bits & ~other.bits == 0

    def subsets(self) -> Iterator["Coalition"]:
        return enumerate_subsets(self)

    def __str__(self) -> str:
        return "{" + ",".join(str(i + 1) for i in self.members()) + "}"


def enumerate_subsets(coalition: Coalition) -> Iterator[Coalition]:
    """Yield all 2^|S| subsets of S in strictly increasing bit-pattern order."""
    mask = coalition.bits
    sub = 0
    while True:
        yield Coalition(sub, coalition.n)
        if sub == mask:
            return
        sub = (sub - mask) & mask


def subset_bits(mask: int) -> np.ndarray:
    """All subsets of ``mask`` as an increasing int64 array."""
    out = []
    sub = 0
    while True:
        out.append(sub)
        if sub == mask:
            break
        sub = (sub - mask) & mask
    return np.asarray(out, dtype=np.int64)


# ============================================================================
# BASELINES AND MASKING
# ============================================================================

@dataclass(frozen=True)
class BaselineVector:
    """Baseline values b with per-variable closed bounds [lo_i, hi_i]."""

    values: np.ndarray
    bounds: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(-1)
        bounds = np.asarray(self.bounds, dtype=float)
        if bounds.shape != (values.size, 2):
            raise DimensionError(f"bounds must have shape ({values.size}, 2), got {bounds.shape}")
        if np.any(bounds[:, 0] > bounds[:, 1]):
            raise ConfigError("every bound interval needs lo <= hi")
        if np.any(values < bounds[:, 0]) or np.any(values > bounds[:, 1]):
            raise ConfigError(f"baseline {values.tolist()} violates its bounds")
        values.setflags(write=False)
        bounds.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "bounds", bounds)

    @classmethod
    def unit(cls, values: Sequence[float]) -> "BaselineVector":
        values = np.asarray(values, dtype=float)
        return cls(values, np.tile([0.0, 1.0], (values.size, 1)))

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def lower(self) -> np.ndarray:
        return self.bounds[:, 0]

    @property
    def upper(self) -> np.ndarray:
        return self.bounds[:, 1]

    def project(self, values: np.ndarray) -> np.ndarray:
        """Euclidean projection onto the bound box."""
        return np.clip(np.asarray(values, dtype=float), self.lower, self.upper)

    def with_values(self, values: np.ndarray) -> "BaselineVector":
        return BaselineVector(self.project(values), self.bounds)


def mask(x: Sequence[float], coalition: Coalition, baseline) -> np.ndarray:
    """mask(x, S) keeps x_i for i in S and substitutes b_i elsewhere."""
    x = np.asarray(x, dtype=float)
    b = baseline.values if isinstance(baseline, BaselineVector) else np.asarray(baseline, dtype=float)
    if x.shape != b.shape or x.ndim != 1:
        raise DimensionError(f"x has shape {x.shape} but baseline has shape {b.shape}")
    if coalition.n != x.size:
        raise DimensionError(f"coalition is over {coalition.n} variables, x has {x.size}")
    return np.where(member_matrix(np.array([coalition.bits]), x.size)[0], x, b)


def mask_rows(x: np.ndarray, bits: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched masking: one masked input row per bit pattern."""
    return np.where(member_matrix(bits, x.size), x, b)


# ============================================================================
# TRANSFORMS
# ============================================================================

def apply_transform(values: np.ndarray, transform: str) -> np.ndarray:
    if transform == "identity" or transform == "probability":
        return values
    p = np.clip(values, LOGODDS_EPS, 1.0 - LOGODDS_EPS)
    if transform == "logodds":
        return np.log(p / (1.0 - p))
    if transform == "crossentropy":
        return -np.log(p)
    raise ConfigError(f"unknown transform {transform!r}")


def transform_derivative(values: np.ndarray, transform: str) -> np.ndarray:
    """d transform(f) / d f, zero where the clamp is active."""
    if transform == "identity" or transform == "probability":
        return np.ones_like(values)
    inside = (values > LOGODDS_EPS) & (values < 1.0 - LOGODDS_EPS)
    p = np.clip(values, LOGODDS_EPS, 1.0 - LOGODDS_EPS)
    if transform == "logodds":
        return np.where(inside, 1.0 / (p * (1.0 - p)), 0.0)
    if transform == "crossentropy":
        return np.where(inside, -1.0 / p, 0.0)
    raise ConfigError(f"unknown transform {transform!r}")


# ============================================================================
# VALUE-FUNCTION CONTRACT
# ============================================================================

class ValueBackend(Protocol):
    """What GameSpec needs from a function backend f."""

    arity: int
    kind: str

    def evaluate_batch(self, inputs: np.ndarray) -> np.ndarray:
        """f on every row of an (B, arity) matrix; raises DomainError."""

    def gradient_batch(self, inputs: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """(f values (B,), df/dinput (B, arity))."""


class CoalitionCache:
    """Memo table v(S) keyed by bit pattern; safe for concurrent use."""

    def __init__(self):
        self._values: Dict[int, float] = {}
        self._lock = threading.Lock()

    def lookup(self, bits: Sequence[int]) -> Tuple[List[Optional[float]], List[int]]:
        with self._lock:
            found = [self._values.get(int(b)) for b in bits]
        missing = sorted({int(b) for b, v in zip(bits, found) if v is None})
        return found, missing

    def store(self, bits: Sequence[int], values: Sequence[float]) -> None:
        with self._lock:
            for b, v in zip(bits, values):
                self._values.setdefault(int(b), float(v))

    def __len__(self) -> int:
        with self._lock:
            return len(self._values)


class Game:
    """A cooperative game v: 2^N -> R over n players."""

    n: int
    settings: Settings = DEFAULT_SETTINGS

    def evaluate_bits(self, bits: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def evaluate(self, coalition: Coalition) -> float:
        if coalition.n != self.n:
            raise DimensionError(f"coalition over {coalition.n} variables for a game over {self.n}")
        return float(self.evaluate_bits(np.array([coalition.bits]))[0])

    def value_table(self) -> np.ndarray:
        """v(S) for all 2^n coalitions, indexed by bit pattern."""
        if self.n > self.settings.max_exact_players:
            raise CapacityError(self.n, self.settings.max_exact_players)
        return self.evaluate_bits(np.arange(1 << self.n, dtype=np.int64))


class TableGame(Game):
    """A game given by an explicit payoff table indexed by bit pattern."""

    def __init__(self, values: Sequence[float], settings: Settings = DEFAULT_SETTINGS):
        values = np.asarray(values, dtype=float).reshape(-1)
        n = int(round(math.log2(values.size))) if values.size else 0
        if values.size < 2 or 1 << n != values.size:
            raise DimensionError(f"table length {values.size} is not 2^n for n >= 1")
        _check_n(n)
        self.n = n
        self.values = values
        self.values.setflags(write=False)
        self.settings = settings

    def evaluate_bits(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64)
        if np.any(bits < 0) or np.any(bits >> self.n):
            raise ArgumentError("bit pattern outside the table")
        return self.values[bits]


class GameSpec(Game):
    """v(S) = transform(f(mask(x, S, b))) over a function backend f."""

    def __init__(self, backend: ValueBackend, x: Sequence[float], baseline: BaselineVector,
                 transform: str = "identity", memoize: bool = False,
                 settings: Settings = DEFAULT_SETTINGS):
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != baseline.n:
            raise DimensionError(f"x has {x.size} entries but the baseline has {baseline.n}")
        if backend.arity > x.size:
            raise DimensionError(f"backend reads {backend.arity} inputs but x has {x.size}")
        if transform not in TRANSFORMS:
            raise ConfigError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")
        _check_n(x.size)
        x.setflags(write=False)
        self.backend = backend
        self.x = x
        self.baseline = baseline
        self.transform = transform
        self.settings = settings
        self.n = x.size
        self.cache = CoalitionCache() if memoize else None

    # ------------------------------------------------------------------
    # Derived games
    # ------------------------------------------------------------------
    def with_baseline(self, values: np.ndarray) -> "GameSpec":
        return GameSpec(self.backend, self.x, self.baseline.with_values(values),
                        self.transform, self.cache is not None, self.settings)

    def with_input(self, x: Sequence[float]) -> "GameSpec":
        return GameSpec(self.backend, x, self.baseline, self.transform,
                        self.cache is not None, self.settings)

    # ------------------------------------------------------------------
    # Evaluation
    # ------------------------------------------------------------------
    def _inputs(self, bits: np.ndarray) -> np.ndarray:
        return mask_rows(self.x, bits, self.baseline.values)[:, :self.backend.arity]

    def _evaluate_chunk(self, bits: np.ndarray) -> np.ndarray:
        try:
            raw = self.backend.evaluate_batch(self._inputs(bits))
        except DomainError as e:
            row = e.row if e.row is not None and e.row < bits.size else 0
            raise EvaluationError(int(bits[row]), e) from e
        return apply_transform(raw, self.transform)

    def _evaluate_uncached(self, bits: np.ndarray) -> np.ndarray:
        step = self.settings.chunk_rows
        chunks = [bits[i:i + step] for i in range(0, bits.size, step)]
        if len(chunks) <= 1 or self.settings.jobs <= 1:
            parts = [self._evaluate_chunk(c) for c in chunks]
        else:
            # executor.map keeps chunk order, so the fold below is deterministic
            with ThreadPoolExecutor(max_workers=self.settings.jobs) as executor:
                parts = list(executor.map(self._evaluate_chunk, chunks))
        return np.concatenate(parts) if parts else np.zeros(0)

    def evaluate_bits(self, bits: np.ndarray) -> np.ndarray:
        bits = np.asarray(bits, dtype=np.int64).reshape(-1)
        if np.any(bits < 0) or np.any(bits >> self.n):
            raise ArgumentError(f"bit pattern outside n={self.n}")
        if self.cache is None:
            return self._evaluate_uncached(bits)
        found, missing = self.cache.lookup(bits.tolist())
        if missing:
            missing_bits = np.asarray(missing, dtype=np.int64)
            self.cache.store(missing, self._evaluate_uncached(missing_bits).tolist())
            found, _ = self.cache.lookup(bits.tolist())
        return np.asarray(found, dtype=float)

    def baseline_gradient_bits(self, bits: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """v(S) and dv(S)/db for each bit pattern.

        dv(S)/db_j = dv/dinput_j at mask(x, S) times 1[j not in S].
        """
        if not hasattr(self.backend, "gradient_batch"):
            raise CapabilityError(f"{self.backend.kind} backend has no gradients")
        bits = np.asarray(bits, dtype=np.int64).reshape(-1)
        try:
            raw, dinput = self.backend.gradient_batch(self._inputs(bits))
        except DomainError as e:
            row = e.row if e.row is not None and e.row < bits.size else 0
            raise EvaluationError(int(bits[row]), e) from e
        scale = transform_derivative(raw, self.transform)
        grad = np.zeros((bits.size, self.n))
        grad[:, :self.backend.arity] = dinput * scale[:, None]
        grad *= ~member_matrix(bits, self.n)
        return apply_transform(raw, self.transform), grad


def evaluate(game: Game, coalition: Coalition) -> float:
    return game.evaluate(coalition)


# ============================================================================
# GAME MANIFESTS
# ============================================================================

def game_from_manifest(manifest: dict, base_dir: str = ".", settings: Settings = DEFAULT_SETTINGS,
                       memoize: bool = False) -> GameSpec:
    """Build a GameSpec from the JSON game-manifest layout.

    Args:
        manifest: Parsed manifest ({"n", "backend", "x", "baseline", "bounds",
            "transform", "label"}).
        base_dir: Directory that relative weight paths are resolved against.
        settings: Runtime settings carried by the game.
        memoize: Attach a coalition memo table.

    Returns:
        GameSpec: The configured game.
    """
    # Imported here: both backends import this module
    from expr import ExprBackend, parse
    from mlp import MlpBackend, load_model

    try:
        n = int(manifest["n"])
        backend_spec = manifest["backend"]
        x = [float(v) for v in manifest["x"]]
        baseline = [float(v) for v in manifest["baseline"]]
        bounds = np.asarray(manifest.get("bounds") or [[0.0, 1.0]] * n, dtype=float)
        kind = backend_spec.get("kind") if isinstance(backend_spec, dict) else None
        if kind == "expr":
            source = str(backend_spec["source"])
        elif kind == "mlp":
            if "label" not in manifest:
                raise ConfigError("mlp games need a class label")
            weights = os.path.join(base_dir, str(backend_spec["weights"]))
            label = manifest["label"]
            if isinstance(label, bool) or float(label) != int(label):
                raise ValueError(f"label must be an integer, got {label!r}")
            label = int(label)
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"malformed game manifest: {e!r}") from e
    if len(x) != n or len(baseline) != n:
        raise ConfigError(f"manifest declares n={n} but x has {len(x)} and baseline {len(baseline)} entries")
    transform = manifest.get("transform", "identity")

    if kind == "expr":
        backend = ExprBackend(parse(source), n)
    elif kind == "mlp":
        backend = MlpBackend(load_model(weights), label)
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")

    return GameSpec(backend, x, BaselineVector(np.asarray(baseline), bounds),
                    transform=transform, memoize=memoize, settings=settings)


def load_game(path: str, settings: Settings = DEFAULT_SETTINGS, memoize: bool = False) -> GameSpec:
    if not os.path.exists(path):
        raise ConfigError(f"game manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    logger.debug("loaded game manifest %s", path)
    return game_from_manifest(manifest, os.path.dirname(os.path.abspath(path)), settings, memoize)
