"""Attribution mathematics over arbitrary games.

Covers exact and permutation-sampled Shapley values, the multi-variate
interaction I(S) (closed form and the recursive definition used as an
oracle), the Shapley interaction index, multi-order Shapley values and
marginal benefits, the order spectrum of interaction mass, and the context
saliency map p(j|i).

Exact accumulations go through ``math.fsum`` so that the 2^n-term alternating
sums keep their digits.
"""

import itertools
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.special import comb

from exceptions import ArgumentError, CapacityError
from game_core import Coalition, Game, member_matrix, popcount, subset_bits

logger = logging.getLogger(__name__)

DEFAULT_TOP_FRACTION = 0.05


# ============================================================================
# RESULT TYPES
# ============================================================================

@dataclass(frozen=True)
class AttributionReport:
    """Per-variable Shapley values plus the payoffs they were computed from."""

    phi: np.ndarray
    u: np.ndarray
    v_empty: float
    v_full: float
    method: Dict[str, object]
    stderr: Optional[np.ndarray] = None

    @property
    def efficiency_gap(self) -> float:
        return math.fsum(self.phi.tolist()) - (self.v_full - self.v_empty)

    def to_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {
            "phi": [float(v) for v in self.phi],
            "u": [float(v) for v in self.u],
            "v_empty": float(self.v_empty),
            "v_full": float(self.v_full),
            "method": dict(self.method),
        }
        if self.stderr is not None:
            out["stderr"] = [float(v) for v in self.stderr]
        return out


@dataclass(frozen=True)
class InteractionTable:
    """I(S) for coalitions with |S| >= 2, keyed by bit pattern."""

    n: int
    entries: Dict[int, float]
    max_order: int

    def __post_init__(self):
        if any(bin(bits).count("1") < 2 for bits in self.entries):
            raise ArgumentError("interaction tables only hold coalitions with |S| >= 2")

    def __getitem__(self, coalition: Coalition) -> float:
        return self.entries[coalition.bits]

    def rows(self) -> List[Tuple[int, int, float]]:
        """(coalition_bits, order, value) sorted by bit pattern."""
        return [(bits, bin(bits).count("1"), value) for bits, value in sorted(self.entries.items())]


@dataclass(frozen=True)
class OrderSpectrum:
    """Normalized interaction mass per order; ratios[m - 1] holds r_m."""

    ratios: np.ndarray
    normalizer: float
    degenerate: bool = False
    tau: Optional[float] = None
    salient_counts: Optional[np.ndarray] = None

    def ratio(self, m: int) -> float:
        return float(self.ratios[m - 1])

    def rows(self) -> List[Tuple[int, float]]:
        return [(m + 1, float(r)) for m, r in enumerate(self.ratios)]


@dataclass(frozen=True)
class OrderComponents:
    """phi_i^(m) for m = 0..n-1 with the path (exact or sampled) per order."""

    variable: int
    values: np.ndarray
    exact: List[bool]

    def rows(self) -> List[Tuple[int, float, str]]:
        return [(m, float(v), "exact" if e else "sampled")
                for m, (v, e) in enumerate(zip(self.values, self.exact))]


@dataclass(frozen=True)
class ContextSaliency:
    """p(j|i): how often j sits in the top-ranked contexts of i."""

    variable: int
    p: Dict[int, float]
    considered: int
    selected: int
    exact: bool


@dataclass(frozen=True)
class OrderStrengthProfile:
    """Per-order share of sum_i |phi_i^(m)| and of sum_i E|dv_i(S)|."""

    shapley: np.ndarray
    marginal: np.ndarray

    def rows(self) -> List[Tuple[int, float, float]]:
        return [(m, float(s), float(d)) for m, (s, d) in enumerate(zip(self.shapley, self.marginal))]


@dataclass(frozen=True)
class Sampling:
    """How many random contexts to draw when exact enumeration is too large."""

    count: int
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ArgumentError("sample count must be >= 1")


# ============================================================================
# HELPERS
# ============================================================================

def _check_variable(game: Game, i: int) -> None:
    if not 0 <= i < game.n:
        raise ArgumentError(f"variable {i} outside [0, {game.n})")


def _fsum_mean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / values.size


def _individual_benefits(game: Game) -> Tuple[np.ndarray, float, float]:
    singles = np.array([0] + [1 << i for i in range(game.n)] + [(1 << game.n) - 1], dtype=np.int64)
    vals = game.evaluate_bits(singles)
    return vals[1:-1] - vals[0], float(vals[0]), float(vals[-1])


def _order_deltas(table: np.ndarray, n: int, i: int, counts: np.ndarray) -> List[np.ndarray]:
    """Marginal benefits dv_i(S) for S without i, grouped by |S| = 0..n-1."""
    all_bits = np.arange(1 << n, dtype=np.int64)
    without = all_bits[(all_bits >> i & 1) == 0]
    deltas = table[without | (1 << i)] - table[without]
    orders = counts[without]
    return [deltas[orders == m] for m in range(n)]


def mobius_transform(table: np.ndarray, n: int) -> np.ndarray:
    """a(S) = sum_{L subset S} (-1)^{|S|-|L|} v(L) for all S at once."""
    a = np.array(table, dtype=float).reshape(-1)
    for k in range(n):
        view = a.reshape(-1, 2, 1 << k)
        view[:, 1, :] -= view[:, 0, :]
    return a


def _require_exact(game: Game, limit: int, what: str) -> None:
    if game.n > limit:
        raise CapacityError(game.n, limit, what)


# ============================================================================
# SHAPLEY VALUES
# ============================================================================

def shapley_exact(game: Game) -> AttributionReport:
    """Exact Shapley values from the full value table.

    Uses the per-order grouping phi_i = (1/n) sum_m E_{|S|=m}[v(S+i) - v(S)],
    which needs no factorial weights.
    """
    _require_exact(game, game.settings.max_exact_players, "exact Shapley values")
    n = game.n
    table = game.value_table()
    counts = popcount(np.arange(1 << n, dtype=np.int64))
    phi = np.empty(n)
    for i in range(n):
        means = [_fsum_mean(group) for group in _order_deltas(table, n, i, counts)]
        phi[i] = math.fsum(means) / n
    v_empty, v_full = float(table[0]), float(table[-1])
    u = np.array([table[1 << i] - v_empty for i in range(n)])
    report = AttributionReport(phi, u, v_empty, v_full, {"kind": "exact"})
    logger.debug("exact Shapley values over n=%d, efficiency gap %.3g", n, report.efficiency_gap)
    return report


def shapley_sampled(game: Game, permutations: int, seed: int) -> AttributionReport:
    """Permutation-sampling estimate of the Shapley values.

    Each sampled ordering credits every variable with its marginal benefit
    over its predecessors; the estimate is the mean over orderings.
    """
    if permutations < 1:
        raise ArgumentError("permutations must be >= 1")
    n = game.n
    rng = np.random.default_rng(seed)
    orders = np.stack([rng.permutation(n) for _ in range(permutations)])
    chain = np.zeros((permutations, n + 1), dtype=np.int64)
    for t in range(n):
        chain[:, t + 1] = chain[:, t] | (np.int64(1) << orders[:, t])
    values = game.evaluate_bits(chain.ravel()).reshape(permutations, n + 1)
    steps = values[:, 1:] - values[:, :-1]
    contributions = np.empty((permutations, n))
    np.put_along_axis(contributions, orders, steps, axis=1)

    phi = np.array([_fsum_mean(contributions[:, i]) for i in range(n)])
    if permutations > 1:
        stderr = contributions.std(axis=0, ddof=1) / math.sqrt(permutations)
    else:
        stderr = np.zeros(n)
    u, v_empty, v_full = _individual_benefits(game)
    logger.info("sampled Shapley values from %d permutations (seed %d)", permutations, seed)
    return AttributionReport(phi, u, v_empty, v_full,
                             {"kind": "sampled", "permutations": permutations, "seed": seed}, stderr)


# ============================================================================
# INTERACTIONS
# ============================================================================

def interaction(game: Game, coalition: Coalition) -> float:
    """Closed form I(S) = sum_{L subset S} (-1)^{|S|-|L|} v(L)."""
    size = coalition.cardinality
    if size < 2:
        raise ArgumentError(f"interactions need |S| >= 2, got {coalition}")
    subs = subset_bits(coalition.bits)
    signs = np.where((size - popcount(subs)) % 2 == 0, 1.0, -1.0)
    return math.fsum((signs * game.evaluate_bits(subs)).tolist())


def interaction_recursive(game: Game, coalition: Coalition) -> float:
    """I(S) = v(S) - v(empty) - sum_{L proper, |L|>=2} I(L) - sum_{i in S} u_i.

    Direct evaluation of the recursive definition; only used as an oracle
    for the closed form.
    """
    if coalition.cardinality < 2:
        raise ArgumentError(f"interactions need |S| >= 2, got {coalition}")

    @lru_cache(maxsize=None)
    def v(bits: int) -> float:
        return float(game.evaluate_bits(np.array([bits]))[0])

    @lru_cache(maxsize=None)
    def interaction_of(bits: int) -> float:
        terms = [v(bits), -v(0)]
        terms += [-(v(1 << i) - v(0)) for i in range(game.n) if bits >> i & 1]
        for sub in subset_bits(bits).tolist():
            if sub != bits and bin(sub).count("1") >= 2:
                terms.append(-interaction_of(sub))
        return math.fsum(terms)

    return interaction_of(coalition.bits)


def interaction_table(game: Game, max_order: Optional[int] = None) -> InteractionTable:
    """All I(S) with 2 <= |S| <= max_order."""
    n = game.n
    max_order = n if max_order is None else max_order
    if not 2 <= max_order <= n:
        raise ArgumentError(f"max_order must be in [2, {n}], got {max_order}")
    if n <= game.settings.max_index_players:
        values = mobius_transform(game.value_table(), n)
        counts = popcount(np.arange(1 << n, dtype=np.int64))
        keep = np.flatnonzero((counts >= 2) & (counts <= max_order))
        entries = {int(b): float(values[b]) for b in keep}
    elif max_order <= 3:
        # too many players for the full table; low orders are still cheap one by one
        entries = {}
        for m in range(2, max_order + 1):
            for members in itertools.combinations(range(n), m):
                coalition = Coalition.from_members(n, members)
                entries[coalition.bits] = interaction(game, coalition)
    else:
        raise CapacityError(n, game.settings.max_index_players, "interaction tables")
    return InteractionTable(n, entries, max_order)


def shapley_interaction_index(game: Game, coalition: Coalition) -> float:
    """Shapley interaction index: environment-weighted average of I(S|env(T)).

    p(T) = (n - |S| - |T|)! |T|! / (n - |S| + 1)! over T subset N minus S.
    """
    s = coalition.cardinality
    if s < 1:
        raise ArgumentError("the interaction index needs |S| >= 1")
    _require_exact(game, game.settings.max_index_players, "the Shapley interaction index")
    n = game.n
    inner = subset_bits(coalition.bits)
    outer = subset_bits(((1 << n) - 1) & ~coalition.bits)
    signs = np.where((s - popcount(inner)) % 2 == 0, 1.0, -1.0)
    sizes = popcount(outer)
    weights = np.array([math.factorial(n - s - t) * math.factorial(t) / math.factorial(n - s + 1)
                        for t in sizes.tolist()])
    values = game.evaluate_bits((outer[:, None] | inner[None, :]).ravel()).reshape(outer.size, inner.size)
    return math.fsum((weights[:, None] * signs[None, :] * values).ravel().tolist())


# ============================================================================
# MULTI-ORDER DECOMPOSITION
# ============================================================================

def _contexts(n: int, i: int, m: int, cap: int, sample: Optional[Sampling]) -> Tuple[np.ndarray, bool]:
    """Contexts S subset N minus {i} with |S| = m; exact when few enough."""
    others = [j for j in range(n) if j != i]
    total = int(comb(n - 1, m, exact=True))
    if total <= cap:
        bits = [sum(1 << j for j in members) for members in itertools.combinations(others, m)]
        return np.asarray(bits, dtype=np.int64), True
    sample = sample or Sampling(cap)
    wanted = min(sample.count, total)
    rng = np.random.default_rng(sample.seed)
    seen: Dict[int, None] = {}
    while len(seen) < wanted:
        members = rng.choice(others, size=m, replace=False)
        seen.setdefault(int(np.sum(np.int64(1) << members.astype(np.int64))), None)
    logger.info("sampled %d of %d order-%d contexts for variable %d", wanted, total, m, i)
    return np.asarray(list(seen), dtype=np.int64), False


def _deltas(game: Game, i: int, contexts: np.ndarray) -> np.ndarray:
    values = game.evaluate_bits(np.concatenate([contexts | (1 << i), contexts]))
    return values[:contexts.size] - values[contexts.size:]


def shapley_order(game: Game, i: int, m: int, sample: Optional[Sampling] = None,
                  cap: Optional[int] = None) -> float:
    """phi_i^(m): mean marginal benefit of i over contexts of size exactly m."""
    _check_variable(game, i)
    if not 0 <= m <= game.n - 1:
        raise ArgumentError(f"order must be in [0, {game.n - 1}], got {m}")
    cap = game.settings.context_cap if cap is None else cap
    contexts, _ = _contexts(game.n, i, m, cap, sample)
    return _fsum_mean(_deltas(game, i, contexts))


def multi_order_shapley(game: Game, i: int, sample: Optional[Sampling] = None,
                        cap: Optional[int] = None) -> OrderComponents:
    _check_variable(game, i)
    cap = game.settings.context_cap if cap is None else cap
    values, exact = [], []
    for m in range(game.n):
        contexts, was_exact = _contexts(game.n, i, m, cap, sample)
        values.append(_fsum_mean(_deltas(game, i, contexts)))
        exact.append(was_exact)
    return OrderComponents(i, np.asarray(values), exact)


def marginal_benefit(game: Game, i: int, coalition: Coalition) -> float:
    """dv_i(S) = v(S + i) - v(S)."""
    _check_variable(game, i)
    if i in coalition:
        raise ArgumentError(f"variable {i} already belongs to {coalition}")
    return float(_deltas(game, i, np.array([coalition.bits], dtype=np.int64))[0])


def order_spectrum(game: Game, tau: Optional[float] = None) -> OrderSpectrum:
    """Share of |u_i| (order 1) and of |I(S)| per order m >= 2.

    Args:
        game: Game with n <= max_index_players.
        tau: Optional salience threshold; when given, the spectrum also
            counts how many patterns per order reach |value| >= tau.

    Returns:
        OrderSpectrum: ratios r_1..r_n, all zero with ``degenerate`` set when
        every u_i and I(S) vanishes.
    """
    _require_exact(game, game.settings.max_index_players, "order spectra")
    n = game.n
    values = np.abs(mobius_transform(game.value_table(), n))
    counts = popcount(np.arange(1 << n, dtype=np.int64))
    mass = np.array([math.fsum(values[counts == m].tolist()) for m in range(1, n + 1)])
    normalizer = math.fsum(values[counts >= 1].tolist())
    salient = None
    if tau is not None:
        salient = np.array([int(np.sum(values[counts == m] >= tau)) for m in range(1, n + 1)])
    if normalizer == 0.0:
        logger.warning("order spectrum is degenerate: every u_i and I(S) is zero")
        return OrderSpectrum(np.zeros(n), 0.0, True, tau, salient)
    return OrderSpectrum(mass / normalizer, normalizer, False, tau, salient)


def context_saliency(game: Game, i: int, top_fraction: float = DEFAULT_TOP_FRACTION,
                     sample: Optional[Sampling] = None, cap: Optional[int] = None) -> ContextSaliency:
    """p(j|i) = share of the top-ranked contexts of i that contain j.

    Contexts S subset N minus {i} are ranked by |dv_i(S)| (descending, ties by
    ascending bit pattern) and the top ceil(top_fraction * K) form Omega.
    """
    _check_variable(game, i)
    if not 0 < top_fraction <= 1:
        raise ArgumentError(f"top_fraction must be in (0, 1], got {top_fraction}")
    n = game.n
    cap = game.settings.context_cap if cap is None else cap
    rest = ((1 << n) - 1) & ~(1 << i)
    total = 1 << (n - 1)
    if total <= cap:
        contexts, exact = subset_bits(rest), True
    else:
        sample = sample or Sampling(cap)
        rng = np.random.default_rng(sample.seed)
        wanted = min(sample.count, total)
        seen: Dict[int, None] = {}
        while len(seen) < wanted:
            draw = rng.integers(0, 2, size=n).astype(np.int64)
            draw[i] = 0
            seen.setdefault(int(np.sum(draw << np.arange(n, dtype=np.int64))), None)
        contexts, exact = np.asarray(list(seen), dtype=np.int64), False
        logger.info("sampled %d of %d contexts for variable %d", wanted, total, i)

    strength = np.abs(_deltas(game, i, contexts))
    ranking = np.lexsort((contexts, -strength))
    keep = max(1, math.ceil(top_fraction * contexts.size - 1e-9))
    omega = member_matrix(contexts[ranking[:keep]], n)
    p = {j: float(omega[:, j].mean()) for j in range(n) if j != i}
    return ContextSaliency(i, p, int(contexts.size), keep, exact)


def order_strength_profile(game: Game) -> OrderStrengthProfile:
    """Distribution over orders of sum_i |phi_i^(m)| and sum_i E_{|S|=m}|dv_i(S)|."""
    _require_exact(game, game.settings.max_index_players, "order strength profiles")
    n = game.n
    table = game.value_table()
    counts = popcount(np.arange(1 << n, dtype=np.int64))
    shapley = np.zeros(n)
    marginal = np.zeros(n)
    for i in range(n):
        for m, group in enumerate(_order_deltas(table, n, i, counts)):
            shapley[m] += abs(_fsum_mean(group))
            marginal[m] += _fsum_mean(np.abs(group))

    def normalize(v: np.ndarray) -> np.ndarray:
        total = math.fsum(v.tolist())
        return v / total if total > 0 else np.zeros_like(v)

    return OrderStrengthProfile(normalize(shapley), normalize(marginal))
