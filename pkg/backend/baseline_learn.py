"""Learning baseline values by penalizing low-order attributions.

Both losses push interaction mass away from orders 0..lambda:

* ``shapley``: sum over variables of |phi_i^(m)| for sampled orders m,
  each phi_i^(m) estimated from a set of contexts of size m.
* ``marginal``: the same contexts, but every |dv_i(S)| is penalized on its
  own (optionally measured on the MLP's hidden features).

The optimizer is projected gradient descent onto the baseline bounds. Every
step draws its orders and contexts from ``default_rng([seed, step])`` and the
draws are returned as a ``LossDraws`` object, so the same draws can be held
fixed while probing the loss with finite differences.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, fields
from itertools import combinations
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import comb
from tqdm import tqdm

from exceptions import (
    AttributionToolkitError,
    ArgumentError,
    CapabilityError,
    ConfigError,
    DimensionError,
)
from game_core import BaselineVector, GameSpec, mask_rows, member_matrix
from mlp import require_features

logger = logging.getLogger(__name__)

LOSSES = ("shapley", "marginal")
NAMED_INITS = ("zero", "mean", "high")


# ============================================================================
# CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class LearnConfig:
    loss: str = "shapley"
    lambda_frac: float = 0.5
    init: Union[str, Tuple[float, ...]] = "mean"
    steps: int = 2000
    step_size: float = 0.05
    orders_per_step: int = 4
    contexts_per_order: int = 32
    batch: Tuple[Tuple[float, ...], ...] = ()
    random_batch: int = 0            # extra corner points of the bound box added to the batch
    seed: int = 0
    feature_variant: bool = False
    exact_contexts: bool = True      # enumerate every context when there are few enough
    grad_tol: float = 1e-6
    loss_tol: float = 1e-8
    patience: int = 50
    ema_decay: float = 0.9

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.contexts_per_order < 1 or self.orders_per_step < 1:
            raise ConfigError("contexts_per_order and orders_per_step must be >= 1")
        if not 0 < self.lambda_frac <= 1:
            raise ConfigError(f"lambda_frac must be in (0, 1], got {self.lambda_frac}")
        if self.step_size <= 0:
            raise ConfigError("step_size must be > 0")
        if self.random_batch < 0 or self.patience < 1 or not 0 <= self.ema_decay < 1:
            raise ConfigError("random_batch >= 0, patience >= 1 and ema_decay in [0, 1) are required")
        if isinstance(self.init, str):
            if self.init not in NAMED_INITS:
                raise ConfigError(f"init must be one of {NAMED_INITS} or a vector, got {self.init!r}")
        else:
            object.__setattr__(self, "init", tuple(float(v) for v in self.init))
        if self.feature_variant and self.loss != "marginal":
            raise ConfigError("feature_variant only applies to the marginal loss")
        object.__setattr__(self, "batch", tuple(tuple(float(v) for v in x) for x in self.batch))

    @classmethod
    def from_dict(cls, data: dict) -> "LearnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown learn config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid learn config: {e}") from e

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["init"] = out["init"] if isinstance(out["init"], str) else list(out["init"])
        out["batch"] = [list(x) for x in self.batch]
        return out

    def lambda_order(self, n: int) -> int:
        """lambda = round(lambda_frac * n), halves rounded up, capped at n - 1."""
        return min(int(math.floor(self.lambda_frac * n + 0.5)), n - 1)


def load_learn_config(path: str) -> Tuple[LearnConfig, dict]:
    """LearnConfig plus the non-optimizer keys ("game", "truth") of a JSON file."""
    if not os.path.exists(path):
        raise ConfigError(f"learn config not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    extras = {key: data.pop(key) for key in ("game", "truth") if key in data}
    return LearnConfig.from_dict(data), extras


@dataclass(frozen=True)
class LearnState:
    b: BaselineVector
    loss_trace: Tuple[float, ...]
    grad_norm_trace: Tuple[float, ...]
    converged: bool

    @property
    def steps(self) -> int:
        return len(self.loss_trace)

    @property
    def final_loss(self) -> float:
        return self.loss_trace[-1] if self.loss_trace else float("nan")

    def to_dict(self, accuracy_value: Optional[float] = None) -> dict:
        out = {
            "b": [float(v) for v in self.b.values],
            "loss_trace": list(self.loss_trace),
            "converged": self.converged,
        }
        if accuracy_value is not None:
            out["accuracy"] = accuracy_value
        return out


class LearnAborted(AttributionToolkitError):
    """Wraps a backend failure mid-run; ``partial`` holds the trace so far."""

    def __init__(self, cause: AttributionToolkitError, partial: LearnState):
        self.cause = cause
        self.partial = partial
        super().__init__(f"learning aborted after {partial.steps} steps: {cause}")


# ============================================================================
# DRAWS
# ============================================================================

@dataclass(frozen=True)
class LossDraws:
    """Sampled orders and contexts; contexts[d][s][i] holds bit patterns."""

    orders: Tuple[int, ...]
    contexts: Tuple[Tuple[Tuple[np.ndarray, ...], ...], ...]


def _sample_contexts(rng: np.random.Generator, n: int, i: int, m: int, count: int,
                     exact_contexts: bool) -> np.ndarray:
    others = np.array([j for j in range(n) if j != i], dtype=np.int64)
    if m == 0:
        return np.zeros(1, dtype=np.int64)
    if exact_contexts and comb(n - 1, m, exact=True) <= count:
        return np.array([sum(1 << int(j) for j in c) for c in combinations(others, m)], dtype=np.int64)
    # m smallest of n-1 uniform keys per row: a uniform m-subset, drawn with replacement across rows
    picks = np.argsort(rng.random((count, n - 1)), axis=1)[:, :m]
    return np.sum(np.int64(1) << others[picks], axis=1)


def sample_draws(n: int, batch_size: int, lam: int, config: LearnConfig, step: int = 0,
                 orders: Optional[Sequence[int]] = None) -> LossDraws:
    """Orders m ~ Unif{0..lam} and contexts for every (order draw, sample, variable).

    ``orders`` overrides the sampled orders (one draw per entry).
    """
    if not 0 <= lam <= n - 1:
        raise ArgumentError(f"lambda must be in [0, {n - 1}], got {lam}")
    rng = np.random.default_rng([config.seed, step])
    if orders is None:
        orders = rng.integers(0, lam + 1, size=config.orders_per_step).tolist()
    elif any(not 0 <= m <= n - 1 for m in orders):
        raise ArgumentError(f"forced orders must lie in [0, {n - 1}]")
    contexts = tuple(
        tuple(
            tuple(_sample_contexts(rng, n, i, m, config.contexts_per_order, config.exact_contexts)
                  for i in range(n))
            for _ in range(batch_size))
        for m in orders)
    return LossDraws(tuple(int(m) for m in orders), contexts)


# ============================================================================
# LOSSES
# ============================================================================

def _marginals(game: GameSpec, per_variable: Sequence[np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """dv_i(S) and d dv_i(S)/db for each variable's contexts, in one backend call."""
    with_bits = [bits | (1 << i) for i, bits in enumerate(per_variable)]
    stacked = np.concatenate(with_bits + list(per_variable))
    values, grads = game.baseline_gradient_bits(stacked)
    half = stacked.size // 2
    delta, ddelta = values[:half] - values[half:], grads[:half] - grads[half:]
    out, start = [], 0
    for bits in per_variable:
        out.append((delta[start:start + bits.size], ddelta[start:start + bits.size]))
        start += bits.size
    return out


def _feature_marginals(game: GameSpec, per_variable: Sequence[np.ndarray]) -> List[Tuple[np.ndarray, np.ndarray]]:
    """||h(mask(x, S+i)) - h(mask(x, S))||_1 and its gradient w.r.t. b."""
    backend = game.backend
    require_features(backend)
    b = game.baseline.values
    out = []
    for i, bits in enumerate(per_variable):
        with_bits = bits | (1 << i)
        inputs_with = mask_rows(game.x, with_bits, b)
        inputs_without = mask_rows(game.x, bits, b)
        diff = backend.features_batch(inputs_with) - backend.features_batch(inputs_without)
        direction = np.sign(diff)
        grad = (backend.feature_vjp(inputs_with, direction) * ~member_matrix(with_bits, game.n)
                - backend.feature_vjp(inputs_without, direction) * ~member_matrix(bits, game.n))
        out.append((np.abs(diff).sum(axis=1), grad))
    return out


def _loss(template: GameSpec, batch: np.ndarray, b: np.ndarray, draws: LossDraws, loss: str,
          feature_variant: bool = False) -> Tuple[float, np.ndarray]:
    if batch.ndim != 2 or batch.shape[1] != template.n:
        raise DimensionError(f"batch rows must have {template.n} entries, got shape {batch.shape}")
    if feature_variant and not hasattr(template.backend, "features_batch"):
        raise CapabilityError(f"{template.backend.kind} backend exposes no intermediate features")
    terms: List[float] = []
    grad = np.zeros(template.n)
    for d in range(len(draws.orders)):
        for s, x in enumerate(batch):
            game = template.with_input(x).with_baseline(b)
            per_variable = draws.contexts[d][s]
            if feature_variant:
                parts = _feature_marginals(game, per_variable)
            else:
                parts = _marginals(game, per_variable)
            for delta, ddelta in parts:
                if loss == "shapley":
                    phi = math.fsum(delta.tolist()) / delta.size
                    terms.append(abs(phi))
                    grad += np.sign(phi) * ddelta.mean(axis=0)
                else:
                    terms.append(math.fsum(np.abs(delta).tolist()) / delta.size)
                    grad += (np.sign(delta)[:, None] * ddelta).mean(axis=0)
    scale = len(draws.orders) * batch.shape[0]
    return math.fsum(terms) / scale, grad / scale


def loss_shapley(template: GameSpec, batch: Sequence[Sequence[float]], b: Sequence[float],
                 draws: LossDraws) -> Tuple[float, np.ndarray]:
    """Mean over draws and samples of sum_i |phi_i^(m)|, with its gradient w.r.t. b."""
    return _loss(template, np.asarray(batch, dtype=float), np.asarray(b, dtype=float), draws, "shapley")


def loss_marginal(template: GameSpec, batch: Sequence[Sequence[float]], b: Sequence[float],
                  draws: LossDraws, feature_variant: bool = False) -> Tuple[float, np.ndarray]:
    """Mean over draws and samples of sum_i E_S |dv_i(S)|, with its gradient w.r.t. b."""
    return _loss(template, np.asarray(batch, dtype=float), np.asarray(b, dtype=float), draws,
                 "marginal", feature_variant)


# ============================================================================
# OPTIMIZATION
# ============================================================================

def initial_baseline(init: Union[str, Sequence[float]], baseline: BaselineVector,
                     means: Optional[np.ndarray] = None) -> np.ndarray:
    """Starting point: zero (projected), mean (dataset means or box midpoint), high, or explicit."""
    if isinstance(init, str):
        if init == "zero":
            return baseline.project(np.zeros(baseline.n))
        if init == "high":
            return np.array(baseline.upper)
        if init == "mean":
            if means is not None:
                return baseline.project(means)
            return 0.5 * (baseline.lower + baseline.upper)
        raise ConfigError(f"unknown init {init!r}")
    values = np.asarray(init, dtype=float)
    if values.shape != (baseline.n,):
        raise DimensionError(f"explicit init has {values.size} entries, the game has {baseline.n}")
    if np.any(values < baseline.lower) or np.any(values > baseline.upper):
        raise ConfigError("explicit init lies outside the baseline bounds")
    return values


def build_batch(config: LearnConfig, template: GameSpec) -> np.ndarray:
    """Configured samples (default: the game's x) plus seeded corners of the bound box."""
    rows = [np.asarray(x, dtype=float) for x in config.batch] or [np.array(template.x)]
    if config.random_batch:
        rng = np.random.default_rng([config.seed, 2**31 - 1])
        corners = rng.integers(0, 2, size=(config.random_batch, template.n)).astype(bool)
        rows.extend(np.where(corners, template.baseline.upper, template.baseline.lower))
    batch = np.vstack(rows)
    if batch.shape[1] != template.n:
        raise DimensionError(f"batch rows must have {template.n} entries, got {batch.shape[1]}")
    return batch


def learn(config: LearnConfig, template: GameSpec, means: Optional[np.ndarray] = None,
          progress: bool = False) -> LearnState:
    """Projected gradient descent on the configured loss.

    Args:
        config: Optimizer and sampling settings.
        template: Game whose backend, bounds and transform are used; its x is
            the default batch and its baseline is replaced by the iterate.
        means: Per-feature dataset means for the ``mean`` init.
        progress: Show a tqdm bar over steps.

    Returns:
        LearnState: Final baseline with loss and gradient-norm traces.
    """
    n = template.n
    lam = config.lambda_order(n)
    batch = build_batch(config, template)
    b = initial_baseline(config.init, template.baseline, means)
    losses: List[float] = []
    norms: List[float] = []
    emas: List[float] = []
    flat = 0
    converged = False

    for step in tqdm(range(config.steps), desc="learn", disable=not progress):
        try:
            draws = sample_draws(n, batch.shape[0], lam, config, step)
            loss, grad = _loss(template, batch, b, draws, config.loss, config.feature_variant)
        except AttributionToolkitError as e:
            partial = LearnState(template.baseline.with_values(b), tuple(losses), tuple(norms), False)
            raise LearnAborted(e, partial) from e
        norm = float(np.linalg.norm(grad))
        losses.append(loss)
        norms.append(norm)
        logger.debug("step %d loss %.6g grad norm %.3g", step, loss, norm)
        # stop on `patience` consecutive flat gradients; a single step's draws can cancel exactly
        flat = flat + 1 if norm < config.grad_tol else 0
        if flat >= config.patience:
            converged = True
            break
        b = template.baseline.project(b - config.step_size * grad)
        emas.append(loss if not emas else config.ema_decay * emas[-1] + (1 - config.ema_decay) * loss)
        if len(emas) > config.patience and emas[-config.patience - 1] - emas[-1] < config.loss_tol:
            converged = True
            break

    state = LearnState(template.baseline.with_values(b), tuple(losses), tuple(norms), converged)
    logger.info("learned baseline after %d steps (%s), final loss %.6g",
                state.steps, "converged" if converged else "step budget spent", state.final_loss)
    return state


# ============================================================================
# SCORING
# ============================================================================

def accuracy(b: Union[BaselineVector, Sequence[float]], truth: Sequence[Optional[float]],
             bounds: Optional[np.ndarray] = None) -> float:
    """Share of annotated variables with |b_i - b*_i| < 0.5 on the unit-rescaled domain."""
    if isinstance(b, BaselineVector):
        values, bounds = b.values, b.bounds if bounds is None else bounds
    else:
        values = np.asarray(b, dtype=float)
    if len(truth) != values.size:
        raise DimensionError(f"truth has {len(truth)} entries, baseline has {values.size}")
    bounds = np.tile([0.0, 1.0], (values.size, 1)) if bounds is None else np.asarray(bounds, dtype=float)
    annotated = [i for i, t in enumerate(truth) if t is not None]
    if not annotated:
        raise ArgumentError("accuracy needs at least one annotated truth entry")
    correct = 0
    for i in annotated:
        lo, hi = bounds[i]
        width = hi - lo if hi > lo else 1.0
        if abs((values[i] - lo) / width - (float(truth[i]) - lo) / width) < 0.5:
            correct += 1
    return correct / len(annotated)
