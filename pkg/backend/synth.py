"""Synthetic functions with known ground-truth baselines.

Each generated function is a sum of 2-4 terms over contiguous (occasionally
overlapping) blocks of variables:

    monomial   +-x_a*x_b*...                      active when every x = 1
    power      +-c*x_a*(x_b+...)^p                active when every x = 1
    sigmoid    +-sigmoid(k*A1 - k*x_j + ... + c)  active when positive atoms
                                                  are 1 and negated ones are 0

The ground-truth baseline of a variable is the literal that switches its
pattern off: 0 for variables that must be 1, 1 for variables that must be 0.
The bundled Tsang suite ships its truth annotations as fixture data.
"""

import dataclasses
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from baseline_learn import LearnConfig, LearnState, accuracy, learn
from exceptions import ArgumentError, ConfigError
from expr import ExprBackend, ExprGraph, parse
from game_core import BaselineVector, GameSpec
from settings import DEFAULT_SETTINGS, Settings

logger = logging.getLogger(__name__)

TEMPLATES = ("monomial", "power", "sigmoid")
VERIFY_INITS = ("zero", "mean", "high")
VERIFY_COLUMNS = ["function", "loss", "init", "accuracy", "final_loss", "steps"]
MIN_TERM_CHANGE = 0.1
TSANG_SUITE_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "data", "tsang_suite.jsonl")


# ============================================================================
# FUNCTIONS
# ============================================================================

@dataclass(frozen=True)
class Pattern:
    """Variables of one designed term and the literal that activates each."""

    variables: Tuple[int, ...]
    activation: Tuple[int, ...]
    term: int

    def to_dict(self) -> dict:
        return {"variables": list(self.variables), "activation": list(self.activation), "term": self.term}


@dataclass(frozen=True)
class SynthFunction:
    name: str
    expr: str
    n: int
    truth: Tuple[Optional[float], ...]
    domain: Tuple[Tuple[float, float], ...]
    patterns: Tuple[Pattern, ...] = ()
    terms: Tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.truth) != self.n or len(self.domain) != self.n:
            raise ConfigError(f"{self.name}: truth and domain need {self.n} entries")

    @cached_property
    def graph(self) -> ExprGraph:
        return parse(self.expr)

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(self.domain, dtype=float)

    @property
    def annotated(self) -> int:
        return sum(t is not None for t in self.truth)

    def activation_point(self) -> np.ndarray:
        """Every pattern variable at its activating literal; the rest at the upper bound."""
        point = np.array(self.bounds[:, 1])
        for pattern in self.patterns:
            for v, literal in zip(pattern.variables, pattern.activation):
                point[v] = self.domain[v][literal]
        return point

    def truth_vector(self, fill: Optional[float] = None) -> np.ndarray:
        return np.array([fill if t is None else t for t in self.truth], dtype=float)

    def game(self, x: Optional[Sequence[float]] = None, baseline: Optional[Sequence[float]] = None,
             settings: Settings = DEFAULT_SETTINGS, transform: str = "identity") -> GameSpec:
        """GameSpec over this function; defaults to x = activation point, b = box midpoint."""
        bounds = self.bounds
        x = self.activation_point() if x is None else np.asarray(x, dtype=float)
        b = bounds.mean(axis=1) if baseline is None else np.asarray(baseline, dtype=float)
        return GameSpec(ExprBackend(self.graph, self.n), x, BaselineVector(b, bounds), transform,
                        settings=settings)

    def to_dict(self) -> dict:
        binary = all(tuple(d) == (0.0, 1.0) for d in self.domain)
        out = {
            "name": self.name,
            "n": self.n,
            "expr": self.expr,
            "domain": "binary" if binary else [list(d) for d in self.domain],
            "truth": list(self.truth),
        }
        if self.patterns:
            out["patterns"] = [p.to_dict() for p in self.patterns]
            out["terms"] = list(self.terms)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SynthFunction":
        try:
            n = int(data["n"])
            domain = data.get("domain", "binary")
            if domain == "binary":
                domain = [[0.0, 1.0]] * n
            patterns = tuple(Pattern(tuple(p["variables"]), tuple(p["activation"]), int(p["term"]))
                             for p in data.get("patterns", ()))
            return cls(
                name=str(data["name"]),
                expr=str(data["expr"]),
                n=n,
                truth=tuple(None if t is None else float(t) for t in data["truth"]),
                domain=tuple((float(lo), float(hi)) for lo, hi in domain),
                patterns=patterns,
                terms=tuple(data.get("terms", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"malformed function record: {e!r}") from e


def save_corpus(functions: Sequence[SynthFunction], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for fn in functions:
            f.write(json.dumps(fn.to_dict()) + "\n")


def load_corpus(path: str) -> List[SynthFunction]:
    if not os.path.exists(path):
        raise ConfigError(f"corpus file not found: {path}")
    functions = []
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}:{number}: invalid JSON: {e}") from e
            functions.append(SynthFunction.from_dict(record))
    return functions


def tsang_suite() -> List[SynthFunction]:
    """The ten bundled benchmark functions with their 61 truth annotations."""
    return load_corpus(TSANG_SUITE_PATH)


# ============================================================================
# GENERATOR
# ============================================================================

@dataclass(frozen=True)
class GrammarConfig:
    min_vars: int = 7
    max_vars: int = 12
    min_terms: int = 2
    max_terms: int = 4
    min_block: int = 2
    templates: Tuple[str, ...] = TEMPLATES
    exponent_range: Tuple[float, float] = (1.1, 2.6)
    coefficient_range: Tuple[float, float] = (0.1, 1.0)
    gain_range: Tuple[int, int] = (3, 8)
    negative_literal_prob: float = 0.3
    product_atom_prob: float = 0.2
    overlap_prob: float = 0.2
    max_resamples: int = 100

    def __post_init__(self):
        if not 1 <= self.min_vars <= self.max_vars:
            raise ConfigError("need 1 <= min_vars <= max_vars")
        if not 1 <= self.min_terms <= self.max_terms:
            raise ConfigError("need 1 <= min_terms <= max_terms")
        if self.min_block < 2:
            raise ConfigError("terms need at least 2 variables")
        if self.min_block * self.min_terms > self.max_vars:
            raise ConfigError("min_terms blocks of min_block variables do not fit in max_vars")
        unknown = set(self.templates) - set(TEMPLATES)
        if not self.templates or unknown:
            raise ConfigError(f"templates must be a non-empty subset of {TEMPLATES}")
        lo, hi = self.exponent_range
        if not 1.0 <= lo <= hi:
            raise ConfigError("exponent_range must satisfy 1 <= lo <= hi")
        if not 0 < self.coefficient_range[0] <= self.coefficient_range[1]:
            raise ConfigError("coefficient_range must be positive and ordered")
        if not 1 <= self.gain_range[0] <= self.gain_range[1]:
            raise ConfigError("gain_range must be ordered and >= 1")
        for name in ("negative_literal_prob", "product_atom_prob", "overlap_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be a probability")

    @classmethod
    def from_dict(cls, data: dict) -> "GrammarConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        if set(data) - known:
            raise ConfigError(f"unknown grammar keys: {sorted(set(data) - known)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid grammar config: {e}") from e


@dataclass(frozen=True)
class _Term:
    text: str
    variables: Tuple[int, ...]
    activation: Tuple[int, ...]


def _signed(rng: np.random.Generator, body: str) -> Tuple[str, str]:
    return ("-" if rng.random() < 0.5 else "+", body)


def _monomial(rng: np.random.Generator, block: Sequence[int], grammar: GrammarConfig) -> Tuple[_Term, str]:
    body = "*".join(f"x{v + 1}" for v in block)
    sign, body = _signed(rng, body)
    return _Term(body, tuple(block), (1,) * len(block)), sign


def _power(rng: np.random.Generator, block: Sequence[int], grammar: GrammarConfig) -> Tuple[_Term, str]:
    coefficient = round(float(rng.uniform(*grammar.coefficient_range)), 3)
    exponent = round(float(rng.uniform(*grammar.exponent_range)), 3)
    inner = "+".join(f"x{v + 1}" for v in block[1:])
    sign, body = _signed(rng, f"{coefficient}*x{block[0] + 1}*({inner})^{exponent}")
    return _Term(body, tuple(block), (1,) * len(block)), sign


def _sigmoid(rng: np.random.Generator, block: Sequence[int], grammar: GrammarConfig) -> Tuple[_Term, str]:
    gain = int(rng.integers(grammar.gain_range[0], grammar.gain_range[1] + 1))
    atoms: List[Tuple[Tuple[int, ...], int]] = []     # (variables, literal)
    k = 0
    while k < len(block):
        if k + 1 < len(block) and rng.random() < grammar.product_atom_prob:
            atoms.append(((block[k], block[k + 1]), 1))
            k += 2
            continue
        literal = 0 if rng.random() < grammar.negative_literal_prob else 1
        atoms.append(((block[k],), literal))
        k += 1
    if not any(literal == 1 for _, literal in atoms):
        atoms[0] = (atoms[0][0], 1)
    positives = sum(literal for _, literal in atoms)
    offset = -gain * (positives - 0.5)

    parts = []
    for variables, literal in atoms:
        atom = "*".join(f"x{v + 1}" for v in variables)
        parts.append(f"{'+' if literal else '-'}{gain}*{atom}")
    inner = "".join(parts).lstrip("+") + f"{offset:+.2f}"
    variables = tuple(v for vs, _ in atoms for v in vs)
    activation = tuple(literal for vs, literal in atoms for _ in vs)
    sign, body = _signed(rng, f"sigmoid({inner})")
    return _Term(body, variables, activation), sign


_BUILDERS = {"monomial": _monomial, "power": _power, "sigmoid": _sigmoid}


def _blocks(rng: np.random.Generator, n: int, terms: int, grammar: GrammarConfig) -> List[List[int]]:
    """Contiguous blocks covering 0..n-1, each extended into its neighbour with overlap_prob."""
    extra = n - grammar.min_block * terms
    sizes = grammar.min_block + rng.multinomial(extra, np.full(terms, 1.0 / terms))
    blocks, start = [], 0
    for size in sizes:
        blocks.append(list(range(start, start + int(size))))
        start += int(size)
    for k in range(terms - 1):
        if rng.random() < grammar.overlap_prob:
            blocks[k].append(blocks[k + 1][0])
    return blocks


def term_change_violations(fn: SynthFunction) -> List[str]:
    """Patterns whose term moves by less than 0.1 when one variable is set to its truth.

    Each term is evaluated at the activation point and again with a single
    pattern variable flipped; an empty list means every pattern really
    deactivates.
    """
    problems = []
    point = fn.activation_point()
    for pattern in fn.patterns:
        term = parse(fn.terms[pattern.term])
        active = term.evaluate(point)
        for v in pattern.variables:
            if fn.truth[v] is None:
                continue
            flipped = point.copy()
            flipped[v] = fn.truth[v]
            change = abs(term.evaluate(flipped) - active)
            if change < MIN_TERM_CHANGE:
                problems.append(f"{fn.name}: term {pattern.term} moves {change:.3g} when x{v + 1} flips")
    return problems


def check_truth_consistency(fn: SynthFunction) -> List[str]:
    """Truth equals the deactivating literal of every pattern, plus the term-change check."""
    problems = []
    required: Dict[int, int] = {}
    for pattern in fn.patterns:
        for v, literal in zip(pattern.variables, pattern.activation):
            if required.setdefault(v, literal) != literal:
                problems.append(f"{fn.name}: x{v + 1} has conflicting activation literals")
    for v, literal in required.items():
        lo, hi = fn.domain[v]
        expected = lo if literal == 1 else hi
        if fn.truth[v] is not None and fn.truth[v] != expected:
            problems.append(f"{fn.name}: truth of x{v + 1} is {fn.truth[v]}, expected {expected}")
    for v in range(fn.n):
        if fn.truth[v] is not None and v not in required:
            problems.append(f"{fn.name}: x{v + 1} has a truth value but no pattern")
    return problems + term_change_violations(fn)


def _generate_one(rng: np.random.Generator, name: str, grammar: GrammarConfig) -> SynthFunction:
    n = int(rng.integers(grammar.min_vars, grammar.max_vars + 1))
    max_terms = min(grammar.max_terms, n // grammar.min_block)
    count = int(rng.integers(min(grammar.min_terms, max_terms), max_terms + 1))
    blocks = _blocks(rng, n, count, grammar)

    terms: List[_Term] = []
    signs: List[str] = []
    required: Dict[int, int] = {}
    for block in blocks:
        for _ in range(grammar.max_resamples):
            template = grammar.templates[int(rng.integers(len(grammar.templates)))]
            term, sign = _BUILDERS[template](rng, block, grammar)
            clash = any(required.get(v, lit) != lit for v, lit in zip(term.variables, term.activation))
            if not clash:
                break
        else:
            raise ConfigError(f"{name}: could not draw a term free of conflicting literals")
        required.update(zip(term.variables, term.activation))
        terms.append(term)
        signs.append(sign)

    expr = "".join(f"{sign}{term.text}" for sign, term in zip(signs, terms)).lstrip("+")
    truth = tuple(float(1 - required[v]) for v in range(n))
    patterns = tuple(Pattern(t.variables, t.activation, k) for k, t in enumerate(terms))
    return SynthFunction(name, expr, n, truth, ((0.0, 1.0),) * n, patterns,
                         tuple(f"{s}{t.text}".lstrip("+") for s, t in zip(signs, terms)))


def generate_corpus(count: int, seed: int, grammar: Optional[GrammarConfig] = None) -> List[SynthFunction]:
    """``count`` functions; function k only depends on (seed, k).

    Args:
        count: Number of functions, >= 1.
        seed: Corpus seed.
        grammar: Template grammar; defaults to ``GrammarConfig()``.

    Returns:
        List[SynthFunction]: Functions named ``synth-<seed>-<k>`` with full truth.
    """
    if count < 1:
        raise ArgumentError(f"count must be >= 1, got {count}")
    grammar = grammar or GrammarConfig()
    corpus = []
    for k in range(count):
        rng = np.random.default_rng([seed, k])
        for attempt in range(grammar.max_resamples):
            fn = _generate_one(rng, f"synth-{seed}-{k:03d}", grammar)
            problems = check_truth_consistency(fn)
            if not problems:
                break
            logger.debug("resampling %s (attempt %d): %s", fn.name, attempt, problems[0])
        else:
            raise ConfigError(f"grammar cannot produce a consistent function: {problems[0]}")
        corpus.append(fn)
    logger.info("generated %d functions with seed %d", count, seed)
    return corpus


# ============================================================================
# VERIFICATION
# ============================================================================

@dataclass(frozen=True)
class VerifyReport:
    rows: pd.DataFrame

    def table(self) -> pd.DataFrame:
        """Per-row results in the CSV column order."""
        return self.rows[VERIFY_COLUMNS]

    def summary(self) -> pd.DataFrame:
        """Accuracy pooled over annotated variables per (loss, init)."""
        rows = self.rows.assign(correct=self.rows["accuracy"] * self.rows["annotated"])
        grouped = rows.groupby(["loss", "init"], sort=False)[["correct", "annotated"]].sum()
        grouped["accuracy"] = grouped["correct"] / grouped["annotated"]
        return grouped["accuracy"].unstack("init").reindex(columns=list(VERIFY_INITS)).reset_index()


def _job_seed(seed: int, function_index: int, init_index: int) -> int:
    return int(np.random.SeedSequence([seed, function_index, init_index]).generate_state(1)[0])


def verify_batch(fn: SynthFunction, config: LearnConfig) -> Tuple[Tuple[float, ...], ...]:
    """Activation point first; random corners of the domain come from ``config.random_batch``."""
    return (tuple(fn.activation_point().tolist()),) + tuple(config.batch)


def verify(corpus: Sequence[SynthFunction], config: LearnConfig, losses: Sequence[str] = ("shapley", "marginal"),
           inits: Sequence[str] = VERIFY_INITS, jobs: int = 1, settings: Settings = DEFAULT_SETTINGS,
           progress: bool = False) -> VerifyReport:
    """Learn a baseline for every (function, loss, init) and score it against the truth.

    Job seeds depend only on (config.seed, function index, init index), so
    ``jobs`` never changes the results.
    """
    if not corpus:
        raise ArgumentError("cannot verify an empty corpus")
    tasks = []
    for fi, fn in enumerate(corpus):
        if fn.annotated == 0:
            logger.warning("skipping %s: no annotated truth", fn.name)
            continue
        for loss in losses:
            for ii, init in enumerate(inits):
                job = dataclasses.replace(config, loss=loss, init=init, seed=_job_seed(config.seed, fi, ii),
                                          batch=verify_batch(fn, config),
                                          feature_variant=config.feature_variant and loss == "marginal")
                tasks.append((fn, loss, init, job))
    if not tasks:
        raise ArgumentError("no function in the corpus carries annotated truth")

    def run(task) -> dict:
        fn, loss, init, job = task
        state: LearnState = learn(job, fn.game(settings=settings))
        score = accuracy(state.b, fn.truth)
        logger.info("%s %s/%s accuracy %.3f after %d steps", fn.name, loss, init, score, state.steps)
        return {"function": fn.name, "loss": loss, "init": init, "accuracy": score,
                "final_loss": state.final_loss, "steps": state.steps, "annotated": fn.annotated}

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as executor:
        results = list(tqdm(executor.map(run, tasks), total=len(tasks), desc="verify", disable=not progress))
    return VerifyReport(pd.DataFrame(results))
