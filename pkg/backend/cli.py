"""Command-line entry point.

Run from ``backend/``::

    python cli.py shapley --game and2.json --exact
    python cli.py spectrum --game and5.json --out spectrum.csv
    python cli.py synth gen --count 100 --seed 1 --out corpus.jsonl

Exit codes: 0 success, 2 configuration or argument errors (including usage
errors), 3 evaluation, domain or training errors.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Callable, Dict, List, Optional, Sequence

from attribution import (
    DEFAULT_TOP_FRACTION,
    Sampling,
    context_saliency,
    interaction_table,
    multi_order_shapley,
    order_spectrum,
    order_strength_profile,
    shapley_exact,
    shapley_interaction_index,
    shapley_sampled,
)
from baseline_learn import LearnAborted, LearnConfig, accuracy, learn, load_learn_config
from exceptions import (
    ArgumentError,
    AttributionToolkitError,
    ConfigError,
    DomainError,
    EvaluationError,
    TrainingError,
)
from game_core import Coalition, load_game
from mlp import Dataset, make_blobs, model_to_dict, save_model, train, training_accuracy
from reporting import (
    RunManifest,
    resolve_inputs,
    rows_frame,
    to_csv,
    to_json,
    write_manifest,
    write_text,
)
from settings import DEFAULT_SETTINGS, Settings
from synth import (
    GrammarConfig,
    VERIFY_INITS,
    generate_corpus,
    load_corpus,
    tsang_suite,
    verify,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_EVALUATION = 3


def exit_code_for(error: BaseException) -> int:
    if isinstance(error, LearnAborted):
        error = error.cause
    if isinstance(error, (EvaluationError, DomainError, TrainingError)):
        return EXIT_EVALUATION
    return EXIT_CONFIG


# ============================================================================
# ARGUMENT HELPERS
# ============================================================================

def parse_coalition(text: str, n: int) -> Coalition:
    """A 0/1 string of length n (character k is x_{k+1}) or 1-based members "1,3"."""
    text = text.strip()
    if len(text) == n and set(text) <= {"0", "1"}:
        return Coalition.from_members(n, [k for k, c in enumerate(text) if c == "1"])
    if text in ("", "{}"):
        return Coalition.empty(n)
    try:
        members = [int(part) - 1 for part in text.strip("{}").split(",")]
    except ValueError as e:
        raise ArgumentError(f"cannot read coalition {text!r}: use a 0/1 string of length {n} or members like 1,3") from e
    return Coalition.from_members(n, members)


def parse_arch(text: str) -> List[int]:
    try:
        widths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--arch expects comma-separated widths, got {text!r}") from e
    if not widths or min(widths) < 1:
        raise ConfigError("--arch needs at least one positive width")
    return widths


def read_json(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON: {e}") from e


def variable_index(args, game) -> int:
    if not 1 <= args.var <= game.n:
        raise ArgumentError(f"--var must be in [1, {game.n}], got {args.var}")
    return args.var - 1


def sampling_from(args) -> Optional[Sampling]:
    return Sampling(args.samples, args.seed) if args.samples else None


def finish(args, text: str, fmt: str, inputs: Dict[str, Optional[str]], seed: Optional[int] = None,
           config: Optional[dict] = None) -> int:
    write_text(text, args.out)
    write_manifest(RunManifest(args.command_path, resolve_inputs(inputs), seed, args.out, fmt, config or {}))
    return EXIT_OK


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_eval(args, settings: Settings) -> int:
    game = load_game(args.game, settings)
    coalition = parse_coalition(args.coalition, game.n)
    payload = {"coalition": str(coalition), "bits": coalition.bits, "value": game.evaluate(coalition)}
    return finish(args, to_json(payload), "json", {"game": args.game})


def cmd_shapley(args, settings: Settings) -> int:
    game = load_game(args.game, settings, memoize=True)
    if args.perms is not None:
        report = shapley_sampled(game, args.perms, args.seed)
        seed = args.seed
    else:
        report = shapley_exact(game)
        seed = None
    payload = report.to_dict()
    payload["efficiency_gap"] = report.efficiency_gap
    return finish(args, to_json(payload), "json", {"game": args.game}, seed, dict(report.method))


def cmd_interactions(args, settings: Settings) -> int:
    game = load_game(args.game, settings)
    table = interaction_table(game, args.max_order)
    frame = rows_frame(table.rows(), ["coalition_bits", "order", "value"])
    return finish(args, to_csv(frame), "csv", {"game": args.game}, config={"max_order": table.max_order})


def cmd_orders(args, settings: Settings) -> int:
    game = load_game(args.game, settings, memoize=True)
    components = multi_order_shapley(game, variable_index(args, game), sampling_from(args))
    frame = rows_frame(components.rows(), ["order", "value", "method"])
    return finish(args, to_csv(frame), "csv", {"game": args.game}, args.seed,
                  {"var": args.var, "samples": args.samples})


def cmd_spectrum(args, settings: Settings) -> int:
    game = load_game(args.game, settings)
    spectrum = order_spectrum(game, args.tau)
    frame = rows_frame(spectrum.rows(), ["order", "ratio"])
    if spectrum.salient_counts is not None:
        frame["salient"] = spectrum.salient_counts
    return finish(args, to_csv(frame), "csv", {"game": args.game},
                  config={"tau": args.tau, "degenerate": spectrum.degenerate})


def cmd_saliency(args, settings: Settings) -> int:
    game = load_game(args.game, settings, memoize=True)
    result = context_saliency(game, variable_index(args, game), args.top, sampling_from(args))
    frame = rows_frame([(j + 1, p) for j, p in result.p.items()], ["variable", "p"])
    return finish(args, to_csv(frame), "csv", {"game": args.game}, args.seed,
                  {"var": args.var, "top": args.top, "contexts": result.considered,
                   "selected": result.selected, "exact": result.exact})


def cmd_sii(args, settings: Settings) -> int:
    game = load_game(args.game, settings, memoize=True)
    coalition = parse_coalition(args.coalition, game.n)
    payload = {"coalition": str(coalition), "bits": coalition.bits,
               "value": shapley_interaction_index(game, coalition)}
    return finish(args, to_json(payload), "json", {"game": args.game})


def cmd_profile(args, settings: Settings) -> int:
    game = load_game(args.game, settings)
    frame = rows_frame(order_strength_profile(game).rows(), ["order", "shapley", "marginal"])
    return finish(args, to_csv(frame), "csv", {"game": args.game})


def cmd_learn(args, settings: Settings) -> int:
    config, extras = load_learn_config(args.config)
    if "game" not in extras:
        raise ConfigError(f"{args.config}: missing the \"game\" manifest path")
    game_path = os.path.join(os.path.dirname(os.path.abspath(args.config)), extras["game"])
    template = load_game(game_path, settings)
    means = None
    if args.data:
        means = Dataset.from_csv(args.data).feature_means
    state = learn(config, template, means, progress=args.verbose > 0)
    score = None
    if extras.get("truth") is not None:
        score = accuracy(state.b, extras["truth"])
    return finish(args, to_json(state.to_dict(score)), "json",
                  {"config": args.config, "game": game_path, "data": args.data}, config.seed, config.to_dict())


def cmd_synth_gen(args, settings: Settings) -> int:
    grammar = GrammarConfig.from_dict(read_json(args.grammar)) if args.grammar else GrammarConfig()
    corpus = generate_corpus(args.count, args.seed, grammar)
    text = "".join(json.dumps(fn.to_dict()) + "\n" for fn in corpus)
    return finish(args, text, "jsonl", {"grammar": args.grammar}, args.seed,
                  {"count": args.count, "grammar": dataclasses.asdict(grammar)})


def cmd_synth_tsang(args, settings: Settings) -> int:
    text = "".join(json.dumps(fn.to_dict()) + "\n" for fn in tsang_suite())
    return finish(args, text, "jsonl", {})


def cmd_synth_verify(args, settings: Settings) -> int:
    corpus = load_corpus(args.corpus)
    data = read_json(args.config) if args.config else {}
    config = LearnConfig.from_dict(data)
    jobs = args.jobs or settings.jobs
    report = verify(corpus, config, losses=args.losses, inits=args.inits, jobs=jobs, settings=settings,
                    progress=args.verbose > 0)
    summary = report.summary()
    if args.out in (None, "-"):
        logger.info("verify summary:\n%s", summary.to_string(index=False))
    else:
        write_text(to_csv(summary), args.out + ".summary.csv")
    return finish(args, to_csv(report.table()), "csv", {"corpus": args.corpus, "config": args.config},
                  config.seed, config.to_dict())


def cmd_mlp_train(args, settings: Settings) -> int:
    dataset = Dataset.from_csv(args.data)
    model = train(dataset, parse_arch(args.arch), args.epochs, args.lr, args.seed, args.batch_size,
                  args.activation, progress=args.verbose > 0)
    logger.info("training accuracy %.4f", training_accuracy(model, dataset))
    if args.out in (None, "-"):
        write_text(json.dumps(model_to_dict(model)) + "\n", None)
    else:
        save_model(model, args.out)
    write_manifest(RunManifest(args.command_path, resolve_inputs({"data": args.data}), args.seed, args.out, "json",
                               {"arch": args.arch, "epochs": args.epochs, "lr": args.lr,
                                "batch_size": args.batch_size, "activation": args.activation}))
    return EXIT_OK


def cmd_mlp_blobs(args, settings: Settings) -> int:
    dataset = make_blobs(args.per_class, args.features, args.classes, args.seed, args.spread)
    return finish(args, to_csv(_dataset_frame(dataset)), "csv", {}, args.seed,
                  {"per_class": args.per_class, "features": args.features, "classes": args.classes,
                   "spread": args.spread})


def _dataset_frame(dataset: Dataset):
    frame = rows_frame(dataset.features.tolist(), list(dataset.columns))
    frame["label"] = dataset.labels
    return frame


# ============================================================================
# PARSER
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=None, help="Output file (default: stdout)")
    common.add_argument("--settings", default=None, help="dotenv-format settings file (ATTRIB_* keys)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG")

    parser = argparse.ArgumentParser(prog="attrib", description="Shapley values, interactions and baseline learning")
    commands = parser.add_subparsers(dest="command", required=True)

    def game_command(name: str, handler: Callable, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, parents=[common], help=help_text)
        sub.add_argument("--game", required=True, help="Game manifest (JSON)")
        sub.set_defaults(handler=handler, command_path=name)
        return sub

    sub = game_command("eval", cmd_eval, "Evaluate v(S) for one coalition")
    sub.add_argument("--coalition", required=True, help="0/1 string of length n, or 1-based members like 1,3")

    sub = game_command("shapley", cmd_shapley, "Shapley values")
    mode = sub.add_mutually_exclusive_group()
    mode.add_argument("--exact", action="store_true", help="Enumerate all coalitions (default)")
    mode.add_argument("--perms", type=int, default=None, help="Permutation-sampling estimate with K orderings")
    sub.add_argument("--seed", type=int, default=0, help="Seed for --perms")

    sub = game_command("interactions", cmd_interactions, "Table of I(S) for 2 <= |S| <= max order")
    sub.add_argument("--max-order", type=int, default=None, help="Highest order to list (default: n)")

    for name, handler, help_text in (("orders", cmd_orders, "Multi-order Shapley values of one variable"),
                                     ("saliency", cmd_saliency, "Context saliency p(j|i)")):
        sub = game_command(name, handler, help_text)
        sub.add_argument("--var", type=int, required=True, help="1-based variable index")
        sub.add_argument("--samples", type=int, default=None,
                         help="Contexts to sample when exact enumeration exceeds the context cap")
        sub.add_argument("--seed", type=int, default=0, help="Seed for sampled contexts")
        if name == "saliency":
            sub.add_argument("--top", type=float, default=DEFAULT_TOP_FRACTION,
                             help="Fraction of top-ranked contexts kept")

    sub = game_command("spectrum", cmd_spectrum, "Order spectrum r_m of interaction mass")
    sub.add_argument("--tau", type=float, default=None, help="Also count patterns with |value| >= tau per order")

    sub = game_command("sii", cmd_sii, "Shapley interaction index of a coalition")
    sub.add_argument("--coalition", required=True, help="0/1 string of length n, or 1-based members like 1,3")

    game_command("profile", cmd_profile, "Per-order strength of Shapley components and marginal benefits")

    sub = commands.add_parser("learn", parents=[common], help="Learn baseline values")
    sub.add_argument("--config", required=True, help="Learn config (JSON) with a \"game\" manifest path")
    sub.add_argument("--data", default=None, help="Dataset CSV whose feature means seed init=mean")
    sub.set_defaults(handler=cmd_learn, command_path="learn")

    synth = commands.add_parser("synth", help="Synthetic corpora").add_subparsers(dest="synth_command", required=True)
    sub = synth.add_parser("gen", parents=[common], help="Generate a synthetic corpus (JSON lines)")
    sub.add_argument("--count", type=int, required=True)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--grammar", default=None, help="Grammar config (JSON)")
    sub.set_defaults(handler=cmd_synth_gen, command_path="synth gen")

    sub = synth.add_parser("verify", parents=[common], help="Learn and score baselines over a corpus")
    sub.add_argument("--corpus", required=True)
    sub.add_argument("--config", default=None, help="Learn config (JSON); loss and init are swept")
    sub.add_argument("--jobs", type=int, default=None, help="Parallel learning jobs")
    sub.add_argument("--losses", nargs="+", default=["shapley", "marginal"], choices=["shapley", "marginal"])
    sub.add_argument("--inits", nargs="+", default=list(VERIFY_INITS), choices=list(VERIFY_INITS))
    sub.set_defaults(handler=cmd_synth_verify, command_path="synth verify")

    sub = synth.add_parser("tsang", parents=[common], help="Export the bundled benchmark suite")
    sub.set_defaults(handler=cmd_synth_tsang, command_path="synth tsang")

    mlp = commands.add_parser("mlp", help="Toy MLP backend").add_subparsers(dest="mlp_command", required=True)
    sub = mlp.add_parser("train", parents=[common], help="Train an MLP classifier on a CSV dataset")
    sub.add_argument("--data", required=True, help="CSV with header; last column is the label")
    sub.add_argument("--arch", required=True, help="Hidden widths, e.g. 16,8")
    sub.add_argument("--epochs", type=int, default=200)
    sub.add_argument("--lr", type=float, default=0.1)
    sub.add_argument("--batch-size", type=int, default=16)
    sub.add_argument("--activation", default="relu", choices=["relu", "sigmoid", "identity"])
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(handler=cmd_mlp_train, command_path="mlp train")

    sub = mlp.add_parser("blobs", parents=[common], help="Write a toy Gaussian-blob dataset")
    sub.add_argument("--per-class", type=int, default=100)
    sub.add_argument("--features", type=int, default=2)
    sub.add_argument("--classes", type=int, default=2)
    sub.add_argument("--spread", type=float, default=0.1)
    sub.add_argument("--seed", type=int, default=0)
    sub.set_defaults(handler=cmd_mlp_blobs, command_path="mlp blobs")
    return parser


def configure_logging(verbose: int, settings: Settings) -> None:
    level = {0: settings.log_level.upper(), 1: "INFO"}.get(verbose, "DEBUG")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG
    try:
        settings = Settings.from_env_file(args.settings) if args.settings else DEFAULT_SETTINGS
        configure_logging(args.verbose, settings)
        return args.handler(args, settings)
    except AttributionToolkitError as e:
        code = exit_code_for(e)
        logger.error("%s", e)
        return code


if __name__ == "__main__":
    sys.exit(main())
