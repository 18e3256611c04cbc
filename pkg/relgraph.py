import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence

import yaml

from cli_interface import MODE_CHOICES, CLIInterface, RunConfig, run_end_to_end
from storage import ArtifactStorage

__version__ = "1.0.0"

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Bad command line; reported with exit status 2"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage().strip()}\n{self.prog}: error: {message}")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML file mirroring these flags; explicit flags win")
    parser.add_argument("--schema", help="Schema YAML file")
    parser.add_argument("--data", help="Directory the schema's sources are relative to (default: the schema's)")
    parser.add_argument("--task", help="Task JSON file")
    parser.add_argument("--task-name", dest="task_name", help="Task to use when the file declares several")
    parser.add_argument("--client", help="replay:PATH or live:PROFILE")
    parser.add_argument("--mode", choices=MODE_CHOICES, help="Graph construction (default: both)")
    parser.add_argument("--method", choices=("embedding", "overlap"), help="Column similarity method")
    parser.add_argument("--top-n", dest="top_n", type=int, help="Number of similarity pairs to report")
    parser.add_argument("--runs", type=int, help="Independent planner runs (1 = single session)")
    parser.add_argument("--budget", type=float, help="Oracle training budget fraction in (0, 1]")
    parser.add_argument("--seed", type=int, help="Base random seed")
    parser.add_argument("--hard-threshold", dest="hard_threshold", type=int, help="Maximum applied actions")
    parser.add_argument("--out", help="Output directory (default: out)")
    parser.add_argument("-d", "--debug", action="store_true", help="Verbose logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="No progress output on stdout")


def _add_planner(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--replay", help="Shorthand for --client replay:PATH")
    parser.add_argument("--record", action="store_true", default=None, help="Save transcripts of every run")
    parser.add_argument("--no-reflection", dest="reflection", action="store_false", default=None,
                        help="Skip the self-check turn")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="relgraph",
        description="relgraph - turn relational tables into a graph schema with an LLM planner",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python relgraph.py synth --seed 0 --out bench/
  python relgraph.py apply bench/schema.yaml bench/answer_key.json --out applied/
  python relgraph.py plan --schema fixtures/cot_paper_journal/schema.yaml \\
      --replay fixtures/cot_paper_journal/transcript.jsonl --out planned/
  python relgraph.py run --config run.yaml
        """
    )
    parser.add_argument("-v", "--version", action="version", version=f"relgraph {__version__}")
    commands = parser.add_subparsers(dest="command", parser_class=_Parser)

    profile = commands.add_parser("profile", help="Column statistics report")
    _add_common(profile)
    profile.add_argument("-k", dest="k", type=int, help="Sampled values per column")

    infer = commands.add_parser("infer-types", help="Infer column types (deterministic, or with --client)")
    _add_common(infer)

    similarity = commands.add_parser("similarity", help="Rank joinable column pairs")
    _add_common(similarity)
    similarity.add_argument("--embedder-command", dest="embedder_command", nargs="+",
                            help="Embedding process speaking newline-delimited JSON")

    apply = commands.add_parser("apply", help="Apply an action script to a schema")
    apply.add_argument("schema_file", help="Schema YAML file")
    apply.add_argument("actions", help="Action script JSON (a list, or an object with 'actions')")
    _add_common(apply)

    plan = commands.add_parser("plan", help="Run the planner")
    _add_common(plan)
    _add_planner(plan)

    build = commands.add_parser("build-graph", help="Build and export the heterogeneous graph")
    _add_common(build)

    evaluate = commands.add_parser("evaluate", help="Score a schema with the oracle basket")
    _add_common(evaluate)

    compare = commands.add_parser("compare", help="Rank candidate schemas on one task")
    compare.add_argument("candidates", nargs="+", help="NAME=SCHEMA or SCHEMA")
    _add_common(compare)
    compare.add_argument("--probe-seeds", dest="probe_seeds", type=int, nargs="*", default=(),
                         help="Seeds for the early-vs-full budget ranking probe")

    synth = commands.add_parser("synth", help="Generate a synthetic benchmark with an answer key")
    _add_common(synth)
    synth.add_argument("--challenges", help="Comma-separated subset of c1,c2,c3,c4 (default: all)")
    synth.add_argument("--anonymize", action="store_true", help="Also write an anonymized copy")

    run = commands.add_parser("run", help="profile, plan, build, evaluate and rank in one go")
    _add_common(run)
    _add_planner(run)
    run.add_argument("--llm-types", dest="llm_types", action="store_true", default=None,
                     help="Ask the chat model for column types before planning")
    return parser


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise UsageError(f"Could not read config {path}: {e}")
    if not isinstance(document, dict):
        raise UsageError(f"Config {path} must be a mapping")
    return document


def make_config(args: argparse.Namespace) -> RunConfig:
    flags = dict(vars(args))
    if getattr(args, "schema_file", None):
        flags["schema"] = args.schema_file
    if getattr(args, "replay", None):
        flags["client"] = f"replay:{args.replay}"
    document = load_config_file(args.config)

    if args.command == "synth":
        synth = dict(document.get("synth") or {})
        if args.challenges is not None:
            chosen = {c.strip() for c in args.challenges.split(",") if c.strip()}
            unknown = chosen - {"c1", "c2", "c3", "c4"}
            if unknown:
                raise UsageError(f"Unknown challenges: {', '.join(sorted(unknown))}")
            for challenge in ("c1", "c2", "c3", "c4"):
                synth[challenge] = challenge in chosen
        if args.seed is not None:
            synth["seed"] = args.seed
        flags["synth"] = synth

    config = RunConfig.from_sources(flags, document)
    is_valid, error = config.validate()
    if not is_valid:
        raise UsageError(error)
    return config


def _configure_logging(debug: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if debug else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _inputs(config: RunConfig, args: argparse.Namespace) -> Dict[str, Optional[str]]:
    inputs = {"schema": config.schema, "data": config.data, "task": config.task, "config": args.config}
    if config.client and config.client.startswith("replay:"):
        inputs["transcript"] = config.client.partition(":")[2]
    if getattr(args, "actions", None):
        inputs["actions"] = args.actions
    for index, candidate in enumerate(getattr(args, "candidates", None) or []):
        inputs[f"candidate_{index}"] = candidate.rpartition("=")[2]
    return inputs


def _dispatch(cli: CLIInterface, args: argparse.Namespace) -> Any:
    command = args.command
    if command == "profile":
        return cli.handle_profile()
    if command == "infer-types":
        return cli.handle_infer_types()
    if command == "similarity":
        return cli.handle_similarity()
    if command == "apply":
        return cli.handle_apply(args.actions)
    if command == "plan":
        return cli.handle_plan()
    if command == "build-graph":
        return cli.handle_build_graph()
    if command == "evaluate":
        return cli.handle_evaluate()
    if command == "compare":
        return cli.handle_compare(args.candidates, args.probe_seeds)
    if command == "synth":
        return cli.handle_synth(args.anonymize)
    return run_end_to_end(cli.config, cli)


def run_command(argv: Sequence[str]) -> int:
    """Run one subcommand; returns 0 on success, 1 on pipeline failure, 2 on bad usage"""
    argv = list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        config = make_config(args)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help and --version
        return e.code or EXIT_OK

    _configure_logging(args.debug)
    os.makedirs(config.out, exist_ok=True)
    storage = ArtifactStorage(config.out)
    cli = CLIInterface(config, storage, quiet=args.quiet)

    try:
        result = _dispatch(cli, args)
        storage.write_manifest(args.command, argv, _inputs(config, args), config.seeds(), __version__)
    except (ValueError, OSError) as e:
        storage.rollback()
        message = " ".join(str(e).split())
        print(f"relgraph {args.command}: {message}", file=sys.stderr)
        logger.debug("Command %s failed", args.command, exc_info=True)
        return EXIT_FAILURE

    # run keeps its summary so the failed stage stays on record
    if args.command == "run" and result["errors"]:
        stage, error = next(iter(result["errors"].items()))
        print(f"relgraph run: stage {stage} failed: {' '.join(error.split())}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> None:
    """Entry point for the relgraph command line"""
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
