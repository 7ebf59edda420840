import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from . import __version__
from .config import settings
from .exceptions import ConfigError, DataError, DistributionError, GraphError, UsageError
from .models.domain_models import Algorithm, DatasetFormat, DuplicatePolicy, RunConfig
from .services.pipeline_service import PipelineService

logging.basicConfig(level=settings.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
logger = logging.getLogger(__name__)

VERSION = __version__

COMMANDS = ["config", "ingest", "split", "train-lda", "recommend", "evaluate", "sweep-mu"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class CliParser(argparse.ArgumentParser):

    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


def _run_options() -> argparse.ArgumentParser:
    """Flags shared by every sub-command; one per RunConfig field."""
    options = CliParser(add_help=False)
    options.add_argument("--config", help="JSON file with RunConfig values; flags override it")
    options.add_argument("--dataset", help="Rating file to ingest")
    options.add_argument("--format", dest="dataset_format", choices=[f.value for f in DatasetFormat])
    options.add_argument("--duplicates", dest="duplicate_policy", choices=[p.value for p in DuplicatePolicy])
    options.add_argument("--algorithms", nargs="+", choices=[a.value for a in Algorithm], metavar="ALGO",
                         help=f"One or more of: {', '.join(a.value for a in Algorithm)}")
    options.add_argument("--k", type=int, help="Recommendation list length")
    options.add_argument("--mu", type=int, help="Item bound of the candidate subgraph")
    options.add_argument("--full-graph", action="store_true", help="Walk on the whole graph (no item bound)")
    options.add_argument("--tau", type=int, help="Truncated walk iterations")
    options.add_argument("--exact", action="store_true", help="Solve walk systems exactly instead of truncating")
    options.add_argument("--cost-constant", type=float, help="User to item transition cost C")
    options.add_argument("--topics", type=int)
    options.add_argument("--alpha", type=float, help="Defaults to 50 / topics")
    options.add_argument("--beta", type=float)
    options.add_argument("--sweeps", type=int)
    options.add_argument("--damping", type=float, help="PPR restart probability")
    options.add_argument("--r-percent", type=float, help="Rating share defining the long tail")
    options.add_argument("--n-cases", type=int)
    options.add_argument("--n-decoys", type=int)
    options.add_argument("--eval-users", type=int)
    options.add_argument("--item-universe", type=int)
    options.add_argument("--ontology", help="item_id<TAB>Category:Sub:... file for similarity")
    options.add_argument("--mu-values", nargs="+", type=int)
    options.add_argument("--seed", type=int)
    options.add_argument("--workers", type=int)
    options.add_argument("--output-dir")
    return options


def build_parser() -> CliParser:
    parser = CliParser(prog="longtail", description="Graph-based long tail recommendation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subcommands = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    options = _run_options()
    for command in COMMANDS:
        subcommands.add_parser(command, parents=[options])
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Settings defaults, then the --config file, then command-line flags."""
    values = {}
    if args.config:
        try:
            values.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {args.config}: {e}") from None

    for field in RunConfig.model_fields:
        value = getattr(args, field, None)
        if value is not None:
            values[field] = value
    if args.full_graph:
        values["mu"] = None
    if args.exact:
        values["tau"] = None

    try:
        return RunConfig(**values)
    except ValidationError as e:
        details = "; ".join(f"{'.'.join(map(str, err['loc']))}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"Invalid configuration: {details}") from None


def run_command(command: str, config: RunConfig) -> int:
    if command == "config":
        print(config.model_dump_json(indent=2))
        return EXIT_OK

    pipeline = PipelineService(config)
    if command == "ingest":
        stats = pipeline.ingest()
        print(f"users={stats['users']} items={stats['items']} edges={stats['edges']} density={stats['density']:.4%}")
    elif command == "split":
        stats = pipeline.split()
        print(
            f"long tail: {stats['tail_items']}/{stats['items']} items ({stats['tail_item_share']:.1%}) "
            f"hold {stats['tail_rating_share']:.1%} of ratings; {stats['cases']} recall cases"
        )
    elif command == "train-lda":
        model = pipeline.train_lda()
        print(f"trained {model.topics} topics over {model.n_replicas} rating replicas")
    elif command == "recommend":
        for algorithm, seconds in pipeline.recommend().items():
            print(f"{algorithm}: {seconds['mean']:.3f}s mean, {seconds['max']:.3f}s max per user")
    elif command == "evaluate":
        _, summary = pipeline.evaluate()
        print(summary)
    elif command == "sweep-mu":
        print(pipeline.sweep_mu().to_string(index=False))
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        logger.info(f"Running {args.command} (version {VERSION}, seed {config.seed})")
        return run_command(args.command, config)
    except ConfigError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (DataError, GraphError, DistributionError) as e:
        logger.error(str(e))
        return EXIT_DATA
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
