"""Seeded batch stages: ingest, split, train-lda, recommend, evaluate, sweep-mu.

Every stage reads its prerequisites from the output directory, writes its
artifacts next to them and records a ``<stage>.manifest.json`` with the run
configuration and SHA-256 digests of everything it read and wrote.
"""

import hashlib
import logging
import zlib
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .. import __version__
from ..exceptions import ConfigError, InsufficientDataError, MissingArtifactError
from ..models.domain_models import (
    Algorithm, DatasetFormat, EntropyKind, RecallProtocol, RecommendationList,
    RecommendedItem, RunConfig, StageManifest
)
from .data_loader import export_edge_list, load_ontology, load_ratings, write_ratings
from .entropy_service import build_entropy_table
from .evaluation_service import (
    EvaluationService, build_report, diversity, longtail_split, make_recall_protocol,
    mean_similarity, popularity_at_n, summary_table
)
from .graph_service import BipartiteGraph, build_graph_from_frame, largest_connected_component, natural_key
from .recommender_service import RecommendationService
from .topic_service import TopicModel, log_topics, phi_to_frame, theta_to_frame, train

logger = logging.getLogger(__name__)

GRAPH_FILE = "graph.tsv"
TRAIN_FILE = "train.tsv"
PROTOCOL_FILE = "protocol.json"
LONGTAIL_FILE = "longtail.csv"
MODEL_FILE = "topic_model.npz"
THETA_FILE = "theta.csv"
PHI_FILE = "phi.csv"
METRICS_FILE = "metrics.csv"
MU_SWEEP_FILE = "mu_sweep.csv"

RECOMMENDATION_COLUMNS = ["user_id", "rank", "item_id", "score", "algorithm"]

CSV_OPTIONS = {"index": False, "lineterminator": "\n", "float_format": "%.17g"}


def stage_seed(seed: int, stream: str) -> int:
    """Seed of a named random stream derived from the run seed."""
    sequence = np.random.SeedSequence([seed, zlib.crc32(stream.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def file_digest(path: Path) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def recommendations_file(algorithm: Algorithm) -> str:
    return f"recommendations_{algorithm.value}.csv"


def lists_to_frame(lists: Sequence[RecommendationList]) -> pd.DataFrame:
    rows = [
        (rec.query_user, rank, entry.item_id, entry.score, rec.algorithm.value)
        for rec in lists
        for rank, entry in enumerate(rec.items, start=1)
    ]
    return pd.DataFrame(rows, columns=RECOMMENDATION_COLUMNS)


def read_recommendations(path: Path, algorithm: Algorithm, k: int) -> List[RecommendationList]:
    frame = pd.read_csv(path, dtype={"user_id": str, "item_id": str, "algorithm": str})
    lists = []
    for user_id, rows in frame.groupby("user_id", sort=False):
        rows = rows.sort_values("rank")
        items = [RecommendedItem(item_id=i, score=float(s)) for i, s in zip(rows["item_id"], rows["score"])]
        lists.append(RecommendationList(query_user=user_id, items=items, algorithm=algorithm, k=max(k, len(items))))
    return lists


class PipelineService:

    def __init__(self, config: RunConfig) -> None:
        self.config = config
        self.output_dir = Path(config.output_dir)
        self._graph: Optional[BipartiteGraph] = None
        self._training: Optional[pd.DataFrame] = None
        logger.info(f"PipelineService initialized, output directory {self.output_dir}")

    def path(self, name: str) -> Path:
        return self.output_dir / name

    def require(self, name: str, hint: str) -> Path:
        path = self.path(name)
        if not path.is_file():
            raise MissingArtifactError(str(path), hint)
        return path

    def write_manifest(
        self,
        command: str,
        inputs: Sequence[Path],
        outputs: Sequence[Path],
        timings: Optional[Dict[str, Dict[str, float]]] = None
    ) -> Path:
        input_digests = {Path(p).name: file_digest(p) for p in inputs}
        combined = hashlib.sha256()
        for name in sorted(input_digests):
            combined.update(f"{name}:{input_digests[name]}\n".encode("utf-8"))
        manifest = StageManifest(
            version=__version__,
            command=command,
            config=self.config.model_dump(mode="json"),
            seed=self.config.seed,
            inputs=input_digests,
            outputs={Path(p).name: file_digest(p) for p in outputs},
            inputs_digest=combined.hexdigest(),
            timings=timings or {},
        )
        path = self.path(f"{command}.manifest.json")
        path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    def ingest(self) -> Dict:
        cfg = self.config
        if not cfg.dataset:
            raise ConfigError("ingest needs a dataset path (--dataset)")
        self.output_dir.mkdir(parents=True, exist_ok=True)

        graph = build_graph_from_frame(load_ratings(cfg.dataset, cfg.dataset_format), cfg.duplicate_policy)
        graph_path = export_edge_list(graph, self.path(GRAPH_FILE))
        self.write_manifest("ingest", [Path(cfg.dataset)], [graph_path])

        stats = {
            "users": graph.n_users,
            "items": graph.n_items,
            "edges": graph.n_edges,
            "density": graph.density,
        }
        logger.info(f"Ingested {cfg.dataset}: {stats}")
        return stats

    def split(self) -> Dict:
        cfg = self.config
        graph_path = self.require(GRAPH_FILE, "run ingest first")
        records = load_ratings(graph_path, DatasetFormat.TSV)
        split = longtail_split(records, cfg.r_percent)

        eligible = int(((records["rating"] == 5) & records["item_id"].isin(split.tail_items)).sum())
        if eligible == 0:
            raise InsufficientDataError("No five star long tail ratings to hold out")
        n_cases = cfg.n_cases
        if eligible < n_cases:
            logger.warning(f"Only {eligible} five star long tail ratings, reducing n_cases from {n_cases}")
            n_cases = eligible

        training, protocol = make_recall_protocol(
            records, split, n_cases, cfg.n_decoys, stage_seed(cfg.seed, "split")
        )

        train_path = write_ratings(training, self.path(TRAIN_FILE))
        protocol_path = self.path(PROTOCOL_FILE)
        protocol_path.write_text(protocol.model_dump_json(indent=2) + "\n", encoding="utf-8")
        items = sorted(split.popularity, key=natural_key)
        longtail_path = self.path(LONGTAIL_FILE)
        pd.DataFrame({
            "item_id": items,
            "ratings": [split.popularity[i] for i in items],
            "long_tail": [i in split.tail_items for i in items],
        }).to_csv(longtail_path, **CSV_OPTIONS)

        self.write_manifest("split", [graph_path], [train_path, protocol_path, longtail_path])
        return {
            "tail_items": len(split.tail_items),
            "items": len(items),
            "tail_item_share": split.tail_item_share,
            "tail_rating_share": split.tail_rating_share,
            "cases": len(protocol.cases),
            "training_ratings": len(training),
        }

    def training_data(self) -> Tuple[pd.DataFrame, BipartiteGraph]:
        if self._graph is None:
            train_path = self.require(TRAIN_FILE, "run split first")
            training = load_ratings(train_path, DatasetFormat.TSV)
            graph = largest_connected_component(build_graph_from_frame(training))
            kept = training["user_id"].isin(graph.user_ids)
            if not kept.all():
                logger.warning(
                    f"Dropped {int((~kept).sum())} training ratings of "
                    f"{training.loc[~kept, 'user_id'].nunique()} users outside the largest component"
                )
            self._training = training[kept].reset_index(drop=True)
            self._graph = graph
        return self._training, self._graph

    def train_lda(self) -> TopicModel:
        cfg = self.config
        _, graph = self.training_data()
        model = train(
            graph, cfg.topics, cfg.sweeps, cfg.resolved_alpha, cfg.beta, seed=stage_seed(cfg.seed, "lda")
        )
        log_topics(model)

        model_path = model.save(self.path(MODEL_FILE))
        theta_path, phi_path = self.path(THETA_FILE), self.path(PHI_FILE)
        theta_to_frame(model).to_csv(theta_path, **CSV_OPTIONS)
        phi_to_frame(model).to_csv(phi_path, **CSV_OPTIONS)
        self.write_manifest("train-lda", [self.path(TRAIN_FILE)], [model_path, theta_path, phi_path])
        return model

    def topic_model(self, algorithms: Sequence[Algorithm]) -> Optional[TopicModel]:
        if not any(a.needs_topic_model for a in algorithms):
            return None
        return TopicModel.load(self.require(MODEL_FILE, "run train-lda before ac2 or lda"))

    def sample_users(self, graph: BipartiteGraph) -> List[str]:
        rng = np.random.default_rng(stage_seed(self.config.seed, "users"))
        n = min(self.config.eval_users, graph.n_users)
        chosen = np.sort(rng.choice(graph.n_users, size=n, replace=False))
        return [graph.user_ids[node] for node in chosen]

    def _model_inputs(self, model: Optional[TopicModel]) -> List[Path]:
        inputs = [self.path(TRAIN_FILE)]
        if model is not None:
            inputs.append(self.path(MODEL_FILE))
        return inputs

    def recommend(self) -> Dict[str, Dict[str, float]]:
        cfg = self.config
        _, graph = self.training_data()
        model = self.topic_model(cfg.algorithms)
        service = RecommendationService(graph, cfg, model)
        users = self.sample_users(graph)

        outputs, timings = [], {}
        for algorithm in cfg.algorithms:
            lists = service.recommend_batch(algorithm, users)
            path = self.path(recommendations_file(algorithm))
            lists_to_frame(lists).to_csv(path, **CSV_OPTIONS)
            outputs.append(path)

            seconds = np.array(list(service.timings.values()) or [0.0])
            timings[algorithm.value] = {"mean": float(seconds.mean()), "max": float(seconds.max())}
            logger.info(
                f"{algorithm.value}: {len(users)} users, {timings[algorithm.value]['mean']:.3f}s mean per user"
            )

        self.write_manifest("recommend", self._model_inputs(model), outputs, timings)
        return timings

    def item_universe(self, graph: BipartiteGraph) -> int:
        if self.config.item_universe is not None:
            return self.config.item_universe
        graph_path = self.path(GRAPH_FILE)
        if graph_path.is_file():
            return int(load_ratings(graph_path, DatasetFormat.TSV)["item_id"].nunique())
        return graph.n_items

    def evaluate(self) -> Tuple[pd.DataFrame, str]:
        cfg = self.config
        protocol_path = self.require(PROTOCOL_FILE, "run split first")
        list_paths = {
            a: self.require(recommendations_file(a), f"run recommend for {a.value} first")
            for a in cfg.algorithms
        }
        training, graph = self.training_data()
        model = self.topic_model(cfg.algorithms)
        protocol = RecallProtocol.model_validate_json(protocol_path.read_text(encoding="utf-8"))
        ontology = load_ontology(cfg.ontology) if cfg.ontology else None

        service = RecommendationService(graph, cfg, model)
        evaluator = EvaluationService(training, self.item_universe(graph), protocol, ontology, cfg.workers)
        rows = []
        for algorithm, path in list_paths.items():
            rows += evaluator.evaluate_recall(algorithm, service.scorer(algorithm))
            rows += evaluator.evaluate_lists(algorithm, read_recommendations(path, algorithm, cfg.k))

        report = build_report(rows)
        metrics_path = self.path(METRICS_FILE)
        report.to_csv(metrics_path, **CSV_OPTIONS)

        inputs = self._model_inputs(model) + [protocol_path] + list(list_paths.values())
        if cfg.ontology:
            inputs.append(Path(cfg.ontology))
        self.write_manifest("evaluate", inputs, [metrics_path])
        return report, summary_table(report)

    def sweep_mu(self) -> pd.DataFrame:
        cfg = self.config
        algorithm = cfg.algorithms[0]
        if not algorithm.ascending:
            logger.warning(f"{algorithm.value} does not use the candidate bound; every row will match")
        training, graph = self.training_data()
        model = self.topic_model([algorithm])
        users = self.sample_users(graph)
        ontology = load_ontology(cfg.ontology) if cfg.ontology else None
        favorites = training.groupby("user_id", sort=False)["item_id"].agg(list).to_dict()
        universe = self.item_universe(graph)

        tables = {}
        if algorithm in (Algorithm.AC1, Algorithm.AC2):
            kind = EntropyKind.ITEM_BASED if algorithm == Algorithm.AC1 else EntropyKind.TOPIC_BASED
            if kind == EntropyKind.TOPIC_BASED and model is None:
                raise MissingArtifactError(MODEL_FILE, "run train-lda before ac2")
            tables[kind] = build_entropy_table(graph, kind, model)

        rows = []
        for mu in cfg.mu_values:
            service = RecommendationService(graph, cfg.model_copy(update={"mu": mu}), model, tables)
            lists = service.recommend_batch(algorithm, users)
            seconds = list(service.timings.values()) or [0.0]
            rows.append({
                "mu": mu,
                "algorithm": algorithm.value,
                "popularity": popularity_at_n(lists, training, [cfg.k])[cfg.k],
                "diversity": diversity(lists, universe),
                "similarity": mean_similarity(lists, ontology, favorites) if ontology else float("nan"),
                "seconds_per_user": float(np.mean(seconds)),
            })
            logger.info(f"mu={mu}: {rows[-1]}")

        sweep = pd.DataFrame(rows)
        sweep_path = self.path(MU_SWEEP_FILE)
        sweep.to_csv(sweep_path, **CSV_OPTIONS)
        inputs = self._model_inputs(model) + ([Path(cfg.ontology)] if cfg.ontology else [])
        self.write_manifest("sweep-mu", inputs, [sweep_path])
        return sweep
