import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..config import settings
from ..exceptions import DataError, MissingArtifactError
from ..models.domain_models import (
    AbsorbingSpec, Algorithm, CostModel, EntropyKind, EntropyTable,
    RecommendationList, RecommendedItem, RunConfig
)
from .entropy_service import build_entropy_table, default_cost_constant
from .graph_service import BipartiteGraph, bfs_candidate_subgraph
from .topic_service import TopicModel
from .walk_service import absorbing_cost, absorbing_cost_exact, absorbing_time_exact, absorbing_time_truncated

logger = logging.getLogger(__name__)

Scorer = Callable[[str, Sequence[str]], np.ndarray]


def _query_node(g: BipartiteGraph, q: str) -> int:
    node = g.user_index(q)
    if g.rated_items(node).size == 0:
        raise DataError(f"User {q} has no ratings")
    return node


def _walk_item_values(
    g: BipartiteGraph,
    q: str,
    mu: Optional[int],
    tau: Optional[int],
    hitting: bool = False,
    table: Optional[EntropyTable] = None,
    cost_constant: Optional[float] = None
) -> np.ndarray:
    """Walk values of every item of ``g``; +inf outside the candidate subgraph.

    The absorbing set is the query user's rated items, or the query user
    alone when ``hitting`` is set. ``tau=None`` solves exactly.
    """
    node = _query_node(g, q)
    rated = g.rated_items(node)
    sub = bfs_candidate_subgraph(g, rated, mu)
    parent = sub.parent_nodes
    absorbing_parent = np.array([node]) if hitting else rated
    absorbing = frozenset(np.searchsorted(parent, absorbing_parent).tolist())

    if table is None:
        spec = AbsorbingSpec(absorbing_nodes=absorbing)
        result = absorbing_time_exact(sub, spec) if tau is None else absorbing_time_truncated(sub, spec, tau)
    else:
        spec = AbsorbingSpec(
            absorbing_nodes=absorbing,
            cost_model=CostModel.ENTROPY_BIASED,
            entropy=table,
            cost_constant=cost_constant,
        )
        result = absorbing_cost_exact(sub, spec) if tau is None else absorbing_cost(sub, spec, tau)

    values = np.full(g.n_items, np.inf)
    values[parent[sub.n_users:] - g.n_users] = result.values[sub.n_users:]
    return values


def ht_scores(g: BipartiteGraph, q: str, mu: Optional[int] = settings.DEFAULT_MU,
              tau: Optional[int] = settings.DEFAULT_TAU) -> np.ndarray:
    return _walk_item_values(g, q, mu, tau, hitting=True)


def at_scores(g: BipartiteGraph, q: str, mu: Optional[int] = settings.DEFAULT_MU,
              tau: Optional[int] = settings.DEFAULT_TAU) -> np.ndarray:
    return _walk_item_values(g, q, mu, tau)


def ac_scores(g: BipartiteGraph, q: str, table: EntropyTable, cost_constant: float,
              mu: Optional[int] = settings.DEFAULT_MU, tau: Optional[int] = settings.DEFAULT_TAU) -> np.ndarray:
    return _walk_item_values(g, q, mu, tau, table=table, cost_constant=cost_constant)


def personalized_pagerank(
    g: BipartiteGraph,
    start: Iterable[int],
    damping: float = settings.DEFAULT_DAMPING,
    tol: float = settings.PPR_TOLERANCE,
    max_iterations: int = settings.PPR_MAX_ITERATIONS
) -> np.ndarray:
    """Stationary vector of x = damping * restart + (1 - damping) * P^T x.

    ``damping`` is the restart probability; restart is uniform over ``start``.
    """
    start = np.unique(np.fromiter(start, dtype=np.int64))
    if start.size == 0:
        raise DataError("Personalized PageRank needs at least one start node")
    restart = np.zeros(g.n_nodes)
    restart[start] = 1.0 / start.size

    scores = restart.copy()
    for iteration in range(1, max_iterations + 1):
        # P^T x = A (x / d) for a symmetric adjacency
        updated = damping * restart + (1.0 - damping) * (g.adjacency @ (scores / g.degrees))
        change = np.abs(updated - scores).sum()
        scores = updated
        if change < tol:
            break
    else:
        logger.warning(f"PPR stopped after {max_iterations} iterations, L1 change {change:.3e}")
    return scores / scores.sum()


def ppr_scores(g: BipartiteGraph, q: str, damping: float = settings.DEFAULT_DAMPING) -> np.ndarray:
    node = _query_node(g, q)
    return personalized_pagerank(g, g.rated_items(node), damping)[g.n_users:]


def dppr_scores(g: BipartiteGraph, q: str, damping: float = settings.DEFAULT_DAMPING) -> np.ndarray:
    popularity = g.item_rating_counts().astype(np.float64)
    scores = np.full(g.n_items, np.nan)
    known = popularity > 0
    scores[known] = ppr_scores(g, q, damping)[known] / popularity[known]
    return scores


def lda_scores(model: TopicModel, g: BipartiteGraph, q: str) -> np.ndarray:
    """Mixture likelihood sum_z theta_q[z] * phi_z[i]; NaN for items the model lacks."""
    _query_node(g, q)
    mixture = model.theta[model.user_row(q)] @ model.phi
    scores = np.full(g.n_items, np.nan)
    for position, item_id in enumerate(g.item_ids):
        if model.has_item(item_id):
            scores[position] = mixture[model.item_column(item_id)]
    return scores


def rank_items(
    g: BipartiteGraph,
    q: str,
    scores: np.ndarray,
    algorithm: Algorithm,
    k: int
) -> RecommendationList:
    """Top-k candidates: finite scores, not rated by ``q``, ties by item id."""
    candidates = np.isfinite(scores)
    candidates[g.rated_items(g.user_index(q)) - g.n_users] = False
    positions = np.flatnonzero(candidates)
    key = scores[positions] if algorithm.ascending else -scores[positions]
    order = positions[np.lexsort((positions, key))][:k]
    return RecommendationList(
        query_user=q,
        items=[RecommendedItem(item_id=g.item_ids[p], score=float(scores[p])) for p in order],
        algorithm=algorithm,
        k=k,
    )


def recommend_ht(g: BipartiteGraph, q: str, k: int = settings.DEFAULT_K,
                 mu: Optional[int] = settings.DEFAULT_MU, tau: Optional[int] = settings.DEFAULT_TAU) -> RecommendationList:
    return rank_items(g, q, ht_scores(g, q, mu, tau), Algorithm.HT, k)


def recommend_at(g: BipartiteGraph, q: str, k: int = settings.DEFAULT_K,
                 mu: Optional[int] = settings.DEFAULT_MU, tau: Optional[int] = settings.DEFAULT_TAU) -> RecommendationList:
    return rank_items(g, q, at_scores(g, q, mu, tau), Algorithm.AT, k)


def recommend_ac(
    g: BipartiteGraph,
    q: str,
    k: int,
    table: EntropyTable,
    cost_constant: float,
    mu: Optional[int] = settings.DEFAULT_MU,
    tau: Optional[int] = settings.DEFAULT_TAU
) -> RecommendationList:
    algorithm = Algorithm.AC2 if table.kind == EntropyKind.TOPIC_BASED else Algorithm.AC1
    return rank_items(g, q, ac_scores(g, q, table, cost_constant, mu, tau), algorithm, k)


def recommend_ppr(g: BipartiteGraph, q: str, k: int = settings.DEFAULT_K,
                  damping: float = settings.DEFAULT_DAMPING) -> RecommendationList:
    return rank_items(g, q, ppr_scores(g, q, damping), Algorithm.PPR, k)


def recommend_dppr(g: BipartiteGraph, q: str, k: int = settings.DEFAULT_K,
                   damping: float = settings.DEFAULT_DAMPING) -> RecommendationList:
    return rank_items(g, q, dppr_scores(g, q, damping), Algorithm.DPPR, k)


def recommend_lda(model: TopicModel, g: BipartiteGraph, q: str, k: int = settings.DEFAULT_K) -> RecommendationList:
    return rank_items(g, q, lda_scores(model, g, q), Algorithm.LDA, k)


class RecommendationService:

    def __init__(
        self,
        graph: BipartiteGraph,
        config: Optional[RunConfig] = None,
        topic_model: Optional[TopicModel] = None,
        entropy_tables: Optional[Dict[EntropyKind, EntropyTable]] = None
    ) -> None:
        self.graph = graph
        self.config = config or RunConfig()
        self.topic_model = topic_model
        self._tables: Dict[EntropyKind, EntropyTable] = dict(entropy_tables or {})
        self._lock = threading.Lock()
        self._default_cost: Optional[float] = None
        self.timings: Dict[str, float] = {}
        logger.info(f"RecommendationService initialized on {graph!r}")

    def entropy_table(self, kind: EntropyKind) -> EntropyTable:
        with self._lock:
            if kind not in self._tables:
                if kind == EntropyKind.TOPIC_BASED and self.topic_model is None:
                    raise MissingArtifactError("topic model", "train-lda must run before ac2")
                self._tables[kind] = build_entropy_table(self.graph, kind, self.topic_model)
            return self._tables[kind]

    def cost_constant(self) -> float:
        """Configured C, else the mean item-based user entropy (shared by AC1 and AC2)."""
        if self.config.cost_constant is not None:
            return self.config.cost_constant
        with self._lock:
            if self._default_cost is None:
                self._default_cost = default_cost_constant(self.graph)
            return self._default_cost

    def item_scores(self, algorithm: Algorithm, user_id: str) -> np.ndarray:
        g, cfg = self.graph, self.config
        if algorithm == Algorithm.HT:
            return ht_scores(g, user_id, cfg.mu, cfg.tau)
        if algorithm == Algorithm.AT:
            return at_scores(g, user_id, cfg.mu, cfg.tau)
        if algorithm in (Algorithm.AC1, Algorithm.AC2):
            kind = EntropyKind.ITEM_BASED if algorithm == Algorithm.AC1 else EntropyKind.TOPIC_BASED
            return ac_scores(g, user_id, self.entropy_table(kind), self.cost_constant(), cfg.mu, cfg.tau)
        if algorithm == Algorithm.PPR:
            return ppr_scores(g, user_id, cfg.damping)
        if algorithm == Algorithm.DPPR:
            return dppr_scores(g, user_id, cfg.damping)
        if self.topic_model is None:
            raise MissingArtifactError("topic model", "train-lda must run before lda")
        return lda_scores(self.topic_model, g, user_id)

    def recommend(self, algorithm: Algorithm, user_id: str, k: Optional[int] = None) -> RecommendationList:
        started = time.perf_counter()
        scores = self.item_scores(algorithm, user_id)
        recommendations = rank_items(self.graph, user_id, scores, algorithm, k or self.config.k)
        self.timings[user_id] = time.perf_counter() - started
        return recommendations

    def _safe_recommend(self, algorithm: Algorithm, user_id: str, k: int) -> RecommendationList:
        try:
            return self.recommend(algorithm, user_id, k)
        except MissingArtifactError:
            raise
        except Exception as e:
            logger.error(f"{algorithm.value} recommendation failed for user {user_id}: {e}")
            return RecommendationList(query_user=user_id, items=[], algorithm=algorithm, k=k)

    def recommend_batch(
        self,
        algorithm: Algorithm,
        user_ids: Sequence[str],
        k: Optional[int] = None
    ) -> List[RecommendationList]:
        """Fan users out to a worker pool; results keep the input order."""
        k = k or self.config.k
        self.timings = {}
        with ThreadPoolExecutor(max_workers=self.config.workers) as pool:
            lists = list(pool.map(lambda user_id: self._safe_recommend(algorithm, user_id, k), user_ids))
        logger.info(f"{algorithm.value}: recommended for {len(lists)} users")
        return lists

    def rank_keys(self, algorithm: Algorithm, user_id: str, item_ids: Sequence[str]) -> np.ndarray:
        """Smaller key ranks first; items unknown to the graph or unscored get +inf."""
        scores = self.item_scores(algorithm, user_id)
        keys = np.full(len(item_ids), np.inf)
        for position, item_id in enumerate(item_ids):
            if self.graph.has_item(item_id):
                value = scores[self.graph.item_index(item_id) - self.graph.n_users]
                if not np.isnan(value):
                    keys[position] = value if algorithm.ascending else -value
        return keys

    def scorer(self, algorithm: Algorithm) -> Scorer:
        return lambda user_id, item_ids: self.rank_keys(algorithm, user_id, item_ids)
