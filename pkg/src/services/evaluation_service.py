import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Collection, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from ..config import settings
from ..exceptions import DataError, InsufficientDataError
from ..models.domain_models import (
    Algorithm, CategoryPath, LongTailSplit, RecallCase, RecallProtocol, RecommendationList
)
from .graph_service import natural_key
from .recommender_service import Scorer

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["metric", "algorithm", "N", "value"]

# True when a larger value is better
METRIC_DIRECTION = {
    "recall": True,
    "popularity": False,
    "diversity": True,
    "similarity": True,
}


def item_popularity(records: pd.DataFrame) -> Dict[str, int]:
    return records.groupby("item_id", sort=False).size().astype(int).to_dict()


def longtail_split(records: pd.DataFrame, r_percent: float = settings.DEFAULT_R_PERCENT) -> LongTailSplit:
    """Least popular items that together first reach ``r_percent`` of all ratings."""
    if records.empty:
        raise DataError("Long tail split needs at least one rating")
    if not 0 < r_percent <= 1:
        raise DataError(f"r_percent must be in (0, 1], got {r_percent}")

    popularity = item_popularity(records)
    ordered = sorted(popularity, key=lambda item_id: (popularity[item_id], natural_key(item_id)))
    cumulative = np.cumsum([popularity[item_id] for item_id in ordered])
    threshold = r_percent * cumulative[-1]
    boundary = int(np.searchsorted(cumulative, threshold - 1e-9, side="left"))

    split = LongTailSplit(
        r_percent=r_percent,
        tail_items=frozenset(ordered[:boundary + 1]),
        head_items=frozenset(ordered[boundary + 1:]),
        popularity=popularity,
    )
    logger.info(
        f"Long tail at r={r_percent:.0%}: {len(split.tail_items)}/{len(ordered)} items "
        f"({split.tail_item_share:.1%}) hold {split.tail_rating_share:.1%} of ratings"
    )
    return split


def make_recall_protocol(
    records: pd.DataFrame,
    split: LongTailSplit,
    n_cases: int = settings.DEFAULT_N_CASES,
    n_decoys: int = settings.DEFAULT_N_DECOYS,
    seed: int = settings.DEFAULT_SEED
) -> Tuple[pd.DataFrame, RecallProtocol]:
    """Hold out five star long tail ratings and draw unrated decoys for each.

    Returns the training ratings (held-out rows removed) and the protocol.
    """
    eligible = records[(records["rating"] == 5) & records["item_id"].isin(split.tail_items)]
    if len(eligible) < n_cases:
        raise InsufficientDataError(
            f"Need {n_cases} five star long tail ratings, found {len(eligible)} "
            f"(short by {n_cases - len(eligible)})"
        )

    case_stream, decoy_stream = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    chosen = np.sort(case_stream.choice(len(eligible), size=n_cases, replace=False))
    held_out = eligible.iloc[chosen]
    training = records.drop(index=held_out.index).reset_index(drop=True)

    universe = np.array(sorted(records["item_id"].unique(), key=natural_key))
    position = {item_id: idx for idx, item_id in enumerate(universe)}
    rated_by_user = records.groupby("user_id", sort=False)["item_id"].agg(list).to_dict()

    cases: List[RecallCase] = []
    for user_id, item_id in zip(held_out["user_id"], held_out["item_id"]):
        unrated = np.ones(universe.size, dtype=bool)
        unrated[[position[i] for i in rated_by_user[user_id]]] = False
        pool = np.flatnonzero(unrated)
        if pool.size < n_decoys:
            raise InsufficientDataError(
                f"User {user_id} has only {pool.size} unrated items, {n_decoys} decoys requested"
            )
        decoys = decoy_stream.choice(pool, size=n_decoys, replace=False)
        cases.append(RecallCase(user_id=user_id, item_id=item_id, decoys=universe[decoys].tolist()))

    logger.info(f"Recall protocol: {len(cases)} cases x {n_decoys} decoys, {len(training)} training ratings")
    return training, RecallProtocol(seed=seed, cases=cases)


def _held_out_rank(case: RecallCase, scorer: Scorer) -> float:
    candidates = [case.item_id] + list(case.decoys)
    keys = np.asarray(scorer(case.user_id, candidates), dtype=np.float64)
    target, decoy_keys = keys[0], keys[1:]
    ahead = int(np.count_nonzero(decoy_keys < target))
    tied = np.flatnonzero(decoy_keys == target)
    if tied.size:
        target_id = natural_key(case.item_id)
        ahead += sum(1 for t in tied if natural_key(candidates[t + 1]) < target_id)
    return float(ahead)


def recall_at_n(
    protocol: RecallProtocol,
    scorer: Scorer,
    n_values: Sequence[int] = tuple(settings.RECALL_CUTOFFS),
    workers: int = 1
) -> Dict[int, float]:
    """Share of cases whose held-out item ranks within the top N of its candidates.

    The scorer returns one key per candidate, smaller first; ties go to the
    smaller item id. A failing case counts as a miss.
    """
    def rank(case: RecallCase) -> float:
        try:
            return _held_out_rank(case, scorer)
        except Exception as e:
            logger.error(f"Scoring failed for user {case.user_id}, item {case.item_id}: {e}")
            return np.inf

    if not protocol.cases:
        raise DataError("Recall protocol has no test cases")
    with ThreadPoolExecutor(max_workers=workers) as pool:
        ranks = np.array(list(pool.map(rank, protocol.cases)))
    return {int(n): float(np.mean(ranks < n)) for n in n_values}


def popularity_at_n(
    lists: Sequence[RecommendationList],
    records: pd.DataFrame,
    n_values: Sequence[int] = tuple(settings.POPULARITY_CUTOFFS)
) -> Dict[int, float]:
    """Mean training rating count of each user's top N, averaged over users."""
    popularity = item_popularity(records)
    result: Dict[int, float] = {}
    for n in n_values:
        per_user = [
            np.mean([popularity.get(item_id, 0) for item_id in rec.item_ids[:n]])
            for rec in lists if rec.items
        ]
        result[int(n)] = float(np.mean(per_user)) if per_user else 0.0
    return result


def diversity(lists: Sequence[RecommendationList], item_universe: Union[int, Collection[str]]) -> float:
    """Distinct recommended items over the size of the item universe."""
    if not lists:
        raise DataError("Diversity needs at least one recommendation list")
    size = item_universe if isinstance(item_universe, int) else len(set(item_universe))
    if size <= 0:
        raise DataError("Item universe must not be empty")
    recommended = set()
    for rec in lists:
        recommended.update(rec.item_ids)
    return len(recommended) / size


def category_similarity(c1: CategoryPath, c2: CategoryPath) -> float:
    """Longest common prefix over the longer path; the root catalog segment is not counted."""
    shared = 0
    for left, right in zip(c1.segments, c2.segments):
        if left != right:
            break
        shared += 1
    longest = max(c1.depth, c2.depth)
    if longest == 0:
        return 1.0 if c1.segments == c2.segments else 0.0
    return max(shared - 1, 0) / longest


def user_item_similarity(
    user_id: str,
    item_id: str,
    ontology: Mapping[str, CategoryPath],
    favorites: Collection[str]
) -> float:
    """Best category match between an item and any of the user's rated items."""
    if item_id not in ontology:
        raise DataError(f"Item {item_id} has no category path")
    mapped = [ontology[j] for j in favorites if j in ontology]
    skipped = len(favorites) - len(mapped)
    if skipped:
        logger.warning(f"User {user_id}: {skipped} rated items have no category path")
    if not mapped:
        raise DataError(f"User {user_id} has no rated items with a category path")
    target = ontology[item_id]
    return max(category_similarity(target, path) for path in mapped)


def mean_similarity(
    lists: Sequence[RecommendationList],
    ontology: Mapping[str, CategoryPath],
    favorites: Mapping[str, Collection[str]]
) -> float:
    """Per-user mean similarity of recommended items, averaged over users."""
    per_user = []
    for rec in lists:
        liked = favorites.get(rec.query_user, ())
        if not any(j in ontology for j in liked):
            continue
        scores = [
            user_item_similarity(rec.query_user, item_id, ontology, liked)
            for item_id in rec.item_ids if item_id in ontology
        ]
        if scores:
            per_user.append(np.mean(scores))
    if not per_user:
        logger.warning("No recommendation could be matched against the ontology")
        return float("nan")
    return float(np.mean(per_user))


class EvaluationService:

    def __init__(
        self,
        training: pd.DataFrame,
        item_universe: Union[int, Collection[str]],
        protocol: Optional[RecallProtocol] = None,
        ontology: Optional[Mapping[str, CategoryPath]] = None,
        workers: int = 1
    ) -> None:
        self.training = training
        self.item_universe = item_universe
        self.protocol = protocol
        self.ontology = ontology
        self.workers = workers
        self._favorites = training.groupby("user_id", sort=False)["item_id"].agg(list).to_dict()
        logger.info("EvaluationService initialized")

    def evaluate_lists(self, algorithm: Algorithm, lists: Sequence[RecommendationList]) -> List[Dict]:
        rows = [
            self._row("popularity", algorithm, n, value)
            for n, value in popularity_at_n(lists, self.training).items()
        ]
        k = max((rec.k for rec in lists), default=0)
        rows.append(self._row("diversity", algorithm, k, diversity(lists, self.item_universe)))
        if self.ontology is not None:
            rows.append(self._row("similarity", algorithm, k, mean_similarity(lists, self.ontology, self._favorites)))
        return rows

    def evaluate_recall(self, algorithm: Algorithm, scorer: Scorer) -> List[Dict]:
        if self.protocol is None:
            return []
        recall = recall_at_n(self.protocol, scorer, settings.RECALL_CUTOFFS, self.workers)
        logger.info(f"{algorithm.value}: Recall@10={recall.get(10, float('nan')):.4f}")
        return [self._row("recall", algorithm, n, value) for n, value in recall.items()]

    def _row(self, metric: str, algorithm: Algorithm, n: int, value: float) -> Dict:
        return {"metric": metric, "algorithm": algorithm.value, "N": int(n), "value": float(value)}


def build_report(rows: Sequence[Dict]) -> pd.DataFrame:
    report = pd.DataFrame(list(rows), columns=METRIC_COLUMNS)
    return report.sort_values(["metric", "N", "algorithm"], kind="mergesort").reset_index(drop=True)


def summary_table(report: pd.DataFrame) -> str:
    """Algorithms ranked best-first per metric at each metric's largest N."""
    blocks = []
    for metric, rows in report.groupby("metric", sort=True):
        at_n = rows[rows["N"] == rows["N"].max()]
        ranked = at_n.sort_values(
            ["value", "algorithm"], ascending=[not METRIC_DIRECTION.get(metric, True), True], kind="mergesort"
        )
        lines = [f"{metric}@{int(at_n['N'].iloc[0])}"]
        lines += [
            f"  {rank}. {row.algorithm:<5} {row.value:.4f}"
            for rank, row in enumerate(ranked.itertuples(index=False), start=1)
        ]
        blocks.append("\n".join(lines))
    return "\n".join(blocks)
