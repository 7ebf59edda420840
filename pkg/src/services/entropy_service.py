import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.stats import entropy

from ..exceptions import DataError, DistributionError, UnknownNodeError
from ..models.domain_models import EntropyKind, EntropyTable
from .graph_service import BipartiteGraph

logger = logging.getLogger(__name__)

NORMALIZATION_TOLERANCE = 1e-9


def item_entropy(g: BipartiteGraph, u: int) -> float:
    """Entropy of a user's rating-weighted distribution over rated items (natural log)."""
    if not g.is_user(u):
        raise UnknownNodeError(f"Node {u} is not a user")
    start, end = g.adjacency.indptr[u], g.adjacency.indptr[u + 1]
    weights = g.adjacency.data[start:end]
    if weights.size == 0 or weights.sum() <= 0:
        raise DataError(f"User {g.user_ids[u]} has no ratings")
    return float(entropy(weights))


def topic_entropy(theta_u: Sequence[float], topics: int) -> float:
    """Entropy of a user's topic distribution; zero components contribute 0."""
    theta = np.asarray(theta_u, dtype=np.float64)
    if theta.shape != (topics,):
        raise DistributionError(f"Expected {topics} topic weights, got shape {theta.shape}")
    if (theta < 0).any():
        raise DistributionError("Topic distribution has negative components")
    if abs(theta.sum() - 1.0) > NORMALIZATION_TOLERANCE:
        raise DistributionError(f"Topic distribution sums to {theta.sum():.12f}, not 1")
    return float(entropy(theta))


def build_entropy_table(
    g: BipartiteGraph,
    mode: EntropyKind = EntropyKind.ITEM_BASED,
    model=None
) -> EntropyTable:
    """One entry per user node of ``g``.

    ``model`` is a trained ``TopicModel``; it is required for topic-based
    tables and must cover every user of ``g``.
    """
    if mode == EntropyKind.ITEM_BASED:
        entries = {user_id: item_entropy(g, node) for node, user_id in enumerate(g.user_ids)}
    else:
        if model is None:
            raise DataError("Topic-based entropy requires a trained topic model")
        theta = model.theta
        entries = {}
        for user_id in g.user_ids:
            if not model.has_user(user_id):
                raise DataError(f"Topic model does not cover user {user_id}")
            entries[user_id] = topic_entropy(theta[model.user_row(user_id)], model.topics)

    table = EntropyTable(kind=mode, entries=entries)
    logger.info(f"Built {mode.value} entropy table for {len(entries)} users, mean {table.mean():.4f}")
    return table


def default_cost_constant(g: BipartiteGraph) -> float:
    """Mean item-based user entropy over the graph, the default user -> item cost."""
    value = build_entropy_table(g, EntropyKind.ITEM_BASED).mean()
    if value <= 0:
        # every user rated a single item; any positive constant keeps the ranking
        return 1.0
    return value


def entropy_table_to_frame(table: EntropyTable) -> pd.DataFrame:
    return pd.DataFrame({
        "user_id": list(table.entries.keys()),
        "entropy": list(table.entries.values()),
        "kind": table.kind.value,
    })


def save_entropy_table(table: EntropyTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    entropy_table_to_frame(table).to_csv(path, index=False, lineterminator="\n", float_format="%.17g")
    return path


def load_entropy_table(path: Union[str, Path], kind: Optional[EntropyKind] = None) -> EntropyTable:
    frame = pd.read_csv(path, dtype={"user_id": str, "kind": str})
    kinds = frame["kind"].unique()
    if len(kinds) != 1:
        raise DataError(f"{path}: expected a single entropy kind, found {list(kinds)}")
    table_kind = EntropyKind(kinds[0])
    if kind is not None and kind != table_kind:
        raise DataError(f"{path}: expected {kind.value} entropies, found {table_kind.value}")
    return EntropyTable(kind=table_kind, entries=dict(zip(frame["user_id"], frame["entropy"].astype(float))))
