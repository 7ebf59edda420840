"""Edge-weighted undirected bipartite user-item graph.

Nodes are dense integers: users occupy ``[0, n_users)`` and items occupy
``[n_users, n_users + n_items)``. Both blocks are ordered by ascending
external id, so comparing internal item indices is the same as comparing
item ids.
"""

import logging
from typing import Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from ..exceptions import (
    DataError, DisconnectedGraphError, DuplicateRatingError, EmptyGraphError,
    IsolatedNodeError, UnknownNodeError
)
from ..models.domain_models import DuplicatePolicy, RatingRecord

logger = logging.getLogger(__name__)

RATING_COLUMNS = ["user_id", "item_id", "rating"]


def natural_key(identifier: str) -> Tuple[int, int, str]:
    """Numeric ids sort numerically and before any non-numeric id."""
    if identifier.isdigit():
        return 0, int(identifier), ""
    return 1, 0, identifier


class BipartiteGraph:

    def __init__(
        self,
        user_ids: Sequence[str],
        item_ids: Sequence[str],
        adjacency: sp.csr_matrix,
        parent_nodes: Optional[np.ndarray] = None
    ) -> None:
        self.user_ids: List[str] = list(user_ids)
        self.item_ids: List[str] = list(item_ids)
        self.adjacency = sp.csr_matrix(adjacency, dtype=np.float64)
        self.adjacency.sort_indices()
        self.degrees = np.asarray(self.adjacency.sum(axis=1)).ravel()
        self.parent_nodes = parent_nodes

        self._user_index = {user_id: idx for idx, user_id in enumerate(self.user_ids)}
        offset = len(self.user_ids)
        self._item_index = {item_id: offset + idx for idx, item_id in enumerate(self.item_ids)}

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_items

    @property
    def n_edges(self) -> int:
        return self.adjacency.nnz // 2

    @property
    def density(self) -> float:
        cells = self.n_users * self.n_items
        return self.n_edges / cells if cells else 0.0

    @property
    def user_nodes(self) -> np.ndarray:
        return np.arange(0, self.n_users)

    @property
    def item_nodes(self) -> np.ndarray:
        return np.arange(self.n_users, self.n_nodes)

    def is_user(self, node: int) -> bool:
        return 0 <= node < self.n_users

    def is_item(self, node: int) -> bool:
        return self.n_users <= node < self.n_nodes

    def user_index(self, user_id: str) -> int:
        try:
            return self._user_index[user_id]
        except KeyError:
            raise UnknownNodeError(f"Unknown user: {user_id}") from None

    def item_index(self, item_id: str) -> int:
        try:
            return self._item_index[item_id]
        except KeyError:
            raise UnknownNodeError(f"Unknown item: {item_id}") from None

    def has_user(self, user_id: str) -> bool:
        return user_id in self._user_index

    def has_item(self, item_id: str) -> bool:
        return item_id in self._item_index

    def external_id(self, node: int) -> str:
        if self.is_user(node):
            return self.user_ids[node]
        if self.is_item(node):
            return self.item_ids[node - self.n_users]
        raise UnknownNodeError(f"Node index {node} out of range")

    def node_label(self, node: int) -> str:
        kind = "user" if self.is_user(node) else "item"
        return f"{kind}:{self.external_id(node)}"

    def neighbors(self, node: int) -> np.ndarray:
        start, end = self.adjacency.indptr[node], self.adjacency.indptr[node + 1]
        return self.adjacency.indices[start:end]

    def weight(self, i: int, j: int) -> float:
        return float(self.adjacency[i, j])

    def rated_items(self, user_node: int) -> np.ndarray:
        return self.neighbors(user_node)

    def item_rating_counts(self) -> np.ndarray:
        """Number of ratings per item, in item order."""
        return np.diff(self.adjacency.indptr)[self.n_users:]

    def edges(self) -> Iterator[Tuple[str, str, float]]:
        upper = sp.triu(self.adjacency, format="coo")
        order = np.lexsort((upper.col, upper.row))
        for row, col, weight in zip(upper.row[order], upper.col[order], upper.data[order]):
            yield self.external_id(row), self.external_id(col), float(weight)

    def to_frame(self) -> pd.DataFrame:
        rows = list(self.edges())
        frame = pd.DataFrame(rows, columns=RATING_COLUMNS)
        frame["rating"] = frame["rating"].astype(np.int64)
        return frame

    def subgraph(self, keep: np.ndarray) -> "BipartiteGraph":
        """Induced subgraph on a boolean node mask."""
        nodes = np.flatnonzero(keep)
        adjacency = self.adjacency[nodes][:, nodes]
        user_ids = [self.user_ids[n] for n in nodes if n < self.n_users]
        item_ids = [self.item_ids[n - self.n_users] for n in nodes if n >= self.n_users]
        return BipartiteGraph(user_ids, item_ids, adjacency, parent_nodes=nodes)

    def __repr__(self) -> str:
        return (
            f"BipartiteGraph(users={self.n_users}, items={self.n_items}, "
            f"edges={self.n_edges})"
        )


def records_to_frame(records: Iterable[RatingRecord]) -> pd.DataFrame:
    rows = [(r.user_id, r.item_id, r.rating) for r in records]
    return pd.DataFrame(rows, columns=RATING_COLUMNS)


def deduplicate(frame: pd.DataFrame, policy: DuplicatePolicy = DuplicatePolicy.KEEP_LAST) -> pd.DataFrame:
    keys = ["user_id", "item_id"]
    if policy == DuplicatePolicy.REJECT:
        duplicated = frame[frame.duplicated(keys, keep=False)]
        if not duplicated.empty:
            conflicts = duplicated.groupby(keys, sort=False)["rating"].nunique()
            conflicts = conflicts[conflicts > 1]
            if not conflicts.empty:
                user_id, item_id = conflicts.index[0]
                mask = (duplicated["user_id"] == user_id) & (duplicated["item_id"] == item_id)
                raise DuplicateRatingError(user_id, item_id, duplicated.loc[mask, "rating"].tolist())
    deduped = frame.drop_duplicates(keys, keep="last")
    dropped = len(frame) - len(deduped)
    if dropped:
        logger.info(f"Dropped {dropped} duplicate ratings ({policy.value})")
    return deduped.reset_index(drop=True)


def build_graph_from_frame(
    frame: pd.DataFrame,
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.KEEP_LAST
) -> BipartiteGraph:
    if frame.empty:
        raise DataError("Cannot build a graph from an empty rating set")
    ratings = pd.to_numeric(frame["rating"], errors="coerce")
    bad = ratings.isna() | (ratings < 1) | (ratings > 5) | (ratings != ratings.round())
    if bad.any():
        row = frame[bad].iloc[0]
        raise DataError(
            f"Rating out of range for user={row['user_id']} item={row['item_id']}: {row['rating']}"
        )

    frame = frame.assign(
        user_id=frame["user_id"].astype(str),
        item_id=frame["item_id"].astype(str),
        rating=ratings.astype(np.int64)
    )
    frame = deduplicate(frame, duplicate_policy)

    user_ids = sorted(frame["user_id"].unique(), key=natural_key)
    item_ids = sorted(frame["item_id"].unique(), key=natural_key)
    n_users = len(user_ids)
    n_nodes = n_users + len(item_ids)

    users = pd.Categorical(frame["user_id"], categories=user_ids).codes.astype(np.int64)
    items = pd.Categorical(frame["item_id"], categories=item_ids).codes.astype(np.int64) + n_users
    weights = frame["rating"].to_numpy(dtype=np.float64)

    adjacency = sp.csr_matrix(
        (np.concatenate([weights, weights]),
         (np.concatenate([users, items]), np.concatenate([items, users]))),
        shape=(n_nodes, n_nodes)
    )
    graph = BipartiteGraph(user_ids, item_ids, adjacency)
    logger.info(f"Built {graph!r}, density {graph.density:.4%}")
    return graph


def build_graph(
    records: Sequence[RatingRecord],
    duplicate_policy: DuplicatePolicy = DuplicatePolicy.KEEP_LAST
) -> BipartiteGraph:
    if not records:
        raise DataError("Cannot build a graph from an empty rating set")
    return build_graph_from_frame(records_to_frame(records), duplicate_policy)


def transition_prob(g: BipartiteGraph, i: int, j: int) -> float:
    if g.degrees[i] <= 0:
        raise IsolatedNodeError(g.node_label(i))
    return g.weight(i, j) / g.degrees[i]


def transition_matrix(g: BipartiteGraph) -> sp.csr_matrix:
    """Row-stochastic P = D^-1 A."""
    if g.n_nodes and (g.degrees <= 0).any():
        raise IsolatedNodeError(g.node_label(int(np.flatnonzero(g.degrees <= 0)[0])))
    return sp.csr_matrix(sp.diags(1.0 / g.degrees) @ g.adjacency)


def component_labels(g: BipartiteGraph) -> Tuple[int, np.ndarray]:
    return connected_components(g.adjacency, directed=False)


def stationary_distribution(g: BipartiteGraph) -> np.ndarray:
    """pi_i = d_i / sum_j d_j, indexed by node."""
    if g.n_nodes == 0:
        raise EmptyGraphError("Graph has no nodes")
    n_components, labels = component_labels(g)
    if n_components > 1:
        sizes = sorted(np.bincount(labels).tolist(), reverse=True)
        raise DisconnectedGraphError(sizes)
    return g.degrees / g.degrees.sum()


def largest_connected_component(g: BipartiteGraph) -> BipartiteGraph:
    if g.n_nodes == 0:
        raise EmptyGraphError("Graph has no nodes")
    n_components, labels = component_labels(g)
    if n_components == 1:
        return g

    sizes = np.bincount(labels)
    smallest_node = np.full(n_components, g.n_nodes, dtype=np.int64)
    np.minimum.at(smallest_node, labels, np.arange(g.n_nodes))
    candidates = np.flatnonzero(sizes == sizes.max())
    best = candidates[np.argmin(smallest_node[candidates])]

    component = g.subgraph(labels == best)
    logger.info(
        f"Kept largest of {n_components} components: {component.n_nodes}/{g.n_nodes} nodes"
    )
    return component


def _unvisited_neighbors(adjacency: sp.csr_matrix, frontier: np.ndarray, visited: np.ndarray) -> np.ndarray:
    if frontier.size == 0:
        return frontier
    reached = np.unique(adjacency[frontier].indices)
    return reached[~visited[reached]]


def bfs_candidate_subgraph(
    g: BipartiteGraph,
    seed_items: Iterable[int],
    mu: Optional[int]
) -> BipartiteGraph:
    """Grow item -> user -> item layers from the seed items.

    Each item layer is completed before the item count is compared with
    ``mu``, so the result may overshoot it. The seeds alone never count as a
    completed layer: at least one expansion runs. ``mu=None`` expands to the
    whole component.
    """
    seeds = np.unique(np.fromiter(seed_items, dtype=np.int64))
    if seeds.size == 0:
        raise DataError("Candidate search needs at least one seed item")
    not_items = [int(s) for s in seeds if not g.is_item(int(s))]
    if not_items:
        raise UnknownNodeError(f"Seed nodes are not items of the graph: {not_items[:5]}")

    visited = np.zeros(g.n_nodes, dtype=bool)
    visited[seeds] = True
    frontier = seeds
    item_count = seeds.size
    expanded = False

    while frontier.size and (mu is None or item_count <= mu or not expanded):
        expanded = True
        users = _unvisited_neighbors(g.adjacency, frontier, visited)
        visited[users] = True
        items = _unvisited_neighbors(g.adjacency, users, visited)
        visited[items] = True
        item_count += items.size
        frontier = items

    return g.subgraph(visited)
