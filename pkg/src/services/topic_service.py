"""Rating-count LDA trained by collapsed Gibbs sampling.

Each rating ``(u, i, w)`` is expanded into ``w`` replicas of item ``i`` in
user ``u``'s document. Count arrays:

* ``n_item_topic[i, z]``  replicas of item i assigned to topic z
* ``n_user_topic[u, z]``  replicas in user u's document assigned to topic z
* ``n_topic[z]``          replicas assigned to topic z
* ``n_user[u]``           replicas in user u's document (constant)
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numba import njit

from ..config import settings
from ..exceptions import ConfigError, DataError, UnknownNodeError
from .graph_service import BipartiteGraph

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "topic-model/1"

SeedLike = Union[int, np.random.Generator, None]


@njit
def _sweep_kernel(users, items, assignments, n_item_topic, n_user_topic, n_topic, n_user,
                  alpha, beta, n_items, uniforms):
    topics = n_topic.shape[0]
    cumulative = np.empty(topics)
    for r in range(assignments.shape[0]):
        u = users[r]
        i = items[r]
        old = assignments[r]
        n_item_topic[i, old] -= 1
        n_user_topic[u, old] -= 1
        n_topic[old] -= 1

        user_norm = n_user[u] - 1 + topics * alpha
        total = 0.0
        for z in range(topics):
            total += ((n_item_topic[i, z] + beta) / (n_topic[z] + n_items * beta)
                      * (n_user_topic[u, z] + alpha) / user_norm)
            cumulative[z] = total

        target = uniforms[r] * total
        new = 0
        while new < topics - 1 and cumulative[new] <= target:
            new += 1

        assignments[r] = new
        n_item_topic[i, new] += 1
        n_user_topic[u, new] += 1
        n_topic[new] += 1


class TopicModel:

    def __init__(
        self,
        user_ids: Sequence[str],
        item_ids: Sequence[str],
        topics: int,
        alpha: float,
        beta: float,
        replica_user: np.ndarray,
        replica_item: np.ndarray,
        assignments: np.ndarray
    ) -> None:
        if alpha <= 0 or beta <= 0:
            raise ConfigError(f"Dirichlet hyperparameters must be positive (alpha={alpha}, beta={beta})")
        self.user_ids: List[str] = list(user_ids)
        self.item_ids: List[str] = list(item_ids)
        self.topics = int(topics)
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.replica_user = np.asarray(replica_user, dtype=np.int64)
        self.replica_item = np.asarray(replica_item, dtype=np.int64)
        self.assignments = np.asarray(assignments, dtype=np.int64)
        self.sweeps_completed = 0

        self._user_row = {user_id: row for row, user_id in enumerate(self.user_ids)}
        self._item_column = {item_id: col for col, item_id in enumerate(self.item_ids)}
        self.n_item_topic, self.n_user_topic, self.n_topic, self.n_user = self.recount()
        self._estimate: Optional[Tuple[np.ndarray, np.ndarray]] = None

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @property
    def n_replicas(self) -> int:
        return self.assignments.size

    def recount(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Count arrays rebuilt from scratch out of the current assignments."""
        k = self.topics
        n_item_topic = np.bincount(
            self.replica_item * k + self.assignments, minlength=self.n_items * k
        ).reshape(self.n_items, k).astype(np.int64)
        n_user_topic = np.bincount(
            self.replica_user * k + self.assignments, minlength=self.n_users * k
        ).reshape(self.n_users, k).astype(np.int64)
        n_topic = np.bincount(self.assignments, minlength=k).astype(np.int64)
        n_user = np.bincount(self.replica_user, minlength=self.n_users).astype(np.int64)
        return n_item_topic, n_user_topic, n_topic, n_user

    def has_user(self, user_id: str) -> bool:
        return user_id in self._user_row

    def has_item(self, item_id: str) -> bool:
        return item_id in self._item_column

    def user_row(self, user_id: str) -> int:
        try:
            return self._user_row[user_id]
        except KeyError:
            raise UnknownNodeError(f"Topic model does not cover user {user_id}") from None

    def item_column(self, item_id: str) -> int:
        try:
            return self._item_column[item_id]
        except KeyError:
            raise UnknownNodeError(f"Topic model does not cover item {item_id}") from None

    @property
    def theta(self) -> np.ndarray:
        return estimate(self)[0]

    @property
    def phi(self) -> np.ndarray:
        return estimate(self)[1]

    def invalidate(self) -> None:
        self._estimate = None

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with path.open("wb") as handle:
            np.savez_compressed(
                handle,
                version=np.array(CHECKPOINT_VERSION),
                topics=np.array(self.topics),
                alpha=np.array(self.alpha),
                beta=np.array(self.beta),
                sweeps_completed=np.array(self.sweeps_completed),
                user_ids=np.array(self.user_ids, dtype=str),
                item_ids=np.array(self.item_ids, dtype=str),
                replica_user=self.replica_user,
                replica_item=self.replica_item,
                assignments=self.assignments,
                n_item_topic=self.n_item_topic,
                n_user_topic=self.n_user_topic,
                n_topic=self.n_topic,
                n_user=self.n_user,
            )
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "TopicModel":
        with np.load(path, allow_pickle=False) as data:
            version = str(data["version"])
            if version != CHECKPOINT_VERSION:
                raise DataError(f"{path}: unsupported checkpoint version {version!r}")
            model = cls(
                user_ids=data["user_ids"].tolist(),
                item_ids=data["item_ids"].tolist(),
                topics=int(data["topics"]),
                alpha=float(data["alpha"]),
                beta=float(data["beta"]),
                replica_user=data["replica_user"],
                replica_item=data["replica_item"],
                assignments=data["assignments"],
            )
            model.sweeps_completed = int(data["sweeps_completed"])
            stored = (data["n_item_topic"], data["n_user_topic"], data["n_topic"], data["n_user"])
        for name, fresh, saved in zip(("N1", "N2", "N3", "N4"), model.recount(), stored):
            if not np.array_equal(fresh, saved):
                raise DataError(f"{path}: stored {name} counts disagree with the assignments")
        return model


def _expand_replicas(g: BipartiteGraph) -> Tuple[np.ndarray, np.ndarray]:
    user_item = g.adjacency[:g.n_users, g.n_users:].tocsr()
    user_item.sort_indices()
    weights = np.rint(user_item.data).astype(np.int64)
    edge_user = np.repeat(np.arange(g.n_users), np.diff(user_item.indptr))
    return np.repeat(edge_user, weights), np.repeat(user_item.indices.astype(np.int64), weights)


def init_assignments(
    g: BipartiteGraph,
    K: int,
    seed: SeedLike = None,
    alpha: Optional[float] = None,
    beta: float = settings.DEFAULT_BETA
) -> TopicModel:
    if K < 2:
        raise ConfigError(f"Topic count must be at least 2, got {K}")
    rng = np.random.default_rng(seed)
    replica_user, replica_item = _expand_replicas(g)
    assignments = rng.integers(0, K, size=replica_user.size, dtype=np.int64)
    return TopicModel(
        user_ids=g.user_ids,
        item_ids=g.item_ids,
        topics=K,
        alpha=alpha if alpha is not None else 50.0 / K,
        beta=beta,
        replica_user=replica_user,
        replica_item=replica_item,
        assignments=assignments,
    )


def gibbs_sweep(model: TopicModel, seed: SeedLike = None) -> TopicModel:
    """Resample every replica once, in (user, item, replica) order."""
    rng = np.random.default_rng(seed)
    uniforms = rng.random(model.n_replicas)
    _sweep_kernel(
        model.replica_user, model.replica_item, model.assignments,
        model.n_item_topic, model.n_user_topic, model.n_topic, model.n_user,
        model.alpha, model.beta, model.n_items, uniforms
    )
    model.sweeps_completed += 1
    model.invalidate()
    return model


def estimate(model: TopicModel) -> Tuple[np.ndarray, np.ndarray]:
    """Return (theta, phi): theta is users x topics, phi is topics x items."""
    if model._estimate is None:
        if model.sweeps_completed == 0:
            logger.warning("Estimating topic distributions before any Gibbs sweep")
        phi = (model.n_item_topic.T + model.beta) / (model.n_topic[:, None] + model.n_items * model.beta)
        theta = (model.n_user_topic + model.alpha) / (model.n_user[:, None] + model.topics * model.alpha)
        phi /= phi.sum(axis=1, keepdims=True)
        theta /= theta.sum(axis=1, keepdims=True)
        model._estimate = (theta, phi)
    return model._estimate


def train(
    g: BipartiteGraph,
    K: int = settings.DEFAULT_TOPICS,
    sweeps: int = settings.DEFAULT_SWEEPS,
    alpha: Optional[float] = None,
    beta: float = settings.DEFAULT_BETA,
    seed: SeedLike = None,
    log_every: int = 50
) -> TopicModel:
    if sweeps < 1:
        raise ConfigError(f"Need at least one Gibbs sweep, got {sweeps}")
    rng = np.random.default_rng(seed)
    model = init_assignments(g, K, rng, alpha=alpha, beta=beta)
    logger.info(
        f"Training LDA: {model.n_replicas} replicas, {model.n_users} users, {model.n_items} items, "
        f"K={K}, alpha={model.alpha:.4g}, beta={model.beta:.4g}, sweeps={sweeps}"
    )
    for sweep in range(1, sweeps + 1):
        gibbs_sweep(model, rng)
        if log_every and sweep % log_every == 0:
            logger.info(f"Gibbs sweep {sweep}/{sweeps}")
    estimate(model)
    return model


def top_items(model: TopicModel, topic: int, n: int = 5) -> List[Tuple[str, float]]:
    row = model.phi[topic]
    order = np.lexsort((np.arange(row.size), -row))[:n]
    return [(model.item_ids[col], float(row[col])) for col in order]


def log_topics(model: TopicModel, n_topics: int = 2, n_items: int = 5) -> None:
    for topic in range(min(n_topics, model.topics)):
        listing = ", ".join(item_id for item_id, _ in top_items(model, topic, n_items))
        logger.info(f"Topic {topic}: {listing}")


def theta_to_frame(model: TopicModel) -> pd.DataFrame:
    theta = model.theta
    return pd.DataFrame({
        "user_id": np.repeat(model.user_ids, model.topics),
        "topic": np.tile(np.arange(model.topics), model.n_users),
        "probability": theta.ravel(),
    })


def phi_to_frame(model: TopicModel) -> pd.DataFrame:
    phi = model.phi
    return pd.DataFrame({
        "topic": np.repeat(np.arange(model.topics), model.n_items),
        "item_id": np.tile(model.item_ids, model.topics),
        "probability": phi.ravel(),
    })
