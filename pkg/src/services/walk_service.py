"""Hitting time, absorbing time and absorbing cost on a bipartite graph.

Two solvers share one cost vector ``b`` and one transient operator ``Q``
(the transition matrix with absorbing rows zeroed):

* exact: solve ``(I - Q_TT) x_T = b_T`` over the transient nodes T that can
  reach the absorbing set (dense LU up to ``DENSE_SOLVER_LIMIT`` nodes,
  sparse LU beyond);
* truncated: ``x_0 = 0``, ``x_{t+1} = b + Q x_t`` for ``tau`` synchronous
  sweeps.

Nodes that cannot reach the absorbing set get ``+inf``.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg

from ..config import settings
from ..exceptions import MissingEntropyError, UnknownNodeError
from ..models.domain_models import AbsorbingSpec, CostModel, EntropyTable, WalkMethod, WalkResult
from .graph_service import BipartiteGraph, component_labels, transition_matrix

logger = logging.getLogger(__name__)


def _absorbing_array(g: BipartiteGraph, spec: AbsorbingSpec) -> np.ndarray:
    nodes = np.fromiter(spec.absorbing_nodes, dtype=np.int64)
    outside = nodes[(nodes < 0) | (nodes >= g.n_nodes)]
    if outside.size:
        raise UnknownNodeError(f"Absorbing nodes not in graph: {sorted(outside.tolist())[:5]}")
    return nodes


def reachable_mask(g: BipartiteGraph, absorbing: np.ndarray) -> np.ndarray:
    """Nodes sharing a connected component with at least one absorbing node."""
    _, labels = component_labels(g)
    return np.isin(labels, np.unique(labels[absorbing]))


def entropy_vector(g: BipartiteGraph, table: EntropyTable) -> np.ndarray:
    values = np.empty(g.n_users)
    for node, user_id in enumerate(g.user_ids):
        try:
            values[node] = table.entries[user_id]
        except KeyError:
            raise MissingEntropyError(user_id) from None
    return values


def cost_vector(g: BipartiteGraph, spec: AbsorbingSpec) -> np.ndarray:
    """Expected one-step cost out of every node, zero on the absorbing set.

    Entropy-biased: an item pays the rating-weighted mean entropy of the users
    it can jump to; a user pays the constant C.
    """
    absorbing = _absorbing_array(g, spec)
    if spec.cost_model == CostModel.UNIT:
        costs = np.ones(g.n_nodes)
    else:
        entropies = entropy_vector(g, spec.entropy)
        item_to_user = g.adjacency[g.n_users:, :g.n_users]
        costs = np.empty(g.n_nodes)
        costs[:g.n_users] = spec.cost_constant
        # (A e) / d rather than P e keeps a constant entropy exactly equal to that constant
        costs[g.n_users:] = (item_to_user @ entropies) / g.degrees[g.n_users:]
    costs[absorbing] = 0.0
    return costs


def _transient_operator(g: BipartiteGraph, absorbing: np.ndarray) -> sp.csr_matrix:
    keep = np.ones(g.n_nodes)
    keep[absorbing] = 0.0
    return sp.csr_matrix(sp.diags(keep) @ transition_matrix(g))


def _solve_exact(g: BipartiteGraph, spec: AbsorbingSpec) -> WalkResult:
    absorbing = _absorbing_array(g, spec)
    reachable = reachable_mask(g, absorbing)
    costs = cost_vector(g, spec)

    transient = reachable.copy()
    transient[absorbing] = False
    nodes = np.flatnonzero(transient)

    values = np.full(g.n_nodes, np.inf)
    values[absorbing] = 0.0
    if nodes.size:
        q_tt = transition_matrix(g)[nodes][:, nodes]
        system = sp.identity(nodes.size, format="csc") - q_tt.tocsc()
        if nodes.size <= settings.DENSE_SOLVER_LIMIT:
            lu = scipy.linalg.lu_factor(system.toarray())
            values[nodes] = scipy.linalg.lu_solve(lu, costs[nodes])
        else:
            logger.info(f"Sparse LU solve over {nodes.size} transient nodes")
            values[nodes] = scipy.sparse.linalg.spsolve(system, costs[nodes])

    return WalkResult(values=values, reachable=reachable, converged_iterations=0, method=WalkMethod.EXACT)


def _iterate(g: BipartiteGraph, spec: AbsorbingSpec, tau: int) -> WalkResult:
    if tau < 1:
        raise ValueError(f"tau must be >= 1, got {tau}")
    absorbing = _absorbing_array(g, spec)
    reachable = reachable_mask(g, absorbing)
    costs = cost_vector(g, spec)
    operator = _transient_operator(g, absorbing)

    values = np.zeros(g.n_nodes)
    for _ in range(tau):
        values = costs + operator @ values

    values[~reachable] = np.inf
    return WalkResult(values=values, reachable=reachable, converged_iterations=tau, method=WalkMethod.TRUNCATED)


def _require(spec: AbsorbingSpec, cost_model: CostModel) -> None:
    if spec.cost_model != cost_model:
        raise ValueError(f"Expected a {cost_model.value} cost model, got {spec.cost_model.value}")


def hitting_time(g: BipartiteGraph, q: int, tau: Optional[int] = None) -> WalkResult:
    """H(q|j) for every node j: absorbing time with the singleton set {q}.

    ``tau=None`` solves exactly; otherwise the truncated iterate is returned.
    """
    if not 0 <= q < g.n_nodes:
        raise UnknownNodeError(f"Query node {q} not in graph")
    spec = AbsorbingSpec(absorbing_nodes=frozenset([q]))
    if tau is None:
        return absorbing_time_exact(g, spec)
    return absorbing_time_truncated(g, spec, tau)


def absorbing_time_exact(g: BipartiteGraph, spec: AbsorbingSpec) -> WalkResult:
    _require(spec, CostModel.UNIT)
    return _solve_exact(g, spec)


def absorbing_time_truncated(g: BipartiteGraph, spec: AbsorbingSpec, tau: int = settings.DEFAULT_TAU) -> WalkResult:
    _require(spec, CostModel.UNIT)
    return _iterate(g, spec, tau)


def absorbing_cost(g: BipartiteGraph, spec: AbsorbingSpec, tau: int = settings.DEFAULT_TAU) -> WalkResult:
    _require(spec, CostModel.ENTROPY_BIASED)
    return _iterate(g, spec, tau)


def absorbing_cost_exact(g: BipartiteGraph, spec: AbsorbingSpec) -> WalkResult:
    _require(spec, CostModel.ENTROPY_BIASED)
    return _solve_exact(g, spec)


def walk_result_to_frame(g: BipartiteGraph, result: WalkResult) -> pd.DataFrame:
    return pd.DataFrame({
        "node_id": [g.node_label(node) for node in range(g.n_nodes)],
        "value": result.values,
        "reachable": result.reachable.astype(bool),
    })


def save_walk_result(g: BipartiteGraph, result: WalkResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    walk_result_to_frame(g, result).to_csv(path, index=False, lineterminator="\n", float_format="%.12g")
    return path
