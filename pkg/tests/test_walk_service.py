import numpy as np
import pytest

from src.exceptions import MissingEntropyError
from src.models.domain_models import AbsorbingSpec, CostModel, EntropyKind, EntropyTable, RatingRecord
from src.services.graph_service import build_graph, transition_matrix
from src.services.walk_service import (
    absorbing_cost, absorbing_cost_exact, absorbing_time_exact, absorbing_time_truncated,
    cost_vector, hitting_time, save_walk_result
)


def make_graph(triples):
    return build_graph([RatingRecord(user_id=u, item_id=i, rating=r) for u, i, r in triples])


def random_graph(seed, n_users=8, n_items=10, density=0.8):
    rng = np.random.default_rng(seed)
    triples = set()
    for u in range(n_users):
        triples.add((u, u % n_items))
    for i in range(n_items):
        triples.add((i % n_users, i))
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < density:
                triples.add((u, i))
    return make_graph([(f"u{u}", f"i{i}", int(rng.integers(1, 6))) for u, i in sorted(triples)])


def unit_spec(nodes):
    return AbsorbingSpec(absorbing_nodes=frozenset(int(n) for n in nodes))


def uniform_table(g, value=1.0):
    return EntropyTable(kind=EntropyKind.ITEM_BASED, entries={u: value for u in g.user_ids})


def simulate_walks(g, absorbing, start, n_walks, rng, step_cost=None, max_steps=100000):
    """Mean accumulated cost of seeded random walks from ``start`` until absorption."""
    p = transition_matrix(g).toarray()
    cumulative = p.cumsum(axis=1)
    cumulative[:, -1] = 1.0
    stop = np.zeros(g.n_nodes, dtype=bool)
    stop[list(absorbing)] = True
    step_cost = np.ones(g.n_nodes) if step_cost is None else step_cost

    position = np.full(n_walks, start)
    total = np.zeros(n_walks)
    active = ~stop[position]
    for _ in range(max_steps):
        if not active.any():
            break
        walkers = np.flatnonzero(active)
        draws = rng.random(walkers.size)
        nxt = np.argmax(cumulative[position[walkers]] > draws[:, None], axis=1)
        total[walkers] += step_cost[nxt]
        position[walkers] = nxt
        active[walkers] = ~stop[nxt]
    return total.mean()


def test_hitting_time_on_a_path_matches_hand_computation():
    g = make_graph([("u1", "i1", 2), ("u2", "i1", 2)])
    result = hitting_time(g, g.user_index("u1"))

    assert result.values[g.user_index("u1")] == 0.0
    assert result.values[g.item_index("i1")] == pytest.approx(3.0)
    assert result.values[g.user_index("u2")] == pytest.approx(4.0)


def test_exact_absorbing_time_matches_dense_solve():
    g = random_graph(3)
    absorbing = [g.item_index("i0"), g.item_index("i1")]
    result = absorbing_time_exact(g, unit_spec(absorbing))

    transient = np.setdiff1d(np.arange(g.n_nodes), absorbing)
    p = transition_matrix(g).toarray()
    expected = np.linalg.solve(np.eye(transient.size) - p[np.ix_(transient, transient)], np.ones(transient.size))
    np.testing.assert_allclose(result.values[transient], expected, rtol=1e-10)
    assert (result.values[absorbing] == 0).all()


def test_exact_absorbing_time_matches_monte_carlo():
    g = make_graph([
        ("u1", "i1", 5), ("u1", "i2", 1), ("u2", "i2", 3), ("u2", "i3", 4),
        ("u3", "i3", 2), ("u3", "i1", 1), ("u3", "i4", 5), ("u4", "i4", 2),
    ])
    absorbing = [g.item_index("i1")]
    exact = absorbing_time_exact(g, unit_spec(absorbing)).values
    rng = np.random.default_rng(7)

    for start in (g.user_index("u4"), g.item_index("i3"), g.user_index("u2")):
        estimate = simulate_walks(g, absorbing, start, 40000, rng)
        assert estimate == pytest.approx(exact[start], rel=0.03)


def test_exact_absorbing_cost_matches_monte_carlo():
    g = make_graph([
        ("u1", "i1", 5), ("u1", "i2", 1), ("u2", "i2", 3), ("u2", "i3", 4),
        ("u3", "i3", 2), ("u3", "i1", 1), ("u4", "i3", 2), ("u4", "i4", 4),
    ])
    entropies = {"u1": 0.3, "u2": 1.1, "u3": 0.7, "u4": 2.0}
    spec = AbsorbingSpec(
        absorbing_nodes=frozenset([g.item_index("i1")]),
        cost_model=CostModel.ENTROPY_BIASED,
        entropy=EntropyTable(kind=EntropyKind.ITEM_BASED, entries=entropies),
        cost_constant=0.5,
    )
    exact = absorbing_cost_exact(g, spec).values
    # entering a user costs its entropy, entering an item costs C
    step_cost = np.array([entropies[u] for u in g.user_ids] + [0.5] * g.n_items)
    rng = np.random.default_rng(11)

    for start in (g.item_index("i4"), g.user_index("u2")):
        estimate = simulate_walks(g, [g.item_index("i1")], start, 40000, rng, step_cost)
        assert estimate == pytest.approx(exact[start], rel=0.03)


def test_absorbing_time_by_first_passage_propagation():
    g = make_graph([("a", "x", 1), ("a", "y", 1), ("b", "y", 1), ("b", "z", 1), ("c", "y", 1)])
    absorbing = [g.item_index("x")]
    exact = absorbing_time_exact(g, unit_spec(absorbing)).values

    p = transition_matrix(g).toarray()
    start = g.item_index("z")
    mass = np.zeros(g.n_nodes)
    mass[start] = 1.0
    expected = 0.0
    for step in range(1, 5000):
        mass = mass @ p
        expected += step * mass[absorbing].sum()
        mass[absorbing] = 0.0
    assert exact[start] == pytest.approx(expected, rel=1e-9)


@pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
def test_truncated_iteration_converges_to_exact(seed):
    g = random_graph(seed)
    absorbing = [g.item_index(f"i{i}") for i in range(7)]
    spec = unit_spec(absorbing)

    exact = absorbing_time_exact(g, spec).values
    truncated = absorbing_time_truncated(g, spec, tau=50)
    assert truncated.method_label == "truncated(50)"
    np.testing.assert_allclose(truncated.values, exact, atol=1e-6)


def test_truncated_iteration_never_exceeds_exact():
    g = random_graph(5, density=0.3)
    spec = unit_spec([g.item_index("i0")])
    exact = absorbing_time_exact(g, spec).values

    previous = np.zeros(g.n_nodes)
    for tau in (1, 2, 5, 15):
        values = absorbing_time_truncated(g, spec, tau).values
        assert (values >= previous - 1e-12).all()
        assert (values <= exact + 1e-9).all()
        previous = values


def test_unreachable_nodes_get_infinite_time():
    g = make_graph([("u1", "i1", 1), ("u1", "i2", 1), ("u2", "i3", 1)])
    spec = unit_spec([g.item_index("i1")])

    for result in (absorbing_time_exact(g, spec), absorbing_time_truncated(g, spec, 10)):
        assert np.isinf(result.values[g.item_index("i3")])
        assert np.isinf(result.values[g.user_index("u2")])
        assert not result.reachable[g.user_index("u2")]
        assert np.isfinite(result.values[g.item_index("i2")])


def test_unit_entropy_cost_equals_absorbing_time_exactly():
    g = random_graph(9, density=0.5)
    nodes = frozenset([g.item_index("i2"), g.item_index("i5")])
    time_spec = AbsorbingSpec(absorbing_nodes=nodes)
    cost_spec = AbsorbingSpec(
        absorbing_nodes=nodes, cost_model=CostModel.ENTROPY_BIASED, entropy=uniform_table(g), cost_constant=1.0
    )

    assert np.array_equal(absorbing_cost(g, cost_spec, 15).values, absorbing_time_truncated(g, time_spec, 15).values)
    np.testing.assert_allclose(absorbing_cost_exact(g, cost_spec).values, absorbing_time_exact(g, time_spec).values)


def test_low_entropy_neighbors_make_items_cheaper():
    g = make_graph([
        ("q", "m3", 1), ("u2", "m3", 1), ("u4", "m3", 1), ("u4", "a", 1), ("u2", "b", 1),
    ])
    entropies = {"q": 1.0, "u2": 1.5, "u4": 0.2}
    spec = AbsorbingSpec(
        absorbing_nodes=frozenset([g.item_index("m3")]),
        cost_model=CostModel.ENTROPY_BIASED,
        entropy=EntropyTable(kind=EntropyKind.ITEM_BASED, entries=entropies),
        cost_constant=0.8,
    )
    values = absorbing_cost_exact(g, spec).values

    assert values[g.item_index("a")] == pytest.approx(2 * (0.2 + 0.8))
    assert values[g.item_index("b")] == pytest.approx(2 * (1.5 + 0.8))
    times = absorbing_time_exact(g, AbsorbingSpec(absorbing_nodes=spec.absorbing_nodes)).values
    assert times[g.item_index("a")] == pytest.approx(times[g.item_index("b")])


def test_cost_vector_is_zero_on_absorbing_nodes():
    g = random_graph(2)
    absorbing = g.item_index("i3")
    spec = AbsorbingSpec(
        absorbing_nodes=frozenset([absorbing]),
        cost_model=CostModel.ENTROPY_BIASED,
        entropy=uniform_table(g, 0.5),
        cost_constant=2.0,
    )
    costs = cost_vector(g, spec)

    assert costs[absorbing] == 0.0
    assert (costs[:g.n_users] == 2.0).all()
    np.testing.assert_allclose(np.delete(costs[g.n_users:], absorbing - g.n_users), 0.5)


def test_missing_user_entropy_is_reported():
    g = make_graph([("u1", "i1", 1), ("u2", "i1", 1)])
    spec = AbsorbingSpec(
        absorbing_nodes=frozenset([g.item_index("i1")]),
        cost_model=CostModel.ENTROPY_BIASED,
        entropy=EntropyTable(kind=EntropyKind.ITEM_BASED, entries={"u1": 0.1}),
        cost_constant=1.0,
    )

    with pytest.raises(MissingEntropyError):
        absorbing_cost(g, spec, 5)


def test_entropy_biased_spec_requires_constant():
    with pytest.raises(ValueError):
        AbsorbingSpec(absorbing_nodes=frozenset([0]), cost_model=CostModel.ENTROPY_BIASED)


def test_tau_below_one_is_rejected():
    g = make_graph([("u1", "i1", 1)])

    with pytest.raises(ValueError):
        absorbing_time_truncated(g, unit_spec([1]), tau=0)


def test_walk_result_is_written_with_node_labels(tmp_path):
    g = make_graph([("u1", "i1", 1), ("u2", "i2", 1)])
    result = absorbing_time_exact(g, unit_spec([g.item_index("i1")]))

    lines = save_walk_result(g, result, tmp_path / "walk.csv").read_text().splitlines()
    assert lines[0] == "node_id,value,reachable"
    assert lines[1] == "user:u1,1,True"
    assert lines[2] == "user:u2,inf,False"


def test_more_popular_item_at_equal_distance_has_larger_hitting_time():
    g = make_graph([("q", "a", 1), ("v", "a", 1), ("v", "lo", 1), ("v", "hi", 1), ("x", "hi", 1)])
    result = hitting_time(g, g.user_index("q"))

    assert result.values[g.item_index("lo")] == pytest.approx(17.0)
    assert result.values[g.item_index("hi")] == pytest.approx(19.0)
    assert result.values[g.item_index("lo")] < result.values[g.item_index("hi")]


def enumerated_absorbing_time(g, start, absorbing, max_length):
    """Sum of length * probability over every walk that stops at its first absorbing node."""
    p = transition_matrix(g).toarray()
    total = 0.0

    def walk(node, length, probability):
        nonlocal total
        if node in absorbing:
            total += length * probability
            return
        if length == max_length:
            return
        for nxt in np.flatnonzero(p[node]):
            walk(nxt, length + 1, probability * p[node, nxt])

    walk(start, 0, 1.0)
    return total


def test_absorbing_time_on_a_tree_equals_enumerated_walk_lengths():
    g = make_graph([("u1", "r", 1), ("u1", "a", 5), ("u1", "b", 5), ("u2", "r", 1), ("u2", "c", 5)])
    absorbing = {g.item_index(i) for i in ("a", "b", "c")}
    exact = absorbing_time_exact(g, unit_spec(absorbing)).values

    for start in ("r", "u1", "u2"):
        node = g.item_index(start) if start == "r" else g.user_index(start)
        assert exact[node] == pytest.approx(enumerated_absorbing_time(g, node, absorbing, 30), abs=1e-8)
