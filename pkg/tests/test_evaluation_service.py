import numpy as np
import pandas as pd
import pytest

from src.exceptions import DataError, InsufficientDataError
from src.models.domain_models import (
    Algorithm, CategoryPath, RecallCase, RecallProtocol, RecommendationList, RecommendedItem
)
from src.services.evaluation_service import (
    EvaluationService, build_report, category_similarity, diversity, longtail_split,
    make_recall_protocol, mean_similarity, popularity_at_n, recall_at_n, summary_table,
    user_item_similarity
)


def ratings(rows):
    return pd.DataFrame(rows, columns=["user_id", "item_id", "rating"])


def skewed_ratings():
    rows = []
    for u in range(6):
        rows.append((f"u{u}", "d", 4))
    rows += [("u0", "c", 5), ("u1", "c", 5), ("u2", "a", 5), ("u3", "b", 5)]
    return ratings(rows)


def rec_list(user_id, item_ids, algorithm=Algorithm.AT, k=3):
    return RecommendationList(
        query_user=user_id,
        items=[RecommendedItem(item_id=i, score=float(n)) for n, i in enumerate(item_ids)],
        algorithm=algorithm,
        k=k,
    )


def large_catalog(n_users=40, n_items=60, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for u in range(n_users):
        for i in range(n_items):
            if rng.random() < 0.3:
                # popular items get 4s, niche items get 5s
                rows.append((str(u), str(i), 4 if i < 10 else 5))
    return ratings(rows)


def test_long_tail_includes_the_boundary_item():
    split = longtail_split(skewed_ratings(), 0.2)

    assert split.tail_items == frozenset({"a", "b"})
    assert split.head_items == frozenset({"c", "d"})
    assert split.tail_item_share == pytest.approx(0.5)
    assert split.tail_rating_share == pytest.approx(0.2)

    wider = longtail_split(skewed_ratings(), 0.3)
    assert wider.tail_items == frozenset({"a", "b", "c"})


def test_full_rating_share_puts_every_item_in_the_tail():
    split = longtail_split(skewed_ratings(), 1.0)

    assert split.head_items == frozenset()


def test_recall_protocol_holds_out_five_star_tail_ratings():
    records = large_catalog()
    split = longtail_split(records, 0.2)
    training, protocol = make_recall_protocol(records, split, n_cases=30, n_decoys=20, seed=5)

    assert len(protocol.cases) == 30
    assert len(training) == len(records) - 30
    train_pairs = set(zip(training["user_id"], training["item_id"]))
    rated = records.groupby("user_id")["item_id"].agg(set).to_dict()
    for case in protocol.cases:
        assert case.item_id in split.tail_items
        assert (case.user_id, case.item_id) not in train_pairs
        assert len(case.decoys) == 20
        assert len(set(case.decoys)) == 20
        assert not set(case.decoys) & rated[case.user_id]


def test_recall_protocol_is_reproducible():
    records = large_catalog()
    split = longtail_split(records, 0.2)

    first = make_recall_protocol(records, split, 25, 10, seed=99)[1]
    second = make_recall_protocol(records, split, 25, 10, seed=99)[1]
    other = make_recall_protocol(records, split, 25, 10, seed=100)[1]
    assert first == second
    assert first != other


def test_recall_protocol_reports_the_shortfall():
    records = skewed_ratings()
    split = longtail_split(records, 0.2)

    with pytest.raises(InsufficientDataError, match="short by 8"):
        make_recall_protocol(records, split, n_cases=10, n_decoys=1, seed=0)


def uniform_protocol(n_cases=4000, n_decoys=1000):
    decoys = [str(i) for i in range(1, n_decoys + 1)]
    return RecallProtocol(
        seed=0,
        cases=[RecallCase(user_id=f"u{n}", item_id="0", decoys=decoys) for n in range(n_cases)],
    )


def test_random_scorer_recall_matches_chance():
    rng = np.random.default_rng(2012)
    recall = recall_at_n(uniform_protocol(), lambda user_id, items: rng.random(len(items)), [10])

    assert recall[10] == pytest.approx(10 / 1001, abs=0.01)


def test_oracle_scorer_has_perfect_recall():
    protocol = uniform_protocol(n_cases=50, n_decoys=100)

    def oracle(user_id, items):
        return np.array([0.0 if item_id == "0" else 1.0 for item_id in items])

    recall = recall_at_n(protocol, oracle, [1, 5], workers=4)
    assert recall == {1: 1.0, 5: 1.0}


def test_recall_is_non_decreasing_in_n():
    protocol = uniform_protocol(n_cases=200, n_decoys=100)
    rng = np.random.default_rng(3)
    recall = recall_at_n(protocol, lambda user_id, items: rng.random(len(items)), [1, 5, 10, 50, 101])

    values = [recall[n] for n in sorted(recall)]
    assert values == sorted(values)
    assert recall[101] == 1.0


def test_ties_rank_by_item_id():
    protocol = RecallProtocol(seed=0, cases=[RecallCase(user_id="u", item_id="5", decoys=["9", "3", "12", "1"])])
    constant = lambda user_id, items: np.zeros(len(items))

    assert recall_at_n(protocol, constant, [2, 3]) == {2: 0.0, 3: 1.0}


def test_failing_scorer_counts_as_a_miss():
    protocol = uniform_protocol(n_cases=4, n_decoys=3)

    def broken(user_id, items):
        if user_id == "u1":
            raise RuntimeError("boom")
        return np.array([0.0] + [1.0] * (len(items) - 1))

    assert recall_at_n(protocol, broken, [1]) == {1: 0.75}


def test_popularity_averages_over_users():
    training = skewed_ratings()
    lists = [rec_list("u0", ["d", "a"]), rec_list("u1", ["b", "c"])]

    popularity = popularity_at_n(lists, training, [1, 2])
    assert popularity[1] == pytest.approx((6 + 1) / 2)
    assert popularity[2] == pytest.approx(((6 + 1) / 2 + (1 + 2) / 2) / 2)


def test_diversity_counts_distinct_items():
    lists = [rec_list("u0", ["a", "b"]), rec_list("u1", ["b", "c"])]

    assert diversity(lists, 10) == pytest.approx(0.3)
    assert diversity(lists, ["a", "b", "c", "d"]) == pytest.approx(0.75)
    assert diversity(lists + [rec_list("u2", ["x"])], 10) >= diversity(lists, 10)

    with pytest.raises(DataError):
        diversity([], 10)


def test_book_category_example_gives_two_quarters():
    mining = CategoryPath.parse(
        "Book:Computer & Internet:Database:Data Mining and Data Warehouse:Introduction to Data Mining"
    )
    storage = CategoryPath.parse(
        "Book:Computer & Internet:Database:Data Management:Information Storage and Management"
    )

    assert category_similarity(mining, storage) == pytest.approx(2 / 4)
    assert category_similarity(storage, mining) == pytest.approx(2 / 4)


def test_category_similarity_edge_cases():
    fiction = CategoryPath.parse("Book:Fiction:Mystery")

    assert category_similarity(fiction, fiction) == 1.0
    assert category_similarity(fiction, CategoryPath.parse("Music:Fiction:Mystery")) == 0.0
    assert category_similarity(fiction, CategoryPath.parse("Book:Fiction")) == pytest.approx(1 / 2)
    assert category_similarity(CategoryPath.parse("Book"), CategoryPath.parse("Book")) == 1.0
    assert category_similarity(CategoryPath.parse("Book"), CategoryPath.parse("Music")) == 0.0


def test_user_item_similarity_takes_best_favorite():
    ontology = {
        "x": CategoryPath.parse("Book:Science:Physics"),
        "y": CategoryPath.parse("Book:Science:Physics"),
        "z": CategoryPath.parse("Book:Art:Painting"),
    }

    assert user_item_similarity("u", "x", ontology, ["z", "y", "unmapped"]) == 1.0
    assert user_item_similarity("u", "x", ontology, ["z"]) == 0.0

    with pytest.raises(DataError):
        user_item_similarity("u", "unmapped", ontology, ["y"])
    with pytest.raises(DataError):
        user_item_similarity("u", "x", ontology, ["unmapped"])


def test_mean_similarity_skips_users_without_mapped_favorites():
    ontology = {
        "a": CategoryPath.parse("Book:Science:Physics"),
        "b": CategoryPath.parse("Book:Science:Chemistry"),
        "c": CategoryPath.parse("Book:Art"),
    }
    favorites = {"u0": ["a"], "u1": ["unmapped"]}
    lists = [rec_list("u0", ["b", "c", "unmapped"]), rec_list("u1", ["a"])]

    assert mean_similarity(lists, ontology, favorites) == pytest.approx((0.5 + 0.0) / 2)


def test_report_ranks_algorithms_per_metric():
    training = skewed_ratings()
    evaluator = EvaluationService(training, item_universe=4)
    rows = evaluator.evaluate_lists(Algorithm.AT, [rec_list("u0", ["a", "b"])])
    rows += evaluator.evaluate_lists(Algorithm.PPR, [rec_list("u0", ["d", "c"], Algorithm.PPR)])
    report = build_report(rows)

    assert list(report.columns) == ["metric", "algorithm", "N", "value"]
    assert set(report["metric"]) == {"popularity", "diversity"}
    summary = summary_table(report)
    popularity_block = summary.split("popularity@")[1]
    assert popularity_block.index("at") < popularity_block.index("ppr")


def test_single_eligible_rating_is_the_one_held_out():
    rows = [(f"u{u}", "d", 4) for u in range(6)]
    rows += [("u0", "c", 5), ("u1", "c", 5), ("u2", "a", 5), ("u3", "b", 3)]
    records = ratings(rows)
    split = longtail_split(records, 0.2)
    assert split.tail_items == frozenset({"a", "b"})

    training, protocol = make_recall_protocol(records, split, n_cases=1, n_decoys=2, seed=4)
    assert [(case.user_id, case.item_id) for case in protocol.cases] == [("u2", "a")]
    assert sorted(protocol.cases[0].decoys) == ["b", "c"]
    assert len(training) == len(records) - 1
    assert ("u2", "a") not in set(zip(training["user_id"], training["item_id"]))
