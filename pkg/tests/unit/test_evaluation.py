#!/usr/bin/env python3
"""
Unit tests for retrieval metrics and the CSV reports
"""

import csv

import numpy as np
import pytest

from progq.errors import ConfigurationError, EmptyInputError
from progq.evaluation import (
    METRIC_COLUMNS,
    EvaluationReport,
    Relevance,
    average_precision,
    evaluate_prefixes,
    mean_average_precision,
    precision_at_R,
    precision_recall_curve,
    recall_at_k,
    write_metrics_csv,
    write_pr_csv,
)
from progq.index import encode_database
from progq.model import ProgressiveModel
from progq.search import RetrievalResult, SearchIndex


def _result(ids):
    ids = np.asarray(ids, dtype=np.int64)
    return RetrievalResult(ids, np.arange(len(ids), dtype=float), len(ids), 1)


# five ranked items, relevant at ranks 1, 3 and 5
TOY_RELEVANT = {0, 2, 4}


def toy_relevance(query, ids):
    return np.array([int(i) in TOY_RELEVANT for i in ids])


class TestAveragePrecision:
    """Test AP and mAP"""

    def test_hand_computed(self):
        assert average_precision([1, 0, 1, 0, 1]) == pytest.approx((1 + 2 / 3 + 3 / 5) / 3)

    def test_no_hits(self):
        assert average_precision([0, 0, 0]) == 0.0

    def test_map_cutoff(self):
        results = [_result([0, 1, 2, 3, 4])]
        assert mean_average_precision(results, toy_relevance, 5) == pytest.approx(0.755556, abs=1e-6)
        assert mean_average_precision(results, toy_relevance, 2) == pytest.approx(1.0)

    def test_perfect_ranking(self):
        results = [_result([0, 2, 4, 1, 3])] * 3
        assert mean_average_precision(results, toy_relevance, 5) == 1.0

    def test_bad_arguments(self):
        with pytest.raises(ConfigurationError):
            mean_average_precision([_result([0])], toy_relevance, 0)
        with pytest.raises(EmptyInputError):
            mean_average_precision([], toy_relevance, 5)


class TestCurves:
    """Test precision@R and the precision-recall curve"""

    def test_precision_at_R(self):
        values = precision_at_R([_result([0, 1, 2, 3, 4])], toy_relevance, [2, 5, 10])
        assert values == pytest.approx([0.5, 0.6, 0.3])

    def test_precision_recall_points(self):
        points = precision_recall_curve([_result([0, 1, 2, 3, 4])], toy_relevance)
        assert [p.rank for p in points] == [1, 3, 5]
        assert [p.recall for p in points] == pytest.approx([1 / 3, 2 / 3, 1.0])
        assert [p.precision for p in points] == pytest.approx([1.0, 2 / 3, 0.6])

    def test_recall_uses_label_totals(self):
        relevance = Relevance(np.array([[1.0, 0.0]]), np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]]))
        assert relevance.total(0) == 4
        points = precision_recall_curve([_result([0, 4])], relevance)
        assert points[-1].recall == pytest.approx(0.25)

    def test_recall_at_k(self):
        truth = np.array([[0, 1, 2], [5, 6, 7]])
        results = [_result([2, 0, 9]), _result([5, 6, 7])]
        assert recall_at_k(results, truth, 3) == pytest.approx((2 / 3 + 1.0) / 2)


class TestOrderInvariance:
    """Metrics depend on each query's ranking, not on query order"""

    @pytest.fixture
    def ranked(self, rng):
        Y_query = np.eye(3)[rng.integers(0, 3, size=6)]
        Y_db = np.eye(3)[rng.integers(0, 3, size=20)]
        Y_db[:3] = np.eye(3)
        results = [_result(rng.permutation(20)) for _ in range(6)]
        return Y_query, Y_db, results

    def test_permuting_queries(self, ranked, rng):
        Y_query, Y_db, results = ranked
        perm = rng.permutation(len(results))
        before = Relevance(Y_query, Y_db)
        after = Relevance(Y_query[perm], Y_db)
        shuffled = [results[i] for i in perm]
        assert mean_average_precision(shuffled, after, 10) == pytest.approx(
            mean_average_precision(results, before, 10), abs=1e-12)
        np.testing.assert_allclose(precision_at_R(shuffled, after, [5, 10]), precision_at_R(results, before, [5, 10]))
        np.testing.assert_allclose(np.array(precision_recall_curve(shuffled, after)),
                                   np.array(precision_recall_curve(results, before)))

    def test_moving_a_relevant_item_up_never_lowers_map(self, ranked):
        Y_query, Y_db, results = ranked
        relevance = Relevance(Y_query, Y_db)
        base = mean_average_precision(results, relevance, 20)
        hits = relevance(0, results[0].ids)
        pos = int(np.flatnonzero(hits)[-1])
        above = np.flatnonzero(~hits[:pos])
        if len(above):
            ids = results[0].ids.copy()
            j = int(above[0])
            ids[[j, pos]] = ids[[pos, j]]
            improved = [_result(ids)] + results[1:]
            assert mean_average_precision(improved, relevance, 20) >= base


class TestRelevance:
    """Test shared-label relevance"""

    def test_multi_label_overlap(self):
        relevance = Relevance(np.array([[1.0, 1.0, 0.0]]), np.array([[0, 1, 0], [0, 0, 1], [1, 0, 1]]))
        np.testing.assert_array_equal(relevance(0, np.array([0, 1, 2])), [True, False, True])

    def test_class_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            Relevance(np.zeros((1, 2)), np.zeros((1, 3)))


class TestEvaluatePrefixes:
    """Test the per-prefix report on a perfectly separable database"""

    @pytest.fixture
    def perfect(self):
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
        model = ProgressiveModel.from_codebooks([centers, np.zeros((4, 2))])
        db_features = np.repeat(centers, 3, axis=0)
        labels = np.eye(4)
        index = SearchIndex(model, encode_database(db_features, model))
        return index, centers, Relevance(labels, np.repeat(labels, 3, axis=0)), db_features

    def test_perfect_retrieval(self, perfect):
        index, queries, relevance, db_features = perfect
        report = evaluate_prefixes(index, queries, relevance, 3, R_values=[3], recall_k=3,
                                   db_features=db_features, with_pr=True)
        for bits in (2, 4):
            assert report.value("map@3", bits) == pytest.approx(1.0)
            assert report.value("precision@3", bits) == pytest.approx(1.0)
            assert report.value("recall@3", bits) == pytest.approx(1.0)
        assert {row["code_bits"] for row in report.pr_rows} == {2, 4}

    def test_selected_prefixes(self, perfect):
        index, queries, relevance, _ = perfect
        report = evaluate_prefixes(index, queries, relevance, 3, prefixes=[1])
        assert [row["code_bits"] for row in report.rows] == [2]
        with pytest.raises(KeyError):
            report.value("map@3", 4)

    def test_csv_files(self, perfect, tmp_path):
        index, queries, relevance, _ = perfect
        report = evaluate_prefixes(index, queries, relevance, 3, with_pr=True)
        metrics = tmp_path / "report.csv"
        pr = tmp_path / "pr.csv"
        write_metrics_csv(str(metrics), report)
        write_pr_csv(str(pr), report)
        with open(metrics, newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == METRIC_COLUMNS
        assert rows[0] == {"metric": "map@3", "code_bits": "2", "value": "1.000000"}
        with open(pr, newline="") as f:
            assert next(csv.reader(f)) == ["code_bits", "rank", "recall", "precision"]

    def test_empty_report(self):
        assert EvaluationReport().rows == []
