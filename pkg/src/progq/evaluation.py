"""
Retrieval metrics (mAP@R, precision-recall, precision@R, recall@k) and the
CSV reports that carry them.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, EmptyInputError
from .search import RetrievalResult, SearchIndex, exact_knn

logger = logging.getLogger(__name__)

METRIC_COLUMNS = ["metric", "code_bits", "value"]
PR_COLUMNS = ["code_bits", "rank", "recall", "precision"]


class Relevance:
    """Shared-label relevance between query i and database items.

    Labels are 0/1 matrices; an item is relevant when its label set
    intersects the query's (single-label data reduces to equal labels).
    """

    def __init__(self, query_labels: np.ndarray, db_labels: np.ndarray):
        self.query_labels = np.asarray(query_labels, dtype=np.float64)
        self.db_labels = np.asarray(db_labels, dtype=np.float64)
        if self.query_labels.shape[1] != self.db_labels.shape[1]:
            raise ConfigurationError("Query and database labels use different class counts")
        self._totals = (self.query_labels @ self.db_labels.T > 0).sum(axis=1)

    def __call__(self, query: int, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        return (self.db_labels[ids] @ self.query_labels[query]) > 0

    def total(self, query: int) -> int:
        return int(self._totals[query])


RelevanceLike = Union[Relevance, Callable[[int, np.ndarray], np.ndarray]]


def _hits(results: Sequence[RetrievalResult], relevance: RelevanceLike, cutoff: Optional[int] = None) -> List[np.ndarray]:
    if len(results) == 0:
        raise EmptyInputError("No queries to evaluate")
    return [np.asarray(relevance(q, r.ids[:cutoff]), dtype=bool) for q, r in enumerate(results)]


def average_precision(hits: np.ndarray) -> float:
    """AP over one ranked hit list, normalised by the hits it contains; 0 without hits"""
    hits = np.asarray(hits, dtype=bool)
    found = int(hits.sum())
    if found == 0:
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    return float(np.sum(np.arange(1, found + 1) / ranks) / found)


def mean_average_precision(results: Sequence[RetrievalResult], relevance: RelevanceLike, R: int) -> float:
    if R < 1:
        raise ConfigurationError(f"R must be >= 1, got {R}")
    return float(np.mean([average_precision(h) for h in _hits(results, relevance, R)]))


class PRPoint(NamedTuple):
    rank: int
    recall: float
    precision: float


def precision_recall_curve(results: Sequence[RetrievalResult], relevance: RelevanceLike) -> List[PRPoint]:
    """Mean precision and recall over queries at each rank; a point wherever recall moves"""
    hits = _hits(results, relevance)
    depth = max(len(h) for h in hits)
    if depth == 0:
        return []
    precision = np.zeros((len(hits), depth))
    recall = np.zeros((len(hits), depth))
    for q, h in enumerate(hits):
        if len(h) == 0:
            continue
        cum = np.cumsum(h)
        total = relevance.total(q) if isinstance(relevance, Relevance) else int(cum[-1])
        prec = cum / np.arange(1, len(h) + 1)
        rec = cum / total if total else np.zeros(len(h))
        # ranks past a short list hold their last value
        precision[q] = np.concatenate([prec, np.full(depth - len(h), prec[-1])])
        recall[q] = np.concatenate([rec, np.full(depth - len(h), rec[-1])])
    mean_p = precision.mean(axis=0)
    mean_r = recall.mean(axis=0)
    points = []
    last = 0.0
    for r in range(depth):
        if mean_r[r] != last:
            points.append(PRPoint(r + 1, float(mean_r[r]), float(mean_p[r])))
            last = mean_r[r]
    return points


def precision_at_R(results: Sequence[RetrievalResult], relevance: RelevanceLike, R_values: Sequence[int]) -> List[float]:
    """Mean precision over queries for each cutoff, dividing by R even when fewer were returned"""
    out = []
    for R in R_values:
        if R < 1:
            raise ConfigurationError(f"R must be >= 1, got {R}")
        out.append(float(np.mean([h.sum() / R for h in _hits(results, relevance, R)])))
    return out


def recall_at_k(results: Sequence[RetrievalResult], ground_truth: np.ndarray, k: int) -> float:
    """Mean overlap between the top-k retrieved and the true k nearest neighbours"""
    if len(results) == 0:
        raise EmptyInputError("No queries to evaluate")
    scores = []
    for r, truth in zip(results, ground_truth):
        truth = set(int(i) for i in truth[:k])
        scores.append(len(truth.intersection(int(i) for i in r.ids[:k])) / max(len(truth), 1))
    return float(np.mean(scores))


@dataclass
class EvaluationReport:
    rows: List[Dict[str, object]] = field(default_factory=list)
    pr_rows: List[Dict[str, object]] = field(default_factory=list)

    def add(self, metric: str, code_bits: int, value: float) -> None:
        self.rows.append({"metric": metric, "code_bits": code_bits, "value": value})

    def value(self, metric: str, code_bits: int) -> float:
        for row in self.rows:
            if row["metric"] == metric and row["code_bits"] == code_bits:
                return float(row["value"])
        raise KeyError(f"{metric} at {code_bits} bits")


def evaluate_prefixes(index: SearchIndex, queries: np.ndarray, relevance: Relevance, map_cutoff: int,
                      R_values: Sequence[int] = (), prefixes: Optional[Sequence[int]] = None,
                      recall_k: int = 0, db_features: Optional[np.ndarray] = None,
                      with_pr: bool = False, threads: int = 1) -> EvaluationReport:
    """mAP@R, precision@R and optionally recall@k and P-R points at every prefix length"""
    model = index.model
    prefixes = list(prefixes) if prefixes else list(range(1, model.L + 1))
    depth = max([map_cutoff, *R_values, recall_k])
    ground_truth = None
    if recall_k and db_features is not None:
        ground_truth = exact_knn(model.embed(queries), model.embed(db_features), recall_k)

    report = EvaluationReport()
    for l in prefixes:
        bits = l * model.m
        results = index.search_batch(queries, depth, l, threads)
        map_value = mean_average_precision(results, relevance, map_cutoff)
        report.add(f"map@{map_cutoff}", bits, map_value)
        for R, p in zip(R_values, precision_at_R(results, relevance, R_values)):
            report.add(f"precision@{R}", bits, p)
        if ground_truth is not None:
            report.add(f"recall@{recall_k}", bits, recall_at_k(results, ground_truth, recall_k))
        if with_pr:
            for point in precision_recall_curve(results, relevance):
                report.pr_rows.append({"code_bits": bits, "rank": point.rank,
                                       "recall": point.recall, "precision": point.precision})
        logger.info(f"{bits}-bit codes: mAP@{map_cutoff} = {map_value:.4f}")
    return report


def write_csv(path: str, rows: Sequence[Dict[str, object]], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    logger.info(f"Wrote {len(rows)} rows to {path}")


def write_metrics_csv(path: str, report: EvaluationReport) -> None:
    write_csv(path, report.rows, METRIC_COLUMNS)


def write_pr_csv(path: str, report: EvaluationReport) -> None:
    write_csv(path, report.pr_rows, PR_COLUMNS)
