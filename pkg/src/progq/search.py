"""
Asymmetric search over packed codes.

For a database point with selected codewords c_1..c_l and an unquantized
query q,

    |q - sum_i c_i|^2 = sum_i |q - c_i|^2 - (l - 1)|q|^2 + sum_{i != j} <c_i, c_j>

so one K-entry table per layer plus the cached cross term gives the exact
reconstruction distance in O(l) lookups.
"""

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .core import PackedCode, unpack_code
from .errors import CodeRangeError, ConfigurationError, EmptyInputError, ShapeError
from .index import EncodedDatabase
from .model import ProgressiveModel

logger = logging.getLogger(__name__)

SCAN_BLOCK = 65536


@dataclass(frozen=True)
class SearchTables:
    """Per-layer |q - c^l(k)|^2 tables for the first l_active layers"""

    first_term: np.ndarray
    q_norm_term: float
    l_active: int
    query: np.ndarray = field(repr=False, default=None)


@dataclass
class RetrievalResult:
    ids: np.ndarray
    distances: np.ndarray
    k: int
    l_active: int
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def rows(self) -> List[tuple]:
        return [(rank, int(i), float(d)) for rank, (i, d) in enumerate(zip(self.ids, self.distances), start=1)]


def _check_prefix(l: int, L: int) -> None:
    if not 1 <= l <= L:
        raise CodeRangeError(f"Prefix length {l} outside [1, {L}]", {"l": l, "L": L})


def build_tables_batch(Q, model: ProgressiveModel, l: Optional[int] = None) -> List[SearchTables]:
    """Tables for every query row; queries go through the model's head but are never quantized"""
    l = model.L if l is None else l
    _check_prefix(l, model.L)
    V = model.embed(Q)
    tables = []
    for v in V:
        first = np.stack([np.sum((model.codebooks[j].codewords - v) ** 2, axis=1) for j in range(l)])
        tables.append(SearchTables(first, float((l - 1) * np.dot(v, v)), l, v))
    return tables


def build_tables(query, model: ProgressiveModel, l: Optional[int] = None) -> SearchTables:
    q = np.asarray(query, dtype=np.float64)
    if q.ndim != 1:
        raise ShapeError(f"Query must be a single vector, got shape {q.shape}")
    return build_tables_batch(q[None, :], model, l)[0]


def aqd(tables: SearchTables, code: PackedCode, cross_term: float) -> float:
    """Asymmetric distance of one code at the tables' prefix length"""
    if code.L < tables.l_active:
        raise CodeRangeError(f"Code has {code.L} layers, tables use {tables.l_active}")
    indices = unpack_code(code, code.L, code.m)[:tables.l_active]
    looked_up = sum(float(tables.first_term[j, e]) for j, e in enumerate(indices))
    return looked_up - tables.q_norm_term + float(cross_term)


def aqd_distances(tables: SearchTables, indices: np.ndarray, cross_terms: np.ndarray) -> np.ndarray:
    """Vectorised aqd over N x L index rows and N x L cached cross terms"""
    l = tables.l_active
    total = np.zeros(indices.shape[0], dtype=np.float64)
    for j in range(l):
        total += tables.first_term[j, indices[:, j]]
    return total - tables.q_norm_term + cross_terms[:, l - 1]


def select_topk(distances: np.ndarray, k: int, l_active: int = 0, block: int = SCAN_BLOCK) -> RetrievalResult:
    """k smallest (distance, id) pairs through a bounded max-heap.

    Each block is pre-filtered with argpartition so only candidates that can
    enter the heap are pushed; the result is sorted by distance, then id.
    """
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    distances = np.asarray(distances, dtype=np.float64)
    N = distances.shape[0]
    truncated = k > N
    if truncated:
        logger.info(f"Requested top-{k} from {N} points; returning all of them")
    keep = min(k, N)
    heap: List[tuple] = []  # (-distance, -id): heap[0] is the worst kept pair
    for start in range(0, N, block):
        chunk = distances[start:start + block]
        if len(chunk) > keep:
            candidates = np.argpartition(chunk, keep - 1)[:keep]
            # argpartition drops ties at the boundary arbitrarily; keep all of them
            cutoff = chunk[candidates].max()
            candidates = np.flatnonzero(chunk <= cutoff)
        else:
            candidates = np.arange(len(chunk))
        for offset in candidates:
            d = float(chunk[offset])
            item = (-d, -(start + int(offset)))
            if len(heap) < keep:
                heapq.heappush(heap, item)
            elif item > heap[0]:
                heapq.heapreplace(heap, item)
    ranked = sorted((-nd, -ni) for nd, ni in heap)
    ids = np.array([i for _, i in ranked], dtype=np.int64)
    dists = np.array([d for d, _ in ranked], dtype=np.float64)
    return RetrievalResult(ids, dists, k, l_active, truncated)


class SearchIndex:
    """Model plus encoded database, checked against each other once and ready for queries"""

    def __init__(self, model: ProgressiveModel, db: EncodedDatabase, verify: bool = True):
        self.logger = logging.getLogger(__name__)
        if verify:
            db.verify_model(model)
        if db.N == 0:
            raise EmptyInputError("Encoded database is empty")
        self.model = model
        self.db = db
        self.indices = db.indices()

    def search(self, query, k: int, l: Optional[int] = None) -> RetrievalResult:
        tables = build_tables(query, self.model, l)
        return select_topk(aqd_distances(tables, self.indices, self.db.cross_terms), k, tables.l_active)

    def search_batch(self, Q, k: int, l: Optional[int] = None, threads: int = 1) -> List[RetrievalResult]:
        tables = build_tables_batch(Q, self.model, l)

        def run(t: SearchTables) -> RetrievalResult:
            return select_topk(aqd_distances(t, self.indices, self.db.cross_terms), k, t.l_active)

        if threads > 1 and len(tables) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                return list(pool.map(run, tables))
        return [run(t) for t in tables]


def topk(query, db: EncodedDatabase, model: ProgressiveModel, k: int, l: Optional[int] = None) -> RetrievalResult:
    """Exact top-k under AQD at prefix length l (default: all layers)"""
    return SearchIndex(model, db).search(query, k, l)


def exact_knn(Q, X, k: int) -> np.ndarray:
    """Brute-force Euclidean neighbours, nq x min(k, N) ids with the same tie-break as select_topk"""
    Q = np.asarray(Q, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    out = []
    for q in Q:
        d = np.sum((X - q) ** 2, axis=1)
        out.append(np.lexsort((np.arange(len(d)), d))[:k])
    return np.array(out, dtype=np.int64)
