"""
Bench and ablation drivers behind `progq bench` and `progq ablate`.

bench compares the trained progressive quantizer with the unsupervised
residual and product-quantization baselines at the same bit budget;
ablate trains each training variant and reports mAP at every code length.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .baselines import mean_distortion, pq_adc_topk, pq_encode, pq_reconstruct, train_pq_baseline, train_residual_baseline
from .datasets import DatasetBundle
from .errors import ConfigurationError, EmptyInputError
from .evaluation import Relevance, evaluate_prefixes, recall_at_k
from .index import decode_codes, encode_database
from .model import VARIANTS, Hyperparameters, ProgressiveModel
from .search import SearchIndex, exact_knn
from .trainer import train

try:
    import psutil
    PSUTIL_AVAILABLE = True
except ImportError:
    PSUTIL_AVAILABLE = False

logger = logging.getLogger(__name__)

BENCH_COLUMNS = ["method", "code_bits", "train_seconds", "encode_seconds", "qps", "distortion", "recall", "rss_mb"]
ABLATION_COLUMNS = ["variant", "code_bits", "map"]


def resident_mb() -> float:
    """Resident set size of this process, 0.0 without psutil"""
    if not PSUTIL_AVAILABLE:
        return 0.0
    return psutil.Process().memory_info().rss / (1024 * 1024)


@dataclass
class Protocol:
    """The train/query/database slices of a bundle as arrays"""

    X_train: np.ndarray
    X_query: np.ndarray
    X_db: np.ndarray
    labels_train: Optional[list]
    Y_query: Optional[np.ndarray]
    Y_db: Optional[np.ndarray]

    @classmethod
    def from_bundle(cls, bundle: DatasetBundle) -> "Protocol":
        train_ids, query_ids, db_ids = bundle.part("train"), bundle.part("query"), bundle.part("database")
        if len(train_ids) == 0 or len(query_ids) == 0 or len(db_ids) == 0:
            raise EmptyInputError("Dataset needs nonempty train, query and database splits")
        F = bundle.features.astype(np.float64)
        has_labels = bundle.labels is not None
        return cls(
            X_train=F[train_ids],
            X_query=F[query_ids],
            X_db=F[db_ids],
            labels_train=[bundle.labels[i] for i in train_ids] if has_labels else None,
            Y_query=bundle.label_matrix(query_ids) if has_labels else None,
            Y_db=bundle.label_matrix(db_ids) if has_labels else None,
        )

    def relevance(self) -> Relevance:
        if self.Y_query is None:
            raise ConfigurationError("Label-based evaluation needs labels.bin in the dataset")
        return Relevance(self.Y_query, self.Y_db)


@dataclass
class BenchRow:
    method: str
    code_bits: int
    train_seconds: float
    encode_seconds: float
    qps: float
    distortion: float
    recall: float
    rss_mb: float = field(default_factory=resident_mb)

    def as_dict(self) -> Dict[str, object]:
        return dict(self.__dict__)


def _pick_subspaces(D: int, wanted: int) -> int:
    """Largest divisor of D not above wanted"""
    for M in range(min(wanted, D), 0, -1):
        if D % M == 0:
            return M
    return 1


def _bench_residual_model(name: str, model: ProgressiveModel, proto: Protocol, k: int, train_seconds: float,
                          threads: int) -> BenchRow:
    started = time.perf_counter()
    db = encode_database(proto.X_db, model, threads=threads)
    encode_seconds = time.perf_counter() - started

    index = SearchIndex(model, db)
    started = time.perf_counter()
    results = index.search_batch(proto.X_query, k, model.L, threads)
    elapsed = time.perf_counter() - started

    V_db = model.embed(proto.X_db)
    truth = exact_knn(model.embed(proto.X_query), V_db, k)
    return BenchRow(
        method=name,
        code_bits=model.L * model.m,
        train_seconds=train_seconds,
        encode_seconds=encode_seconds,
        qps=len(results) / max(elapsed, 1e-9),
        distortion=mean_distortion(V_db, decode_codes(db.codes, model)),
        recall=recall_at_k(results, truth, k),
    )


def _bench_pq(proto: Protocol, hyper: Hyperparameters, k: int) -> BenchRow:
    M = _pick_subspaces(proto.X_train.shape[1], hyper.L)
    if M != hyper.L:
        logger.warning(f"PQ uses {M} subspaces: dimension {proto.X_train.shape[1]} is not divisible by {hyper.L}")
    started = time.perf_counter()
    pq = train_pq_baseline(proto.X_train, M, hyper.K, hyper.kmeans_iters, hyper.seed)
    train_seconds = time.perf_counter() - started

    started = time.perf_counter()
    codes = pq_encode(pq, proto.X_db)
    encode_seconds = time.perf_counter() - started

    started = time.perf_counter()
    results = [pq_adc_topk(pq, q, codes, k) for q in proto.X_query]
    elapsed = time.perf_counter() - started
    return BenchRow(
        method="pq",
        code_bits=M * hyper.m,
        train_seconds=train_seconds,
        encode_seconds=encode_seconds,
        qps=len(results) / max(elapsed, 1e-9),
        distortion=mean_distortion(proto.X_db, pq_reconstruct(pq, codes)),
        recall=recall_at_k(results, exact_knn(proto.X_query, proto.X_db, k), k),
    )


def run_bench(bundle: DatasetBundle, hyper: Hyperparameters, k: int = 10, threads: int = 1,
              methods: Sequence[str] = ("dpq", "residual", "pq")) -> List[BenchRow]:
    """Queries/sec, reconstruction distortion and recall@k per method.

    Distortion and recall are measured in the space each method quantizes:
    the learned embedding for dpq, the raw features for the baselines.
    """
    proto = Protocol.from_bundle(bundle)
    rows = []
    for method in methods:
        if method == "dpq":
            variant = hyper.variant if proto.labels_train is not None else "distortion_only"
            started = time.perf_counter()
            model = train(proto.X_train, proto.labels_train if variant != "distortion_only" else None,
                          hyper.with_updates(variant=variant), bundle.label_embeddings)
            rows.append(_bench_residual_model("dpq", model, proto, k, time.perf_counter() - started, threads))
        elif method == "residual":
            started = time.perf_counter()
            books = train_residual_baseline(proto.X_train, hyper.L, hyper.K, hyper.kmeans_iters, hyper.seed)
            model = ProgressiveModel.from_codebooks(books, hyper)
            rows.append(_bench_residual_model("residual", model, proto, k, time.perf_counter() - started, threads))
        elif method == "pq":
            rows.append(_bench_pq(proto, hyper, k))
        else:
            raise ConfigurationError(f"Unknown bench method '{method}'", "Use dpq, residual or pq")
        row = rows[-1]
        logger.info(f"{row.method}: {row.code_bits} bits, {row.qps:.1f} q/s, distortion {row.distortion:.4g}, "
                    f"recall@{k} {row.recall:.3f}")
    return rows


def run_ablation(bundle: DatasetBundle, hyper: Hyperparameters, variants: Sequence[str] = VARIANTS,
                 map_cutoff: int = 1000, threads: int = 1) -> List[Dict[str, object]]:
    """mAP@map_cutoff per (variant, code_bits) from one model per variant"""
    proto = Protocol.from_bundle(bundle)
    relevance = proto.relevance()
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigurationError(f"Unknown variant(s): {', '.join(unknown)}", f"Choose from {', '.join(VARIANTS)}")
    rows = []
    for variant in variants:
        labels = proto.labels_train if variant != "distortion_only" else None
        model = train(proto.X_train, labels, hyper.with_updates(variant=variant), bundle.label_embeddings)
        index = SearchIndex(model, encode_database(proto.X_db, model, threads=threads))
        report = evaluate_prefixes(index, proto.X_query, relevance, map_cutoff, threads=threads)
        for row in report.rows:
            rows.append({"variant": variant, "code_bits": row["code_bits"], "map": row["value"]})
    return rows
