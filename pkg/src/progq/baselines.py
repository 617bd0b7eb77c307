"""
Classical quantizers: Lloyd k-means, the stacked residual quantizer and
product quantization. The residual stack also seeds progressive training.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .core import Codebook, as_feature_matrix, as_feature_vector
from .errors import ConfigurationError, EmptyInputError, ShapeError
from .quantizer import hard_cascade_batch, squared_euclidean_distances
from .search import select_topk

logger = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    """Fitted codebook, final assignments, and mean distortion before each update plus the final one"""

    codebook: Codebook
    assignments: np.ndarray
    history: List[float] = field(default_factory=list)

    @property
    def distortion(self) -> float:
        return self.history[-1] if self.history else float("nan")


def kmeans_plusplus(data: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """D^2-weighted seeding; falls back to uniform picks once every point is covered"""
    n = data.shape[0]
    seeds = np.empty((K, data.shape[1]), dtype=np.float64)
    seeds[0] = data[rng.integers(n)]
    closest = np.sum((data - seeds[0]) ** 2, axis=1)
    for k in range(1, K):
        total = closest.sum()
        if total > 0:
            pick = rng.choice(n, p=closest / total)
        else:
            pick = rng.integers(n)
        seeds[k] = data[pick]
        closest = np.minimum(closest, np.sum((data - seeds[k]) ** 2, axis=1))
    return seeds


def _assign(data: np.ndarray, centroids: np.ndarray) -> Tuple[np.ndarray, float]:
    d2 = squared_euclidean_distances(data, centroids)
    assignments = np.argmin(d2, axis=1)
    return assignments, float(d2[np.arange(len(data)), assignments].mean())


def fit_kmeans(data, K: int, iters: int = 20, seed: int = 0, init: Optional[np.ndarray] = None,
               layer_id: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are moved to the point of the largest cluster that lies
    farthest from its centroid. Stops early once assignments are stable.
    """
    data = as_feature_matrix(data)
    n = data.shape[0]
    if n == 0:
        raise EmptyInputError("k-means needs at least one point")
    if K < 1:
        raise ConfigurationError(f"K must be >= 1, got {K}")
    if iters < 0:
        raise ConfigurationError(f"iters must be >= 0, got {iters}")

    if init is not None:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (K, data.shape[1]):
            raise ShapeError(f"Initial centroids have shape {centroids.shape}, expected {(K, data.shape[1])}")
    else:
        distinct = len(np.unique(data, axis=0))
        if distinct < K:
            logger.warning(f"Only {distinct} distinct points for K={K}; some seeds will be duplicates")
        centroids = kmeans_plusplus(data, K, np.random.default_rng(seed))

    assignments, current = _assign(data, centroids)
    history = [current]
    for it in range(iters):
        for k in range(K):
            members = assignments == k
            if members.any():
                centroids[k] = data[members].mean(axis=0)
        counts = np.bincount(assignments, minlength=K)
        for k in np.flatnonzero(counts == 0):
            largest = int(np.argmax(counts))
            members = np.flatnonzero(assignments == largest)
            spread = np.sum((data[members] - centroids[largest]) ** 2, axis=1)
            far = members[int(np.argmax(spread))]
            centroids[k] = data[far]
            assignments[far] = k
            counts[largest] -= 1
            counts[k] += 1
        new_assignments, current = _assign(data, centroids)
        history.append(current)
        logger.debug(f"k-means layer {layer_id} iteration {it + 1}: distortion {current:.6g}")
        stable = np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        if stable:
            break
    return KMeansResult(Codebook(centroids, layer_id), assignments, history)


def kmeans_lloyd(data, K: int, iters: int = 20, seed: int = 0, init: Optional[np.ndarray] = None) -> Codebook:
    return fit_kmeans(data, K, iters, seed, init).codebook


def train_residual_baseline(data, L: int, K: int, iters: int = 20, seed: int = 0) -> List[Codebook]:
    """Stacked quantizer: layer l clusters the residuals left by layers < l"""
    residual = as_feature_matrix(data).copy()
    if L < 1:
        raise ConfigurationError(f"L must be >= 1, got {L}")
    codebooks = []
    for layer in range(1, L + 1):
        result = fit_kmeans(residual, K, iters, seed + layer - 1, layer_id=layer)
        codebooks.append(result.codebook)
        residual -= result.codebook.codewords[result.assignments]
        logger.info(f"Residual layer {layer}: mean residual norm^2 {np.mean(np.sum(residual ** 2, axis=1)):.6g}")
    return codebooks


@dataclass
class ProductQuantizer:
    """M sub-codebooks over contiguous D/M-dimensional slices"""

    sub_codebooks: List[Codebook]

    def __post_init__(self):
        if not self.sub_codebooks:
            raise ShapeError("Product quantizer needs at least one sub-codebook")

    @property
    def M(self) -> int:
        return len(self.sub_codebooks)

    @property
    def K(self) -> int:
        return self.sub_codebooks[0].K

    @property
    def sub_dim(self) -> int:
        return self.sub_codebooks[0].dim

    @property
    def dim(self) -> int:
        return self.M * self.sub_dim

    def __len__(self) -> int:
        return self.M

    def __getitem__(self, j: int) -> Codebook:
        return self.sub_codebooks[j]

    def __iter__(self) -> Iterator[Codebook]:
        return iter(self.sub_codebooks)

    def slices(self) -> Iterator[slice]:
        for j in range(self.M):
            yield slice(j * self.sub_dim, (j + 1) * self.sub_dim)


def train_pq_baseline(data, M: int, K: int, iters: int = 20, seed: int = 0) -> ProductQuantizer:
    data = as_feature_matrix(data)
    D = data.shape[1]
    if M < 1 or D % M:
        raise ConfigurationError(f"Dimension {D} is not divisible into {M} subspaces",
                                 "Pick M among the divisors of the feature dimension")
    width = D // M
    books = [fit_kmeans(data[:, j * width:(j + 1) * width], K, iters, seed + j, layer_id=j + 1).codebook
             for j in range(M)]
    return ProductQuantizer(books)


def pq_encode(pq: ProductQuantizer, X) -> np.ndarray:
    """N x M sub-codeword indices"""
    X = as_feature_matrix(X, pq.dim)
    codes = np.empty((X.shape[0], pq.M), dtype=np.int64)
    for j, part in enumerate(pq.slices()):
        codes[:, j] = np.argmin(squared_euclidean_distances(X[:, part], pq[j].codewords), axis=1)
    return codes


def pq_reconstruct(pq: ProductQuantizer, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return np.hstack([pq[j].codewords[codes[:, j]] for j in range(pq.M)])


def pq_tables(pq: ProductQuantizer, query) -> np.ndarray:
    """M x K squared distances from each query slice to the matching sub-codewords"""
    q = as_feature_vector(query, pq.dim)
    return np.vstack([np.sum((pq[j].codewords - q[part]) ** 2, axis=1) for j, part in enumerate(pq.slices())])


def pq_adc_distances(tables: np.ndarray, codes: np.ndarray) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    return tables[np.arange(tables.shape[0])[None, :], codes].sum(axis=1)


def pq_adc_topk(pq: ProductQuantizer, query, codes: np.ndarray, k: int):
    """Exact top-k under asymmetric PQ distance, same ordering rules as the residual search"""
    return select_topk(pq_adc_distances(pq_tables(pq, query), codes), k)


def mean_distortion(X, reconstruction: np.ndarray) -> float:
    X = as_feature_matrix(X)
    return float(np.mean(np.sum((X - reconstruction) ** 2, axis=1)))


def stacked_reconstruction(codebooks: Sequence[Codebook], X) -> np.ndarray:
    """Hard residual reconstruction of X through all the given codebooks"""
    _, _, hard = hard_cascade_batch(as_feature_matrix(X), codebooks)
    return np.sum(hard, axis=0)
