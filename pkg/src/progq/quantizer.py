"""
Soft and hard quantization, the L-layer residual cascade and the
distortion terms built on top of it.

Two residual tracks run side by side through the cascade. The soft track
feeds x^l - q^l (soft) to the next layer and is what gradients flow
through; the hard track feeds x^l - c(e(x^l)) and matches what database
encoding produces.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Codebook, as_feature_matrix, as_feature_vector
from .errors import ConfigurationError, ShapeError

logger = logging.getLogger(__name__)

NORM_FLOOR = 1e-12
METRICS = ("cosine", "euclidean")
CASCADE_MODES = ("train", "encode")

CodebookLike = Union[Codebook, np.ndarray]


@dataclass
class QuantizerDiagnostics:
    """Counts inputs whose distance was undefined because of a ~zero norm"""

    degenerate_norms: int = 0

    def record(self, count: int) -> None:
        if count:
            self.degenerate_norms += int(count)
            logger.debug(f"{count} degenerate-norm distance(s) treated as 0")

    def reset(self) -> None:
        self.degenerate_norms = 0


diagnostics = QuantizerDiagnostics()


def _codewords(cb: CodebookLike) -> np.ndarray:
    if isinstance(cb, Codebook):
        return cb.codewords
    arr = np.asarray(cb, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"Codebook must be K x D, got shape {arr.shape}")
    return arr


def _check_metric(metric: str) -> None:
    if metric not in METRICS:
        raise ConfigurationError(f"Unknown metric '{metric}'", f"Use one of {', '.join(METRICS)}")


def _check_gamma(gamma: float) -> None:
    if not (np.isfinite(gamma) and gamma > 0):
        raise ConfigurationError(f"gamma must be a positive finite number, got {gamma}")


# --- distances ---

def cosine_distance(x, c) -> float:
    """-<x,c> / (|x| |c|); 0 when either norm is below 1e-12"""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    nx = float(np.linalg.norm(x))
    nc = float(np.linalg.norm(c))
    if nx < NORM_FLOOR or nc < NORM_FLOOR:
        diagnostics.record(1)
        return 0.0
    return float(-np.dot(x, c) / (nx * nc))


def cosine_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """n x K cosine distances with the same degenerate-norm rule"""
    nx = np.linalg.norm(X, axis=1)
    nc = np.linalg.norm(C, axis=1)
    denom = np.outer(nx, nc)
    degenerate = denom < NORM_FLOOR * NORM_FLOOR
    degenerate |= (nx < NORM_FLOOR)[:, None] | (nc < NORM_FLOOR)[None, :]
    safe = np.where(degenerate, 1.0, denom)
    dist = -(X @ C.T) / safe
    if degenerate.any():
        diagnostics.record(int(degenerate.sum()))
        dist[degenerate] = 0.0
    return dist


def squared_euclidean_distances(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """n x K squared distances from explicit differences.

    Differences rather than the |x|^2 - 2<x,c> + |c|^2 expansion, so exactly
    equidistant codewords compare equal and argmin ties stay deterministic.
    """
    n, K = X.shape[0], C.shape[0]
    out = np.empty((n, K), dtype=np.float64)
    rows = max(1, (1 << 22) // max(1, K * C.shape[1]))
    for start in range(0, n, rows):
        diff = X[start:start + rows, None, :] - C[None, :, :]
        out[start:start + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def metric_distances(X: np.ndarray, C: np.ndarray, metric: str) -> np.ndarray:
    """Distances used inside the soft assignment: cosine, or plain L2"""
    _check_metric(metric)
    if metric == "cosine":
        return cosine_distances(X, C)
    return np.sqrt(squared_euclidean_distances(X, C))


# --- soft assignment ---

def soft_assign_batch(X: np.ndarray, cb: CodebookLike, gamma: float, metric: str = "cosine") -> np.ndarray:
    """Row-wise softmax of -gamma * d(x, c_k), computed with max-subtraction"""
    _check_gamma(gamma)
    C = _codewords(cb)
    if X.shape[1] != C.shape[1]:
        raise ShapeError(f"Input dimension {X.shape[1]} does not match codebook dimension {C.shape[1]}")
    return assignment_weights(metric_distances(X, C, metric), gamma)


def assignment_weights(distances: np.ndarray, gamma: float) -> np.ndarray:
    """softmax(-gamma * d) along the last axis"""
    logits = -gamma * distances
    logits = logits - logits.max(axis=-1, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=-1, keepdims=True)
    return weights


def soft_assign(x, cb: CodebookLike, gamma: float, metric: str = "cosine") -> np.ndarray:
    x = as_feature_vector(x)
    return soft_assign_batch(x[None, :], cb, gamma, metric)[0]


def soft_quantize(x, cb: CodebookLike, gamma: float, metric: str = "cosine") -> np.ndarray:
    """Convex combination of codewords weighted by soft_assign"""
    return soft_assign(x, cb, gamma, metric) @ _codewords(cb)


# --- hard assignment ---

def hard_assign_batch(X: np.ndarray, cb: CodebookLike, metric: str = "euclidean") -> np.ndarray:
    """Nearest codeword per row; ties go to the lowest index"""
    _check_metric(metric)
    C = _codewords(cb)
    if X.shape[1] != C.shape[1]:
        raise ShapeError(f"Input dimension {X.shape[1]} does not match codebook dimension {C.shape[1]}")
    if metric == "cosine":
        return np.argmin(cosine_distances(X, C), axis=1)
    return np.argmin(squared_euclidean_distances(X, C), axis=1)


def hard_assign(x, cb: CodebookLike, metric: str = "euclidean") -> int:
    x = as_feature_vector(x)
    return int(hard_assign_batch(x[None, :], cb, metric)[0])


def hard_quantize(x, cb: CodebookLike, metric: str = "euclidean") -> np.ndarray:
    return _codewords(cb)[hard_assign(x, cb, metric)].copy()


# --- cascade ---

@dataclass(frozen=True)
class DistortionWeights:
    """Layer weights w^l, hard/match multipliers and softmax sharpness.

    soft_weight scales the soft quantization term; it is 1 except for the
    hard-only training variant.
    """

    w: Tuple[float, ...]
    mu: float = 1.0
    nu: float = 0.1
    gamma: float = 20.0
    soft_weight: float = 1.0

    def __post_init__(self):
        w = tuple(float(v) for v in self.w)
        object.__setattr__(self, "w", w)
        if any(v < 0 for v in w) or self.mu < 0 or self.nu < 0 or self.soft_weight < 0:
            raise ConfigurationError("Distortion weights must be nonnegative",
                                     details={"w": w, "mu": self.mu, "nu": self.nu})
        _check_gamma(self.gamma)

    @classmethod
    def uniform(cls, L: int, **kwargs) -> "DistortionWeights":
        return cls(w=(1.0,) * L, **kwargs)

    @property
    def w_array(self) -> np.ndarray:
        return np.asarray(self.w, dtype=np.float64)


@dataclass(frozen=True)
class CascadeState:
    """Per-layer values for one input, arrays indexed by layer (0-based)"""

    x: np.ndarray
    inputs: np.ndarray
    soft: np.ndarray
    weights: np.ndarray
    hard_inputs: np.ndarray
    hard: np.ndarray
    indices: Tuple[int, ...]
    mode: str = "train"

    @property
    def L(self) -> int:
        return len(self.indices)

    def hard_reconstruction(self, l: Optional[int] = None) -> np.ndarray:
        """Sum of the first l hard-quantized values, accumulated layer by layer"""
        l = self.L if l is None else l
        total = np.zeros_like(self.x)
        for layer in range(l):
            total = total + self.hard[layer]
        return total


@dataclass(frozen=True)
class BatchCascade:
    """Cascade over n inputs; layer-major arrays (L x n x ...)"""

    X: np.ndarray
    inputs: np.ndarray
    soft: np.ndarray
    weights: np.ndarray
    hard_inputs: np.ndarray
    hard: np.ndarray
    indices: np.ndarray
    mode: str = "train"

    @property
    def L(self) -> int:
        return self.indices.shape[0]

    def state(self, i: int) -> CascadeState:
        return CascadeState(
            x=self.X[i],
            inputs=self.inputs[:, i],
            soft=self.soft[:, i],
            weights=self.weights[:, i],
            hard_inputs=self.hard_inputs[:, i],
            hard=self.hard[:, i],
            indices=tuple(int(v) for v in self.indices[:, i]),
            mode=self.mode,
        )


def _check_codebooks(codebooks: Sequence[CodebookLike], dim: int) -> List[np.ndarray]:
    if len(codebooks) == 0:
        raise ShapeError("Cascade needs at least one codebook")
    arrays = [_codewords(cb) for cb in codebooks]
    for layer, C in enumerate(arrays, start=1):
        if C.shape[1] != dim:
            raise ShapeError(f"Codebook {layer} has dimension {C.shape[1]}, input has {dim}",
                             {"layer": layer, "expected": dim, "actual": C.shape[1]})
    return arrays


def hard_cascade_batch(X: np.ndarray, codebooks: Sequence[CodebookLike],
                       metric: str = "euclidean") -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hard track only: (indices L x n, hard inputs L x n x D, hard values L x n x D)"""
    arrays = _check_codebooks(codebooks, X.shape[1])
    L, n = len(arrays), X.shape[0]
    indices = np.empty((L, n), dtype=np.int64)
    hard_inputs = np.empty((L,) + X.shape, dtype=np.float64)
    hard = np.empty((L,) + X.shape, dtype=np.float64)
    residual = X
    for layer, C in enumerate(arrays):
        hard_inputs[layer] = residual
        idx = hard_assign_batch(residual, C, metric)
        indices[layer] = idx
        hard[layer] = C[idx]
        residual = residual - hard[layer]
    return indices, hard_inputs, hard


def cascade_batch(X, codebooks: Sequence[CodebookLike], gamma: float, mode: str = "train",
                  soft_metric: str = "cosine", hard_metric: str = "euclidean") -> BatchCascade:
    """Run both residual tracks over a batch.

    In train mode `inputs` is the soft track (x^{l+1} = x^l - q^l). In encode
    mode `inputs` is the hard track and q^l is the soft quantization of the
    hard residual.
    """
    if mode not in CASCADE_MODES:
        raise ConfigurationError(f"Unknown cascade mode '{mode}'", "Use 'train' or 'encode'")
    X = as_feature_matrix(X)
    arrays = _check_codebooks(codebooks, X.shape[1])
    indices, hard_inputs, hard = hard_cascade_batch(X, arrays, hard_metric)

    L = len(arrays)
    inputs = np.empty_like(hard_inputs)
    soft = np.empty_like(hard)
    weights = [None] * L
    residual = X
    for layer, C in enumerate(arrays):
        source = residual if mode == "train" else hard_inputs[layer]
        inputs[layer] = source
        A = soft_assign_batch(source, C, gamma, soft_metric)
        weights[layer] = A
        soft[layer] = A @ C
        residual = source - soft[layer]

    # codebooks may differ in K, so weights are kept per layer when they do
    if len({w.shape[1] for w in weights}) == 1:
        weight_array = np.stack(weights)
    else:
        weight_array = np.empty(L, dtype=object)
        weight_array[:] = weights
    return BatchCascade(X=X, inputs=inputs, soft=soft, weights=weight_array,
                        hard_inputs=hard_inputs, hard=hard, indices=indices, mode=mode)


def forward_cascade(x, codebooks: Sequence[CodebookLike], gamma: float, mode: str = "train",
                    soft_metric: str = "cosine", hard_metric: str = "euclidean") -> CascadeState:
    x = as_feature_vector(x)
    return cascade_batch(x[None, :], codebooks, gamma, mode, soft_metric, hard_metric).state(0)


# --- distortion ---

@dataclass(frozen=True)
class DistortionBreakdown:
    soft_losses: np.ndarray
    hard_losses: np.ndarray
    match_losses: np.ndarray
    total: float
    extras: dict = field(default_factory=dict)


def _combine(soft: np.ndarray, hard: np.ndarray, match: np.ndarray, wts: DistortionWeights) -> float:
    w = wts.w_array
    return float(wts.soft_weight * np.dot(w, soft) + wts.mu * np.dot(w, hard) + wts.nu * np.dot(w, match))


def distortion(x, state: CascadeState, wts: DistortionWeights) -> DistortionBreakdown:
    """Per-layer soft, hard and match losses (squared L2) and their weighted total"""
    x = as_feature_vector(x)
    if len(wts.w) != state.L:
        raise ShapeError(f"{len(wts.w)} layer weights for a {state.L}-layer cascade")
    soft_resid = x[None, :] - np.cumsum(state.soft, axis=0)
    hard_resid = x[None, :] - np.cumsum(state.hard, axis=0)
    soft_losses = np.sum(soft_resid ** 2, axis=1)
    hard_losses = np.sum(hard_resid ** 2, axis=1)
    match_losses = np.sum((state.soft - state.hard) ** 2, axis=1)
    return DistortionBreakdown(soft_losses, hard_losses, match_losses,
                               _combine(soft_losses, hard_losses, match_losses, wts))


def distortion_batch(cascade: BatchCascade, wts: DistortionWeights) -> DistortionBreakdown:
    """Batch-mean version of distortion; extras['per_sample'] holds each row's E"""
    if len(wts.w) != cascade.L:
        raise ShapeError(f"{len(wts.w)} layer weights for a {cascade.L}-layer cascade")
    X = cascade.X
    soft_resid = X[None] - np.cumsum(cascade.soft, axis=0)
    hard_resid = X[None] - np.cumsum(cascade.hard, axis=0)
    soft_ls = np.sum(soft_resid ** 2, axis=2)
    hard_ls = np.sum(hard_resid ** 2, axis=2)
    match_ls = np.sum((cascade.soft - cascade.hard) ** 2, axis=2)
    w = wts.w_array
    per_sample = wts.soft_weight * (w @ soft_ls) + wts.mu * (w @ hard_ls) + wts.nu * (w @ match_ls)
    return DistortionBreakdown(soft_ls.mean(axis=1), hard_ls.mean(axis=1), match_ls.mean(axis=1),
                               float(per_sample.mean()), {"per_sample": per_sample})


def hard_distortion_profile(X, codebooks: Sequence[CodebookLike], metric: str = "euclidean") -> np.ndarray:
    """Mean |x - sum_{i<=l} q_H^i|^2 for every prefix length l = 1..L"""
    X = as_feature_matrix(X)
    _, _, hard = hard_cascade_batch(X, codebooks, metric)
    residual = X[None] - np.cumsum(hard, axis=0)
    return np.mean(np.sum(residual ** 2, axis=2), axis=1)
