"""
Supervised head on top of precomputed features.

A linear projection maps features into the label-embedding (semantic)
space, an adaptive-margin hinge ranks label embeddings around the
projected vector, and a linear classifier adds a cross-entropy term.
total_loss combines them with the quantization distortion.
"""

import logging
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Iterable, Optional, Sequence, Union

import numpy as np

from .core import as_feature_matrix, as_feature_vector
from .errors import CodeLengthError, ConfigurationError, EmptyInputError, FormatError, ShapeError
from .quantizer import NORM_FLOOR, DistortionBreakdown, cascade_batch, diagnostics, distortion_batch

logger = logging.getLogger(__name__)

LABEL_MODES = ("single", "multi")
CLS_TAPS = ("semantic", "features")
_EMBED_HEADER = struct.Struct("<II")


@dataclass(frozen=True)
class LabelAnnotation:
    positives: FrozenSet[int]

    def __post_init__(self):
        pos = frozenset(int(c) for c in self.positives)
        if not pos:
            raise EmptyInputError("Label annotation has no positive classes")
        if min(pos) < 0:
            raise ShapeError(f"Negative class id in {sorted(pos)}")
        object.__setattr__(self, "positives", pos)

    @classmethod
    def of(cls, *class_ids: int) -> "LabelAnnotation":
        return cls(frozenset(class_ids))

    def multi_hot(self, C: int) -> np.ndarray:
        if max(self.positives) >= C:
            raise ShapeError(f"Class id {max(self.positives)} outside [0, {C})")
        y = np.zeros(C, dtype=np.float64)
        y[sorted(self.positives)] = 1.0
        return y


LabelsLike = Union[np.ndarray, Sequence[LabelAnnotation], Sequence[Iterable[int]]]


def label_matrix(labels: LabelsLike, C: int) -> np.ndarray:
    """Normalise annotations (or an already multi-hot matrix) to an n x C 0/1 matrix"""
    if isinstance(labels, np.ndarray) and labels.ndim == 2:
        Y = labels.astype(np.float64)
        if Y.shape[1] != C:
            raise ShapeError(f"Label matrix has {Y.shape[1]} classes, expected {C}")
        if np.any(Y.sum(axis=1) == 0):
            raise EmptyInputError("Label matrix has a row with no positive class",
                                  {"index": int(np.argmin(Y.sum(axis=1)))})
        return Y
    rows = []
    for item in labels:
        ann = item if isinstance(item, LabelAnnotation) else LabelAnnotation(frozenset(item))
        rows.append(ann.multi_hot(C))
    if not rows:
        raise EmptyInputError("No label annotations given")
    return np.vstack(rows)


# --- label embeddings ---

@dataclass(frozen=True)
class SemanticLabelSet:
    """Label embeddings Z (C x E) and the margin matrix delta_ij = 1 - cos(z_i, z_j)"""

    Z: np.ndarray
    delta: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=np.float64)
        if Z.ndim != 2 or Z.shape[0] == 0:
            raise ShapeError(f"Label embeddings must be a non-empty C x E matrix, got shape {Z.shape}")
        norms = np.linalg.norm(Z, axis=1)
        if np.any(norms < NORM_FLOOR):
            bad = int(np.argmin(norms))
            raise ShapeError(f"Label embedding {bad} has zero norm", {"class": bad})
        if not np.all(np.isfinite(Z)):
            raise ShapeError("Label embeddings contain NaN or Inf")
        unit = Z / norms[:, None]
        cos = np.clip(unit @ unit.T, -1.0, 1.0)
        delta = 1.0 - cos
        delta = 0.5 * (delta + delta.T)
        np.fill_diagonal(delta, 0.0)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "delta", delta)

    @property
    def C(self) -> int:
        return self.Z.shape[0]

    @property
    def E(self) -> int:
        return self.Z.shape[1]

    @property
    def unit(self) -> np.ndarray:
        return self.Z / np.linalg.norm(self.Z, axis=1, keepdims=True)

    @classmethod
    def synthetic(cls, C: int, E: int, seed: int = 0, orthonormal: bool = False) -> "SemanticLabelSet":
        """Deterministic stand-in embeddings: random unit vectors or orthonormal rows (C <= E)"""
        rng = np.random.default_rng(seed)
        if orthonormal:
            if C > E:
                raise ConfigurationError(f"Cannot build {C} orthonormal embeddings in {E} dimensions")
            q, _ = np.linalg.qr(rng.standard_normal((E, C)))
            return cls(q.T.copy())
        Z = rng.standard_normal((C, E))
        return cls(Z / np.linalg.norm(Z, axis=1, keepdims=True))

    def to_bytes(self) -> bytes:
        return _EMBED_HEADER.pack(self.C, self.E) + self.Z.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "SemanticLabelSet":
        if len(buffer) < _EMBED_HEADER.size:
            raise CodeLengthError("Label-embedding file shorter than its header")
        C, E = _EMBED_HEADER.unpack_from(buffer)
        need = _EMBED_HEADER.size + 4 * C * E
        if len(buffer) < need:
            raise CodeLengthError(f"Label-embedding file truncated: {C}x{E} declared",
                                  {"expected": need, "actual": len(buffer)})
        if C == 0 or E == 0:
            raise FormatError(f"Label-embedding file declares an empty {C}x{E} matrix")
        Z = np.frombuffer(buffer, dtype="<f4", count=C * E, offset=_EMBED_HEADER.size)
        return cls(Z.reshape(C, E).astype(np.float64))

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path: str) -> "SemanticLabelSet":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


# --- projection / classification head ---

@dataclass
class ProjectionHead:
    """Linear map features -> semantic space, plus a linear classifier.

    W_cls reads either the semantic vector v (tap='semantic', E x C) or the
    raw features (tap='features', D x C).
    """

    W_embed: np.ndarray
    W_cls: np.ndarray
    b_cls: np.ndarray
    tap: str = "semantic"

    def __post_init__(self):
        if self.tap not in CLS_TAPS:
            raise ConfigurationError(f"Unknown classifier tap '{self.tap}'", "Use 'semantic' or 'features'")
        self.W_embed = np.asarray(self.W_embed, dtype=np.float64)
        self.W_cls = np.asarray(self.W_cls, dtype=np.float64)
        self.b_cls = np.asarray(self.b_cls, dtype=np.float64).reshape(-1)
        tap_dim = self.E if self.tap == "semantic" else self.D
        if self.W_cls.shape != (tap_dim, self.b_cls.shape[0]):
            raise ShapeError(f"Classifier weight shape {self.W_cls.shape} does not fit tap '{self.tap}' "
                             f"({tap_dim} inputs, {self.b_cls.shape[0]} classes)")
        for name in ("W_embed", "W_cls", "b_cls"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ShapeError(f"{name} contains NaN or Inf")

    @property
    def D(self) -> int:
        return self.W_embed.shape[0]

    @property
    def E(self) -> int:
        return self.W_embed.shape[1]

    @property
    def C(self) -> int:
        return self.b_cls.shape[0]

    @classmethod
    def initialize(cls, D: int, E: int, C: int, rng: np.random.Generator, tap: str = "semantic") -> "ProjectionHead":
        """Semi-orthogonal W_embed, small Gaussian W_cls, zero bias"""
        a = rng.standard_normal((max(D, E), min(D, E)))
        q, _ = np.linalg.qr(a)
        W_embed = q if D >= E else q.T
        tap_dim = E if tap == "semantic" else D
        W_cls = rng.normal(0.0, 0.01, size=(tap_dim, C))
        return cls(W_embed.copy(), W_cls, np.zeros(C), tap)

    def project(self, X: np.ndarray) -> np.ndarray:
        if X.shape[-1] != self.D:
            raise ShapeError(f"Feature dimension {X.shape[-1]} does not match head input {self.D}")
        return X @ self.W_embed

    def logits(self, X: np.ndarray, V: Optional[np.ndarray] = None) -> np.ndarray:
        if self.tap == "semantic":
            V = self.project(X) if V is None else V
            return V @ self.W_cls + self.b_cls
        return X @ self.W_cls + self.b_cls

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.W_embed.copy(), self.W_cls.copy(), self.b_cls.copy(), self.tap)


def project(x, head: ProjectionHead) -> np.ndarray:
    """v = W_embed^T x"""
    x = as_feature_vector(x, head.D)
    return head.project(x)


# --- losses ---

def _logsumexp(Z: np.ndarray) -> np.ndarray:
    top = Z.max(axis=1, keepdims=True)
    return (top + np.log(np.exp(Z - top).sum(axis=1, keepdims=True)))[:, 0]


def classification_losses(logits: np.ndarray, Y: np.ndarray, mode: str = "single") -> np.ndarray:
    """Per-sample cross-entropy from logits (n x C) against 0/1 targets (n x C)"""
    if mode not in LABEL_MODES:
        raise ConfigurationError(f"Unknown label mode '{mode}'", "Use 'single' or 'multi'")
    if logits.shape != Y.shape:
        raise ShapeError(f"Logits {logits.shape} and targets {Y.shape} differ in shape")
    if mode == "single":
        if np.any(Y.sum(axis=1) != 1):
            raise ConfigurationError("Single-label mode needs exactly one positive class per sample",
                                     "Use --label-mode multi for multi-label data")
        return _logsumexp(logits) - np.sum(logits * Y, axis=1)
    # -y'.y + log(1 + e^y'), written to stay finite for large |y'|
    return np.sum(np.maximum(logits, 0.0) - logits * Y + np.log1p(np.exp(-np.abs(logits))), axis=1)


def classification_loss(u, target: Union[LabelAnnotation, Iterable[int]], head: ProjectionHead,
                        mode: str = "single") -> float:
    """Cross-entropy for one sample; u is the classifier's input (v or x, per head.tap)"""
    u = as_feature_vector(u)
    logits = (u @ head.W_cls + head.b_cls)[None, :]
    Y = label_matrix([target], head.C)
    return float(classification_losses(logits, Y, mode)[0])


def cosine_scores(V: np.ndarray, sem: SemanticLabelSet) -> np.ndarray:
    """n x C cosine similarity between each v and each label embedding; rows of ~zero v are 0"""
    norms = np.linalg.norm(V, axis=1)
    degenerate = norms < NORM_FLOOR
    safe = np.where(degenerate, 1.0, norms)
    S = (V / safe[:, None]) @ sem.unit.T
    if degenerate.any():
        diagnostics.record(int(degenerate.sum()))
        S[degenerate] = 0.0
    return S


def margin_pair_mask(Y: np.ndarray) -> np.ndarray:
    """n x C x C mask selecting (positive i, negative j) pairs"""
    return Y[:, :, None] * (1.0 - Y)[:, None, :]


def margin_losses(V: np.ndarray, Y: np.ndarray, sem: SemanticLabelSet) -> np.ndarray:
    """Per-sample adaptive margin hinge; degenerate v contribute 0"""
    if V.shape[1] != sem.E:
        raise ShapeError(f"Semantic vectors have dimension {V.shape[1]}, label embeddings {sem.E}")
    S = cosine_scores(V, sem)
    hinge = np.maximum(0.0, sem.delta[None] - S[:, :, None] + S[:, None, :])
    losses = np.sum(hinge * margin_pair_mask(Y), axis=(1, 2))
    losses[np.linalg.norm(V, axis=1) < NORM_FLOOR] = 0.0
    return losses


def adaptive_margin_loss(v, labels: Union[LabelAnnotation, Iterable[int]], sem: SemanticLabelSet) -> float:
    v = as_feature_vector(v, sem.E)
    Y = label_matrix([labels], sem.C)
    return float(margin_losses(v[None, :], Y, sem)[0])


@dataclass(frozen=True)
class LossBreakdown:
    """Batch-mean loss terms; total = cs*margin + cl*classification + ce*distortion"""

    total: float
    margin: float
    classification: float
    distortion: float
    coefficients: tuple
    detail: Optional[DistortionBreakdown] = None

    def as_dict(self) -> Dict[str, Any]:
        return {"total": self.total, "L_S": self.margin, "L_C": self.classification, "E": self.distortion}


def total_loss(X, labels: Optional[LabelsLike], model, hyper=None, phase: Optional[str] = None) -> LossBreakdown:
    """L = L_S + lambda L_C + tau E over a batch, with coefficients set by the training variant.

    E is evaluated on the projected vectors v when the model has a head,
    otherwise on the raw features.
    """
    hyper = hyper or model.hyper
    X = as_feature_matrix(X)
    if X.shape[0] == 0:
        raise EmptyInputError("Empty batch")
    cs, cl, ce = hyper.loss_coefficients(phase)
    head = model.head

    margin = classification = 0.0
    if head is not None:
        V = head.project(X)
        if labels is not None and (cs or cl):
            Y = label_matrix(labels, head.C)
            if cs:
                if model.sem is None:
                    raise ConfigurationError("The margin loss needs label embeddings",
                                             "Provide label_embeddings.bin or use the 'classification' variant")
                margin = float(margin_losses(V, Y, model.sem).mean())
            if cl:
                classification = float(classification_losses(head.logits(X, V), Y, hyper.label_mode).mean())
    else:
        V = X

    detail = None
    E = 0.0
    if ce:
        cascade = cascade_batch(V, model.codebooks, hyper.gamma, "train", hyper.soft_metric, hyper.hard_metric)
        detail = distortion_batch(cascade, hyper.distortion_weights())
        E = detail.total
    total = cs * margin + cl * classification + ce * E
    return LossBreakdown(total, margin, classification, E, (cs, cl, ce), detail)
