"""
Dataset ingestion: fvecs/ivecs vectors, label records, split manifests and
the synthetic Gaussian-mixture benchmark.

fvecs/ivecs: per record a little-endian int32 dimension d followed by d
float32 (fvecs) or int32 (ivecs) values.
Label file: per point a little-endian uint16 count then that many uint16 ids.
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import CodeLengthError, ConfigurationError, FormatError
from .supervised import LabelAnnotation, SemanticLabelSet, label_matrix

logger = logging.getLogger(__name__)

FEATURES_FILE = "features.fvecs"
LABELS_FILE = "labels.bin"
EMBEDDINGS_FILE = "label_embeddings.bin"
SPLITS_FILE = "splits.json"


# --- vector files ---

def _parse_vecs(buffer: bytes, dtype: str, path: str) -> np.ndarray:
    if not buffer:
        return np.zeros((0, 0), dtype=dtype)
    if len(buffer) < 4:
        raise CodeLengthError(f"{path}: truncated record 0")
    d = int.from_bytes(buffer[:4], "little", signed=True)
    if d <= 0:
        raise FormatError(f"{path}: record 0 declares dimension {d}", {"record": 0})
    width = 4 * (d + 1)
    if len(buffer) % width == 0:
        raw = np.frombuffer(buffer, dtype="<i4").reshape(-1, d + 1)
        bad = np.flatnonzero(raw[:, 0] != d)
        if bad.size:
            rec = int(bad[0])
            raise FormatError(f"{path}: record {rec} has dimension {int(raw[rec, 0])}, expected {d}",
                              {"record": rec, "expected": d, "actual": int(raw[rec, 0])})
        return np.ascontiguousarray(raw[:, 1:]).view(dtype)
    # walk records to name the first bad one
    offset = record = 0
    while offset < len(buffer):
        if offset + 4 > len(buffer):
            break
        dim = int.from_bytes(buffer[offset:offset + 4], "little", signed=True)
        if dim != d:
            raise FormatError(f"{path}: record {record} has dimension {dim}, expected {d}",
                              {"record": record, "expected": d, "actual": dim})
        if offset + width > len(buffer):
            break
        offset += width
        record += 1
    raise CodeLengthError(f"{path}: record {record} is truncated", {"record": record})


def _format_vecs(X: np.ndarray, dtype: str) -> bytes:
    X = np.ascontiguousarray(X, dtype=dtype)
    if X.ndim != 2:
        raise FormatError(f"Expected an N x D matrix, got shape {X.shape}")
    out = np.empty((X.shape[0], X.shape[1] + 1), dtype="<i4")
    out[:, 0] = X.shape[1]
    out[:, 1:] = X.view("<i4")
    return out.tobytes()


def read_fvecs(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse_vecs(f.read(), "<f4", path)


def write_fvecs(path: str, X) -> None:
    with open(path, "wb") as f:
        f.write(_format_vecs(np.asarray(X, dtype=np.float32), "<f4"))


def read_ivecs(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return _parse_vecs(f.read(), "<i4", path)


def write_ivecs(path: str, X) -> None:
    with open(path, "wb") as f:
        f.write(_format_vecs(np.asarray(X, dtype=np.int32), "<i4"))


# --- labels ---

def write_labels(path: str, labels: Sequence[LabelAnnotation]) -> None:
    parts = []
    for ann in labels:
        ids = sorted(ann.positives)
        if max(ids) > 0xFFFF or len(ids) > 0xFFFF:
            raise FormatError(f"Label record {ids} does not fit the uint16 format")
        parts.append(struct.pack(f"<H{len(ids)}H", len(ids), *ids))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def read_labels(path: str) -> List[LabelAnnotation]:
    with open(path, "rb") as f:
        buffer = f.read()
    labels = []
    offset = 0
    while offset < len(buffer):
        if offset + 2 > len(buffer):
            raise CodeLengthError(f"{path}: label record {len(labels)} is truncated", {"record": len(labels)})
        (count,) = struct.unpack_from("<H", buffer, offset)
        if count == 0:
            raise FormatError(f"{path}: label record {len(labels)} has no classes", {"record": len(labels)})
        end = offset + 2 + 2 * count
        if end > len(buffer):
            raise CodeLengthError(f"{path}: label record {len(labels)} is truncated", {"record": len(labels)})
        labels.append(LabelAnnotation(frozenset(struct.unpack_from(f"<{count}H", buffer, offset + 2))))
        offset = end
    return labels


# --- splits ---

@dataclass
class SplitManifest:
    """Train/query/database id lists; with disjoint=True queries share no id with the other two"""

    train: List[int]
    query: List[int]
    database: List[int]
    disjoint: bool = True

    def validate(self, N: int) -> None:
        for name in ("train", "query", "database"):
            ids = getattr(self, name)
            if ids and (min(ids) < 0 or max(ids) >= N):
                raise ConfigurationError(f"Split '{name}' refers to ids outside [0, {N})")
        if self.disjoint:
            overlap = set(self.query) & (set(self.train) | set(self.database))
            if overlap:
                raise ConfigurationError(f"Query split overlaps train/database at {len(overlap)} ids",
                                         details={"first": min(overlap)})

    def to_dict(self) -> dict:
        return {"train": list(map(int, self.train)), "query": list(map(int, self.query)),
                "database": list(map(int, self.database)), "disjoint": self.disjoint}

    @classmethod
    def from_dict(cls, data: dict) -> "SplitManifest":
        try:
            return cls(list(data["train"]), list(data["query"]), list(data["database"]), bool(data.get("disjoint", True)))
        except KeyError as e:
            raise FormatError(f"Split manifest is missing {e}")

    @classmethod
    def everything(cls, N: int) -> "SplitManifest":
        ids = list(range(N))
        return cls(ids, ids, ids, disjoint=False)


@dataclass
class DatasetBundle:
    features: np.ndarray
    labels: Optional[List[LabelAnnotation]] = None
    label_embeddings: Optional[SemanticLabelSet] = None
    splits: Optional[SplitManifest] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.labels is not None and len(self.labels) != self.N:
            raise ConfigurationError(f"{len(self.labels)} label records for {self.N} feature rows")
        if self.splits is None:
            self.splits = SplitManifest.everything(self.N)
        self.splits.validate(self.N)

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    @property
    def num_classes(self) -> int:
        if self.label_embeddings is not None:
            return self.label_embeddings.C
        if not self.labels:
            return 0
        return max(max(a.positives) for a in self.labels) + 1

    def label_matrix(self, ids: Optional[Sequence[int]] = None) -> np.ndarray:
        if self.labels is None:
            raise ConfigurationError("Dataset has no labels")
        chosen = self.labels if ids is None else [self.labels[i] for i in ids]
        return label_matrix(chosen, self.num_classes)

    def part(self, name: str) -> np.ndarray:
        return np.asarray(getattr(self.splits, name), dtype=np.int64)

    def save(self, directory: str) -> None:
        os.makedirs(directory, exist_ok=True)
        write_fvecs(os.path.join(directory, FEATURES_FILE), self.features)
        if self.labels is not None:
            write_labels(os.path.join(directory, LABELS_FILE), self.labels)
        if self.label_embeddings is not None:
            self.label_embeddings.save(os.path.join(directory, EMBEDDINGS_FILE))
        with open(os.path.join(directory, SPLITS_FILE), "w") as f:
            json.dump(self.splits.to_dict(), f)
        logger.info(f"Wrote dataset with {self.N} points to {directory}")

    @classmethod
    def load(cls, directory: str) -> "DatasetBundle":
        features_path = os.path.join(directory, FEATURES_FILE)
        if not os.path.exists(features_path):
            raise ConfigurationError(f"No {FEATURES_FILE} in {directory}", "Run 'progq synth' or supply features")
        features = read_fvecs(features_path)
        labels = sem = splits = None
        if os.path.exists(os.path.join(directory, LABELS_FILE)):
            labels = read_labels(os.path.join(directory, LABELS_FILE))
        if os.path.exists(os.path.join(directory, EMBEDDINGS_FILE)):
            sem = SemanticLabelSet.load(os.path.join(directory, EMBEDDINGS_FILE))
        if os.path.exists(os.path.join(directory, SPLITS_FILE)):
            with open(os.path.join(directory, SPLITS_FILE)) as f:
                try:
                    splits = SplitManifest.from_dict(json.load(f))
                except json.JSONDecodeError as e:
                    raise FormatError(f"{SPLITS_FILE} is not valid JSON: {e}")
        return cls(features, labels, sem, splits)


def make_synthetic(clusters: int = 10, points_per_cluster: int = 200, D: int = 16, noise: float = 0.1,
                   seed: int = 0, train_per_cluster: Optional[int] = None, query_per_cluster: Optional[int] = None,
                   embedding_dim: Optional[int] = None, center_scale: float = 1.0) -> DatasetBundle:
    """Gaussian mixture labelled by cluster, split per class into query / train / database.

    Every non-query point is in the database; the first train_per_cluster of
    them also form the training set.
    """
    if clusters < 1 or points_per_cluster < 2 or D < 1 or noise < 0:
        raise ConfigurationError("make_synthetic needs clusters >= 1, points_per_cluster >= 2, D >= 1, noise >= 0")
    q_per = max(1, points_per_cluster // 10) if query_per_cluster is None else query_per_cluster
    t_per = (points_per_cluster - q_per) // 2 if train_per_cluster is None else train_per_cluster
    if q_per < 1 or t_per < 1 or q_per + t_per > points_per_cluster:
        raise ConfigurationError(f"Cannot take {q_per} query and {t_per} train points from clusters of "
                                 f"{points_per_cluster}")

    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, D)) * center_scale
    assignment = np.repeat(np.arange(clusters), points_per_cluster)
    features = centers[assignment] + noise * rng.standard_normal((len(assignment), D))

    train, query, database = [], [], []
    for c in range(clusters):
        members = c * points_per_cluster + rng.permutation(points_per_cluster)
        query.extend(members[:q_per].tolist())
        train.extend(members[q_per:q_per + t_per].tolist())
        database.extend(members[q_per:].tolist())
    splits = SplitManifest(sorted(train), sorted(query), sorted(database), disjoint=True)
    labels = [LabelAnnotation.of(int(c)) for c in assignment]
    sem = SemanticLabelSet.synthetic(clusters, embedding_dim or D, seed)
    bundle = DatasetBundle(features, labels, sem, splits)
    bundle.extras["centers"] = centers
    return bundle
