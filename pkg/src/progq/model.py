"""
Hyperparameters and the trained ProgressiveModel, with its binary container.

Model file layout (little-endian):
    header   "PQM1", u16 version, u16 flags, u32 L, K, D, E, C
    u32 n + n bytes of sorted-key JSON: {"hyperparameters": ..., "history": ...}
    float32  codebooks (L x K x E), then W_embed, W_cls, b_cls if a head is
             present, then Z if label embeddings are present
"""

import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Codebook, as_feature_matrix
from .errors import CodeLengthError, ConfigurationError, FormatError, ShapeError
from .quantizer import METRICS, DistortionWeights
from .supervised import CLS_TAPS, LABEL_MODES, ProjectionHead, SemanticLabelSet

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"PQM1"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHHIIIII")

FLAG_HEAD = 1
FLAG_TAP_FEATURES = 2
FLAG_SEMANTIC = 4

VARIANTS = ("full", "distortion_only", "margin", "classification", "two_step", "no_soft")
OPTIMIZERS = ("adam", "sgd")
INIT_METHODS = ("residual_kmeans", "random")


@dataclass(frozen=True)
class Hyperparameters:
    lambda_: float = 0.1
    tau: float = 1.0
    mu: float = 1.0
    nu: float = 0.1
    eta: float = 1e-3
    epochs: int = 64
    batch_size: int = 16
    gamma: float = 20.0
    L: int = 4
    K: int = 256
    E: int = 300
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    layer_weights: Optional[Tuple[float, ...]] = None
    soft_metric: str = "cosine"
    hard_metric: str = "euclidean"
    label_mode: str = "single"
    cls_tap: str = "semantic"
    variant: str = "full"
    init: str = "residual_kmeans"
    kmeans_iters: int = 20
    refine_iters: int = 10
    holdout_fraction: float = 0.1

    def __post_init__(self):
        if self.layer_weights is not None:
            object.__setattr__(self, "layer_weights", tuple(float(w) for w in self.layer_weights))
        self.validate()

    def validate(self) -> None:
        problems = []
        for name in ("lambda_", "tau", "mu", "nu"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not self.eta > 0:
            problems.append("eta must be > 0")
        if not self.gamma > 0:
            problems.append("gamma must be > 0")
        if self.epochs < 0:
            problems.append("epochs must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.L < 1:
            problems.append("L must be >= 1")
        if self.K < 2 or self.K & (self.K - 1):
            problems.append("K must be a power of two >= 2")
        if self.E < 1:
            problems.append("E must be >= 1")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0) or self.adam_eps <= 0:
            problems.append("Adam settings need 0 <= beta < 1 and eps > 0")
        if self.layer_weights is not None and (len(self.layer_weights) != self.L
                                                or any(w < 0 for w in self.layer_weights)):
            problems.append("layer_weights must hold L nonnegative values")
        if not 0.0 <= self.holdout_fraction < 1.0:
            problems.append("holdout_fraction must be in [0, 1)")
        if self.kmeans_iters < 0:
            problems.append("kmeans_iters must be >= 0")
        if self.refine_iters < 0:
            problems.append("refine_iters must be >= 0")
        for name, allowed in (("optimizer", OPTIMIZERS), ("soft_metric", METRICS), ("hard_metric", METRICS),
                              ("label_mode", LABEL_MODES), ("cls_tap", CLS_TAPS), ("variant", VARIANTS),
                              ("init", INIT_METHODS)):
            if getattr(self, name) not in allowed:
                problems.append(f"{name} must be one of {', '.join(allowed)}")
        if problems:
            raise ConfigurationError("Invalid hyperparameters: " + "; ".join(problems),
                                     details={"problems": problems})

    @property
    def m(self) -> int:
        return self.K.bit_length() - 1

    @property
    def needs_head(self) -> bool:
        return self.variant != "distortion_only"

    def loss_coefficients(self, phase: Optional[str] = None) -> Tuple[float, float, float]:
        """Multipliers of (L_S, L_C, E) for this variant and training phase"""
        if self.variant == "distortion_only":
            return 0.0, 0.0, self.tau
        if self.variant == "margin":
            return 1.0, 0.0, self.tau
        if self.variant == "classification":
            return 0.0, self.lambda_, self.tau
        if self.variant == "two_step" and phase == "head":
            return 1.0, self.lambda_, 0.0
        if self.variant == "two_step" and phase == "codebooks":
            return 0.0, 0.0, self.tau
        return 1.0, self.lambda_, self.tau

    def distortion_weights(self, L: Optional[int] = None) -> DistortionWeights:
        L = self.L if L is None else L
        w = self.layer_weights[:L] if self.layer_weights is not None else (1.0,) * L
        if self.variant == "no_soft":
            return DistortionWeights(w, mu=self.mu, nu=0.0, gamma=self.gamma, soft_weight=0.0)
        return DistortionWeights(w, mu=self.mu, nu=self.nu, gamma=self.gamma)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["lambda"] = data.pop("lambda_")
        if data["layer_weights"] is not None:
            data["layer_weights"] = list(data["layer_weights"])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Hyperparameters":
        data = dict(data)
        if "lambda" in data:
            data["lambda_"] = data.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"Unknown hyperparameter(s): {', '.join(unknown)}",
                                     "Check the field names in the hyperparameters section")
        return cls(**data)

    def with_updates(self, **changes) -> "Hyperparameters":
        return replace(self, **{k: v for k, v in changes.items() if v is not None})


@dataclass
class ProgressiveModel:
    """L codebooks, an optional supervised head and the settings they were trained with"""

    codebooks: List[Codebook]
    head: Optional[ProjectionHead] = None
    sem: Optional[SemanticLabelSet] = None
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    history: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.codebooks:
            raise ShapeError("A model needs at least one codebook")
        self.codebooks = [cb if isinstance(cb, Codebook) else Codebook(cb, layer)
                          for layer, cb in enumerate(self.codebooks, start=1)]
        K, dim = self.codebooks[0].K, self.codebooks[0].dim
        for cb in self.codebooks:
            if cb.K != K or cb.dim != dim:
                raise ShapeError(f"Codebook {cb.layer_id} is {cb.K}x{cb.dim}, expected {K}x{dim}")
        if self.head is not None and self.head.E != dim:
            raise ShapeError(f"Head projects to {self.head.E} dimensions, codebooks have {dim}")
        if self.sem is not None and self.sem.E != dim:
            raise ShapeError(f"Label embeddings have dimension {self.sem.E}, codebooks have {dim}")
        if self.head is not None and self.sem is not None and self.head.C != self.sem.C:
            raise ShapeError(f"Head has {self.head.C} classes, label embeddings {self.sem.C}")

    @classmethod
    def from_codebooks(cls, codebooks: Sequence, hyper: Optional[Hyperparameters] = None) -> "ProgressiveModel":
        """Headless model around existing codebooks (e.g. a residual baseline)"""
        books = [Codebook(np.array(cb.codewords if isinstance(cb, Codebook) else cb, dtype=np.float64), layer)
                 for layer, cb in enumerate(codebooks, start=1)]
        hyper = hyper or Hyperparameters()
        hyper = replace(hyper, L=len(books), K=books[0].K, E=books[0].dim, variant="distortion_only",
                        layer_weights=None)
        return cls(books, None, None, hyper)

    @property
    def L(self) -> int:
        return len(self.codebooks)

    @property
    def K(self) -> int:
        return self.codebooks[0].K

    @property
    def m(self) -> int:
        return self.codebooks[0].bits

    @property
    def dim(self) -> int:
        """Dimension of the vectors the codebooks quantize"""
        return self.codebooks[0].dim

    @property
    def input_dim(self) -> int:
        return self.head.D if self.head is not None else self.dim

    def embed(self, X) -> np.ndarray:
        """Map raw features to the quantizer's input space"""
        X = as_feature_matrix(X, self.input_dim)
        return self.head.project(X) if self.head is not None else X

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays by name; updating them in place updates the model"""
        params = {f"codebook_{i}": cb.codewords for i, cb in enumerate(self.codebooks)}
        if self.head is not None:
            params["W_embed"] = self.head.W_embed
            params["W_cls"] = self.head.W_cls
            params["b_cls"] = self.head.b_cls
        return params

    def copy(self) -> "ProgressiveModel":
        return ProgressiveModel(
            [Codebook(cb.codewords.copy(), cb.layer_id) for cb in self.codebooks],
            self.head.copy() if self.head is not None else None,
            self.sem, self.hyper, {k: list(v) for k, v in self.history.items()},
        )

    def truncated(self, l: int) -> "ProgressiveModel":
        """Model restricted to its first l codebooks"""
        if not 1 <= l <= self.L:
            raise ConfigurationError(f"Cannot truncate a {self.L}-layer model to {l} layers")
        hyper = replace(self.hyper, L=l,
                        layer_weights=self.hyper.layer_weights[:l] if self.hyper.layer_weights else None)
        return ProgressiveModel(self.codebooks[:l], self.head, self.sem, hyper, self.history)

    # --- persistence ---

    def to_bytes(self) -> bytes:
        flags = 0
        C = 0
        if self.head is not None:
            flags |= FLAG_HEAD
            C = self.head.C
            if self.head.tap == "features":
                flags |= FLAG_TAP_FEATURES
        if self.sem is not None:
            flags |= FLAG_SEMANTIC
            C = self.sem.C
        meta = json.dumps({"hyperparameters": self.hyper.to_dict(), "history": self.history},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
        parts = [
            _MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, flags, self.L, self.K, self.input_dim, self.dim, C),
            struct.pack("<I", len(meta)), meta,
            np.stack([cb.codewords for cb in self.codebooks]).astype("<f4").tobytes(),
        ]
        if self.head is not None:
            parts += [self.head.W_embed.astype("<f4").tobytes(), self.head.W_cls.astype("<f4").tobytes(),
                      self.head.b_cls.astype("<f4").tobytes()]
        if self.sem is not None:
            parts.append(self.sem.Z.astype("<f4").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "ProgressiveModel":
        if len(buffer) < _MODEL_HEADER.size + 4:
            raise CodeLengthError("Model file shorter than its header")
        magic, version, flags, L, K, D, E, C = _MODEL_HEADER.unpack_from(buffer)
        if magic != MODEL_MAGIC:
            raise FormatError(f"Bad model file magic {magic!r}", {"expected": MODEL_MAGIC.decode()})
        if version != MODEL_VERSION:
            raise FormatError(f"Unsupported model file version {version}", {"supported": MODEL_VERSION})
        offset = _MODEL_HEADER.size
        (meta_len,) = struct.unpack_from("<I", buffer, offset)
        offset += 4
        if len(buffer) < offset + meta_len:
            raise CodeLengthError("Model metadata truncated", {"needed": offset + meta_len, "size": len(buffer)})
        try:
            meta = json.loads(buffer[offset:offset + meta_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"Model metadata is not valid JSON: {e}")
        offset += meta_len

        def take(*shape: int) -> np.ndarray:
            nonlocal offset
            count = int(np.prod(shape))
            if len(buffer) < offset + 4 * count:
                raise CodeLengthError("Model file truncated", {"needed": offset + 4 * count, "size": len(buffer)})
            arr = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset).reshape(shape)
            offset += 4 * count
            return arr.astype(np.float64)

        books = take(L, K, E)
        head = sem = None
        if flags & FLAG_HEAD:
            tap = "features" if flags & FLAG_TAP_FEATURES else "semantic"
            W_embed = take(D, E)
            W_cls = take(D if tap == "features" else E, C)
            head = ProjectionHead(W_embed, W_cls, take(C), tap)
        if flags & FLAG_SEMANTIC:
            sem = SemanticLabelSet(take(C, E))
        hyper = Hyperparameters.from_dict(meta.get("hyperparameters", {}))
        codebooks = [Codebook(books[i], i + 1) for i in range(L)]
        return cls(codebooks, head, sem, hyper, meta.get("history", {}))

    def digest(self) -> bytes:
        """SHA-256 of the serialised model"""
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        logger.info(f"Saved {self.L}x{self.K} model to {path}")

    @classmethod
    def load(cls, path: str) -> "ProgressiveModel":
        with open(path, "rb") as f:
            model = cls.from_bytes(f.read())
        logger.info(f"Loaded {model.L}x{model.K} model from {path}")
        return model

    def summary(self) -> Dict[str, Any]:
        return {
            "layers": self.L,
            "codewords": self.K,
            "bits": self.L * self.m,
            "input_dim": self.input_dim,
            "quantizer_dim": self.dim,
            "head": self.head is not None,
            "classes": self.head.C if self.head is not None else 0,
            "variant": self.hyper.variant,
            "digest": self.digest().hex()[:16],
        }
