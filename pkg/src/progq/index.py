"""
Database encoding: hard residual cascade, packed multi-length codes and the
per-prefix cross terms needed by asymmetric search.

EncodedDatabase file layout:
    code section (core format: "PQC1", N, L, m, N packed codes)
    zero padding to a 4-byte boundary
    N x L little-endian float32 cross terms
    32-byte SHA-256 digest of the model that produced the codes
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from .core import (
    PackedCode,
    code_bytes,
    decode_code_section,
    encode_code_section,
    pack_codes,
    unpack_code,
    unpack_codes,
)
from .errors import CodeLengthError, CodeRangeError, CorruptionError, EmptyInputError, EncodingError, ShapeError
from .model import ProgressiveModel
from .quantizer import hard_cascade_batch

logger = logging.getLogger(__name__)

DIGEST_SIZE = hashlib.sha256().digest_size
DEFAULT_CHUNK = 4096

EncodeProgress = Callable[[int, int], None]


def cross_terms_from_hard(hard: np.ndarray) -> np.ndarray:
    """Per point and prefix l: sum over distinct pairs i != j <= l of <c_i, c_j>.

    hard is L x N x D (selected codewords); returns N x L with column 0 == 0.
    """
    L, N, _ = hard.shape
    cross = np.zeros((N, L), dtype=np.float64)
    running = np.zeros(hard.shape[1:], dtype=np.float64)
    for l in range(L):
        if l:
            cross[:, l] = cross[:, l - 1] + 2.0 * np.einsum("nd,nd->n", hard[l], running)
        running = running + hard[l]
    return cross


@dataclass
class EncodedDatabase:
    codes: np.ndarray
    cross_terms: np.ndarray
    L: int
    m: int
    model_digest: bytes = b""

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.uint8)
        self.cross_terms = np.asarray(self.cross_terms, dtype=np.float64)
        if self.codes.ndim != 2 or self.codes.shape[1] != code_bytes(self.L, self.m):
            raise ShapeError(f"Codes must be N x {code_bytes(self.L, self.m)} bytes, got {self.codes.shape}")
        if self.cross_terms.shape != (self.codes.shape[0], self.L):
            raise ShapeError(f"Cross terms must be {(self.codes.shape[0], self.L)}, got {self.cross_terms.shape}")

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    def __len__(self) -> int:
        return self.N

    def indices(self) -> np.ndarray:
        """N x L codeword indices"""
        return unpack_codes(self.codes, self.L, self.m)

    def code(self, i: int) -> PackedCode:
        return PackedCode(self.codes[i].tobytes(), self.L, self.m)

    def verify_model(self, model: ProgressiveModel) -> None:
        if model.L != self.L or model.m != self.m:
            raise CorruptionError(f"Codes are {self.L}x{self.m}-bit, model is {model.L}x{model.m}-bit")
        if self.model_digest and self.model_digest != model.digest():
            raise CorruptionError("Code file was produced by a different model",
                                  {"expected": self.model_digest.hex()[:16], "model": model.digest().hex()[:16]})

    def to_bytes(self) -> bytes:
        section = encode_code_section(self.codes, self.L, self.m)
        pad = (-len(section)) % 4
        digest = self.model_digest or bytes(DIGEST_SIZE)
        return section + bytes(pad) + self.cross_terms.astype("<f4").tobytes() + digest

    @classmethod
    def from_bytes(cls, buffer: bytes) -> "EncodedDatabase":
        codes, L, m, end = decode_code_section(buffer)
        end += (-end) % 4
        need = end + 4 * codes.shape[0] * L + DIGEST_SIZE
        if len(buffer) < need:
            raise CodeLengthError("Encoded database truncated", {"expected": need, "actual": len(buffer)})
        cross = np.frombuffer(buffer, dtype="<f4", count=codes.shape[0] * L, offset=end)
        digest = bytes(buffer[need - DIGEST_SIZE:need])
        if digest == bytes(DIGEST_SIZE):
            digest = b""
        return cls(codes, cross.reshape(codes.shape[0], L).astype(np.float64), L, m, digest)

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            f.write(self.to_bytes())
        logger.info(f"Wrote {self.N} encoded points ({self.L * self.m} bits) to {path}")

    @classmethod
    def load(cls, path: str) -> "EncodedDatabase":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def _encode_chunk(V: np.ndarray, model: ProgressiveModel) -> Tuple[np.ndarray, np.ndarray]:
    indices, _, hard = hard_cascade_batch(V, model.codebooks, "euclidean")
    return pack_codes(indices.T, model.m), cross_terms_from_hard(hard)


def encode_point(x, model: ProgressiveModel) -> Tuple[PackedCode, np.ndarray]:
    """Packed code and the L cross terms of one feature vector"""
    V = model.embed(np.asarray(x, dtype=np.float64)[None, :])
    codes, cross = _encode_chunk(V, model)
    return PackedCode(codes[0].tobytes(), model.L, model.m), cross[0]


def _validated_rows(features, model: ProgressiveModel) -> np.ndarray:
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ShapeError(f"Features must be N x {model.input_dim}, got shape {X.shape}")
    if X.shape[0] == 0:
        raise EmptyInputError("Nothing to encode")
    bad = ~np.all(np.isfinite(X), axis=1)
    if bad.any():
        first = int(np.argmax(bad))
        raise EncodingError(f"Database point {first} contains NaN or Inf", {"index": first})
    return X


def encode_database(features, model: ProgressiveModel, chunk_size: int = DEFAULT_CHUNK, threads: int = 1,
                    progress: Optional[EncodeProgress] = None) -> EncodedDatabase:
    """Encode every row; output order follows input order for any thread count"""
    X = _validated_rows(features, model)
    N = X.shape[0]
    starts = list(range(0, N, chunk_size))

    def work(start: int) -> Tuple[np.ndarray, np.ndarray]:
        try:
            return _encode_chunk(model.embed(X[start:start + chunk_size]), model)
        except Exception as e:
            raise EncodingError(f"Encoding failed in rows {start}..{min(start + chunk_size, N) - 1}: {e}",
                                {"index": start}) from e

    parts: List[Tuple[np.ndarray, np.ndarray]] = []
    done = 0
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(work, starts):
                parts.append(part)
                done += len(part[0])
                if progress:
                    progress(done, N)
    else:
        for start in starts:
            part = work(start)
            parts.append(part)
            done += len(part[0])
            if progress:
                progress(done, N)

    codes = np.vstack([p[0] for p in parts])
    cross = np.vstack([p[1] for p in parts])
    logger.info(f"Encoded {N} points into {model.L * model.m}-bit codes")
    return EncodedDatabase(codes, cross, model.L, model.m, model.digest())


def _check_indices(indices: np.ndarray, model: ProgressiveModel) -> None:
    if indices.size and (indices.min() < 0 or indices.max() >= model.K):
        raise CorruptionError(f"Code refers to codeword {int(indices.max())} of a {model.K}-word codebook")


def decode(code: PackedCode, model: ProgressiveModel, l: Optional[int] = None) -> np.ndarray:
    """Sum of the first l selected codewords, accumulated layer by layer"""
    l = code.L if l is None else l
    if not 1 <= l <= min(code.L, model.L):
        raise CodeRangeError(f"Prefix length {l} outside [1, {min(code.L, model.L)}]")
    if code.m != model.m:
        raise CorruptionError(f"Code uses {code.m}-bit fields, model has {model.m}-bit indices")
    indices = np.asarray(unpack_code(code, code.L, code.m)[:l])
    _check_indices(indices, model)
    total = np.zeros(model.dim)
    for layer in range(l):
        total = total + model.codebooks[layer].codewords[indices[layer]]
    return total


def decode_codes(codes: np.ndarray, model: ProgressiveModel, l: Optional[int] = None) -> np.ndarray:
    """Batched decode of an N x nbytes code matrix"""
    l = model.L if l is None else l
    if not 1 <= l <= model.L:
        raise CodeRangeError(f"Prefix length {l} outside [1, {model.L}]")
    indices = unpack_codes(codes, model.L, model.m)[:, :l]
    _check_indices(indices, model)
    total = np.zeros((indices.shape[0], model.dim))
    for layer in range(l):
        total = total + model.codebooks[layer].codewords[indices[:, layer]]
    return total


def reconstruction_errors(features, db: EncodedDatabase, model: ProgressiveModel) -> np.ndarray:
    """N x L squared errors |v - decode(code, l)|^2 for every prefix length"""
    V = model.embed(features)
    return np.stack([np.sum((V - decode_codes(db.codes, model, l)) ** 2, axis=1)
                     for l in range(1, model.L + 1)], axis=1)

