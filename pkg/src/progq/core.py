"""
Core value types shared by every other module: feature vectors, codebooks
and packed multi-length codes.

Codes are big-endian m-bit fields, layer 1 first, so the first l*m bits of
a code are always the valid code of the first l layers.
"""

import logging
import struct
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CodeLengthError, CodeRangeError, FormatError, ShapeError

logger = logging.getLogger(__name__)

CODE_MAGIC = b"PQC1"
_CODE_HEADER = struct.Struct("<4sIII")


def as_feature_vector(x, dim: Optional[int] = None) -> np.ndarray:
    """Validate a single feature vector and return it as float64"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ShapeError(f"Feature vector must be 1-D, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise ShapeError(f"Expected dimension {dim}, got {arr.shape[0]}",
                         {"expected": dim, "actual": arr.shape[0]})
    if not np.all(np.isfinite(arr)):
        raise ShapeError("Feature vector contains NaN or Inf")
    return arr


def as_feature_matrix(X, dim: Optional[int] = None) -> np.ndarray:
    """Validate an N x D batch of feature vectors and return it as float64"""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"Feature matrix must be 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ShapeError(f"Expected dimension {dim}, got {arr.shape[1]}",
                         {"expected": dim, "actual": arr.shape[1]})
    bad = ~np.all(np.isfinite(arr), axis=1)
    if bad.any():
        first = int(np.argmax(bad))
        raise ShapeError(f"Feature row {first} contains NaN or Inf", {"index": first})
    return arr


def code_bytes(L: int, m: int) -> int:
    """Bytes needed to store L fields of m bits"""
    return (L * m + 7) // 8


@dataclass(frozen=True)
class Codebook:
    """K codewords of dimension D for one quantization layer.

    K must be a power of two. K == 1 is allowed for the quantizer maths but
    carries zero bits, so it cannot be packed into a code.
    """

    codewords: np.ndarray
    layer_id: int = 1

    def __post_init__(self):
        cw = np.asarray(self.codewords, dtype=np.float64)
        if cw.ndim != 2 or cw.shape[0] == 0:
            raise ShapeError(f"Codebook must be a non-empty K x D array, got shape {cw.shape}")
        K = cw.shape[0]
        if K & (K - 1):
            raise CodeRangeError(f"Codebook size K={K} is not a power of two", {"K": K})
        if not np.all(np.isfinite(cw)):
            raise ShapeError(f"Codebook for layer {self.layer_id} contains NaN or Inf")
        object.__setattr__(self, "codewords", cw)

    @property
    def K(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    @property
    def bits(self) -> int:
        return self.K.bit_length() - 1

    def __len__(self) -> int:
        return self.K


@dataclass(frozen=True)
class PackedCode:
    """L*m-bit code stored as bytes, final byte zero-padded"""

    bits: bytes
    L: int
    m: int

    def __post_init__(self):
        if len(self.bits) < code_bytes(self.L, self.m):
            raise CodeLengthError(
                f"Code holds {len(self.bits) * 8} bits, needs {self.L * self.m}",
                {"L": self.L, "m": self.m, "bytes": len(self.bits)},
            )

    @property
    def nbits(self) -> int:
        return self.L * self.m

    def hex(self) -> str:
        return self.bits.hex()


def _check_bits(m: int) -> None:
    if m < 1:
        raise CodeRangeError(f"Bits per layer must be >= 1, got {m}", {"m": m})


def pack_codes(indices, m: int) -> np.ndarray:
    """Pack an N x L index matrix into an N x ceil(L*m/8) uint8 matrix"""
    _check_bits(m)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim == 1:
        idx = idx[None, :]
    if idx.ndim != 2 or idx.shape[1] == 0:
        raise ShapeError(f"Index matrix must be N x L with L >= 1, got shape {idx.shape}")
    bad = (idx < 0) | (idx >= (1 << m))
    if bad.any():
        row, col = (int(v) for v in np.argwhere(bad)[0])
        raise CodeRangeError(
            f"Index {int(idx[row, col])} at layer {col + 1} does not fit in {m} bits",
            {"row": row, "layer": col + 1, "index": int(idx[row, col]), "m": m},
        )
    N, L = idx.shape
    shifts = np.arange(m - 1, -1, -1, dtype=np.int64)
    bit_matrix = ((idx[:, :, None] >> shifts) & 1).astype(np.uint8).reshape(N, L * m)
    return np.packbits(bit_matrix, axis=1)


def unpack_codes(codes, L: int, m: int) -> np.ndarray:
    """Inverse of pack_codes: N x nbytes uint8 -> N x L int64 indices"""
    _check_bits(m)
    arr = np.asarray(codes, dtype=np.uint8)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[1] * 8 < L * m:
        raise CodeLengthError(
            f"Codes hold {arr.shape[1] * 8} bits, need {L * m}",
            {"L": L, "m": m, "bytes": arr.shape[1]},
        )
    N = arr.shape[0]
    bit_matrix = np.unpackbits(arr, axis=1)[:, : L * m].reshape(N, L, m).astype(np.int64)
    weights = np.int64(1) << np.arange(m - 1, -1, -1, dtype=np.int64)
    return (bit_matrix * weights).sum(axis=2)


def pack_code(indices: Sequence[int], m: int) -> PackedCode:
    """Pack one index per layer, layer 1 first"""
    row = pack_codes(np.asarray(list(indices), dtype=np.int64)[None, :], m)[0]
    return PackedCode(row.tobytes(), len(indices), m)


def unpack_code(code: Union[PackedCode, bytes], L: int, m: int) -> List[int]:
    raw = code.bits if isinstance(code, PackedCode) else bytes(code)
    if len(raw) * 8 < L * m:
        raise CodeLengthError(f"Code holds {len(raw) * 8} bits, needs {L * m}",
                              {"L": L, "m": m, "bytes": len(raw)})
    row = np.frombuffer(raw, dtype=np.uint8)[None, :]
    return [int(v) for v in unpack_codes(row, L, m)[0]]


def prefix_code(code: PackedCode, l: int, m: int) -> PackedCode:
    """First l*m bits of a code, i.e. the code of the first l layers"""
    if m != code.m:
        raise CodeRangeError(f"Code packs {code.m} bits per layer, not {m}", {"m": m, "code_m": code.m})
    if not 1 <= l <= code.L:
        raise CodeRangeError(f"Prefix length {l} outside [1, {code.L}]", {"l": l, "L": code.L})
    if l == code.L:
        return code
    return pack_code(unpack_code(code, code.L, m)[:l], m)


def prefix_codes(codes: np.ndarray, L: int, l: int, m: int) -> np.ndarray:
    """Batched prefix_code over an N x nbytes matrix"""
    if not 1 <= l <= L:
        raise CodeRangeError(f"Prefix length {l} outside [1, {L}]", {"l": l, "L": L})
    return pack_codes(unpack_codes(codes, L, m)[:, :l], m)


# --- code file format ---

def encode_code_section(codes: np.ndarray, L: int, m: int) -> bytes:
    arr = np.ascontiguousarray(codes, dtype=np.uint8)
    if arr.ndim != 2 or arr.shape[1] != code_bytes(L, m):
        raise ShapeError(f"Code matrix must be N x {code_bytes(L, m)}, got shape {arr.shape}")
    return _CODE_HEADER.pack(CODE_MAGIC, arr.shape[0], L, m) + arr.tobytes()


def decode_code_section(buffer: bytes, offset: int = 0) -> Tuple[np.ndarray, int, int, int]:
    """Parse a code section; returns (codes, L, m, offset after the section)"""
    if len(buffer) - offset < _CODE_HEADER.size:
        raise CodeLengthError("Code file shorter than its header")
    magic, N, L, m = _CODE_HEADER.unpack_from(buffer, offset)
    if magic != CODE_MAGIC:
        raise FormatError(f"Bad code file magic {magic!r}", {"expected": CODE_MAGIC.decode()})
    _check_bits(m)
    start = offset + _CODE_HEADER.size
    width = code_bytes(L, m)
    end = start + N * width
    if len(buffer) < end:
        raise CodeLengthError(f"Code file truncated: {N} records of {width} bytes declared",
                              {"N": N, "available": len(buffer) - start})
    codes = np.frombuffer(buffer, dtype=np.uint8, count=N * width, offset=start).reshape(N, width).copy()
    return codes, L, m, end


def write_code_file(path: str, codes: np.ndarray, L: int, m: int) -> None:
    with open(path, "wb") as f:
        f.write(encode_code_section(codes, L, m))
    logger.info(f"Wrote {len(codes)} codes ({L}x{m} bits) to {path}")


def read_code_file(path: str) -> Tuple[np.ndarray, int, int]:
    with open(path, "rb") as f:
        buffer = f.read()
    codes, L, m, _ = decode_code_section(buffer)
    return codes, L, m
