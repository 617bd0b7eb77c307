#!/usr/bin/env python3
"""
Unit tests for progq core types: codebooks and packed multi-length codes
"""

import os

import numpy as np
import pytest

from progq.core import (
    Codebook,
    PackedCode,
    as_feature_matrix,
    as_feature_vector,
    code_bytes,
    decode_code_section,
    encode_code_section,
    pack_code,
    pack_codes,
    prefix_code,
    prefix_codes,
    read_code_file,
    unpack_code,
    unpack_codes,
    write_code_file,
)
from progq.errors import CodeLengthError, CodeRangeError, FormatError, ShapeError


class TestFeatureValidation:
    """Test feature vector and matrix validation"""

    def test_vector_is_float64(self):
        v = as_feature_vector([1, 2, 3], dim=3)
        assert v.dtype == np.float64

    def test_vector_wrong_dimension(self):
        with pytest.raises(ShapeError) as exc:
            as_feature_vector([1.0, 2.0], dim=3)
        assert exc.value.details == {"expected": 3, "actual": 2}

    def test_matrix_promotes_single_row(self):
        assert as_feature_matrix([1.0, 2.0]).shape == (1, 2)

    def test_matrix_names_first_bad_row(self):
        X = np.zeros((4, 2))
        X[2, 1] = np.nan
        with pytest.raises(ShapeError) as exc:
            as_feature_matrix(X)
        assert exc.value.details["index"] == 2


class TestCodebook:
    """Test codebook validation"""

    def test_properties(self):
        cb = Codebook(np.zeros((8, 3)), layer_id=2)
        assert (cb.K, cb.dim, cb.bits, len(cb)) == (8, 3, 3, 8)

    def test_single_codeword_allowed(self):
        assert Codebook(np.ones((1, 4))).bits == 0

    def test_non_power_of_two_rejected(self):
        with pytest.raises(CodeRangeError):
            Codebook(np.zeros((6, 2)))

    def test_non_finite_rejected(self):
        cw = np.zeros((2, 2))
        cw[1, 0] = np.inf
        with pytest.raises(ShapeError):
            Codebook(cw)


class TestPacking:
    """Test big-endian packing of m-bit fields"""

    def test_known_bits(self):
        # 3, 0, 2, 1 in two bits each: 11 00 10 01
        code = pack_code([3, 0, 2, 1], 2)
        assert code.bits == bytes([0b11001001])
        assert code.nbits == 8

    def test_odd_width_padding(self):
        # 5, 1 in three bits: 101 001 then two zero pad bits
        code = pack_code([5, 1], 3)
        assert code.bits == bytes([0b10100100])
        assert code_bytes(2, 3) == 1

    def test_unpack_inverts_pack(self, rng):
        idx = rng.integers(0, 16, size=(50, 4))
        assert np.array_equal(unpack_codes(pack_codes(idx, 4), 4, 4), idx)

    def test_index_too_wide(self):
        with pytest.raises(CodeRangeError) as exc:
            pack_codes([[1, 4]], 2)
        assert exc.value.details["layer"] == 2

    def test_zero_bit_fields_rejected(self):
        with pytest.raises(CodeRangeError):
            pack_code([0, 0], 0)

    def test_truncated_code(self):
        with pytest.raises(CodeLengthError):
            PackedCode(b"\x00", L=4, m=4)
        with pytest.raises(CodeLengthError):
            unpack_code(b"\x00", 4, 4)

    def test_unpack_plain_bytes(self):
        assert unpack_code(bytes([0x12, 0x34]), 4, 4) == [1, 2, 3, 4]


class TestPrefixes:
    """Test that the first l*m bits are the code of the first l layers"""

    def test_prefix_matches_direct_pack(self, rng):
        for _ in range(20):
            idx = [int(i) for i in rng.integers(0, 32, size=4)]
            full = pack_code(idx, 5)
            for l in range(1, 5):
                assert prefix_code(full, l, 5) == pack_code(idx[:l], 5)

    def test_prefix_bits_are_leading_bits(self, rng):
        idx = rng.integers(0, 8, size=(10, 5))
        full = np.unpackbits(pack_codes(idx, 3), axis=1)
        short = np.unpackbits(prefix_codes(pack_codes(idx, 3), 5, 2, 3), axis=1)
        assert np.array_equal(short[:, :6], full[:, :6])

    def test_full_prefix_is_identity(self):
        code = pack_code([1, 2, 3], 2)
        assert prefix_code(code, 3, 2) is code

    def test_prefix_out_of_range(self):
        code = pack_code([1, 2], 2)
        with pytest.raises(CodeRangeError):
            prefix_code(code, 0, 2)
        with pytest.raises(CodeRangeError):
            prefix_codes(pack_codes([[1, 2]], 2), 2, 3, 2)

    def test_prefix_bit_width_must_match(self):
        code = pack_code([1, 2, 3], 2)
        with pytest.raises(CodeRangeError) as exc:
            prefix_code(code, 2, 3)
        assert exc.value.details == {"m": 3, "code_m": 2}


class TestCodeFile:
    """Test the code file container"""

    def test_write_read(self, tmp_path, rng):
        codes = pack_codes(rng.integers(0, 16, size=(7, 3)), 4)
        path = os.path.join(tmp_path, "db.pqc")
        write_code_file(path, codes, 3, 4)
        back, L, m = read_code_file(path)
        assert (L, m) == (3, 4)
        assert np.array_equal(back, codes)

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_code_section(b"XXXX" + bytes(12))

    def test_truncated_body(self, rng):
        codes = pack_codes(rng.integers(0, 4, size=(3, 2)), 2)
        blob = encode_code_section(codes, 2, 2)
        with pytest.raises(CodeLengthError):
            decode_code_section(blob[:-1])

    def test_short_header(self):
        with pytest.raises(CodeLengthError):
            decode_code_section(b"PQC1")
