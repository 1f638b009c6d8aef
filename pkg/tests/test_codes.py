import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from infra.exceptions import ValidationError
from domain.models import SymbolSpace
from domain.codes import (
    CodeShape, HEVC_ANCHOR_SHAPE, JEM_ANCHOR_SHAPE, enumerate_codes, code_set_preset, realize_codewords,
    fixed_length_shape, expected_length, kraft_sum, length_matrix
)


def _runs(lengths):
    return tuple((l, len(list(g))) for l, g in itertools.groupby(lengths))


def _brute_force_shapes(k, mpm_counts, max_len, max_groups):
    """비감소 길이 벡터 중 Kraft == 1 인 것을 (MPM, FL run) 으로 분해"""
    out = set()
    for lengths in itertools.combinations_with_replacement(range(1, max_len + 1), k):
        if sum(Fraction(1, 2 ** l) for l in lengths) != 1:
            continue
        for m in mpm_counts:
            if m >= k:
                continue
            groups = _runs(lengths[m:])
            if len(groups) <= max_groups:
                out.add(CodeShape(tuple(lengths[:m]), groups))
    return out


# =============================================================================
# Shapes
# =============================================================================

def test_anchor_shapes_are_complete():
    assert HEVC_ANCHOR_SHAPE.k == 35
    assert JEM_ANCHOR_SHAPE.k == 67
    assert kraft_sum(HEVC_ANCHOR_SHAPE) == 1
    assert kraft_sum(JEM_ANCHOR_SHAPE) == 1
    HEVC_ANCHOR_SHAPE.validate(35)
    JEM_ANCHOR_SHAPE.validate(67)


def test_parse_and_format():
    shape = CodeShape.parse("2+3+3+(6x32)")
    assert shape == HEVC_ANCHOR_SHAPE
    assert str(shape) == "2+3+3+(6x32)"
    assert CodeShape.parse("1+(7x8)+(7x16)") == CodeShape((1,), ((7, 24),))
    assert CodeShape.parse("2 + 3 + (4×2)").fl_groups == ((4, 2),)


@pytest.mark.parametrize("text", ["2+3", "(6x32)+2", "2+a+(6x32)", "2++(6x32)"])
def test_parse_rejects_malformed(text):
    with pytest.raises(ValidationError):
        CodeShape.parse(text)


def test_validate_rejects_incomplete_and_wrong_k():
    with pytest.raises(ValidationError):
        CodeShape((2, 3, 3), ((6, 31),)).validate(34)  # Kraft < 1
    with pytest.raises(ValidationError):
        HEVC_ANCHOR_SHAPE.validate(67)
    with pytest.raises(ValidationError):
        CodeShape((3, 2), ((2, 2),)).validate()


def test_rank_lengths_and_monotonicity():
    assert HEVC_ANCHOR_SHAPE.rank_lengths().tolist() == [2, 3, 3] + [6] * 32
    assert HEVC_ANCHOR_SHAPE.is_monotone()
    # MPM 이 FL 보다 긴 모양은 rank 순서로는 비단조
    odd = CodeShape((3, 3), ((2, 3),))
    assert not odd.is_monotone()
    assert odd.sorted_lengths().tolist() == [2, 2, 2, 3, 3]


def test_fixed_length_shape():
    shape = fixed_length_shape(8)
    assert str(shape) == "3+(3x7)"
    assert shape.kraft() == 1
    with pytest.raises(ValidationError):
        fixed_length_shape(6)


# =============================================================================
# Enumeration
# =============================================================================

def test_hevc_three_mpm_single_group_enumeration():
    shapes = enumerate_codes(SymbolSpace.hevc(), [3], 8, 1)
    assert [str(s) for s in shapes] == [
        "1+2+3+(8x32)",
        "1+3+3+(7x32)",
        "2+2+2+(7x32)",
        "2+3+3+(6x32)",
    ]


def test_jem_three_mpm_needs_nine_bit_cap():
    jem = SymbolSpace.jem()
    assert [str(s) for s in enumerate_codes(jem, [3], 8, 1)] == [
        "1+3+3+(8x64)",
        "2+2+2+(8x64)",
        "2+3+3+(7x64)",
    ]
    assert [str(s) for s in enumerate_codes(jem, [3], 9, 1)] == [
        "1+2+3+(9x64)",
        "1+3+3+(8x64)",
        "2+2+2+(8x64)",
        "2+3+3+(7x64)",
    ]


# 단일 FL 그룹 기준 측정값; 문헌 수치 (8, 43 / 8, 47, 89) 와의 차이는 DESIGN.md 참고
@pytest.mark.parametrize("space,max_len,m,count", [
    (SymbolSpace.hevc(), 8, 3, 4),
    (SymbolSpace.hevc(), 8, 5, 11),
    (SymbolSpace.hevc(), 8, 7, 36),
    (SymbolSpace.jem(), 8, 3, 3),
    (SymbolSpace.jem(), 8, 5, 7),
    (SymbolSpace.jem(), 8, 7, 25),
    (SymbolSpace.jem(), 8, 9, 51),
    (SymbolSpace.jem(), 9, 3, 4),
    (SymbolSpace.jem(), 9, 5, 11),
])
def test_single_group_enumeration_counts(space, max_len, m, count):
    assert len(enumerate_codes(space, [m], max_len, 1)) == count


@pytest.mark.parametrize("k,mpm,max_len,groups", [
    (4, (1, 2), 3, 2),
    (6, (1, 2, 3), 4, 2),
    (8, (1, 2, 3), 4, 3),
    (10, (2, 3), 5, 1),
])
def test_enumeration_matches_brute_force(k, mpm, max_len, groups):
    got = set(enumerate_codes(SymbolSpace(k), mpm, max_len, groups))
    assert got == _brute_force_shapes(k, mpm, max_len, groups)


def test_enumeration_is_empty_below_log2_k():
    assert enumerate_codes(SymbolSpace.hevc(), [3], 5, 1) == []


def test_enumerated_shapes_are_valid_and_unique():
    shapes = enumerate_codes(SymbolSpace.hevc(), [3, 5, 7], 8, 1)
    assert len(shapes) == len(set(shapes))
    for shape in shapes:
        shape.validate(35)
        assert shape.is_monotone()
        assert shape.max_length <= 8


def test_presets_contain_anchor_codes():
    hevc = code_set_preset(SymbolSpace.hevc(), "tree")
    assert HEVC_ANCHOR_SHAPE in hevc
    assert {s.num_mpm for s in hevc} <= {3, 5, 7}
    jem = code_set_preset(SymbolSpace.jem(), "tree")
    assert JEM_ANCHOR_SHAPE in jem
    dyn = code_set_preset(SymbolSpace(16), "dynlist")
    assert {s.num_mpm for s in dyn} <= {1, 2, 3, 4}
    assert all(len(s.fl_groups) <= 3 for s in dyn)


def test_length_matrix_rows_are_sorted():
    codes = [HEVC_ANCHOR_SHAPE, CodeShape.parse("1+2+3+(8x32)")]
    matrix = length_matrix(codes)
    assert matrix.shape == (2, 35)
    assert np.all(np.diff(matrix, axis=1) >= 0)


# =============================================================================
# Codewords
# =============================================================================

def test_hevc_codewords():
    table = realize_codewords(HEVC_ANCHOR_SHAPE)
    assert table.codewords[:3] == ("10", "110", "111")
    assert table.codewords[3] == "000000"
    assert table.codewords[34] == "011111"
    assert table.is_prefix_free()


def test_jem_codewords():
    table = realize_codewords(JEM_ANCHOR_SHAPE)
    assert table.codewords[:6] == ("10", "110", "1110", "11110", "111110", "111111")
    assert table.codewords[6] == "010000"
    assert table.codewords[22] == "0000000"
    assert table.codewords[41] == "00100110"
    assert table.lengths() == JEM_ANCHOR_SHAPE.rank_lengths().tolist()
    assert len(set(table.codewords)) == 67
    assert table.is_prefix_free()


@given(st.sampled_from(enumerate_codes(SymbolSpace(19), [1, 2, 3], 6, 3)))
def test_canonical_codewords_follow_rank_lengths(shape):
    table = realize_codewords(shape)
    assert table.lengths() == shape.rank_lengths().tolist()
    assert table.is_prefix_free()
    assert len(table.decoder()) == shape.k


def test_realize_rejects_incomplete_code():
    with pytest.raises(ValidationError):
        realize_codewords(CodeShape((2, 3, 3), ((6, 31),)))


def test_expected_length():
    shape = fixed_length_shape(4)
    assert expected_length(shape, [0.25] * 4) == pytest.approx(2.0)
    assert expected_length(HEVC_ANCHOR_SHAPE, [1.0] + [0.0] * 34) == pytest.approx(2.0)
    with pytest.raises(ValidationError):
        expected_length(shape, [0.1, 0.2, 0.3, 0.4])
