import re
import math
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import List, Dict, Optional, Sequence, Tuple, Iterable

import numpy as np

from infra.exceptions import ValidationError, EmptyInputError
from domain.models import SymbolSpace

logger = logging.getLogger("System")

_GROUP_RE = re.compile(r"^\(?\s*(\d+)\s*[x×*]\s*(\d+)\s*\)?$")


# =============================================================================
# CodeShape
# =============================================================================

@dataclass(frozen=True)
class CodeShape:
    """
    완전 prefix code 의 모양: MPM 코드워드 길이 + FL 나머지 그룹 (length, count).
    표기: 2+3+3+(6x32)
    """
    mpm_lengths: Tuple[int, ...]
    fl_groups: Tuple[Tuple[int, int], ...]

    @property
    def num_mpm(self) -> int:
        return len(self.mpm_lengths)

    @property
    def k(self) -> int:
        return self.num_mpm + sum(c for _, c in self.fl_groups)

    @property
    def max_length(self) -> int:
        return max([*self.mpm_lengths, *(l for l, _ in self.fl_groups)])

    def rank_lengths(self) -> np.ndarray:
        """rank 0..k-1 의 코드워드 길이 (rank 순서)"""
        out = list(self.mpm_lengths)
        for length, count in self.fl_groups:
            out.extend([length] * count)
        return np.array(out, dtype=np.int64)

    def sorted_lengths(self) -> np.ndarray:
        return np.sort(self.rank_lengths())

    def is_monotone(self) -> bool:
        lengths = self.rank_lengths()
        return bool(np.all(lengths[1:] >= lengths[:-1]))

    def kraft(self) -> Fraction:
        return kraft_sum(self)

    def validate(self, k: Optional[int] = None):
        """불변식 검사. 위반 시 ValidationError"""
        if any(l < 1 for l in self.mpm_lengths) or any(l < 1 or c < 1 for l, c in self.fl_groups):
            raise ValidationError(f"{self}: lengths and counts must be positive")
        if list(self.mpm_lengths) != sorted(self.mpm_lengths):
            raise ValidationError(f"{self}: MPM lengths must be nondecreasing")
        fl_lengths = [l for l, _ in self.fl_groups]
        if any(b <= a for a, b in zip(fl_lengths, fl_lengths[1:])):
            raise ValidationError(f"{self}: FL group lengths must be strictly increasing")
        if k is not None and self.k != k:
            raise ValidationError(f"{self}: covers {self.k} symbols, expected {k}")
        if kraft_sum(self) != 1:
            raise ValidationError(f"{self}: Kraft sum {kraft_sum(self)} != 1")

    def __str__(self) -> str:
        parts = [str(l) for l in self.mpm_lengths] + [f"({l}x{c})" for l, c in self.fl_groups]
        return "+".join(parts)

    @classmethod
    def parse(cls, text: str) -> "CodeShape":
        """'2+3+3+(6x32)' -> CodeShape. '×' 도 허용"""
        mpm: List[int] = []
        groups: List[Tuple[int, int]] = []
        for token in (t.strip() for t in text.strip().split("+")):
            if not token:
                raise ValidationError(f"empty term in code '{text}'")
            match = _GROUP_RE.match(token)
            if match:
                groups.append((int(match.group(1)), int(match.group(2))))
            elif token.isdigit():
                if groups:
                    raise ValidationError(f"MPM length after FL group in '{text}'")
                mpm.append(int(token))
            else:
                raise ValidationError(f"bad term '{token}' in code '{text}'")
        if not groups:
            raise ValidationError(f"code '{text}' has no FL group")
        # 같은 길이의 인접 그룹은 병합 ((7x8)+(7x16) -> (7x24))
        merged: List[Tuple[int, int]] = []
        for length, count in groups:
            if merged and merged[-1][0] == length:
                merged[-1] = (length, merged[-1][1] + count)
            else:
                merged.append((length, count))
        return cls(tuple(mpm), tuple(merged))


HEVC_ANCHOR_SHAPE = CodeShape((2, 3, 3), ((6, 32),))
JEM_ANCHOR_SHAPE = CodeShape((2, 3, 4, 5, 6, 6), ((6, 16), (7, 19), (8, 26)))


def kraft_sum(shape: CodeShape) -> Fraction:
    total = sum((Fraction(1, 2 ** l) for l in shape.mpm_lengths), Fraction(0))
    total += sum((Fraction(c, 2 ** l) for l, c in shape.fl_groups), Fraction(0))
    return total


def fixed_length_shape(k: int) -> CodeShape:
    """k 가 2의 거듭제곱일 때의 고정 길이 코드 (M=1 표기)"""
    bits = int(math.log2(k)) if k >= 2 else 0
    if bits == 0 or 2 ** bits != k:
        raise ValidationError(f"k={k} is not a power of two >= 2")
    return CodeShape((bits,), ((bits, k - 1),))


# =============================================================================
# Enumeration
# =============================================================================

class CodeEnumerator:
    """
    [CODES-ENUM] 완전 코드 열거.
    규칙: MPM 길이 비감소, FL 그룹 길이 순증가, 최대 MPM 길이 <= 첫 FL 그룹 길이
    (rank 별 길이가 비감소), 모든 길이 <= max_len, 그룹 수 <= max_fl_groups.
    정수 가중치 2^(max_len - l) 로 Kraft 합을 정확히 계산합니다.
    """

    def __init__(self, space: SymbolSpace):
        self.space = space
        self._prefix = "[Codes:Enumerator]"

    def enumerate(self, mpm_counts: Iterable[int], max_len: int, max_fl_groups: int = 1) -> List[CodeShape]:
        method_prefix = f"{self._prefix}:enumerate"
        counts = sorted(set(int(m) for m in mpm_counts))
        if not counts:
            raise ValidationError("mpm_counts must be nonempty")
        k = self.space.k
        if max_len < math.ceil(math.log2(k)) or max_fl_groups < 1:
            logger.warning(f"{method_prefix} infeasible parameters k={k} max_len={max_len}")
            return []

        shapes: List[CodeShape] = []
        capacity = 2 ** max_len
        for m in counts:
            remaining = k - m
            if m < 0 or remaining < 1:
                continue
            for mpm in self._mpm_vectors(m, max_len, capacity, remaining):
                used = sum(2 ** (max_len - l) for l in mpm)
                first = mpm[-1] if mpm else 1
                for groups in self._fl_groups(remaining, capacity - used, first, max_len, max_fl_groups):
                    shapes.append(CodeShape(tuple(mpm), tuple(groups)))

        shapes = sorted(set(shapes), key=lambda s: (s.num_mpm, s.mpm_lengths, s.fl_groups))
        logger.info(f"{method_prefix} k={k} M={counts} max_len={max_len} groups<={max_fl_groups} -> {len(shapes)}")
        return shapes

    def _mpm_vectors(self, m: int, max_len: int, capacity: int, remaining: int):
        def rec(prefix: List[int], used: int):
            if len(prefix) == m:
                # 남은 용량은 나머지 심볼을 모두 수용할 수 있어야 함 (각 심볼 최소 가중치 1)
                free = capacity - used
                if free >= remaining and free <= remaining * 2 ** (max_len - (prefix[-1] if prefix else 1)):
                    yield list(prefix)
                return
            start = prefix[-1] if prefix else 1
            for length in range(start, max_len + 1):
                weight = 2 ** (max_len - length)
                left = m - len(prefix) - 1
                # 이후 MPM 은 최소 1 씩, FL 심볼도 최소 1 씩 필요
                if used + weight + left + remaining > capacity:
                    continue
                prefix.append(length)
                yield from rec(prefix, used + weight)
                prefix.pop()

        yield from rec([], 0)

    def _fl_groups(self, symbols: int, free: int, min_len: int, max_len: int, max_groups: int):
        """symbols 개 심볼을 가중치 합 free 로 채우는 그룹 열"""
        def rec(groups: List[Tuple[int, int]], symbols_left: int, free_left: int, next_len: int):
            if symbols_left == 0:
                if free_left == 0 and groups:
                    yield list(groups)
                return
            if len(groups) == max_groups or next_len > max_len:
                return
            for length in range(next_len, max_len + 1):
                weight = 2 ** (max_len - length)
                last_group = len(groups) + 1 == max_groups or length == max_len
                if last_group:
                    if symbols_left * weight == free_left:
                        groups.append((length, symbols_left))
                        yield list(groups)
                        groups.pop()
                    continue
                for count in range(1, symbols_left + 1):
                    spent = count * weight
                    if spent > free_left:
                        break
                    rest = symbols_left - count
                    # 나머지 심볼은 더 긴 길이(가중치 < weight, >= 1)로 채워야 함
                    if rest == 0:
                        if spent == free_left:
                            groups.append((length, count))
                            yield list(groups)
                            groups.pop()
                        continue
                    if not rest <= free_left - spent <= rest * (weight // 2):
                        continue
                    groups.append((length, count))
                    yield from rec(groups, rest, free_left - spent, length + 1)
                    groups.pop()

        yield from rec([], symbols, free, max(min_len, 1))


def enumerate_codes(space: SymbolSpace, mpm_counts: Iterable[int], max_len: int,
                    max_fl_groups: int = 1) -> List[CodeShape]:
    return CodeEnumerator(space).enumerate(mpm_counts, max_len, max_fl_groups)


def code_set_preset(space: SymbolSpace, purpose: str = "tree") -> List[CodeShape]:
    """
    프로파일 기본 코드 집합.
    tree: 단일 FL 그룹, k=35 -> M{3,5,7} max 8 / k=67 -> M{3,5,7,9} max 9
    dynlist: FL 그룹 최대 3, M{1..4}
    """
    max_len = 8 if space.k <= 35 else 9
    max_len = max(max_len, math.ceil(math.log2(space.k)) + 1)
    if purpose == "dynlist":
        shapes = enumerate_codes(space, range(1, 5), max_len, 3)
    elif space.k <= 35:
        shapes = enumerate_codes(space, (3, 5, 7), max_len, 1)
    else:
        shapes = enumerate_codes(space, (3, 5, 7, 9), max_len, 1)
    anchor = {35: HEVC_ANCHOR_SHAPE, 67: JEM_ANCHOR_SHAPE}.get(space.k)
    if anchor is not None and anchor not in shapes:
        shapes.append(anchor)
    return shapes


def length_matrix(codes: Sequence[CodeShape]) -> np.ndarray:
    """(n_codes, k) 정렬된 길이 행렬; 코드 비용의 벡터화 계산에 사용"""
    if not codes:
        raise EmptyInputError("code set")
    return np.stack([c.sorted_lengths() for c in codes])


# =============================================================================
# Codewords
# =============================================================================

@dataclass(frozen=True)
class CodewordTable:
    """rank -> bit string"""
    shape: CodeShape
    codewords: Tuple[str, ...]

    def lengths(self) -> List[int]:
        return [len(c) for c in self.codewords]

    def decoder(self) -> Dict[str, int]:
        return {c: r for r, c in enumerate(self.codewords)}

    def is_prefix_free(self) -> bool:
        ordered = sorted(self.codewords)
        return all(not b.startswith(a) for a, b in zip(ordered, ordered[1:]))


def _bits(value: int, width: int) -> str:
    return format(value, f"0{width}b") if width else ""


def _hevc_table() -> Tuple[str, ...]:
    return ("10", "110", "111", *(("0" + _bits(i, 5)) for i in range(32)))


def _jem_table() -> Tuple[str, ...]:
    mpm = ("10", "110", "1110", "11110", "111110", "111111")
    preferred = tuple("01" + _bits(i, 4) for i in range(16))
    other1 = tuple("00" + _bits(i, 5) for i in range(19))
    other2 = tuple("00" + _bits(i, 6) for i in range(38, 64))
    return mpm + preferred + other1 + other2


_OVERRIDES = {HEVC_ANCHOR_SHAPE: _hevc_table, JEM_ANCHOR_SHAPE: _jem_table}


def realize_codewords(shape: CodeShape) -> CodewordTable:
    """canonical prefix 코드워드 할당 (앵커 모양은 표준 비트열 그대로)"""
    if kraft_sum(shape) != 1:
        raise ValidationError(f"cannot realize incomplete code {shape}")
    if shape in _OVERRIDES:
        return CodewordTable(shape, _OVERRIDES[shape]())
    lengths = shape.rank_lengths()
    order = sorted(range(len(lengths)), key=lambda r: (lengths[r], r))
    words: List[str] = [""] * len(lengths)
    code, prev_len = 0, int(lengths[order[0]])
    for i, rank in enumerate(order):
        length = int(lengths[rank])
        if i > 0:
            code = (code + 1) << (length - prev_len)
        words[rank] = _bits(code, length)
        prev_len = length
    return CodewordTable(shape, tuple(words))


def expected_length(shape: CodeShape, probs: Sequence[float]) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if p.shape != (shape.k,):
        raise ValidationError(f"probability vector length {p.shape} != k={shape.k}")
    if abs(p.sum() - 1.0) > 1e-9 or np.any(p < 0):
        raise ValidationError("probabilities must be nonnegative and sum to 1")
    if np.any(p[1:] > p[:-1]):
        raise ValidationError("probabilities must be sorted nonincreasing")
    return float(np.dot(p, shape.sorted_lengths()))
