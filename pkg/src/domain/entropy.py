import logging
from typing import List, Sequence, Tuple, Optional

import numpy as np

from infra.exceptions import EmptyInputError, ValidationError
from domain.models import EntropyReport
from domain.dataset import ConditionalHistogram
from domain.codes import CodeShape, length_matrix

logger = logging.getLogger("System")

# 엔트로피 표의 컨텍스트 사다리 (공집합 -> 5개 컨텍스트)
CONTEXT_LADDER: Tuple[Tuple[str, ...], ...] = (
    (),
    ("L",),
    ("L", "U"),
    ("L", "U", "UL"),
    ("L", "U", "UR", "UL"),
    ("L", "U", "BL", "UR", "UL"),
)


def miller_madow(nonzero_bins: int, samples: int) -> float:
    """(m - 1) / (2B)"""
    if samples <= 0:
        raise ValidationError("Miller-Madow correction needs a positive sample count")
    return (nonzero_bins - 1) / (2 * samples)


def _report(hist: ConditionalHistogram, bits: float) -> EntropyReport:
    bins = hist.nonzero_bins()
    return EntropyReport(
        bits_per_symbol=bits,
        context_set=hist.context_set,
        mm_correction=miller_madow(bins, hist.total),
        samples_used=hist.total,
        nonzero_bins=bins,
        theoretical_bins=hist.k ** (len(hist.context_set) + 1),
    )


def entropy(hist: ConditionalHistogram) -> EntropyReport:
    """경험적 조건부 엔트로피 H(IPM | context_set), 0 log 0 = 0"""
    total = hist.total
    if total <= 0:
        raise EmptyInputError("histogram")
    counts = hist.counts.astype(np.float64)
    cell = counts.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(counts > 0, counts / np.where(cell > 0, cell, 1), 1.0)
        terms = np.where(counts > 0, counts * np.log2(cond), 0.0)
    bits = max(0.0, float(-terms.sum() / total))
    logger.debug(f"[Entropy:H] contexts={hist.context_set} bits={bits:.6f}")
    return _report(hist, bits)


def cell_code_costs(hist: ConditionalHistogram, codes: Sequence[CodeShape]) -> np.ndarray:
    """
    (n_cells, n_codes) 정수 비트 합.
    각 셀에서 모드를 빈도 내림차순으로 정렬하고 가장 짧은 코드워드부터 할당.
    """
    lengths = length_matrix(codes)
    if lengths.shape[1] != hist.k:
        raise ValidationError(f"code set covers {lengths.shape[1]} symbols, histogram has k={hist.k}")
    ranked = -np.sort(-hist.counts, axis=1)
    return ranked @ lengths.T


def code_based_entropy(hist: ConditionalHistogram, codes: Sequence[CodeShape]) -> EntropyReport:
    """셀마다 코드 집합의 최적 코드를 고른 기대 길이"""
    if not codes:
        raise EmptyInputError("code set")
    for shape in codes:
        shape.validate(hist.k)
    if hist.total <= 0:
        raise EmptyInputError("histogram")
    best = cell_code_costs(hist, codes).min(axis=1)
    bits = float(best.sum()) / hist.total
    logger.debug(f"[Entropy:CBE] contexts={hist.context_set} codes={len(codes)} bits={bits:.6f}")
    return _report(hist, bits)


def entropy_table(hist: ConditionalHistogram, codes: Optional[Sequence[CodeShape]] = None,
                  ladder: Sequence[Tuple[str, ...]] = CONTEXT_LADDER) -> List[dict]:
    """컨텍스트 사다리의 각 단계에 대한 (H, MM[, CBE]) 행"""
    rows = []
    for subset in ladder:
        if any(c not in hist.context_set for c in subset):
            continue
        sub = hist.marginalize(subset)
        report = entropy(sub)
        row = {
            "contexts": ",".join(subset) or "-",
            "entropy": report.bits_per_symbol,
            "mm": report.mm_correction,
            "nonzero_bins": report.nonzero_bins,
            "samples": report.samples_used,
        }
        if codes:
            row["code_based_entropy"] = code_based_entropy(sub, codes).bits_per_symbol
        rows.append(row)
    return rows
