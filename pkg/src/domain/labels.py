import re
import heapq
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, List, Dict, Optional, Sequence, Tuple, Iterable, FrozenSet

import numpy as np

from infra.exceptions import ValidationError, NoLabellingError
from domain.models import SymbolSpace, ContextTuple, CONTEXT_NAMES, UNAVAILABLE, DC
from domain.codes import CodeShape

logger = logging.getLogger("System")

Columns = Dict[str, np.ndarray]

_CTX_RE = re.compile(r"^(L|U|BL|UR|UL|min|max)([+-]\d+)?$")
_NUM_RE = re.compile(r"^#(\d+)$")


def context_columns(contexts: Sequence[ContextTuple]) -> Columns:
    table = np.array([c.values() for c in contexts], dtype=np.int64).reshape(len(contexts), len(CONTEXT_NAMES))
    return {name: table[:, i] for i, name in enumerate(CONTEXT_NAMES)}


def apply_unavailable_rule(columns: Columns, rule: str) -> Columns:
    """'dc': -1 -> DC, 'keep': 그대로"""
    if rule == "keep":
        return columns
    if rule != "dc":
        raise ValidationError(f"unknown unavailable rule '{rule}'")
    return {name: np.where(col == UNAVAILABLE, DC, col) for name, col in columns.items()}


def _offset(base: np.ndarray, offset: int, space: SymbolSpace) -> np.ndarray:
    if offset == 0:
        return base
    angular = (base >= space.angular_min) & (base <= space.angular_max)
    wrapped = space.angular_min + np.mod(base - space.angular_min + offset, space.num_angular)
    return np.where(angular, wrapped, UNAVAILABLE)


# =============================================================================
# Label
# =============================================================================

@dataclass(frozen=True)
class Label:
    """
    MPM 슬롯을 채우는 predictor.
    kind: num | ctx | min | max | abs1min | mean
    """
    kind: str
    ref: str = ""
    offset: int = 0
    value: int = 0

    @classmethod
    def numeric(cls, mode: int) -> "Label":
        return cls("num", value=mode)

    @classmethod
    def ctx(cls, name: str, offset: int = 0) -> "Label":
        if name not in CONTEXT_NAMES:
            raise ValidationError(f"unknown context '{name}'")
        return cls("ctx", ref=name, offset=offset)

    @classmethod
    def min_lu(cls, offset: int = 0) -> "Label":
        return cls("min", offset=offset)

    @classmethod
    def max_lu(cls, offset: int = 0) -> "Label":
        return cls("max", offset=offset)

    @classmethod
    def abs_one_minus_min(cls) -> "Label":
        return cls("abs1min")

    @classmethod
    def mean_lu(cls) -> "Label":
        return cls("mean")

    @property
    def contexts(self) -> Tuple[str, ...]:
        if self.kind == "ctx":
            return (self.ref,)
        if self.kind == "num":
            return ()
        return ("L", "U")

    def __str__(self) -> str:
        if self.kind == "num":
            return f"#{self.value}"
        if self.kind == "abs1min":
            return "|1-min|"
        if self.kind == "mean":
            return "mean"
        base = self.ref if self.kind == "ctx" else self.kind
        return f"{base}{self.offset:+d}" if self.offset else base

    @classmethod
    def parse(cls, text: str) -> "Label":
        token = text.strip()
        if token == "|1-min|":
            return cls.abs_one_minus_min()
        if token == "mean":
            return cls.mean_lu()
        num = _NUM_RE.match(token)
        if num:
            return cls.numeric(int(num.group(1)))
        match = _CTX_RE.match(token)
        if not match:
            raise ValidationError(f"cannot parse label '{text}'")
        base, off = match.group(1), int(match.group(2) or 0)
        if base == "min":
            return cls.min_lu(off)
        if base == "max":
            return cls.max_lu(off)
        return cls.ctx(base, off)

    def evaluate_columns(self, columns: Columns, space: SymbolSpace) -> np.ndarray:
        """벡터화 평가; 결과는 모드 인덱스 또는 -1"""
        n = len(next(iter(columns.values())))
        if self.kind == "num":
            value = self.value if space.is_valid_mode(self.value) else UNAVAILABLE
            return np.full(n, value, dtype=np.int64)
        if self.kind == "ctx":
            return _offset(columns[self.ref], self.offset, space)
        l, u = columns["L"], columns["U"]
        both = (l != UNAVAILABLE) & (u != UNAVAILABLE)
        if self.kind in ("min", "max"):
            base = np.minimum(l, u) if self.kind == "min" else np.maximum(l, u)
            return np.where(both, _offset(base, self.offset, space), UNAVAILABLE)
        if self.kind == "abs1min":
            return np.where(both, np.abs(1 - np.minimum(l, u)), UNAVAILABLE)
        if self.kind == "mean":
            angular = both & (l >= space.angular_min) & (u >= space.angular_min)
            return np.where(angular, (l + u) // 2, UNAVAILABLE)
        raise ValidationError(f"unknown label kind '{self.kind}'")


def eval_label(label: Label, ctx: ContextTuple, space: SymbolSpace) -> int:
    columns = {name: np.array([v], dtype=np.int64) for name, v in zip(CONTEXT_NAMES, ctx.values())}
    return int(label.evaluate_columns(columns, space)[0])


def evaluate_labels(labels: Sequence[Label], columns: Columns, space: SymbolSpace) -> np.ndarray:
    """(n_cells, n_labels) 모드 표"""
    n = len(next(iter(columns.values())))
    if not labels:
        return np.zeros((n, 0), dtype=np.int64)
    return np.stack([lab.evaluate_columns(columns, space) for lab in labels], axis=1)


def format_labelling(labelling: Sequence[Label]) -> str:
    return "{" + ", ".join(str(l) for l in labelling) + "}"


# =============================================================================
# Compatibility
# =============================================================================

@dataclass
class Compatibility:
    valid: bool
    first: Optional[Label] = None
    second: Optional[Label] = None  # None 이면 first 가 unavailable
    cell: Optional[ContextTuple] = None


def check_compatibility(labelling: Sequence[Label], leaf_cells: Sequence[ContextTuple],
                        space: SymbolSpace) -> Compatibility:
    """모든 셀에서 M 개 라벨이 서로 다른 가용 모드를 내는지 확인. 셀 순서대로 첫 충돌을 보고"""
    cells = list(leaf_cells)
    if not cells:
        raise ValidationError("leaf_cells must be nonempty")
    values = evaluate_labels(labelling, context_columns(cells), space)
    for row, ctx in zip(values, cells):
        for i, label in enumerate(labelling):
            if row[i] == UNAVAILABLE:
                return Compatibility(False, label, None, ctx)
            for j in range(i):
                if row[j] == row[i]:
                    return Compatibility(False, labelling[j], label, ctx)
    return Compatibility(True)


# =============================================================================
# Greedy label search
# =============================================================================

@dataclass
class LeafStatistics:
    """
    한 leaf 에서 후보 라벨의 요약.
    hits: 관측 셀에서 라벨 값 == 코딩된 IPM 인 샘플 수
    conflicts: 어느 셀에서든 두 라벨이 같은 가용 모드를 내면 True
    unavailable: 어느 셀에서든 라벨이 unavailable 이면 True
    """
    hits: np.ndarray
    conflicts: np.ndarray
    unavailable: np.ndarray
    samples: int
    order: np.ndarray
    values_obs: np.ndarray
    counts_obs: np.ndarray


def leaf_statistics(values_obs: np.ndarray, counts_obs: np.ndarray, values_univ: np.ndarray) -> LeafStatistics:
    n_labels = values_univ.shape[1]
    rows = np.arange(values_obs.shape[0])[:, None]
    picked = counts_obs[rows, np.clip(values_obs, 0, None)]
    hits = np.where(values_obs >= 0, picked, 0).sum(axis=0).astype(np.int64)
    unavailable = (values_univ == UNAVAILABLE).any(axis=0)
    conflicts = np.zeros((n_labels, n_labels), dtype=bool)
    for a in range(n_labels):
        col = values_univ[:, [a]]
        conflicts[a] = ((values_univ == col) & (col != UNAVAILABLE)).any(axis=0)
    np.fill_diagonal(conflicts, False)
    # 점수 내림차순, 동률은 프리셋 순서
    order = np.lexsort((np.arange(n_labels), -hits))
    return LeafStatistics(hits, conflicts, unavailable, int(counts_obs.sum()), order, values_obs, counts_obs)


def mpm_ranks(values: np.ndarray, k: int) -> np.ndarray:
    """
    (n_cells, M) MPM 모드 -> (n_cells, k) rank 표.
    j 번째 MPM 은 rank j, 나머지 모드는 오름차순으로 rank M.. (값은 서로 다른 가용 모드여야 함)
    """
    n_cells, m = values.shape
    is_mpm = np.zeros((n_cells, k), dtype=bool)
    rows = np.arange(n_cells)[:, None]
    is_mpm[rows, values] = True
    rank = m + np.cumsum(~is_mpm, axis=1) - 1
    rank[rows, values] = np.arange(m)[None, :]
    return rank


def labelling_bits(values: np.ndarray, counts: np.ndarray, shape: CodeShape) -> int:
    """정확한 정수 비트 합. values: (n_cells, M) 선택된 MPM 모드, counts: (n_cells, k)"""
    if counts.shape[0] == 0:
        return 0
    rank = mpm_ranks(values, counts.shape[1])
    return int((counts * shape.rank_lengths()[rank]).sum())


@dataclass
class LabelSearchResult:
    labelling: Tuple[Label, ...]
    indices: Tuple[int, ...]
    total_bits: int
    samples: int
    pops: List[int] = field(default_factory=list)
    nodes: int = 0

    @property
    def cost(self) -> float:
        return self.total_bits / self.samples if self.samples else 0.0


class GreedyLabelSearch:
    """
    [LABELS-GREEDY] 큐 기반 라벨 탐색.
    노드 = 제외된 라벨 집합. 노드의 리스트는 제외되지 않은 라벨 중 점수 상위 M 개.
    비용 하한 = sum(hits_j * len_j) + (N - sum hits) * FL_min.
    충돌 (a, b) 이면 a 제외 / b 제외 두 자식, unavailable 라벨이면 자식 하나.
    """

    def __init__(self, max_nodes: int = 200000):
        self.max_nodes = max_nodes
        self._prefix = "[Labels:Greedy]"

    def search(self, stats: LeafStatistics, labels: Sequence[Label], shape: CodeShape) -> Optional[LabelSearchResult]:
        method_prefix = f"{self._prefix}:search"
        m = shape.num_mpm
        if not shape.is_monotone():
            raise ValidationError(f"label search needs nondecreasing rank lengths, got {shape}")
        if len(labels) < m:
            return None
        mpm_len = np.array(shape.mpm_lengths, dtype=np.int64)
        fl_min = shape.fl_groups[0][0]
        exact_by_bound = len(shape.fl_groups) == 1
        n = stats.samples
        order = [int(i) for i in stats.order]

        def make(excluded: FrozenSet[int]):
            picks = []
            for idx in order:
                if idx not in excluded:
                    picks.append(idx)
                    if len(picks) == m:
                        break
            if len(picks) < m:
                return None
            bound = n * fl_min - int(np.dot(stats.hits[picks], fl_min - mpm_len))
            return bound, picks

        root = make(frozenset())
        if root is None:
            return None
        heap = [(root[0], (), frozenset(), root[1])]
        seen = {frozenset()}
        pops: List[int] = []
        best: Optional[Tuple[int, List[int]]] = None
        nodes = 0

        while heap:
            bound, _, excluded, picks = heapq.heappop(heap)
            if best is not None and bound >= best[0]:
                break
            pops.append(bound)
            nodes += 1
            if nodes > self.max_nodes:
                logger.warning(f"{method_prefix} node cap {self.max_nodes} reached")
                break
            conflict = self._first_conflict(stats, picks)
            if conflict is None:
                if exact_by_bound:
                    exact = bound
                else:
                    values = stats.values_obs[:, picks]
                    exact = labelling_bits(values, stats.counts_obs, shape)
                if best is None or exact < best[0]:
                    best = (exact, picks)
                if exact_by_bound:
                    break
                continue
            for drop in conflict:
                child = excluded | {drop}
                if child in seen:
                    continue
                seen.add(child)
                made = make(child)
                if made is not None:
                    heapq.heappush(heap, (made[0], tuple(sorted(child)), child, made[1]))

        if best is None:
            logger.debug(f"{method_prefix} no valid labelling after {nodes} nodes")
            return None
        bits, picks = best
        return LabelSearchResult(tuple(labels[i] for i in picks), tuple(picks), bits, n, pops, nodes)

    @staticmethod
    def _first_conflict(stats: LeafStatistics, picks: List[int]) -> Optional[Tuple[int, ...]]:
        for i, a in enumerate(picks):
            if stats.unavailable[a]:
                return (a,)
            for b in picks[:i]:
                if stats.conflicts[b, a]:
                    return (b, a)
        return None


def greedy_label_search(leaf_cells: Iterable[ContextTuple], hist, candidates: Sequence[Label],
                        shape: CodeShape, space: SymbolSpace, unavailable_rule: str = "keep",
                        require: bool = False) -> Optional[LabelSearchResult]:
    """
    leaf_cells: leaf 에 도달하는 컨텍스트 셀 (유효성 검사 범위)
    hist: 관측 빈도 (leaf_cells 를 hist.context_set 에 투영하여 매칭)
    """
    cells = list(dict.fromkeys(leaf_cells))
    if not cells:
        raise ValidationError("leaf_cells must be nonempty")
    if len(candidates) < shape.num_mpm:
        raise ValidationError(f"{len(candidates)} candidates for {shape.num_mpm} MPM slots")
    wanted = {c.project(hist.context_set) for c in cells}
    obs_idx = [i for i, key in enumerate(hist.keys) if tuple(int(v) for v in key) in wanted]
    obs_cols = {name: hist.column(name)[obs_idx] for name in CONTEXT_NAMES}
    obs_cols = apply_unavailable_rule(obs_cols, unavailable_rule)
    univ_cols = apply_unavailable_rule(context_columns(cells), unavailable_rule)
    stats = leaf_statistics(evaluate_labels(candidates, obs_cols, space), hist.counts[obs_idx],
                            evaluate_labels(candidates, univ_cols, space))
    result = GreedyLabelSearch().search(stats, candidates, shape)
    if result is None and require:
        raise NoLabellingError(f"no valid {shape.num_mpm}-label list among {len(candidates)} candidates")
    return result


# =============================================================================
# Mode orderings (leaf 별 전체 모드 순서)
# =============================================================================

class ModeOrdering(ABC):
    """셀마다 k 개 모드 전체의 rank 를 정하는 leaf payload"""

    @abstractmethod
    def ranks(self, columns: Columns, space: SymbolSpace) -> np.ndarray:
        """(n_cells, k) rank 표 (각 행은 0..k-1 의 순열)"""

    @abstractmethod
    def to_json(self) -> Any:
        pass

    @property
    @abstractmethod
    def contexts(self) -> Tuple[str, ...]:
        pass


class DynamicList(ModeOrdering):
    """
    라벨 순서열. 셀마다 순서대로 평가하여 unavailable 과 이미 나온 모드를 건너뛰면
    모드의 순열이 됩니다. k 개 숫자 라벨을 모두 포함해야 합니다.
    """

    def __init__(self, labels: Sequence[Label], space: SymbolSpace):
        self.labels: Tuple[Label, ...] = tuple(labels)
        numerics = {l.value for l in self.labels if l.kind == "num"}
        missing = [m for m in range(space.k) if m not in numerics]
        if missing:
            raise ValidationError(f"dynamic list lacks numeric labels {missing[:8]}{'...' if len(missing) > 8 else ''}")
        if len(set(self.labels)) != len(self.labels):
            raise ValidationError("dynamic list repeats a label")

    def __eq__(self, other) -> bool:
        return isinstance(other, DynamicList) and other.labels == self.labels

    def __hash__(self) -> int:
        return hash(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    def __repr__(self) -> str:
        return f"DynamicList({', '.join(str(l) for l in self.labels)})"

    @property
    def contexts(self) -> Tuple[str, ...]:
        return tuple(c for c in CONTEXT_NAMES if any(c in l.contexts for l in self.labels))

    def first_positions(self, values: np.ndarray, k: int) -> np.ndarray:
        """values: (n_cells, len(labels)) -> (n_cells, k) 각 모드가 처음 나온 라벨 위치"""
        n = values.shape[0]
        pos = np.full((n, k), len(self.labels), dtype=np.int64)
        rows = np.arange(n)
        for j in range(values.shape[1] - 1, -1, -1):
            col = values[:, j]
            ok = col != UNAVAILABLE
            pos[rows[ok], col[ok]] = j
        return pos

    def ranks(self, columns: Columns, space: SymbolSpace) -> np.ndarray:
        pos = self.first_positions(evaluate_labels(self.labels, columns, space), space.k)
        return np.argsort(np.argsort(pos, axis=1, kind="stable"), axis=1, kind="stable")

    def to_json(self) -> List[str]:
        return [str(l) for l in self.labels]


# =============================================================================
# Presets
# =============================================================================

def _labels(tokens: Iterable[str]) -> Tuple[Label, ...]:
    return tuple(Label.parse(t) for t in tokens)


def _offsets(base: str, offsets: Iterable[int]) -> List[str]:
    return [base] + [f"{base}{o:+d}" for o in offsets]


HEVC_BASIC_LABELS = _labels(["L", "U", "#0", "#1", "#26", "L+1", "L-1"])

HEVC_EXTENDED_LABELS = _labels([
    "L", "U", "L-1", "L+1", "#0", "#1", "#26", "U-1", "U+1", "L-2", "L+2", "L-3", "L+3",
    "U-2", "U+2", "U-3", "U+3", "min", "max", "min-1", "min+1", "max-1", "max+1",
    "min-2", "min+2", "max-2", "max+2", "min-3", "min+3", "max-3", "max+3",
    "|1-min|", "mean", "#18", "#2",
])

JEM_BASIC_LABELS = _labels(
    [t for c in ("L", "U", "BL", "UR", "UL") for t in _offsets(c, (-1, 1))]
    + ["#0", "#1", "#50", "#18", "#34", "#2"]
)

JEM_TREE_LABELS = _labels(
    [t for c in ("L", "U", "UL") for t in _offsets(c, (-1, 1, -2, 2, -3, 3, -4, 4))]
    + [t for c in ("min", "max") for t in _offsets(c, (-1, 1, -2, 2))]
    + ["|1-min|", "mean", "#0", "#1"]
    + [f"#{m}" for m in range(2, 63, 4)]
)


def dynamic_vocabulary(space: SymbolSpace) -> Tuple[Label, ...]:
    """k 개 숫자 라벨 + 5 컨텍스트 x (원본, +-1..+-4) + L+-5, U+-5, mean"""
    contextual = [t for c in ("L", "U", "BL", "UR", "UL") for t in _offsets(c, (-1, 1, -2, 2, -3, 3, -4, 4))]
    contextual += ["L-5", "L+5", "U-5", "U+5", "mean"]
    return _labels(contextual) + tuple(Label.numeric(m) for m in range(space.k))


LABEL_PRESETS = {
    "hevc-basic": lambda space: HEVC_BASIC_LABELS,
    "hevc-extended": lambda space: HEVC_EXTENDED_LABELS,
    "jem-basic": lambda space: JEM_BASIC_LABELS,
    "jem-tree": lambda space: JEM_TREE_LABELS,
    "dynamic": dynamic_vocabulary,
}


def label_preset(name: str, space: SymbolSpace) -> Tuple[Label, ...]:
    if name not in LABEL_PRESETS:
        raise ValidationError(f"unknown label preset '{name}' (known: {', '.join(LABEL_PRESETS)})")
    return LABEL_PRESETS[name](space)
