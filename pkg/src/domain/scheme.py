import re
import json
import hashlib
import itertools
import logging
from dataclasses import dataclass, replace
from typing import List, Dict, Optional, Sequence, Tuple, Union, Callable, Any

import numpy as np

from infra.exceptions import (
    ValidationError, ContextMismatchError, SchemeInvariantError, SchemeFormatError
)
from domain.models import SymbolSpace, ContextTuple, CostReport, LeafCost, CONTEXT_NAMES, UNAVAILABLE
from domain.codes import CodeShape, realize_codewords
from domain.labels import (
    Label, ModeOrdering, DynamicList, Columns, context_columns, apply_unavailable_rule,
    evaluate_labels, mpm_ranks, format_labelling
)

logger = logging.getLogger("System")

SCHEME_FORMAT = "ipm-scheme"
SCHEME_VERSION = 1

_CTX = r"(L|U|BL|UR|UL)"
_TEST_PATTERNS = [
    ("eq", re.compile(rf"^{_CTX}=={_CTX}$")),
    ("modabsdiff_lt", re.compile(rf"^\|{_CTX}-{_CTX}\|%(\d+)<(\d+)$")),
    ("absdiff_lt", re.compile(rf"^\|{_CTX}-{_CTX}\|<(\d+)$")),
    ("absdiff_eq", re.compile(rf"^\|{_CTX}-{_CTX}\|==(\d+)$")),
    ("dist_const_lt", re.compile(rf"^\|{_CTX}-(\d+)\|<(\d+)$")),
    ("min_gt", re.compile(r"^min>(\d+)$")),
    ("min_lt", re.compile(r"^min<(\d+)$")),
    ("max_lt", re.compile(r"^max<(\d+)$")),
    ("sum_lt", re.compile(rf"^{_CTX}\+{_CTX}<(\d+)$")),
    ("ctx_lt", re.compile(rf"^{_CTX}<(\d+)$")),
]


# =============================================================================
# Tests
# =============================================================================

@dataclass(frozen=True)
class Test:
    """
    컨텍스트에 대한 boolean 술어 (트리 노드).
    keep 규칙에서는 -1 이 명시적 등호(eq)를 제외한 모든 수치 비교에서 실패합니다.
    """
    kind: str
    a: str = ""
    b: str = ""
    t: int = 0
    m: int = 0  # dist_const_lt 의 상수 / modabsdiff_lt 의 modulus

    __test__ = False  # pytest 수집 대상 아님

    @classmethod
    def parse(cls, text: str) -> "Test":
        token = text.replace(" ", "")
        for kind, pattern in _TEST_PATTERNS:
            match = pattern.match(token)
            if not match:
                continue
            g = match.groups()
            if kind == "eq":
                return cls(kind, g[0], g[1])
            if kind == "modabsdiff_lt":
                return cls(kind, g[0], g[1], t=int(g[3]), m=int(g[2]))
            if kind in ("absdiff_lt", "absdiff_eq", "sum_lt"):
                return cls(kind, g[0], g[1], t=int(g[2]))
            if kind == "dist_const_lt":
                return cls(kind, g[0], t=int(g[2]), m=int(g[1]))
            if kind == "ctx_lt":
                return cls(kind, g[0], t=int(g[1]))
            return cls(kind, "L", "U", t=int(g[0]))
        raise ValidationError(f"cannot parse test '{text}'")

    def __str__(self) -> str:
        return {
            "eq": lambda: f"{self.a}=={self.b}",
            "absdiff_lt": lambda: f"|{self.a}-{self.b}|<{self.t}",
            "absdiff_eq": lambda: f"|{self.a}-{self.b}|=={self.t}",
            "modabsdiff_lt": lambda: f"|{self.a}-{self.b}|%{self.m}<{self.t}",
            "dist_const_lt": lambda: f"|{self.a}-{self.m}|<{self.t}",
            "min_gt": lambda: f"min>{self.t}",
            "min_lt": lambda: f"min<{self.t}",
            "max_lt": lambda: f"max<{self.t}",
            "sum_lt": lambda: f"{self.a}+{self.b}<{self.t}",
            "ctx_lt": lambda: f"{self.a}<{self.t}",
        }[self.kind]()

    @property
    def contexts(self) -> Tuple[str, ...]:
        return tuple(c for c in (self.a, self.b) if c)

    def evaluate_columns(self, columns: Columns) -> np.ndarray:
        a = columns[self.a] if self.a else None
        b = columns[self.b] if self.b else None
        if self.kind == "eq":
            return a == b
        ok = a != UNAVAILABLE
        if b is not None:
            ok = ok & (b != UNAVAILABLE)
        if self.kind == "absdiff_lt":
            out = np.abs(a - b) < self.t
        elif self.kind == "absdiff_eq":
            out = np.abs(a - b) == self.t
        elif self.kind == "modabsdiff_lt":
            out = np.mod(np.abs(a - b), self.m) < self.t
        elif self.kind == "dist_const_lt":
            out = np.abs(a - self.m) < self.t
        elif self.kind == "min_gt":
            out = np.minimum(a, b) > self.t
        elif self.kind == "min_lt":
            out = np.minimum(a, b) < self.t
        elif self.kind == "max_lt":
            out = np.maximum(a, b) < self.t
        elif self.kind == "sum_lt":
            out = (a + b) < self.t
        elif self.kind == "ctx_lt":
            out = a < self.t
        else:
            raise ValidationError(f"unknown test kind '{self.kind}'")
        return ok & out

    def evaluate(self, ctx: ContextTuple) -> bool:
        columns = {name: np.array([v], dtype=np.int64) for name, v in zip(CONTEXT_NAMES, ctx.values())}
        return bool(self.evaluate_columns(columns)[0])


def _tests(tokens: Sequence[str]) -> Tuple[Test, ...]:
    return tuple(Test.parse(t) for t in tokens)


HEVC_ANCHOR_TESTS = _tests(["L==U", "min>0", "L+U<2", "min>1"])

HEVC_EXTENDED_TESTS = _tests([
    "L==U", "|L-U|<2", "|L-U|==2", "min>1", "min<1", "max<2", "L+U<2",
    "|L-10|<3", "|L-26|<3", "|L-18|<3", "|U-10|<3", "|U-26|<3", "|U-18|<3", "L<2", "min>0",
])

JEM_TESTS = _tests([
    "L==U", "L==UL", "U==UL", "|L-U|<2", "|L-U|<3", "|L-U|==2", "|L-U|%63<3",
    "min>1", "min<1", "max<2", "L+U<2", "L<2", "U<2", "UL<2",
    "|L-18|<3", "|L-34|<3", "|L-50|<3", "|U-18|<3", "|U-34|<3", "|U-50|<3",
    "|L-UL|<2", "|U-UL|<2",
])

DYNLIST_TESTS = _tests(["L==U", "|L-U|<2", "|L-U|%63<3", "min>1", "min>0", "max<2", "L+U<2"])

TEST_PRESETS = {
    "hevc-anchor": HEVC_ANCHOR_TESTS,
    "hevc-extended": HEVC_EXTENDED_TESTS,
    "jem": JEM_TESTS,
    "dynlist": DYNLIST_TESTS,
}


def preset_tests(name: str) -> Tuple[Test, ...]:
    if name not in TEST_PRESETS:
        raise ValidationError(f"unknown test preset '{name}' (known: {', '.join(TEST_PRESETS)})")
    return TEST_PRESETS[name]


# =============================================================================
# Tree
# =============================================================================

@dataclass(frozen=True)
class StaticLeaf:
    labelling: Tuple[Label, ...]
    shape: CodeShape
    cabac_group: int = 0

    @property
    def contexts(self) -> Tuple[str, ...]:
        return tuple(c for c in CONTEXT_NAMES if any(c in l.contexts for l in self.labelling))


@dataclass(frozen=True)
class DynamicLeaf:
    ordering: ModeOrdering
    shape: CodeShape
    cabac_group: int = 0

    @property
    def contexts(self) -> Tuple[str, ...]:
        return self.ordering.contexts


Leaf = Union[StaticLeaf, DynamicLeaf]


@dataclass(frozen=True)
class Node:
    test: Test
    true: "Tree"
    false: "Tree"


Tree = Union[Node, StaticLeaf, DynamicLeaf]


def iter_leaves(tree: Tree) -> List[Leaf]:
    """leaf id 순서 (false 가지 먼저 깊이 우선)"""
    if isinstance(tree, Node):
        return iter_leaves(tree.false) + iter_leaves(tree.true)
    return [tree]


def iter_tests(tree: Tree) -> List[Test]:
    if isinstance(tree, Node):
        return [tree.test] + iter_tests(tree.false) + iter_tests(tree.true)
    return []


def map_leaves(tree: Tree, fn: Callable[[int, Leaf], Leaf]) -> Tree:
    counter = itertools.count()

    def rec(node: Tree) -> Tree:
        if isinstance(node, Node):
            false = rec(node.false)
            true = rec(node.true)
            return Node(node.test, true, false)
        return fn(next(counter), node)

    return rec(tree)


def route_columns(tree: Tree, columns: Columns) -> np.ndarray:
    n = len(next(iter(columns.values())))
    out = np.zeros(n, dtype=np.int64)
    counter = itertools.count()

    def rec(node: Tree, mask: np.ndarray):
        if isinstance(node, Node):
            outcome = node.test.evaluate_columns(columns)
            rec(node.false, mask & ~outcome)
            rec(node.true, mask & outcome)
        else:
            out[mask] = next(counter)

    rec(tree, np.ones(n, dtype=bool))
    return out


def context_universe(contexts: Sequence[str], space: SymbolSpace, rule: str,
                     cap: int = 50000) -> Optional[Columns]:
    """
    참조 컨텍스트의 모든 값 조합 (나머지 컨텍스트는 -1).
    dc 규칙은 0..k-1, keep 규칙은 -1..k-1. 조합 수가 cap 을 넘으면 None.
    """
    names = [c for c in CONTEXT_NAMES if c in contexts]
    low = 0 if rule == "dc" else UNAVAILABLE
    values = np.arange(low, space.k, dtype=np.int64)
    size = len(values) ** len(names)
    if size > cap:
        return None
    grids = np.meshgrid(*([values] * len(names)), indexing="ij") if names else []
    flat = {name: g.reshape(-1) for name, g in zip(names, grids)}
    return {name: flat.get(name, np.full(size, UNAVAILABLE, dtype=np.int64)) for name in CONTEXT_NAMES}


# =============================================================================
# Scheme
# =============================================================================

@dataclass(frozen=True)
class Scheme:
    """실행 가능한 코딩 스킴: 결정 트리 + leaf payload (정적 라벨 목록 / 동적 목록) + 코드"""
    space: SymbolSpace
    tree: Tree
    unavailable_rule: str = "dc"
    name: str = ""

    @property
    def leaves(self) -> List[Leaf]:
        return iter_leaves(self.tree)

    @property
    def num_leaves(self) -> int:
        return len(self.leaves)

    def contexts(self) -> Tuple[str, ...]:
        used = set()
        for test in iter_tests(self.tree):
            used.update(test.contexts)
        for leaf in self.leaves:
            used.update(leaf.contexts)
        return tuple(c for c in CONTEXT_NAMES if c in used)

    def prepare(self, columns: Columns) -> Columns:
        return apply_unavailable_rule(columns, self.unavailable_rule)

    # ------------------------------------------------------------------
    # 실행
    # ------------------------------------------------------------------
    def route(self, ctx: ContextTuple) -> int:
        return int(route_columns(self.tree, self.prepare(context_columns([ctx])))[0])

    def rank_table(self, columns: Columns) -> Tuple[np.ndarray, np.ndarray]:
        """(leaf ids (n,), rank 표 (n, k)); columns 는 원본 컨텍스트 (규칙 적용 전)"""
        prepared = self.prepare(columns)
        leaf_ids = route_columns(self.tree, prepared)
        n = len(leaf_ids)
        ranks = np.zeros((n, self.space.k), dtype=np.int64)
        for leaf_id, leaf in enumerate(self.leaves):
            idx = np.nonzero(leaf_ids == leaf_id)[0]
            if len(idx) == 0:
                continue
            sub = {name: col[idx] for name, col in prepared.items()}
            if isinstance(leaf, StaticLeaf):
                values = evaluate_labels(leaf.labelling, sub, self.space)
                self._check_static(leaf_id, leaf, values, sub)
                ranks[idx] = mpm_ranks(values, self.space.k)
            else:
                ranks[idx] = leaf.ordering.ranks(sub, self.space)
        return leaf_ids, ranks

    def _check_static(self, leaf_id: int, leaf: StaticLeaf, values: np.ndarray, columns: Columns):
        bad = (values == UNAVAILABLE).any(axis=1)
        ordered = np.sort(values, axis=1)
        bad |= (ordered[:, 1:] == ordered[:, :-1]).any(axis=1)
        if bad.any():
            i = int(np.argmax(bad))
            ctx = ContextTuple(*(int(columns[c][i]) for c in CONTEXT_NAMES))
            raise SchemeInvariantError(
                f"leaf {leaf_id} labelling {format_labelling(leaf.labelling)} conflicts on {ctx}")

    def mpm_list(self, ctx: ContextTuple, count: Optional[int] = None) -> List[int]:
        leaf_ids, ranks = self.rank_table(context_columns([ctx]))
        order = np.argsort(ranks[0])
        m = count if count is not None else self.leaves[int(leaf_ids[0])].shape.num_mpm
        return [int(v) for v in order[:m]]

    def rank_of(self, ctx: ContextTuple, ipm: int) -> int:
        if not self.space.is_valid_mode(ipm):
            raise ValidationError(f"ipm={ipm} outside [0, {self.space.k - 1}]")
        _, ranks = self.rank_table(context_columns([ctx]))
        return int(ranks[0, ipm])

    # ------------------------------------------------------------------
    # 평가
    # ------------------------------------------------------------------
    def evaluate(self, hist) -> CostReport:
        """히스토그램에 대한 정확한 bits/IPM (정수 비트 합 기반)"""
        missing = [c for c in self.contexts() if c not in hist.context_set]
        if missing:
            raise ContextMismatchError(missing)
        if hist.k != self.space.k:
            raise ValidationError(f"histogram k={hist.k} but scheme k={self.space.k}")
        columns = {name: hist.column(name) for name in CONTEXT_NAMES}
        leaf_ids, ranks = self.rank_table(columns)
        total = hist.total
        per_leaf: List[LeafCost] = []
        total_bits = 0
        for leaf_id, leaf in enumerate(self.leaves):
            idx = np.nonzero(leaf_ids == leaf_id)[0]
            counts = hist.counts[idx]
            lengths = leaf.shape.rank_lengths()
            leaf_bits = int((counts * lengths[ranks[idx]]).sum())
            samples = int(counts.sum())
            first_bits = realize_codewords(leaf.shape).codewords
            head = first_bits[0][0]
            same_head = np.array([w[0] == head for w in first_bits])
            b0 = int((counts * same_head[ranks[idx]]).sum())
            total_bits += leaf_bits
            per_leaf.append(LeafCost(
                leaf_id=leaf_id,
                hit_prob=samples / total if total else 0.0,
                bits_per_ipm=leaf_bits / samples if samples else 0.0,
                total_bits=leaf_bits,
                samples=samples,
                first_bit_prob=b0 / samples if samples else 0.0,
                cabac_group=leaf.cabac_group,
            ))
        return CostReport(
            bits_per_ipm=total_bits / total if total else 0.0,
            per_leaf=per_leaf,
            total_samples=total,
            total_bits=total_bits,
        )

    def validate(self, observed: Optional[Columns] = None, cap: int = 50000):
        """코드 완전성 + 정적 라벨 유효성 (컨텍스트 전체 조합, 너무 크면 관측 셀)"""
        for leaf_id, leaf in enumerate(self.leaves):
            try:
                leaf.shape.validate(self.space.k)
            except ValidationError as e:
                raise SchemeInvariantError(f"leaf {leaf_id}: {e.message}")
        universe = context_universe(self.contexts(), self.space, self.unavailable_rule, cap)
        if universe is None:
            if observed is None:
                logger.warning(f"[Scheme:validate] context universe above {cap} cells, labellings not checked")
                return
            universe = observed
        self.rank_table(universe)

    # ------------------------------------------------------------------
    # 직렬화
    # ------------------------------------------------------------------
    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": SCHEME_FORMAT,
            "version": SCHEME_VERSION,
            "name": self.name,
            "k": self.space.k,
            "angular_min": self.space.angular_min,
            "angular_max": self.space.angular_max,
            "unavailable_rule": self.unavailable_rule,
            "tree": _tree_to_dict(self.tree),
        }

    def canonical_json(self) -> str:
        body = self.to_dict()
        body.pop("name")
        return json.dumps(body, sort_keys=True, separators=(",", ":"))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()[:8]

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "Scheme":
        if not isinstance(doc, dict) or "tree" not in doc or "k" not in doc:
            raise SchemeFormatError("expected an object with 'k' and 'tree'")
        if doc.get("format", SCHEME_FORMAT) != SCHEME_FORMAT:
            raise SchemeFormatError(f"unknown format {doc.get('format')!r}")
        try:
            space = SymbolSpace(int(doc["k"]), int(doc.get("angular_min", 2)), int(doc.get("angular_max", -1)))
            rule = doc.get("unavailable_rule", "dc")
            if rule not in ("dc", "keep"):
                raise SchemeFormatError(f"unknown unavailable_rule {rule!r}")
            tree = _tree_from_dict(doc["tree"], space)
        except (ValidationError, ValueError, KeyError, TypeError) as e:
            raise SchemeFormatError(str(e))
        return cls(space, tree, rule, doc.get("name", ""))

    @classmethod
    def from_json(cls, text: str) -> "Scheme":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemeFormatError(f"not JSON: {e}")
        return cls.from_dict(doc)

    def with_tree(self, tree: Tree, name: Optional[str] = None) -> "Scheme":
        return replace(self, tree=tree, name=self.name if name is None else name)

    def describe(self) -> str:
        lines: List[str] = []
        counter = itertools.count()

        def rec(node: Tree, depth: int):
            pad = "  " * depth
            if isinstance(node, Node):
                lines.append(f"{pad}{node.test}?")
                lines.append(f"{pad}F:")
                rec(node.false, depth + 1)
                lines.append(f"{pad}T:")
                rec(node.true, depth + 1)
                return
            if isinstance(node, StaticLeaf):
                payload = format_labelling(node.labelling)
            elif isinstance(node.ordering, DynamicList):
                payload = f"dynlist({len(node.ordering)} labels)"
            else:
                payload = str(node.ordering.to_json())
            lines.append(f"{pad}Leaf {next(counter)} {payload} {node.shape}")

        rec(self.tree, 0)
        return "\n".join(lines)


def _tree_to_dict(tree: Tree) -> Dict[str, Any]:
    if isinstance(tree, Node):
        return {"test": str(tree.test), "true": _tree_to_dict(tree.true), "false": _tree_to_dict(tree.false)}
    body: Dict[str, Any] = {"code": str(tree.shape), "cabac_group": tree.cabac_group}
    if isinstance(tree, StaticLeaf):
        body["labels"] = [str(l) for l in tree.labelling]
    elif isinstance(tree.ordering, DynamicList):
        body["dynlist"] = tree.ordering.to_json()
    else:
        body["ordering"] = tree.ordering.to_json()
    return {"leaf": body}


def _tree_from_dict(doc: Dict[str, Any], space: SymbolSpace) -> Tree:
    if "test" in doc:
        return Node(Test.parse(doc["test"]), _tree_from_dict(doc["true"], space),
                    _tree_from_dict(doc["false"], space))
    if "leaf" not in doc:
        raise SchemeFormatError(f"node without 'test' or 'leaf': {sorted(doc)}")
    body = doc["leaf"]
    shape = CodeShape.parse(body["code"])
    group = int(body.get("cabac_group", 0))
    if "labels" in body:
        return StaticLeaf(tuple(Label.parse(t) for t in body["labels"]), shape, group)
    if "dynlist" in body:
        return DynamicLeaf(DynamicList([Label.parse(t) for t in body["dynlist"]], space), shape, group)
    if "ordering" in body:
        from domain.anchors import ordering_from_json
        return DynamicLeaf(ordering_from_json(body["ordering"]), shape, group)
    raise SchemeFormatError("leaf needs 'labels', 'dynlist' or 'ordering'")


def load_scheme(path: str) -> Scheme:
    try:
        with open(path) as fh:
            return Scheme.from_json(fh.read())
    except OSError as e:
        raise SchemeFormatError(f"{path}: {e}")


def save_scheme(scheme: Scheme, path: str):
    with open(path, "w") as fh:
        fh.write(scheme.to_json() + "\n")
    logger.info(f"[Scheme:save] {scheme.name or 'scheme'} ({scheme.num_leaves} leaves) -> {path}")


# =============================================================================
# CABAC first-bit grouping (metadata)
# =============================================================================

def assign_cabac_groups(scheme: Scheme, hist, max_groups: int) -> Scheme:
    """
    leaf 를 첫 비트 확률 순으로 정렬한 뒤 인접한 그룹 중 확률 차가 가장 작은 쌍을
    max_groups 이하가 될 때까지 병합. 그룹 id 는 확률 오름차순.
    """
    if max_groups < 1:
        raise ValidationError("max_groups must be >= 1")
    report = scheme.evaluate(hist)
    probs = [leaf.first_bit_prob for leaf in report.per_leaf]
    order = sorted(range(len(probs)), key=lambda i: (probs[i], i))
    groups = [[i] for i in order]

    def mean(group: List[int]) -> float:
        return sum(probs[i] for i in group) / len(group)

    while len(groups) > max_groups:
        gaps = [mean(groups[j + 1]) - mean(groups[j]) for j in range(len(groups) - 1)]
        j = min(range(len(gaps)), key=lambda i: (gaps[i], i))
        groups[j:j + 2] = [groups[j] + groups[j + 1]]

    assignment = {leaf: gid for gid, group in enumerate(groups) for leaf in group}
    tree = map_leaves(scheme.tree, lambda leaf_id, leaf: replace(leaf, cabac_group=assignment[leaf_id]))
    return scheme.with_tree(tree)
