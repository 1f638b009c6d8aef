import logging
from typing import List, Dict, Tuple, Any

import numpy as np

from infra.exceptions import ValidationError, SchemeFormatError
from domain.models import SymbolSpace, CONTEXT_NAMES, UNAVAILABLE, PLANAR, DC
from domain.codes import CodeShape, HEVC_ANCHOR_SHAPE, JEM_ANCHOR_SHAPE
from domain.labels import Label, ModeOrdering, DynamicList, Columns, dynamic_vocabulary
from domain.scheme import Scheme, Node, StaticLeaf, DynamicLeaf, Test

logger = logging.getLogger("System")

JEM_MPM_COUNT = 6
JEM_PREFERRED_COUNT = 16
JEM_OTHER1_COUNT = 19
JEM_DEFAULT_MODES = (50, 18, 34, 2)


def _static(tokens: List[str], shape: CodeShape) -> StaticLeaf:
    return StaticLeaf(tuple(Label.parse(t) for t in tokens), shape)


# =============================================================================
# HEVC
# =============================================================================

def anchor_hevc() -> Scheme:
    """
    HEVC 3-MPM 유도 트리.
    L==U ? (min>1 ? {L, L-1, L+1} : {#0, #1, #26})
         : (min>0 ? {L, U, #0} : (L+U<2 ? {L, U, #26} : {L, U, #1}))
    """
    code = HEVC_ANCHOR_SHAPE
    tree = Node(
        Test.parse("L==U"),
        true=Node(Test.parse("min>1"),
                  true=_static(["L", "L-1", "L+1"], code),
                  false=_static(["#0", "#1", "#26"], code)),
        false=Node(Test.parse("min>0"),
                   true=_static(["L", "U", "#0"], code),
                   false=Node(Test.parse("L+U<2"),
                              true=_static(["L", "U", "#26"], code),
                              false=_static(["L", "U", "#1"], code))),
    )
    return Scheme(SymbolSpace.hevc(), tree, "dc", "anchor-hevc")


# =============================================================================
# JEM
# =============================================================================

class JemAnchorOrdering(ModeOrdering):
    """
    JEM 6-MPM 목록 + Preferred(16) + Other-1(19) + Other-2(26).
    MPM: L, U, Planar, DC, BL, UR, UL 순서로 중복 없이 삽입, 이어서 각도 MPM 의 -1/+1
    (먼저 들어온 MPM 부터), 마지막으로 50, 18, 34, 2.
    Preferred: 4의 배수 모드 오름차순 (MPM 제외), 모자라면 4로 나눈 나머지 2 인 모드로 채움.
    Other-1 / Other-2: 남은 모드 오름차순으로 앞 19 개 / 나머지.
    """

    def __init__(self, space: SymbolSpace):
        if space.k != 67:
            raise ValidationError(f"JEM anchor ordering needs k=67, got k={space.k}")
        self.space = space
        self._cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def __eq__(self, other) -> bool:
        return isinstance(other, JemAnchorOrdering)

    def __hash__(self) -> int:
        return hash("jem-anchor")

    @property
    def contexts(self) -> Tuple[str, ...]:
        return CONTEXT_NAMES

    def to_json(self) -> Any:
        return "jem-anchor"

    def mpm_list(self, ctx_values: Tuple[int, ...]) -> List[int]:
        l, u, bl, ur, ul = ctx_values
        mpm: List[int] = []

        def push(mode: int):
            if mode != UNAVAILABLE and mode not in mpm and len(mpm) < JEM_MPM_COUNT:
                mpm.append(mode)

        for mode in (l, u, PLANAR, DC, bl, ur, ul):
            push(mode)
        for base in [m for m in mpm if self.space.is_angular(m)]:
            push(self.space.wrap(base, -1))
            push(self.space.wrap(base, 1))
        for mode in JEM_DEFAULT_MODES:
            push(mode)
        return mpm

    def order(self, ctx_values: Tuple[int, ...]) -> np.ndarray:
        """모드를 rank 순서로 나열"""
        mpm = self.mpm_list(ctx_values)
        taken = set(mpm)
        candidates = [m for m in range(0, self.space.k, 4)] + [m for m in range(2, self.space.k, 4)]
        preferred = [m for m in candidates if m not in taken][:JEM_PREFERRED_COUNT]
        taken.update(preferred)
        rest = [m for m in range(self.space.k) if m not in taken]
        return np.array(mpm + preferred + rest, dtype=np.int64)

    def ranks(self, columns: Columns, space: SymbolSpace) -> np.ndarray:
        table = np.stack([columns[c] for c in CONTEXT_NAMES], axis=1)
        out = np.empty((table.shape[0], space.k), dtype=np.int64)
        for i, row in enumerate(table):
            key = tuple(int(v) for v in row)
            rank = self._cache.get(key)
            if rank is None:
                rank = np.empty(space.k, dtype=np.int64)
                rank[self.order(key)] = np.arange(space.k)
                self._cache[key] = rank
            out[i] = rank
        return out


def anchor_jem() -> Scheme:
    space = SymbolSpace.jem()
    return Scheme(space, DynamicLeaf(JemAnchorOrdering(space), JEM_ANCHOR_SHAPE), "keep", "anchor-jem")


def ordering_from_json(doc: Any) -> ModeOrdering:
    if doc == "jem-anchor":
        return JemAnchorOrdering(SymbolSpace.jem())
    raise SchemeFormatError(f"unknown ordering {doc!r}")


def anchor_for_profile(profile: str) -> Scheme:
    if profile == "hevc":
        return anchor_hevc()
    if profile == "jem":
        return anchor_jem()
    raise ValidationError(f"no anchor scheme for profile '{profile}'")


# =============================================================================
# Derived fixtures
# =============================================================================

def derived_hevc_five_leaf() -> Scheme:
    """
    HEVC 프로파일에서 유도된 5-leaf 스킴 (DC 매핑).
    max<2 가지의 7번째 라벨은 U-3 대신 #18 (U 가 planar/DC 이면 U-3 은 unavailable).
    """
    wide = CodeShape.parse("1+3+4+5+5+6+6+(7x28)")
    tree = Node(
        Test.parse("min>1"),
        false=Node(Test.parse("max<2"),
                   false=_static(["min", "max", "|1-min|", "max-1", "max+1", "max+2", "max-2"], wide),
                   true=_static(["min", "|1-min|", "#10", "#26", "#2", "#34", "#18"], wide)),
        true=Node(Test.parse("|L-U|<2"),
                  false=_static(["L", "U", "#0", "#1", "max-1"], CodeShape.parse("2+3+4+4+5+(6x30)")),
                  true=Node(Test.parse("L==U"),
                            false=_static(["L", "U", "min-1", "max+1", "#0", "#1", "max+2"],
                                          CodeShape.parse("2+2+4+4+4+4+5+(7x28)")),
                            true=_static(["L", "L-1", "L+1", "#0", "#1", "L+2", "L-2"],
                                         CodeShape.parse("1+4+4+4+5+5+5+(7x28)")))),
    )
    return Scheme(SymbolSpace.hevc(), tree, "dc", "derived-hevc-5")


FOUR_LEAF_DYNAMIC_CODES = (
    "2+2+3+(5x3)+(7x11)+(8x50)",
    "1+3+5+5+(7x24)+(8x25)+(9x14)",
    "2+3+3+(4x2)+(6x8)+(7x10)+(8x44)",
    "1+3+4+5+6+6+(6x6)+(7x6)+(8x7)+(9x42)",
)


def derived_jem_four_leaf() -> Scheme:
    """
    JEM 프로파일 4-leaf 트리 + 동적 목록. 목록 순서는 공개되지 않았으므로
    각 leaf 는 기본 어휘 순서를 사용합니다 (테스트와 코드만 고정).
    """
    space = SymbolSpace.jem()
    shapes = [CodeShape.parse(c) for c in FOUR_LEAF_DYNAMIC_CODES]
    vocab = DynamicList(dynamic_vocabulary(space), space)
    leaves = [DynamicLeaf(vocab, shape) for shape in shapes]
    tree = Node(
        Test.parse("min>1"),
        false=Node(Test.parse("max<2"), false=leaves[0], true=leaves[1]),
        true=Node(Test.parse("|L-U|%63<3"), false=leaves[2], true=leaves[3]),
    )
    return Scheme(space, tree, "keep", "derived-jem-4")


FIXTURES = {
    "anchor-hevc": anchor_hevc,
    "anchor-jem": anchor_jem,
    "derived-hevc-5": derived_hevc_five_leaf,
    "derived-jem-4": derived_jem_four_leaf,
}


def builtin_scheme(name: str) -> Scheme:
    if name not in FIXTURES:
        raise ValidationError(f"unknown built-in scheme '{name}' (known: {', '.join(FIXTURES)})")
    return FIXTURES[name]()
