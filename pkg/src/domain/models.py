import json
import hashlib
import logging
from dataclasses import dataclass, field, asdict
from typing import List, Dict, Optional, Any, Tuple

logger = logging.getLogger("System")

CONTEXT_NAMES: Tuple[str, ...] = ("L", "U", "BL", "UR", "UL")
UNAVAILABLE = -1
PLANAR = 0
DC = 1


# =============================================================================
# [Symbol Models] 모드 공간 및 컨텍스트
# =============================================================================

@dataclass(frozen=True)
class SymbolSpace:
    """IPM 심볼 공간 (HEVC 35 / JEM 67)"""
    k: int
    angular_min: int = 2
    angular_max: int = -1  # -1 이면 k-1

    def __post_init__(self):
        if self.angular_max == -1:
            object.__setattr__(self, "angular_max", self.k - 1)
        if self.k < 3 or not (self.angular_min < self.angular_max < self.k):
            raise ValueError(f"Invalid symbol space k={self.k} angular=[{self.angular_min},{self.angular_max}]")

    @classmethod
    def hevc(cls) -> "SymbolSpace":
        return cls(35)

    @classmethod
    def jem(cls) -> "SymbolSpace":
        return cls(67)

    @classmethod
    def for_profile(cls, profile: str, k: Optional[int] = None) -> "SymbolSpace":
        if profile == "hevc":
            return cls.hevc()
        if profile == "jem":
            return cls.jem()
        if k is None:
            raise ValueError("custom profile requires k")
        return cls(k)

    @property
    def num_angular(self) -> int:
        return self.angular_max - self.angular_min + 1

    def is_valid_mode(self, mode: int) -> bool:
        return 0 <= mode < self.k

    def is_angular(self, mode: int) -> bool:
        return self.angular_min <= mode <= self.angular_max

    def wrap(self, mode: int, offset: int) -> int:
        """각도 모드 offset (angular 범위 안에서 순환)"""
        return self.angular_min + ((mode - self.angular_min + offset) % self.num_angular)


@dataclass(frozen=True)
class ContextTuple:
    """이웃 블록 모드 (-1 = unavailable)"""
    l: int = UNAVAILABLE
    u: int = UNAVAILABLE
    bl: int = UNAVAILABLE
    ur: int = UNAVAILABLE
    ul: int = UNAVAILABLE

    def get(self, name: str) -> int:
        return getattr(self, name.lower())

    def values(self) -> Tuple[int, int, int, int, int]:
        return (self.l, self.u, self.bl, self.ur, self.ul)

    def project(self, context_set: Tuple[str, ...]) -> Tuple[int, ...]:
        return tuple(self.get(c) for c in context_set)

    def map_unavailable(self, replacement: int) -> "ContextTuple":
        return ContextTuple(*(replacement if v == UNAVAILABLE else v for v in self.values()))

    @classmethod
    def from_projection(cls, context_set: Tuple[str, ...], key: Tuple[int, ...]) -> "ContextTuple":
        fields = {c.lower(): v for c, v in zip(context_set, key)}
        return cls(**fields)

    def validate(self, space: SymbolSpace):
        for name, v in zip(CONTEXT_NAMES, self.values()):
            if v != UNAVAILABLE and not space.is_valid_mode(v):
                raise ValueError(f"context {name}={v} outside [-1, {space.k - 1}]")


@dataclass(frozen=True)
class Sample:
    """코딩된 블록 하나: 선택된 IPM + 이웃 컨텍스트 (+ RD 후보)"""
    ipm: int
    ctx: ContextTuple
    rd_candidates: Optional[Tuple[Tuple[int, float], ...]] = None

    def validate(self, space: SymbolSpace):
        if not space.is_valid_mode(self.ipm):
            raise ValueError(f"ipm={self.ipm} outside [0, {space.k - 1}]")
        self.ctx.validate(space)
        if self.rd_candidates is not None:
            modes = [m for m, _ in self.rd_candidates]
            if len(set(modes)) != len(modes):
                raise ValueError("rd_candidates contain duplicate modes")
            if self.ipm not in modes:
                raise ValueError(f"rd_candidates do not contain ipm={self.ipm}")
            for m, d in self.rd_candidates:
                if not space.is_valid_mode(m) or d < 0:
                    raise ValueError(f"invalid rd candidate ({m}, {d})")


# =============================================================================
# [Report Models] 평가 결과물
# =============================================================================

@dataclass
class EntropyReport:
    bits_per_symbol: float
    context_set: Tuple[str, ...]
    mm_correction: float
    samples_used: int
    nonzero_bins: int
    theoretical_bins: int = 0


@dataclass
class LeafCost:
    leaf_id: int
    hit_prob: float
    bits_per_ipm: float
    total_bits: int = 0
    samples: int = 0
    first_bit_prob: float = 0.0  # P(b0): 첫 비트가 leaf 첫 코드워드의 첫 비트와 같을 확률
    cabac_group: int = 0


@dataclass
class CostReport:
    bits_per_ipm: float
    per_leaf: List[LeafCost]
    total_samples: int
    total_bits: int = 0


@dataclass
class PassReport:
    pass_index: int
    ref_cost: float
    new_cost: float
    delta: float
    anchor_cost: float = 0.0
    flipped: int = 0
    retained_reference: bool = False


# =============================================================================
# [Config Models] 실험 설정 (Initial Input)
# =============================================================================

@dataclass
class GeneticParams:
    """유전 탐색 파라미터"""
    population: int = 32
    children_per_parent: int = 4
    mutation_rate: float = 0.02
    iterations: int = 2000
    seed: int = 0
    random_survivors: int = 0  # 0 이면 population//4

    def __post_init__(self):
        if self.population < 2:
            raise ValueError("population must be >= 2")
        if self.children_per_parent < 1 or self.iterations < 0:
            raise ValueError("children_per_parent >= 1 and iterations >= 0 required")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError("mutation_rate must lie in [0, 1]")

    @property
    def survivors(self) -> int:
        return self.random_survivors or max(1, self.population // 4)


@dataclass
class SynthParams:
    """합성 데이터셋 생성 파라미터"""
    width: int = 64
    height: int = 64
    copy_prob: float = 0.6
    jitter_prob: float = 0.2
    nonangular_prob: float = 0.1
    seed: int = 0
    rd_alternates: int = 0
    rd_gap_scale: float = 1.0


@dataclass
class ExperimentSpec:
    """
    [E] 실험 마스터 청사진
    직렬화 가능한 모든 입력을 담으며, 같은 Spec 은 같은 출력을 재현합니다.
    """
    action: str
    profile: str = "hevc"
    k: Optional[int] = None
    dataset: Optional[str] = None
    synth: Optional[SynthParams] = None
    seed: int = 0
    outputs: Dict[str, str] = field(default_factory=dict)
    options: Dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]
