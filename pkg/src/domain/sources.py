import logging
from abc import ABC, abstractmethod
from dataclasses import replace
from typing import List, Optional

from infra.exceptions import UsageError
from domain.models import SymbolSpace, Sample, SynthParams
from domain.dataset import load_samples, SyntheticGenerator

logger = logging.getLogger("System")


# =============================================================================
# Interfaces (Abstraction)
# =============================================================================

class SampleSource(ABC):
    """샘플 공급원. 같은 설정이면 같은 샘플열을 반환해야 합니다."""

    @abstractmethod
    def load(self, space: SymbolSpace) -> List[Sample]:
        pass

    @abstractmethod
    def describe(self) -> str:
        pass

    def rotated(self, index: int) -> "SampleSource":
        """multipass 용 pass 별 데이터. 파일 소스는 같은 데이터를 돌려줍니다."""
        return self


# =============================================================================
# Implementations
# =============================================================================

class FileSource(SampleSource):
    """CSV 또는 IPMS 바이너리 파일 (load_samples 가 magic 으로 형식을 판별)"""

    def __init__(self, path: str):
        self.path = path

    def load(self, space: SymbolSpace) -> List[Sample]:
        return load_samples(self.path, space)

    def describe(self) -> str:
        return f"file:{self.path}"


class SynthSource(SampleSource):
    def __init__(self, params: SynthParams):
        self.params = params

    def load(self, space: SymbolSpace) -> List[Sample]:
        return SyntheticGenerator(space).generate(self.params)

    def describe(self) -> str:
        p = self.params
        return f"synth:{p.width}x{p.height}:seed={p.seed}"

    def rotated(self, index: int) -> "SampleSource":
        # pass 마다 새 시드 (데이터셋 교체 근사)
        return SynthSource(replace(self.params, seed=self.params.seed + 7919 * index))


# =============================================================================
# Factory
# =============================================================================

class SourceFactory:
    """[C] 경로 / 합성 설정에 따라 SampleSource 를 반환"""

    @staticmethod
    def create(path: Optional[str] = None, synth: Optional[SynthParams] = None) -> SampleSource:
        if path and synth is not None:
            raise UsageError("give either an input path or synthetic parameters, not both")
        if path:
            return FileSource(path)
        if synth is not None:
            return SynthSource(synth)
        raise UsageError("no sample source: pass --in PATH or --synth")
