import csv
import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Dict, Optional, Sequence, Tuple, Iterable

import numpy as np

from infra.exceptions import DatasetParseError, ValidationError, EmptyInputError
from domain.models import (
    SymbolSpace, ContextTuple, Sample, SynthParams, CONTEXT_NAMES, UNAVAILABLE
)

logger = logging.getLogger("System")

CSV_HEADER = ["ipm", "L", "U", "BL", "UR", "UL"]
BINARY_MAGIC = b"IPMS"
BINARY_VERSION = 1
_BINARY_HEADER = struct.Struct("<4sBBI")  # magic, version, k, count


def normalize_context_set(context_set: Iterable[str]) -> Tuple[str, ...]:
    """"L,U" / ["U","L"] -> CONTEXT_NAMES 순서의 tuple"""
    if isinstance(context_set, str):
        context_set = [c for c in context_set.split(",") if c.strip()]
    names = [c.strip().upper() for c in context_set]
    unknown = [c for c in names if c not in CONTEXT_NAMES]
    if unknown:
        raise ValidationError(f"unknown context(s): {', '.join(unknown)}")
    if len(set(names)) != len(names):
        raise ValidationError(f"duplicate context in {names}")
    # 입력 순서를 유지 (histogram 의 key 좌표 순서)
    return tuple(names)


# =============================================================================
# Conditional Histogram
# =============================================================================

@dataclass(frozen=True)
class ConditionalHistogram:
    """
    컨텍스트 셀 별 IPM 출현 횟수.
    keys[i] 는 context_set 순서의 좌표 tuple, counts[i] 는 길이 k 의 count 벡터.
    """
    context_set: Tuple[str, ...]
    k: int
    keys: np.ndarray     # (n_cells, len(context_set)) int
    counts: np.ndarray   # (n_cells, k) int64

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def num_cells(self) -> int:
        return int(self.counts.shape[0])

    @property
    def cell_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def cells(self) -> Dict[Tuple[int, ...], np.ndarray]:
        return {tuple(int(v) for v in key): row for key, row in zip(self.keys, self.counts)}

    def nonzero_bins(self) -> int:
        return int(np.count_nonzero(self.counts))

    def cell_context(self, index: int) -> ContextTuple:
        return ContextTuple.from_projection(self.context_set, tuple(int(v) for v in self.keys[index]))

    def contexts(self) -> List[ContextTuple]:
        return [self.cell_context(i) for i in range(self.num_cells)]

    def column(self, name: str) -> np.ndarray:
        """컨텍스트 좌표 열; context_set 에 없으면 전부 unavailable"""
        if name in self.context_set:
            return self.keys[:, self.context_set.index(name)]
        return np.full(self.num_cells, UNAVAILABLE, dtype=np.int64)

    def marginalize(self, context_set: Iterable[str]) -> "ConditionalHistogram":
        target = normalize_context_set(context_set)
        missing = [c for c in target if c not in self.context_set]
        if missing:
            raise ValidationError(f"cannot marginalize onto contexts {missing} absent from {self.context_set}")
        cols = [self.context_set.index(c) for c in target]
        return _group(self.keys[:, cols], self.counts, target, self.k)

    def pooled(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _group(keys: np.ndarray, counts: np.ndarray, context_set: Tuple[str, ...], k: int) -> ConditionalHistogram:
    if keys.shape[1] == 0:
        return ConditionalHistogram(context_set, k, np.zeros((1, 0), dtype=np.int64),
                                    counts.sum(axis=0, keepdims=True).astype(np.int64))
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    merged = np.zeros((uniq.shape[0], k), dtype=np.int64)
    np.add.at(merged, inverse.reshape(-1), counts)
    return ConditionalHistogram(context_set, k, uniq.astype(np.int64), merged)


def samples_to_arrays(samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
    """(ipm 벡터, n x 5 컨텍스트 행렬)"""
    ipm = np.fromiter((s.ipm for s in samples), dtype=np.int64, count=len(samples))
    ctx = np.array([s.ctx.values() for s in samples], dtype=np.int64).reshape(len(samples), len(CONTEXT_NAMES))
    return ipm, ctx


def build_histogram(samples: Sequence[Sample], context_set: Iterable[str], space: SymbolSpace) -> ConditionalHistogram:
    """샘플을 context_set 좌표로 투영하여 셀 별 IPM 빈도를 집계"""
    if not samples:
        raise EmptyInputError("sample sequence")
    names = normalize_context_set(context_set)
    ipm, ctx = samples_to_arrays(samples)
    if ipm.min() < 0 or ipm.max() >= space.k:
        raise ValidationError(f"ipm outside [0, {space.k - 1}]")
    cols = [CONTEXT_NAMES.index(c) for c in names]
    onehot = np.zeros((len(samples), space.k), dtype=np.int64)
    onehot[np.arange(len(samples)), ipm] = 1
    hist = _group(ctx[:, cols], onehot, names, space.k)
    logger.debug(f"[Dataset:histogram] contexts={names} cells={hist.num_cells} total={hist.total}")
    return hist


def histogram_from_counts(context_set: Iterable[str], k: int,
                          cells: Dict[Tuple[int, ...], Sequence[int]]) -> ConditionalHistogram:
    """테스트/픽스처용: {key: counts} 에서 직접 생성"""
    names = normalize_context_set(context_set)
    if not cells:
        raise EmptyInputError("histogram cells")
    keys = np.array(list(cells.keys()), dtype=np.int64).reshape(len(cells), len(names))
    counts = np.array([list(v) for v in cells.values()], dtype=np.int64)
    if counts.shape[1] != k:
        raise ValidationError(f"count vectors must have length {k}")
    return _group(keys, counts, names, k)


# =============================================================================
# Sample file I/O
# =============================================================================

def load_samples(path: str, space: SymbolSpace) -> List[Sample]:
    """CSV 또는 IPMS 바이너리 샘플 파일 로드 (magic 으로 판별)"""
    file_path = Path(path)
    if not file_path.exists():
        raise ValidationError(f"sample file not found: {path}")
    with open(file_path, "rb") as fh:
        head = fh.read(4)
    samples = _load_binary(file_path, space) if head == BINARY_MAGIC else _load_csv(file_path, space)
    logger.info(f"[Dataset:load] {len(samples)} samples from {path}")
    return samples


def _load_csv(path: Path, space: SymbolSpace) -> List[Sample]:
    samples: List[Sample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or row[0].startswith("#") or row[0].strip().lower() == "ipm":
                continue
            samples.append(_parse_row(row, str(path), line_no, space))
    return samples


def _parse_row(row: List[str], path: str, line_no: int, space: SymbolSpace) -> Sample:
    if len(row) < 6 or (len(row) - 6) % 2 != 0:
        raise DatasetParseError(path, line_no, f"expected 6 fields plus candidate pairs, got {len(row)}")
    try:
        ipm = int(row[0])
        ctx = ContextTuple(*(int(v) for v in row[1:6]))
        rd = None
        if len(row) > 6:
            rd = tuple((int(row[i]), float(row[i + 1])) for i in range(6, len(row), 2))
    except ValueError as e:
        raise DatasetParseError(path, line_no, str(e))
    sample = Sample(ipm, ctx, rd)
    try:
        sample.validate(space)
    except ValueError as e:
        raise ValidationError(f"{path}:{line_no}: {e}")
    return sample


def _load_binary(path: Path, space: SymbolSpace) -> List[Sample]:
    raw = path.read_bytes()
    if len(raw) < _BINARY_HEADER.size:
        raise DatasetParseError(str(path), 0, "binary header truncated")
    magic, version, k, count = _BINARY_HEADER.unpack_from(raw, 0)
    if version != BINARY_VERSION:
        raise DatasetParseError(str(path), 0, f"unsupported binary version {version}")
    if k != space.k:
        raise ValidationError(f"{path}: file k={k} but active profile k={space.k}")
    body = raw[_BINARY_HEADER.size:]
    if len(body) != count * 12:
        raise DatasetParseError(str(path), 0, f"expected {count} records, payload holds {len(body) / 12:g}")
    table = np.frombuffer(body, dtype="<i2").reshape(count, 6).astype(np.int64)
    samples = []
    for index, rec in enumerate(table):
        sample = Sample(int(rec[0]), ContextTuple(*(int(v) for v in rec[1:])))
        try:
            sample.validate(space)
        except ValueError as e:
            raise ValidationError(f"{path}: record {index}: {e}")
        samples.append(sample)
    return samples


def save_samples(path: str, samples: Sequence[Sample], space: SymbolSpace, binary: bool = False,
                 header_comment: Optional[str] = None):
    if binary:
        if any(s.rd_candidates for s in samples):
            raise ValidationError("binary sample format does not carry rd_candidates")
        ipm, ctx = samples_to_arrays(samples)
        table = np.concatenate([ipm.reshape(-1, 1), ctx], axis=1).astype("<i2")
        with open(path, "wb") as fh:
            fh.write(_BINARY_HEADER.pack(BINARY_MAGIC, BINARY_VERSION, space.k, len(samples)))
            fh.write(table.tobytes())
    else:
        width = max((len(s.rd_candidates or ()) for s in samples), default=0)
        header = list(CSV_HEADER)
        for i in range(width):
            header += [f"cand{i}", f"d{i}"]
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(header)
            for s in samples:
                row = [s.ipm, *s.ctx.values()]
                for mode, dist in (s.rd_candidates or ()):
                    row += [mode, repr(float(dist))]
                writer.writerow(row)
    logger.info(f"[Dataset:save] {len(samples)} samples -> {path}")


# =============================================================================
# Synthetic generator
# =============================================================================

class SyntheticGenerator:
    """
    [DATA-SYNTH] 공간 상관을 조절할 수 있는 래스터 순서 IPM 생성기.
    이웃: L=(x-1,y), U=(x,y-1), UR=(x+1,y-1), UL=(x-1,y-1). BL 은 래스터 순서상 아직 코딩되지 않았으므로 항상 -1.
    """

    def __init__(self, space: SymbolSpace):
        self.space = space
        self._prefix = "[Dataset:Synth]"

    def generate(self, params: SynthParams) -> List[Sample]:
        method_prefix = f"{self._prefix}:generate"
        self._check(params)
        rng = np.random.default_rng(params.seed)
        width, height = params.width, params.height
        grid = np.full((height, width), UNAVAILABLE, dtype=np.int64)
        samples: List[Sample] = []

        def at(x: int, y: int) -> int:
            if 0 <= x < width and 0 <= y < height:
                return int(grid[y, x])
            return UNAVAILABLE

        for y in range(height):
            for x in range(width):
                ctx = ContextTuple(l=at(x - 1, y), u=at(x, y - 1), bl=UNAVAILABLE,
                                   ur=at(x + 1, y - 1), ul=at(x - 1, y - 1))
                mode = self._draw(rng, ctx, params)
                grid[y, x] = mode
                rd = self._rd_candidates(rng, mode, params) if params.rd_alternates > 0 else None
                samples.append(Sample(mode, ctx, rd))

        logger.info(f"{method_prefix} {len(samples)} samples (k={self.space.k}, seed={params.seed})")
        return samples

    def _check(self, params: SynthParams):
        probs = (params.copy_prob, params.jitter_prob, params.nonangular_prob)
        if any(p < 0 or p > 1 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ValidationError(f"invalid generator probabilities {probs}")
        if params.width < 2 or params.height < 2:
            raise ValidationError("grid must be at least 2x2")
        if params.rd_alternates < 0 or params.rd_alternates >= self.space.k:
            raise ValidationError(f"rd_alternates must lie in [0, {self.space.k - 1}]")

    def _uniform_angular(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.space.angular_min, self.space.angular_max + 1))

    def _draw(self, rng: np.random.Generator, ctx: ContextTuple, params: SynthParams) -> int:
        available = [v for v in (ctx.l, ctx.u, ctx.ur, ctx.ul) if v != UNAVAILABLE]
        r = rng.random()
        if r < params.copy_prob:
            if available:
                return int(available[rng.integers(len(available))])
            return self._uniform_angular(rng)
        if r < params.copy_prob + params.jitter_prob:
            if not available:
                return self._uniform_angular(rng)
            base = int(available[rng.integers(len(available))])
            offset = int(rng.choice((-2, -1, 1, 2)))
            # planar/DC 에는 방향 offset 이 없음
            return self.space.wrap(base, offset) if self.space.is_angular(base) else base
        if r < params.copy_prob + params.jitter_prob + params.nonangular_prob:
            return int(rng.integers(0, 2))
        return self._uniform_angular(rng)

    def _rd_candidates(self, rng: np.random.Generator, mode: int,
                       params: SynthParams) -> Tuple[Tuple[int, float], ...]:
        d0 = float(rng.exponential(1.0))
        others = np.array([m for m in range(self.space.k) if m != mode])
        picks = rng.choice(others, size=params.rd_alternates, replace=False)
        alternates = [(int(m), d0 + float(rng.exponential(params.rd_gap_scale)) + 1e-6) for m in picks]
        return ((mode, d0), *alternates)


def synth_dataset(space: SymbolSpace, params: SynthParams) -> List[Sample]:
    return SyntheticGenerator(space).generate(params)
