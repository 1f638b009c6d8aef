import struct
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Dict, Optional, Sequence, Tuple

import numpy as np

from infra.exceptions import (
    ValidationError, BlobFormatError, HashMismatchError, TruncatedPayloadError
)
from domain.models import ContextTuple, Sample, CONTEXT_NAMES
from domain.codes import realize_codewords
from domain.scheme import Scheme

logger = logging.getLogger("System")

BLOB_MAGIC = b"IPMB"
BLOB_VERSION = 1
# magic, version, scheme hash, k, sample count, payload bits
_BLOB_HEADER = struct.Struct("<4sB8sHIQ")


# =============================================================================
# Bit I/O (MSB first)
# =============================================================================

class BitWriter:
    """메모리 버퍼에 MSB 우선으로 비트를 기록. 마지막 바이트는 0 으로 패딩"""

    def __init__(self):
        self.buffer = bytearray()
        self.current = 0
        self.pending = 0
        self.bit_count = 0

    def write_bit(self, bit: int):
        self.current = (self.current << 1) | (bit & 1)
        self.pending += 1
        self.bit_count += 1
        if self.pending == 8:
            self.buffer.append(self.current)
            self.current = 0
            self.pending = 0

    def write_bits(self, value: int, width: int):
        for shift in range(width - 1, -1, -1):
            self.write_bit((value >> shift) & 1)

    def write_string(self, bits: str):
        for ch in bits:
            self.write_bit(1 if ch == "1" else 0)

    def getvalue(self) -> bytes:
        out = bytearray(self.buffer)
        if self.pending:
            out.append(self.current << (8 - self.pending))
        return bytes(out)


class BitReader:
    """bit_limit 까지만 읽음. 끝에 도달하면 -1"""

    def __init__(self, data: bytes, bit_limit: Optional[int] = None):
        self.data = data
        self.bit_limit = len(data) * 8 if bit_limit is None else bit_limit
        if self.bit_limit > len(data) * 8:
            raise BlobFormatError(f"payload holds {len(data) * 8} bits, header claims {self.bit_limit}")
        self.position = 0

    def read_bit(self) -> int:
        if self.position >= self.bit_limit:
            return -1
        byte = self.data[self.position >> 3]
        bit = (byte >> (7 - (self.position & 7))) & 1
        self.position += 1
        return bit

    def read_bits(self, width: int) -> int:
        value = 0
        for _ in range(width):
            bit = self.read_bit()
            if bit < 0:
                raise EOFError("bit stream exhausted")
            value = (value << 1) | bit
        return value

    @property
    def remaining(self) -> int:
        return self.bit_limit - self.position


# =============================================================================
# Blob
# =============================================================================

@dataclass
class EncodedBlob:
    scheme_hash: bytes
    k: int
    count: int
    payload: bytes
    payload_bits: int
    cabac_groups: Optional[List[int]] = None  # 분석용 side channel (파일에 저장하지 않음)

    def to_bytes(self) -> bytes:
        header = _BLOB_HEADER.pack(BLOB_MAGIC, BLOB_VERSION, self.scheme_hash, self.k, self.count, self.payload_bits)
        return header + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedBlob":
        if len(data) < _BLOB_HEADER.size:
            raise BlobFormatError(f"blob shorter than its {_BLOB_HEADER.size}-byte header")
        magic, version, scheme_hash, k, count, bits = _BLOB_HEADER.unpack_from(data)
        if magic != BLOB_MAGIC:
            raise BlobFormatError(f"bad magic {magic!r}")
        if version != BLOB_VERSION:
            raise BlobFormatError(f"unsupported version {version}")
        payload = data[_BLOB_HEADER.size:]
        if len(payload) != (bits + 7) // 8:
            raise BlobFormatError(f"payload has {len(payload)} bytes, header claims {bits} bits")
        return cls(scheme_hash, k, count, payload, bits)


def save_blob(blob: EncodedBlob, path: str):
    Path(path).write_bytes(blob.to_bytes())
    logger.info(f"[Codec:save] {blob.count} samples, {blob.payload_bits} bits -> {path}")


def load_blob(path: str) -> EncodedBlob:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise BlobFormatError(f"{path}: {e}")
    return EncodedBlob.from_bytes(data)


# =============================================================================
# Encode / Decode
# =============================================================================

def _context_ranks(scheme: Scheme, contexts: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """고유 컨텍스트 단위로 (inverse, leaf ids, rank 표)"""
    if len(contexts) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, np.zeros((0, scheme.space.k), dtype=np.int64)
    uniq, inverse = np.unique(contexts, axis=0, return_inverse=True)
    columns = {name: uniq[:, i] for i, name in enumerate(CONTEXT_NAMES)}
    leaf_ids, ranks = scheme.rank_table(columns)
    return inverse.reshape(-1), leaf_ids, ranks


class SchemeCodec:
    """
    [CODEC] 스킴 기반 IPM 비트 부호화/복호화.
    샘플마다 leaf 라우팅 -> rank -> 해당 leaf 코드워드 표의 비트열.
    """

    def __init__(self, scheme: Scheme):
        self.scheme = scheme
        self.tables = [realize_codewords(leaf.shape) for leaf in scheme.leaves]
        self.decoders: List[Dict[str, int]] = [t.decoder() for t in self.tables]
        self.max_lengths = [max(t.lengths()) for t in self.tables]
        self._prefix = "[Codec]"

    def encode(self, samples: Sequence[Sample]) -> EncodedBlob:
        method_prefix = f"{self._prefix}:encode"
        space = self.scheme.space
        for i, sample in enumerate(samples):
            try:
                sample.validate(space)
            except ValueError as e:
                raise ValidationError(f"sample {i}: {e}")
        contexts = np.array([s.ctx.values() for s in samples], dtype=np.int64).reshape(len(samples), len(CONTEXT_NAMES))
        inverse, leaf_ids, ranks = _context_ranks(self.scheme, contexts)
        writer = BitWriter()
        groups: List[int] = []
        leaves = self.scheme.leaves
        for i, sample in enumerate(samples):
            cell = inverse[i]
            leaf = int(leaf_ids[cell])
            writer.write_string(self.tables[leaf].codewords[int(ranks[cell, sample.ipm])])
            groups.append(leaves[leaf].cabac_group)
        blob = EncodedBlob(self.scheme.hash(), space.k, len(samples), writer.getvalue(), writer.bit_count, groups)
        logger.debug(f"{method_prefix} samples={len(samples)} bits={writer.bit_count}")
        return blob

    def decode(self, blob: EncodedBlob, contexts: Sequence[ContextTuple]) -> List[int]:
        method_prefix = f"{self._prefix}:decode"
        actual = self.scheme.hash()
        if blob.scheme_hash != actual:
            raise HashMismatchError(blob.scheme_hash.hex(), actual.hex())
        if blob.k != self.scheme.space.k:
            raise ValidationError(f"blob k={blob.k} but scheme k={self.scheme.space.k}")
        if len(contexts) != blob.count:
            raise ValidationError(f"{len(contexts)} contexts for {blob.count} encoded samples")
        table = np.array([c.values() for c in contexts], dtype=np.int64).reshape(len(contexts), len(CONTEXT_NAMES))
        inverse, leaf_ids, ranks = _context_ranks(self.scheme, table)
        modes_by_rank = np.argsort(ranks, axis=1)
        reader = BitReader(blob.payload, blob.payload_bits)
        out: List[int] = []
        for i in range(blob.count):
            cell = inverse[i]
            leaf = int(leaf_ids[cell])
            decoder = self.decoders[leaf]
            word = ""
            while word not in decoder:
                if len(word) >= self.max_lengths[leaf]:
                    raise ValidationError(f"invalid codeword {word!r} at sample {i}")
                bit = reader.read_bit()
                if bit < 0:
                    logger.error(f"{method_prefix} payload ended inside sample {i}")
                    raise TruncatedPayloadError(i)
                word += "1" if bit else "0"
            out.append(int(modes_by_rank[cell, decoder[word]]))
        if reader.remaining:
            logger.warning(f"{method_prefix} {reader.remaining} trailing payload bits ignored")
        return out


def encode(scheme: Scheme, samples: Sequence[Sample]) -> EncodedBlob:
    return SchemeCodec(scheme).encode(samples)


def decode(scheme: Scheme, blob: EncodedBlob, contexts: Sequence[ContextTuple]) -> List[int]:
    return SchemeCodec(scheme).decode(blob, contexts)
