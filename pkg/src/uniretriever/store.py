"""Two-tier index storage.

Tier one (RAM): the PQ codebook (``codebook.cb``) and one code per item
(``codes.pqc``). Tier two (disk): ``index.urpl``, a posting-list file with one
sector-aligned record per item holding its id, float32 vector and neighbor ids.

Posting-list layout, little-endian::

    magic "URPL" | version u32 | N u64 | d u32 | R u32 | align u32 | entry_rank u64
    id table: N x u64 (item id of each rank)
    zero padding up to a multiple of ``align``            <- header_size
    N records, each padded to a multiple of ``align``:
        id u64 | vector d x f32 | neighbor_count u32 | R x u64 neighbor ids
"""

from __future__ import annotations

import mmap
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import SENTINEL
from .graph import VamanaGraph
from .quantizer import (
    Codebook,
    FormatError,
    read_codebook,
    read_codes,
    write_codebook,
    write_codes,
)

POSTING_MAGIC = b"URPL"
POSTING_VERSION = 1
DEFAULT_ALIGN = 4096

POSTING_FILE = "index.urpl"
CODEBOOK_FILE = "codebook.cb"
CODES_FILE = "codes.pqc"

_HEADER = struct.Struct("<4sIQIIIQ")


def _round_up(x: int, align: int) -> int:
    return -(-x // align) * align


def record_size(d: int, R: int) -> int:
    return 8 + 4 * d + 4 + 8 * R


def header_size(N: int, align: int) -> int:
    return _round_up(_HEADER.size + 8 * N, align)


@dataclass
class TierOne:
    codebook: Codebook
    codes: np.ndarray

    @property
    def N(self) -> int:
        return self.codes.shape[0]

    @property
    def code_bytes(self) -> int:
        return self.codes.shape[0] * self.codes.shape[1]

    @property
    def resident_bytes(self) -> int:
        return self.code_bytes + self.codebook.nbytes


@dataclass
class PostingRecord:
    id: int
    vector: np.ndarray
    neighbors: np.ndarray

    @property
    def neighbor_count(self) -> int:
        return len(self.neighbors)


def _record_dtype(d: int, R: int) -> np.dtype:
    return np.dtype([("id", "<u8"), ("vector", "<f4", (d,)), ("count", "<u4"), ("nbrs", "<u8", (R,))])


def write_posting_file(path, vectors, graph: VamanaGraph, ids=None, align: int = DEFAULT_ALIGN) -> None:
    vectors = np.asarray(vectors, dtype=np.float32)
    N, d = vectors.shape
    R = graph.R
    if graph.N != N:
        raise ValueError(f"graph has {graph.N} nodes but {N} vectors were given")
    ids = np.arange(N, dtype=np.uint64) if ids is None else np.asarray(ids, dtype=np.uint64)
    if ids.shape != (N,) or len(np.unique(ids)) != N or np.any(ids == SENTINEL):
        raise ValueError("ids must be N unique values, none equal to the sentinel")
    rec = record_size(d, R)
    padded = _round_up(rec, align)
    hsize = header_size(N, align)
    recs = np.zeros(N, dtype=_record_dtype(d, R))
    recs["id"] = ids
    recs["vector"] = vectors
    recs["count"] = graph.degree
    nbrs = np.full((N, R), SENTINEL, dtype=np.uint64)
    mask = graph.adjacency >= 0
    nbrs[mask] = ids[graph.adjacency[mask]]
    recs["nbrs"] = nbrs
    body = np.zeros((N, padded), dtype=np.uint8)
    body[:, :rec] = recs.view(np.uint8).reshape(N, rec)
    header = bytearray(hsize)
    _HEADER.pack_into(header, 0, POSTING_MAGIC, POSTING_VERSION, N, d, R, align, graph.entry_point)
    header[_HEADER.size : _HEADER.size + 8 * N] = ids.astype("<u8").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(body.tobytes())
    except OSError as exc:
        raise OSError(f"failed to write posting list {path}: {exc}") from exc


def write_index(vectors, graph: VamanaGraph, tier1: TierOne, path, ids=None, align: int = DEFAULT_ALIGN) -> None:
    """Write the posting-list, codebook and code files into directory ``path``."""
    vectors = np.asarray(vectors, dtype=np.float32)
    if not (len(vectors) == graph.N == tier1.N):
        raise ValueError(
            f"inconsistent sizes: {len(vectors)} vectors, {graph.N} graph nodes, {tier1.N} codes"
        )
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create index directory {path}: {exc}") from exc
    write_posting_file(path / POSTING_FILE, vectors, graph, ids, align)
    write_codebook(tier1.codebook, path / CODEBOOK_FILE)
    write_codes(tier1.codes, path / CODES_FILE)


class PostingListFile:
    """Read handle over a posting-list file with a sector-read counter.

    Each handle owns its counter; open one handle per concurrent reader.
    """

    def __init__(self, path):
        self.path = Path(path)
        with open(self.path, "rb") as f:
            head = f.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise FormatError(f"{self.path}: file too short for posting-list header")
            magic, version, N, d, R, align, entry = _HEADER.unpack(head)
            if magic != POSTING_MAGIC:
                raise FormatError(f"{self.path}: bad magic {magic!r}, expected {POSTING_MAGIC!r}")
            if version != POSTING_VERSION:
                raise FormatError(f"{self.path}: unsupported version {version}")
            if align == 0:
                raise FormatError(f"{self.path}: zero alignment")
            self.N, self.d, self.R, self.align, self.entry_rank = N, d, R, align, entry
            self.record_size = record_size(d, R)
            self.padded_record_size = _round_up(self.record_size, align)
            self.header_size = header_size(N, align)
            expected = self.header_size + N * self.padded_record_size
            actual = self.path.stat().st_size
            if actual != expected:
                raise FormatError(f"{self.path}: expected {expected} bytes, found {actual}")
            self.ids = np.frombuffer(f.read(8 * N), dtype="<u8").astype(np.uint64)
            self._mm = mmap.mmap(f.fileno(), 0, access=mmap.ACCESS_READ) if N else None
        self._dtype = _record_dtype(d, R)
        self._sectors_per_record = self.padded_record_size // align
        order = np.argsort(self.ids, kind="stable")
        self._sorted_ids = self.ids[order]
        self._rank_of_sorted = order
        self.sector_reads = 0

    def close(self) -> None:
        if self._mm is not None:
            self._mm.close()
            self._mm = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def ranks_of(self, ids) -> np.ndarray:
        """Map item ids to dense ranks."""
        ids = np.asarray(ids, dtype=np.uint64)
        pos = np.searchsorted(self._sorted_ids, ids)
        pos = np.minimum(pos, max(self.N - 1, 0))
        if self.N == 0 or np.any(self._sorted_ids[pos] != ids):
            raise KeyError("unknown item id")
        return self._rank_of_sorted[pos]

    def _raw(self, rank: int):
        off = self.header_size + rank * self.padded_record_size
        return np.frombuffer(self._mm, dtype=self._dtype, count=1, offset=off)[0]

    def read_record(self, rank: int) -> PostingRecord:
        """Fetch one record by rank, charging its sectors to the counter."""
        if not 0 <= rank < self.N:
            raise IndexError(f"rank {rank} out of bounds for N={self.N}")
        raw = self._raw(int(rank))
        self.sector_reads += self._sectors_per_record
        count = int(raw["count"])
        if count > self.R:
            raise FormatError(f"{self.path}: record {rank} has neighbor_count {count} > R={self.R}")
        nbrs = raw["nbrs"][:count].astype(np.uint64)
        nbrs = nbrs[nbrs != SENTINEL]
        return PostingRecord(int(raw["id"]), raw["vector"].astype(np.float32), nbrs)

    def header(self) -> dict:
        return {
            "magic": POSTING_MAGIC.decode(),
            "version": POSTING_VERSION,
            "N": self.N,
            "d": self.d,
            "R": self.R,
            "align": self.align,
            "entry_rank": self.entry_rank,
            "header_size": self.header_size,
            "record_size": self.record_size,
            "padded_record_size": self.padded_record_size,
        }


def open_posting_file(path) -> PostingListFile:
    return PostingListFile(path)


def load_tier_one(codebook_path, codes_path) -> TierOne:
    cb = read_codebook(codebook_path)
    codes = read_codes(codes_path)
    if codes.shape[1] != cb.M:
        raise FormatError(f"{codes_path}: code length {codes.shape[1]} does not match codebook M={cb.M}")
    if codes.size and codes.max() >= cb.P:
        raise FormatError(f"{codes_path}: code entry exceeds P={cb.P}")
    return TierOne(cb, codes)


@dataclass
class DiskIndex:
    """An opened index: tier one in memory plus a posting-list handle."""

    tier1: TierOne
    postings: PostingListFile

    @classmethod
    def open(cls, directory) -> "DiskIndex":
        directory = Path(directory)
        tier1 = load_tier_one(directory / CODEBOOK_FILE, directory / CODES_FILE)
        postings = PostingListFile(directory / POSTING_FILE)
        if tier1.N != postings.N:
            raise FormatError(f"{directory}: {tier1.N} codes but {postings.N} posting records")
        if tier1.codebook.d != postings.d:
            raise FormatError(f"{directory}: codebook d={tier1.codebook.d}, postings d={postings.d}")
        return cls(tier1, postings)

    def reader(self) -> "DiskIndex":
        """A new handle sharing tier one but with its own file handle and counter."""
        return DiskIndex(self.tier1, PostingListFile(self.postings.path))

    def close(self) -> None:
        self.postings.close()
