"""Episodic key-value memory with exact k-nearest-neighbour retrieval.

Keys are input representations, values are integer class labels. Retrieval is
a brute-force scan: squared Euclidean distances are computed for every entry
and the k best are kept in a bounded max-heap ordered by (distance, seq), so
ties go to the older entry.
"""

from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

DEFAULT_EPS = 1e-3

SNAPSHOT_MAGIC = b"HEBM"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<4sHIBQQ")  # magic, version, dim, capacity tag, capacity size, count
_TAG_UNBOUNDED = 0
_TAG_RING = 1


class EmptyMemoryError(LookupError):
    """Raised when retrieving from a memory that holds no entries."""


class SnapshotError(ValueError):
    """Raised when a snapshot byte stream cannot be decoded."""


@dataclass(frozen=True)
class Unbounded:
    """Keep every entry ever written."""

    def __str__(self) -> str:
        return "unbounded"


@dataclass(frozen=True)
class RingBuffer:
    """Keep at most ``max_size`` entries, evicting the oldest first."""

    max_size: int

    def __post_init__(self):
        if int(self.max_size) != self.max_size or self.max_size <= 0:
            raise ValueError(f"ring buffer size must be a positive integer, got {self.max_size!r}")

    def __str__(self) -> str:
        return f"ring_buffer({self.max_size})"


CapacityPolicy = Union[Unbounded, RingBuffer]


@dataclass(frozen=True)
class MemoryEntry:
    key: np.ndarray
    value: int
    seq: int


@dataclass(frozen=True, eq=False)
class Neighborhood:
    """Retrieved neighbours, sorted by descending closeness.

    Stored column-wise: ``keys`` is (m, d), the rest are length-m vectors.
    """

    keys: np.ndarray
    labels: np.ndarray
    closeness: np.ndarray
    seqs: np.ndarray = field(default=None)

    def __post_init__(self):
        keys = np.asarray(self.keys, dtype=np.float64)
        if keys.ndim == 1:
            keys = keys.reshape(len(keys), -1) if len(keys) else keys.reshape(0, 0)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        closeness = np.asarray(self.closeness, dtype=np.float64).reshape(-1)
        seqs = (np.arange(len(labels), dtype=np.int64) if self.seqs is None
                else np.asarray(self.seqs, dtype=np.int64).reshape(-1))
        if not (len(keys) == len(labels) == len(closeness) == len(seqs)):
            raise ValueError("neighborhood columns have mismatched lengths")
        object.__setattr__(self, "keys", keys)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "closeness", closeness)
        object.__setattr__(self, "seqs", seqs)

    @classmethod
    def from_items(cls, items: Iterable[tuple], dim: int | None = None) -> "Neighborhood":
        """Build from ``(key, label, closeness)`` triples, keeping their order."""
        items = list(items)
        if not items:
            return cls.empty(dim or 0)
        keys = np.array([np.asarray(it[0], dtype=np.float64) for it in items])
        return cls(keys, [it[1] for it in items], [it[2] for it in items])

    @classmethod
    def empty(cls, dim: int) -> "Neighborhood":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0), np.zeros(0, np.int64))

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int, float]]:
        for key, y, c in zip(self.keys, self.labels.tolist(), self.closeness.tolist()):
            yield key, y, c

    def select(self, mask: np.ndarray) -> "Neighborhood":
        """Order-preserving subset picked by a boolean mask."""
        return Neighborhood(self.keys[mask], self.labels[mask], self.closeness[mask], self.seqs[mask])

    def label_set(self) -> list[int]:
        """Distinct labels in first-appearance order."""
        return list(dict.fromkeys(self.labels.tolist()))


def partition(nbrs: Neighborhood, i: int) -> tuple[Neighborhood, Neighborhood]:
    """Split into (entries labelled ``i``, all other entries)."""
    mask = nbrs.labels == i
    return nbrs.select(mask), nbrs.select(~mask)


def select_new(nbrs: Neighborhood, pretrain_classes: Iterable[int]) -> Neighborhood:
    """Entries whose label was not part of the initial training phase.

    With an empty ``pretrain_classes`` every entry counts as new, which is how
    the continual setting applies the Hebbian rule to the whole neighbourhood.
    """
    seen = np.fromiter(set(pretrain_classes), dtype=np.int64)
    if seen.size == 0:
        return nbrs
    return nbrs.select(~np.isin(nbrs.labels, seen))


class EpisodicMemory:
    """Key-value store of (representation, label) pairs.

    Writes need exclusive access (an internal lock serialises writers);
    ``retrieve_knn`` and ``class_count`` only read and may run concurrently
    with each other.
    """

    def __init__(self, dim: int, capacity: CapacityPolicy | int | None = None):
        if int(dim) != dim or dim <= 0:
            raise ValueError(f"dim must be a positive integer, got {dim!r}")
        if capacity is None:
            capacity = Unbounded()
        elif isinstance(capacity, (int, np.integer)):
            capacity = RingBuffer(int(capacity))
        self.dim = int(dim)
        self.capacity: CapacityPolicy = capacity
        alloc = capacity.max_size if isinstance(capacity, RingBuffer) else 64
        self._keys = np.zeros((alloc, self.dim))
        self._values = np.zeros(alloc, dtype=np.int64)
        self._seqs = np.zeros(alloc, dtype=np.int64)
        self._size = 0
        self._next_seq = 0
        self._counts: dict[int, int] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    def __repr__(self) -> str:
        return f"EpisodicMemory(dim={self.dim}, capacity={self.capacity}, size={self._size})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodicMemory):
            return NotImplemented
        if (self.dim, self.capacity, self._size, self._next_seq, self._counts) != (
                other.dim, other.capacity, other._size, other._next_seq, other._counts):
            return False
        a, b = self._ordered(), other._ordered()
        return all(np.array_equal(x, y) for x, y in zip(a, b))

    @property
    def next_seq(self) -> int:
        return self._next_seq

    @property
    def class_counts(self) -> dict[int, int]:
        return dict(sorted(self._counts.items()))

    def write(self, h, y: int) -> "EpisodicMemory":
        """Append ``(h, y)``; under a ring buffer the oldest entry is evicted when full."""
        key = np.asarray(h, dtype=np.float64).reshape(-1)
        if key.shape[0] != self.dim:
            raise ValueError(f"key dimension {key.shape[0]} does not match memory dim {self.dim}")
        if not np.all(np.isfinite(key)):
            raise ValueError("key has non-finite components")
        if int(y) != y or y < 0 or y > 0xFFFFFFFF:
            raise ValueError(f"label must be a non-negative 32-bit integer, got {y!r}")
        y = int(y)
        with self._lock:
            if isinstance(self.capacity, RingBuffer):
                slot = self._next_seq % self.capacity.max_size
                if self._size == self.capacity.max_size:
                    self._decrement(int(self._values[slot]))
                else:
                    self._size += 1
            else:
                slot = self._size
                if slot == len(self._values):
                    self._grow()
                self._size += 1
            self._keys[slot] = key
            self._values[slot] = y
            self._seqs[slot] = self._next_seq
            self._next_seq += 1
            self._counts[y] = self._counts.get(y, 0) + 1
        return self

    def write_many(self, H, ys) -> "EpisodicMemory":
        for h, y in zip(np.asarray(H, dtype=np.float64), ys):
            self.write(h, int(y))
        return self

    def class_count(self, i: int) -> int:
        return self._counts.get(int(i), 0)

    def retrieve_knn(self, h, k: int, eps: float = DEFAULT_EPS) -> Neighborhood:
        """Exact K nearest neighbours of ``h`` with closeness 1/(eps + ||h - h_k||^2)."""
        if int(k) != k or k <= 0:
            raise ValueError(f"k must be a positive integer, got {k!r}")
        if not eps > 0:
            raise ValueError(f"eps must be positive, got {eps!r}")
        if self._size == 0:
            raise EmptyMemoryError("empty memory")
        q = np.asarray(h, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dim:
            raise ValueError(f"query dimension {q.shape[0]} does not match memory dim {self.dim}")
        n = self._size
        keys, seqs = self._keys[:n], self._seqs[:n]
        d2 = np.sum((keys - q) ** 2, axis=1)
        k = int(k)
        if k < n:
            # Everything at or below the k-th smallest distance can make the cut; ties included.
            kth = np.partition(d2, k - 1)[k - 1]
            cand = np.flatnonzero(d2 <= kth)
        else:
            cand = np.arange(n)
        best = heapq.nsmallest(k, zip(d2[cand].tolist(), seqs[cand].tolist(), cand.tolist()))
        idx = np.fromiter((t[2] for t in best), dtype=np.int64, count=len(best))
        dist = d2[idx]
        return Neighborhood(keys[idx].copy(), self._values[idx].copy(), 1.0 / (eps + dist), seqs[idx].copy())

    def entries(self) -> list[MemoryEntry]:
        keys, values, seqs = self._ordered()
        return [MemoryEntry(k.copy(), int(v), int(s)) for k, v, s in zip(keys, values.tolist(), seqs.tolist())]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(keys, values, seqs) of live entries in insertion order."""
        return tuple(a.copy() for a in self._ordered())

    def copy(self) -> "EpisodicMemory":
        return EpisodicMemory.from_bytes(self.to_bytes())

    def _ordered(self):
        n = self._size
        order = np.argsort(self._seqs[:n], kind="stable")
        return self._keys[:n][order], self._values[:n][order], self._seqs[:n][order]

    def _grow(self):
        cap = 2 * len(self._values)
        keys = np.zeros((cap, self.dim))
        keys[: self._size] = self._keys[: self._size]
        self._keys = keys
        self._values = np.resize(self._values, cap)
        self._seqs = np.resize(self._seqs, cap)

    def _decrement(self, y: int):
        left = self._counts[y] - 1
        if left:
            self._counts[y] = left
        else:
            del self._counts[y]

    # -- snapshot --------------------------------------------------------------

    def to_bytes(self) -> bytes:
        if isinstance(self.capacity, RingBuffer):
            tag, size = _TAG_RING, self.capacity.max_size
        else:
            tag, size = _TAG_UNBOUNDED, 0
        keys, values, seqs = self._ordered()
        parts = [_HEADER.pack(SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.dim, tag, size, self._size)]
        row = np.dtype([("seq", "<u8"), ("value", "<u4"), ("key", "<f8", (self.dim,))])
        rec = np.zeros(self._size, dtype=row)
        rec["seq"], rec["value"], rec["key"] = seqs, values, keys
        parts.append(rec.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "EpisodicMemory":
        if len(data) < _HEADER.size:
            raise SnapshotError("truncated snapshot header")
        magic, version, dim, tag, size, count = _HEADER.unpack_from(data, 0)
        if magic != SNAPSHOT_MAGIC:
            raise SnapshotError(f"bad magic {magic!r}, expected {SNAPSHOT_MAGIC!r}")
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        if dim == 0:
            raise SnapshotError("snapshot dim is zero")
        if tag == _TAG_UNBOUNDED:
            capacity: CapacityPolicy = Unbounded()
        elif tag == _TAG_RING and size > 0:
            capacity = RingBuffer(size)
        else:
            raise SnapshotError(f"bad capacity policy tag={tag} size={size}")
        row = np.dtype([("seq", "<u8"), ("value", "<u4"), ("key", "<f8", (dim,))])
        body = data[_HEADER.size:]
        if len(body) != count * row.itemsize:
            raise SnapshotError(f"snapshot body is {len(body)} bytes, expected {count * row.itemsize}")
        rec = np.frombuffer(body, dtype=row)
        if isinstance(capacity, RingBuffer) and count > capacity.max_size:
            raise SnapshotError("entry count exceeds ring buffer size")
        seqs = rec["seq"].astype(np.int64)
        if count and np.any(np.diff(seqs) != 1):
            raise SnapshotError("entry sequence numbers are not contiguous")
        full_ring = isinstance(capacity, RingBuffer) and count == capacity.max_size
        if count and not full_ring and seqs[0] != 0:
            raise SnapshotError("entries were evicted but memory is not at capacity")
        if not np.all(np.isfinite(rec["key"])):
            raise SnapshotError("snapshot contains non-finite keys")
        mem = cls(dim, capacity)
        if isinstance(capacity, RingBuffer):
            slots = seqs % capacity.max_size
        else:
            slots = np.arange(count)
            while len(mem._values) < count:
                mem._grow()
        mem._keys[slots] = rec["key"]
        mem._values[slots] = rec["value"].astype(np.int64)
        mem._seqs[slots] = seqs
        mem._size = int(count)
        # seq is handed out contiguously and eviction only drops the oldest,
        # so the next one follows the newest live entry.
        mem._next_seq = int(seqs[-1]) + 1 if count else 0
        for v in rec["value"].tolist():
            mem._counts[v] = mem._counts.get(v, 0) + 1
        return mem

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "EpisodicMemory":
        return cls.from_bytes(Path(path).read_bytes())


# Functional aliases mirroring the operation names used elsewhere in the package.

def write(mem: EpisodicMemory, h, y: int) -> EpisodicMemory:
    return mem.write(h, y)


def retrieve_knn(mem: EpisodicMemory, h, k: int, eps: float = DEFAULT_EPS) -> Neighborhood:
    return mem.retrieve_knn(h, k, eps)


def class_count(mem: EpisodicMemory, i: int) -> int:
    return mem.class_count(i)


def snapshot(mem: EpisodicMemory) -> bytes:
    return mem.to_bytes()


def restore(data: bytes) -> EpisodicMemory:
    return EpisodicMemory.from_bytes(data)
