"""Arena-based memory manager with allocation telemetry.

Two arenas: PERMANENT allocations live until shutdown, TEMPORARY allocations
come from a growable pool whose free space is reused before the pool grows.
The pool grows geometrically (new chunk of at least twice the unmet request,
4 MiB floor) so a steady-state workload stops growing after one warmup pass.
Telemetry is always on; it is a handful of counters.

All returned regions are 64-byte aligned and zero initialized.  Allocate,
release and coalesce are serialized internally; the buffers themselves may
be used concurrently by kernels.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "ArenaKind",
    "PoolStats",
    "BufferHandle",
    "ArenaPool",
    "PoolError",
    "DoubleReleaseError",
    "PoolOutOfMemory",
    "PoolLeakError",
    "thread_local_footprint",
]

ALIGNMENT = 64
INITIAL_BLOCK = 4 * 1024 * 1024


class ArenaKind(Enum):
    PERMANENT = "permanent"
    TEMPORARY = "temporary"


class PoolError(RuntimeError):
    pass


class DoubleReleaseError(PoolError):
    pass


class PoolOutOfMemory(PoolError):
    def __init__(self, requested: int, stats: "PoolStats"):
        super().__init__(f"allocation of {requested} bytes failed; stats: {stats}")
        self.requested = requested
        self.stats = stats


class PoolLeakError(PoolError):
    def __init__(self, report):
        super().__init__(f"live temporary allocations at shutdown: {report.leaked_temporary}")
        self.report = report


@dataclass
class PoolStats:
    current_bytes: int = 0
    peak_bytes: int = 0
    pool_capacity_bytes: int = 0
    allocation_count: int = 0
    release_count: int = 0
    growth_events: int = 0

    def as_dict(self):
        return {
            "current": self.current_bytes,
            "peak": self.peak_bytes,
            "capacity": self.pool_capacity_bytes,
            "alloc_count": self.allocation_count,
            "release_count": self.release_count,
            "growth_events": self.growth_events,
        }


@dataclass(frozen=True)
class BufferHandle:
    id: int
    size_bytes: int
    arena: ArenaKind


@dataclass
class LeakReport:
    leaked_permanent: list
    leaked_temporary: list

    @property
    def clean(self) -> bool:
        return not self.leaked_permanent and not self.leaked_temporary


def _round_up(n: int, align: int = ALIGNMENT) -> int:
    return (n + align - 1) // align * align


class _Chunk:
    """One backing allocation of the temporary pool with a free-span list."""

    def __init__(self, capacity: int):
        self.capacity = capacity
        raw = np.empty(capacity + ALIGNMENT, dtype=np.uint8)
        addr = raw.__array_interface__["data"][0]
        base = (-addr) % ALIGNMENT
        self.raw = raw
        self.mem = raw[base : base + capacity]
        self.free: list[tuple[int, int]] = [(0, capacity)]  # (offset, size), sorted

    def carve(self, size: int):
        for k, (off, sz) in enumerate(self.free):
            if sz >= size:
                if sz == size:
                    del self.free[k]
                else:
                    self.free[k] = (off + size, sz - size)
                return off
        return None

    def restore(self, off: int, size: int):
        # insert sorted by offset; merging is deferred to coalesce()
        lo, hi = 0, len(self.free)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.free[mid][0] < off:
                lo = mid + 1
            else:
                hi = mid
        self.free.insert(lo, (off, size))

    def coalesce(self) -> int:
        merged_bytes = 0
        out = []
        for off, sz in self.free:
            if out and out[-1][0] + out[-1][1] == off:
                out[-1] = (out[-1][0], out[-1][1] + sz)
                merged_bytes += sz
            else:
                out.append((off, sz))
        self.free = out
        return merged_bytes

    @property
    def fully_free(self) -> bool:
        return len(self.free) == 1 and self.free[0] == (0, self.capacity)


class ArenaPool:
    """Permanent arena plus coalescible temporary pool, with telemetry."""

    def __init__(self, initial_block: int = INITIAL_BLOCK):
        self._lock = threading.RLock()
        self._initial_block = initial_block
        self._chunks: list[_Chunk] = []
        self._perm: dict[int, np.ndarray] = {}
        self._live: dict[int, tuple] = {}  # id -> (arena, chunk_idx|None, offset, size)
        self._next_id = 0
        self._stats = {k: PoolStats() for k in ArenaKind}

    # -- allocation ---------------------------------------------------------

    def allocate(self, arena: ArenaKind, size_bytes: int) -> BufferHandle:
        """Return a handle to zero-initialized, 64-byte aligned storage."""
        if size_bytes <= 0:
            raise ValueError("allocation size must be positive")
        size = _round_up(size_bytes)
        with self._lock:
            st = self._stats[arena]
            if arena is ArenaKind.PERMANENT:
                raw = np.empty(size + ALIGNMENT, dtype=np.uint8)
                base = (-raw.__array_interface__["data"][0]) % ALIGNMENT
                mem = raw[base : base + size]
                mem[:] = 0
                hid = self._next_id
                self._next_id += 1
                self._perm[hid] = mem
                self._live[hid] = (arena, None, 0, size)
                st.pool_capacity_bytes += size
            else:
                loc = self._carve_pool(size)
                if loc is None:
                    raise PoolOutOfMemory(size_bytes, self._stats[arena])
                cidx, off = loc
                self._chunks[cidx].mem[off : off + size] = 0
                hid = self._next_id
                self._next_id += 1
                self._live[hid] = (arena, cidx, off, size)
            st.allocation_count += 1
            st.current_bytes += size
            st.peak_bytes = max(st.peak_bytes, st.current_bytes)
            return BufferHandle(id=hid, size_bytes=size_bytes, arena=arena)

    def _carve_pool(self, size: int):
        for cidx, chunk in enumerate(self._chunks):
            off = chunk.carve(size)
            if off is not None:
                return cidx, off
        # no free span fits: grow by at least twice the deficit
        cap = max(self._initial_block, _round_up(2 * size))
        chunk = _Chunk(cap)
        self._chunks.append(chunk)
        st = self._stats[ArenaKind.TEMPORARY]
        st.growth_events += 1
        st.pool_capacity_bytes += cap
        off = chunk.carve(size)
        return (len(self._chunks) - 1, off) if off is not None else None

    def release(self, h: BufferHandle):
        with self._lock:
            rec = self._live.pop(h.id, None)
            if rec is None:
                raise DoubleReleaseError(f"double release or foreign handle: {h}")
            arena, cidx, off, size = rec
            st = self._stats[arena]
            st.release_count += 1
            st.current_bytes -= size
            if arena is ArenaKind.PERMANENT:
                self._perm.pop(h.id)
                st.pool_capacity_bytes -= size
            else:
                self._chunks[cidx].restore(off, size)

    def coalesce(self) -> int:
        """Merge adjacent free spans; drop fully-free extra chunks.

        Returns the number of bytes reclaimed (merged into larger blocks or
        returned to the system).  Live handles stay valid.
        """
        with self._lock:
            reclaimed = 0
            for chunk in self._chunks:
                reclaimed += chunk.coalesce()
            keep = []
            remap = {}
            for cidx, chunk in enumerate(self._chunks):
                if cidx > 0 and chunk.fully_free:
                    reclaimed += chunk.capacity
                    self._stats[ArenaKind.TEMPORARY].pool_capacity_bytes -= chunk.capacity
                else:
                    remap[cidx] = len(keep)
                    keep.append(chunk)
            if len(keep) != len(self._chunks):
                self._chunks = keep
                self._live = {
                    hid: (arena, remap[cidx] if cidx is not None else None, off, size)
                    for hid, (arena, cidx, off, size) in self._live.items()
                }
            return reclaimed

    # -- access and introspection -------------------------------------------

    def as_array(self, h: BufferHandle, shape, dtype=np.float64) -> np.ndarray:
        """Typed view of a live buffer; the view must not outlive the handle."""
        with self._lock:
            rec = self._live.get(h.id)
            if rec is None:
                raise PoolError(f"handle not live: {h}")
            arena, cidx, off, size = rec
            mem = self._perm[h.id] if arena is ArenaKind.PERMANENT else self._chunks[cidx].mem[off : off + size]
        arr = mem.view(dtype)
        need = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        return arr[:need].reshape(shape)

    @contextmanager
    def borrow(self, shape, dtype=np.float64):
        """Scoped temporary array backed by the pool."""
        nbytes = int(np.prod(shape)) * np.dtype(dtype).itemsize
        h = self.allocate(ArenaKind.TEMPORARY, max(nbytes, 1))
        try:
            yield self.as_array(h, shape, dtype)
        finally:
            self.release(h)

    def free_blocks(self):
        """Free spans per chunk, for tests and diagnostics."""
        with self._lock:
            return [list(chunk.free) for chunk in self._chunks]

    def snapshot_stats(self) -> dict:
        with self._lock:
            return {
                kind.value: PoolStats(**vars(self._stats[kind])) for kind in ArenaKind
            }

    def live_handles(self, arena: ArenaKind | None = None):
        with self._lock:
            return [
                hid for hid, rec in self._live.items() if arena is None or rec[0] is arena
            ]

    def shutdown(self) -> LeakReport:
        """Tear down the pool; fails with a leak report if temporaries are live."""
        with self._lock:
            report = LeakReport(
                leaked_permanent=self.live_handles(ArenaKind.PERMANENT),
                leaked_temporary=self.live_handles(ArenaKind.TEMPORARY),
            )
            self._chunks = []
            self._perm = {}
            self._live = {}
            if report.leaked_temporary:
                raise PoolLeakError(report)
            return report


def thread_local_footprint(bytes_per_thread: int, max_threads_per_sm: int, num_sms: int) -> int:
    """Memory a spilled thread-local array would pin on a GPU-like runtime.

    The cost is the plain product of the three factors; the benchmark
    harness reports it for kernels that would spill.
    """
    vals = (bytes_per_thread, max_threads_per_sm, num_sms)
    if any(int(v) <= 0 for v in vals):
        raise ValueError("all factors must be positive")
    out = 1
    for v in vals:
        out *= int(v)
        if out > 2**63 - 1:
            raise OverflowError("thread-local footprint exceeds 64-bit range")
    return out
