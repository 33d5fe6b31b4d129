"""Teams-style hierarchical kernel execution with runtime backend selection.

A kernel runs over a grid of teams x threads.  Teams are independent work
units (mapped to a worker pool on the threaded backend); the threads of one
team are virtual lanes executed sequentially on a single worker, in a fixed
deterministic order.  This keeps floating-point results identical between
the sequential and threaded backends for any race-free kernel, while
preserving the semantics of team-shared scratch and team barriers.

Cross-team shared mutable state is forbidden inside kernels; teams must
write disjoint output slices.  Scratch allocated through the launch context
is visible only within its team and dies with it.
"""

from __future__ import annotations

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ExecPlace",
    "GridConfig",
    "LaunchContext",
    "KernelError",
    "ScratchOverflow",
    "launch",
    "team_loop",
    "thread_loop",
    "thread_loop_2d",
    "reduce",
]

DEFAULT_SCRATCH_BYTES = 48 * 1024  # mirrors a GPU shared-memory budget


@dataclass(frozen=True)
class ExecPlace:
    """Runtime backend selector: sequential or a pool of worker threads."""

    workers: int = 0  # 0 means sequential

    @staticmethod
    def sequential() -> "ExecPlace":
        return ExecPlace(0)

    @staticmethod
    def threaded(workers: int) -> "ExecPlace":
        if workers < 1:
            raise ValueError("worker count must be >= 1")
        return ExecPlace(workers)

    @property
    def is_threaded(self) -> bool:
        return self.workers > 0

    @staticmethod
    def parse(text: str) -> "ExecPlace":
        """Parse the --exec flag: 'seq' or 'threads:N'."""
        if text == "seq":
            return ExecPlace.sequential()
        if text.startswith("threads:"):
            return ExecPlace.threaded(int(text.split(":", 1)[1]))
        raise ValueError(f"unknown exec place {text!r} (want 'seq' or 'threads:N')")


@dataclass(frozen=True)
class GridConfig:
    teams: int
    thread_dims: tuple = (1,)

    def __post_init__(self):
        dims = tuple(int(n) for n in np.atleast_1d(self.thread_dims))
        if not 1 <= len(dims) <= 3:
            raise ValueError("thread_dims must have 1 to 3 extents")
        if self.teams < 1 or any(n < 1 for n in dims):
            raise ValueError("grid dimensions must be positive")
        object.__setattr__(self, "thread_dims", dims)


class KernelError(RuntimeError):
    """A kernel body failed; carries the failing team index."""

    def __init__(self, team: int, cause: BaseException):
        super().__init__(f"kernel failed in team {team}: {cause!r}")
        self.team = team
        self.cause = cause


class ScratchOverflow(RuntimeError):
    pass


@dataclass
class LaunchContext:
    """Per-team handle passed to kernel bodies.

    Exposes the team coordinate, the grid, team-shared scratch allocation and
    the team barrier.  Confined to one team; never share across teams.
    """

    team: int
    grid: GridConfig
    scratch_budget: int = DEFAULT_SCRATCH_BYTES
    _scratch_used: int = field(default=0, repr=False)

    def scratch(self, shape, dtype=np.float64) -> np.ndarray:
        """Allocate zeroed team-shared scratch, counted against the budget."""
        arr = np.zeros(shape, dtype=dtype)
        self._scratch_used += arr.nbytes
        if self._scratch_used > self.scratch_budget:
            raise ScratchOverflow(
                f"team scratch budget exceeded: {self._scratch_used} > {self.scratch_budget} bytes"
            )
        return arr

    def team_sync(self):
        # Virtual thread lanes run sequentially on one worker, so all prior
        # thread-loop writes are already visible; the barrier is trivially met.
        pass


def team_loop(ctx: LaunchContext, rng, body):
    """Map an iteration range onto teams (grid-stride partition).

    Index i is executed by team i % teams, so no two teams see the same
    index and the union over teams covers the range exactly once.
    """
    n = len(rng) if hasattr(rng, "__len__") else int(rng)
    start = rng.start if isinstance(rng, range) else 0
    step = rng.step if isinstance(rng, range) else 1
    for k in range(ctx.team, n, ctx.grid.teams):
        body(start + k * step)


def thread_loop(ctx: LaunchContext, n: int, body):
    """1D thread loop over [0, n), executed by the team's lanes."""
    for i in range(n):
        body(i)


def thread_loop_2d(ctx: LaunchContext, extents, body):
    """2D thread loop over [0,n1) x [0,n2); body(i, j) runs once per pair.

    Lanes are virtual and sequential (i fastest), so completion is
    guaranteed by the time the loop returns; a following team_sync is a
    no-op kept for portability of the kernel source.
    """
    n1, n2 = extents
    for j in range(n2):
        for i in range(n1):
            body(i, j)


def _run_team(kernel, team, grid, scratch_budget):
    ctx = LaunchContext(team=team, grid=grid, scratch_budget=scratch_budget)
    try:
        kernel(ctx)
    except BaseException as exc:  # attach the failing team index
        raise KernelError(team, exc) from exc


_pool_lock = threading.Lock()
_pools: dict[int, ThreadPoolExecutor] = {}


def _pool(workers: int) -> ThreadPoolExecutor:
    with _pool_lock:
        pool = _pools.get(workers)
        if pool is None:
            pool = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="kexec")
            _pools[workers] = pool
        return pool


def launch(place: ExecPlace, grid: GridConfig, kernel, scratch_bytes: int = DEFAULT_SCRATCH_BYTES):
    """Execute `kernel` once per team of `grid` on the selected backend.

    The kernel receives a LaunchContext and expresses its iteration space
    through team_loop / thread_loop calls.  All side effects are visible to
    the caller on return.  Kernel failures propagate as KernelError with the
    failing team attached.
    """
    if not isinstance(grid, GridConfig):
        raise TypeError("grid must be a GridConfig")
    if place.is_threaded and grid.teams > 1:
        futures = [
            _pool(place.workers).submit(_run_team, kernel, t, grid, scratch_bytes)
            for t in range(grid.teams)
        ]
        for f in futures:
            f.result()
    else:
        for t in range(grid.teams):
            _run_team(kernel, t, grid, scratch_bytes)


_REDUCE_BLOCK = 1024  # fixed blocking keeps sums identical across backends


def reduce(place: ExecPlace, rng, op: str, map_fn):
    """Reduce map_fn(i) over a range with a deterministic combination order.

    Partial results are accumulated per fixed-size block and combined in
    block order, so sequential and threaded runs agree bitwise.  An empty
    range returns the identity of the operation (0, +inf or -inf).
    """
    if op not in ("sum", "min", "max"):
        raise ValueError(f"unknown reduction {op!r}")
    idx = list(rng) if hasattr(rng, "__iter__") else list(range(rng))
    identity = {"sum": 0.0, "min": np.inf, "max": -np.inf}[op]
    if not idx:
        return identity
    blocks = [idx[k : k + _REDUCE_BLOCK] for k in range(0, len(idx), _REDUCE_BLOCK)]

    def block_reduce(block):
        acc = identity
        for i in block:
            v = map_fn(i)
            if op == "sum":
                acc += v
            elif op == "min":
                acc = v if v < acc else acc
            else:
                acc = v if v > acc else acc
        return acc

    if place.is_threaded and len(blocks) > 1:
        partials = list(_pool(place.workers).map(block_reduce, blocks))
    else:
        partials = [block_reduce(b) for b in blocks]

    acc = identity
    for v in partials:  # combine in block-index order
        if op == "sum":
            acc += v
        elif op == "min":
            acc = v if v < acc else acc
        else:
            acc = v if v > acc else acc
    return acc
