"""Buffer pool with young/old LRU sublists and a contended list lock.

The LRU list is split into a young part (head of the list) and an old part
(the tail, ``old_fraction`` of the resident pages). New pages enter at the
old head, victims leave from the old tail, and a hit on an old page moves it
to the young head, which requires the list lock. Hits on young pages do not
touch the list.

Two update modes:

* ``baseline``: make-young waits as long as it takes for the list lock.
* ``llu`` (lazy LRU update): the wait is bounded by ``spin_timeout_ns``. On
  timeout the page is appended to the caller's backlog instead; the next
  time that caller gets the lock it first moves every still-resident backlog
  page to the young head.

Simulated time model: the list lock is a single FIFO server. A caller at
time ``now`` acquires it at ``max(now, busy_until)`` and holds it for the
sum of the per-mutation critical-section samples. Callers must arrive in
non-decreasing ``now`` order, which an event-driven simulation guarantees.
"""
from __future__ import annotations

import heapq
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

BASELINE = "baseline"
LLU = "llu"
DEFAULT_SPIN_TIMEOUT_NS = 10_000  # 0.01 ms


@dataclass
class BufPoolConfig:
    capacity: int = 1024
    old_fraction: float = 3 / 8
    mode: str = BASELINE
    spin_timeout_ns: int = DEFAULT_SPIN_TIMEOUT_NS
    pages: int = 0  # working-set size; 0 means one page per record
    cs_mean_ns: float = 2_000.0
    cs_sigma: float = 0.5
    io_mean_ns: float = 100_000.0
    io_sigma: float = 0.5

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("bufpool.capacity must be >= 1")
        if not 0.0 <= self.old_fraction < 1.0:
            raise ValueError("bufpool.old_fraction must be in [0, 1)")
        if self.mode not in (BASELINE, LLU):
            raise ValueError(f"bufpool.mode must be 'baseline' or 'llu', got {self.mode!r}")
        if self.spin_timeout_ns < 0:
            raise ValueError("bufpool.spin_timeout_ns must be >= 0")


def lognormal_params(mean: float, sigma: float) -> tuple[float, float]:
    """(mu, sigma) of a lognormal with the given mean and log-space sigma."""
    return math.log(mean) - sigma * sigma / 2.0, sigma


class TimelineLock:
    """Single FIFO server on a simulated clock."""

    def __init__(self):
        self.busy_until = 0
        self.acquisitions = 0
        self.max_hold_ns = 0

    def wait_for(self, now_ns: int) -> int:
        return max(0, self.busy_until - now_ns)

    def hold(self, start_ns: int, hold_ns: int) -> None:
        self.busy_until = start_ns + hold_ns
        self.acquisitions += 1
        self.max_hold_ns = max(self.max_hold_ns, hold_ns)


@dataclass
class AccessResult:
    hit: bool
    wait_ns: int = 0
    hold_ns: int = 0
    io_ns: int = 0
    deferred: bool = False
    moved: int = 0
    locked: bool = False

    @property
    def elapsed_ns(self) -> int:
        return self.wait_ns + self.hold_ns + self.io_ns


@dataclass
class PoolStats:
    hits: int = 0
    misses: int = 0
    make_young: int = 0
    deferred: int = 0
    drained: int = 0
    evictions: int = 0
    wait_ns: list = field(default_factory=list)
    young_wait_ns: list = field(default_factory=list)

    @property
    def hit_rate(self) -> float:
        n = self.hits + self.misses
        return self.hits / n if n else 0.0

    def to_dict(self) -> dict:
        w = np.asarray(self.wait_ns, dtype=np.float64)
        return {
            "hit_rate": self.hit_rate,
            "hits": self.hits,
            "misses": self.misses,
            "make_young": self.make_young,
            "deferred": self.deferred,
            "drained": self.drained,
            "evictions": self.evictions,
            "wait_samples": len(self.wait_ns),
            "wait_mean_ns": float(w.mean()) if w.size else 0.0,
            "wait_variance_ns2": float(w.var()) if w.size else 0.0,
            "wait_max_ns": float(w.max()) if w.size else 0.0,
        }


class BufferPool:
    def __init__(self, capacity: int, old_fraction: float = 3 / 8, mode: str = BASELINE,
                 spin_timeout_ns: int = DEFAULT_SPIN_TIMEOUT_NS, cs_sampler=None, io_sampler=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.old_fraction = old_fraction
        self.mode = mode
        self.spin_timeout_ns = spin_timeout_ns
        # OrderedDict ends: last item is the list head (most recent)
        self.young: OrderedDict = OrderedDict()
        self.old: OrderedDict = OrderedDict()
        self.list_lock = TimelineLock()
        self.backlogs: dict = {}
        self.stats = PoolStats()
        self.cs_sampler = cs_sampler or (lambda: 0)
        self.io_sampler = io_sampler or (lambda: 0)
        self.audit: list | None = None  # set to [] to record ("insert"|"evict"|"young"|"drain", page)

    @classmethod
    def from_config(cls, cfg: BufPoolConfig, rng: np.random.Generator) -> "BufferPool":
        cs_mu, cs_s = lognormal_params(cfg.cs_mean_ns, cfg.cs_sigma)
        io_mu, io_s = lognormal_params(cfg.io_mean_ns, cfg.io_sigma)
        return cls(
            cfg.capacity, cfg.old_fraction, cfg.mode, cfg.spin_timeout_ns,
            cs_sampler=lambda: int(rng.lognormal(cs_mu, cs_s)),
            io_sampler=lambda: int(rng.lognormal(io_mu, io_s)),
        )

    # -- list state --------------------------------------------------------

    def __contains__(self, page_id) -> bool:
        return page_id in self.young or page_id in self.old

    @property
    def resident(self) -> int:
        return len(self.young) + len(self.old)

    def old_target(self) -> int:
        return int(math.floor(self.old_fraction * self.resident))

    def lru_order(self) -> list:
        """Pages from list head (most recent young) to tail (next victim)."""
        return list(reversed(self.young)) + list(reversed(self.old))

    def _rebalance(self) -> None:
        target = self.old_target()
        while len(self.old) < target and self.young:
            page, _ = self.young.popitem(last=False)  # young tail
            self.old[page] = None  # old head
        while len(self.old) > target:
            # the old head becomes the young tail
            page, _ = self.old.popitem(last=True)
            self.young[page] = None
            self.young.move_to_end(page, last=False)

    def _make_young(self, page_id) -> None:
        if page_id in self.old:
            del self.old[page_id]
        self.young[page_id] = None
        self.young.move_to_end(page_id)
        self._rebalance()

    def _insert(self, page_id) -> None:
        if self.resident >= self.capacity:
            if not self.old:
                victim, _ = self.young.popitem(last=False)
                self.old[victim] = None
            victim, _ = self.old.popitem(last=False)  # old tail
            self.stats.evictions += 1
            if self.audit is not None:
                self.audit.append(("evict", victim))
        self.old[page_id] = None
        if self.audit is not None:
            self.audit.append(("insert", page_id))
        self._rebalance()

    def check_invariants(self) -> None:
        assert self.resident <= self.capacity
        assert not (set(self.young) & set(self.old))
        assert len(self.old) == self.old_target(), (len(self.old), self.old_target())
        for bl in self.backlogs.values():
            assert len(bl) == len(set(bl))

    # -- lock-protected operations -----------------------------------------

    def drain_backlog(self, thread, now_ns: int = 0) -> tuple[int, int]:
        """Move the caller's still-resident backlog pages to the young head.

        The caller must hold the list lock. Returns ``(moved, hold_ns)`` where
        ``hold_ns`` is the critical-section time the moves add.
        """
        backlog = self.backlogs.get(thread)
        if not backlog:
            return 0, 0
        moved = hold = 0
        for page in list(backlog):
            if page in self:
                self._make_young(page)
                hold += self.cs_sampler()
                moved += 1
                if self.audit is not None:
                    self.audit.append(("drain", page))
        backlog.clear()
        self.stats.drained += moved
        return moved, hold

    def access(self, page_id, now_ns: int = 0, thread=0) -> AccessResult:
        st = self.stats
        if page_id in self.young:
            st.hits += 1
            return AccessResult(True)
        lock = self.list_lock
        if page_id in self.old:
            st.hits += 1
            wait = lock.wait_for(now_ns)
            if self.mode == LLU and wait > self.spin_timeout_ns:
                bl = self.backlogs.setdefault(thread, OrderedDict())
                bl.pop(page_id, None)
                bl[page_id] = None
                st.deferred += 1
                st.wait_ns.append(self.spin_timeout_ns)
                st.young_wait_ns.append(self.spin_timeout_ns)
                return AccessResult(True, wait_ns=self.spin_timeout_ns, deferred=True)
            moved, hold = (self.drain_backlog(thread, now_ns) if self.mode == LLU else (0, 0))
            self._make_young(page_id)
            if self.audit is not None:
                self.audit.append(("young", page_id))
            st.make_young += 1
            hold += self.cs_sampler()
            lock.hold(now_ns + wait, hold)
            st.wait_ns.append(wait)
            st.young_wait_ns.append(wait)
            return AccessResult(True, wait_ns=wait, hold_ns=hold, moved=moved, locked=True)
        st.misses += 1
        wait = lock.wait_for(now_ns)
        moved, hold = (self.drain_backlog(thread, now_ns) if self.mode == LLU else (0, 0))
        self._insert(page_id)
        hold += self.cs_sampler()
        lock.hold(now_ns + wait, hold)
        st.wait_ns.append(wait)
        return AccessResult(False, wait_ns=wait, hold_ns=hold, io_ns=self.io_sampler(), moved=moved, locked=True)


def access_page(pool: BufferPool, page_id, now_ns: int = 0, mode: str | None = None, thread=0) -> AccessResult:
    if mode is not None and mode != pool.mode:
        raise ValueError(f"pool is configured for {pool.mode!r}, not {mode!r}")
    return pool.access(page_id, now_ns, thread)


def drain_backlog(pool: BufferPool, thread, now_ns: int = 0) -> int:
    return pool.drain_backlog(thread, now_ns)[0]


def pool_stats(pool: BufferPool) -> dict:
    return pool.stats.to_dict()


class LiveBufferPool:
    """Thread-safe variant for live runs: a real lock, real spinning."""

    def __init__(self, capacity: int, old_fraction: float = 3 / 8, mode: str = BASELINE,
                 spin_timeout_ns: int = DEFAULT_SPIN_TIMEOUT_NS):
        self.pool = BufferPool(capacity, old_fraction, mode, spin_timeout_ns)
        self.lock = threading.Lock()
        self._stat_lock = threading.Lock()  # counters bumped outside the list lock
        self._timeout_s = spin_timeout_ns / 1e9

    def is_young(self, page_id) -> bool:
        return page_id in self.pool.young

    def touch(self, page_id, thread) -> bool:
        """Apply one access; returns False when an LLU update was deferred."""
        pool = self.pool
        if page_id in pool.young:
            with self._stat_lock:
                pool.stats.hits += 1
            return True
        if pool.mode == LLU and page_id in pool.old:
            got = self.lock.acquire(timeout=self._timeout_s)
            if not got:
                bl = pool.backlogs.setdefault(thread, OrderedDict())
                bl.pop(page_id, None)
                bl[page_id] = None
                with self._stat_lock:
                    pool.stats.hits += 1
                    pool.stats.deferred += 1
                return False
        else:
            self.lock.acquire()
        try:
            if pool.mode == LLU:
                pool.drain_backlog(thread)
            with self._stat_lock:
                if page_id in pool.old:
                    pool.stats.hits += 1
                    pool.stats.make_young += 1
                elif page_id in pool.young:
                    pool.stats.hits += 1
                else:
                    pool.stats.misses += 1
            if page_id in pool.old:
                pool._make_young(page_id)
            elif page_id not in pool.young:
                pool._insert(page_id)
        finally:
            self.lock.release()
        return True


@dataclass
class ContendedPoolConfig:
    """Closed-loop page-access workload against one buffer pool."""

    threads: int = 32
    accesses_per_thread: int = 2_000
    pages: int = 2_000
    zipf: float = 0.8
    think_mean_ns: float = 5_000.0
    think_sigma: float = 0.5
    seed: int = 0
    pool: BufPoolConfig = field(default_factory=lambda: BufPoolConfig(capacity=1_000))


@dataclass
class ContendedPoolResult:
    stats: dict
    wait_ns: np.ndarray
    young_wait_ns: np.ndarray
    deferred_wait_max_ns: int
    max_hold_ns: int
    elapsed_ns: int


def simulate_contended_pool(cfg: ContendedPoolConfig) -> ContendedPoolResult:
    """Event-driven run of ``threads`` workers each issuing page accesses in a loop.

    Page choices and think times are drawn per worker up front, so baseline
    and LLU runs with the same seed replay identical access streams.
    """
    from .workload import ZipfSampler

    ss = np.random.SeedSequence(cfg.seed)
    wl_seed, cs_seed = ss.spawn(2)
    wl = np.random.default_rng(wl_seed)
    zs = ZipfSampler(cfg.pages, cfg.zipf)
    pages = zs.sample(wl, (cfg.threads, cfg.accesses_per_thread))
    # scatter popularity over page ids so hot pages are not adjacent
    perm = wl.permutation(cfg.pages)
    pages = perm[pages]
    t_mu, t_s = lognormal_params(cfg.think_mean_ns, cfg.think_sigma)
    think = wl.lognormal(t_mu, t_s, size=(cfg.threads, cfg.accesses_per_thread)).astype(np.int64)
    pool = BufferPool.from_config(cfg.pool, np.random.default_rng(cs_seed))
    heap = [(int(think[t, 0]), t, 0) for t in range(cfg.threads)]
    heapq.heapify(heap)
    end = 0
    while heap:
        now, t, i = heapq.heappop(heap)
        res = pool.access(int(pages[t, i]), now, thread=t)
        done = now + res.elapsed_ns
        end = max(end, done)
        if i + 1 < cfg.accesses_per_thread:
            heapq.heappush(heap, (done + int(think[t, i + 1]), t, i + 1))
    young = np.asarray(pool.stats.young_wait_ns, dtype=np.float64)
    return ContendedPoolResult(
        stats=pool.stats.to_dict(),
        wait_ns=np.asarray(pool.stats.wait_ns, dtype=np.float64),
        young_wait_ns=young,
        deferred_wait_max_ns=int(young.max()) if (young.size and cfg.pool.mode == LLU) else 0,
        max_hold_ns=pool.list_lock.max_hold_ns,
        elapsed_ns=end,
    )
