"""Record-level shared/exclusive locks with pluggable grant policies.

Grant rule on request: a lock is granted at once iff the record has no
holders, or the request is compatible with every holder and nobody is
waiting. Otherwise it queues; in particular a new shared request never jumps
a non-empty wait queue.

On release the policy orders the waiters and the first one (the leader) is
granted if it is compatible with whatever is still held:

* FCFS: queue-arrival order; after the leader, grant consecutive waiters
  while they stay compatible.
* ETF: descending transaction age (time since birth); after the leader,
  grant every other compatible waiter in that order, skipping conflicts.
* VATS: ETF when the manager-wide wait-lock ratio exceeds ``theta``,
  FCFS otherwise.
* RANDOM: like ETF over a seeded random order.

Age ties are broken by earlier queue arrival, then smaller transaction id.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class LockMode(enum.Enum):
    SHARED = "S"
    EXCLUSIVE = "X"

    def compatible(self, other: "LockMode") -> bool:
        return self is LockMode.SHARED and other is LockMode.SHARED


S = LockMode.SHARED
X = LockMode.EXCLUSIVE


class LockError(RuntimeError):
    pass


@dataclass
class LockRequest:
    txn_id: int
    mode: LockMode
    queue_arrival_ns: int
    txn_birth_ns: int
    granted: bool = False
    grant_ns: int | None = None
    record_id: int | None = None

    def age(self, now_ns: int) -> int:
        return now_ns - self.txn_birth_ns


@dataclass
class LockQueue:
    record_id: int
    holders: list = field(default_factory=list)
    waiters: list = field(default_factory=list)

    def compatible_with_holders(self, mode: LockMode, holders=None) -> bool:
        return all(mode.compatible(h.mode) for h in (self.holders if holders is None else holders))

    def find(self, txn_id: int) -> LockRequest | None:
        for r in self.holders:
            if r.txn_id == txn_id:
                return r
        for r in self.waiters:
            if r.txn_id == txn_id:
                return r
        return None


@dataclass(frozen=True)
class SchedulerPolicy:
    name: str = "fcfs"
    theta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.name not in ("fcfs", "vats", "etf", "random"):
            raise ValueError(f"unknown scheduler {self.name!r}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0, 1], got {self.theta}")

    @classmethod
    def parse(cls, spec: "str | SchedulerPolicy", theta: float = 0.0, seed: int = 0) -> "SchedulerPolicy":
        if isinstance(spec, SchedulerPolicy):
            return spec
        return cls(spec.lower(), theta, seed)


def _age_order(waiters: Sequence[LockRequest]) -> list[LockRequest]:
    return sorted(waiters, key=lambda r: (r.txn_birth_ns, r.queue_arrival_ns, r.txn_id))


def _fcfs_order(waiters: Sequence[LockRequest]) -> list[LockRequest]:
    return sorted(waiters, key=lambda r: (r.queue_arrival_ns, r.txn_id))


class LockManager:
    """Holds one :class:`LockQueue` per record and the grant policy.

    ``grant_log`` records ``(now_ns, record_id, txn_id)`` for every grant, in
    grant order, when ``record_grants`` is set.
    """

    def __init__(self, policy: SchedulerPolicy | str = "fcfs", record_grants: bool = False,
                 max_waiters: int | None = None):
        self.policy = SchedulerPolicy.parse(policy)
        self.queues: dict[int, LockQueue] = {}
        self.n_granted = 0
        self.n_waiting = 0
        self.rng = np.random.default_rng(self.policy.seed)
        self.record_grants = record_grants
        self.grant_log: list = []
        self.max_waiters = max_waiters
        self.eldest_activations = 0
        self.fcfs_activations = 0

    def queue(self, record_id: int) -> LockQueue:
        q = self.queues.get(record_id)
        if q is None:
            q = self.queues[record_id] = LockQueue(record_id)
        return q

    def wait_lock_ratio(self) -> float:
        total = self.n_granted + self.n_waiting
        return self.n_waiting / total if total else 0.0

    def _grant(self, q: LockQueue, req: LockRequest, now_ns: int) -> None:
        req.granted = True
        req.grant_ns = now_ns
        q.holders.append(req)
        self.n_granted += 1
        if self.record_grants:
            self.grant_log.append((now_ns, q.record_id, req.txn_id))

    def request(self, record_id: int, req: LockRequest, now_ns: int) -> bool:
        """Returns True if granted immediately, False if the request now waits."""
        q = self.queue(record_id)
        if q.find(req.txn_id) is not None:
            raise LockError(f"txn {req.txn_id} already has a request on record {record_id}")
        req.record_id = record_id
        if not q.holders or (not q.waiters and q.compatible_with_holders(req.mode)):
            self._grant(q, req, now_ns)
            return True
        q.waiters.append(req)
        self.n_waiting += 1
        if self.max_waiters is not None and len(q.waiters) > self.max_waiters:
            raise SaturationError(
                f"record {record_id} has {len(q.waiters)} waiters (bound {self.max_waiters})"
            )
        return False

    def release(self, record_id: int, txn_id: int, now_ns: int) -> list[LockRequest]:
        q = self.queues.get(record_id)
        held = None if q is None else next((h for h in q.holders if h.txn_id == txn_id), None)
        if held is None:
            raise LockError(f"txn {txn_id} does not hold a lock on record {record_id}")
        q.holders.remove(held)
        self.n_granted -= 1
        granted = self._schedule(q, now_ns)
        if not q.holders and not q.waiters:
            del self.queues[record_id]
        return granted

    def _schedule(self, q: LockQueue, now_ns: int) -> list[LockRequest]:
        if not q.waiters:
            return []
        name = self.policy.name
        if name == "vats":
            name = "etf" if self.wait_lock_ratio() > self.policy.theta else "fcfs"
        if name == "fcfs":
            self.fcfs_activations += 1
            order = _fcfs_order(q.waiters)
        elif name == "etf":
            self.eldest_activations += 1
            order = _age_order(q.waiters)
        else:
            order = list(q.waiters)
            self.rng.shuffle(order)
        leader = order[0]
        if not q.compatible_with_holders(leader.mode):
            return []
        out = [leader]
        held = q.holders + [leader]
        for r in order[1:]:
            if all(r.mode.compatible(h.mode) for h in held):
                out.append(r)
                held.append(r)
            elif name == "fcfs":
                break
        for r in out:
            q.waiters.remove(r)
            self.n_waiting -= 1
            self._grant(q, r, now_ns)
        return out

    def check_invariants(self) -> None:
        granted = waiting = 0
        for q in self.queues.values():
            for i, a in enumerate(q.holders):
                for b in q.holders[i + 1:]:
                    if not a.mode.compatible(b.mode):
                        raise AssertionError(f"record {q.record_id}: incompatible holders {a.txn_id}, {b.txn_id}")
            if q.waiters and not q.holders:
                raise AssertionError(f"record {q.record_id}: waiters with no holders")
            granted += len(q.holders)
            waiting += len(q.waiters)
        if (granted, waiting) != (self.n_granted, self.n_waiting):
            raise AssertionError("lock counters out of sync")


class SaturationError(RuntimeError):
    """A queue grew past its configured bound."""


def request_lock(manager: LockManager, record_id: int, req: LockRequest, now_ns: int) -> bool:
    return manager.request(record_id, req, now_ns)


def release_lock(manager: LockManager, record_id: int, txn_id: int, now_ns: int) -> list[LockRequest]:
    return manager.release(record_id, txn_id, now_ns)


def wait_lock_ratio(manager: LockManager) -> float:
    return manager.wait_lock_ratio()


@dataclass
class ThetaSweep:
    best: float
    table: list  # [{"theta", "variance_ns2", "mean_ns", "p99_ns"}]


def tune_theta(simulate: Callable[[float], Iterable[float] | dict], grid: Iterable[float],
               rel_tol: float = 0.02) -> ThetaSweep:
    """Pick the threshold with the lowest latency variance over ``grid``.

    ``simulate(theta)`` returns a latency sample (or a dict with a
    ``variance_ns2`` entry). Candidates whose variance is within ``rel_tol`` of
    the minimum count as tied; the largest tied theta wins because it
    activates eldest-first scheduling least often.
    """
    grid = sorted(set(float(t) for t in grid))
    if not grid:
        raise ValueError("empty theta grid")
    table = []
    for theta in grid:
        res = simulate(theta)
        if isinstance(res, dict):
            row = {"theta": theta, **res}
        else:
            x = np.asarray(list(res), dtype=np.float64)
            row = {"theta": theta, "variance_ns2": float(x.var()), "mean_ns": float(x.mean())}
        table.append(row)
    vmin = min(r["variance_ns2"] for r in table)
    tied = [r["theta"] for r in table if r["variance_ns2"] <= vmin * (1 + rel_tol) + 1e-12]
    return ThetaSweep(max(tied), table)
