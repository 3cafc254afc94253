"""Discrete-event transaction simulator on integer-nanosecond time.

Each transaction waits for a worker, then for each record in ascending id
order takes its lock, touches the record's page in the buffer pool and runs
its service time. It then writes its log records according to the flush
policy and releases every lock at commit (strict two-phase locking).
Everything random about the workload is drawn before the run from its own
stream, so two schedulers fed the same seed see the same transactions.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
import simpy

from .bufpool import BufferPool
from .lockmgr import LockManager, LockRequest, SaturationError
from .metrics import summarize
from .workload import SimConfig, Txn, generate_txns

PHASES = ("admission", "lock_wait", "bufpool", "service", "log")


@dataclass
class SimResult:
    config: dict
    latencies_ns: np.ndarray
    phases: dict  # phase -> per-transaction ns array
    stats: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.latencies_ns.size)

    def summary(self, p: float = 2.0) -> dict:
        return summarize(self.latencies_ns, p).to_dict()

    def phase_breakdown(self) -> list[dict]:
        rows = []
        for name in PHASES:
            x = self.phases[name].astype(np.float64)
            rows.append({
                "phase": name,
                "mean_ns": float(x.mean()) if x.size else 0.0,
                "variance_ns2": float(x.var()) if x.size else 0.0,
                "total_ns": int(self.phases[name].sum()),
            })
        return rows

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "n_txns": self.n,
            "summary": self.summary(),
            "latencies_ns": [int(v) for v in self.latencies_ns],
            "phase_breakdown": self.phase_breakdown(),
            "stats": self.stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["txn", "latency_ns", *PHASES])
        for i, lat in enumerate(self.latencies_ns):
            w.writerow([i, int(lat), *(int(self.phases[p][i]) for p in PHASES)])
        return buf.getvalue()


class _LogDevices:
    """One or two flush devices; a flush goes to an idle device, else the shorter queue."""

    def __init__(self, env: simpy.Environment, n: int):
        self.devices = [simpy.Resource(env, capacity=1) for _ in range(n)]

    def pick(self) -> simpy.Resource:
        idle = [d for d in self.devices if d.count == 0 and not d.queue]
        if idle:
            return idle[0]
        return min(self.devices, key=lambda d: (len(d.queue) + d.count, self.devices.index(d)))


def _flush_ns(cfg: SimConfig, txn: Txn, nbytes: int) -> int:
    lg = cfg.log
    blocks = max(1, math.ceil(nbytes / lg.block_size))
    return txn.flush_ns + int(blocks * lg.block_size * 1e9 / lg.bandwidth_bytes_per_s)


def run_sim(cfg: SimConfig) -> SimResult:
    ss = np.random.SeedSequence(cfg.seed)
    wl_seed, rt_seed = ss.spawn(2)
    txns = generate_txns(cfg, np.random.default_rng(wl_seed))
    rt = np.random.default_rng(rt_seed)

    env = simpy.Environment()
    locks = LockManager(cfg.policy(), max_waiters=cfg.max_backlog)
    pool = BufferPool.from_config(cfg.bufpool, rt) if cfg.bufpool_enabled else None
    n_workers = cfg.threads or len(txns)
    slots = simpy.Store(env, capacity=max(1, n_workers))
    slots.items.extend(range(n_workers))
    lg = cfg.log
    devices = _LogDevices(env, lg.devices) if lg.enabled else None
    pending: dict = {}
    n = len(txns)
    latency = np.zeros(n, dtype=np.int64)
    phases = {p: np.zeros(n, dtype=np.int64) for p in PHASES}
    state = {"in_flight": 0, "done": 0, "unflushed": 0, "max_in_flight": 0}

    def transaction(t: Txn):
        state["in_flight"] += 1
        state["max_in_flight"] = max(state["max_in_flight"], state["in_flight"])
        if state["in_flight"] > cfg.max_backlog:
            raise SaturationError(
                f"{state['in_flight']} transactions in flight at t={env.now}ns "
                f"(bound {cfg.max_backlog}); admission queue {len(slots.get_queue)}"
            )
        slot = yield slots.get()
        phases["admission"][t.id] = env.now - t.birth_ns
        held = []
        for rec, mode, svc, page in zip(t.records, t.modes, t.service_ns, t.pages):
            req = LockRequest(t.id, mode, env.now, t.birth_ns)
            if not locks.request(rec, req, env.now):
                ev = env.event()
                pending[(rec, t.id)] = ev
                t0 = env.now
                yield ev
                phases["lock_wait"][t.id] += env.now - t0
            held.append(rec)
            if pool is not None:
                res = pool.access(page, env.now, thread=slot)
                if res.elapsed_ns:
                    yield env.timeout(res.elapsed_ns)
                phases["bufpool"][t.id] += res.elapsed_ns
            yield env.timeout(svc)
            phases["service"][t.id] += svc
        if devices is not None:
            t0 = env.now
            if lg.policy == "eager":
                dev = devices.pick()
                with dev.request() as r:
                    yield r
                    yield env.timeout(_flush_ns(cfg, t, t.log_bytes))
            elif lg.policy == "lazy_flush":
                yield env.timeout(t.write_ns)
                state["unflushed"] += t.log_bytes
            else:
                state["unflushed"] += t.log_bytes
            phases["log"][t.id] = env.now - t0
        for rec in held:
            for g in locks.release(rec, t.id, env.now):
                pending.pop((rec, g.txn_id)).succeed()
        latency[t.id] = env.now - t.birth_ns
        state["in_flight"] -= 1
        state["done"] += 1
        yield slots.put(slot)

    def arrivals():
        for t in txns:
            if t.birth_ns > env.now:
                yield env.timeout(t.birth_ns - env.now)
            env.process(transaction(t))

    def background_flusher():
        # lazy policies: a timer flushes whatever accumulated, on the devices
        while state["done"] < n:
            yield env.timeout(lg.flush_interval_ns)
            nbytes, state["unflushed"] = state["unflushed"], 0
            if nbytes:
                dev = devices.pick()
                with dev.request() as r:
                    yield r
                    blocks = math.ceil(nbytes / lg.block_size)
                    yield env.timeout(int(lg.flush_mean_ns + blocks * lg.block_size * 1e9 / lg.bandwidth_bytes_per_s))

    env.process(arrivals())
    if devices is not None and lg.policy != "eager":
        env.process(background_flusher())
    env.run()
    if state["done"] != n:
        raise SaturationError(f"only {state['done']} of {n} transactions finished")

    stats = {
        "max_in_flight": state["max_in_flight"],
        "eldest_activations": locks.eldest_activations,
        "fcfs_activations": locks.fcfs_activations,
    }
    if pool is not None:
        stats["bufpool"] = pool.stats.to_dict()
    return SimResult(cfg.to_dict(), latency, phases, stats)
