"""Threaded in-process testbed traced through a :class:`Collector`.

Worker threads run pre-generated transactions against a shared lock table
(the real :class:`LockManager` behind a mutex), a buffer pool and a sleep
that stands in for record service and log flushes. Every routine is wrapped
in a probe, so which parts are timed is decided purely by the profile set
handed to :meth:`LiveRunner.run`.

Call graph::

    dispatch -> row_access (once per record) -> lock_wait, make_young, service
    dispatch -> log_flush
    dispatch -> aux_0 -> aux_1 -> ... (optional chain of empty probes)
"""
from __future__ import annotations

import threading
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .bufpool import LiveBufferPool, lognormal_params
from .collector import Collector, ProfileSet, trace_dir, trace_path
from .lockmgr import LockManager, LockMode, LockRequest, SchedulerPolicy
from .tracefmt import FunctionRegistry, write_trace
from .workload import ConfigError, ZipfSampler

ROOT = "dispatch"
CORE_FUNCS = ("dispatch", "row_access", "lock_wait", "make_young", "service", "log_flush")


@dataclass
class LiveConfig:
    threads: int = 16
    txns_per_thread: int = 60
    n_records: int = 100
    zipf: float = 1.0
    accesses_min: int = 2
    accesses_max: int = 6
    write_ratio: float = 0.5
    service_mean_us: float = 200.0
    service_sigma: float = 0.5
    flush_mean_us: float = 100.0
    flush_sigma: float = 0.5
    bufpool_capacity: int = 4096
    scheduler: str = "fcfs"
    vats_theta: float = 0.0
    aux_probes: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.threads < 1 or self.txns_per_thread < 1:
            raise ConfigError("threads and txns_per_thread must be >= 1")
        if not 1 <= self.accesses_min <= self.accesses_max <= self.n_records:
            raise ConfigError("need 1 <= accesses_min <= accesses_max <= n_records")
        if self.aux_probes < 0:
            raise ConfigError("aux_probes must be >= 0")
        try:
            SchedulerPolicy(self.scheduler, self.vats_theta, self.seed)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "LiveConfig":
        d = dict(d)
        vats = d.pop("vats", None)
        if isinstance(vats, dict) and "theta" in vats:
            d["vats_theta"] = vats["theta"]
        live = d.pop("live", None)
        if isinstance(live, dict):
            d.update(live)
        known = {f.name for f in fields(cls)}
        # keys meant for the simulator (rate, log, ...) are ignored here
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def live_registry(aux_probes: int = 0) -> FunctionRegistry:
    reg = FunctionRegistry()
    for name in CORE_FUNCS:
        reg.register(name, is_root=(name == ROOT))
    for i in range(aux_probes):
        reg.register(f"aux_{i}")
    return reg


def live_callees(registry: FunctionRegistry, aux_probes: int = 0) -> dict:
    """Static call graph by function id, used to widen the profile set."""
    f = registry.id_of
    out = {
        f("dispatch"): [f("row_access"), f("log_flush")],
        f("row_access"): [f("lock_wait"), f("make_young"), f("service")],
    }
    if aux_probes:
        out[f("dispatch")].append(f("aux_0"))
        for i in range(aux_probes - 1):
            out[f(f"aux_{i}")] = [f(f"aux_{i + 1}")]
    return out


@dataclass
class _LiveTxn:
    id: int
    records: list
    modes: list
    service_s: list
    flush_s: float


class _LockTable:
    def __init__(self, policy: SchedulerPolicy):
        self.mgr = LockManager(policy)
        self.mu = threading.Lock()
        self.waiting: dict = {}

    def acquire(self, rec: int, txn_id: int, mode: LockMode, birth_ns: int) -> None:
        with self.mu:
            now = time.perf_counter_ns()
            if self.mgr.request(rec, LockRequest(txn_id, mode, now, birth_ns), now):
                return
            ev = self.waiting[(rec, txn_id)] = threading.Event()
        ev.wait()

    def release(self, rec: int, txn_id: int) -> None:
        with self.mu:
            granted = self.mgr.release(rec, txn_id, time.perf_counter_ns())
            events = [self.waiting.pop((rec, g.txn_id)) for g in granted]
        for ev in events:
            ev.set()


@dataclass
class LiveRun:
    collector: Collector
    n_txns: int
    elapsed_s: float
    latencies_ns: np.ndarray

    @property
    def throughput(self) -> float:
        return self.n_txns / self.elapsed_s if self.elapsed_s > 0 else 0.0


@dataclass
class LiveTrace:
    trace: Path
    registry: Path
    run: LiveRun


class LiveRunner:
    def __init__(self, cfg: LiveConfig):
        self.cfg = cfg
        self.registry = live_registry(cfg.aux_probes)
        self.callees = live_callees(self.registry, cfg.aux_probes)
        self.root = self.registry.id_of(ROOT)
        ids = self.registry.id_of
        self._ids = {name: ids(name) for name in CORE_FUNCS}
        self._aux = [ids(f"aux_{i}") for i in range(cfg.aux_probes)]
        self.txns = self._generate()

    def all_functions(self) -> set:
        return set(self.registry)

    def _generate(self) -> list:
        cfg = self.cfg
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(1)[0])
        zs = ZipfSampler(cfg.n_records, cfg.zipf)
        s_mu, s_s = lognormal_params(cfg.service_mean_us * 1e-6, cfg.service_sigma)
        f_mu, f_s = lognormal_params(cfg.flush_mean_us * 1e-6, cfg.flush_sigma)
        per_thread = []
        for t in range(cfg.threads):
            txns = []
            for i in range(cfg.txns_per_thread):
                k = int(rng.integers(cfg.accesses_min, cfg.accesses_max + 1))
                recs: set = set()
                while len(recs) < k:
                    recs.update(int(r) for r in np.atleast_1d(zs.sample(rng, k - len(recs))))
                records = sorted(recs)
                modes = [LockMode.EXCLUSIVE if rng.random() < cfg.write_ratio else LockMode.SHARED
                         for _ in records]
                txns.append(_LiveTxn(t * cfg.txns_per_thread + i, records, modes,
                                     list(rng.lognormal(s_mu, s_s, size=k)),
                                     float(rng.lognormal(f_mu, f_s))))
            per_thread.append(txns)
        return per_thread

    def run(self, profile=(), collector: Collector | None = None) -> LiveRun:
        cfg = self.cfg
        col = collector or Collector(self.registry, ProfileSet(profile))
        if collector is not None and profile:
            col.set_profile(ProfileSet(profile))
        locks = _LockTable(SchedulerPolicy(cfg.scheduler, cfg.vats_theta, cfg.seed))
        pool = LiveBufferPool(cfg.bufpool_capacity)
        ids = self._ids
        aux = self._aux
        op, cp = col.open_probe, col.close_probe
        lat = np.zeros(cfg.threads * cfg.txns_per_thread, dtype=np.int64)
        barrier = threading.Barrier(cfg.threads + 1)
        errors: list = []

        def aux_chain(i: int) -> None:
            if i < len(aux):
                h = op(aux[i])
                try:
                    aux_chain(i + 1)
                finally:
                    cp(h)

        def dispatch(txn: _LiveTxn, tidx: int) -> None:
            birth = time.perf_counter_ns()
            root = op(ids["dispatch"])
            aux_chain(0)
            for rec, mode, svc in zip(txn.records, txn.modes, txn.service_s):
                h = op(ids["row_access"])
                w = op(ids["lock_wait"])
                locks.acquire(rec, txn.id, mode, birth)
                cp(w)
                b = op(ids["make_young"])
                pool.touch(rec, tidx)
                cp(b)
                s = op(ids["service"])
                time.sleep(svc)
                cp(s)
                cp(h)
            fl = op(ids["log_flush"])
            time.sleep(txn.flush_s)
            cp(fl)
            for rec in txn.records:
                locks.release(rec, txn.id)
            cp(root)
            lat[txn.id] = time.perf_counter_ns() - birth

        def worker(tidx: int) -> None:
            barrier.wait()
            try:
                for txn in self.txns[tidx]:
                    dispatch(txn, tidx)
            except BaseException as exc:  # surfaced after join
                errors.append(exc)

        threads = [threading.Thread(target=worker, args=(i,), daemon=True) for i in range(cfg.threads)]
        for th in threads:
            th.start()
        barrier.wait()
        t0 = time.perf_counter()
        for th in threads:
            th.join()
        elapsed = time.perf_counter() - t0
        if errors:
            raise errors[0]
        return LiveRun(col, len(lat), elapsed, lat)


def run_live(cfg: LiveConfig, profile="all", directory=None, iteration: int = 0) -> LiveTrace:
    """Run the testbed once and write ``run-<iteration>-<stamp>.vtrace`` plus ``registry.txt``.

    ``profile`` is ``"all"``, ``"none"`` or an iterable of function names or ids.
    """
    runner = LiveRunner(cfg)
    reg = runner.registry
    if profile == "all":
        ids = runner.all_functions()
    elif profile == "none":
        ids = set()
    else:
        ids = {reg.id_of(p) if isinstance(p, str) else int(p) for p in profile}
    res = runner.run(ids)
    d = trace_dir(directory)
    reg_path = d / "registry.txt"
    reg.save(reg_path)
    path = trace_path(iteration, d)
    write_trace(path, res.collector.drain())
    return LiveTrace(path, reg_path, res)
