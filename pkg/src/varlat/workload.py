"""Workload generation, simulator configuration, and the single-queue menu harness."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels
from .bufpool import BufPoolConfig, lognormal_params
from .lockmgr import LockMode, SchedulerPolicy

try:
    import tomllib
except ImportError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    pass


# -- Zipf ---------------------------------------------------------------------

@lru_cache(maxsize=32)
def _zipf_cdf(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return cdf


class ZipfSampler:
    """Draws 0-based ranks with P(rank i) proportional to 1 / (i + 1)^s."""

    def __init__(self, n: int, s: float):
        if n < 1:
            raise ValueError("zipf needs n >= 1")
        if s < 0:
            raise ValueError("zipf exponent must be >= 0")
        self.n = n
        self.s = float(s)
        self._cdf = None if s == 0 else _zipf_cdf(n, self.s)

    def sample(self, rng: np.random.Generator, size=None):
        if self._cdf is None:
            return rng.integers(0, self.n, size=size)
        u = rng.random(size)
        idx = np.searchsorted(self._cdf, u, side="right")
        return np.minimum(idx, self.n - 1)

    def pmf(self) -> np.ndarray:
        w = np.arange(1, self.n + 1, dtype=np.float64) ** -self.s
        return w / w.sum()


def sample_zipf(n: int, s: float, rng: np.random.Generator) -> int:
    return int(ZipfSampler(n, s).sample(rng))


# -- remaining-time model and menus ------------------------------------------

@dataclass(frozen=True)
class RemainingTimeModel:
    kind: str = "exponential"  # exponential | lognormal | constant
    mean: float = 1.0
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("exponential", "lognormal", "constant"):
            raise ValueError(f"unknown distribution {self.kind!r}")
        if not (self.mean >= 0 and math.isfinite(self.mean)):
            raise ValueError("remaining-time mean must be finite and >= 0")

    def sample(self, rng: np.random.Generator, shape) -> np.ndarray:
        if self.kind == "constant":
            return np.full(shape, float(self.mean))
        if self.kind == "exponential":
            return rng.exponential(self.mean, size=shape)
        mu, s = lognormal_params(self.mean, self.sigma)
        return rng.lognormal(mu, s, size=shape)


@dataclass(frozen=True)
class MenuEntry:
    txn_id: int
    age: float
    arrival: float


@dataclass
class Menu:
    entries: list

    def __post_init__(self):
        arr = [e.arrival for e in self.entries]
        if any(b < a for a, b in zip(arr, arr[1:])):
            raise ValueError("menu arrival times must be non-decreasing")
        if any(e.age < 0 for e in self.entries):
            raise ValueError("ages must be non-negative")

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple]) -> "Menu":
        return cls([MenuEntry(i, float(a), float(t)) for i, (a, t) in enumerate(pairs)])

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, mean_age: float = 1.0,
               mean_gap: float = 0.3) -> "Menu":
        """Ages drawn independently of everything else; exponential inter-arrival gaps."""
        ages = rng.exponential(mean_age, size=n)
        arrivals = np.cumsum(rng.exponential(mean_gap, size=n))
        arrivals -= arrivals[0]
        return cls([MenuEntry(i, float(a), float(t)) for i, (a, t) in enumerate(zip(ages, arrivals))])


@dataclass
class MenuEstimate:
    policy: str
    p: float
    trials: int
    mean: float
    stderr: float
    values: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {"policy": self.policy, "p": self.p, "trials": self.trials,
                "p_performance": self.mean, "stderr": self.stderr}


_MENU_POLICY = {"fcfs": _kernels.FCFS, "vats": _kernels.ELDEST, "etf": _kernels.ELDEST,
                "random": _kernels.RANDOM}


def run_menu(menu: Menu, model: RemainingTimeModel, policy: str | SchedulerPolicy = "vats",
             trials: int = 10_000, p: float = 2.0) -> MenuEstimate:
    """Monte Carlo p-performance (expected L_p norm of latencies) on one exclusive queue.

    A transaction's latency is its age at arrival plus its wait plus its
    remaining time. The lock is never left idle while someone waits. The
    i-th grant in a trial draws the i-th remaining-time sample of that trial,
    and every policy sees the same draws for the same model seed, so
    estimates for different policies are paired.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    name = policy.name if isinstance(policy, SchedulerPolicy) else str(policy).lower()
    code = _MENU_POLICY[name]
    n = len(menu)
    if n == 0:
        return MenuEstimate(name, p, trials, 0.0, 0.0, np.zeros(trials))
    rng = np.random.default_rng(model.seed)
    remaining = model.sample(rng, (trials, n))
    keys = rng.random((trials, n))
    ages = np.array([e.age for e in menu.entries])
    arrivals = np.array([e.arrival for e in menu.entries])
    values = _kernels.menu_lp(ages, arrivals, remaining, keys, code, p)
    se = float(values.std(ddof=1) / math.sqrt(trials)) if trials > 1 else 0.0
    return MenuEstimate(name, p, trials, float(values.mean()), se, values)


def paired_gap(a: MenuEstimate, b: MenuEstimate) -> tuple[float, float]:
    """Mean and standard error of ``b - a`` over paired trials."""
    d = b.values - a.values
    se = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0
    return float(d.mean()), se


# -- simulator configuration --------------------------------------------------

@dataclass
class LogConfig:
    enabled: bool = False
    devices: int = 1
    policy: str = "eager"  # eager | lazy_flush | lazy_write
    flush_mean_ns: float = 1_000_000.0
    flush_sigma: float = 0.8
    write_mean_ns: float = 50_000.0
    write_sigma: float = 0.8
    block_size: int = 8192
    bytes_per_write: int = 600
    bytes_per_commit: int = 200
    bandwidth_bytes_per_s: float = 200e6
    flush_interval_ns: int = 1_000_000_000

    def __post_init__(self):
        if self.devices not in (1, 2):
            raise ConfigError("log.devices must be 1 or 2")
        if self.policy not in ("eager", "lazy_flush", "lazy_write"):
            raise ConfigError(f"unknown log.policy {self.policy!r}")
        if self.block_size < 1:
            raise ConfigError("log.block_size must be >= 1")


@dataclass
class SimConfig:
    seed: int = 0
    duration_s: float = 4.0
    rate: float = 500.0
    arrival: str = "fixed"  # fixed | poisson
    jitter: float = 0.1
    threads: int = 0  # worker pool size; 0 means one worker per transaction
    n_records: int = 1000
    zipf: float = 0.0
    accesses_min: int = 1
    accesses_max: int = 1
    write_ratio: float = 0.5
    service_mean_ns: float = 200_000.0
    service_sigma: float = 0.5
    scheduler: str = "fcfs"
    vats_theta: float = 0.0
    max_backlog: int = 100_000
    bufpool_enabled: bool = False
    bufpool: BufPoolConfig = field(default_factory=BufPoolConfig)
    log: LogConfig = field(default_factory=LogConfig)

    def __post_init__(self):
        if not self.rate > 0:
            raise ConfigError("rate must be > 0")
        if not self.duration_s > 0:
            raise ConfigError("duration_s must be > 0")
        if self.zipf < 0:
            raise ConfigError("zipf exponent must be >= 0")
        if self.arrival not in ("fixed", "poisson"):
            raise ConfigError("arrival must be 'fixed' or 'poisson'")
        if not 0 <= self.jitter < 1:
            raise ConfigError("jitter must be in [0, 1)")
        if self.n_records < 1:
            raise ConfigError("n_records must be >= 1")
        if not 1 <= self.accesses_min <= self.accesses_max <= self.n_records:
            raise ConfigError("need 1 <= accesses_min <= accesses_max <= n_records")
        if not 0 <= self.write_ratio <= 1:
            raise ConfigError("write_ratio must be in [0, 1]")
        if not self.service_mean_ns > 0:
            raise ConfigError("service_mean_ns must be > 0")
        if self.max_backlog < 1:
            raise ConfigError("max_backlog must be >= 1")
        try:
            self.policy()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def policy(self) -> SchedulerPolicy:
        return SchedulerPolicy(self.scheduler, self.vats_theta, self.seed)

    def replace(self, **changes) -> "SimConfig":
        d = self.to_dict()
        for k, v in changes.items():
            if "." in k:
                sect, key = k.split(".", 1)
                d[sect][key] = v
            else:
                d[k] = v
        return SimConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        # TOML sections [vats], [bufpool], [log]
        vats = d.pop("vats", None)
        if isinstance(vats, dict):
            if "theta" in vats:
                d["vats_theta"] = vats.pop("theta")
            if vats:
                raise ConfigError(f"unknown vats keys: {sorted(vats)}")
        bp = d.pop("bufpool", None)
        lg = d.pop("log", None)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if isinstance(bp, dict):
                bp = dict(bp)
                if "enabled" in bp:
                    d["bufpool_enabled"] = bool(bp.pop("enabled"))
                d["bufpool"] = BufPoolConfig(**bp)
            elif bp is not None:
                d["bufpool"] = bp
            if isinstance(lg, dict):
                d["log"] = LogConfig(**lg)
            elif lg is not None:
                d["log"] = lg
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> SimConfig:
    p = Path(path)
    try:
        with open(p, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{p}: {exc}") from None
    return SimConfig.from_dict(data)


# -- transactions -------------------------------------------------------------

@dataclass
class Txn:
    id: int
    birth_ns: int
    records: list  # ascending record ids
    modes: list  # LockMode per access
    service_ns: list  # per-access service time
    pages: list
    flush_ns: int = 0
    write_ns: int = 0
    log_bytes: int = 0
    remaining_ns: int = 0  # sum of service times, the R(T) the transaction carries

    @property
    def n_writes(self) -> int:
        return sum(m is LockMode.EXCLUSIVE for m in self.modes)


def generate_txns(cfg: SimConfig, rng: np.random.Generator) -> list[Txn]:
    """All transactions for one run, drawn from the workload stream only."""
    n = int(round(cfg.rate * cfg.duration_s))
    gap = 1e9 / cfg.rate
    if cfg.arrival == "fixed":
        gaps = gap * (1.0 + cfg.jitter * rng.uniform(-1.0, 1.0, size=n))
    else:
        gaps = rng.exponential(gap, size=n)
    births = np.cumsum(gaps).astype(np.int64)
    zs = ZipfSampler(cfg.n_records, cfg.zipf)
    svc_mu, svc_s = lognormal_params(cfg.service_mean_ns, cfg.service_sigma)
    lg = cfg.log
    fl_mu, fl_s = lognormal_params(lg.flush_mean_ns, lg.flush_sigma)
    wr_mu, wr_s = lognormal_params(lg.write_mean_ns, lg.write_sigma)
    pages = cfg.bufpool.pages or cfg.n_records
    txns = []
    for i in range(n):
        k = int(rng.integers(cfg.accesses_min, cfg.accesses_max + 1))
        recs: set = set()
        while len(recs) < k:
            recs.update(int(r) for r in np.atleast_1d(zs.sample(rng, k - len(recs))))
        records = sorted(recs)
        modes = [LockMode.EXCLUSIVE if rng.random() < cfg.write_ratio else LockMode.SHARED
                 for _ in records]
        service = [max(1, int(v)) for v in rng.lognormal(svc_mu, svc_s, size=k)]
        t = Txn(i, int(births[i]), records, modes, service, [r % pages for r in records])
        t.remaining_ns = sum(service)
        t.log_bytes = t.n_writes * lg.bytes_per_write + lg.bytes_per_commit
        t.flush_ns = max(1, int(rng.lognormal(fl_mu, fl_s)))
        t.write_ns = max(1, int(rng.lognormal(wr_mu, wr_s)))
        txns.append(t)
    return txns
