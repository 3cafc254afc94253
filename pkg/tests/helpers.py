"""Fixture generators and independent oracles shared by the tests."""
from __future__ import annotations

from fractions import Fraction
from itertools import combinations

import numpy as np

from varlat.lockmgr import LockManager, LockRequest, S, X
from varlat.tracefmt import ENTER, EXIT, FunctionRegistry, TraceEvent

ROOT = 0


def make_registry(n_funcs: int = 9) -> FunctionRegistry:
    reg = FunctionRegistry()
    reg.add(ROOT, "root", is_root=True)
    for f in range(1, n_funcs):
        reg.add(f, f"fn{f}")
    return reg


def random_template(rng, max_depth=6, max_fanout=5, max_nodes=30, n_funcs=9):
    """Call-shape template: (func, site, [children]); function ids repeat across sites."""
    count = [1]

    def grow(depth):
        kids = []
        if depth >= max_depth:
            return kids
        for _ in range(int(rng.integers(0, max_fanout + 1))):
            if count[0] >= max_nodes:
                break
            count[0] += 1
            f = int(rng.integers(1, n_funcs))
            kids.append((f, int(rng.integers(0, 2)), grow(depth + 1)))
        return kids

    return (ROOT, 0, grow(0))


def template_size(t) -> int:
    return 1 + sum(template_size(c) for c in t[2])


def _emit(rng, node, path, t, events, tid, truth):
    func, site, kids = node
    events.append(TraceEvent(tid, func, site, ENTER, t))
    start = t
    t += int(rng.integers(0, 50))
    for child in kids:
        reps = 0 if rng.random() < 0.2 else (2 if rng.random() < 0.15 else 1)
        for _ in range(reps):
            cpath = path + ((child[0], child[1]),)
            t = _emit(rng, child, cpath, t, events, tid, truth)
            t += int(rng.integers(0, 20))
    t += int(rng.integers(0, 50))
    events.append(TraceEvent(tid, func, site, EXIT, t))
    truth[path] = truth.get(path, 0) + (t - start)
    return t


def random_trace(rng, template, n_samples: int, n_threads: int = 2):
    """Events for ``n_samples`` root invocations plus ground-truth per-sample path sums.

    Samples are assigned to threads round-robin and their events interleaved
    thread by thread; ``truths[i]`` maps each NodePath to its summed duration
    in sample i, in root start order.
    """
    per_thread = {tid: [] for tid in range(n_threads)}
    clocks = {tid: int(rng.integers(0, 100)) for tid in range(n_threads)}
    starts = []
    for i in range(n_samples):
        tid = i % n_threads
        truth: dict = {}
        start = clocks[tid]
        clocks[tid] = _emit(rng, template, ((ROOT, 0),), start, per_thread[tid], tid, truth) + 5
        starts.append((start, tid, truth))
    starts.sort(key=lambda s: (s[0], s[1]))
    events = []
    # interleave threads in chunks so cross-thread order is scrambled
    queues = {tid: list(ev) for tid, ev in per_thread.items()}
    while any(queues.values()):
        for tid in sorted(queues):
            take = int(rng.integers(1, 6))
            events.extend(queues[tid][:take])
            del queues[tid][:take]
    return events, [s[2] for s in starts]


# -- exact brute-force factor oracle -----------------------------------------------

def _pop_var(xs):
    n = len(xs)
    m = Fraction(sum(xs), n)
    return sum((Fraction(x) - m) ** 2 for x in xs) / n


def _pop_cov(xs, ys):
    n = len(xs)
    mx, my = Fraction(sum(xs), n), Fraction(sum(ys), n)
    return sum((Fraction(x) - mx) * (Fraction(y) - my) for x, y in zip(xs, ys)) / n


def oracle_nodes(truths):
    """Every Var/Cov term of every parent with children, from ground truth, in exact arithmetic."""
    paths = set().union(*truths)
    root = ((ROOT, 0),)
    root_var = _pop_var([t.get(root, 0) for t in truths])
    children = {}
    for p in paths:
        if len(p) > 1:
            children.setdefault(p[:-1], set()).add(p)
    out = []  # (kind, units, value, contribution)
    for parent, kids in children.items():
        kids = sorted(kids)
        cols = [[t.get(k, 0) for t in truths] for k in kids]
        body = [t.get(parent, 0) - sum(c[i] for c in cols) for i, t in enumerate(truths)]
        units = [(k[-1][0], False) for k in kids] + [(parent[-1][0], True)]
        cols.append(body)
        for u, c in zip(units, cols):
            v = _pop_var(c)
            out.append(("var", (u,), v, v / root_var if root_var else Fraction(0)))
        for i, j in combinations(range(len(cols)), 2):
            v = _pop_cov(cols[i], cols[j])
            out.append(("cov", tuple(sorted((units[i], units[j]))), v,
                        2 * v / root_var if root_var else Fraction(0)))
    return out, root_var, children


def oracle_heights(truths):
    """Function heights by enumerating every observed root-to-node path."""
    paths = set().union(*truths)
    below = {}
    for p in paths:
        # each ancestor sees this path at depth len(p) - len(ancestor)
        for cut in range(1, len(p) + 1):
            anc = p[:cut]
            below[anc] = max(below.get(anc, 0), len(p) - cut)
    funcs = {}
    for p, h in below.items():
        funcs[p[-1][0]] = max(funcs.get(p[-1][0], 0), h)
    return funcs, below[((ROOT, 0),)]


def oracle_select(truths, k, d, registry):
    nodes, root_var, _ = oracle_nodes(truths)
    funcs, H = oracle_heights(truths)
    acc = {}
    for kind, units, v, c in nodes:
        key = (kind, units)
        tv, tc = acc.get(key, (Fraction(0), Fraction(0)))
        acc[key] = (tv + v, tc + c)
    rows = []
    for (kind, units), (tv, tc) in acc.items():
        h = max(0 if body else funcs.get(f, 0) for f, body in units)
        specificity = (H - h) ** 2
        names = ",".join(f"body({registry.name(f)})" if b else registry.name(f) for f, b in units)
        label = f"{'Var' if kind == 'var' else 'Cov'}({names})"
        rows.append((label, specificity * tv, tc, h))
    rows.sort(key=lambda r: (-r[1], -r[2], r[0]))
    return [r for r in rows[:k] if r[2] >= d]


# -- random lock-manager event traces ---------------------------------------------

def drive(policy, seed, n_records=3, n_txns=12, steps=200):
    """Random request/release workload; op choices depend only on the seed and the lock state."""
    rng = np.random.default_rng(seed)
    m = LockManager(policy, record_grants=True)
    births = {t: int(rng.integers(0, 50)) for t in range(n_txns)}
    now = 50
    fcfs_ok = True
    for _ in range(steps):
        now += int(rng.integers(1, 5))
        holding = sorted((q.record_id, h.txn_id) for q in m.queues.values() for h in q.holders)
        busy = {t for q in m.queues.values() for t in [r.txn_id for r in q.holders + q.waiters]}
        if holding and rng.random() < 0.45:
            rec, t = holding[int(rng.integers(len(holding)))]
            q = m.queue(rec)
            before = sorted(q.waiters, key=lambda r: (r.queue_arrival_ns, r.txn_id))
            granted = m.release(rec, t, now)
            if policy == "fcfs" and granted:
                fcfs_ok &= [r.txn_id for r in before[:len(granted)]] == [r.txn_id for r in granted]
        else:
            free = [t for t in range(n_txns) if t not in busy]
            if not free:
                continue
            t = free[int(rng.integers(len(free)))]
            mode = S if rng.random() < 0.5 else X
            m.request(int(rng.integers(n_records)), LockRequest(t, mode, now, min(births[t], now)), now)
        m.check_invariants()
    return m.grant_log, fcfs_ok
