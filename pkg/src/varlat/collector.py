"""Scoped timing probes with per-thread buffers.

Only functions in the active :class:`ProfileSet` are timed; a probe on any
other function is a shared inert handle that reads no clock and writes no
buffer. The set is swapped between workload runs, which stands in for
re-instrumenting and rebuilding the program under study.
"""
from __future__ import annotations

import logging
import os
import threading
import time
from contextlib import contextmanager
from pathlib import Path
from typing import IO, Iterable

from .tracefmt import ENTER, EXIT, FunctionRegistry, TraceEvent, TraceWriter

log = logging.getLogger(__name__)

TRACE_DIR_ENV = "VARLAT_TRACE_DIR"
DEFAULT_BUFFER_EVENTS = 1 << 20

_clock = time.perf_counter_ns


class ProbeOrderError(RuntimeError):
    """A probe was closed while a younger probe on the same thread was still open."""


class ProfileSetBusyError(RuntimeError):
    pass


class ProfileSet:
    def __init__(self, enabled: Iterable[int] = ()):
        self.enabled = frozenset(enabled)

    def __contains__(self, func_id: int) -> bool:
        return func_id in self.enabled

    def __len__(self) -> int:
        return len(self.enabled)

    def __iter__(self):
        return iter(sorted(self.enabled))

    def __repr__(self) -> str:
        return f"ProfileSet({sorted(self.enabled)})"


class ScopeProbe:
    __slots__ = ("func_id", "site_tag", "opened_at_ns", "_buf")

    def __init__(self, func_id, site_tag, opened_at_ns, buf):
        self.func_id = func_id
        self.site_tag = site_tag
        self.opened_at_ns = opened_at_ns
        self._buf = buf

    @property
    def inert(self) -> bool:
        return self._buf is None


INERT = ScopeProbe(-1, 0, 0, None)


class _ThreadBuffer:
    __slots__ = ("thread_id", "events", "stack")

    def __init__(self, thread_id: int):
        self.thread_id = thread_id
        self.events: list = []
        self.stack: list = []


class Collector:
    """Per-thread event buffers plus the active profile set.

    ``buffer_events`` bounds each thread's buffer; when a buffer fills and a
    ``spill`` writer is attached, the events are written out (with a spill
    annotation) and the buffer is emptied. Without a spill writer buffers
    simply grow.
    """

    def __init__(self, registry: FunctionRegistry, profile: Iterable[int] | ProfileSet = (),
                 buffer_events: int = DEFAULT_BUFFER_EVENTS, spill: TraceWriter | None = None):
        self.registry = registry
        self.profile = profile if isinstance(profile, ProfileSet) else ProfileSet(profile)
        self._enabled = self.profile.enabled
        self.buffer_events = buffer_events
        self.spill = spill
        self.spills = 0
        self.unknown_ids: set = set()
        self._local = threading.local()
        self._buffers: list[_ThreadBuffer] = []
        self._lock = threading.Lock()

    def _buffer(self) -> _ThreadBuffer:
        buf = getattr(self._local, "buf", None)
        if buf is None:
            with self._lock:
                buf = _ThreadBuffer(len(self._buffers))
                self._buffers.append(buf)
            self._local.buf = buf
        return buf

    def set_profile(self, profile: Iterable[int] | ProfileSet) -> None:
        with self._lock:
            if any(b.stack for b in self._buffers):
                raise ProfileSetBusyError("profile set changed while probes are open")
            self.profile = profile if isinstance(profile, ProfileSet) else ProfileSet(profile)
            self._enabled = self.profile.enabled

    def open_probe(self, func_id: int, site_tag: int = 0) -> ScopeProbe:
        if func_id not in self._enabled:
            return INERT
        buf = getattr(self._local, "buf", None) or self._buffer()
        ts = _clock()
        buf.events.append((func_id, site_tag, ENTER, ts))
        probe = ScopeProbe(func_id, site_tag, ts, buf)
        buf.stack.append(probe)
        return probe

    def close_probe(self, probe: ScopeProbe) -> None:
        buf = probe._buf
        if buf is None:
            return
        stack = buf.stack
        if not stack or stack[-1] is not probe:
            raise ProbeOrderError(
                f"closing {self.registry.name(probe.func_id)} out of order "
                f"(innermost open: {self.registry.name(stack[-1].func_id) if stack else 'none'})"
            )
        if getattr(self._local, "buf", None) is not buf:
            raise ProbeOrderError("probe closed on a different thread than it was opened on")
        stack.pop()
        buf.events.append((probe.func_id, probe.site_tag, EXIT, _clock()))
        if len(buf.events) >= self.buffer_events and self.spill is not None and not stack:
            self._spill(buf)

    @contextmanager
    def probe(self, func_id: int, site_tag: int = 0):
        h = self.open_probe(func_id, site_tag)
        try:
            yield h
        finally:
            self.close_probe(h)

    def traced(self, func_id: int, site_tag: int = 0):
        """Decorator form of :meth:`probe`."""
        def wrap(fn):
            def inner(*args, **kwargs):
                h = self.open_probe(func_id, site_tag)
                try:
                    return fn(*args, **kwargs)
                finally:
                    self.close_probe(h)
            inner.__name__ = getattr(fn, "__name__", "traced")
            inner.__wrapped__ = fn
            return inner
        return wrap

    def _spill(self, buf: _ThreadBuffer) -> None:
        events = buf.events
        buf.events = []
        with self._lock:
            self.spill.annotate(f"spill t={buf.thread_id} n={len(events)}")
            self.spill.write_events(self._as_events(buf.thread_id, events))
            self.spills += 1

    def _as_events(self, tid: int, raw) -> Iterable[TraceEvent]:
        for fid, site, kind, ts in raw:
            if fid not in self.registry:
                self.unknown_ids.add(fid)
            yield TraceEvent(tid, fid, site, kind, ts)

    def event_count(self) -> int:
        return sum(len(b.events) for b in self._buffers)

    def drain(self) -> list[TraceEvent]:
        """Take all buffered events (thread by thread) and empty the buffers."""
        with self._lock:
            if any(b.stack for b in self._buffers):
                raise ProbeOrderError("drain with open probes")
            out = []
            for b in self._buffers:
                out.extend(self._as_events(b.thread_id, b.events))
                b.events = []
        if self.unknown_ids:
            log.warning("events recorded for unregistered function ids %s", sorted(self.unknown_ids))
        return out

    def flush_traces(self, sink: str | os.PathLike | IO[str] | TraceWriter) -> int:
        """Serialize every buffer to ``sink`` and empty them; returns the event count.

        ``sink`` may be a path (a fresh file with header), a text stream or a
        :class:`TraceWriter` (appends; header written at most once).
        """
        events = self.drain()
        if isinstance(sink, TraceWriter):
            n = sink.write_events(events)
            sink.finish()
            return n
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "w", encoding="utf-8", newline="\n") as fh:
                w = TraceWriter(fh)
                n = w.write_events(events)
                w.finish()
            return n
        w = TraceWriter(sink)
        n = w.write_events(events)
        w.finish()
        return n


def trace_dir(directory: str | os.PathLike | None = None) -> Path:
    """``directory`` if given, else ``$VARLAT_TRACE_DIR``, else the working directory."""
    d = directory or os.environ.get(TRACE_DIR_ENV) or "."
    p = Path(d)
    p.mkdir(parents=True, exist_ok=True)
    return p


def trace_path(iteration: int, directory: str | os.PathLike | None = None) -> Path:
    ns = time.time_ns()
    stamp = time.strftime("%Y%m%dT%H%M%S", time.localtime(ns // 1_000_000_000)) + f"{ns % 1_000_000_000:09d}"
    return trace_dir(directory) / f"run-{iteration}-{stamp}.vtrace"
