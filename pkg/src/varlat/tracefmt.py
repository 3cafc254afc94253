"""Trace events, their line-oriented file encoding, and call-tree reconstruction.

A trace line looks like::

    t=3 f=17 s=0 e=E ts=1234567

``t`` is the thread id, ``f`` the function id (a key into the registry),
``s`` the call-site tag, ``e`` is ``E`` (enter) or ``X`` (exit) and ``ts`` is
a monotonic timestamp in integer nanoseconds. Files start with the header
``varlat-trace v1``. Lines starting with ``#`` are annotations (the collector
uses them for spill markers) and carry no events.
"""
from __future__ import annotations

import io
import os
import re
from dataclasses import dataclass, field
from typing import IO, Iterable, Iterator, NamedTuple

TRACE_HEADER = "varlat-trace v1"
REGISTRY_HEADER = "varlat-registry v1"

ENTER = "E"
EXIT = "X"

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

_LINE_RE = re.compile(r"t=(\d+) f=(\d+) s=(\d+) e=(\S+) ts=(\d+)")


class TraceFormatError(ValueError):
    """Malformed trace or registry content."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class UnbalancedTraceError(ValueError):
    pass


class TraceEvent(NamedTuple):
    thread_id: int
    func_id: int
    site_tag: int
    kind: str
    ts_ns: int


@dataclass(frozen=True)
class FunctionInfo:
    name: str
    is_root: bool = False


class FunctionRegistry:
    """Maps function ids to names and root flags."""

    def __init__(self, entries: dict[int, FunctionInfo] | None = None):
        self.entries: dict[int, FunctionInfo] = {}
        self._by_name: dict[str, int] = {}
        for fid, info in (entries or {}).items():
            self.add(fid, info.name, info.is_root)

    def add(self, func_id: int, name: str, is_root: bool = False) -> int:
        if func_id in self.entries:
            raise ValueError(f"duplicate function id {func_id}")
        if name in self._by_name:
            raise ValueError(f"duplicate function name {name!r}")
        if not name or any(c.isspace() for c in name):
            raise ValueError(f"function name must be non-empty without whitespace: {name!r}")
        if not 0 <= func_id <= U32_MAX:
            raise ValueError(f"function id out of u32 range: {func_id}")
        self.entries[func_id] = FunctionInfo(name, is_root)
        self._by_name[name] = func_id
        return func_id

    def register(self, name: str, is_root: bool = False) -> int:
        """Add ``name`` under the next free id and return that id."""
        fid = max(self.entries, default=-1) + 1
        return self.add(fid, name, is_root)

    def __contains__(self, func_id: object) -> bool:
        return func_id in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[int]:
        return iter(sorted(self.entries))

    def name(self, func_id: int) -> str:
        info = self.entries.get(func_id)
        return info.name if info is not None else f"f{func_id}"

    def id_of(self, name: str) -> int:
        try:
            return self._by_name[name]
        except KeyError:
            raise KeyError(f"unknown function {name!r}") from None

    def names(self) -> list[str]:
        return [self.entries[i].name for i in sorted(self.entries)]

    def is_root(self, func_id: int) -> bool:
        info = self.entries.get(func_id)
        return info is not None and info.is_root

    def dumps(self) -> str:
        lines = [REGISTRY_HEADER]
        for fid in sorted(self.entries):
            info = self.entries[fid]
            lines.append(f"{fid} {info.name} root" if info.is_root else f"{fid} {info.name}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FunctionRegistry":
        reg = cls()
        lines = text.splitlines()
        if not lines or lines[0] != REGISTRY_HEADER:
            raise TraceFormatError(f"expected header {REGISTRY_HEADER!r}", 1)
        for lineno, line in enumerate(lines[1:], start=2):
            if not line:
                continue
            parts = line.split(" ")
            if len(parts) not in (2, 3) or (len(parts) == 3 and parts[2] != "root"):
                raise TraceFormatError(f"malformed registry entry {line!r}", lineno)
            if not parts[0].isdigit():
                raise TraceFormatError(f"bad function id {parts[0]!r}", lineno)
            try:
                reg.add(int(parts[0]), parts[1], len(parts) == 3)
            except ValueError as exc:
                raise TraceFormatError(str(exc), lineno) from None
        return reg

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "FunctionRegistry":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read())


def format_event(ev: TraceEvent) -> str:
    return f"t={ev.thread_id} f={ev.func_id} s={ev.site_tag} e={ev.kind} ts={ev.ts_ns}"


def encode_events(events: Iterable[TraceEvent]) -> bytes:
    """Encode events as newline-terminated records (no header)."""
    return "".join(format_event(ev) + "\n" for ev in events).encode("utf-8")


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, bytes):
        stream = stream.decode("utf-8")
    if isinstance(stream, str):
        return stream.splitlines()
    return (line.decode("utf-8") if isinstance(line, bytes) else line for line in stream)


def decode_events(stream, strict: bool = True) -> list[TraceEvent]:
    """Parse a trace stream (bytes, str or line iterable).

    The ``varlat-trace v1`` header is optional on the first line. With
    ``strict=False`` a per-thread timestamp regression is tolerated; every
    other violation raises :class:`TraceFormatError` naming the line.
    """
    events: list[TraceEvent] = []
    last_ts: dict[int, int] = {}
    for lineno, raw in enumerate(_lines(stream), start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if lineno == 1 and line.startswith("varlat-trace"):
            if line != TRACE_HEADER:
                raise TraceFormatError(f"unsupported trace version {line!r}", lineno)
            continue
        if not line or line.startswith("#"):
            continue
        m = _LINE_RE.fullmatch(line)
        if m is None:
            raise TraceFormatError(f"malformed trace record {line!r}", lineno)
        tid, fid, site, kind, ts = m.groups()
        if kind not in (ENTER, EXIT):
            raise TraceFormatError(f"unknown kind token {kind!r}", lineno)
        tid, fid, site, ts = int(tid), int(fid), int(site), int(ts)
        if tid > U64_MAX or ts > U64_MAX or fid > U32_MAX or site > U32_MAX:
            raise TraceFormatError("field out of range", lineno)
        prev = last_ts.get(tid)
        if prev is not None and ts < prev and strict:
            raise TraceFormatError(
                f"timestamp {ts} precedes {prev} on thread {tid}", lineno
            )
        last_ts[tid] = ts if prev is None else max(prev, ts)
        events.append(TraceEvent(tid, fid, site, kind, ts))
    return events


class TraceWriter:
    """Writes a header once, then event records and annotations."""

    def __init__(self, fh: IO[str]):
        self.fh = fh
        self._started = False
        self.count = 0

    def _start(self) -> None:
        if not self._started:
            self.fh.write(TRACE_HEADER + "\n")
            self._started = True

    def write_events(self, events: Iterable[TraceEvent]) -> int:
        self._start()
        n = 0
        write = self.fh.write
        for ev in events:
            write(format_event(ev) + "\n")
            n += 1
        self.count += n
        return n

    def annotate(self, text: str) -> None:
        self._start()
        self.fh.write(f"# {text}\n")

    def finish(self) -> None:
        self._start()
        self.fh.flush()


def write_trace(path: str | os.PathLike, events: Iterable[TraceEvent]) -> int:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        w = TraceWriter(fh)
        n = w.write_events(events)
        w.finish()
    return n


def read_trace(path: str | os.PathLike, strict: bool = True) -> list[TraceEvent]:
    with open(path, encoding="utf-8") as fh:
        return decode_events(fh, strict=strict)


@dataclass
class Invocation:
    func_id: int
    site_tag: int
    start_ns: int
    end_ns: int
    children: list["Invocation"] = field(default_factory=list)

    @property
    def duration(self) -> int:
        return self.end_ns - self.start_ns

    @property
    def body(self) -> int:
        return self.duration - sum(c.duration for c in self.children)

    def walk(self) -> Iterator["Invocation"]:
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))


class Forest(dict):
    """Per-thread lists of top-level invocations (``thread_id -> [Invocation]``)."""

    def roots(self, registry: FunctionRegistry) -> list[Invocation]:
        """Top-level invocations of root functions, ordered by start time."""
        out = []
        for tid in sorted(self):
            for inv in self[tid]:
                if registry.is_root(inv.func_id):
                    out.append((inv.start_ns, tid, inv))
        out.sort(key=lambda t: (t[0], t[1]))
        return [inv for _, _, inv in out]


def build_invocations(events: Iterable[TraceEvent], registry: FunctionRegistry | None = None) -> Forest:
    """Rebuild well-nested invocations from enter/exit events.

    Events are grouped by thread, so inter-thread interleaving in the input
    does not matter. A root function entered inside another frame becomes an
    ordinary child. ``registry`` is accepted for symmetry with the callers and
    is only used to make error messages readable.
    """
    stacks: dict[int, list[Invocation]] = {}
    forest = Forest()
    name = registry.name if registry is not None else (lambda f: f"f{f}")
    for ev in events:
        stack = stacks.setdefault(ev.thread_id, [])
        if ev.kind == ENTER:
            stack.append(Invocation(ev.func_id, ev.site_tag, ev.ts_ns, ev.ts_ns))
            continue
        if not stack:
            raise UnbalancedTraceError(
                f"thread {ev.thread_id}: exit of {name(ev.func_id)} at {ev.ts_ns} without matching enter"
            )
        top = stack.pop()
        if top.func_id != ev.func_id or top.site_tag != ev.site_tag:
            raise UnbalancedTraceError(
                f"thread {ev.thread_id}: exit of {name(ev.func_id)}@{ev.site_tag} at {ev.ts_ns} "
                f"while {name(top.func_id)}@{top.site_tag} is open"
            )
        if ev.ts_ns < top.start_ns:
            raise UnbalancedTraceError(
                f"thread {ev.thread_id}: {name(ev.func_id)} exits before it enters"
            )
        top.end_ns = ev.ts_ns
        if stack:
            stack[-1].children.append(top)
        else:
            forest.setdefault(ev.thread_id, []).append(top)
    open_frames = [
        f"thread {tid}: {name(inv.func_id)}@{inv.site_tag} entered at {inv.start_ns}"
        for tid, stack in sorted(stacks.items())
        for inv in stack
    ]
    if open_frames:
        raise UnbalancedTraceError("unterminated frames: " + "; ".join(open_frames))
    return forest


def trace_to_text(events: Iterable[TraceEvent]) -> str:
    buf = io.StringIO()
    TraceWriter(buf).write_events(events)
    return buf.getvalue()
