import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import make_registry, random_template, random_trace
from varlat.tracefmt import (ENTER, EXIT, TRACE_HEADER, FunctionRegistry, TraceEvent, TraceFormatError,
                             TraceWriter, UnbalancedTraceError, build_invocations, decode_events,
                             encode_events, read_trace, write_trace)


def ev(tid, f, kind, ts, site=0):
    return TraceEvent(tid, f, site, kind, ts)


def test_encode_empty_is_empty():
    assert encode_events([]) == b""
    assert decode_events(b"") == []


def test_one_pair_two_lines():
    data = encode_events([ev(0, 1, ENTER, 10), ev(0, 1, EXIT, 12)])
    lines = data.decode().splitlines()
    assert lines == ["t=0 f=1 s=0 e=E ts=10", "t=0 f=1 s=0 e=X ts=12"]


def test_decode_with_header_and_comments():
    text = f"{TRACE_HEADER}\n# spill t=0 n=2\nt=3 f=1 s=2 e=E ts=5\nt=3 f=1 s=2 e=X ts=9\n"
    assert decode_events(text) == [ev(3, 1, ENTER, 5, 2), ev(3, 1, EXIT, 9, 2)]


def test_unknown_kind_names_line():
    with pytest.raises(TraceFormatError, match="line 2.*kind"):
        decode_events("t=0 f=1 s=0 e=E ts=1\nt=0 f=1 s=0 e=Q ts=2\n")


@pytest.mark.parametrize("line", ["t=0 f=1 s=0 e=E", "t=0  f=1 s=0 e=E ts=1", "t=0 f=1 s=0 e=E ts=1 ",
                                  "t=-1 f=1 s=0 e=E ts=1", "garbage"])
def test_malformed_lines(line):
    with pytest.raises(TraceFormatError, match="line 1"):
        decode_events(line + "\n")


def test_bad_header_version():
    with pytest.raises(TraceFormatError, match="version"):
        decode_events("varlat-trace v9\n")


def test_timestamp_regression_strict_and_lenient():
    text = "t=0 f=1 s=0 e=E ts=10\nt=1 f=1 s=0 e=E ts=3\nt=0 f=1 s=0 e=X ts=5\n"
    with pytest.raises(TraceFormatError, match="line 3"):
        decode_events(text)
    assert len(decode_events(text, strict=False)) == 3


def test_interleaved_threads_keep_per_thread_order():
    rng = np.random.default_rng(4)
    events, _ = random_trace(rng, random_template(rng, max_nodes=8), 6, n_threads=3)
    back = decode_events(encode_events(events))
    for tid in range(3):
        assert [e for e in back if e.thread_id == tid] == [e for e in events if e.thread_id == tid]


def test_round_trip_thousand_events_byte_identical():
    rng = np.random.default_rng(11)
    tmpl = random_template(rng, max_nodes=12)
    events = []
    n = 0
    while len(events) < 1000:
        n += 1
        events, _ = random_trace(rng, tmpl, n * 5)
    data = encode_events(events)
    assert decode_events(data) == events
    assert encode_events(decode_events(data)) == data


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20), st.integers(1, 4))
def test_round_trip_property(seed, n, threads):
    rng = np.random.default_rng(seed)
    events, _ = random_trace(rng, random_template(rng, max_nodes=10), n, threads)
    assert decode_events(encode_events(events)) == events


def test_writer_header_once_and_file_round_trip(tmp_path):
    events = [ev(0, 1, ENTER, 1), ev(0, 1, EXIT, 4)]
    p = tmp_path / "a.vtrace"
    assert write_trace(p, events) == 2
    text = p.read_text()
    assert text.startswith(TRACE_HEADER + "\n") and text.count(TRACE_HEADER) == 1
    assert read_trace(p) == events
    buf = io.StringIO()
    w = TraceWriter(buf)
    w.write_events(events[:1])
    w.annotate("spill")
    w.write_events(events[1:])
    w.finish()
    assert buf.getvalue().count(TRACE_HEADER) == 1
    assert decode_events(buf.getvalue()) == events


def test_registry_round_trip(tmp_path):
    reg = FunctionRegistry()
    reg.register("dispatch", is_root=True)
    reg.register("lock_wait")
    text = reg.dumps()
    assert text.splitlines()[0] == "varlat-registry v1"
    assert "0 dispatch root" in text and "1 lock_wait" in text
    back = FunctionRegistry.loads(text)
    assert back.is_root(0) and not back.is_root(1) and back.name(1) == "lock_wait"
    reg.save(tmp_path / "r.txt")
    assert FunctionRegistry.load(tmp_path / "r.txt").id_of("lock_wait") == 1
    with pytest.raises(ValueError):
        reg.add(0, "other")
    with pytest.raises(ValueError):
        reg.register("dispatch")


def test_build_simple_nesting():
    forest = build_invocations([ev(0, 0, ENTER, 0), ev(0, 1, ENTER, 2), ev(0, 1, EXIT, 5), ev(0, 0, EXIT, 9)])
    (a,) = forest[0]
    assert a.duration == 9 and a.body == 6
    (b,) = a.children
    assert b.duration == 3


def test_two_sequential_children_are_both_kept():
    forest = build_invocations([
        ev(0, 0, ENTER, 0), ev(0, 1, ENTER, 1), ev(0, 1, EXIT, 3),
        ev(0, 1, ENTER, 4), ev(0, 1, EXIT, 8), ev(0, 0, EXIT, 10),
    ])
    a = forest[0][0]
    assert [c.duration for c in a.children] == [2, 4]
    assert a.body == 4


def test_truncated_stream_lists_open_frames():
    reg = make_registry()
    with pytest.raises(UnbalancedTraceError, match="unterminated.*root.*fn1"):
        build_invocations([ev(0, 0, ENTER, 0), ev(0, 1, ENTER, 1), ev(0, 1, EXIT, 2),
                           ev(0, 1, ENTER, 3)], reg)


def test_exit_without_enter_and_mismatch():
    with pytest.raises(UnbalancedTraceError, match="without matching enter"):
        build_invocations([ev(0, 1, EXIT, 1)])
    with pytest.raises(UnbalancedTraceError, match="while"):
        build_invocations([ev(0, 0, ENTER, 0), ev(0, 1, ENTER, 1), ev(0, 0, EXIT, 2)])


def test_nested_root_is_ordinary_child():
    reg = make_registry()
    forest = build_invocations([ev(0, 0, ENTER, 0), ev(0, 0, ENTER, 1), ev(0, 0, EXIT, 2), ev(0, 0, EXIT, 3)])
    roots = forest.roots(reg)
    assert len(roots) == 1 and len(roots[0].children) == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_body_identity_and_interleaving_independence(seed):
    rng = np.random.default_rng(seed)
    events, _ = random_trace(rng, random_template(rng, max_nodes=15), 5, n_threads=3)
    forest = build_invocations(events)
    for invs in forest.values():
        for top in invs:
            for node in top.walk():
                assert node.end_ns >= node.start_ns
                assert node.body >= 0
                assert node.duration == node.body + sum(c.duration for c in node.children)
                spans = sorted((c.start_ns, c.end_ns) for c in node.children)
                for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
                    assert e1 <= s2
                assert all(node.start_ns <= s and e <= node.end_ns for s, e in spans)
    # thread-grouped order rebuilds the same forest
    regrouped = sorted(events, key=lambda e: e.thread_id)
    assert build_invocations(regrouped) == forest
