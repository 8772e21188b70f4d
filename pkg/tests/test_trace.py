import io

import pytest

from adlog.trace import (
    EventKind, TraceEvent, TraceParseError, format_trace, iter_trace, parse_trace_line, read_trace,
    write_trace,
)
from adlog.tracesim import default_scenario, build_topology, simulate


def test_parse_receive_example():
    e = parse_trace_line("r 0.114 2 14 udp 1500 ------- 1 14.0 2.0 3 7")
    assert e.kind is EventKind.RECEIVE
    assert e.time == 0.114
    assert (e.from_node, e.to_node, e.seq) == (2, 14, 3)
    assert e.src == (14, 0) and e.dst == (2, 0)
    assert e.pkt_id == 7


def test_parse_tcp_ack_flag_kept_verbatim():
    e = parse_trace_line("+ 0.1 14 2 tcp 40 ---A--- 2 14.0 2.0 0 1")
    assert e.kind is EventKind.ENQUEUE
    assert e.ptype == "tcp" and e.flags == "---A---" and e.size == 40


def test_write_example_line():
    e = TraceEvent(EventKind.ENQUEUE, 0.1, 14, 2, "udp", 1500, "-------", 1, (14, 0), (2, 0), 0, 1)
    line = e.to_line()
    assert line == "+ 0.100000 14 2 udp 1500 ------- 1 14.0 2.0 0 1"
    assert parse_trace_line(line) == e


@pytest.mark.parametrize("line,column", [
    ("", 1),
    ("x 0.1 14 2 udp 1500 ------- 1 14.0 2.0 0 1", 1),
    ("+ abc 14 2 udp 1500 ------- 1 14.0 2.0 0 1", 3),
    ("+ 0.1 14 2 udp 1500 --- 1 14.0 2.0 0 1", 21),
    ("+ 0.1 14 2 udp 1500 ------- 1 14 2.0 0 1", 31),
    ("+ 0.1 14 2 udp -5 ------- 1 14.0 2.0 0 1", 16),
    ("+ -0.1 14 2 udp 1500 ------- 1 14.0 2.0 0 1", 3),
])
def test_parse_errors_carry_column(line, column):
    with pytest.raises(TraceParseError) as info:
        parse_trace_line(line, line_no=4)
    assert info.value.column == column
    assert info.value.line_no == 4


def test_wrong_field_count():
    with pytest.raises(TraceParseError, match="expected 12 fields"):
        parse_trace_line("+ 0.1 14 2 udp 1500 ------- 1 14.0 2.0 0")


def test_iter_skips_blank_lines_and_numbers_from_one():
    lines = ["+ 0.1 14 2 udp 1500 ------- 1 14.0 2.0 0 1\n", "\n", "bogus\n"]
    it = iter_trace(lines)
    next(it)
    with pytest.raises(TraceParseError) as info:
        next(it)
    assert info.value.line_no == 3


def test_empty_log_writes_nothing():
    buf = io.StringIO()
    write_trace([], buf)
    assert buf.getvalue() == ""
    assert format_trace([]) == ""


def test_generated_trace_round_trips(tmp_path):
    log = simulate(build_topology(default_scenario(0.5, seed=3)), 3, 0.5)
    text = format_trace(log.events)
    path = tmp_path / "t.tr"
    path.write_text(text)
    events = read_trace(path)
    assert events == log.events
    assert format_trace(events) == text
