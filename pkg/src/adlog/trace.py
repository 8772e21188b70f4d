"""ns-2 trace line grammar: one event per line.

    <event> <time> <from> <to> <ptype> <size> <flags> <fid> <src> <dst> <seq> <pkt_id>

``event`` is one of ``+`` (enqueue), ``-`` (dequeue) or ``r`` (receive); times
are written with 6 decimals; addresses are ``<node>.<port>``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import IO, Iterable, Iterator


class EventKind(str, enum.Enum):
    ENQUEUE = "+"
    DEQUEUE = "-"
    RECEIVE = "r"


FIELD_NAMES = (
    "event", "time", "from", "to", "ptype", "size",
    "flags", "fid", "src", "dst", "seq", "pkt_id",
)
FLAGS_WIDTH = 7
NO_FLAGS = "-" * FLAGS_WIDTH


class TraceParseError(ValueError):
    """A trace line that does not follow the grammar.

    ``column`` is the 1-based character offset of the offending field and
    ``line_no`` the 1-based line number when known.
    """

    def __init__(self, message: str, column: int, line_no: int | None = None, text: str = ""):
        self.message = message
        self.column = column
        self.line_no = line_no
        self.text = text
        super().__init__(str(self))

    def __str__(self) -> str:
        where = f"line {self.line_no}, " if self.line_no is not None else ""
        return f"{where}column {self.column}: {self.message}"


@dataclass(frozen=True)
class TraceEvent:
    kind: EventKind
    time: float
    from_node: int
    to_node: int
    ptype: str
    size: int
    flags: str
    fid: int
    src: tuple[int, int]
    dst: tuple[int, int]
    seq: int
    pkt_id: int

    def to_line(self) -> str:
        return (
            f"{self.kind.value} {self.time:.6f} {self.from_node} {self.to_node} "
            f"{self.ptype} {self.size} {self.flags} {self.fid} "
            f"{self.src[0]}.{self.src[1]} {self.dst[0]}.{self.dst[1]} "
            f"{self.seq} {self.pkt_id}"
        )


def _split_with_columns(line: str) -> list[tuple[str, int]]:
    fields = []
    i, n = 0, len(line)
    while i < n:
        while i < n and line[i] in " \t":
            i += 1
        if i >= n:
            break
        start = i
        while i < n and line[i] not in " \t":
            i += 1
        fields.append((line[start:i], start + 1))
    return fields


def _int(value: str, col: int, name: str, line_no: int | None) -> int:
    try:
        return int(value)
    except ValueError:
        raise TraceParseError(f"{name}: expected integer, got {value!r}", col, line_no) from None


def _address(value: str, col: int, name: str, line_no: int | None) -> tuple[int, int]:
    node, dot, port = value.partition(".")
    if not dot:
        raise TraceParseError(f"{name}: expected <node>.<port>, got {value!r}", col, line_no)
    return (_int(node, col, name, line_no), _int(port, col, name, line_no))


def parse_trace_line(line: str, line_no: int | None = None) -> TraceEvent:
    text = line.rstrip("\r\n")
    fields = _split_with_columns(text)
    if not fields:
        raise TraceParseError("empty line", 1, line_no, text)
    if len(fields) != len(FIELD_NAMES):
        col = fields[-1][1] if len(fields) < len(FIELD_NAMES) else fields[len(FIELD_NAMES)][1]
        raise TraceParseError(
            f"expected {len(FIELD_NAMES)} fields, got {len(fields)}", col, line_no, text
        )
    (ev, c_ev), (tm, c_tm), (fr, c_fr), (to, c_to), (pt, _), (sz, c_sz), \
        (fl, c_fl), (fid, c_fid), (src, c_src), (dst, c_dst), (seq, c_seq), (pid, c_pid) = fields
    try:
        kind = EventKind(ev)
    except ValueError:
        raise TraceParseError(f"unknown event code {ev!r}", c_ev, line_no, text) from None
    try:
        time = float(tm)
    except ValueError:
        raise TraceParseError(f"time: expected number, got {tm!r}", c_tm, line_no, text) from None
    if not time >= 0.0 or time == float("inf"):
        raise TraceParseError(f"time must be finite and non-negative, got {tm!r}", c_tm, line_no, text)
    if len(fl) != FLAGS_WIDTH:
        raise TraceParseError(f"flags must be {FLAGS_WIDTH} characters, got {fl!r}", c_fl, line_no, text)
    size = _int(sz, c_sz, "size", line_no)
    if size < 0:
        raise TraceParseError("size must be non-negative", c_sz, line_no, text)
    return TraceEvent(
        kind=kind,
        time=time,
        from_node=_int(fr, c_fr, "from", line_no),
        to_node=_int(to, c_to, "to", line_no),
        ptype=pt,
        size=size,
        flags=fl,
        fid=_int(fid, c_fid, "fid", line_no),
        src=_address(src, c_src, "src", line_no),
        dst=_address(dst, c_dst, "dst", line_no),
        seq=_int(seq, c_seq, "seq", line_no),
        pkt_id=_int(pid, c_pid, "pkt_id", line_no),
    )


def iter_trace(lines: Iterable[str]) -> Iterator[TraceEvent]:
    """Parse lines lazily; blank lines are skipped, line numbers are 1-based."""
    for no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        yield parse_trace_line(line, no)


def read_trace(path) -> list[TraceEvent]:
    with open(path, encoding="ascii") as fh:
        return list(iter_trace(fh))


def write_trace(events: Iterable[TraceEvent], sink: IO[str]) -> None:
    for event in events:
        sink.write(event.to_line())
        sink.write("\n")


def format_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)
