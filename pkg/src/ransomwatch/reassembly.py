"""Client-to-server TCP reassembly and HTTP request extraction.

Segments are placed by sequence number; overlapping bytes keep the first copy
seen. A flow that started with a SYN is anchored at ISN+1. Without a SYN (the
controller only sees data-bearing segments), the lowest buffered sequence
number is tried as the stream start, and the flow is anchored there once a
complete request parses from it.

Each emitted POST is stamped with the latest capture time among the segments
that carried its bytes. That value does not depend on arrival order.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .capture import TCP_FIN, TCP_SYN, PacketRecord, PostEvent, normalize_key

log = logging.getLogger(__name__)

DEFAULT_GAP_CAP = 1 << 20
MAX_HEAD = 64 * 1024

_TOKEN = re.compile(rb"[!#$%&'*+\-.^_`|~0-9A-Za-z]+")
_TOKEN_PREFIX = re.compile(rb"[!#$%&'*+\-.^_`|~0-9A-Za-z]*")


@dataclass(frozen=True)
class FlowKey:
    src_ip: str
    dst_ip: str
    src_port: int
    dst_port: int

    def __str__(self) -> str:
        return f"{self.src_ip}:{self.src_port}->{self.dst_ip}:{self.dst_port}"


@dataclass(frozen=True)
class HttpRequest:
    method: str
    uri: str
    host: Optional[str]
    content_length_header: Optional[int]
    body_bytes_observed: int
    flow: FlowKey
    t_complete: float

    @property
    def server_key(self) -> str:
        return self.host if self.host else self.flow.dst_ip


@dataclass
class ReassemblyStats:
    segments: int = 0
    duplicate_bytes: int = 0
    requests: int = 0
    posts: int = 0
    flows_unparseable: int = 0
    flows_abandoned: int = 0
    bytes_discarded: int = 0


@dataclass
class FlushReport:
    events: list[PostEvent]
    abandoned: dict[FlowKey, int]


# -- request parsing -----------------------------------------------------------

class _NeedMore(Exception):
    pass


class _BadRequest(Exception):
    pass


@dataclass
class _Parsed:
    method: str
    uri: str
    host: Optional[str]
    content_length: Optional[int]
    body_size: int
    consumed: int


def _check_head_prefix(buf: bytes) -> None:
    """Reject early when the bytes so far cannot start a request line."""
    line = buf.split(b"\r\n", 1)[0]
    m = _TOKEN_PREFIX.match(line)
    end = m.end()
    if end < len(line) and (line[end:end + 1] != b" " or end == 0):
        raise _BadRequest("invalid method token")
    if len(buf) > MAX_HEAD:
        raise _BadRequest("request head exceeds 64 KiB")


def _host_from_header(value: str) -> Optional[str]:
    value = value.strip()
    if not value:
        return None
    if value.startswith("["):
        return normalize_key(value[1:value.find("]")]) if "]" in value else None
    return normalize_key(value.rsplit(":", 1)[0] if value.count(":") == 1 else value)


def _parse_chunked(buf: bytes, start: int) -> tuple[int, int]:
    """Return (decoded body size, index just past the terminating chunk)."""
    pos, total = start, 0
    while True:
        eol = buf.find(b"\r\n", pos)
        if eol < 0:
            raise _NeedMore
        size_field = buf[pos:eol].split(b";", 1)[0].strip()
        try:
            size = int(size_field, 16)
        except ValueError:
            raise _BadRequest("bad chunk size") from None
        pos = eol + 2
        if size == 0:
            while True:
                eol = buf.find(b"\r\n", pos)
                if eol < 0:
                    raise _NeedMore
                if eol == pos:
                    return total, eol + 2
                pos = eol + 2
        if len(buf) < pos + size + 2:
            raise _NeedMore
        if buf[pos + size:pos + size + 2] != b"\r\n":
            raise _BadRequest("chunk not terminated by CRLF")
        total += size
        pos += size + 2


def parse_request(buf: bytes, closed: bool = False) -> _Parsed:
    """Parse one request from the front of ``buf``.

    Raises _NeedMore when more bytes are required and _BadRequest when the
    bytes cannot be HTTP/1.x. ``closed`` means the sender has finished, which
    lets a POST without Content-Length run to the end of the stream.
    """
    lead = 0
    while buf.startswith(b"\r\n", lead):
        lead += 2
    head_end = buf.find(b"\r\n\r\n", lead)
    if head_end < 0:
        _check_head_prefix(buf[lead:])
        raise _NeedMore
    if head_end - lead > MAX_HEAD:
        raise _BadRequest("request head exceeds 64 KiB")
    lines = buf[lead:head_end].split(b"\r\n")
    parts = lines[0].split(b" ")
    if len(parts) != 3 or not _TOKEN.fullmatch(parts[0]) or not parts[2].startswith(b"HTTP/"):
        raise _BadRequest("malformed request line")
    method = parts[0].decode("ascii")
    uri = parts[1].decode("latin-1")

    host = None
    lengths: list[str] = []
    chunked = False
    for raw in lines[1:]:
        name, sep, value = raw.partition(b":")
        if not sep or not _TOKEN.fullmatch(name):
            raise _BadRequest("malformed header line")
        lname = name.decode("ascii").lower()
        sval = value.decode("latin-1").strip()
        if lname == "host" and host is None:
            host = _host_from_header(sval)
        elif lname == "content-length":
            lengths.extend(v.strip() for v in sval.split(","))
        elif lname == "transfer-encoding":
            chunked = sval.lower().rsplit(",", 1)[-1].strip() == "chunked"

    body_start = head_end + 4
    content_length = None
    if chunked:
        size, end = _parse_chunked(buf, body_start)
        return _Parsed(method, uri, host, None, size, end)
    if lengths:
        if len(set(lengths)) != 1 or not lengths[0].isdigit():
            raise _BadRequest("inconsistent Content-Length")
        content_length = int(lengths[0])
        if len(buf) < body_start + content_length:
            raise _NeedMore
        return _Parsed(method, uri, host, content_length, content_length, body_start + content_length)
    if method == "POST":
        if not closed:
            raise _NeedMore
        return _Parsed(method, uri, host, None, len(buf) - body_start, len(buf))
    return _Parsed(method, uri, host, None, 0, body_start)


# -- stream state --------------------------------------------------------------

def _rel(seq: int, ref: int) -> int:
    return ((seq - ref + (1 << 31)) % (1 << 32)) - (1 << 31)


@dataclass
class _Stream:
    ref: int
    base: Optional[int] = None  # relative position of buf[0]; None until anchored
    buf: bytearray = field(default_factory=bytearray)
    chunks: list = field(default_factory=list)  # (start, end, ts) covering buf
    pending: dict = field(default_factory=dict)  # pos -> (bytes, ts)
    pending_bytes: int = 0
    fin_pos: Optional[int] = None
    unparseable: bool = False

    @property
    def end(self) -> int:
        return self.base + len(self.buf)

    def held_bytes(self) -> int:
        return len(self.buf) + self.pending_bytes


def _assemble(pending: dict, start: int) -> tuple[bytearray, list, list, int]:
    """Contiguous bytes from ``start`` out of ``pending``.

    Returns the bytes, their (start, end, ts) chunks, the pending positions
    used, and how many overlapping bytes were discarded.
    """
    buf = bytearray()
    chunks = []
    used = []
    dup = 0
    end = start
    for pos in sorted(pending):
        if pos > end:
            break
        data, ts = pending[pos]
        used.append(pos)
        if pos + len(data) <= end:
            dup += len(data)
            continue
        dup += end - pos
        piece = data[end - pos:]
        chunks.append((end, end + len(piece), ts))
        buf += piece
        end += len(piece)
    return buf, chunks, used, dup


class HttpReassembler:
    """Turns client-to-server TCP segments into PostEvents.

    Only TCP packets whose destination port is in ``ports`` are considered.
    """

    def __init__(self, ports: Iterable[int] = (80,), gap_cap: int = DEFAULT_GAP_CAP):
        self.ports = frozenset(ports)
        self.gap_cap = gap_cap
        self.stats = ReassemblyStats()
        self.requests: list[HttpRequest] = []
        self.keep_requests = False
        self._streams: dict[FlowKey, _Stream] = {}

    def accepts(self, pkt: PacketRecord) -> bool:
        return pkt.is_tcp and pkt.dst_port in self.ports

    def feed(self, pkt: PacketRecord) -> list[PostEvent]:
        if not self.accepts(pkt):
            return []
        key = FlowKey(pkt.src_ip, pkt.dst_ip, pkt.src_port, pkt.dst_port)
        st = self._streams.get(key)

        if pkt.has_flag(TCP_SYN):
            if st is not None and st.held_bytes():
                self._abandon(key, st)
            self._streams[key] = _Stream(ref=pkt.tcp_seq, base=1)
            return []
        if st is None:
            if not pkt.payload and not pkt.has_flag(TCP_FIN):
                return []
            st = self._streams[key] = _Stream(ref=pkt.tcp_seq)
        if st.unparseable:
            self.stats.bytes_discarded += len(pkt.payload)
            return []

        pos = _rel(pkt.tcp_seq, st.ref)
        if pkt.payload:
            self.stats.segments += 1
            self._add(st, pos, pkt.payload, pkt.timestamp)
        if pkt.has_flag(TCP_FIN) and st.fin_pos is None:
            st.fin_pos = pos + len(pkt.payload)
        if st.pending_bytes > self.gap_cap:
            self._mark_unparseable(key, st, "sequence gap exceeds buffer cap")
            return []
        events = self._advance(key, st)
        if st.base is not None and not st.held_bytes() and st.fin_pos is not None and st.end >= st.fin_pos:
            del self._streams[key]
        return events

    def feed_all(self, packets: Iterable[PacketRecord]) -> list[PostEvent]:
        events: list[PostEvent] = []
        for pkt in packets:
            events.extend(self.feed(pkt))
        return events

    def flush(self) -> FlushReport:
        abandoned = {}
        for key, st in list(self._streams.items()):
            if st.held_bytes():
                abandoned[key] = st.held_bytes()
                self._abandon(key, st)
        self._streams.clear()
        return FlushReport(events=[], abandoned=abandoned)

    # internals

    def _add(self, st: _Stream, pos: int, data: bytes, ts: float) -> None:
        if st.base is not None:
            end = st.end
            if pos + len(data) <= end:
                self.stats.duplicate_bytes += len(data)
                return
            if pos < end:
                self.stats.duplicate_bytes += end - pos
                data = data[end - pos:]
                pos = end
        while pos in st.pending:
            have, _ = st.pending[pos]
            if len(data) <= len(have):
                self.stats.duplicate_bytes += len(data)
                return
            self.stats.duplicate_bytes += len(have)
            pos += len(have)
            data = data[len(have):]
        st.pending[pos] = (bytes(data), ts)
        st.pending_bytes += len(data)

    def _drain(self, st: _Stream) -> None:
        buf, chunks, used, dup = _assemble(st.pending, st.end)
        for pos in used:
            st.pending_bytes -= len(st.pending.pop(pos)[0])
        self.stats.duplicate_bytes += dup
        st.buf += buf
        st.chunks.extend(chunks)

    def _try_anchor(self, st: _Stream) -> bool:
        lo = min(st.pending)
        buf, chunks, used, dup = _assemble(st.pending, lo)
        closed = st.fin_pos is not None and lo + len(buf) >= st.fin_pos
        try:
            parse_request(bytes(buf), closed)
        except (_NeedMore, _BadRequest):
            return False
        st.base = lo
        st.buf, st.chunks = buf, chunks
        self.stats.duplicate_bytes += dup
        for pos in used:
            st.pending_bytes -= len(st.pending.pop(pos)[0])
        return True

    def _advance(self, key: FlowKey, st: _Stream) -> list[PostEvent]:
        if st.base is None:
            if not st.pending or not self._try_anchor(st):
                return []
        else:
            self._drain(st)
        events = []
        while st.buf:
            closed = st.fin_pos is not None and st.end >= st.fin_pos
            try:
                req = parse_request(bytes(st.buf), closed)
            except _NeedMore:
                break
            except _BadRequest as exc:
                self._mark_unparseable(key, st, str(exc))
                break
            t = self._consume(st, req.consumed)
            self.stats.requests += 1
            http = HttpRequest(
                method=req.method, uri=req.uri, host=req.host,
                content_length_header=req.content_length,
                body_bytes_observed=req.body_size, flow=key, t_complete=t,
            )
            if self.keep_requests:
                self.requests.append(http)
            if req.method == "POST":
                self.stats.posts += 1
                events.append(PostEvent(t=t, server_key=http.server_key, size=req.body_size, server_ip=key.dst_ip))
        return events

    def _consume(self, st: _Stream, n: int) -> float:
        cut = st.base + n
        t = max(ts for start, end, ts in st.chunks if start < cut)
        st.chunks = [(max(s, cut), e, ts) for s, e, ts in st.chunks if e > cut]
        del st.buf[:n]
        st.base = cut
        return t

    def _mark_unparseable(self, key: FlowKey, st: _Stream, reason: str) -> None:
        log.debug("flow %s unparseable: %s", key, reason)
        self.stats.flows_unparseable += 1
        self.stats.bytes_discarded += st.held_bytes()
        st.buf.clear()
        st.chunks.clear()
        st.pending.clear()
        st.pending_bytes = 0
        st.unparseable = True

    def _abandon(self, key: FlowKey, st: _Stream) -> None:
        self.stats.flows_abandoned += 1
        self.stats.bytes_discarded += st.held_bytes()


def extract_post_events(packets: Iterable[PacketRecord], ports: Iterable[int] = (80,)) -> tuple[list[PostEvent], HttpReassembler]:
    """Offline path: reassemble every packet, flush, and return the events."""
    r = HttpReassembler(ports=ports)
    events = r.feed_all(packets)
    events.extend(r.flush().events)
    return events, r
