"""Packet capture and POST-event fixture I/O.

Classic libpcap files only (Ethernet link type). Frames are decoded down to
the TCP header; anything the decoder cannot follow is still yielded so the
switch simulator can forward it at layer 2.
"""

from __future__ import annotations

import ipaddress
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Iterator, Optional, Union

log = logging.getLogger(__name__)

PathLike = Union[str, Path]

PCAP_MAGIC_USEC = 0xA1B2C3D4
PCAP_MAGIC_NSEC = 0xA1B23C4D
LINKTYPE_ETHERNET = 1
MAX_RECORD_LEN = 262144

ETH_TYPE_IPV4 = 0x0800
ETH_TYPE_IPV6 = 0x86DD
IPPROTO_TCP = 6
IPPROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_PSH = 0x08
TCP_ACK = 0x10

_FLAG_NAMES = [(TCP_FIN, "F"), (TCP_SYN, "S"), (TCP_RST, "R"), (TCP_PSH, "P"), (TCP_ACK, "A")]


class CaptureError(Exception):
    """The capture file cannot be read at all."""


@dataclass(frozen=True)
class PacketRecord:
    """One captured frame with its decoded IPv4/TCP fields.

    ``parse_ok`` is false for truncated or inconsistent frames, in which case
    every protocol field is None. Non-IPv4 frames parse fine but leave the
    IP and transport fields unset; non-TCP IPv4 frames leave the TCP fields
    unset.
    """

    ts_sec: int
    ts_usec: int
    frame: bytes
    parse_ok: bool
    eth_type: Optional[int] = None
    src_ip: Optional[str] = None
    dst_ip: Optional[str] = None
    proto: Optional[int] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    tcp_flags: Optional[int] = None
    tcp_seq: Optional[int] = None
    payload: bytes = b""

    @property
    def timestamp(self) -> float:
        return self.ts_sec + self.ts_usec / 1e6

    @property
    def is_tcp(self) -> bool:
        return self.parse_ok and self.proto == IPPROTO_TCP and self.tcp_flags is not None

    def has_flag(self, flag: int) -> bool:
        return self.tcp_flags is not None and bool(self.tcp_flags & flag)

    def flag_string(self) -> str:
        if self.tcp_flags is None:
            return ""
        return "".join(name for bit, name in _FLAG_NAMES if self.tcp_flags & bit)


@dataclass(frozen=True)
class PostEvent:
    """A completed outgoing HTTP POST: where it went and how big it was."""

    t: float
    server_key: str
    size: int
    server_ip: Optional[str] = None


def normalize_key(key: str) -> str:
    """Domains are compared case-insensitively and without a trailing dot."""
    key = key.strip()
    try:
        return str(ipaddress.ip_address(key))
    except ValueError:
        return key.rstrip(".").lower()


def decode_frame(ts_sec: int, ts_usec: int, frame: bytes) -> PacketRecord:
    bad = PacketRecord(ts_sec, ts_usec, frame, parse_ok=False)
    if len(frame) < 14:
        return bad
    (eth_type,) = struct.unpack_from("!H", frame, 12)
    if eth_type != ETH_TYPE_IPV4:
        return PacketRecord(ts_sec, ts_usec, frame, parse_ok=True, eth_type=eth_type)

    ip = frame[14:]
    if len(ip) < 20:
        return bad
    ver_ihl = ip[0]
    ihl = (ver_ihl & 0x0F) * 4
    total_len = struct.unpack_from("!H", ip, 2)[0]
    if ver_ihl >> 4 != 4 or ihl < 20 or total_len < ihl or total_len > len(ip):
        return bad
    ip = ip[:total_len]  # strip Ethernet padding
    proto = ip[9]
    src_ip = str(ipaddress.IPv4Address(ip[12:16]))
    dst_ip = str(ipaddress.IPv4Address(ip[16:20]))
    frag = struct.unpack_from("!H", ip, 6)[0]
    seg = ip[ihl:]
    if proto != IPPROTO_TCP or frag & 0x1FFF:
        return PacketRecord(
            ts_sec, ts_usec, frame, parse_ok=True, eth_type=eth_type,
            src_ip=src_ip, dst_ip=dst_ip, proto=proto,
        )
    if len(seg) < 20:
        return bad
    src_port, dst_port, seq = struct.unpack_from("!HHI", seg, 0)
    off = (seg[12] >> 4) * 4
    if off < 20 or off > len(seg):
        return bad
    return PacketRecord(
        ts_sec, ts_usec, frame, parse_ok=True, eth_type=eth_type,
        src_ip=src_ip, dst_ip=dst_ip, proto=proto,
        src_port=src_port, dst_port=dst_port, tcp_flags=seg[13], tcp_seq=seq,
        payload=bytes(seg[off:]),
    )


@dataclass
class ReaderStats:
    frames: int = 0
    unparsed: int = 0
    ipv6_skipped: int = 0
    error: Optional[str] = None


class PcapReader:
    """Iterate the frames of one classic pcap file, in file order.

    ``stats`` is filled in while iterating. A corrupt record header ends the
    stream with a logged diagnostic; records before it are still yielded.
    """

    def __init__(self, path: PathLike):
        self.path = Path(path)
        self.stats = ReaderStats()

    def __iter__(self) -> Iterator[PacketRecord]:
        try:
            fh = open(self.path, "rb")
        except OSError as exc:
            raise CaptureError(f"cannot open {self.path}: {exc}") from exc
        with fh:
            yield from self._records(fh)

    def _records(self, fh: BinaryIO) -> Iterator[PacketRecord]:
        header = fh.read(24)
        if len(header) < 24:
            raise CaptureError(f"{self.path}: missing pcap global header")
        for endian in ("<", ">"):
            (magic,) = struct.unpack(endian + "I", header[:4])
            if magic in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC):
                break
        else:
            raise CaptureError(f"{self.path}: not a classic pcap file (magic {header[:4].hex()})")
        nsec = magic == PCAP_MAGIC_NSEC
        linktype = struct.unpack(endian + "I", header[20:24])[0]
        if linktype != LINKTYPE_ETHERNET:
            raise CaptureError(f"{self.path}: unsupported link type {linktype}")

        rec_fmt = endian + "IIII"
        index = 0
        while True:
            rec = fh.read(16)
            if not rec:
                return
            if len(rec) < 16:
                self._stop(f"truncated record header after frame {index}")
                return
            ts_sec, ts_frac, incl_len, orig_len = struct.unpack(rec_fmt, rec)
            if incl_len > MAX_RECORD_LEN or (nsec and ts_frac >= 10**9) or (not nsec and ts_frac >= 10**6):
                self._stop(f"corrupt record header after frame {index}")
                return
            frame = fh.read(incl_len)
            if len(frame) < incl_len:
                self._stop(f"truncated frame data at frame {index}")
                return
            ts_usec = ts_frac // 1000 if nsec else ts_frac
            pkt = decode_frame(ts_sec, ts_usec, frame)
            self.stats.frames += 1
            if not pkt.parse_ok:
                self.stats.unparsed += 1
            elif pkt.eth_type == ETH_TYPE_IPV6:
                self.stats.ipv6_skipped += 1
            index += 1
            yield pkt

    def _stop(self, message: str) -> None:
        self.stats.error = message
        log.warning("%s: %s; stopping", self.path, message)


def read_pcap(path: PathLike) -> Iterator[PacketRecord]:
    return iter(PcapReader(path))


def is_pcap(path: PathLike) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        return False
    return any(struct.unpack(e + "I", head)[0] in (PCAP_MAGIC_USEC, PCAP_MAGIC_NSEC) for e in "<>")


class PcapWriter:
    def __init__(self, fh: BinaryIO, snaplen: int = 65535):
        self.fh = fh
        fh.write(struct.pack("<IHHiIII", PCAP_MAGIC_USEC, 2, 4, 0, 0, snaplen, LINKTYPE_ETHERNET))

    def write(self, ts_sec: int, ts_usec: int, frame: bytes) -> None:
        self.fh.write(struct.pack("<IIII", ts_sec, ts_usec, len(frame), len(frame)))
        self.fh.write(frame)


def write_pcap(path: PathLike, frames: Iterable[tuple[int, int, bytes]]) -> int:
    """Write ``(ts_sec, ts_usec, frame)`` tuples; returns the frame count."""
    n = 0
    with open(path, "wb") as fh:
        w = PcapWriter(fh)
        for ts_sec, ts_usec, frame in frames:
            w.write(ts_sec, ts_usec, frame)
            n += 1
    return n


def _checksum(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = sum(struct.unpack(f"!{len(data) // 2}H", data))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def mac_bytes(mac: str) -> bytes:
    return bytes(int(part, 16) for part in mac.split(":"))


def mac_str(raw: bytes) -> str:
    return ":".join(f"{b:02x}" for b in raw)


def build_ipv4_frame(
    src_mac: str, dst_mac: str, src_ip: str, dst_ip: str, proto: int, l4: bytes, ident: int = 0
) -> bytes:
    total = 20 + len(l4)
    hdr = struct.pack(
        "!BBHHHBBH4s4s", 0x45, 0, total, ident & 0xFFFF, 0x4000, 64, proto, 0,
        ipaddress.IPv4Address(src_ip).packed, ipaddress.IPv4Address(dst_ip).packed,
    )
    hdr = hdr[:10] + struct.pack("!H", _checksum(hdr)) + hdr[12:]
    eth = mac_bytes(dst_mac) + mac_bytes(src_mac) + struct.pack("!H", ETH_TYPE_IPV4)
    return eth + hdr + l4


def build_tcp_frame(
    src_mac: str, dst_mac: str, src_ip: str, dst_ip: str,
    src_port: int, dst_port: int, seq: int, ack: int, flags: int,
    payload: bytes = b"", window: int = 65535,
) -> bytes:
    tcp = struct.pack(
        "!HHIIBBHHH", src_port, dst_port, seq & 0xFFFFFFFF, ack & 0xFFFFFFFF,
        5 << 4, flags, window, 0, 0,
    ) + payload
    pseudo = (
        ipaddress.IPv4Address(src_ip).packed + ipaddress.IPv4Address(dst_ip).packed
        + struct.pack("!BBH", 0, IPPROTO_TCP, len(tcp))
    )
    csum = _checksum(pseudo + tcp)
    tcp = tcp[:16] + struct.pack("!H", csum) + tcp[18:]
    return build_ipv4_frame(src_mac, dst_mac, src_ip, dst_ip, IPPROTO_TCP, tcp)


def build_udp_frame(
    src_mac: str, dst_mac: str, src_ip: str, dst_ip: str,
    src_port: int, dst_port: int, payload: bytes = b"",
) -> bytes:
    udp = struct.pack("!HHHH", src_port, dst_port, 8 + len(payload), 0) + payload
    return build_ipv4_frame(src_mac, dst_mac, src_ip, dst_ip, IPPROTO_UDP, udp)


# -- POST-event fixtures ------------------------------------------------------

@dataclass
class FixtureStats:
    lines: int = 0
    events: int = 0
    skipped: list[int] = field(default_factory=list)


def parse_event_line(line: str) -> PostEvent:
    parts = line.split()
    if len(parts) != 3:
        raise ValueError(f"expected 3 fields, got {len(parts)}")
    t = float(parts[0])
    size = int(parts[2])
    if size < 0:
        raise ValueError(f"negative size {size}")
    return PostEvent(t=t, server_key=normalize_key(parts[1]), size=size)


def read_post_events(path: PathLike, stats: Optional[FixtureStats] = None) -> Iterator[PostEvent]:
    """Read a ``timestamp server_key size`` fixture, one event per line.

    Blank lines and ``#`` comments are ignored; malformed lines are skipped
    with a warning.
    """
    stats = stats if stats is not None else FixtureStats()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            stats.lines += 1
            try:
                ev = parse_event_line(stripped)
            except ValueError as exc:
                log.warning("%s:%d: skipping line (%s)", path, lineno, exc)
                stats.skipped.append(lineno)
                continue
            stats.events += 1
            yield ev


def format_event_line(ev: PostEvent) -> str:
    return f"{ev.t!r} {ev.server_key} {ev.size}"


def write_post_events(path: PathLike, events: Iterable[PostEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(format_event_line(ev) + "\n")
