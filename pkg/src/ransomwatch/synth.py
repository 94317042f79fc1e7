"""Seeded synthetic corpora: ransomware-like POST clusters plus benign traffic.

Random numbers come from numpy's PCG64. Every trace and every benign key
gets its own stream, derived as ``SeedSequence(seed, spawn_key=(stream,
index))``. Output is therefore identical for a given seed no matter how
traces are partitioned across workers.

Malicious traces: the first triple is drawn uniformly from the ball of
squared radius ``spread_sq`` around the cluster centroid, rounded to whole
bytes, and redrawn if rounding leaves the ball or yields a negative size.
POSTs after the third are drawn per component from a normal with variance
``spread_sq / 3``.

After drawing, each cluster goes through a verification pass: first triples
lying further than ``spread_sq`` from the sample mean (of the whole cluster
and of its training split) are pulled toward that mean. A model fit to the
generated traces thus never reports a ``d_max_sq`` above ``spread_sq``.

Benign datasets: sizes are rounded log-normal draws. The number of POSTs per
key is Poisson, fixed, or an exact ``shape`` that hits given totals of POSTs,
triples and keys.
"""

from __future__ import annotations

import ipaddress
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence, Union

import numpy as np

from .capture import (
    TCP_ACK, TCP_FIN, TCP_PSH, TCP_SYN, PcapWriter, PostEvent, build_tcp_frame, write_post_events,
)
from .detector import distances_sq
from .traces import TraceSet, write_manifest

C2_NET = ipaddress.IPv4Address("198.18.0.1")
BENIGN_NET = ipaddress.IPv4Address("100.64.0.1")
VICTIM_NET = ipaddress.IPv4Address("10.0.0.10")
GATEWAY_MAC = "02:00:00:ff:ff:fe"
BASE_TIME_USEC = 1_476_835_200 * 1_000_000  # 2016-10-19T00:00:00Z

_STREAM_MALICIOUS = 1
_STREAM_BENIGN = 2
_STREAM_RENDER = 3


def rng_for(seed: int, stream: int, *index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(stream, *index))))


def usec_to_t(usec: int) -> float:
    """The float timestamp a pcap reader will reconstruct for ``usec``."""
    sec, frac = divmod(int(usec), 1_000_000)
    return sec + frac / 1e6


def t_to_usec(t: float) -> int:
    return int(round(t * 1_000_000))


# -- spec ---------------------------------------------------------------------

@dataclass
class FamilyCluster:
    family: str
    centroid: tuple[float, float, float]
    spread_sq: float
    traces: int
    posts_per_trace: int = 3
    holdout: int = 0

    def __post_init__(self):
        if len(self.centroid) != 3 or any(c < 0 for c in self.centroid):
            raise ValueError("centroid must be three non-negative numbers")
        if self.spread_sq < 0 or self.traces <= 0 or self.posts_per_trace < 3:
            raise ValueError(f"invalid cluster {self.family}")
        if not 0 <= self.holdout <= self.traces:
            raise ValueError("holdout must be between 0 and traces")


@dataclass
class BenignDataset:
    name: str
    keys: int
    posts_per_key: dict
    size: dict  # {"mu": ..., "sigma": ...} of the underlying normal

    def __post_init__(self):
        if self.keys <= 0:
            raise ValueError(f"benign dataset {self.name}: keys must be positive")
        kind = self.posts_per_key.get("kind")
        if kind not in ("poisson", "fixed", "shape"):
            raise ValueError(f"benign dataset {self.name}: unknown posts_per_key kind {kind!r}")
        if self.size.get("sigma", 0) < 0:
            raise ValueError("log-normal sigma must be non-negative")


@dataclass
class SynthSpec:
    seed: int
    family_clusters: list[FamilyCluster] = field(default_factory=list)
    benign: list[BenignDataset] = field(default_factory=list)
    segment_size: int = 1460
    shuffle: bool = False

    @classmethod
    def from_dict(cls, doc: dict) -> "SynthSpec":
        render = doc.get("render", {})
        return cls(
            seed=int(doc["seed"]),
            family_clusters=[
                FamilyCluster(
                    family=c["family"].lower(), centroid=tuple(float(x) for x in c["centroid"]),
                    spread_sq=float(c["spread_sq"]), traces=int(c["traces"]),
                    posts_per_trace=int(c.get("posts_per_trace", 3)), holdout=int(c.get("holdout", 0)),
                )
                for c in doc.get("family_clusters", [])
            ],
            benign=[
                BenignDataset(b["name"], int(b["keys"]), dict(b["posts_per_key"]), dict(b["size"]))
                for b in doc.get("benign", [])
            ],
            segment_size=int(render.get("segment_size", 1460)),
            shuffle=bool(render.get("shuffle", False)),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# -- generation ---------------------------------------------------------------

def draw_first_triple(rng: np.random.Generator, centroid: Sequence[float], spread_sq: float, tries: int = 1000) -> tuple[int, int, int]:
    c = np.asarray(centroid, dtype=np.float64)
    radius = math.sqrt(spread_sq)
    for _ in range(tries):
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        r = radius * rng.random() ** (1.0 / 3.0)
        v = np.rint(c + r * direction)
        if np.all(v >= 0) and float(((v - c) ** 2).sum()) <= spread_sq:
            return tuple(int(x) for x in v)
    # spread too tight for whole-byte sizes
    return tuple(int(x) for x in np.rint(c))


def malicious_sizes(rng: np.random.Generator, cl: FamilyCluster) -> list[int]:
    sizes = list(draw_first_triple(rng, cl.centroid, cl.spread_sq))
    sd = math.sqrt(cl.spread_sq / 3.0)
    for k in range(3, cl.posts_per_trace):
        sizes.append(max(0, int(round(cl.centroid[k % 3] + sd * rng.standard_normal()))))
    return sizes


def tighten_cluster(
    firsts: np.ndarray, centroid: Sequence[float], spread_sq: float, train: int, rounds: int = 200,
) -> np.ndarray:
    """Pull first triples inward until every one lies within ``spread_sq`` of
    the centroid, the cluster mean and the mean of the first ``train`` rows.

    Rows are moved along the line to the violated mean, which keeps them in
    the (convex) ball around the centroid up to rounding.
    """
    pts = np.array(firsts, dtype=np.float64)
    c = np.asarray(centroid, dtype=np.float64)
    for _ in range(rounds):
        moved = False
        for rows in (slice(None), slice(0, train)):
            sub = pts[rows]
            if len(sub) == 0:
                continue
            for anchor in (c, sub.mean(axis=0)):
                d = distances_sq(sub, anchor)
                over = d > spread_sq
                if over.any():
                    scale = np.sqrt(0.99 * spread_sq / d[over])[:, None]
                    sub[over] = np.maximum(np.rint(anchor + (sub[over] - anchor) * scale), 0)
                    moved = True
        if not moved:
            return pts
    # rounding keeps fighting the constraint: collapse offenders onto the centroid
    pts[distances_sq(pts, c) > spread_sq] = np.rint(c)
    return pts


def shape_allocation(rng: np.random.Generator, keys: int, posts: int, triples: int) -> list[int]:
    """POST counts for ``keys`` keys summing to ``posts`` with sum(max(0, n-2)) == ``triples``.

    Keys with three or more POSTs carry all the triples; the others get one
    or two POSTs each.
    """
    rest = posts - triples
    if triples < 0 or rest > 2 * keys or rest < keys:
        raise ValueError(f"no allocation of {posts} POSTs over {keys} keys yields {triples} triples")
    active = min(posts - triples - keys, triples, keys)
    if triples > 0 and active < 1:
        raise ValueError(f"no allocation of {posts} POSTs over {keys} keys yields {triples} triples")
    counts = []
    if active:
        extra = rng.multinomial(triples - active, [1.0 / active] * active)
        counts.extend(int(3 + e) for e in extra)
    passive = keys - active
    q = posts - (triples + 2 * active)
    twos = q - passive
    counts.extend([2] * twos + [1] * (passive - twos))
    rng.shuffle(counts)
    return counts


def posts_per_key(rng: np.random.Generator, ds: BenignDataset) -> list[int]:
    p = ds.posts_per_key
    if p["kind"] == "fixed":
        return [int(p["n"])] * ds.keys
    if p["kind"] == "poisson":
        lo = int(p.get("min", 1))
        return [max(lo, int(x)) for x in rng.poisson(float(p["mean"]), ds.keys)]
    return shape_allocation(rng, ds.keys, int(p["posts"]), int(p["triples"]))


def _ip(base: ipaddress.IPv4Address, offset: int) -> str:
    return str(base + offset)


@dataclass
class SynthResult:
    traces: list[TraceSet]
    manifest: list[tuple[str, Optional[str]]]
    splits: dict[str, list[str]]

    def by_id(self) -> dict[str, TraceSet]:
        return {t.trace_id: t for t in self.traces}

    def split(self, name: str) -> list[TraceSet]:
        ids = set(self.splits.get(name, []))
        return [t for t in self.traces if t.trace_id in ids]


def generate(spec: SynthSpec) -> SynthResult:
    traces: list[TraceSet] = []
    splits: dict[str, list[str]] = {"train": [], "holdout": [], "benign": []}
    c2_index = 0
    for ci, cl in enumerate(spec.family_clusters):
        drawn = [malicious_sizes(rng_for(spec.seed, _STREAM_MALICIOUS, ci, i), cl) for i in range(cl.traces)]
        firsts = tighten_cluster([d[:3] for d in drawn], cl.centroid, cl.spread_sq, cl.traces - cl.holdout)
        for i in range(cl.traces):
            sizes = [int(x) for x in firsts[i]] + drawn[i][3:]
            trace_id = f"{cl.family}-{i:04d}"
            key = f"c2-{cl.family}-{i:04d}.example"
            ip = _ip(C2_NET, c2_index)
            c2_index += 1
            start = BASE_TIME_USEC + (ci * 100_000 + i) * 60_000_000
            events = [
                PostEvent(usec_to_t(start + k * 2_000_000), key, size, ip)
                for k, size in enumerate(sizes)
            ]
            traces.append(TraceSet(trace_id, cl.family, events, origin="synth"))
            splits["holdout" if i >= cl.traces - cl.holdout else "train"].append(trace_id)

    key_offset = 0
    for bi, ds in enumerate(spec.benign):
        counts = posts_per_key(rng_for(spec.seed, _STREAM_BENIGN, bi), ds)
        mu, sigma = float(ds.size["mu"]), float(ds.size["sigma"])
        order = []
        per_key = []
        for j, n in enumerate(counts):
            krng = rng_for(spec.seed, _STREAM_BENIGN, bi, j + 1)
            per_key.append([int(x) for x in np.rint(krng.lognormal(mu, sigma, n))])
            order.extend([j] * n)
        order_rng = rng_for(spec.seed, _STREAM_BENIGN, bi, 0)
        order = [order[i] for i in order_rng.permutation(len(order))]
        cursor = [0] * len(counts)
        events = []
        for n, j in enumerate(order):
            size = per_key[j][cursor[j]]
            cursor[j] += 1
            key = f"{ds.name}-{j:05d}.example"
            t = usec_to_t(BASE_TIME_USEC + (bi + 1) * 10**13 + n * 50_000)
            events.append(PostEvent(t, key, size, _ip(BENIGN_NET, key_offset + j)))
        key_offset += len(counts)
        trace_id = f"benign-{ds.name}"
        traces.append(TraceSet(trace_id, None, events, origin="synth"))
        splits["benign"].append(trace_id)

    manifest = [(t.trace_id, t.label) for t in traces]
    return SynthResult(traces, manifest, splits)


# -- pcap rendering -----------------------------------------------------------

def victim_address(index: int) -> tuple[str, str]:
    """(IPv4, MAC) of the index-th synthetic client host."""
    n = index + 1
    return _ip(VICTIM_NET, index), f"02:00:00:{(n >> 16) & 0xFF:02x}:{(n >> 8) & 0xFF:02x}:{n & 0xFF:02x}"


def _request_bytes(ev: PostEvent, uri: str, body: bytes) -> bytes:
    head = (
        f"POST {uri} HTTP/1.1\r\n"
        f"Host: {ev.server_key}\r\n"
        "Content-Type: application/x-www-form-urlencoded\r\n"
        f"Content-Length: {len(body)}\r\n"
        "Connection: close\r\n\r\n"
    )
    return head.encode("ascii") + body


def post_frames(
    ev: PostEvent,
    client_ip: str,
    client_mac: str,
    client_port: int,
    rng: np.random.Generator,
    segment_size: int = 1460,
    shuffle: bool = False,
    uri: str = "/main.php",
) -> list[tuple[int, int, bytes]]:
    """One POST as a full TCP conversation: handshake, request, reply, teardown.

    The last request segment carries the event's own timestamp, so the
    reassembled event reproduces ``ev.t``.
    """
    if ev.server_ip is None:
        raise ValueError("rendering needs the event's server_ip")
    if segment_size <= 0:
        raise ValueError("segment_size must be positive")
    body = rng.integers(0x30, 0x7B, ev.size, dtype=np.uint8).tobytes()
    request = _request_bytes(ev, uri, body)
    segs = [request[i:i + segment_size] for i in range(0, len(request), segment_size)]
    isn_c, isn_s = (int(x) for x in rng.integers(0, 2**32, 2))
    end_usec = t_to_usec(ev.t)
    step = 10
    t0 = end_usec - step * (len(segs) + 2)

    c, s = client_ip, ev.server_ip
    cm, sm = client_mac, GATEWAY_MAC

    def c2s(seq, ack, flags, payload=b""):
        return build_tcp_frame(cm, sm, c, s, client_port, 80, seq, ack, flags, payload)

    def s2c(seq, ack, flags, payload=b""):
        return build_tcp_frame(sm, cm, s, c, 80, client_port, seq, ack, flags, payload)

    frames: list[tuple[int, bytes]] = [
        (t0, c2s(isn_c, 0, TCP_SYN)),
        (t0 + 1, s2c(isn_s, isn_c + 1, TCP_SYN | TCP_ACK)),
        (t0 + 2, c2s(isn_c + 1, isn_s + 1, TCP_ACK)),
    ]
    data = []
    seq = isn_c + 1
    for i, seg in enumerate(segs):
        data.append((end_usec - step * (len(segs) - 1 - i), c2s(seq, isn_s + 1, TCP_PSH | TCP_ACK, seg)))
        seq += len(seg)
    if shuffle:
        data = [data[i] for i in rng.permutation(len(data))]
    frames.extend(data)
    reply = b"HTTP/1.1 200 OK\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
    frames += [
        (end_usec + 1, s2c(isn_s + 1, seq, TCP_PSH | TCP_ACK, reply)),
        (end_usec + 2, c2s(seq, isn_s + 1 + len(reply), TCP_FIN | TCP_ACK)),
        (end_usec + 3, s2c(isn_s + 1 + len(reply), seq + 1, TCP_FIN | TCP_ACK)),
        (end_usec + 4, c2s(seq + 1, isn_s + 2 + len(reply), TCP_ACK)),
    ]
    return [(u // 1_000_000, u % 1_000_000, f) for u, f in frames]


def trace_frames(
    trace: TraceSet,
    client_index: int,
    seed: int = 0,
    segment_size: int = 1460,
    shuffle: bool = False,
) -> Iterator[tuple[int, int, bytes]]:
    client_ip, client_mac = victim_address(client_index)
    rng = rng_for(seed, _STREAM_RENDER, client_index)
    uri = "/main.php" if trace.malicious else "/submit"
    for n, ev in enumerate(trace.events):
        yield from post_frames(ev, client_ip, client_mac, 49152 + n % 16000, rng, segment_size, shuffle, uri)


def render_pcap(
    traces: Sequence[TraceSet],
    path: Union[str, Path],
    seed: int = 0,
    segment_size: int = 1460,
    shuffle: bool = False,
    first_client: int = 0,
) -> int:
    """Write the given traces into one pcap, each from its own client host.

    Traces are written one after another. Returns the frame count. With no
    traces the file holds only the global header.
    """
    n = 0
    with open(path, "wb") as fh:
        w = PcapWriter(fh)
        for i, trace in enumerate(traces):
            for frame in trace_frames(trace, first_client + i, seed, segment_size, shuffle):
                w.write(*frame)
                n += 1
    return n


def write_dataset(result: SynthResult, out_dir: Union[str, Path], spec: SynthSpec, fmt: str = "pcap") -> list[Path]:
    """Write every trace plus manifests; returns the written trace files.

    ``fmt`` is ``pcap`` or ``events`` (the POST-event fixture format).
    Manifests: manifest.txt (everything), and train/holdout/benign subsets.
    """
    if fmt not in ("pcap", "events"):
        raise ValueError(f"unknown output format {fmt!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".pcap" if fmt == "pcap" else ".events"
    written = []
    for i, trace in enumerate(result.traces):
        path = out / f"{trace.trace_id}{ext}"
        if fmt == "pcap":
            render_pcap([trace], path, spec.seed, spec.segment_size, spec.shuffle, first_client=i)
        else:
            write_post_events(path, trace.events)
        written.append(path)
    labels = dict(result.manifest)
    write_manifest(out / "manifest.txt", [(f"{tid}{ext}", label) for tid, label in result.manifest])
    for name, ids in result.splits.items():
        write_manifest(out / f"manifest-{name}.txt", [(f"{tid}{ext}", labels[tid]) for tid in ids])
    return written


def iter_events(traces: Iterable[TraceSet]) -> Iterator[PostEvent]:
    for t in traces:
        yield from t.events
