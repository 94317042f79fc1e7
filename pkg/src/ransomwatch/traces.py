"""Labeled traces and the manifest files that list them."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

from .capture import FixtureStats, PcapReader, PostEvent, is_pcap, read_post_events
from .reassembly import extract_post_events

log = logging.getLogger(__name__)

BENIGN = "benign"


class ManifestError(ValueError):
    pass


@dataclass
class TraceSet:
    """POST events from one capture or fixture, with its label.

    ``label`` is a family name for infection traces and None for benign ones.
    """

    trace_id: str
    label: Optional[str]
    events: list[PostEvent] = field(default_factory=list)
    origin: Optional[str] = None
    fmt: str = "events"

    @property
    def malicious(self) -> bool:
        return self.label is not None


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    label: Optional[str]


def read_manifest(path: Union[str, Path]) -> list[ManifestEntry]:
    """Parse ``path family|benign`` lines; relative paths resolve against the manifest."""
    path = Path(path)
    entries = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2:
            raise ManifestError(f"{path}:{lineno}: expected '<path> <family|benign>'")
        file_path = Path(parts[0])
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        label = None if parts[1].lower() == BENIGN else parts[1].lower()
        entries.append(ManifestEntry(file_path, label))
    return entries


def write_manifest(path: Union[str, Path], entries: list[tuple[str, Optional[str]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rel, label in entries:
            fh.write(f"{rel} {label or BENIGN}\n")


def load_trace(path: Union[str, Path], label: Optional[str] = None, ports=(80,)) -> TraceSet:
    """Load a pcap (reassembled) or a POST-event fixture, sniffing the format."""
    path = Path(path)
    if is_pcap(path):
        reader = PcapReader(path)
        events, r = extract_post_events(reader, ports=ports)
        if r.stats.flows_unparseable or r.stats.flows_abandoned:
            log.info("%s: %d unparseable, %d abandoned flows", path,
                     r.stats.flows_unparseable, r.stats.flows_abandoned)
        return TraceSet(path.name, label, events, str(path), "pcap")
    stats = FixtureStats()
    events = list(read_post_events(path, stats))
    return TraceSet(path.name, label, events, str(path), "events")


def load_manifest(path: Union[str, Path], ports=(80,)) -> list[TraceSet]:
    return [load_trace(e.path, e.label, ports) for e in read_manifest(path)]


def file_digest(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
