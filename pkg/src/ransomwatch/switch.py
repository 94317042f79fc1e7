"""In-process simulation of the SDN data path.

A layer-2 learning switch forwards frames; every HTTP data segment is also
handed to the controller, which reassembles POSTs, tracks per-server sizes
and classifies each new triple. A malicious verdict installs a pair of drop
rules (source and destination match) on the server's IP. The packet that
triggered detection is still forwarded: rules only affect later packets.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

from .capture import IPPROTO_TCP, PacketRecord, PostEvent, mac_str
from .detector import FamilyModel, Verdict, classify
from .reassembly import HttpReassembler
from .tracker import FeatureTracker

log = logging.getLogger(__name__)

DROP_PRIORITY = 100
L2_PRIORITY = 1
BROADCAST = "ff:ff:ff:ff:ff:ff"

Port = Union[int, str]


@dataclass(frozen=True)
class FlowRule:
    match_field: str  # "nw_src" or "nw_dst"
    ip: str
    action: str = "drop"
    priority: int = DROP_PRIORITY
    installed_at: Optional[float] = field(default=None, compare=False)
    reason: Optional[Verdict] = field(default=None, compare=False)

    def matches(self, pkt: PacketRecord) -> bool:
        if self.match_field == "nw_src":
            return pkt.src_ip == self.ip
        return pkt.dst_ip == self.ip

    def describe(self) -> str:
        return f"priority={self.priority},ip,{self.match_field}={self.ip} actions={self.action}"


def block_pair(ip: str, t: Optional[float] = None, reason: Optional[Verdict] = None) -> list[FlowRule]:
    return [FlowRule("nw_dst", ip, installed_at=t, reason=reason), FlowRule("nw_src", ip, installed_at=t, reason=reason)]


def reason_text(v: Optional[Verdict]) -> str:
    if v is None:
        return "preset"
    return f"{v.family} key={v.server_key} distance_sq={v.distance_sq:g}"


@dataclass
class Decision:
    action: str  # forward | flood | drop
    ports: frozenset = frozenset()
    rule: Optional[FlowRule] = None
    inspected: bool = False
    installed: list[FlowRule] = field(default_factory=list)

    def rule_reason(self) -> str:
        if self.rule is not None:
            return f"{self.rule.match_field}={self.rule.ip} {reason_text(self.rule.reason)}"
        if self.installed:
            return f"detect block={self.installed[0].ip} {reason_text(self.installed[0].reason)}"
        return ""


def escalation_check(pkt: PacketRecord, http_port: int = 80) -> bool:
    """The controller only looks at parseable TCP segments to port 80 carrying data."""
    return (
        pkt.parse_ok
        and pkt.proto == IPPROTO_TCP
        and pkt.tcp_flags is not None
        and pkt.dst_port == http_port
        and len(pkt.payload) > 0
    )


class Switch:
    """Flow table plus MAC learning table."""

    def __init__(self, ports: Iterable[Port]):
        self.ports = frozenset(ports)
        self.mac_table: dict[str, Port] = {}
        self.flow_table: list[FlowRule] = []
        self.counters: dict[FlowRule, list[int]] = {}

    def install_rules(self, rules: Sequence[FlowRule]) -> list[FlowRule]:
        """Add rules not already present; returns the ones actually added."""
        added = []
        for rule in rules:
            if rule in self.counters:
                continue
            self.flow_table.append(rule)
            self.counters[rule] = [0, 0]
            added.append(rule)
        self.flow_table.sort(key=lambda r: -r.priority)  # stable: install order within a priority
        return added

    def block_ip(self, ip: str, t: Optional[float] = None) -> list[FlowRule]:
        return self.install_rules(block_pair(ip, t))

    def lookup(self, pkt: PacketRecord) -> Optional[FlowRule]:
        if pkt.src_ip is None:
            return None
        for rule in self.flow_table:
            if rule.matches(pkt):
                return rule
        return None

    def l2_forward(self, pkt: PacketRecord, in_port: Port) -> Decision:
        frame = pkt.frame
        if len(frame) < 12:
            return Decision("flood", self.ports - {in_port})
        dst, src = mac_str(frame[0:6]), mac_str(frame[6:12])
        if not frame[6] & 1:
            self.mac_table[src] = in_port
        out = self.mac_table.get(dst)
        if dst == BROADCAST or out is None:
            return Decision("flood", self.ports - {in_port})
        if out == in_port:
            return Decision("forward", frozenset())
        return Decision("forward", frozenset({out}))

    def dump(self) -> str:
        lines = []
        for rule in self.flow_table:
            n_pkts, n_bytes = self.counters[rule]
            lines.append(f"n_packets={n_pkts}, n_bytes={n_bytes}, {rule.describe()}")
        lines.append(f"priority={L2_PRIORITY} actions=NORMAL")
        return "\n".join(lines) + "\n"

    def blocked_ips(self) -> set[str]:
        return {r.ip for r in self.flow_table if r.action == "drop"}


class Controller:
    """Detection application: reassembly, per-server tracking, classification."""

    def __init__(self, models: Sequence[FamilyModel], http_port: int = 80):
        for m in models:
            m.validate(require_limit=True)
        self.models = list(models)
        self.http_port = http_port
        self.reassembler = HttpReassembler(ports=(http_port,))
        self.tracker = FeatureTracker()
        self.verdicts: list[Verdict] = []
        self.events: list[PostEvent] = []
        self.inspected = 0

    def inspect(self, pkt: PacketRecord) -> list[FlowRule]:
        self.inspected += 1
        rules: list[FlowRule] = []
        for ev in self.reassembler.feed(pkt):
            self.events.append(ev)
            triple = self.tracker.observe(ev)
            if triple is None or not self.models:
                continue
            verdict = classify(triple, self.models, ev.server_key, ev.t)
            self.verdicts.append(verdict)
            if verdict.malicious:
                self.tracker.flag(ev.server_key)
                rules = block_pair(ev.server_ip or pkt.dst_ip, pkt.timestamp, verdict)
        return rules


def handle_packet(sw: Switch, ctrl: Controller, pkt: PacketRecord, in_port: Port) -> Decision:
    rule = sw.lookup(pkt)
    if rule is not None:
        sw.counters[rule][0] += 1
        sw.counters[rule][1] += len(pkt.frame)
        return Decision("drop", rule=rule)
    decision = sw.l2_forward(pkt, in_port)
    if escalation_check(pkt, ctrl.http_port):
        decision.inspected = True
        rules = ctrl.inspect(pkt)
        if rules:
            decision.installed = sw.install_rules(rules)
    return decision


def read_port_map(path) -> tuple[dict[str, Port], Optional[Port]]:
    """``mac port`` lines; a ``*`` MAC sets the port for unknown senders."""
    mapping: dict[str, Port] = {}
    default = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected '<mac> <port>'")
            port: Port = int(parts[1]) if parts[1].isdigit() else parts[1]
            if parts[0] == "*":
                default = port
            else:
                mapping[parts[0].lower()] = port
    return mapping, default


@dataclass
class SimulationResult:
    decisions: list[Decision]
    switch: Switch
    controller: Controller

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pkt_index", "action", "rule_reason"])
        for i, d in enumerate(self.decisions):
            w.writerow([i, d.action, d.rule_reason()])
        return buf.getvalue()


class Simulation:
    """Replays packets through one switch and one controller."""

    def __init__(
        self,
        models: Sequence[FamilyModel],
        port_map: dict[str, Port],
        default_port: Port = 0,
        preblocked: Iterable[str] = (),
        http_port: int = 80,
    ):
        self.port_map = {k.lower(): v for k, v in port_map.items()}
        self.default_port = default_port
        self.switch = Switch(set(self.port_map.values()) | {default_port})
        self.controller = Controller(models, http_port)
        for ip in preblocked:
            self.switch.block_ip(ip)
        self.decisions: list[Decision] = []

    def in_port(self, pkt: PacketRecord) -> Port:
        if len(pkt.frame) < 12:
            return self.default_port
        return self.port_map.get(mac_str(pkt.frame[6:12]), self.default_port)

    def step(self, pkt: PacketRecord) -> Decision:
        d = handle_packet(self.switch, self.controller, pkt, self.in_port(pkt))
        self.decisions.append(d)
        return d

    def run(self, packets: Iterable[PacketRecord]) -> SimulationResult:
        for pkt in packets:
            self.step(pkt)
        return SimulationResult(self.decisions, self.switch, self.controller)
