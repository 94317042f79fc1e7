"""
Blocking a C&C server in the switch simulation
==============================================

Two infected hosts talk to the same C&C server. The first one sends three
POSTs whose sizes match the family centroid; the controller installs a pair
of drop rules for the server's IP, so the second host never gets through.
"""

import tempfile
from pathlib import Path

from ransomwatch import FamilyModel, PostEvent, Simulation, read_pcap
from ransomwatch.capture import write_pcap
from ransomwatch.synth import GATEWAY_MAC, post_frames, rng_for, victim_address

c2_ip, c2_key = "203.0.113.66", "c2.example"
model = FamilyModel("locky", (900.0, 800.0, 775.0), 0.0, 400.0, 400.0, trained_on=1)

frames = []
rng = rng_for(0, 0)
for victim, sizes, t0 in [(0, [910, 810, 770, 640], 1000.0), (1, [905], 1100.0)]:
    ip, mac = victim_address(victim)
    for n, size in enumerate(sizes):
        ev = PostEvent(t0 + 2 * n, c2_key, size, c2_ip)
        frames += post_frames(ev, ip, mac, 49152 + n, rng, segment_size=400)

with tempfile.TemporaryDirectory() as tmp:
    pcap = Path(tmp) / "replay.pcap"
    write_pcap(pcap, frames)
    packets = list(read_pcap(pcap))

ports = {victim_address(0)[1]: 1, victim_address(1)[1]: 2, GATEWAY_MAC: 3}
result = Simulation([model], ports).run(packets)

for i, (pkt, d) in enumerate(zip(packets, result.decisions)):
    note = d.rule_reason()
    if d.installed or (d.action == "drop" and pkt.payload) or i < 3:
        print(f"{i:3d} {pkt.src_ip:>15} -> {pkt.dst_ip:<15} {pkt.flag_string():>5} {len(pkt.payload):4d}B  "
              f"{d.action:7s} {note}")

print("\nflow table:")
print(result.switch.dump(), end="")
