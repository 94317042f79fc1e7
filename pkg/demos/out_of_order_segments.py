"""
Reassembling a POST from shuffled segments
==========================================

The body size of a POST is only known once its TCP segments are put back in
sequence order. Here one request is cut into five segments and fed in every
possible order; the reassembler reports the same event each time.
"""

import itertools

from ransomwatch.capture import TCP_ACK, TCP_PSH, build_tcp_frame, decode_frame
from ransomwatch.reassembly import HttpReassembler

body = b"k" * 640
request = b"POST /main.php HTTP/1.1\r\nHost: c2.example\r\nContent-Length: 640\r\n\r\n" + body
cuts = [0, 30, 90, 300, 520, len(request)]
isn = 4_000_000_000  # sequence numbers wrap past 2**32 inside this request

packets = []
for i in range(5):
    seg = request[cuts[i]:cuts[i + 1]]
    frame = build_tcp_frame("02:00:00:00:00:01", "02:00:00:ff:ff:fe", "10.0.0.10", "198.51.100.7",
                            49152, 80, (isn + cuts[i]) % 2**32, 1, TCP_PSH | TCP_ACK, seg)
    packets.append(decode_frame(1000 + i, 0, frame))

seen = set()
for order in itertools.permutations(packets):
    r = HttpReassembler()
    events = r.feed_all(order) + r.flush().events
    seen.add(tuple(events))

print(f"{len(list(itertools.permutations(packets)))} orders, {len(seen)} distinct result(s)")
print(next(iter(seen)))
