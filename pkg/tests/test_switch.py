import pytest

from pkt_util import CLIENT_IP, SERVER_IP, data_packet, post_bytes, syn_packet, worked_example_pcap
from ransomwatch.capture import TCP_ACK, build_udp_frame, decode_frame, read_pcap
from ransomwatch.detector import FamilyModel, ModelError
from ransomwatch.switch import (
    Controller, FlowRule, Simulation, Switch, block_pair, escalation_check, handle_packet, read_port_map,
)
from ransomwatch.synth import GATEWAY_MAC, victim_address

C2_IP = "203.0.113.66"
LOCKY = FamilyModel("locky", (900.0, 800.0, 775.0), 0.0, 400.0, 400.0, trained_on=1)
FAR = FamilyModel("other", (10.0, 10.0, 10.0), 0.0, 400.0, 400.0, trained_on=1)
PORTS = {victim_address(0)[1]: 1, victim_address(1)[1]: 2, GATEWAY_MAC: 3}


def touches(pkt, ip):
    return ip in (pkt.src_ip, pkt.dst_ip)


@pytest.fixture
def replay(tmp_path):
    frames, v1, v2 = worked_example_pcap(tmp_path / "we.pcap", c2_ip=C2_IP)
    packets = list(read_pcap(tmp_path / "we.pcap"))

    def run(models=(LOCKY,), preblocked=()):
        return packets, Simulation(list(models), PORTS, preblocked=preblocked).run(packets)
    return run


def detection_index(result):
    (idx,) = [i for i, d in enumerate(result.decisions) if d.installed]
    return idx


def test_worked_example_installs_one_pair(replay):
    packets, res = replay()
    assert res.switch.flow_table == block_pair(C2_IP)
    assert res.switch.blocked_ips() == {C2_IP}
    (malicious,) = [v for v in res.controller.verdicts if v.malicious]
    assert malicious.triple == (910, 810, 770) and malicious.distance_sq == 225


def test_triggering_packet_is_forwarded(replay):
    packets, res = replay()
    i = detection_index(res)
    assert res.decisions[i].action != "drop" and res.decisions[i].inspected
    assert touches(packets[i], C2_IP) and packets[i].payload


def test_everything_after_detection_is_dropped(replay):
    packets, res = replay()
    i = detection_index(res)
    later = [(p, d) for p, d in zip(packets[i + 1:], res.decisions[i + 1:]) if touches(p, C2_IP)]
    assert later and all(d.action == "drop" for _, d in later)
    # both directions hit the table
    assert {d.rule.match_field for _, d in later} == {"nw_src", "nw_dst"}
    # the fourth POST never reached the controller
    assert len(res.controller.events) == 3


def test_nothing_dropped_before_detection(replay):
    packets, res = replay()
    i = detection_index(res)
    assert all(d.action != "drop" for d in res.decisions[:i + 1])


def test_second_victim_blocked_from_first_packet(replay):
    packets, res = replay()
    v2_ip = victim_address(1)[0]
    v2 = [d for p, d in zip(packets, res.decisions) if p.src_ip == v2_ip]
    assert v2 and all(d.action == "drop" for d in v2)
    assert packets.index(next(p for p in packets if p.src_ip == v2_ip)) > detection_index(res)


def test_no_models_is_pure_l2(replay):
    packets, res = replay(models=())
    assert all(d.action in ("forward", "flood") for d in res.decisions)
    assert res.switch.flow_table == []
    assert res.switch.dump() == "priority=1 actions=NORMAL\n"
    assert res.controller.verdicts == [] and len(res.controller.events) == 5


def test_far_model_blocks_nothing(replay):
    packets, res = replay(models=(FAR,))
    assert res.switch.flow_table == [] and not any(v.malicious for v in res.controller.verdicts)
    # histories are per server key, so victim 2's POST extends victim 1's sequence
    assert [v.triple for v in res.controller.verdicts] == [(910, 810, 770), (810, 770, 640), (770, 640, 120)]


def test_preblocked_drops_from_first_packet(replay):
    packets, res = replay(models=(), preblocked=[C2_IP])
    assert res.decisions[0].action == "drop"
    assert all(d.action == "drop" for p, d in zip(packets, res.decisions) if touches(p, C2_IP))
    assert res.controller.inspected == 0


def test_dump_lists_pair_and_counts(replay):
    packets, res = replay()
    lines = res.switch.dump().splitlines()
    assert len(lines) == 3 and lines[-1] == "priority=1 actions=NORMAL"
    assert f"nw_dst={C2_IP} actions=drop" in lines[0] and f"nw_src={C2_IP} actions=drop" in lines[1]
    dropped = sum(d.action == "drop" for d in res.decisions)
    assert sum(int(line.split(",")[0].split("=")[1]) for line in lines[:2]) == dropped


def test_log_csv(replay):
    packets, res = replay()
    rows = res.log_csv().splitlines()
    assert rows[0] == "pkt_index,action,rule_reason" and len(rows) == len(packets) + 1
    assert "detect block=203.0.113.66 locky" in rows[detection_index(res) + 1]


def test_install_is_idempotent():
    sw = Switch([1, 2])
    assert len(sw.install_rules(block_pair("1.2.3.4", 1.0))) == 2
    assert sw.install_rules(block_pair("1.2.3.4", 2.0)) == []
    assert sw.block_ip("1.2.3.4") == [] and len(sw.flow_table) == 2


def test_drop_rules_outrank_later_installs():
    sw = Switch([1])
    sw.install_rules([FlowRule("nw_dst", "9.9.9.9", action="forward", priority=10)])
    sw.block_ip("9.9.9.9")
    assert sw.lookup(data_packet(0, b"x", dst="9.9.9.9")).action == "drop"


def test_escalation_check():
    assert escalation_check(data_packet(0, b"POST"))
    assert not escalation_check(data_packet(0, b"", flags=TCP_ACK))
    assert not escalation_check(data_packet(0, b"x", dport=8080))
    assert not escalation_check(decode_frame(0, 0, b"\x00" * 10))
    udp = build_udp_frame("02:00:00:00:00:01", GATEWAY_MAC, CLIENT_IP, SERVER_IP, 5000, 80, b"POST")
    assert not escalation_check(decode_frame(0, 0, udp))


def test_ack_only_forwarded_not_inspected():
    sw, ctrl = Switch([1, 2]), Controller([LOCKY])
    d = handle_packet(sw, ctrl, data_packet(0, b"", flags=TCP_ACK), 1)
    assert d.action == "flood" and not d.inspected and ctrl.inspected == 0


def test_l2_learning():
    sw = Switch([1, 2, 3])
    out = data_packet(0, b"")  # client -> server, server MAC unknown
    assert sw.l2_forward(out, 1).action == "flood"
    assert sw.l2_forward(out, 1).ports == frozenset({2, 3})
    back = decode_frame(0, 0, out.frame[6:12] + out.frame[0:6] + out.frame[12:])
    assert sw.l2_forward(back, 2).ports == frozenset({1})
    assert sw.l2_forward(out, 1).ports == frozenset({2})


def test_controller_rejects_untuned_model():
    with pytest.raises(ModelError):
        Controller([FamilyModel("x", (1.0, 1.0, 1.0), 0.0, 1.0)])


def test_direct_feed_without_pcap():
    sw, ctrl = Switch([1, 2]), Controller([LOCKY])
    decisions = []
    for k, size in enumerate([910, 810, 770]):
        isn = 5000 * (k + 1)
        handle_packet(sw, ctrl, syn_packet(isn, sport=40000 + k), 1)
        decisions.append(handle_packet(sw, ctrl, data_packet(0, post_bytes("c2.example", size), isn, sport=40000 + k), 1))
    assert [bool(d.installed) for d in decisions] == [False, False, True]
    assert sw.blocked_ips() == {SERVER_IP}


def test_read_port_map(tmp_path):
    p = tmp_path / "ports.txt"
    p.write_text("# victims\n02:00:00:00:00:01 1\n02:00:00:FF:FF:FE uplink\n* 9\n")
    mapping, default = read_port_map(p)
    assert mapping == {"02:00:00:00:00:01": 1, "02:00:00:ff:ff:fe": "uplink"} and default == 9
    p.write_text("lonely\n")
    with pytest.raises(ValueError):
        read_port_map(p)
