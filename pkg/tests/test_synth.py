import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from ransomwatch.capture import read_pcap
from ransomwatch.detector import classify, distance_sq
from ransomwatch.reassembly import extract_post_events
from ransomwatch.synth import (
    SynthSpec, draw_first_triple, generate, render_pcap, rng_for, shape_allocation, tighten_cluster,
    write_dataset,
)
from ransomwatch.traces import load_manifest, read_manifest
from ransomwatch.tracker import group_sizes
from ransomwatch.trainer import extract_learning_sample, fit

SPECS = Path(__file__).resolve().parent.parent / "specs"


def cluster_spec(seed=1, **cluster):
    c = {"family": "locky", "centroid": [900, 800, 775], "spread_sq": 250000, "traces": 10}
    c.update(cluster)
    return SynthSpec.from_dict({"seed": seed, "family_clusters": [c]})


def digest_tree(root):
    h = hashlib.sha256()
    for p in sorted(Path(root).rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + b"\0" + p.read_bytes())
    return h.hexdigest()


def test_zero_spread_gives_centroid():
    r = generate(cluster_spec(centroid=[101, 55, 94], spread_sq=0, traces=1))
    assert [e.size for e in r.traces[0].events] == [101, 55, 94]


def test_zero_spread_fractional_centroid_rounds():
    assert draw_first_triple(rng_for(0, 0), [100.4, 55.6, 0.2], 0.0) == (100, 56, 0)


def test_first_triples_inside_ball():
    r = generate(cluster_spec(seed=9, traces=300, posts_per_trace=5))
    for t in r.traces:
        assert len(t.events) == 5 and len({e.server_key for e in t.events}) == 1
        assert distance_sq([e.size for e in t.events[:3]], (900, 800, 775)) <= 250000
        assert all(e.size >= 0 for e in t.events)


@pytest.mark.parametrize("seed", range(5))
def test_fit_respects_spread(seed):
    r = generate(cluster_spec(seed=seed, spread_sq=274370, traces=150))
    m = fit([extract_learning_sample(t) for t in r.traces], "locky")
    assert m.d_max_sq <= 274370


def test_fit_on_train_split_respects_spread():
    r = generate(cluster_spec(seed=4, spread_sq=90000, traces=60, holdout=20))
    assert len(r.split("train")) == 40 and len(r.split("holdout")) == 20
    m = fit([extract_learning_sample(t) for t in r.split("train")], "locky")
    assert m.d_max_sq <= 90000


def test_tighten_cluster_leaves_compliant_points():
    pts = np.array([[10, 10, 10], [12, 10, 10], [10, 12, 10]], dtype=float)
    np.testing.assert_array_equal(tighten_cluster(pts, (11, 11, 10), 100.0, 3), pts)


def test_label_fidelity():
    spread = 40000
    r = generate(cluster_spec(seed=2, spread_sq=spread, traces=80))
    m = fit([extract_learning_sample(t) for t in r.traces], "locky").with_limit(spread + 1)
    for t in r.traces:
        assert classify([e.size for e in t.events[:3]], [m]).malicious


def test_benign_sizes_and_labels():
    spec = SynthSpec.from_dict({"seed": 3, "benign": [
        {"name": "web", "keys": 50, "posts_per_key": {"kind": "fixed", "n": 4}, "size": {"mu": 5, "sigma": 1}}]})
    r = generate(spec)
    (t,) = r.traces
    assert t.label is None and r.manifest == [("benign-web", None)]
    per_key = group_sizes(t.events)
    assert len(per_key) == 50 and all(len(v) == 4 for v in per_key.values())
    assert all(isinstance(e.size, int) and e.size >= 0 for e in t.events)
    assert [e.t for e in t.events] == sorted(e.t for e in t.events)


def test_desk_scale_benign_shapes():
    r = generate(SynthSpec.load(SPECS / "locky_desk_scale.json"))
    stats = {}
    for t in r.split("benign"):
        per_key = group_sizes(t.events)
        stats[t.trace_id] = (len(t.events), sum(max(0, len(v) - 2) for v in per_key.values()), len(per_key))
    assert stats == {"benign-alexa": (22579, 11950, 8187), "benign-maccdc": (17249, 15862, 761)}
    assert len(r.split("train")) == 150 and len(r.split("holdout")) == 100


@pytest.mark.parametrize("keys,posts,triples", [(10, 10, 0), (10, 20, 0), (10, 30, 10), (3, 100, 94), (5, 9, 2)])
def test_shape_allocation_exact(keys, posts, triples):
    counts = shape_allocation(rng_for(0, 0), keys, posts, triples)
    assert len(counts) == keys and sum(counts) == posts and min(counts) >= 1
    assert sum(max(0, n - 2) for n in counts) == triples


@pytest.mark.parametrize("keys,posts,triples", [(10, 9, 0), (10, 21, 0), (2, 10, 0), (1, 4, 3)])
def test_shape_allocation_impossible(keys, posts, triples):
    with pytest.raises(ValueError):
        shape_allocation(rng_for(0, 0), keys, posts, triples)


def test_spec_validation():
    with pytest.raises(ValueError):
        cluster_spec(posts_per_trace=2)
    with pytest.raises(ValueError):
        cluster_spec(traces=0)
    with pytest.raises(ValueError):
        cluster_spec(holdout=11)
    with pytest.raises(ValueError):
        SynthSpec.from_dict({"seed": 1, "benign": [
            {"name": "x", "keys": 1, "posts_per_key": {"kind": "zipf"}, "size": {"mu": 1, "sigma": 1}}]})


def test_generate_is_deterministic():
    spec = SynthSpec.load(SPECS / "small_demo.json")
    assert generate(spec).traces == generate(spec).traces
    other = SynthSpec.load(SPECS / "small_demo.json")
    other.seed += 1
    assert generate(other).traces != generate(spec).traces


def test_streams_are_per_trace():
    # adding traces to a cluster does not disturb the earlier ones' later POSTs
    a = generate(cluster_spec(seed=5, traces=5, posts_per_trace=6, spread_sq=0))
    b = generate(cluster_spec(seed=5, traces=8, posts_per_trace=6, spread_sq=0))
    for ta, tb in zip(a.traces, b.traces):
        assert [e.size for e in ta.events] == [e.size for e in tb.events]


def rendered_events(path):
    events, _ = extract_post_events(read_pcap(path))
    return events


def test_render_round_trip(tmp_path):
    r = generate(cluster_spec(seed=6, traces=1))
    (trace,) = r.traces
    render_pcap([trace], tmp_path / "t.pcap")
    assert rendered_events(tmp_path / "t.pcap") == trace.events


@pytest.mark.parametrize("segment_size", [1, 7, 64, 1460])
def test_shuffle_matches_in_order(tmp_path, segment_size):
    spec = SynthSpec.load(SPECS / "small_demo.json")
    traces = generate(spec).traces[:3]
    render_pcap(traces, tmp_path / "a.pcap", seed=1, segment_size=segment_size)
    render_pcap(traces, tmp_path / "b.pcap", seed=1, segment_size=segment_size, shuffle=True)
    expected = [e for t in traces for e in t.events]
    assert rendered_events(tmp_path / "a.pcap") == expected
    assert rendered_events(tmp_path / "b.pcap") == expected


def test_round_trip_size_sequences(tmp_path):
    spec = SynthSpec.load(SPECS / "small_demo.json")
    r = generate(spec)
    benign = r.split("benign")[0]
    render_pcap([benign], tmp_path / "b.pcap", segment_size=300, shuffle=True)
    assert group_sizes(rendered_events(tmp_path / "b.pcap")) == group_sizes(benign.events)


def test_zero_traces_header_only(tmp_path):
    assert render_pcap([], tmp_path / "empty.pcap") == 0
    data = (tmp_path / "empty.pcap").read_bytes()
    assert len(data) == 24 and data[:4] == bytes.fromhex("d4c3b2a1")
    assert list(read_pcap(tmp_path / "empty.pcap")) == []


@pytest.mark.parametrize("fmt", ["pcap", "events"])
def test_write_dataset(tmp_path, fmt):
    spec = SynthSpec.load(SPECS / "small_demo.json")
    r = generate(spec)
    write_dataset(r, tmp_path, spec, fmt)
    entries = read_manifest(tmp_path / "manifest.txt")
    assert [(e.path.stem, e.label) for e in entries] == r.manifest
    loaded = load_manifest(tmp_path / "manifest-holdout.txt")
    assert [t.label for t in loaded] == ["locky"] * 15 + ["cryptowall"] * 15
    by_id = r.by_id()
    for t in loaded:
        original = by_id[Path(t.trace_id).stem].events
        # the fixture format has no IP column
        assert [(e.t, e.server_key, e.size) for e in t.events] == [(e.t, e.server_key, e.size) for e in original]


def test_write_dataset_byte_identical(tmp_path):
    spec = SynthSpec.load(SPECS / "small_demo.json")
    for d in ("a", "b"):
        write_dataset(generate(spec), tmp_path / d, spec)
    assert digest_tree(tmp_path / "a") == digest_tree(tmp_path / "b")


def test_spec_files_parse():
    for p in SPECS.glob("*.json"):
        SynthSpec.from_dict(json.loads(p.read_text()))
