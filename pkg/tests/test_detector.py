import json
import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ransomwatch.detector import (
    FamilyModel, ModelError, classify, distance_sq, distances_sq, dump_model, load_model, save_model,
)

LOCKY_CENTROID = (900.0, 800.0, 775.0)


def model(family="locky", centroid=LOCKY_CENTROID, limit=400.0):
    return FamilyModel(family, tuple(centroid), 0.0, limit, limit, trained_on=1)


def test_worked_example_distance():
    assert distance_sq([910, 810, 770], LOCKY_CENTROID) == 225
    assert math.sqrt(225) == 15


def test_identity_and_345():
    assert distance_sq([4, 5, 6], [4, 5, 6]) == 0
    assert distance_sq([0, 0, 0], [3, 4, 0]) == 25


def test_classify_worked_example():
    v = classify([910, 810, 770], [model()])
    assert v.malicious and v.family == "locky" and v.distance_sq == 225


def test_boundary_is_benign():
    # (920-900)^2 = 400 exactly
    v = classify([920, 800, 775], [model()])
    assert not v.malicious and v.distance_sq == 400 and v.family is None


def test_empty_model_list(caplog):
    v = classify([1, 2, 3], [])
    assert not v.malicious and v.distance_sq is None
    assert "no models" in caplog.text


def test_untuned_model_rejected():
    m = FamilyModel("x", (1.0, 1.0, 1.0), 0.0, 1.0)
    with pytest.raises(ModelError):
        classify([1, 1, 1], [m])


def test_closest_matching_family_wins():
    a = model("alpha", (0, 0, 0), 100)
    b = model("beta", (10, 0, 0), 1000)
    v = classify([4, 0, 0], [b, a])
    assert v.family == "alpha" and v.distance_sq == 16
    # out of alpha's limit but inside beta's
    v = classify([12, 0, 0], [a, b])
    assert v.family == "beta" and v.distance_sq == 4


def test_tie_breaks_by_family_name():
    a = model("zeta", (0, 0, 0), 100)
    b = model("alpha", (2, 0, 0), 100)
    assert classify([1, 0, 0], [a, b]).family == "alpha"
    assert classify([1, 0, 0], [b, a]).family == "alpha"


def test_random_triples_against_independent_arithmetic():
    rng = random.Random(5)
    models = [model("locky", (900.5, 800.25, 775.0), 260000.0), model("cryptowall", (120.0, 60.0, 95.0), 900.0)]
    for _ in range(1000):
        v = [rng.randint(0, 2000) for _ in range(3)]
        verdict = classify(v, models)
        # oracle: exact integer arithmetic on coordinates scaled by 4
        hits = []
        for m in models:
            num = sum((4 * vi - int(4 * ci)) ** 2 for vi, ci in zip(v, m.centroid))
            d = num / 16
            if d < m.d_limit_sq:
                hits.append((d, m.family))
        assert verdict.malicious == bool(hits)
        if hits:
            assert (verdict.distance_sq, verdict.family) == min(hits)


def test_vectorised_distances_match_scalar():
    rng = np.random.default_rng(0)
    pts = rng.integers(0, 5000, (200, 3))
    c = (812.3, 1.5, 4000.0)
    np.testing.assert_array_equal(distances_sq(pts, c), [distance_sq(p, c) for p in pts])
    assert distances_sq(np.empty((0, 3)), c).shape == (0,)


coords = st.integers(0, 100_000)
triples = st.tuples(coords, coords, coords)


@settings(max_examples=200, deadline=None)
@given(triples, triples, st.permutations(range(3)), st.integers(1, 50))
def test_distance_properties(v, c, perm, k):
    d = distance_sq(v, c)
    assert d == distance_sq(c, v)
    assert (d == 0) == (v == c)
    assert distance_sq([v[i] for i in perm], [c[i] for i in perm]) == d
    assert distance_sq([k * x for x in v], [k * x for x in c]) == k * k * d


@settings(max_examples=200, deadline=None)
@given(triples, st.floats(1, 1e10), st.floats(0, 1e10))
def test_raising_limit_never_clears_a_detection(v, limit, extra):
    m = model(centroid=(500, 500, 500), limit=limit)
    if classify(v, [m]).malicious:
        assert classify(v, [model(centroid=(500, 500, 500), limit=limit + extra)]).malicious


def test_model_file_round_trip(tmp_path):
    m = FamilyModel("locky", (900.0, 800.0, 775.0), 6914.0, 274370.0, 260000.0, trained_on=150)
    save_model(m, tmp_path / "m.json")
    assert load_model(tmp_path / "m.json") == m
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["distance_units"] == "squared_bytes"
    assert list(doc)[:5] == ["family", "centroid", "d_min_sq", "d_max_sq", "d_limit_sq"]


def test_untuned_model_file_has_no_limit(tmp_path):
    m = FamilyModel("locky", (1.0, 2.0, 3.0), 0.0, 5.0, trained_on=3)
    assert "d_limit_sq" not in json.loads(dump_model(m))


@pytest.mark.parametrize("units", [None, "bytes", "euclidean"])
def test_units_must_be_squared_bytes(tmp_path, units):
    doc = {"family": "locky", "centroid": [1, 2, 3], "d_min_sq": 0, "d_max_sq": 1, "d_limit_sq": 1, "trained_on": 1}
    if units:
        doc["distance_units"] = units
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ModelError):
        load_model(tmp_path / "m.json")


@pytest.mark.parametrize("patch", [
    {"d_min_sq": 10, "d_max_sq": 5},
    {"d_limit_sq": 0},
    {"d_limit_sq": -3},
    {"centroid": [1, 2]},
    {"family": ""},
    {"d_max_sq": float("inf")},
])
def test_invalid_models_rejected(patch):
    doc = {"family": "locky", "centroid": [1, 2, 3], "d_min_sq": 0, "d_max_sq": 1, "d_limit_sq": 1,
           "distance_units": "squared_bytes", "trained_on": 1}
    doc.update(patch)
    with pytest.raises(ModelError):
        FamilyModel.from_dict(doc)


def test_not_json(tmp_path):
    (tmp_path / "m.json").write_text("{nope")
    with pytest.raises(ModelError):
        load_model(tmp_path / "m.json")
