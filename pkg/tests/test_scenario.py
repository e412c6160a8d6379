import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clic.scenario import DynamicsLimits, FeatureOverflowError, LibraryFormatError, RoadGeometry, \
    Scenario, ScenarioInvariantError, ScenarioLibrary, check_structure, feature_dim, feature_index, \
    featurize, featurize_library, library_stats, load_library, validate_scenario, write_library

from conftest import make_library, make_scenario


def test_road_geometry():
    road = RoadGeometry()
    assert road.width == pytest.approx(9.6)
    assert [road.lane_of(y) for y in (0.1, 3.3, 9.5)] == [0, 1, 2]
    assert road.lane_center(1) == pytest.approx(4.8)


def test_scenario_is_immutable():
    s = make_scenario()
    with pytest.raises(ValueError):
        s.bv_frames[0, 0, 0] = 1.0


def test_duplicate_ids_rejected():
    with pytest.raises(ScenarioInvariantError, match="unique"):
        make_library([make_scenario("a"), make_scenario("a")])


@pytest.mark.parametrize("mutate, field_name", [
    (lambda s: Scenario(s.id, s.dt, s.av_init, s.bv_init, s.bv_frames[:, :0]), "bv_frames"),
    (lambda s: Scenario(s.id, s.dt, s.av_init, np.zeros((5, 4)), np.zeros((3, 5, 4))), "bv_init"),
    (lambda s: Scenario(s.id, s.dt, s.av_init, s.bv_init, np.zeros((101, 1, 4))), "bv_frames"),
    (lambda s: Scenario(s.id, s.dt, [0, 0, -1, 0], s.bv_init, s.bv_frames), "av_init.v"),
    (lambda s: Scenario(s.id, s.dt, [0, 0, 1, 4.0], s.bv_init, s.bv_frames), "av_init.theta"),
    (lambda s: Scenario(s.id, s.dt, [0, np.nan, 1, 0], s.bv_init, s.bv_frames), "av_init"),
])
def test_structure_violations(mutate, field_name):
    with pytest.raises(ScenarioInvariantError) as exc:
        check_structure(mutate(make_scenario()))
    assert exc.value.field == field_name


def test_validate_flags_acceleration_with_frame_and_vehicle():
    s = make_scenario(bvs=((80, 4.8, 20, 0), (60, 8.0, 20, 0)), horizon=5)
    frames = s.bv_frames.copy()
    frames[2:, 1, 2] = 25.0  # +5 m/s in one 0.04 s step on vehicle 2
    bad = validate_scenario(Scenario(s.id, s.dt, s.av_init, s.bv_init, frames))
    assert len(bad) == 1
    assert (bad[0].frame, bad[0].vehicle, bad[0].quantity) == (3, 2, "acceleration")
    assert bad[0].value == pytest.approx(125.0)


def test_validate_flags_lateral_and_speed():
    s = make_scenario(bvs=((80, 9.7, 41.0, 0),), horizon=2)
    got = {(v.frame, v.quantity) for v in validate_scenario(s)}
    assert (0, "lateral_position") in got and (0, "speed") in got


def test_validate_wraps_heading_differences():
    frames = np.array([[[80.0, 4.8, 0.0, -math.pi + 0.001]]])
    s = Scenario("w", 0.04, [0, 4.8, 0, 0], [[80.0, 4.8, 0.0, math.pi - 0.001]], frames)
    assert validate_scenario(s) == []


def test_validate_clean_scenario():
    assert validate_scenario(make_scenario(horizon=50)) == []


def test_jsonl_round_trip(tmp_path, small_lib):
    write_library(small_lib, tmp_path / "lib.jsonl")
    back = load_library(tmp_path / "lib.jsonl")
    assert back == small_lib
    assert back.packed.bv.tobytes() == small_lib.packed.bv.tobytes()


def test_csv_round_trip(tmp_path, small_lib):
    write_library(small_lib, tmp_path / "lib.csv", fmt="flat_csv")
    back = load_library(tmp_path / "lib.csv", fmt="flat_csv")
    assert len(back) == len(small_lib)
    for a, b in zip(back, small_lib):
        assert a.id == b.id and np.array_equal(a.av_init, b.av_init)
        assert np.array_equal(a.bv_frames, b.bv_frames)


def test_jsonl_bad_record_reports_line(tmp_path, small_lib):
    path = tmp_path / "lib.jsonl"
    write_library(small_lib, path)
    lines = path.read_text().splitlines()
    lines[4] = lines[4][:-10]
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(LibraryFormatError) as exc:
        load_library(path)
    assert exc.value.index == 4


def test_jsonl_bad_version(tmp_path, small_lib):
    path = tmp_path / "lib.jsonl"
    write_library(small_lib, path)
    lines = path.read_text().splitlines()
    head = json.loads(lines[0])
    head["format_version"] = 99
    path.write_text("\n".join([json.dumps(head)] + lines[1:]))
    with pytest.raises(LibraryFormatError, match="format_version"):
        load_library(path)


def test_load_rejects_dynamics_violation(tmp_path):
    s = make_scenario(bvs=((80, 4.8, 20, 0),), horizon=3)
    frames = s.bv_frames.copy()
    frames[1:, 0, 2] = 30.0
    lib = make_library([Scenario("bad", s.dt, s.av_init, s.bv_init, frames)])
    write_library(lib, tmp_path / "lib.jsonl")
    with pytest.raises(ScenarioInvariantError, match="acceleration"):
        load_library(tmp_path / "lib.jsonl")
    assert len(load_library(tmp_path / "lib.jsonl", validate=False)) == 1


def test_load_accepts_custom_limits(tmp_path):
    s = make_scenario(bvs=((80, 4.8, 20, 0),), horizon=3)
    frames = s.bv_frames.copy()
    frames[1:, 0, 2] = 20.3  # 7.5 m/s^2
    lib = make_library([Scenario("x", s.dt, s.av_init, s.bv_init, frames)])
    write_library(lib, tmp_path / "lib.jsonl")
    load_library(tmp_path / "lib.jsonl", limits=DynamicsLimits(a_max=8.0))


# -- featurization ------------------------------------------------------------------

def test_feature_dimensions():
    assert feature_dim() == 2406
    assert feature_dim(2, 10) == 6 * 21
    assert featurize(make_scenario(horizon=100)).shape == (2406,)


def test_feature_layout_and_padding():
    s = make_scenario(bvs=((80, 4.8, 20, 0), (60, 8.0, 22, 0.01)), horizon=7)
    f = featurize(s, normalize=False)
    assert np.array_equal(f[:6], [0, 0, *s.av_init])
    for t in range(1, 8):
        for j in (1, 2):
            base = feature_index(t, j, 0)
            assert np.array_equal(f[base:base + 6], [t, j, *s.bv_frames[t - 1, j - 1]])
    used = {feature_index(t, j, c) for t in range(1, 8) for j in (1, 2) for c in range(6)} | set(range(6))
    unused = np.array(sorted(set(range(2406)) - used))
    assert np.all(f[unused] == 0.0)


def test_feature_normalization():
    s = make_scenario(horizon=3)
    raw, norm = featurize(s, normalize=False), featurize(s)
    i = feature_index(2, 1, 2)
    assert norm[i] == pytest.approx(raw[i] / 200.0)
    assert norm[feature_index(2, 1, 0)] == pytest.approx(2 / 100)


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 6), j=st.integers(0, 1), c=st.integers(0, 3), delta=st.floats(0.01, 1.0))
def test_single_value_perturbation_moves_one_feature(t, j, c, delta):
    s = make_scenario(bvs=((80, 4.8, 20, 0), (60, 8.0, 22, 0.01)), horizon=6)
    frames = s.bv_frames.copy()
    frames[t - 1, j, c] += delta
    diff = featurize(Scenario(s.id, s.dt, s.av_init, s.bv_init, frames), normalize=False) - \
        featurize(s, normalize=False)
    changed = np.flatnonzero(diff)
    assert list(changed) == [feature_index(t, j + 1, 2 + c)]


def test_feature_overflow():
    s = make_scenario(horizon=20)
    with pytest.raises(FeatureOverflowError):
        featurize(s, h_max=10)


def test_library_featurization_matches_single(small_lib):
    x = featurize_library(small_lib)
    for i in (0, 7, 31, 59):
        assert np.array_equal(x[i], featurize(small_lib[i], road=small_lib.road))


def test_packed_repeats_last_frame(small_lib):
    p = small_lib.packed
    i = int(np.argmin(p.horizon))
    h = p.horizon[i]
    assert np.array_equal(p.bv[i, h], p.bv[i, -1])


def test_library_stats(small_lib):
    rep = library_stats(small_lib)
    assert rep.n_scenarios == 60
    assert sum(rep.scenarios_per_bv_count.values()) == 60
    n_states = sum((s.horizon + 1) * s.n_bv for s in small_lib)
    assert rep.histograms["bv_speed"]["n"] == n_states
    assert sum(rep.histograms["bv_speed"]["counts"]) == n_states
    json.loads(rep.to_json())


def test_library_stats_empty():
    with pytest.raises(ValueError):
        library_stats(ScenarioLibrary(()))
