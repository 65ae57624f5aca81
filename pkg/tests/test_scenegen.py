import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from caps.core import RngState
from caps.scenegen import (A_MAX, DT, EGO_RADIUS, FAMILIES, T_FUTURE, T_PAST, DatasetError,
                           Scene, SceneParams, SceneValidationError, generate_dataset,
                           generate_scene, kinematics_ok, min_clearance, mixture_counts,
                           read_dataset, write_dataset)


def _largest_remainder(fracs, n):
    """Exact-arithmetic reference apportionment."""
    q = {k: Fraction(v).limit_denominator(10 ** 6) * n for k, v in fracs.items()}
    base = {k: int(v) for k, v in q.items()}
    rem = sorted(q, key=lambda k: -(q[k] - base[k]))   # stable: earlier family wins ties
    for k in rem[:n - sum(base.values())]:
        base[k] += 1
    return base


# -- single scenes -------------------------------------------------------------

@pytest.mark.parametrize("family", FAMILIES)
@pytest.mark.parametrize("seed", range(6))
def test_scene_invariants(family, seed):
    s = generate_scene(family, RngState(seed))
    assert s.ego.past.shape == (T_PAST, 4) and s.ego.future.shape == (T_FUTURE, 4)
    assert min_clearance(s.ego, s.objects) > 0
    assert all(kinematics_ok(t) for t in [s.ego, *s.objects])
    assert np.allclose(s.goal, s.ego.future[-1, :2])
    assert s.route.role == "route_centerline"


@pytest.mark.parametrize("seed", range(8))
def test_stop_behind_stops_with_gap(seed):
    s = generate_scene("stop_behind", RngState(seed))
    assert s.ego.future[-1, 3] == 0.0
    lead = s.objects[0]
    gap = lead.future[-1, 0] - s.ego.future[-1, 0] - lead.radius - EGO_RADIUS
    assert gap >= 2.0


def test_stop_behind_with_lead_gap():
    s = generate_scene("stop_behind", RngState(4), {"lead_gap": 30.0, "ego_speed": 12.0})
    assert s.objects[0].past[-1, 0] == pytest.approx(30.0)
    assert s.ego.past[-1, 3] == pytest.approx(12.0)
    assert s.ego.future[-1, 3] == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_lane_follow_matched_speed_is_steady(seed):
    s = generate_scene("lane_follow", RngState(seed), SceneParams(ego_speed=7.0, lead_speed=7.0))
    assert np.all(np.abs(s.ego.future[:, 3] - 7.0) <= 1.0)


@pytest.mark.parametrize("seed", range(5))
def test_cut_in_cue_visible_in_past(seed):
    s = generate_scene("cut_in", RngState(seed))
    merger = s.objects[0]
    assert merger.past[-1, 3] > 0          # already pulling out at t=0
    assert merger.past[-1, 1] > s.ego.past[-1, 1] + 2.0
    start = merger.past[-1, 1] - s.ego.past[-1, 1]
    assert merger.future[-1, 1] - s.ego.future[-1, 1] < start - 1.5   # moving into the ego lane


def test_same_seed_same_bytes():
    a = generate_scene("cut_in", RngState(11), scene_id=3)
    b = generate_scene("cut_in", RngState(11), scene_id=3)
    assert a.to_json() == b.to_json()
    assert generate_scene("cut_in", RngState(12), scene_id=3).to_json() != a.to_json()


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(FAMILIES), st.integers(0, 2 ** 31))
def test_json_round_trip_is_exact(family, seed):
    s = generate_scene(family, RngState(seed))
    back = Scene.from_dict(json.loads(s.to_json()))
    assert back == s
    assert back.to_json() == s.to_json()
    assert np.array_equal(back.ego.future, s.ego.future)


def test_params_out_of_range_rejected():
    with pytest.raises(SceneValidationError):
        generate_scene("lane_follow", RngState(0), {"ego_speed": 40.0})
    with pytest.raises(SceneValidationError):
        generate_scene("merge", RngState(0))


def test_generated_speeds_respect_acceleration_bound():
    for seed in range(10):
        for fam in FAMILIES:
            v = generate_scene(fam, RngState(seed)).ego.future[:, 3]
            assert np.all(np.abs(np.diff(v)) <= A_MAX * DT + 1e-6)


# -- datasets ------------------------------------------------------------------

def test_mixture_counts_examples():
    assert mixture_counts({"lane_follow": 1.0}, 10) == {"lane_follow": 10}
    assert mixture_counts({"lane_follow": .85, "stop_behind": .10, "cut_in": .05}, 2000) == \
        {"lane_follow": 1700, "stop_behind": 200, "cut_in": 100}
    third = 1 / 3
    assert mixture_counts({"lane_follow": third, "stop_behind": third, "cut_in": third}, 3) == \
        {"lane_follow": 1, "stop_behind": 1, "cut_in": 1}


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 50), min_size=3, max_size=3), st.integers(1, 3000))
def test_mixture_counts_matches_exact_reference(raw, n):
    total = sum(raw)
    fracs = dict(zip(FAMILIES, [r / total for r in raw]))
    got = mixture_counts(fracs, n)
    assert sum(got.values()) == n
    ref = _largest_remainder(fracs, n)
    assert got == ref


def test_mixture_errors():
    with pytest.raises(DatasetError):
        mixture_counts({"lane_follow": 0.5}, 10)
    with pytest.raises(DatasetError):
        mixture_counts({"bogus": 1.0}, 10)


def test_dataset_round_trip(tmp_path):
    scenes, man = generate_dataset({"lane_follow": .5, "stop_behind": .25, "cut_in": .25}, 12, 5,
                                   tmp_path / "d")
    back, man2 = read_dataset(tmp_path / "d")
    assert man2.counts == man.counts == {"lane_follow": 6, "stop_behind": 3, "cut_in": 3}
    assert sorted(back, key=lambda s: s.scene_id) == sorted(scenes, key=lambda s: s.scene_id)


def test_dataset_is_deterministic(tmp_path):
    generate_dataset({"lane_follow": .8, "cut_in": .2}, 10, 9, tmp_path / "a")
    generate_dataset({"lane_follow": .8, "cut_in": .2}, 10, 9, tmp_path / "b")
    for f in ("manifest.json", "scenes.jsonl"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_truncated_line_names_index(tmp_path):
    scenes, man = generate_dataset({"lane_follow": 1.0}, 5, 0)
    write_dataset(tmp_path, scenes, man)
    p = tmp_path / "scenes.jsonl"
    text = p.read_text()
    p.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetError, match="line 5"):
        read_dataset(tmp_path)


def test_count_mismatch(tmp_path):
    scenes, man = generate_dataset({"lane_follow": 1.0}, 5, 0)
    write_dataset(tmp_path, scenes[:4], man)
    with pytest.raises(DatasetError, match="n=5"):
        read_dataset(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetError, match="manifest.json"):
        read_dataset(tmp_path)
