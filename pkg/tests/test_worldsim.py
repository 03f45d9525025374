import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntp.errors import ApiArgumentError, UnsatisfiableLayoutError
from ntp.taskgen import SortingTask, StackingTask, success
from ntp.worldsim import (API_GRIP, API_MOVE_TO, API_RELEASE, HEIGHT, HOVER, SENTINEL, TABLE, apply_adversary,
                          observe, read_api_log, replay, reset, stacks, step_api, support_forest_ok, translate,
                          write_api_log)

ONE_EACH = SortingTask((0, 1, 2, 3), (1, 1, 1, 1))


def held_count(state):
    return sum(o.supported_by is None for o in state.objects)


def test_reset_sorting_four_objects():
    w = reset(ONE_EACH, 7)
    assert len(w.objects) == 4 and len(w.containers) == 4
    assert not w.gripper.closed and w.gripper.held is None


def test_reset_is_deterministic():
    assert reset(ONE_EACH, 7) == reset(ONE_EACH, 7)
    assert reset(ONE_EACH, 7) != reset(ONE_EACH, 8)


def test_reset_eight_blocks_separated():
    w = reset(StackingTask(8, ((0, 1),)), 3)
    assert len(w.objects) == 8
    assert all(o.supported_by == TABLE for o in w.objects)
    for a, b in itertools.combinations(w.objects, 2):
        assert a.position.xy_dist(b.position) >= 0.01


def test_reset_positions_inside_workspace():
    w = reset(SortingTask((0, 0, 1, 1), (10, 10, 10, 10)), 11)
    for e in (*w.objects, *w.containers):
        assert all(-1.0 <= v <= 1.0 for v in e.position)
        assert e.position.z >= 0


def test_reset_any_64bit_seed():
    w = reset(ONE_EACH, 2**64 - 1)
    assert len(w.objects) == 4


def test_unsatisfiable_layout_raises():
    class Crowded:
        def layout(self):
            return StackingTask(400, ((0, 1),)).layout()

        def scene(self):
            return StackingTask(400, ((0, 1),)).scene()

    with pytest.raises(UnsatisfiableLayoutError):
        reset(Crowded(), 0)


def test_move_to_hovers_above_target():
    w = reset(StackingTask(4, ((0, 1),)), 0)
    w2 = step_api(w, API_MOVE_TO, (2,))
    assert w2.gripper.position == w.obj(2).position.offset(dz=HOVER)
    assert w2.step_count == w.step_count + 1


def test_grip_above_object_holds_it():
    w = step_api(reset(StackingTask(4, ((0, 1),)), 0), API_MOVE_TO, (2,))
    w = step_api(w, API_GRIP, ())
    assert w.gripper.held == 2 and w.gripper.closed
    assert w.obj(2).position == w.gripper.position


def test_grip_with_nothing_below_records_miss():
    w = reset(StackingTask(4, ((0, 1),)), 0)
    w = step_api(w, API_GRIP, ())
    assert w.gripper.held is None and w.last_grasp_miss


def test_release_into_container_satisfies_one_object_sort():
    task = SortingTask((1, 0, 0, 0), (1, 0, 0, 0))
    w = reset(task, 4)
    obj, box = task.object_id(0, 0), task.container_id(1)
    for api, args in [(API_MOVE_TO, (obj,)), (API_GRIP, ()), (API_MOVE_TO, (box,)), (API_RELEASE, ())]:
        w = step_api(w, api, args)
    assert w.obj(obj).supported_by == box and w.gripper.held is None
    assert success(w, task)


def test_wrong_container_fails_sort():
    task = SortingTask((1, 0, 0, 0), (1, 0, 0, 0))
    w = reset(task, 4)
    for api, args in [(API_MOVE_TO, (0,)), (API_GRIP, ()), (API_MOVE_TO, (task.container_id(2),)), (API_RELEASE, ())]:
        w = step_api(w, api, args)
    assert not success(w, task)


def test_release_stacks_on_block():
    w = reset(StackingTask(3, ((0, 1),)), 1)
    for api, args in [(API_MOVE_TO, (1,)), (API_GRIP, ()), (API_MOVE_TO, (0,)), (API_RELEASE, ())]:
        w = step_api(w, api, args)
    b0, b1 = w.obj(0), w.obj(1)
    assert b1.supported_by == 0
    assert (b1.position.x, b1.position.y) == (b0.position.x, b0.position.y)
    assert b1.position.z == pytest.approx(b0.position.z + HEIGHT)


def test_invalid_targets_raise():
    w = reset(ONE_EACH, 0)
    with pytest.raises(ApiArgumentError):
        step_api(w, API_MOVE_TO, (5,))  # slot exists in the layout but no object is present
    with pytest.raises(ApiArgumentError):
        step_api(w, API_MOVE_TO, ())
    with pytest.raises(ApiArgumentError):
        step_api(w, API_GRIP, (1,))
    with pytest.raises(ApiArgumentError):
        step_api(w, "teleport", ())


def test_covered_block_cannot_be_gripped():
    w = reset(StackingTask(3, ((0, 1),)), 1)
    for api, args in [(API_MOVE_TO, (1,)), (API_GRIP, ()), (API_MOVE_TO, (0,)), (API_RELEASE, ()),
                      (API_MOVE_TO, (0,)), (API_GRIP, ())]:
        w = step_api(w, api, args)
    assert w.gripper.held is None  # block 1 sits on block 0, 2 cm grasp tolerance misses block 0


def test_adversary_prob_zero_is_identity():
    w = _tower_world()
    rng = np.random.default_rng(0)
    for _ in range(50):
        assert apply_adversary(w, rng, 0.0) is w


def _tower_world():
    w = reset(StackingTask(4, ((0, 1, 2),)), 5)
    for a, b in [(1, 0), (2, 1)]:
        for api, args in [(API_MOVE_TO, (a,)), (API_GRIP, ()), (API_MOVE_TO, (b,)), (API_RELEASE, ())]:
            w = step_api(w, api, args)
    assert [0, 1, 2] in stacks(w)
    return w


def test_adversary_forced_topple_moves_upper_blocks():
    w = _tower_world()
    w2 = apply_adversary(w, np.random.default_rng(1), 1.0)
    moved = {o.id for o, o2 in zip(w.objects, w2.objects) if o != o2}
    assert moved == {1, 2}
    assert all(w2.obj(i).supported_by == TABLE and w2.obj(i).position.z == HEIGHT for i in (1, 2))
    assert w2.obj(0) == w.obj(0) and w2.perturbations == 1
    assert support_forest_ok(w2)


def test_adversary_frequency():
    w = _tower_world()
    rng = np.random.default_rng(123)
    hits = sum(apply_adversary(w, rng, 0.25).perturbations for _ in range(10000))
    assert abs(hits / 10000 - 0.25) <= 0.02


def test_adversary_rejects_bad_probability():
    with pytest.raises(ValueError):
        apply_adversary(_tower_world(), np.random.default_rng(0), 1.5)


def test_observe_gripper_at_object_is_origin():
    w = step_api(step_api(reset(StackingTask(4, ((0, 1),)), 0), API_MOVE_TO, (0,)), API_GRIP, ())
    obs = observe(w)
    np.testing.assert_array_equal(obs[0:3], [0.0, 0.0, 0.0])
    assert obs[-1] == 0.0


def test_observe_sentinel_slots():
    task = SortingTask((0, 1, 2, 3), (1, 1, 1, 1), max_per_category=2)
    obs = observe(reset(task, 0))
    assert len(obs) == 3 * 12 + 1
    for c in range(4):
        np.testing.assert_array_equal(obs[3 * (2 * c + 1): 3 * (2 * c + 2)], [SENTINEL] * 3)
    assert obs[-1] == 1.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0, 0.3),
       st.lists(st.integers(0, 7), max_size=6))
def test_observe_translation_invariant(seed, dx, dy, dz, moves):
    w = reset(StackingTask(8, ((0, 1),)), seed)
    for m in moves:
        w = step_api(w, API_MOVE_TO, (m,))
        w = step_api(w, API_GRIP if w.gripper.held is None else API_RELEASE, ())
    np.testing.assert_allclose(observe(translate(w, dx, dy, dz)), observe(w), atol=1e-12)


_api = st.one_of(st.tuples(st.just(API_MOVE_TO), st.integers(0, 5)),
                 st.tuples(st.sampled_from([API_GRIP, API_RELEASE]), st.none()))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.lists(_api, max_size=30))
def test_random_api_sequences_keep_invariants(seed, calls):
    w = reset(StackingTask(6, ((0, 1),)), seed)
    log = []
    from ntp.worldsim import api_event
    for api, arg in calls:
        args = () if arg is None else (arg,)
        prev = w.step_count
        w = step_api(w, api, args)
        log.append(api_event(w, api, args))
        assert w.step_count == prev + 1
        assert held_count(w) <= 1
        assert (w.gripper.held is None) or w.gripper.closed
        if w.gripper.held is not None:
            assert w.obj(w.gripper.held).position == w.gripper.position
        assert support_forest_ok(w)
        for o in w.objects:
            if o.supported_by not in (None, TABLE):
                sup = w.entity(o.supported_by)
                assert (o.position.x, o.position.y) == (sup.position.x, sup.position.y)
                assert o.position.z == pytest.approx(sup.position.z + HEIGHT)
    assert replay(reset(StackingTask(6, ((0, 1),)), seed), log) == w


def test_api_log_jsonl_round_trip(tmp_path):
    from ntp.expert import demonstrate
    task = StackingTask(4, ((0, 1, 2),))
    _, _, log = demonstrate(task, 9)
    path = tmp_path / "api.jsonl"
    write_api_log(log, path)
    back = read_api_log(path)
    assert back == log
    assert set(back[0]) == {"step", "api", "args", "grasp_miss"}
    assert success(replay(reset(task, 9), back), task)
