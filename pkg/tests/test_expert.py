import io
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntp.errors import InvalidTreeError
from ntp.expert import (END, INSIDE, OUTSIDE, PICK, PICK_AND_PLACE, PLACE, REGISTRY, REGISTRY_VERSION, ROOT_PROGRAM,
                        START, ProgramCallNode, TrainingExample, annotate_scoping, decode_labels, demonstrate,
                        execute_plan, is_primitive, plan, rollout_violations, scope_labels, training_example)
from ntp.taskgen import CleanupTask, Family, SortingTask, StackingTask, sample_task
from ntp.worldsim import API_GRIP, API_MOVE_TO, API_RELEASE, reset, replay


def test_registry_layout():
    names = [p.name for p in REGISTRY]
    assert names == ["block_stacking", "object_sorting", "table_cleanup", "pick_and_place", "pick", "place",
                     "move_to", "grip", "release"]
    assert [p.id for p in REGISTRY] == list(range(9))
    assert sum(p.is_primitive for p in REGISTRY) == 3
    assert REGISTRY[API_MOVE_TO].n_args == 1


def test_one_object_sort_call_tree():
    t = SortingTask((2, 0, 0, 0), (1, 0, 0, 0))
    tree = plan(t)
    assert tree.program == ROOT_PROGRAM[Family.SORTING]
    (pnp,) = tree.children
    assert pnp.program == PICK_AND_PLACE
    pick, place = pnp.children
    assert (pick.program, place.program) == (PICK, PLACE)
    assert [(c.program, c.args) for c in pick.children] == [(API_MOVE_TO, (0,)), (API_GRIP, ())]
    assert [(c.program, c.args) for c in place.children] == [(API_MOVE_TO, (t.container_id(2),)), (API_RELEASE, ())]
    assert tree.window == (1, 4) and pick.window == (1, 2) and place.window == (3, 4)


def test_stacking_children_count_equals_pairs():
    t = StackingTask(7, ((0, 1, 2), (3, 4), (6, 5)))
    assert len(plan(t).children) == len(t.pairs()) == 4


def test_minimal_cleanup():
    t = CleanupTask(1, 0)
    spec, trace, log = demonstrate(t, 0)
    assert len(log) == 4 and len(spec) == 4


def test_full_window_labels():
    assert scope_labels((1, 5), (1, 5)) == [START, INSIDE, INSIDE, INSIDE, END]


def test_length_one_window_tie_rule():
    assert scope_labels((1, 5), (3, 3)) == [OUTSIDE, OUTSIDE, START, OUTSIDE, OUTSIDE]
    assert decode_labels(scope_labels((1, 5), (3, 3))) == (3, 3)


def test_bad_windows_raise():
    with pytest.raises(InvalidTreeError):
        scope_labels((2, 4), (1, 3))
    with pytest.raises(InvalidTreeError):
        scope_labels((1, 4), (3, 2))
    tree = ProgramCallNode(0, window=(1, 4), children=[ProgramCallNode(API_GRIP, window=(3, 2))])
    with pytest.raises(InvalidTreeError):
        annotate_scoping(tree, 4)


def random_tree(rng, lo, hi, depth):
    node = ProgramCallNode(3 if depth else API_GRIP, window=(lo, hi))
    if depth == 0 or hi == lo:
        return node
    cuts = sorted(rng.choice(np.arange(lo + 1, hi + 1), size=int(rng.integers(0, min(3, hi - lo) + 1)),
                             replace=False))
    bounds = [lo, *cuts, hi + 1]
    for a, b in zip(bounds[:-1], bounds[1:]):
        node.children.append(random_tree(rng, a, b - 1, depth - 1))
    return node


def test_label_round_trip_over_random_trees():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        tree = random_tree(rng, 1, n, 3)
        for parent, child, labels in annotate_scoping(tree, n):
            assert labels.count(START) == 1
            assert decode_labels(labels) == tuple(np.subtract(child.window, parent.window[0] - 1))
            st_, ed = decode_labels(labels)
            assert all(l == INSIDE for l in labels[st_:ed - 1])


def check_trace_invariants(task, seed):
    tree = plan(task)
    r = execute_plan(task, tree, seed)
    assert task.success(r.final_state)
    assert task.success(replay(reset(task, seed), r.api_log))
    n = len(r.spec)
    assert n == len(r.api_log)
    for node in tree.walk():
        assert 1 <= node.window[0] <= node.window[1] <= n
        prev = node.window[0] - 1
        for c in node.children:
            assert node.window[0] <= c.window[0] <= c.window[1] <= node.window[1]
            assert c.window[0] == prev + 1  # contiguous, ordered, non-overlapping
            prev = c.window[1]
        if node.children:
            assert prev == node.window[1]
    calls = [(s.next_program, s.args) for s in r.trace.steps if s.next_program is not None and is_primitive(s.next_program)]
    logged = [({"move_to": API_MOVE_TO, "grip": API_GRIP, "release": API_RELEASE}[e["api"]], tuple(e["args"]))
              for e in r.api_log]
    assert Counter(calls) == Counter(logged)
    for s in r.trace.steps:
        assert s.eop == (s.next_program is None)
        if not s.eop:
            assert decode_labels(s.labels) == tuple(np.subtract(s.child_window, s.window[0] - 1))
            assert (s.args is not None) == is_primitive(s.next_program)
    annotate_scoping(tree, n)


def test_rollout_violations_clean_and_broken(monkeypatch):
    import ntp.expert as ex
    task = StackingTask(5, ((0, 1, 2), (4, 3)))
    assert rollout_violations(task, 3) == []
    full_plan = ex.plan

    def truncated(t):
        tree = full_plan(t)
        tree.children.pop()  # drop the last sub-task but keep the stale root window
        return tree

    monkeypatch.setattr(ex, "plan", truncated)
    bad = rollout_violations(task, 3)
    assert "expert rollout misses the goal" in bad
    assert any("outside" in b or "partition" in b for b in bad)


@pytest.mark.parametrize("family", list(Family))
def test_expert_oracle_sampled_tasks(family):
    rng = np.random.default_rng(list(Family).index(family))
    for i in range(60):
        check_trace_invariants(sample_task(family, rng, n_blocks=8), i)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32), st.sampled_from(list(Family)), st.integers(0, 2**32))
def test_expert_property(task_seed, family, seed):
    check_trace_invariants(sample_task(family, np.random.default_rng(task_seed), n_blocks=6), seed)


def test_trace_jsonl_round_trip():
    ex = training_example(StackingTask(5, ((1, 0, 4),)), 3, 4)
    buf = io.StringIO()
    ex.to_jsonl(buf)
    lines = buf.getvalue().splitlines()
    assert '"registry": "%s"' % REGISTRY_VERSION in lines[0]
    back = TrainingExample.from_jsonl(lines)
    assert back.task == ex.task and (back.demo_seed, back.exec_seed) == (3, 4)
    np.testing.assert_array_equal(back.spec.frames, ex.spec.frames)
    for a, b in zip(back.trace.steps, ex.trace.steps):
        assert a.to_json() == b.to_json()
    import json
    rec = json.loads(lines[1])
    assert set(rec) == {"window", "program", "invocation", "obs", "targets"}
    assert set(rec["targets"]) == {"eop", "next_program", "child_window", "labels", "args"}


def test_trace_registry_mismatch_rejected():
    ex = training_example(StackingTask(4, ((1, 0),)), 0, 1)
    buf = io.StringIO()
    ex.to_jsonl(buf)
    lines = buf.getvalue().replace(REGISTRY_VERSION, "ntp-registry/0").splitlines()
    with pytest.raises(ValueError):
        TrainingExample.from_jsonl(lines)


def test_one_shot_pair_windows_align():
    t = SortingTask((1, 2, 3, 0), (2, 1, 0, 1))
    ex = training_example(t, 10, 20)
    assert len(ex.spec) == 4 * 4
    assert max(s.window[1] for s in ex.trace.steps) == len(ex.spec)
