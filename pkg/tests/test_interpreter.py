import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntp.errors import ConfigurationError
from ntp.expert import N_PROGRAMS, PICK_AND_PLACE, ROOT_PROGRAM, demonstrate, execute_plan, is_primitive, plan
from ntp.interpreter import (FlatPolicy, NeuralPolicy, OraclePolicy, RuntimeConfig, Termination, run, run_flat,
                             run_model, write_trace)
from ntp.model import ModelConfig, NTPModel, Variant
from ntp.taskgen import Family, SortingTask, StackingTask, sample_task
from ntp.worldsim import API_GRIP, API_MOVE_TO, API_RELEASE, reset

TASK = StackingTask(4, ((1, 0, 2),))


class Scripted:
    """Test policy: a fixed (program, r) decision per call, always the full window, arg 0."""

    def __init__(self, choose, r=lambda depth, i: 0.0):
        self.choose, self.r = choose, r
        self.observed = []

    def begin(self, spec):
        return None

    def enter(self, ctx, program, window, parent):
        return {"depth": 1 if parent is None else parent["depth"] + 1, "i": 0, "window": window}

    def core(self, ctx, frame, obs):
        self.observed.append(obs.copy())
        key = np.zeros(N_PROGRAMS)
        key[self.choose(frame["depth"], frame["i"])] = 1.0
        return key, self.r(frame["depth"], frame["i"])

    def scope(self, ctx, frame, obs):
        return frame["window"]

    def lookup(self, key):
        return int(np.argmax(key))

    def args(self, ctx, frame, api, window, obs):
        return (0,) if api == API_MOVE_TO else ()

    def child_done(self, frame):
        frame["i"] += 1


def _spec(task=TASK, seed=0):
    return demonstrate(task, seed)[0]


def test_runtime_config_validation():
    with pytest.raises(ConfigurationError):
        RuntimeConfig(alpha=1.0)
    with pytest.raises(ConfigurationError):
        RuntimeConfig(max_depth=0)
    with pytest.raises(ConfigurationError):
        run(42, _spec(), reset(TASK, 0), Scripted(lambda d, i: 7))


@pytest.mark.parametrize("family", list(Family))
def test_oracle_replay_matches_expert(family):
    rng = np.random.default_rng(11)
    for k in range(15):
        task = sample_task(family, rng, n_blocks=6)
        spec, _, _ = demonstrate(task, k)
        tree = plan(task)
        ref = execute_plan(task, tree, 100 + k)
        r = run(ROOT_PROGRAM[task.family], spec, reset(task, 100 + k), OraclePolicy(plan(task)), task=task)
        assert r.termination is Termination.COMPLETED and r.success
        assert r.api_log == ref.api_log


def test_oracle_call_tree_mirrors_plan():
    task = SortingTask((1, 0, 3, 2), (1, 1, 0, 2))
    tree = plan(task)
    r = run(ROOT_PROGRAM[task.family], _spec(task), reset(task, 3), OraclePolicy(tree), task=task)
    assert [n.program for n in r.call_tree.walk()] == [n.program for n in tree.walk()]
    assert [n.window for n in r.call_tree.walk()] == [n.window for n in tree.walk()]


def test_immediate_eop_does_nothing():
    r = run(0, _spec(), reset(TASK, 0), Scripted(lambda d, i: 3, r=lambda d, i: 0.9), task=TASK)
    assert r.termination is Termination.COMPLETED and r.api_log == [] and not r.success


def test_alpha_threshold_is_inclusive():
    r = run(0, _spec(), reset(TASK, 0), Scripted(lambda d, i: 3, r=lambda d, i: 0.5), RuntimeConfig(alpha=0.5))
    assert r.api_log == []


def test_endless_recursion_hits_depth_cap():
    cfg = RuntimeConfig(max_depth=4)
    r = run(0, _spec(), reset(TASK, 0), Scripted(lambda d, i: PICK_AND_PLACE), cfg)
    assert r.termination is Termination.DEPTH_EXCEEDED
    depth, node = 1, r.call_tree
    while node.children:
        node, depth = node.children[0], depth + 1
    assert depth == 4


def test_endless_api_calls_hit_budget():
    cfg = RuntimeConfig(max_api_calls=7, max_iterations_per_frame=100)
    r = run(0, _spec(), reset(TASK, 0), Scripted(lambda d, i: API_GRIP), cfg)
    assert r.termination is Termination.BUDGET_EXCEEDED and r.n_api_calls == 7


def test_iteration_cap_per_frame():
    cfg = RuntimeConfig(max_api_calls=500, max_iterations_per_frame=5)
    r = run(0, _spec(), reset(TASK, 0), Scripted(lambda d, i: API_RELEASE), cfg)
    assert r.termination is Termination.ITERATION_CAP_EXCEEDED and r.n_api_calls == 5


def test_observation_is_reread_after_every_call():
    pol = Scripted(lambda d, i: [API_MOVE_TO, API_GRIP][i] if i < 2 else 0, r=lambda d, i: float(i >= 2))
    r = run(0, _spec(), reset(TASK, 0), pol, task=TASK)
    assert r.n_api_calls == 2 and len(pol.observed) == 3
    assert not np.array_equal(pol.observed[0], pol.observed[1])
    assert pol.observed[2][-1] == 0.0  # gripper closed after grip


def test_hook_runs_after_each_call_and_each_return():
    seen = []

    def hook(state, program):
        seen.append(program)
        return state

    r = run(ROOT_PROGRAM[TASK.family], _spec(), reset(TASK, 1), OraclePolicy(plan(TASK)), task=TASK, hook=hook)
    assert [p for p in seen if is_primitive(p)] == [
        {"move_to": API_MOVE_TO, "grip": API_GRIP, "release": API_RELEASE}[e["api"]] for e in r.api_log]

    def post_order(node):  # sub-programs in the order they return
        for c in node.children:
            yield from post_order(c)
            if not is_primitive(c.program):
                yield c.program

    assert [p for p in seen if not is_primitive(p)] == list(post_order(plan(TASK)))


def test_trace_records_and_jsonl(tmp_path):
    r = run(ROOT_PROGRAM[TASK.family], _spec(), reset(TASK, 1), OraclePolicy(plan(TASK)), task=TASK,
            record_trace=True)
    assert sum(not t["eop"] for t in r.trace) == sum(1 for _ in r.call_tree.walk()) - 1
    assert sum(t["eop"] for t in r.trace) == sum(1 for n in r.call_tree.walk() if n.program not in (6, 7, 8))
    write_trace(r.trace, tmp_path / "t.jsonl")
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert len(lines) == len(r.trace) and json.loads(lines[0])["program"] == ROOT_PROGRAM[TASK.family]


def test_flat_runtime_stop_and_budget():
    class FlatScript:
        def __init__(self, n):
            self.n, self.k = n, 0

        def begin(self, spec):
            return None

        def step(self, ctx, obs):
            self.k += 1
            return API_GRIP, float(self.k > self.n)

        def args(self, ctx, api, obs):
            return ()

    r = run_flat(_spec(), reset(TASK, 0), FlatScript(3))
    assert r.termination is Termination.COMPLETED and r.n_api_calls == 3
    r = run_flat(_spec(), reset(TASK, 0), FlatScript(10**6), RuntimeConfig(max_api_calls=9))
    assert r.termination is Termination.BUDGET_EXCEEDED and r.n_api_calls == 9


def test_policy_variant_mismatch():
    layout = TASK.layout()
    with pytest.raises(ConfigurationError):
        NeuralPolicy(NTPModel(ModelConfig(variant="Flat"), layout))
    with pytest.raises(ConfigurationError):
        FlatPolicy(NTPModel(ModelConfig(variant="NTP"), layout))


@settings(max_examples=12, deadline=None)
@given(st.sampled_from(list(Variant)), st.integers(0, 2**31), st.sampled_from(list(Family)))
def test_random_weight_models_halt_within_caps(variant, seed, family):
    rng = np.random.default_rng(seed)
    task = sample_task(family, rng, n_blocks=5)
    model = NTPModel(ModelConfig(variant=variant, init_seed=seed), task.layout())
    cfg = RuntimeConfig(max_depth=4, max_api_calls=40, max_iterations_per_frame=10)
    r = run_model(model, ROOT_PROGRAM[task.family], _spec(task, seed % 1000), reset(task, seed), cfg, task=task)
    assert r.n_api_calls <= cfg.max_api_calls
    assert isinstance(r.termination, Termination)
    for node in r.call_tree.walk():
        lo, hi = node.window
        assert 1 <= lo <= hi <= len(_spec(task, seed % 1000))
