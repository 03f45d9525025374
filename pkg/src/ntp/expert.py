"""Hard-coded hierarchical expert, demonstrations and annotated execution traces."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from ntp.errors import InvalidTreeError
from ntp.taskgen import CleanupTask, Family, SortingTask, StackingTask, TaskInstance, task_from_json
from ntp.worldsim import (API_GRIP, API_IDS, API_MOVE_TO, API_RELEASE, WorldState, api_event, observe, replay, reset,
                          step_api)

REGISTRY_VERSION = "ntp-registry/1"


class Program(NamedTuple):
    id: int
    name: str
    is_primitive: bool
    n_args: int  # 0, or 1 for a target-index argument


REGISTRY: tuple[Program, ...] = (
    Program(0, "block_stacking", False, 0),
    Program(1, "object_sorting", False, 0),
    Program(2, "table_cleanup", False, 0),
    Program(3, "pick_and_place", False, 0),
    Program(4, "pick", False, 0),
    Program(5, "place", False, 0),
    Program(6, "move_to", True, 1),
    Program(7, "grip", True, 0),
    Program(8, "release", True, 0),
)
N_PROGRAMS = len(REGISTRY)
PROGRAM_IDS = {p.name: p.id for p in REGISTRY}
PICK_AND_PLACE, PICK, PLACE = 3, 4, 5
ROOT_PROGRAM = {Family.STACKING: 0, Family.SORTING: 1, Family.CLEANUP: 2}
PRIMITIVES = frozenset(p.id for p in REGISTRY if p.is_primitive)

# scoping label ids, column order of every label-probability matrix
START, END, INSIDE, OUTSIDE = 0, 1, 2, 3
LABEL_NAMES = ("Start", "End", "Inside", "Outside")


def is_primitive(pid: int) -> bool:
    return pid in PRIMITIVES


@dataclass
class ProgramCallNode:
    program: int
    args: tuple[int, ...] = ()
    window: tuple[int, int] | None = None  # 1-based inclusive, absolute into the root specification
    children: list["ProgramCallNode"] = field(default_factory=list)

    def walk(self) -> Iterator["ProgramCallNode"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def leaves(self) -> list["ProgramCallNode"]:
        return [n for n in self.walk() if is_primitive(n.program)]

    def relative_window(self, parent: "ProgramCallNode") -> tuple[int, int]:
        return self.window[0] - parent.window[0] + 1, self.window[1] - parent.window[0] + 1

    def to_json(self) -> dict:
        return {"program": self.program, "args": list(self.args), "window": list(self.window or ()),
                "children": [c.to_json() for c in self.children]}


def _pnp(obj: int, target: int) -> ProgramCallNode:
    pick = ProgramCallNode(PICK, children=[ProgramCallNode(API_MOVE_TO, (obj,)), ProgramCallNode(API_GRIP)])
    place = ProgramCallNode(PLACE, children=[ProgramCallNode(API_MOVE_TO, (target,)), ProgramCallNode(API_RELEASE)])
    return ProgramCallNode(PICK_AND_PLACE, children=[pick, place])


def plan(task: TaskInstance) -> ProgramCallNode:
    """Call tree the expert executes; a pure function of the task (targets are ids, not poses)."""
    root = ProgramCallNode(ROOT_PROGRAM[task.family])
    if isinstance(task, StackingTask):
        moves = task.pairs()
    elif isinstance(task, SortingTask):
        moves = [(task.object_id(c, k), task.container_id(task.mapping[c]))
                 for c in range(len(task.counts)) for k in range(task.counts[c])]
    elif isinstance(task, CleanupTask):
        order = list(task.bowl_order)
        moves = [(order[0], task.bin_id)] + [(b, a) for a, b in zip(order, order[1:])]
        moves += [(f, order[-1]) for f in task.fork_ids()]
    else:
        raise TypeError(task)
    root.children = [_pnp(a, b) for a, b in moves]
    _assign_windows(root)
    return root


def _assign_windows(root: ProgramCallNode) -> None:
    for k, leaf in enumerate(root.leaves(), start=1):
        leaf.window = (k, k)

    def span(node):
        if node.children:
            for c in node.children:
                span(c)
            node.window = (node.children[0].window[0], node.children[-1].window[1])
        elif node.window is None:
            # childless non-primitive (empty task) gets a degenerate window fixed up by the caller
            node.window = (1, 1)

    span(root)


@dataclass
class TaskSpecification:
    frames: np.ndarray  # [N, obs_dim]

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TraceStep:
    program: int
    window: tuple[int, int]  # absolute 1-based window of the running program
    obs: np.ndarray
    invocation: int  # index of the program frame this step belongs to
    eop: bool
    next_program: int | None = None
    child_window: tuple[int, int] | None = None
    args: tuple[int, ...] | None = None

    @property
    def labels(self) -> list[int] | None:
        if self.child_window is None:
            return None
        return scope_labels(self.window, self.child_window)

    def to_json(self) -> dict:
        return {
            "window": list(self.window), "program": self.program, "invocation": self.invocation,
            "obs": [float(v) for v in self.obs],
            "targets": {
                "eop": self.eop, "next_program": self.next_program,
                "child_window": list(self.child_window) if self.child_window else None,
                "labels": self.labels, "args": list(self.args) if self.args is not None else None,
            },
        }

    @classmethod
    def from_json(cls, d: dict) -> "TraceStep":
        t = d["targets"]
        return cls(d["program"], tuple(d["window"]), np.asarray(d["obs"], dtype=float), d["invocation"], t["eop"],
                   t["next_program"], tuple(t["child_window"]) if t["child_window"] else None,
                   tuple(t["args"]) if t["args"] is not None else None)


@dataclass
class ExecutionTrace:
    steps: list[TraceStep]

    def __len__(self) -> int:
        return len(self.steps)

    def api_calls(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(s.next_program, s.args) for s in self.steps if s.next_program in PRIMITIVES]


def scope_labels(parent: tuple[int, int], child: tuple[int, int]) -> list[int]:
    """Per-position labels over the parent window for one child window (both absolute)."""
    n = parent[1] - parent[0] + 1
    a, b = child[0] - parent[0], child[1] - parent[0]
    if n <= 0 or b < a:
        raise InvalidTreeError(f"empty window {parent} / {child}")
    if a < 0 or b >= n:
        raise InvalidTreeError(f"child window {child} escapes parent {parent}")
    labels = [OUTSIDE] * n
    labels[a + 1:b] = [INSIDE] * (b - a - 1)
    labels[b] = END
    labels[a] = START  # length-1 windows: Start wins the tie
    return labels


def decode_labels(labels: Sequence[int]) -> tuple[int, int]:
    """1-based (st, ed) from a ground-truth label sequence."""
    st = list(labels).index(START) + 1
    ed = list(labels).index(END) + 1 if END in labels else st
    return st, ed


def annotate_scoping(tree: ProgramCallNode, n: int) -> list[tuple[ProgramCallNode, ProgramCallNode, list[int]]]:
    """Label every parent->child edge over the parent's window."""
    if n < 1 or tree.window is None or tree.window[1] > n:
        raise InvalidTreeError("tree windows exceed the specification")
    out = []
    for node in tree.walk():
        for child in node.children:
            if child.window is None or child.window[1] < child.window[0]:
                raise InvalidTreeError("window of length 0")
            out.append((node, child, scope_labels(node.window, child.window)))
    return out


@dataclass
class Rollout:
    spec: TaskSpecification
    trace: ExecutionTrace
    api_log: list[dict]
    tree: ProgramCallNode
    final_state: WorldState
    initial_state: WorldState


def execute_plan(task: TaskInstance, tree: ProgramCallNode, seed: int) -> Rollout:
    """Run the planned call tree from ``reset(task, seed)`` and record frames and trace steps."""
    state = reset(task, seed)
    initial = state
    frames, api_log, steps = [], [], []
    counter = iter(range(10**9))

    def obs_now():
        return observe(state)

    def run(node: ProgramCallNode):
        nonlocal state
        inv = next(counter)
        for child in node.children:
            step = TraceStep(node.program, node.window, obs_now(), inv, False, child.program, child.window,
                             child.args if is_primitive(child.program) else None)
            steps.append(step)
            if is_primitive(child.program):
                state = step_api(state, child.program, child.args)
                api_log.append(api_event(state, child.program, child.args))
                frames.append(observe(state))
            else:
                run(child)
        steps.append(TraceStep(node.program, node.window, obs_now(), inv, True))

    run(tree)
    if not frames:
        frames.append(observe(state))
    return Rollout(TaskSpecification(np.asarray(frames)), ExecutionTrace(steps), api_log, tree, state, initial)


def demonstrate(task: TaskInstance, seed: int) -> tuple[TaskSpecification, ExecutionTrace, list[dict]]:
    r = execute_plan(task, plan(task), seed)
    if not task.success(r.final_state):
        raise AssertionError(f"expert failed on {task}")
    return r.spec, r.trace, r.api_log


def rollout_violations(task: TaskInstance, seed: int) -> list[str]:
    """Every broken expert invariant for one demonstration; empty when the rollout is sound.

    Checks goal success, success when the API log is replayed from a fresh
    reset, windows that partition their parent in order, trace calls matching
    the log, and labels that decode back to each child window.
    """
    tree = plan(task)
    r = execute_plan(task, tree, seed)
    bad = []
    if not task.success(r.final_state):
        bad.append("expert rollout misses the goal")
    if not task.success(replay(reset(task, seed), r.api_log)):
        bad.append("replayed API log misses the goal")
    n = len(r.spec)
    if n != len(r.api_log):
        bad.append(f"{n} frames for {len(r.api_log)} API calls")
    for node in tree.walk():
        lo, hi = node.window
        if not 1 <= lo <= hi <= n:
            bad.append(f"window {node.window} outside 1..{n}")
        if node.children:
            spans = [c.window for c in node.children]
            if spans[0][0] != lo or spans[-1][1] != hi or any(a[1] + 1 != b[0] for a, b in zip(spans, spans[1:])):
                bad.append(f"children {spans} do not partition {node.window}")
    calls = [(s.next_program, tuple(s.args)) for s in r.trace.steps
             if s.next_program is not None and is_primitive(s.next_program)]
    if calls != [(API_IDS[e["api"]], tuple(e["args"])) for e in r.api_log]:
        bad.append("trace calls differ from the API log")
    for s in r.trace.steps:
        if s.eop != (s.next_program is None):
            bad.append("EOP flag disagrees with next program")
        elif not s.eop:
            if decode_labels(s.labels) != (s.child_window[0] - s.window[0] + 1, s.child_window[1] - s.window[0] + 1):
                bad.append(f"labels of {s.child_window} in {s.window} do not round-trip")
            if (s.args is not None) != is_primitive(s.next_program):
                bad.append("arguments on a non-primitive call")
    return bad


@dataclass
class TrainingExample:
    """One-shot pair: specification from one rollout, trace executed in another layout."""

    task: TaskInstance
    spec: TaskSpecification
    trace: ExecutionTrace
    demo_seed: int
    exec_seed: int

    def to_jsonl(self, fh) -> None:
        header = {"task": self.task.to_json(), "demo_seed": self.demo_seed, "exec_seed": self.exec_seed,
                  "spec": [[float(v) for v in f] for f in self.spec.frames], "registry": REGISTRY_VERSION}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in self.trace.steps:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, lines: Sequence[str]) -> "TrainingExample":
        header = json.loads(lines[0])
        if header.get("registry") != REGISTRY_VERSION:
            raise ValueError(f"trace registry {header.get('registry')} != {REGISTRY_VERSION}")
        steps = [TraceStep.from_json(json.loads(l)) for l in lines[1:] if l.strip()]
        return cls(task_from_json(header["task"]), TaskSpecification(np.asarray(header["spec"], dtype=float)),
                   ExecutionTrace(steps), header["demo_seed"], header["exec_seed"])


def training_example(task: TaskInstance, demo_seed: int, exec_seed: int) -> TrainingExample:
    tree = plan(task)
    demo = execute_plan(task, tree, demo_seed)
    run = execute_plan(task, tree, exec_seed)
    if not (task.success(demo.final_state) and task.success(run.final_state)):
        raise AssertionError(f"expert failed on {task}")
    return TrainingExample(task, demo.spec, run.trace, demo_seed, exec_seed)
