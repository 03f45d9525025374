"""Recursive program runtime: EOP thresholding, scoping recursion and API dispatch."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from ntp import numcore as nc
from ntp.errors import ConfigurationError
from ntp.expert import N_PROGRAMS, ProgramCallNode, TaskSpecification, is_primitive
from ntp.model import APIS, NTPModel, decode_scope, masked_argmax, memory_lookup
from ntp.worldsim import API_MOVE_TO, WorldState, api_event, observe, step_api


@dataclass(frozen=True)
class RuntimeConfig:
    alpha: float = 0.5
    max_depth: int = 6
    max_api_calls: int = 500
    max_iterations_per_frame: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError("alpha must lie in (0, 1)")
        if min(self.max_depth, self.max_api_calls, self.max_iterations_per_frame) < 1:
            raise ConfigurationError("runtime caps must be positive")


class Termination(str, Enum):
    COMPLETED = "Completed"
    DEPTH_EXCEEDED = "DepthExceeded"
    BUDGET_EXCEEDED = "BudgetExceeded"
    ITERATION_CAP_EXCEEDED = "IterationCapExceeded"


@dataclass
class RunResult:
    success: bool
    api_log: list[dict]
    call_tree: ProgramCallNode
    termination: Termination
    final_state: WorldState
    trace: list[dict] = field(default_factory=list)

    @property
    def n_api_calls(self) -> int:
        return len(self.api_log)


class _Halt(Exception):
    def __init__(self, reason: Termination):
        self.reason = reason


class Policy(Protocol):
    """What the runtime asks of a hierarchical model."""

    def begin(self, spec: TaskSpecification): ...
    def enter(self, ctx, program: int, window: tuple[int, int], parent): ...
    def core(self, ctx, frame, obs: np.ndarray) -> tuple[np.ndarray, float]: ...
    def scope(self, ctx, frame, obs: np.ndarray) -> tuple[int, int]: ...
    def lookup(self, key: np.ndarray) -> int: ...
    def args(self, ctx, frame, api: int, window: tuple[int, int], obs: np.ndarray) -> tuple[int, ...]: ...
    def child_done(self, frame) -> None: ...


EnvHook = Callable[[WorldState, int], WorldState]


def run(program: int, spec: TaskSpecification, env: WorldState, policy, config: RuntimeConfig = RuntimeConfig(), *,
        task=None, hook: EnvHook | None = None, record_trace: bool = False) -> RunResult:
    """Execute ``program`` on ``env`` conditioned on ``spec``.

    ``hook(state, program)`` runs after every dispatched API call and after
    every sub-program returns; it may return a perturbed state. Cap violations end the run and are reported in
    ``termination``; they never raise.
    """
    if not 0 <= program < N_PROGRAMS:
        raise ConfigurationError(f"program id {program} not in registry")
    n = len(spec)
    if n < 1:
        raise ConfigurationError("empty task specification")
    state = env
    api_log: list[dict] = []
    trace: list[dict] = []
    ctx = policy.begin(spec)
    counter = iter(range(10**9))

    def execute(node: ProgramCallNode, depth: int, parent_frame):
        nonlocal state
        frame = policy.enter(ctx, node.program, node.window, parent_frame)
        inv = next(counter)
        for _ in range(config.max_iterations_per_frame):
            obs = observe(state)  # closed loop: re-read every iteration
            key, r = policy.core(ctx, frame, obs)
            rec = {"program": node.program, "window": list(node.window), "invocation": inv,
                   "obs": [float(v) for v in obs], "r": float(r)} if record_trace else None
            if r >= config.alpha:
                if rec is not None:
                    rec.update(eop=True, next_program=None, child_window=None, args=None)
                    trace.append(rec)
                return
            lo, hi = policy.scope(ctx, frame, obs)
            child_prog = policy.lookup(key)
            if is_primitive(child_prog):
                args = policy.args(ctx, frame, child_prog, (lo, hi), obs)
                if rec is not None:
                    rec.update(eop=False, next_program=child_prog, child_window=[lo, hi], args=list(args))
                    trace.append(rec)
                if len(api_log) >= config.max_api_calls:
                    raise _Halt(Termination.BUDGET_EXCEEDED)
                node.children.append(ProgramCallNode(child_prog, tuple(args), (lo, hi)))
                state = step_api(state, child_prog, args)
                api_log.append(api_event(state, child_prog, args))
                if hook is not None:
                    state = hook(state, child_prog)
            else:
                if rec is not None:
                    rec.update(eop=False, next_program=child_prog, child_window=[lo, hi], args=None)
                    trace.append(rec)
                if depth + 1 > config.max_depth:
                    raise _Halt(Termination.DEPTH_EXCEEDED)
                child = ProgramCallNode(child_prog, (), (lo, hi))
                node.children.append(child)
                execute(child, depth + 1, frame)
                if hook is not None:
                    state = hook(state, child_prog)
            policy.child_done(frame)
        raise _Halt(Termination.ITERATION_CAP_EXCEEDED)

    root = ProgramCallNode(program, (), (1, n))
    termination = Termination.COMPLETED
    try:
        execute(root, 1, None)
    except _Halt as halt:
        termination = halt.reason
    success = bool(task.success(state)) if task is not None else False
    return RunResult(success, api_log, root, termination, state, trace)


def run_flat(spec: TaskSpecification, env: WorldState, policy, config: RuntimeConfig = RuntimeConfig(), *,
             task=None, hook: EnvHook | None = None, record_trace: bool = False) -> RunResult:
    """Runtime for non-hierarchical baselines: one API (or stop) per step."""
    if len(spec) < 1:
        raise ConfigurationError("empty task specification")
    state = env
    api_log: list[dict] = []
    trace: list[dict] = []
    ctx = policy.begin(spec)
    root = ProgramCallNode(-1, (), (1, len(spec)))
    termination = Termination.BUDGET_EXCEEDED
    for _ in range(config.max_api_calls + 1):
        obs = observe(state)
        api, stop = policy.step(ctx, obs)
        if stop >= config.alpha:
            termination = Termination.COMPLETED
            break
        if len(api_log) >= config.max_api_calls:
            break
        args = policy.args(ctx, api, obs)
        if record_trace:
            trace.append({"obs": [float(v) for v in obs], "stop": float(stop), "next_program": api, "args": list(args)})
        root.children.append(ProgramCallNode(api, tuple(args), (1, len(spec))))
        state = step_api(state, api, args)
        api_log.append(api_event(state, api, args))
        if hook is not None:
            state = hook(state, api)
    success = bool(task.success(state)) if task is not None else False
    return RunResult(success, api_log, root, termination, state, trace)


def write_trace(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ----------------------------------------------------------------------------- policies


class OraclePolicy:
    """Teacher-forced replay of a ground-truth call tree (keys are one-hot program ids)."""

    class _Frame:
        __slots__ = ("node", "idx")

        def __init__(self, node):
            self.node, self.idx = node, 0

    def __init__(self, tree: ProgramCallNode):
        self.tree = tree

    def begin(self, spec):
        return None

    def enter(self, ctx, program, window, parent):
        if parent is None:
            return self._Frame(self.tree)
        return self._Frame(parent.node.children[parent.idx])

    def _next(self, frame):
        ch = frame.node.children
        return ch[frame.idx] if frame.idx < len(ch) else None

    def core(self, ctx, frame, obs):
        nxt = self._next(frame)
        key = np.zeros(N_PROGRAMS)
        if nxt is None:
            return key, 1.0
        key[nxt.program] = 1.0
        return key, 0.0

    def scope(self, ctx, frame, obs):
        return tuple(self._next(frame).window)

    def lookup(self, key):
        return int(np.argmax(key))

    def args(self, ctx, frame, api, window, obs):
        return tuple(self._next(frame).args)

    def child_done(self, frame):
        frame.idx += 1


class _SpecCache:
    __slots__ = ("frames", "emb", "feats", "present")

    def __init__(self, frames, emb, feats, present):
        self.frames, self.emb, self.feats, self.present = frames, emb, feats, present


class _NeuralFrame:
    __slots__ = ("program", "window", "c", "seq", "h", "p", "obs_key", "s", "g", "obs_feats", "obs_present",
                 "win_max", "win_last")

    def __init__(self, program, window):
        self.program, self.window = program, window
        self.h = None
        self.obs_key = None


class NeuralPolicy:
    """Adapter from ``NTPModel`` (hierarchical variants) to the runtime protocol; no gradients."""

    def __init__(self, model: NTPModel):
        if not model.variant.hierarchical:
            raise ConfigurationError(f"{model.variant.value} is not hierarchical; use FlatPolicy")
        self.model = model
        self.m_key = model.params["M_key"].data
        self.m_prog = model.params["M_prog"].data

    def begin(self, spec):
        with nc.no_grad():
            fb = self.model.featurize(spec.frames)
            emb = self.model.encode_frames(fb).data
        feats, present = self.model.featurizer.many(spec.frames)
        return _SpecCache(spec.frames, emb, feats, present)

    def enter(self, ctx, program, window, parent):
        f = _NeuralFrame(program, window)
        lo, hi = window
        m = self.model
        with nc.no_grad():
            seq = nc.Tensor(ctx.emb[lo - 1:hi][None])
            mask = np.ones((1, hi - lo + 1), dtype=bool)
            f.c = m.encode_spec(seq, mask)
            f.p = nc.Tensor(self.m_prog[program][None])
        f.seq = seq
        f.win_max = ctx.feats[lo - 1:hi].max(axis=0)
        f.win_last = ctx.feats[hi - 1]
        return f

    def _state(self, frame, obs):
        key = obs.tobytes()
        if frame.obs_key != key:
            m = self.model
            frame.obs_feats, frame.obs_present = m.featurizer(obs)
            with nc.no_grad():
                frame.s = m.encode_frames(m.featurize(obs))
                frame.g = m.window_relation(frame.obs_feats[None], frame.obs_present[None], frame.win_max[None],
                                            frame.win_last[None])
            frame.obs_key = key
        return frame.s

    def core(self, ctx, frame, obs):
        m = self.model
        s = self._state(frame, obs)
        with nc.no_grad():
            out, h = m.core_forward(m.core_input(frame.c, frame.p, s, frame.g), frame.h)
        frame.h = h
        K = m.config.key_dim
        z = out.data[0]
        return z[:K].copy(), float(nc._sigmoid(np.asarray(z[K])))

    def label_probs(self, ctx, frame, obs) -> np.ndarray:
        m = self.model
        s = self._state(frame, obs)
        lo, hi = frame.window
        L = hi - lo + 1
        with nc.no_grad():
            rel = m.frame_relation(np.broadcast_to(frame.obs_feats, (L,) + frame.obs_feats.shape),
                                   ctx.feats[lo - 1:hi], np.broadcast_to(frame.obs_present, (L, len(frame.obs_present))))
            logits = m.scope_logits(frame.seq, np.ones((1, L), dtype=bool), nc.reshape(rel, (1,) + rel.shape),
                                    frame.p, s)
        return nc.softmax(logits.data[0])

    def scope(self, ctx, frame, obs):
        lo, hi = frame.window
        if not self.model.variant.scoped:
            return lo, hi  # the child sees the caller's whole specification
        st, ed = decode_scope(self.label_probs(ctx, frame, obs))
        return lo + st - 1, lo + ed - 1

    def lookup(self, key):
        return memory_lookup(key, self.m_key, self.m_prog)[0]

    def args(self, ctx, frame, api, window, obs):
        if api != API_MOVE_TO:
            return ()
        self._state(frame, obs)
        lo, hi = window
        demo = ctx.feats[lo - 1:hi].max(axis=0)
        inputs = self.model.arg_inputs(frame.obs_feats[None], demo[None], [api])
        with nc.no_grad():
            logits = self.model.arg_logits(inputs).data[0]
        return (masked_argmax(logits, frame.obs_present),)

    def child_done(self, frame):
        pass


class FlatPolicy:
    """Adapter for the Flat / FlatGRU baselines."""

    def __init__(self, model: NTPModel):
        if model.variant.hierarchical:
            raise ConfigurationError(f"{model.variant.value} is hierarchical; use NeuralPolicy")
        self.model = model

    def begin(self, spec):
        m = self.model
        with nc.no_grad():
            emb = m.encode_frames(m.featurize(spec.frames))
            c = m.encode_spec(nc.Tensor(emb.data[None]), np.ones((1, len(spec)), dtype=bool))
        feats, _ = m.featurizer.many(spec.frames)
        return {"c": c, "demo": feats.max(axis=0), "last": feats[-1], "h": None}

    def step(self, ctx, obs):
        m = self.model
        feats, present = m.featurizer(obs)
        with nc.no_grad():
            s = m.encode_frames(m.featurize(obs))
            g = m.window_relation(feats[None], present[None], ctx["demo"][None], ctx["last"][None])
            out, h = m.core_forward(m.core_input(ctx["c"], None, s, g), ctx["h"])
        ctx["h"] = h
        z = out.data[0]
        return APIS[int(np.argmax(z[:3]))], float(nc._sigmoid(np.asarray(z[3])))

    def args(self, ctx, api, obs):
        if api != API_MOVE_TO:
            return ()
        feats, present = self.model.featurizer(obs)
        inputs = self.model.arg_inputs(feats[None], ctx["demo"][None], [api])
        with nc.no_grad():
            logits = self.model.arg_logits(inputs).data[0]
        return (masked_argmax(logits, present),)


def policy_for(model: NTPModel):
    return NeuralPolicy(model) if model.variant.hierarchical else FlatPolicy(model)


def run_model(model: NTPModel, root_program: int, spec: TaskSpecification, env: WorldState,
              config: RuntimeConfig = RuntimeConfig(), **kw) -> RunResult:
    if model.variant.hierarchical:
        return run(root_program, spec, env, NeuralPolicy(model), config, **kw)
    return run_flat(spec, env, FlatPolicy(model), config, **kw)
