"""Supervised training on expert traces with an error-proportional curriculum."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from ntp import numcore as nc
from ntp.errors import CheckpointError, ConfigurationError, NonFiniteError, TrainingDivergenceError
from ntp.expert import (END, INSIDE, OUTSIDE, PICK, PICK_AND_PLACE, PRIMITIVES, REGISTRY_VERSION, ROOT_PROGRAM, START,
                        TrainingExample)
from ntp.model import API_CLASS, ModelConfig, NTPModel, RelationalFeaturizer, Variant
from ntp.worldsim import API_MOVE_TO, HOVER, Layout

log = logging.getLogger(__name__)

EMA_DECAY = 0.9
ERROR_FLOOR = 0.05
STOP = -1  # next-program value of steps that end a program (or the whole flat episode)
REST_POSE_PROGRAMS = frozenset(ROOT_PROGRAM.values()) | {PICK_AND_PLACE}


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 10
    batches_per_epoch: int | None = None  # default: one pass worth of steps
    seed: int = 0
    error_floor: float = ERROR_FLOOR
    ema_decay: float = EMA_DECAY
    loss_weights: dict = field(default_factory=lambda: {"program_key_ce": 1.0, "eop_bce": 1.0,
                                                       "scoping_ce": 1.0, "api_arg_ce": 1.0})
    scope_average: bool = True  # average scoping CE over positions (else sum)
    rest_pose_prob: float = 0.5  # see TraceDataset

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown training config keys {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------- dataset


@dataclass
class _Example:
    spec_feats: np.ndarray  # [N, S, F]
    spec_present: np.ndarray  # [N, S]
    spec_aperture: np.ndarray  # [N]


def rest_pose(obs: np.ndarray, fz: RelationalFeaturizer, rng: np.random.Generator) -> np.ndarray:
    """``obs`` seen from a gripper hovering over a random uncovered present slot."""
    feats, present = fz.many(obs[None])
    covered = feats[0, :, fz.n_types + 2] > 0
    k = rng.choice(np.flatnonzero(present[0] & ~covered))
    d = obs[:-1].reshape(-1, 3).copy()
    d[present[0]] -= d[k] + np.array([0.0, 0.0, HOVER])
    return np.r_[d.ravel(), obs[-1]]


class TraceDataset:
    """Flattened trace steps grouped by the program that governs them.

    For hierarchical variants a step belongs to the running program; flat
    variants see one step per API call plus a final stop step, grouped by the
    API they must emit.

    With probability ``rest_pose_prob``, an open-handed step taken before the
    hand has moved in its sub-task (any step of a task root or of
    pick_and_place, the first step of pick) is shown with the gripper resting
    at hover height over a random uncovered slot instead. The expert's choice
    at those steps does not depend on where the empty hand rests, while clean
    traces always leave it over the block just placed.
    """

    def __init__(self, examples: Sequence[TrainingExample], model: NTPModel, rest_pose_prob: float = 0.0,
                 seed: int = 0):
        if not examples:
            raise ConfigurationError("empty dataset")
        if not 0.0 <= rest_pose_prob <= 1.0:
            raise ConfigurationError("rest_pose_prob must lie in [0, 1]")
        rng = np.random.default_rng(seed)
        self.variant = model.variant
        self.layout = model.layout
        fz = model.featurizer
        self.examples: list[_Example] = []
        rows: dict[str, list] = {k: [] for k in ("ex", "program", "lo", "hi", "eop", "next", "clo", "chi",
                                                  "arg", "inv", "t")}
        obs_list = []
        inv_base = 0
        for e_idx, ex in enumerate(examples):
            frames = ex.spec.frames
            feats, present = fz.many(frames)
            self.examples.append(_Example(feats, present, frames[:, -1].copy()))
            n = len(frames)
            steps = ex.trace.steps
            if self.variant.hierarchical:
                t_in_inv: dict[int, int] = {}
                for s in steps:
                    lo, hi = s.window
                    clo, chi = s.child_window if s.child_window else (0, 0)
                    if self.variant is Variant.NTP_NOSCOPE:
                        lo, hi, clo, chi = 1, n, 0, 0
                    t = t_in_inv.get(s.invocation, 0)
                    t_in_inv[s.invocation] = t + 1
                    arg = s.args[0] if s.next_program == API_MOVE_TO else -1
                    self._push(rows, e_idx, s.program, lo, hi, s.eop, STOP if s.eop else s.next_program,
                               clo, chi, arg, inv_base + s.invocation, t)
                    obs = s.obs
                    at_rest = s.program in REST_POSE_PROGRAMS or (s.program == PICK and t == 0)
                    if at_rest and obs[-1] >= 0.5 and rng.random() < rest_pose_prob:
                        obs = rest_pose(obs, fz, rng)
                    obs_list.append(obs)
                inv_base += max(s.invocation for s in steps) + 1
            else:
                t = 0
                for s in steps:
                    if s.next_program in PRIMITIVES:
                        arg = s.args[0] if s.next_program == API_MOVE_TO else -1
                        self._push(rows, e_idx, s.next_program, 1, n, False, s.next_program, 0, 0, arg, inv_base, t)
                        obs_list.append(s.obs)
                        t += 1
                last = steps[-1]
                self._push(rows, e_idx, STOP, 1, n, True, STOP, 0, 0, -1, inv_base, t)
                obs_list.append(last.obs)
                inv_base += 1
        for k, v in rows.items():
            setattr(self, k, np.asarray(v, dtype=np.int64))
        obs = np.asarray(obs_list)
        self.obs_feats, self.obs_present = fz.many(obs)
        self.obs_aperture = obs[:, -1].copy()
        self.groups: OrderedDict[int, np.ndarray] = OrderedDict(
            (int(g), np.flatnonzero(self.program == g)) for g in np.unique(self.program))
        self.errors = {g: 1.0 for g in self.groups}
        self.inv_rows: dict[int, np.ndarray] = {}
        order = np.lexsort((self.t, self.inv))
        bounds = np.flatnonzero(np.r_[True, self.inv[order][1:] != self.inv[order][:-1], True])
        for a, b in zip(bounds[:-1], bounds[1:]):
            self.inv_rows[int(self.inv[order[a]])] = order[a:b]

    @staticmethod
    def _push(rows, *vals):
        for k, v in zip(rows, vals):
            rows[k].append(int(v))

    def __len__(self) -> int:
        return len(self.program)

    def update_errors(self, rows: np.ndarray, per_step: np.ndarray, decay: float = EMA_DECAY) -> None:
        for g in np.unique(self.program[rows]):
            err = float(per_step[self.program[rows] == g].mean())
            self.errors[int(g)] = decay * self.errors[int(g)] + (1.0 - decay) * err


def curriculum_sample(dataset: TraceDataset, rng: np.random.Generator, batch_size: int,
                      floor: float = ERROR_FLOOR) -> np.ndarray:
    """Row indices: programs drawn with probability proportional to error + floor, then uniform steps."""
    if len(dataset) == 0:
        raise ConfigurationError("empty dataset")
    groups = list(dataset.groups)
    w = np.array([dataset.errors[g] + floor for g in groups], dtype=float)
    if not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise ConfigurationError("curriculum weights must be positive")
    picks = rng.choice(len(groups), size=batch_size, p=w / w.sum())
    out = np.empty(batch_size, dtype=np.int64)
    for i, gi in enumerate(picks):
        members = dataset.groups[groups[gi]]
        out[i] = members[rng.integers(len(members))]
    return out


def expand_invocations(dataset: TraceDataset, rows: np.ndarray) -> np.ndarray:
    """Every step of every invocation touched by ``rows`` (recurrent variants train on whole sequences)."""
    invs = sorted(set(int(i) for i in dataset.inv[rows]))
    return np.concatenate([dataset.inv_rows[i] for i in invs])


# ----------------------------------------------------------------------------- batches


def _soft_scope_target(L: int, lo: int, clo: int, chi: int) -> np.ndarray:
    """[L, 4] target; a length-1 child window puts half the mass on Start and half on End."""
    t = np.zeros((L, 4))
    t[:, OUTSIDE] = 1.0
    a, b = clo - lo, chi - lo
    t[a + 1:b] = 0.0
    t[a + 1:b, INSIDE] = 1.0
    t[a] = 0.0
    t[b] = 0.0
    if a == b:
        t[a, START] = t[a, END] = 0.5
    else:
        t[a, START] = 1.0
        t[b, END] = 1.0
    return t


@dataclass
class Batch:
    rows: np.ndarray
    frames: "object"  # model.FrameBatch
    state_idx: np.ndarray  # [B]
    win_idx: np.ndarray  # [B, L]
    win_mask: np.ndarray  # [B, L]
    program: np.ndarray
    eop: np.ndarray
    next_program: np.ndarray
    scope_rows: np.ndarray  # positions (in batch) with a scoping target
    scope_target: np.ndarray  # [Bs, L, 4]
    arg_rows: np.ndarray
    arg_inputs: np.ndarray  # [A, S, 2F+3]
    arg_present: np.ndarray  # [A, S]
    arg_target: np.ndarray  # [A]
    state_feats: np.ndarray = None  # [B, S, F]
    state_present: np.ndarray = None  # [B, S]
    win_max: np.ndarray = None  # [B, S, F] slot features maxed over each row's window
    win_last: np.ndarray = None  # [B, S, F] last frame of each row's window
    rel_state: np.ndarray = None  # [V, S, F] one entry per valid (scope row, window position)
    rel_frame: np.ndarray = None  # [V, S, F]
    rel_present: np.ndarray = None  # [V, S]
    rel_idx: np.ndarray = None  # [Bs, L] index into the V entries, V for padding
    seq_idx: np.ndarray | None = None  # recurrent variants: [n_seq, T] batch positions, -1 pads


def make_batch(dataset: TraceDataset, model: NTPModel, rows: np.ndarray) -> Batch:
    from ntp.model import FrameBatch

    rows = np.asarray(rows, dtype=np.int64)
    B = len(rows)
    lo, hi = dataset.lo[rows], dataset.hi[rows]
    L = int((hi - lo + 1).max())
    # unique frames: state frames first, then the spec frames every window needs
    spec_keys: dict[tuple[int, int], int] = {}
    win_idx = np.zeros((B, L), dtype=np.int64)
    win_mask = np.zeros((B, L), dtype=bool)
    for b, r in enumerate(rows):
        e = int(dataset.ex[r])
        for j in range(lo[b], hi[b] + 1):
            key = (e, j - 1)
            if key not in spec_keys:
                spec_keys[key] = B + len(spec_keys)
            win_idx[b, j - lo[b]] = spec_keys[key]
            win_mask[b, j - lo[b]] = True
    feats = [dataset.obs_feats[rows]]
    pres = [dataset.obs_present[rows]]
    aper = [dataset.obs_aperture[rows]]
    if spec_keys:
        keys = list(spec_keys)
        feats.append(np.stack([dataset.examples[e].spec_feats[j] for e, j in keys]))
        pres.append(np.stack([dataset.examples[e].spec_present[j] for e, j in keys]))
        aper.append(np.array([dataset.examples[e].spec_aperture[j] for e, j in keys]))
    fb = FrameBatch.build(np.concatenate(feats), np.concatenate(pres), np.concatenate(aper))

    state_feats, state_present = dataset.obs_feats[rows], dataset.obs_present[rows]
    win_max = np.stack([dataset.examples[int(dataset.ex[r])].spec_feats[lo[b] - 1:hi[b]].max(axis=0)
                        for b, r in enumerate(rows)])
    win_last = np.stack([dataset.examples[int(dataset.ex[r])].spec_feats[hi[b] - 1] for b, r in enumerate(rows)])

    clo, chi = dataset.clo[rows], dataset.chi[rows]
    scope_rows = np.flatnonzero(clo > 0) if model.variant.scoped else np.zeros(0, dtype=np.int64)
    scope_target = np.zeros((len(scope_rows), L, 4))
    rel_idx = np.zeros((len(scope_rows), L), dtype=np.int64)
    rel_b, rel_j = [], []
    for k, b in enumerate(scope_rows):
        n = hi[b] - lo[b] + 1
        scope_target[k, :n] = _soft_scope_target(n, lo[b], clo[b], chi[b])
        rel_idx[k, :n] = len(rel_b) + np.arange(n)
        rel_b.extend([b] * n)
        rel_j.extend(range(lo[b] - 1, hi[b]))
    rel_idx[~win_mask[scope_rows]] = len(rel_b)
    rel_b = np.asarray(rel_b, dtype=np.int64)
    rel_frame = np.stack([dataset.examples[int(dataset.ex[rows[b]])].spec_feats[j] for b, j in zip(rel_b, rel_j)]) \
        if len(rel_b) else None

    arg_rows = np.flatnonzero(dataset.arg[rows] >= 0)
    arg_inputs = np.zeros((len(arg_rows), dataset.obs_feats.shape[1], 2 * model.featurizer.dim + 3))
    if len(arg_rows):
        demo = []
        for b in arg_rows:
            ex = dataset.examples[int(dataset.ex[rows[b]])]
            a, z = (clo[b], chi[b]) if clo[b] > 0 else (lo[b], hi[b])
            demo.append(ex.spec_feats[a - 1:z].max(axis=0))
        arg_inputs = model.arg_inputs(dataset.obs_feats[rows[arg_rows]], np.stack(demo),
                                      [API_MOVE_TO] * len(arg_rows))
    seq_idx = None
    if model.variant.recurrent:
        inv = dataset.inv[rows]
        uniq = list(dict.fromkeys(int(i) for i in inv))
        T = int(dataset.t[rows].max()) + 1
        seq_idx = -np.ones((len(uniq), T), dtype=np.int64)
        pos = {i: k for k, i in enumerate(uniq)}
        for b, r in enumerate(rows):
            seq_idx[pos[int(inv[b])], dataset.t[r]] = b
    return Batch(rows, fb, np.arange(B), win_idx, win_mask, dataset.program[rows], dataset.eop[rows].astype(float),
                 dataset.next[rows], scope_rows, scope_target, arg_rows, arg_inputs,
                 dataset.obs_present[rows[arg_rows]], dataset.arg[rows[arg_rows]], state_feats, state_present,
                 win_max, win_last, state_feats[rel_b], rel_frame, state_present[rel_b], rel_idx, seq_idx)


# ----------------------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    program_key_ce: float
    eop_bce: float
    scoping_ce: float
    api_arg_ce: float
    total: float
    per_step: np.ndarray = field(repr=False, default=None)
    accuracy: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"program_key_ce": self.program_key_ce, "eop_bce": self.eop_bce, "scoping_ce": self.scoping_ce,
                "api_arg_ce": self.api_arg_ce, "total": self.total}


def forward_heads(model: NTPModel, batch: Batch):
    """Head outputs for a batch: (core logits [B, out], scope logits or None, arg logits or None)."""
    E = model.encode_frames(batch.frames)
    s = nc.take(E, batch.state_idx)
    seq = nc.take(E, batch.win_idx)
    c = model.encode_spec(seq, batch.win_mask)
    p = model.program_embedding(np.where(batch.program >= 0, batch.program, 0)) if model.variant.hierarchical else None
    g = model.window_relation(batch.state_feats, batch.state_present, batch.win_max, batch.win_last)
    x = model.core_input(c, p, s, g)
    if model.variant.recurrent:
        n_seq, T = batch.seq_idx.shape
        B = len(batch.rows)
        x_ext = nc.concat([x, nc.Tensor(np.zeros((1, x.shape[1])))], axis=0)
        h = None
        outs = []
        for t in range(T):
            col = np.where(batch.seq_idx[:, t] >= 0, batch.seq_idx[:, t], B)
            _, h = model.core_forward(nc.take(x_ext, col), h)
            outs.append(h)
        H = nc.concat(outs, axis=0)  # row t * n_seq + k
        where = np.empty(B, dtype=np.int64)
        for k in range(n_seq):
            for t in range(T):
                b = batch.seq_idx[k, t]
                if b >= 0:
                    where[b] = t * n_seq + k
        core = model._lin(nc.take(H, where), "core2")
    else:
        core, _ = model.core_forward(x)
    scope = None
    if len(batch.scope_rows):
        sr = batch.scope_rows
        m = model.frame_relation(batch.rel_state, batch.rel_frame, batch.rel_present)
        m = nc.take(nc.concat([m, nc.Tensor(np.zeros((1, m.shape[1])))], axis=0), batch.rel_idx)
        scope = model.scope_logits(nc.take(seq, sr), batch.win_mask[sr], m, nc.take(p, sr), nc.take(s, sr))
    args = model.arg_logits(batch.arg_inputs) if len(batch.arg_rows) else None
    return core, scope, args


def compute_losses(model: NTPModel, batch: Batch, weights: dict | None = None,
                   scope_average: bool = True) -> tuple[nc.Tensor, LossBreakdown]:
    """Differentiable total plus the per-head breakdown (head means over the steps they apply to)."""
    w = {"program_key_ce": 1.0, "eop_bce": 1.0, "scoping_ce": 1.0, "api_arg_ce": 1.0}
    w.update(weights or {})
    core, scope, args = forward_heads(model, batch)
    B = len(batch.rows)
    per_step = np.zeros(B)
    acc = {}
    terms = []
    vals = {}

    if model.variant.hierarchical:
        K = model.config.key_dim
        eop_logit = nc.reshape(nc.cols(core, K, K + 1), (B,))
        sel = np.flatnonzero(batch.next_program >= 0)
        if len(sel):
            logits = model.key_logits(nc.take(nc.cols(core, 0, K), sel))
            ce = nc.softmax_cross_entropy(logits, batch.next_program[sel])
            acc["program"] = float((logits.data.argmax(axis=1) == batch.next_program[sel]).mean())
    else:
        eop_logit = nc.reshape(nc.cols(core, 3, 4), (B,))
        sel = np.flatnonzero(batch.next_program >= 0)
        if len(sel):
            logits = nc.take(nc.cols(core, 0, 3), sel)
            target = np.array([API_CLASS[int(a)] for a in batch.next_program[sel]])
            ce = nc.softmax_cross_entropy(logits, target)
            acc["program"] = float((logits.data.argmax(axis=1) == target).mean())
    if len(sel):
        per_step[sel] += ce.data
        vals["program_key_ce"] = nc.mul(nc.tsum(ce), 1.0 / len(sel))
    bce = nc.sigmoid_bce(eop_logit, batch.eop)
    per_step += bce.data
    vals["eop_bce"] = nc.mul(nc.tsum(bce), 1.0 / B)
    acc["eop"] = float(((eop_logit.data >= 0) == (batch.eop > 0.5)).mean())

    if scope is not None:
        Bs, L, _ = scope.shape
        mask = batch.win_mask[batch.scope_rows]
        flat = nc.reshape(scope, (Bs * L, 4))
        tgt = batch.scope_target.reshape(Bs * L, 4).copy()
        tgt[~mask.reshape(-1)] = np.array([0, 0, 0, 1.0])  # padding rows are weighted out below
        ce = nc.softmax_cross_entropy(flat, tgt)
        n_valid = mask.sum(axis=1)
        pos_w = mask / (n_valid[:, None] if scope_average else 1.0)
        per_step[batch.scope_rows] += (ce.data.reshape(Bs, L) * pos_w).sum(axis=1)
        vals["scoping_ce"] = nc.weighted_sum(ce, pos_w.reshape(-1) / Bs)
        hits = []
        for k in range(Bs):
            probs = nc.softmax(scope.data[k, :n_valid[k]])
            st, ed = int(np.argmax(probs[:, START])), int(np.argmax(probs[:, END]))
            ed = max(ed, st)
            t = batch.scope_target[k, :n_valid[k]]
            hits.append(st == int(np.argmax(t[:, START])) and ed == int(np.argmax(t[:, END])))
        acc["scope"] = float(np.mean(hits))

    if args is not None:
        ce = nc.softmax_cross_entropy(args, batch.arg_target, batch.arg_present)
        per_step[batch.arg_rows] += ce.data
        vals["api_arg_ce"] = nc.mul(nc.tsum(ce), 1.0 / len(batch.arg_rows))
        pred = np.where(batch.arg_present, args.data, -np.inf).argmax(axis=1)
        acc["args"] = float((pred == batch.arg_target).mean())

    for name, t in vals.items():
        terms.append(nc.mul(t, w[name]) if w[name] != 1.0 else t)
    total = terms[0]
    for t in terms[1:]:
        total = nc.add(total, t)
    if not np.isfinite(total.data).all():
        bad = int(batch.rows[int(np.argmax(~np.isfinite(per_step)))]) if (~np.isfinite(per_step)).any() else -1
        raise NonFiniteError(f"non-finite loss (dataset step {bad})")
    br = LossBreakdown(*(float(vals[k].data) if k in vals else 0.0
                         for k in ("program_key_ce", "eop_bce", "scoping_ce", "api_arg_ce")),
                       float(total.data), per_step, acc)
    return total, br


# ----------------------------------------------------------------------------- training loop


METRIC_FIELDS = ("epoch", "batches", "program_key_ce", "eop_bce", "scoping_ce", "api_arg_ce", "total",
                 "acc_program", "acc_eop", "acc_scope", "acc_args")


class Trainer:
    def __init__(self, model: NTPModel, dataset: TraceDataset, config: TrainConfig):
        self.model, self.dataset, self.config = model, dataset, config
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))
        self.epoch = 0
        self.history: list[dict] = []
        self.last_good: OrderedDict | None = None

    def batches_per_epoch(self) -> int:
        if self.config.batches_per_epoch:
            return self.config.batches_per_epoch
        return max(1, math.ceil(len(self.dataset) / self.config.batch_size))

    def train_step(self) -> LossBreakdown:
        cfg = self.config
        rows = curriculum_sample(self.dataset, self.rng, cfg.batch_size, cfg.error_floor)
        if self.model.variant.recurrent:
            rows = expand_invocations(self.dataset, rows)
        batch = make_batch(self.dataset, self.model, rows)
        total, br = compute_losses(self.model, batch, cfg.loss_weights, cfg.scope_average)
        total.backward()
        nc.adam_step(self.model.params, lr=cfg.lr)
        self.dataset.update_errors(batch.rows, br.per_step, cfg.ema_decay)
        return br

    def train_epoch(self) -> dict:
        sums: dict[str, list[float]] = {}
        n = self.batches_per_epoch()
        self.last_good = self.model.params.state_dict()
        for _ in range(n):
            try:
                br = self.train_step()
            except (NonFiniteError, TrainingDivergenceError):
                self.model.params.load_state_dict(self.last_good)
                self.model.params.zero_grad()
                raise
            for k, v in br.as_dict().items():
                sums.setdefault(k, []).append(v)
            for k, v in br.accuracy.items():
                sums.setdefault("acc_" + k, []).append(v)
        self.epoch += 1
        row = {"epoch": self.epoch, "batches": n}
        for k in METRIC_FIELDS[2:]:
            row[k] = float(np.mean(sums[k])) if k in sums else float("nan")
        self.history.append(row)
        return row

    def fit(self, epochs: int | None = None, metrics_path=None, log_every: int = 1) -> list[dict]:
        for _ in range(epochs if epochs is not None else self.config.epochs):
            row = self.train_epoch()
            if log_every and self.epoch % log_every == 0:
                log.info("epoch %d total %.4f acc %s", self.epoch, row["total"],
                         {k: round(row[k], 3) for k in METRIC_FIELDS[7:]})
            if metrics_path is not None:
                write_metrics_csv(self.history, metrics_path)
        return self.history


def train_epoch(model: NTPModel, dataset: TraceDataset, config: TrainConfig, trainer: Trainer | None = None) -> dict:
    return (trainer or Trainer(model, dataset, config)).train_epoch()


def write_metrics_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(row[k]) if isinstance(row[k], float) else row[k]) for k in METRIC_FIELDS})


# ----------------------------------------------------------------------------- checkpoints


def checkpoint_text(model: NTPModel) -> str:
    meta = {"registry": REGISTRY_VERSION, **model.meta()}
    return nc.dump_params(model.params.state_dict(), meta)


def save_checkpoint(model: NTPModel, path) -> str:
    text = checkpoint_text(model)
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)
    return content_hash(text)


def load_checkpoint(path) -> NTPModel:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_text(text)


def checkpoint_from_text(text: str) -> NTPModel:
    meta, values = nc.parse_params(text)
    if meta.get("registry") != REGISTRY_VERSION:
        raise CheckpointError(f"checkpoint registry {meta.get('registry')!r} != {REGISTRY_VERSION!r}")
    try:
        config = ModelConfig.from_json(meta["config"])
        layout = Layout.from_json(meta["layout"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint metadata: {exc}") from exc
    model = NTPModel(config, layout)
    model.params.load_state_dict(values)
    return model


def content_hash(text: str | bytes) -> str:
    """git-style blob hash of a file's contents."""
    data = text.encode() if isinstance(text, str) else text
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
