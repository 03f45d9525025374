"""Learnable NTP networks and the baseline variants.

Observations are first mapped through a fixed relational featurizer to
per-slot feature rows; the shared slot MLP plus max pooling gives both the
state vector and the embedding of every specification frame.

Two slot-aligned comparison modules relate the current state to the
demonstration: one against the summary of the running program's window
(fed to the core) and one against each individual frame (fed to the
scoping convolution).  Slot i holds the same object in every frame of a
task, so the comparison is a per-slot MLP followed by a max over slots and
does not depend on how many objects the scene contains.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from ntp import numcore as nc
from ntp.errors import ApiArgumentError, ConfigurationError, ShapeError
from ntp.expert import N_PROGRAMS
from ntp.worldsim import API_GRIP, API_MOVE_TO, API_RELEASE, GRASP_TOL, HEIGHT, HOVER, SENTINEL, STACK_TOL, Layout

APIS = (API_MOVE_TO, API_GRIP, API_RELEASE)
API_CLASS = {a: k for k, a in enumerate(APIS)}


class Variant(str, Enum):
    NTP = "NTP"
    NTP_GRU = "NTP_GRU"
    NTP_NOSCOPE = "NTP_NoScope"
    FLAT = "Flat"
    FLAT_GRU = "FlatGRU"

    @property
    def hierarchical(self) -> bool:
        return self in (Variant.NTP, Variant.NTP_GRU, Variant.NTP_NOSCOPE)

    @property
    def recurrent(self) -> bool:
        return self in (Variant.NTP_GRU, Variant.FLAT_GRU)

    @property
    def scoped(self) -> bool:
        return self in (Variant.NTP, Variant.NTP_GRU)


@dataclass
class ModelConfig:
    variant: Variant = Variant.NTP
    state_dim: int = 128
    spec_dim: int = 128
    key_dim: int = 32
    prog_dim: int = 32
    conv_width: int = 3
    conv_channels: int = 64
    slot_hidden: int = 64
    core_hidden: int = 128
    scope_hidden: int = 128
    arg_hidden: int = 64
    rel_hidden: int = 64
    rel_dim: int = 64
    n_programs: int = N_PROGRAMS
    init_seed: int = 0

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.conv_width % 2 != 1 or self.conv_width < 1:
            raise ConfigurationError("conv_width must be a positive odd integer")
        dims = (self.state_dim, self.spec_dim, self.key_dim, self.prog_dim, self.conv_channels,
                self.slot_hidden, self.core_hidden, self.scope_hidden, self.arg_hidden, self.rel_hidden, self.rel_dim)
        if min(dims) < 1 or self.state_dim < 2:
            raise ConfigurationError("all dimensions must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------- featurizer


class RelationalFeaturizer:
    """Fixed per-slot features computed from gripper-relative positions.

    Columns: type one-hot, held, hovered, covered, on_table, supporter-type
    one-hot.  Only relations between entities are used, so the features are
    invariant to translating the whole scene.
    """

    def __init__(self, layout: Layout):
        self.layout = layout
        types = layout.types
        st = np.asarray(layout.slot_types)
        self.n_slots, self.n_types = len(st), len(types)
        self.onehot = np.eye(self.n_types)[st]
        self.is_container = np.array([types[t].kind == "container" for t in st])
        self.radius = np.array([max(types[t].radius, GRASP_TOL) if types[t].kind == "container" else GRASP_TOL
                                for t in st])
        self.inset = np.array([types[t].inset for t in st])
        # accepts[i, k]: slot i's type goes inside slot k's type
        self.accepts = np.array([[st[i] in types[st[k]].accepts for k in range(len(st))] for i in range(len(st))])
        self.dim = 2 * self.n_types + 4

    def __call__(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        f, p = self.many(np.asarray(obs, dtype=float)[None])
        return f[0], p[0]

    def many(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Features [F, S, dim] and presence [F, S] for a stack of observations [F, obs_dim]."""
        obs = np.asarray(obs, dtype=float)
        if obs.ndim != 2 or obs.shape[1] != 3 * self.n_slots + 1:
            raise ShapeError(f"observation width {obs.shape[-1]} != {3 * self.n_slots + 1}")
        nf, S = obs.shape[0], self.n_slots
        d = obs[:, :-1].reshape(nf, S, 3)
        closed = obs[:, -1] < 0.5
        present = np.abs(d).max(axis=2) < SENTINEL / 2
        obj = present & ~self.is_container
        held = obj & closed[:, None] & (np.linalg.norm(d, axis=2) < 1e-6)
        hovered = present & ~held & (np.hypot(d[..., 0], d[..., 1]) < GRASP_TOL) & \
            (np.abs(d[..., 2] + HOVER) < STACK_TOL)

        rel = d[:, :, None, :] - d[:, None, :, :]  # [F, i, k, 3] position of i relative to k
        dxy = np.hypot(rel[..., 0], rel[..., 1])
        dz = rel[..., 2]
        rest = obj & ~held  # objects lying somewhere
        pair = rest[:, :, None] & present[:, None, :] & ~held[:, None, :] & ~np.eye(S, dtype=bool)
        close = dxy < self.radius[None, None, :]
        inside = pair & self.accepts[None] & close & (np.abs(dz + self.inset[None, None, :]) < STACK_TOL)
        on_top = pair & ~self.accepts[None] & close & (np.abs(dz - HEIGHT) < STACK_TOL)
        support = inside | on_top
        has_support = support.any(axis=2)
        first = support.argmax(axis=2)
        sup_type = np.where(has_support[..., None], self.onehot[first], 0.0)
        covered = on_top.any(axis=1)

        feats = np.concatenate([
            self.onehot[None].repeat(nf, axis=0),
            held[..., None], hovered[..., None], covered[..., None],
            (rest & ~has_support)[..., None], sup_type,
        ], axis=2).astype(float)
        feats[~present] = 0.0
        return feats, present


@dataclass
class FrameBatch:
    """Present-slot feature rows of several frames, ready for the set encoder."""

    rows: np.ndarray  # [R, dim]
    seg: np.ndarray  # [R] frame index, non-decreasing
    aperture: np.ndarray  # [n_frames]
    n_frames: int

    @classmethod
    def build(cls, feats: np.ndarray, present: np.ndarray, aperture: np.ndarray) -> "FrameBatch":
        fi, si = np.nonzero(present)
        return cls(feats[fi, si], fi, np.asarray(aperture, dtype=float), feats.shape[0])


class CoreOutputs(NamedTuple):
    key: np.ndarray
    r: float


class ScopeSelection(NamedTuple):
    label_probs: np.ndarray  # [N, 4]
    st: int  # 1-based, relative to the scoped window
    ed: int


def decode_scope(label_probs: np.ndarray) -> tuple[int, int]:
    """Argmax Start / End (lowest index on ties), then clamp ed to at least st."""
    p = np.asarray(label_probs)
    if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] != 4:
        raise ShapeError(f"label matrix of shape {p.shape}")
    st = int(np.argmax(p[:, 0])) + 1
    ed = int(np.argmax(p[:, 1])) + 1
    return st, max(ed, st)


def memory_lookup(key: np.ndarray, m_key: np.ndarray, m_prog: np.ndarray) -> tuple[int, np.ndarray]:
    """Program whose key row has the largest dot product with ``key`` (ties: lowest id)."""
    key = np.asarray(key, dtype=float)
    if key.shape != (m_key.shape[1],):
        raise ShapeError(f"key of shape {key.shape} for memory {m_key.shape}")
    j = int(np.argmax(m_key @ key))
    return j, m_prog[j]


# ----------------------------------------------------------------------------- the model


class NTPModel:
    """Parameters plus differentiable forward pieces for every variant."""

    def __init__(self, config: ModelConfig, layout: Layout):
        self.config = config
        self.layout = layout
        self.featurizer = RelationalFeaturizer(layout)
        self.params = nc.ParamStore()
        self._init_params(np.random.default_rng(config.init_seed))

    @property
    def variant(self) -> Variant:
        return self.config.variant

    def _dense(self, rng, name, n_in, n_out):
        self.params.add(f"{name}.W", nc.glorot(rng, n_in, n_out))
        self.params.add(f"{name}.b", np.zeros(n_out))

    def _init_params(self, rng):
        cfg, F = self.config, self.featurizer.dim
        s, c, m, w = cfg.state_dim, cfg.spec_dim, cfg.conv_channels, cfg.conv_width
        self._dense(rng, "enc1", F, cfg.slot_hidden)
        self._dense(rng, "enc2", cfg.slot_hidden, s - 1)
        self.params.add("tse.conv.W", nc.glorot(rng, s * w, m, (m, s * w)))
        self.params.add("tse.conv.b", np.zeros(m))
        self._dense(rng, "tse.out", m, c)
        self._dense(rng, "relc1", 3 * F, cfg.rel_hidden)
        self._dense(rng, "relc2", cfg.rel_hidden, cfg.rel_dim)
        rel = cfg.rel_dim
        if self.variant.hierarchical:
            self.params.add("M_key", nc.glorot(rng, cfg.n_programs, cfg.key_dim))
            self.params.add("M_prog", nc.glorot(rng, cfg.n_programs, cfg.prog_dim))
            core_in = c + cfg.prog_dim + s + rel
            core_out = cfg.key_dim + 1
        else:
            core_in = c + s + rel
            core_out = len(APIS) + 1
        if self.variant.recurrent:
            H = cfg.core_hidden
            for g in "zrh":
                self.params.add(f"gru.W_{g}", nc.glorot(rng, core_in, H))
                self.params.add(f"gru.U_{g}", nc.glorot(rng, H, H))
                self.params.add(f"gru.b_{g}", np.zeros(H))
        else:
            self._dense(rng, "core1", core_in, cfg.core_hidden)
        self._dense(rng, "core2", cfg.core_hidden, core_out)
        if self.variant.scoped:
            self._dense(rng, "rels1", 2 * F, cfg.rel_hidden)
            self._dense(rng, "rels2", cfg.rel_hidden, rel)
            self.params.add("scope.conv.W", nc.glorot(rng, (s + rel) * w, m, (m, (s + rel) * w)))
            self.params.add("scope.conv.b", np.zeros(m))
            self._dense(rng, "scope1", cfg.prog_dim + m + s, cfg.scope_hidden)
            self._dense(rng, "scope2", cfg.scope_hidden, 4)
        self._dense(rng, "arg1", 2 * F + len(APIS), cfg.arg_hidden)
        self._dense(rng, "arg2", cfg.arg_hidden, 1)

    def _lin(self, x, name, relu=False):
        return nc.dense(x, self.params[f"{name}.W"], self.params[f"{name}.b"], relu_out=relu)

    # -- encoders ---------------------------------------------------------

    def featurize(self, obs: np.ndarray) -> FrameBatch:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        feats, present = self.featurizer.many(obs)
        return FrameBatch.build(feats, present, obs[:, -1])

    def encode_frames(self, fb: FrameBatch) -> nc.Tensor:
        """Embedding [n_frames, state_dim] of every frame in the batch."""
        h = self._lin(nc.Tensor(fb.rows), "enc1", relu=True)
        h = self._lin(h, "enc2", relu=True)
        pooled = nc.segment_max(h, fb.seg, fb.n_frames)
        return nc.concat([pooled, nc.Tensor(fb.aperture[:, None])])

    def encode_state(self, obs: np.ndarray) -> nc.Tensor:
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (self.layout.obs_dim,):
            raise ShapeError(f"observation of shape {obs.shape}, expected ({self.layout.obs_dim},)")
        return nc.reshape(self.encode_frames(self.featurize(obs)), (self.config.state_dim,))

    def encode_spec(self, seq: nc.Tensor, mask: np.ndarray | None = None) -> nc.Tensor:
        """Spec vector [B, spec_dim] from frame embeddings [B, L, state_dim] (or [L, state_dim])."""
        single = seq.data.ndim == 2
        if single:
            seq = nc.reshape(seq, (1,) + seq.shape)
        B, L, _ = seq.shape
        if L < 1:
            raise ShapeError("empty specification")
        mask = np.ones((B, L), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        y = nc.relu(nc.conv1d_temporal(seq, self.params["tse.conv.W"], self.params["tse.conv.b"],
                                       self.config.conv_width, mask))
        c = self._lin(nc.masked_max(y, mask), "tse.out")
        return nc.reshape(c, (self.config.spec_dim,)) if single else c

    # -- core -------------------------------------------------------------

    def relation(self, name: str, parts: Sequence[np.ndarray], present: np.ndarray) -> nc.Tensor:
        """Max over present slots of a per-slot MLP; parts are [N, S, *] arrays, result [N, rel_dim]."""
        fi, si = np.nonzero(present)
        rows = np.concatenate([np.asarray(q)[fi, si] for q in parts], axis=1)
        h = self._lin(self._lin(nc.Tensor(rows), f"{name}1", relu=True), f"{name}2", relu=True)
        return nc.segment_max(h, fi, present.shape[0])

    def window_relation(self, state_feats: np.ndarray, present: np.ndarray, win_max: np.ndarray,
                        win_last: np.ndarray) -> nc.Tensor:
        """Core-side comparison g [N, rel_dim] of states against their program windows."""
        return self.relation("relc", (state_feats, win_max, win_last), present)

    def frame_relation(self, state_feats: np.ndarray, frame_feats: np.ndarray, present: np.ndarray) -> nc.Tensor:
        """Scope-side comparison m [N, rel_dim] of states against single frames."""
        return self.relation("rels", (state_feats, frame_feats), present)

    def core_input(self, c: nc.Tensor, p: nc.Tensor | None, s: nc.Tensor, g: nc.Tensor) -> nc.Tensor:
        return nc.concat([c, p, s, g]) if self.variant.hierarchical else nc.concat([c, s, g])

    def core_forward(self, x: nc.Tensor, h: nc.Tensor | None = None) -> tuple[nc.Tensor, nc.Tensor | None]:
        """Head logits [.., key_dim + 1] (key, eop) or [.., 4] (api, stop) and the new hidden state."""
        if self.variant.recurrent:
            if h is None:
                h = nc.Tensor(np.zeros(x.shape[:-1] + (self.config.core_hidden,)))
            gp = {k: self.params[f"gru.{k}"] for k in nc.GRU_PARAMS}
            h = nc.gru_cell(x, h, gp)
            return self._lin(h, "core2"), h
        return self._lin(self._lin(x, "core1", relu=True), "core2"), None

    def key_logits(self, key: nc.Tensor) -> nc.Tensor:
        return nc.matmul(key, nc.transpose(self.params["M_key"]))

    def program_embedding(self, ids) -> nc.Tensor:
        return nc.take(self.params["M_prog"], np.asarray(ids, dtype=np.int64))

    # -- task specification interpreter -------------------------------------

    def scope_features(self, seq: nc.Tensor, mask: np.ndarray, rel: nc.Tensor) -> nc.Tensor:
        """Conv outputs y [B, L, m] over window embeddings [B, L, state_dim] joined with frame relations [B, L, rel_dim]."""
        return nc.relu(nc.conv1d_temporal(nc.concat([seq, rel]), self.params["scope.conv.W"],
                                          self.params["scope.conv.b"], self.config.conv_width, mask))

    def scope_head(self, y: nc.Tensor, p: nc.Tensor, s: nc.Tensor) -> nc.Tensor:
        L = y.shape[1]
        h = nc.concat([nc.broadcast_rows(p, L), y, nc.broadcast_rows(s, L)])
        return self._lin(self._lin(h, "scope1", relu=True), "scope2")

    def scope_logits(self, seq: nc.Tensor, mask: np.ndarray, rel: nc.Tensor, p: nc.Tensor, s: nc.Tensor) -> nc.Tensor:
        """Per-position label logits [B, L, 4]."""
        return self.scope_head(self.scope_features(seq, mask, rel), p, s)

    def arg_inputs(self, state_feats: np.ndarray, demo_feats: np.ndarray, api: Sequence[int]) -> np.ndarray:
        """Per-slot pointer inputs [B, S, 2F + 3]; demo_feats is the max over the scoped frames."""
        api_oh = np.zeros((len(api), len(APIS)))
        for b, a in enumerate(api):
            if a not in API_CLASS:
                raise ApiArgumentError(f"api id {a} is not a primitive")
            api_oh[b, API_CLASS[a]] = 1.0
        S = state_feats.shape[1]
        return np.concatenate([state_feats, demo_feats, np.repeat(api_oh[:, None, :], S, axis=1)], axis=2)

    def arg_logits(self, inputs: np.ndarray) -> nc.Tensor:
        """Pointer logits [B, S]; the caller masks absent slots."""
        h = self._lin(nc.Tensor(inputs), "arg1", relu=True)
        out = self._lin(h, "arg2")
        return nc.reshape(out, inputs.shape[:2])

    # -- checkpoint helpers ------------------------------------------------

    def meta(self) -> dict:
        return {"config": self.config.to_json(), "layout": self.layout.to_json()}

    def n_parameters(self) -> int:
        return self.params.n_values()


def window_max_features(feats: np.ndarray, present: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Elementwise max of slot features over frames lo..hi (0-based inclusive)."""
    return feats[lo:hi + 1].max(axis=0)


def masked_argmax(logits: np.ndarray, present: np.ndarray) -> int:
    z = np.where(present, logits, -np.inf)
    return int(np.argmax(z))


def load_config_text(text: str) -> ModelConfig:
    """Model section of a structured-text (JSON) config."""
    d = json.loads(text)
    return ModelConfig.from_json(d.get("model", d))
