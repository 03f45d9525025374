"""Finite-difference checks of every differentiable op and of each variant's full training loss."""
from __future__ import annotations

import numpy as np

from ntp import numcore as nc

TOLERANCE = 1e-4

# small widths keep the full-loss checks exhaustive enough yet quick
TINY_MODEL = dict(state_dim=6, spec_dim=5, key_dim=4, prog_dim=3, conv_channels=4, slot_hidden=5, core_hidden=6,
                  scope_hidden=5, arg_hidden=4, rel_hidden=4, rel_dim=3)


def _p(rng, *shape):
    return nc.Tensor(rng.normal(size=shape), requires_grad=True)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function, parameter list)."""
    cases = {}
    x, w, b = _p(rng, 3, 5), _p(rng, 5, 4), _p(rng, 4)
    c = rng.normal(size=(3, 4))
    cases["dense"] = (lambda: nc.weighted_sum(nc.dense(x, w, b), c), [x, w, b])
    cases["dense_relu"] = (lambda: nc.weighted_sum(nc.dense(x, w, b, relu_out=True), c), [x, w, b])
    a = _p(rng, 4, 3)
    c43 = rng.normal(size=(4, 3))
    cases["sigmoid"] = (lambda: nc.weighted_sum(nc.sigmoid(a), c43), [a])
    cases["tanh"] = (lambda: nc.weighted_sum(nc.tanh(a), c43), [a])
    cases["mul_add_neg"] = (lambda: nc.weighted_sum(nc.add(nc.mul(a, a), nc.neg(nc.one_minus(a))), c43), [a])
    seq, cw, cb = _p(rng, 2, 6, 3), _p(rng, 4, 9), _p(rng, 4)
    mask = np.array([[1, 1, 1, 1, 0, 0], [1, 1, 1, 1, 1, 1]], dtype=bool)
    cc = rng.normal(size=(2, 6, 4))
    cases["conv1d_temporal"] = (lambda: nc.weighted_sum(nc.conv1d_temporal(seq, cw, cb, 3, mask), cc),
                                [seq, cw, cb])
    cm = rng.normal(size=(2, 3))
    cases["masked_max"] = (lambda: nc.weighted_sum(nc.masked_max(seq, mask), cm), [seq])
    rows = _p(rng, 7, 3)
    seg = np.array([0, 0, 1, 2, 2, 2, 3])
    cs = rng.normal(size=(4, 3))
    cases["segment_sum"] = (lambda: nc.weighted_sum(nc.segment_sum(rows, seg, 4), cs), [rows])
    cases["segment_max"] = (lambda: nc.weighted_sum(nc.segment_max(rows, seg, 4), cs), [rows])
    idx = np.array([[0, 3], [3, 1]])
    ct = rng.normal(size=(2, 2, 3))
    cases["take"] = (lambda: nc.weighted_sum(nc.take(a, idx), ct), [a])
    v = _p(rng, 3)
    c24 = rng.normal(size=24)
    cases["concat_broadcast_reshape"] = (
        lambda: nc.weighted_sum(nc.reshape(nc.concat([a, nc.broadcast_rows(v, 4)]), (24,)), c24), [a, v])
    sq = _p(rng, 5, 3)
    c45 = rng.normal(size=(4, 2))
    cases["matmul_transpose_cols"] = (
        lambda: nc.weighted_sum(nc.cols(nc.matmul(a, nc.transpose(sq)), 1, 3), c45), [a, sq])
    H, D = 4, 3
    gp = {k: _p(rng, *(D, H) if k.startswith("W") else (H, H) if k.startswith("U") else (H,))
          for k in nc.GRU_PARAMS}
    xs = [_p(rng, 2, D) for _ in range(3)]
    cg = rng.normal(size=(2, H))

    def gru():
        h = nc.Tensor(np.zeros((2, H)))
        for xt in xs:
            h = nc.gru_cell(xt, h, gp)
        return nc.weighted_sum(h, cg)

    cases["gru_bptt"] = (gru, [*xs, *gp.values()])
    logits = _p(rng, 5, 4)
    tgt = np.array([0, 3, 1, 1, 2])
    soft = nc.softmax(rng.normal(size=(5, 4)))
    cmask = np.array([[1, 1, 0, 1]] * 5, dtype=bool)
    cases["softmax_ce"] = (lambda: nc.tsum(nc.softmax_cross_entropy(logits, tgt)), [logits])
    cases["softmax_ce_soft_masked"] = (lambda: nc.tsum(nc.softmax_cross_entropy(logits, soft * cmask /
                                                                               (soft * cmask).sum(1, keepdims=True),
                                                                               cmask)), [logits])
    z = _p(rng, 6)
    cases["sigmoid_bce"] = (lambda: nc.tsum(nc.sigmoid_bce(z, np.array([0, 1, 1, 0, 1, 0.0]))), [z])
    return cases


def loss_cases(rng: np.random.Generator) -> dict:
    """Full per-step training loss of every variant on a small stacking batch."""
    from ntp.expert import training_example
    from ntp.model import ModelConfig, NTPModel, Variant
    from ntp.taskgen import StackingTask
    from ntp.trainer import TraceDataset, compute_losses, make_batch

    exs = [training_example(StackingTask(4, ((1, 0, 2),)), 5, 6), training_example(StackingTask(4, ((3, 2),)), 7, 8)]
    cases = {}
    for v in Variant:
        m = NTPModel(ModelConfig(variant=v, init_seed=int(rng.integers(2**31)), **TINY_MODEL), exs[0].task.layout())
        # zero-initialised biases put whole rows exactly on relu kinks; probe a generic point instead
        for t in m.params.params.values():
            t.data += rng.normal(0.0, 0.05, t.shape)
        ds = TraceDataset(exs, m)
        rows = np.arange(len(ds)) if v.recurrent else rng.choice(len(ds), min(12, len(ds)), replace=False)
        batch = make_batch(ds, m, rows)
        cases[f"loss[{v.value}]"] = (lambda m=m, batch=batch: compute_losses(m, batch)[0], m.params)
    return cases


def run_suite(seed: int = 0, tolerance: float = TOLERANCE, loss_coords: int | None = 400) -> dict:
    """name -> grad_check report for every op and every variant's loss."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, (fn, params) in op_cases(rng).items():
        out[name] = nc.grad_check(fn, params, tolerance)
    for name, (fn, params) in loss_cases(rng).items():
        out[name] = nc.grad_check(fn, params, tolerance, n_coords=loss_coords, rng=np.random.default_rng(seed + 1))
    return out
