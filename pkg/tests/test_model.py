
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ntp import numcore as nc
from ntp.errors import ApiArgumentError, ConfigurationError, ShapeError
from ntp.expert import training_example
from ntp.model import (FrameBatch, ModelConfig, NTPModel, Variant, decode_scope, load_config_text, masked_argmax,
                       memory_lookup)
from ntp.taskgen import SortingTask, StackingTask
from ntp.trainer import TraceDataset, compute_losses, make_batch
from ntp.worldsim import API_GRIP, API_MOVE_TO, API_RELEASE, observe, reset, step_api, translate

TINY = dict(state_dim=6, spec_dim=5, key_dim=4, prog_dim=3, conv_channels=4, slot_hidden=5, core_hidden=6,
            scope_hidden=5, arg_hidden=4, rel_hidden=4, rel_dim=3)


def tiny(variant, layout, seed=0):
    return NTPModel(ModelConfig(variant=variant, init_seed=seed, **TINY), layout)


def test_config_json_round_trip():
    cfg = ModelConfig(variant="NTP_GRU", key_dim=16)
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    assert load_config_text('{"model": {"variant": "Flat"}}').variant is Variant.FLAT


def test_config_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        ModelConfig.from_json({"variant": "NTP", "bogus": 1})
    with pytest.raises(ConfigurationError):
        ModelConfig(conv_width=2)
    with pytest.raises(ValueError):
        ModelConfig(variant="Transformer")


def test_variant_flags():
    assert [v.hierarchical for v in Variant] == [True, True, True, False, False]
    assert [v.recurrent for v in Variant] == [False, True, False, False, True]
    assert [v.scoped for v in Variant] == [True, True, False, False, False]


# ----------------------------------------------------------------------------- featurizer


def test_featurizer_flags_follow_world_events():
    task = StackingTask(3, ((0, 1),))
    m = NTPModel(ModelConfig(), task.layout())
    fz = m.featurizer
    w = reset(task, 2)
    f, present = fz(observe(w))
    T = fz.n_types
    assert present.all()
    np.testing.assert_array_equal(f[:, T + 3], 1.0)  # everything starts on the table
    w = step_api(w, API_MOVE_TO, (1,))
    f, _ = fz(observe(w))
    assert f[1, T + 1] == 1.0 and f[0, T + 1] == 0.0  # hovered
    w = step_api(w, API_GRIP, ())
    f, _ = fz(observe(w))
    assert f[1, T] == 1.0 and f[1, T + 3] == 0.0  # held, no longer on the table
    w = step_api(step_api(w, API_MOVE_TO, (0,)), API_RELEASE, ())
    f, _ = fz(observe(w))
    assert f[0, T + 2] == 1.0  # covered
    np.testing.assert_array_equal(f[1, T + 4:], np.eye(T)[0])  # supported by block 0's type


def test_featurizer_absent_slots_are_zero():
    task = SortingTask((0, 1, 2, 3), (1, 2, 0, 1), max_per_category=3)
    fz = NTPModel(ModelConfig(), task.layout()).featurizer
    f, present = fz(observe(reset(task, 0)))
    assert present.sum() == 4 + 4
    assert not f[~present].any()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-0.4, 0.4), st.floats(-0.4, 0.4), st.floats(0, 0.2))
def test_featurizer_translation_invariant(seed, dx, dy, dz):
    task = StackingTask(5, ((0, 1, 2),))
    fz = NTPModel(ModelConfig(), task.layout()).featurizer
    w = step_api(step_api(reset(task, seed), API_MOVE_TO, (1,)), API_GRIP, ())
    a, pa = fz(observe(w))
    b, pb = fz(observe(translate(w, dx, dy, dz)))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(pa, pb)


def test_featurizer_rejects_wrong_width():
    fz = NTPModel(ModelConfig(), StackingTask(3, ((0, 1),)).layout()).featurizer
    with pytest.raises(ShapeError):
        fz(np.zeros(5))


# ----------------------------------------------------------------------------- encoders


@pytest.fixture(scope="module")
def sort_model():
    task = SortingTask((0, 1, 2, 3), (2, 2, 1, 3))
    return task, NTPModel(ModelConfig(init_seed=3), task.layout())


def test_state_encoder_shape_and_aperture(sort_model):
    task, m = sort_model
    obs = observe(reset(task, 1))
    s = m.encode_state(obs)
    assert s.shape == (128,)
    assert s.data[-1] == obs[-1]
    with pytest.raises(ShapeError):
        m.encode_state(obs[:-1])


def test_state_encoder_ignores_slot_order(sort_model):
    task, m = sort_model
    obs = observe(reset(task, 4))
    fb = m.featurize(obs)
    perm = np.random.default_rng(0).permutation(len(fb.rows))
    shuffled = FrameBatch(fb.rows[perm], fb.seg, fb.aperture, fb.n_frames)
    np.testing.assert_array_equal(m.encode_frames(fb).data, m.encode_frames(shuffled).data)


def test_state_encoder_unchanged_by_duplicate_slots(sort_model):
    # max pooling: a second identical object in the same situation adds nothing
    task, m = sort_model
    fb = m.featurize(observe(reset(task, 4)))
    dup = FrameBatch(np.concatenate([fb.rows, fb.rows[:1]]), np.r_[fb.seg, 0], fb.aperture, 1)
    order = np.argsort(dup.seg, kind="stable")
    dup = FrameBatch(dup.rows[order], dup.seg[order], dup.aperture, 1)
    np.testing.assert_array_equal(m.encode_frames(fb).data, m.encode_frames(dup).data)


def test_spec_encoder_batched_matches_single(sort_model):
    task, m = sort_model
    ex = training_example(task, 0, 1)
    emb = m.encode_frames(m.featurize(ex.spec.frames))
    single = m.encode_spec(nc.Tensor(emb.data[:5])).data
    padded = np.zeros((2, 8, 128))
    padded[0, :5] = emb.data[:5]
    padded[1] = emb.data[:8]
    mask = np.zeros((2, 8), dtype=bool)
    mask[0, :5] = True
    mask[1] = True
    batched = m.encode_spec(nc.Tensor(padded), mask).data
    np.testing.assert_allclose(batched[0], single, atol=1e-12)
    with pytest.raises(ShapeError):
        m.encode_spec(nc.Tensor(np.zeros((0, 128))))


def test_relation_is_count_invariant(sort_model):
    task, m = sort_model
    feats, present = m.featurizer(observe(reset(task, 0)))
    g1 = m.window_relation(feats[None], present[None], feats[None], feats[None]).data
    more = present.copy()
    extra = np.flatnonzero(~present)[0]
    f2 = feats.copy()
    f2[extra] = feats[0]
    more[extra] = True
    g2 = m.window_relation(f2[None], more[None], f2[None], f2[None]).data
    np.testing.assert_array_equal(g1, g2)


# ----------------------------------------------------------------------------- memory and decoders


def brute_force_lookup(key, m_key):
    best, best_j = -np.inf, None
    for j in range(len(m_key)):
        score = sum(float(a) * float(b) for a, b in zip(m_key[j], key))
        if score > best:
            best, best_j = score, j
    return best_j


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31))
def test_memory_lookup_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m_key, m_prog = rng.normal(size=(9, 6)), rng.normal(size=(9, 4))
    key = rng.normal(size=6)
    j, emb = memory_lookup(key, m_key, m_prog)
    assert j == brute_force_lookup(key, m_key)
    np.testing.assert_array_equal(emb, m_prog[j])


def test_memory_lookup_ties_go_to_lowest_id():
    m_key = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert memory_lookup(np.array([1.0, 0.0]), m_key, np.eye(3))[0] == 1
    with pytest.raises(ShapeError):
        memory_lookup(np.ones(3), m_key, np.eye(3))


def test_one_hot_keys_recover_program_ids():
    eye = np.eye(9)
    for j in range(9):
        assert memory_lookup(eye[j] * 5.0, eye, eye)[0] == j


@settings(max_examples=500, deadline=None)
@given(st.integers(1, 60), st.integers(0, 2**31))
def test_decode_scope_is_total(n, seed):
    p = nc.softmax(np.random.default_rng(seed).normal(size=(n, 4)) * 4)
    st_, ed = decode_scope(p)
    assert 1 <= st_ <= ed <= n


def test_decode_scope_clamps_end_before_start():
    p = np.array([[0.1, 0.8, 0.05, 0.05], [0.8, 0.1, 0.05, 0.05], [0.1, 0.1, 0.4, 0.4]])
    assert decode_scope(p) == (2, 2)
    with pytest.raises(ShapeError):
        decode_scope(np.zeros((0, 4)))


def test_masked_argmax_skips_absent():
    assert masked_argmax(np.array([5.0, 1.0, 2.0]), np.array([False, True, True])) == 2


def test_arg_inputs_reject_non_primitive(sort_model):
    _, m = sort_model
    S, F = m.featurizer.n_slots, m.featurizer.dim
    with pytest.raises(ApiArgumentError):
        m.arg_inputs(np.zeros((1, S, F)), np.zeros((1, S, F)), [3])


def test_parameter_sets_differ_by_variant():
    layout = StackingTask(4, ((0, 1),)).layout()
    names = {v: set(NTPModel(ModelConfig(variant=v), layout).params.params) for v in Variant}
    assert "scope.conv.W" in names[Variant.NTP] and "scope.conv.W" not in names[Variant.NTP_NOSCOPE]
    assert "M_key" not in names[Variant.FLAT]
    assert "gru.W_z.W" not in names[Variant.NTP] and any(k.startswith("gru.") for k in names[Variant.NTP_GRU])


# ----------------------------------------------------------------------------- full-loss gradients


def _batch(variant, seed=0):
    task = StackingTask(4, ((1, 0, 2),))
    ex = [training_example(task, 5, 6), training_example(StackingTask(4, ((3, 2),)), 7, 8)]
    m = tiny(variant, task.layout(), seed)
    ds = TraceDataset(ex, m)
    rows = np.arange(len(ds)) if variant.recurrent else np.random.default_rng(seed).choice(len(ds), 12, replace=False)
    return m, make_batch(ds, m, rows)


@pytest.mark.parametrize("variant", list(Variant))
def test_full_loss_gradient(variant):
    m, batch = _batch(variant)
    rep = nc.grad_check(lambda: compute_losses(m, batch)[0], m.params, 1e-4, h=1e-5, n_coords=400,
                        rng=np.random.default_rng(1))
    assert rep["passed"], rep


def test_loss_heads_present_for_ntp():
    m, batch = _batch(Variant.NTP)
    total, br = compute_losses(m, batch)
    assert br.program_key_ce > 0 and br.eop_bce > 0 and br.api_arg_ce > 0 and br.scoping_ce > 0
    assert total.item() == pytest.approx(br.program_key_ce + br.eop_bce + br.scoping_ce + br.api_arg_ce)
