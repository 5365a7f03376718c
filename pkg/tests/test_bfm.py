import math

import numpy as np
import pytest

from planarbfm import autodiff as ad
from planarbfm.bfm import (BehaviorModel, BfmConfig, PoseGoal, TokenSet,
                           sample_mask)
from planarbfm.errors import ConfigError, ContractError


def tiny_cfg(**kw):
    base = dict(d_model=16, trunk_layers=2, n_heads=4, ff_width=32,
                state_encoder_hidden=(24,), pose_encoder_hidden=(24,))
    base.update(kw)
    return BfmConfig(**base)


@pytest.fixture
def model():
    return BehaviorModel(tiny_cfg(), np.random.default_rng(0))


def test_config_rejects_bad_heads():
    with pytest.raises(ConfigError):
        BfmConfig(d_model=30, n_heads=4)


def test_encode_state_zero_weights_bias_only(model):
    for p in model.state_enc.parameters():
        p.value[...] = 0.0
    model.state_enc.parameters()[-1].value[...] = 0.25  # final bias
    tok = model.encode_state(np.random.default_rng(1).standard_normal((3, 13)).astype(np.float32))
    np.testing.assert_allclose(tok.data, 0.25, atol=1e-7)


def test_encode_state_deterministic(model):
    x = np.random.default_rng(2).standard_normal((2, 13)).astype(np.float32)
    np.testing.assert_array_equal(model.encode_state(x).data, model.encode_state(x).data)


def test_encode_state_matches_affine_chain_oracle():
    with ad.precision("float64"):
        m = BehaviorModel(tiny_cfg(state_encoder_hidden=(8,)), np.random.default_rng(3))
        x = np.random.default_rng(4).standard_normal((1, 13))
        ps = {p.name.split("state_enc.")[-1]: p.value for p in m.state_enc.parameters()}
        h = np.maximum(x @ ps["l0.W"] + ps["l0.b"], 0.0)
        expect = h @ ps["l1.W"] + ps["l1.b"]
        np.testing.assert_allclose(m.encode_state(x).data, expect, rtol=1e-12)


def test_encode_state_wrong_dim(model):
    with pytest.raises(ConfigError):
        model.encode_state(np.zeros((2, 12), dtype=np.float32))


def test_pose_goal_normalizes_heading():
    g = PoseGoal(rel_pos=(1.0, 0.0), heading=(3.0, 4.0), q1=0.0, q2=0.0, lookahead=5)
    assert math.hypot(*g.heading) == pytest.approx(1.0)
    with pytest.raises(ConfigError):
        PoseGoal(rel_pos=(0, 0), heading=(0.0, 0.0), q1=0, q2=0, lookahead=5)


def test_k_offset_is_additive_for_linear_encoder(model):
    """Two pose goals differing only in lookahead differ by the k-offset delta."""
    vec = np.random.default_rng(5).standard_normal((1, 6)).astype(np.float32)
    t5 = model.encode_pose_goal(vec, 5).data
    t30 = model.encode_pose_goal(vec, 30).data
    off5 = model.k_offsets[5].value
    off30 = model.k_offsets[30].value
    np.testing.assert_allclose(t30 - t5, (off30 - off5)[None, :], atol=1e-6)


def test_pose_encoder_zero_weights_leaves_k_offset(model):
    for p in model.pose_enc.parameters():
        p.value[...] = 0.0
    vec = np.ones((1, 6), dtype=np.float32)
    np.testing.assert_allclose(model.encode_pose_goal(vec, 15).data,
                               model.k_offsets[15].value[None, :], atol=1e-7)


def test_pose_encoder_rejects_unknown_lookahead(model):
    with pytest.raises(ConfigError):
        model.encode_pose_goal(np.zeros((1, 6), dtype=np.float32), 7)


def test_sample_mask_extremes():
    rng = np.random.default_rng(0)
    assert sample_mask(rng, 4, 1.0).all()
    assert not sample_mask(rng, 4, 0.0).any()


def test_sample_mask_keep_rate_montecarlo():
    rng = np.random.default_rng(1)
    p = 0.7
    n = 10_000
    draws = np.array([sample_mask(rng, 3, p) for _ in range(n)])
    rate = draws.mean()
    sigma = math.sqrt(p * (1 - p) / draws.size)
    assert abs(rate - p) < 3 * sigma


def test_trunk_requires_tokens(model):
    class Hollow(TokenSet):
        def sequence(self):
            return []

    with pytest.raises(ContractError):
        model.trunk_forward(Hollow(state_token=None))


def test_trunk_single_state_token_deterministic(model):
    proprio = np.random.default_rng(6).standard_normal((2, 13)).astype(np.float32)
    st = model.encode_state(proprio)
    d1 = model.trunk_forward(TokenSet(st))
    d2 = model.trunk_forward(TokenSet(model.encode_state(proprio)))
    np.testing.assert_array_equal(d1.mean.data, d2.mean.data)
    assert d1.mean.data.shape == (2, 5)


def test_trunk_token_permutation_invariance(model):
    rng = np.random.default_rng(7)
    toks = [ad.lift(rng.standard_normal((2, 16)).astype(np.float32)) for _ in range(3)]
    state = ad.lift(rng.standard_normal((2, 16)).astype(np.float32))
    base = model.trunk_forward(TokenSet(state, toks)).mean.data
    perm = model.trunk_forward(TokenSet(state, [toks[2], toks[0], toks[1]])).mean.data
    np.testing.assert_allclose(perm, base, atol=2e-6)


def test_masking_by_omission_equals_fresh_subset(model):
    """A masked token set behaves exactly like a freshly built smaller set."""
    rng = np.random.default_rng(8)
    proprio = rng.standard_normal((1, 13)).astype(np.float32)
    vecs = rng.standard_normal((1, 6)).astype(np.float32)
    st = model.encode_state(proprio)
    kept = model.encode_pose_goal(vecs, 5)
    masked_out = model.trunk_forward(TokenSet(st, [kept])).mean.data
    fresh = model.trunk_forward(
        TokenSet(model.encode_state(proprio), [model.encode_pose_goal(vecs, 5)])).mean.data
    np.testing.assert_array_equal(masked_out, fresh)


def test_trunk_forward_matches_reference_block_math():
    """Three-token forward equals an independent matrix-level recomputation."""
    from test_nn import _reference_block

    with ad.precision("float64"):
        m = BehaviorModel(tiny_cfg(trunk_layers=1), np.random.default_rng(10))
        rng = np.random.default_rng(11)
        toks = rng.standard_normal((3, 16))
        x = _reference_block(toks, m.blocks[0])
        mu = x.mean(axis=-1, keepdims=True)
        xhat = (x - mu) / np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True) + 1e-5)
        xln = xhat * m.lnf_g.value + m.lnf_b.value
        expect = xln.mean(axis=0) @ m.head_w.value + m.head_b.value
        ts = TokenSet(ad.lift(toks[2]), [ad.lift(toks[0]), ad.lift(toks[1])])
        got = m.trunk_forward(ts).mean.data
        np.testing.assert_allclose(got, expect, rtol=1e-9, atol=1e-11)


def test_log_std_clamped_into_dist(model):
    model.log_std.value[...] = -20.0
    dist = model.trunk_forward(TokenSet(ad.lift(np.zeros((1, 16), dtype=np.float32))))
    np.testing.assert_array_equal(dist.log_std.data, -5.0)
