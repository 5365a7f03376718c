import math

import numpy as np
import pytest

from planarbfm import autodiff as ad
from planarbfm import nn
from planarbfm.autodiff import Parameter, Tape
from planarbfm.errors import ConfigError, DimensionError
from planarbfm.gradcheck import finite_diff_check


def test_mlp_zero_weights_identity_activation_returns_bias():
    w = np.zeros((4, 3))
    b = np.array([0.5, -1.0, 2.0])
    for x in (np.zeros(4), np.ones(4), np.array([3.0, -2.0, 0.1, 9.0])):
        out = nn.mlp_forward(x, [(w, b, "identity")])
        np.testing.assert_array_equal(out.data, b)


def test_mlp_single_relu_layer_hand_value():
    out = nn.mlp_forward(np.array([3.0]), [(np.array([[2.0]]), np.array([1.0]), "relu")])
    np.testing.assert_array_equal(out.data, [7.0])


def test_mlp_unknown_activation():
    with pytest.raises(ConfigError):
        nn.mlp_forward(np.zeros(2), [(np.zeros((2, 2)), np.zeros(2), "gelu")])


def test_mlp_two_layer_tanh_gradcheck():
    rng = np.random.default_rng(7)
    with ad.precision("float64"):
        mlp = nn.MLP("m", 3, (6,), 2, rng, activation="tanh")
        x = rng.standard_normal((4, 3))
        target = rng.standard_normal((4, 2))

        def loss():
            d = ad.sub(mlp(ad.lift(x)), ad.lift(target))
            return ad.tmean(ad.mul(d, d))

        assert finite_diff_check(loss, mlp.parameters(), eps=1e-4) < 1e-4


def _reference_block(x, blk: nn.AttentionBlock):
    """Independent step-by-step numpy recomputation of one attention block."""

    def ln(v, g, b, eps=1e-5):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * g + b

    p = {q.name[len(blk.name) + 1:]: q.value for q in blk.parameters()}
    h = ln(x, p["ln1.g"], p["ln1.b"])
    q = h @ p["attn.Wq"] + p["attn.bq"]
    k = h @ p["attn.Wk"] + p["attn.bk"]
    v = h @ p["attn.Wv"] + p["attn.bv"]
    T, d = x.shape
    dh = blk.head_dim
    ctx = np.zeros_like(x)
    for hd in range(blk.n_heads):
        sl = slice(hd * dh, (hd + 1) * dh)
        scores = q[:, sl] @ k[:, sl].T / math.sqrt(dh)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        w = e / e.sum(axis=-1, keepdims=True)
        ctx[:, sl] = w @ v[:, sl]
    x1 = x + ctx @ p["attn.Wo"] + p["attn.bo"]
    h2 = ln(x1, p["ln2.g"], p["ln2.b"])
    f = np.maximum(h2 @ p["ff.W1"] + p["ff.b1"], 0.0) @ p["ff.W2"] + p["ff.b2"]
    return x1 + f


def test_attention_matches_bruteforce_oracle():
    rng = np.random.default_rng(21)
    with ad.precision("float64"):
        blk = nn.AttentionBlock("blk", 4, 2, 8, rng)
        x = rng.standard_normal((3, 4))
        out = nn.mha_forward(x, blk)
        np.testing.assert_allclose(out.data, _reference_block(x, blk), rtol=1e-10, atol=1e-12)


def test_attention_single_token_is_value_path():
    """With one token the softmax weight is 1, so ctx equals the value projection."""
    rng = np.random.default_rng(2)
    with ad.precision("float64"):
        blk = nn.AttentionBlock("blk", 8, 2, 16, rng)
        x = rng.standard_normal((1, 8))
        out = nn.mha_forward(x, blk)
        np.testing.assert_allclose(out.data, _reference_block(x, blk), rtol=1e-10)


def test_attention_zero_projections_is_identity():
    rng = np.random.default_rng(4)
    blk = nn.AttentionBlock("blk", 8, 4, 16, rng)
    for p in blk.parameters():
        if ".W" in p.name or p.name.endswith((".bq", ".bk", ".bv", ".bo", ".b1", ".b2")):
            p.value[...] = 0.0
    x = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
    out = nn.mha_forward(x, blk)
    np.testing.assert_allclose(out.data, x, atol=1e-7)


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(9)
    with ad.precision("float64"):
        blk = nn.AttentionBlock("blk", 8, 2, 16, rng)
        x = rng.standard_normal((4, 8))
        perm = np.array([2, 0, 3, 1])
        out = nn.mha_forward(x, blk).data
        out_p = nn.mha_forward(x[perm], blk).data
        np.testing.assert_allclose(out_p, out[perm], rtol=1e-9, atol=1e-11)


def test_attention_bad_heads():
    with pytest.raises(ConfigError):
        nn.AttentionBlock("blk", 6, 4, 8, np.random.default_rng(0))


def test_attention_gradcheck():
    rng = np.random.default_rng(13)
    with ad.precision("float64"):
        blk = nn.AttentionBlock("blk", 4, 2, 6, rng)
        x = rng.standard_normal((1, 3, 4))

        def loss():
            out = blk(ad.lift(x))
            return ad.tmean(ad.mul(out, out))

        assert finite_diff_check(loss, blk.parameters(), eps=1e-4) < 1e-3


def test_gaussian_logprob_at_mean_dim1():
    d = nn.GaussianDist(ad.lift(np.array([0.3])), np.array([0.0]))
    assert d.log_prob(np.array([0.3])).item() == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-6)


def test_gaussian_logprob_unit_offset():
    d = nn.GaussianDist(ad.lift(np.array([0.0])), np.array([0.0]))
    assert d.log_prob(np.array([1.0])).item() == pytest.approx(-0.5 - 0.5 * math.log(2 * math.pi), abs=1e-6)


def test_gaussian_logprob_dim2_is_sum_of_dim1():
    mean = np.array([0.2, -0.4])
    log_std = np.array([0.1, -0.3])
    act = np.array([0.5, 0.1])
    d2 = nn.GaussianDist(ad.lift(mean), log_std)
    parts = [
        nn.GaussianDist(ad.lift(mean[i:i + 1]), log_std[i:i + 1]).log_prob(act[i:i + 1]).item()
        for i in range(2)
    ]
    assert d2.log_prob(act).item() == pytest.approx(sum(parts), abs=1e-6)


def test_gaussian_logprob_of_mean_identity():
    """log N(mean | mean) == -sum(log_std) - dim/2 * ln(2*pi)."""
    rng = np.random.default_rng(8)
    mean = rng.standard_normal(5)
    log_std = rng.uniform(-1, 1, 5)
    d = nn.GaussianDist(ad.lift(mean), log_std)
    expected = -log_std.sum() - 2.5 * math.log(2 * math.pi)
    assert d.log_prob(mean).item() == pytest.approx(expected, abs=1e-5)


def test_gaussian_logprob_maximized_at_mean():
    rng = np.random.default_rng(15)
    mean = rng.standard_normal(4)
    d = nn.GaussianDist(ad.lift(mean), rng.uniform(-1, 0.5, 4))
    at_mean = d.log_prob(mean).item()
    for _ in range(50):
        perturbed = mean + rng.standard_normal(4) * 0.3
        assert d.log_prob(perturbed).item() <= at_mean + 1e-9


def test_gaussian_log_std_clamped():
    d = nn.GaussianDist(ad.lift(np.zeros(2)), np.array([-9.0, 9.0]))
    np.testing.assert_array_equal(d.log_std.data, [nn.LOG_STD_MIN, nn.LOG_STD_MAX])


def test_gaussian_shape_mismatch():
    d = nn.GaussianDist(ad.lift(np.zeros(3)), np.zeros(3))
    with pytest.raises(DimensionError):
        d.log_prob(np.zeros(2))


def test_gaussian_logprob_differentiable():
    with ad.precision("float64"):
        mu = Parameter("mu", np.array([0.1, -0.2]))
        ls = Parameter("ls", np.array([0.0, 0.3]))
        act = np.array([0.4, 0.0])

        def loss():
            d = nn.GaussianDist(mu.tensor(), ls.tensor())
            return ad.neg(d.log_prob(act))

        assert finite_diff_check(loss, [mu, ls]) < 1e-6


def test_gaussian_batched_logprob():
    rng = np.random.default_rng(3)
    mean = rng.standard_normal((6, 3)).astype(np.float32)
    ls = rng.uniform(-1, 0, 3).astype(np.float32)
    d = nn.GaussianDist(ad.lift(mean), ls)
    acts = rng.standard_normal((6, 3)).astype(np.float32)
    lp = d.log_prob(acts)
    assert lp.shape == (6,)
    for i in range(6):
        single = nn.GaussianDist(ad.lift(mean[i]), ls).log_prob(acts[i]).item()
        assert lp.data[i] == pytest.approx(single, rel=1e-5)


def test_gaussian_entropy_value():
    ls = np.array([0.2, -0.1])
    d = nn.GaussianDist(ad.lift(np.zeros(2)), ls)
    expected = ls.sum() + 0.5 * 2 * (1 + math.log(2 * math.pi))
    assert d.entropy().item() == pytest.approx(expected, abs=1e-6)
