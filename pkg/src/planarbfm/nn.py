"""Neural building blocks: MLPs, attention blocks, diagonal Gaussian heads."""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "identity": lambda t: t,
}

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LOG_2PI = math.log(2.0 * math.pi)


def _init_weight(rng: np.random.Generator, fan_in: int, fan_out: int, activation: str,
                 dtype) -> np.ndarray:
    gain = 2.0 if activation == "relu" else 1.0
    std = math.sqrt(gain / fan_in)
    return (rng.standard_normal((fan_in, fan_out)) * std).astype(dtype)


def mlp_forward(x, layers) -> Tensor:
    """Sequential affine+activation chain.

    layers: list of (weight, bias, activation) where weight is (fan_in, fan_out)
    and activation is one of 'relu', 'tanh', 'identity'.
    """
    h = ad.lift(x)
    squeeze = False
    if h.data.ndim == 1:
        h = ad.reshape(h, (1, -1))
        squeeze = True
    for w, b, act in layers:
        if act not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {act!r}")
        w = ad.lift(w)
        b = ad.lift(b)
        if h.data.shape[-1] != w.data.shape[0]:
            raise DimensionError(
                f"mlp layer expects input dim {w.data.shape[0]}, got {h.data.shape[-1]}"
            )
        h = ACTIVATIONS[act](ad.add(ad.matmul(h, w), b))
    if squeeze:
        h = ad.reshape(h, (h.data.shape[-1],))
    return h


class Module:
    """Minimal parameter container with deterministic registration order."""

    def __init__(self, name: str):
        self.name = name
        self._params: list[Parameter] = []

    def _param(self, suffix: str, value: np.ndarray, trainable: bool = True) -> Parameter:
        p = Parameter(f"{self.name}.{suffix}", value, trainable)
        self._params.append(p)
        return p

    def parameters(self) -> list[Parameter]:
        return list(self._params)

    def freeze(self) -> None:
        for p in self._params:
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self._params:
            p.trainable = True

    def num_params(self) -> int:
        return sum(p.value.size for p in self._params)


class MLP(Module):
    def __init__(self, name: str, in_dim: int, hidden: tuple[int, ...], out_dim: int,
                 rng: np.random.Generator, activation: str = "relu",
                 out_activation: str = "identity", zero_init_out: bool = False,
                 out_bias_std: float = 0.0):
        super().__init__(name)
        if activation not in ACTIVATIONS or out_activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation in MLP {name}")
        self.in_dim = in_dim
        self.out_dim = out_dim
        dt = ad.default_dtype()
        dims = [in_dim, *hidden, out_dim]
        self.layers = []
        for i, (di, do) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            act = out_activation if last else activation
            if last and zero_init_out:
                w_init = np.zeros((di, do), dtype=dt)
            else:
                w_init = _init_weight(rng, di, do, act if act != "identity" else activation, dt)
            w = self._param(f"l{i}.W", w_init)
            if last and out_bias_std > 0.0:
                b_init = (rng.standard_normal(do) * out_bias_std).astype(dt)
            else:
                b_init = np.zeros(do, dtype=dt)
            b = self._param(f"l{i}.b", b_init)
            self.layers.append((w, b, act))

    def __call__(self, x) -> Tensor:
        return mlp_forward(x, self.layers)


class AttentionBlock(Module):
    """Pre-norm residual self-attention + residual 2-layer feed-forward.

    Full bidirectional attention, no positional encoding: token identity comes
    from the per-modality encoders, so the sequence is an unordered set.
    """

    def __init__(self, name: str, d_model: int, n_heads: int, ff_width: int,
                 rng: np.random.Generator, activation: str = "relu"):
        super().__init__(name)
        if d_model % n_heads != 0:
            raise ConfigError(f"d_model {d_model} not divisible by n_heads {n_heads}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.activation = activation
        dt = ad.default_dtype()

        def w(suffix, fi, fo):
            return self._param(suffix, _init_weight(rng, fi, fo, "identity", dt))

        def b(suffix, n):
            return self._param(suffix, np.zeros(n, dtype=dt))

        self.ln1_g = self._param("ln1.g", np.ones(d_model, dtype=dt))
        self.ln1_b = b("ln1.b", d_model)
        self.wq, self.bq = w("attn.Wq", d_model, d_model), b("attn.bq", d_model)
        self.wk, self.bk = w("attn.Wk", d_model, d_model), b("attn.bk", d_model)
        self.wv, self.bv = w("attn.Wv", d_model, d_model), b("attn.bv", d_model)
        self.wo, self.bo = w("attn.Wo", d_model, d_model), b("attn.bo", d_model)
        self.ln2_g = self._param("ln2.g", np.ones(d_model, dtype=dt))
        self.ln2_b = b("ln2.b", d_model)
        self.w1, self.b1 = w("ff.W1", d_model, ff_width), b("ff.b1", ff_width)
        self.w2, self.b2 = w("ff.W2", ff_width, d_model), b("ff.b2", d_model)

    def _heads(self, t: Tensor, B: int, T: int) -> Tensor:
        t = ad.reshape(t, (B, T, self.n_heads, self.head_dim))
        return ad.swapaxes(t, 1, 2)  # (B, H, T, dh)

    def __call__(self, x) -> Tensor:
        x = ad.lift(x)
        if x.data.ndim != 3:
            raise DimensionError(f"attention block expects (B, T, d), got {x.data.shape}")
        B, T, d = x.data.shape
        if d != self.d_model:
            raise DimensionError(f"expected d_model {self.d_model}, got {d}")
        h = ad.layer_norm(x, self.ln1_g.tensor(), self.ln1_b.tensor())
        q = self._heads(ad.add(ad.matmul(h, self.wq.tensor()), self.bq.tensor()), B, T)
        k = self._heads(ad.add(ad.matmul(h, self.wk.tensor()), self.bk.tensor()), B, T)
        v = self._heads(ad.add(ad.matmul(h, self.wv.tensor()), self.bv.tensor()), B, T)
        scores = ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        att = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.swapaxes(ad.matmul(att, v), 1, 2), (B, T, d))
        x = ad.add(x, ad.add(ad.matmul(ctx, self.wo.tensor()), self.bo.tensor()))
        h2 = ad.layer_norm(x, self.ln2_g.tensor(), self.ln2_b.tensor())
        f = ACTIVATIONS[self.activation](ad.add(ad.matmul(h2, self.w1.tensor()), self.b1.tensor()))
        f = ad.add(ad.matmul(f, self.w2.tensor()), self.b2.tensor())
        return ad.add(x, f)


def mha_forward(tokens, block: AttentionBlock) -> Tensor:
    """Run one attention block over a (T, d) or (B, T, d) token array."""
    t = ad.lift(tokens)
    if t.data.ndim == 2:
        T, d = t.data.shape
        if T < 1:
            raise ContractError("attention needs at least one token")
        out = block(ad.reshape(t, (1, T, d)))
        return ad.reshape(out, (T, d))
    return block(t)


class GaussianDist:
    """Diagonal Gaussian over actions with state-independent log-std.

    log_std is clamped to [LOG_STD_MIN, LOG_STD_MAX] at construction; the clamp
    is part of the distribution's definition, not the caller's job.
    """

    def __init__(self, mean: Tensor, log_std):
        self.mean = ad.lift(mean)
        self.log_std = ad.clip(ad.lift(log_std), LOG_STD_MIN, LOG_STD_MAX)
        if self.log_std.data.ndim != 1:
            raise DimensionError("log_std must be one-dimensional")
        if self.mean.data.shape[-1] != self.log_std.data.shape[0]:
            raise DimensionError(
                f"mean dim {self.mean.data.shape[-1]} != log_std dim {self.log_std.data.shape[0]}"
            )

    @property
    def action_dim(self) -> int:
        return self.log_std.data.shape[0]

    def log_prob(self, action) -> Tensor:
        """Summed per-dimension log-density; (B,) for batched means, scalar otherwise."""
        action = ad.lift(action)
        if action.data.shape != self.mean.data.shape:
            raise DimensionError(
                f"action shape {action.data.shape} != mean shape {self.mean.data.shape}"
            )
        inv_std = ad.exp(ad.neg(self.log_std))
        z = ad.mul(ad.sub(action, self.mean), inv_std)
        quad = ad.mul(ad.tsum(ad.mul(z, z), axis=-1), -0.5)
        const = -0.5 * self.action_dim * LOG_2PI
        return ad.add(ad.sub(quad, ad.tsum(self.log_std)), const)

    def entropy(self) -> Tensor:
        """Entropy of one action distribution (identical across a batch)."""
        return ad.add(ad.tsum(self.log_std), 0.5 * self.action_dim * (1.0 + LOG_2PI))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        noise = rng.standard_normal(self.mean.data.shape).astype(self.mean.data.dtype)
        return self.mean.data + np.exp(self.log_std.data) * noise

    def mode(self) -> np.ndarray:
        return self.mean.data.copy()


def gaussian_logprob(dist: GaussianDist, action) -> Tensor:
    return dist.log_prob(action)
