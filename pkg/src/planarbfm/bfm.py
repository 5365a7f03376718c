"""Token-conditioned behavior model: per-modality encoders, random goal
masking, and a small bidirectional transformer trunk with a Gaussian action
head.

Inputs form an unordered token "sentence": zero or more goal tokens plus a
mandatory state token. Masked goal tokens are omitted from the sequence, not
zeroed, so the trunk must act sensibly under any prompt subset. The action
head mean-pools over tokens, which together with the absence of positional
encoding makes the output order-invariant.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError, ContractError
from .nn import MLP, AttentionBlock, GaussianDist, Module

POSE_GOAL_DIM = 6  # rel position (2), heading unit vector (2), arm posture (2)
PROPRIO_DIM = 13


@dataclass
class BfmConfig:
    d_model: int = 64
    trunk_layers: int = 2
    n_heads: int = 4
    ff_width: int = 128
    state_encoder_hidden: tuple[int, ...] = (256, 256)
    pose_encoder_hidden: tuple[int, ...] = (2304, 2304)
    action_dim: int = 5
    lookaheads: tuple[int, ...] = (5, 15, 30)
    mask_keep_prob: float = 0.7
    log_std_init: float = -1.6
    activation: str = "relu"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not 0.0 <= self.mask_keep_prob <= 1.0:
            raise ConfigError("mask_keep_prob must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("state_encoder_hidden", "pose_encoder_hidden", "lookaheads"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BfmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown BfmConfig keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("state_encoder_hidden", "pose_encoder_hidden", "lookaheads"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class PoseGoal:
    """Desired future base pose (egocentric) and arm posture at a lookahead."""

    rel_pos: tuple[float, float]
    heading: tuple[float, float]
    q1: float
    q2: float
    lookahead: int

    def __post_init__(self):
        n = math.hypot(*self.heading)
        if not n > 0.0:
            raise ConfigError("pose goal heading must be a nonzero vector")
        if abs(n - 1.0) > 1e-9:
            object.__setattr__(self, "heading", (self.heading[0] / n, self.heading[1] / n))

    def as_vector(self) -> np.ndarray:
        return np.array([*self.rel_pos, *self.heading, self.q1, self.q2])


class TokenSet:
    """One batch of token sequences sharing the same presence pattern.

    goal_tokens come first, the state token last; masked-out goal tokens are
    simply not in the list.
    """

    def __init__(self, state_token: Tensor, goal_tokens: Sequence[Tensor] = ()):
        self.state_token = state_token
        self.goal_tokens = list(goal_tokens)

    def sequence(self) -> list[Tensor]:
        return [*self.goal_tokens, self.state_token]

    def __len__(self) -> int:
        return 1 + len(self.goal_tokens)


def sample_mask(rng: np.random.Generator, n_goal_tokens: int,
                keep_prob: float) -> np.ndarray:
    """Independent keep/omit decision per goal token; the state token is never masked."""
    return rng.random(n_goal_tokens) < keep_prob


class BehaviorModel(Module):
    def __init__(self, cfg: BfmConfig, rng: np.random.Generator, name: str = "bfm"):
        super().__init__(name)
        self.cfg = cfg
        d = cfg.d_model
        dt = ad.default_dtype()
        self.state_enc = MLP(f"{name}.state_enc", PROPRIO_DIM, cfg.state_encoder_hidden,
                             d, rng, activation=cfg.activation)
        self.pose_enc = MLP(f"{name}.pose_enc", POSE_GOAL_DIM, cfg.pose_encoder_hidden,
                            d, rng, activation=cfg.activation)
        self.k_offsets: dict[int, Parameter] = {}
        for k in cfg.lookaheads:
            p = self._param(f"k_offset.{k}", (rng.standard_normal(d) * 0.05).astype(dt))
            self.k_offsets[k] = p
        self.blocks = [AttentionBlock(f"{name}.trunk.b{i}", d, cfg.n_heads, cfg.ff_width,
                                      rng, activation=cfg.activation)
                       for i in range(cfg.trunk_layers)]
        self.lnf_g = self._param("trunk.lnf.g", np.ones(d, dtype=dt))
        self.lnf_b = self._param("trunk.lnf.b", np.zeros(d, dtype=dt))
        self.head_w = self._param("head.W", (rng.standard_normal((d, cfg.action_dim))
                                             * (1.0 / math.sqrt(d))).astype(dt))
        self.head_b = self._param("head.b", np.zeros(cfg.action_dim, dtype=dt))
        self.log_std = self._param("head.log_std",
                                   np.full(cfg.action_dim, cfg.log_std_init, dtype=dt))

    def parameters(self) -> list[Parameter]:
        out = list(self.state_enc.parameters()) + list(self.pose_enc.parameters())
        out += [self.k_offsets[k] for k in self.cfg.lookaheads]
        for b in self.blocks:
            out += b.parameters()
        out += [self.lnf_g, self.lnf_b, self.head_w, self.head_b, self.log_std]
        return out

    def freeze(self) -> None:
        for p in self.parameters():
            p.trainable = False

    def unfreeze(self) -> None:
        for p in self.parameters():
            p.trainable = True

    def num_params(self) -> int:
        return sum(p.value.size for p in self.parameters())

    # --- encoders ---------------------------------------------------------

    def encode_state(self, proprio) -> Tensor:
        """(B, 13) proprioception -> (B, d_model) state token."""
        t = ad.lift(proprio)
        if t.data.shape[-1] != PROPRIO_DIM:
            raise ConfigError(f"proprio must have dim {PROPRIO_DIM}, got {t.data.shape[-1]}")
        return self.state_enc(t)

    def encode_pose_goal(self, goal_vec, lookahead: int) -> Tensor:
        """(B, 6) pose-goal features for one lookahead -> (B, d_model) token."""
        if lookahead not in self.k_offsets:
            raise ConfigError(f"lookahead {lookahead} not in {self.cfg.lookaheads}")
        t = ad.lift(goal_vec)
        if t.data.shape[-1] != POSE_GOAL_DIM:
            raise ConfigError(f"pose goal must have dim {POSE_GOAL_DIM}")
        return ad.add(self.pose_enc(t), self.k_offsets[lookahead].tensor())

    def encode_pose_goal_obj(self, goal: PoseGoal) -> Tensor:
        tok = self.encode_pose_goal(goal.as_vector().reshape(1, -1), goal.lookahead)
        return tok

    # --- trunk ------------------------------------------------------------

    def trunk_forward(self, tokens: TokenSet) -> GaussianDist:
        """Attend over the token set and emit a Gaussian over normalized actions."""
        seq = tokens.sequence()
        if not seq:
            raise ContractError("trunk_forward requires at least one token")
        x = ad.stack(seq, axis=-2)  # (B, T, d) or (T, d)
        if x.data.ndim == 2:
            x = ad.reshape(x, (1, *x.data.shape))
            squeeze = True
        else:
            squeeze = False
        for blk in self.blocks:
            x = blk(x)
        x = ad.layer_norm(x, self.lnf_g.tensor(), self.lnf_b.tensor())
        pooled = ad.tmean(x, axis=1)  # (B, d)
        mean = ad.add(ad.matmul(pooled, self.head_w.tensor()), self.head_b.tensor())
        if squeeze:
            mean = ad.reshape(mean, (self.cfg.action_dim,))
        return GaussianDist(mean, self.log_std.tensor())

    def act_mean(self, tokens: TokenSet) -> np.ndarray:
        return self.trunk_forward(tokens).mean.data
