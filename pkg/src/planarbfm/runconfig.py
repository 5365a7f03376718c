"""Run configuration: one YAML document with per-module sections.

Unknown keys anywhere in the document are rejected, and every run writes its
fully-resolved config next to its outputs so results are reproducible from
the output directory alone.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .adapter import PriorSpec, TaskEncoderConfig
from .bfm import BfmConfig
from .distill import DistillConfig
from .errors import ConfigError
from .physics import SimParams
from .ppo import PPOConfig

OUTPUT_ENV_VAR = "PLANARBFM_OUTPUT"


def _strict_kwargs(cls, d: dict, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{where}' section: {sorted(unknown)}")
    return d


def _sim_from_dict(d: dict) -> SimParams:
    d = dict(_strict_kwargs(SimParams, d, "sim"))
    for key in ("link_masses", "link_lengths"):
        if key in d:
            d[key] = tuple(d[key])
    return SimParams(**d)


def _sim_to_dict(p: SimParams) -> dict:
    d = dataclasses.asdict(p)
    d["link_masses"] = list(d["link_masses"])
    d["link_lengths"] = list(d["link_lengths"])
    return d


@dataclass
class AdapterSection:
    encoder: TaskEncoderConfig = field(default_factory=TaskEncoderConfig)
    prompt: list[PriorSpec] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"encoder": self.encoder.to_dict(),
                "prompt": [p.to_dict() for p in self.prompt]}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterSection":
        _strict_kwargs(cls, d, "adapter")
        return cls(encoder=TaskEncoderConfig.from_dict(d.get("encoder", {})),
                   prompt=[PriorSpec.from_dict(p) for p in d.get("prompt", [])])


@dataclass
class EvalSection:
    episodes: int = 256
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    friction_grid: tuple[float, ...] = (0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6)
    gravity_grid: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5)

    def to_dict(self) -> dict:
        return {"episodes": self.episodes, "seeds": list(self.seeds),
                "friction_grid": list(self.friction_grid),
                "gravity_grid": list(self.gravity_grid)}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSection":
        d = dict(_strict_kwargs(cls, d, "eval"))
        for key in ("seeds", "friction_grid", "gravity_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class IoSection:
    output: str = "out"
    bfm_checkpoint: str | None = None
    policy_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "IoSection":
        return cls(**_strict_kwargs(cls, d, "io"))


@dataclass
class RunConfig:
    seed: int = 0
    sim: SimParams = field(default_factory=SimParams)
    bfm: BfmConfig = field(default_factory=BfmConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    io: IoSection = field(default_factory=IoSection)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "sim": _sim_to_dict(self.sim),
                "bfm": self.bfm.to_dict(), "distill": self.distill.to_dict(),
                "adapter": self.adapter.to_dict(), "ppo": self.ppo.to_dict(),
                "eval": self.eval.to_dict(), "io": self.io.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        _strict_kwargs(cls, d, "top level")
        try:
            return cls(
                seed=int(d.get("seed", 0)),
                sim=_sim_from_dict(d.get("sim", {})),
                bfm=BfmConfig.from_dict(d.get("bfm", {})),
                distill=DistillConfig.from_dict(d.get("distill", {})),
                adapter=AdapterSection.from_dict(d.get("adapter", {})),
                ppo=PPOConfig.from_dict(d.get("ppo", {})),
                eval=EvalSection.from_dict(d.get("eval", {})),
                io=IoSection.from_dict(d.get("io", {})),
            )
        except TypeError as e:
            raise ConfigError(f"invalid config value: {e}") from e

    def resolved_output(self) -> Path:
        return Path(os.environ.get(OUTPUT_ENV_VAR, self.io.output))


def load_config(path) -> RunConfig:
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    return RunConfig.from_dict(doc)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
