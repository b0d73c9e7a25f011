"""Experiment configuration: YAML files validated against a versioned schema.

Unknown keys are rejected everywhere. Every section has desk-scale defaults,
so an empty file (or no file at all) yields the default experiment.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .mixture import GaussianMixture
from .nft import ETA_PRESETS, EtaSchedule, RlConfig
from .samplers import KINDS, SamplerSpec
from .schedule import SCHEDULES

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MixtureSpec(_Strict):
    weights: List[float]
    means: List[List[float]]
    variances: List[List[float]]

    def build(self) -> GaussianMixture:
        return GaussianMixture(self.weights, self.means, self.variances)


def _two_blobs():
    return MixtureSpec(weights=[0.5, 0.5], means=[[-2.0, 0.0], [2.0, 0.0]], variances=[[0.25, 0.25], [0.25, 0.25]])


class DataSection(_Strict):
    """One data mixture per condition id."""

    conditions: List[MixtureSpec] = Field(default_factory=lambda: [_two_blobs()])

    @field_validator("conditions")
    @classmethod
    def _nonempty(cls, v):
        if not 1 <= len(v) <= 16:
            raise ValueError("between 1 and 16 conditions are supported")
        dims = {len(m.means[0]) for m in v}
        if len(dims) != 1:
            raise ValueError("all condition mixtures must share one dimension")
        return v


class ModelSection(_Strict):
    hidden: List[int] = Field(default_factory=lambda: [64, 64, 64])
    activation: Literal["tanh", "identity", "softplus"] = "tanh"
    init_seed: int = 0


class PretrainSection(_Strict):
    steps: int = Field(3000, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-3, ge=0)
    weighting: Literal["uniform", "one_minus_t", "adaptive"] = "uniform"
    t_min: float = 1e-3
    lr_decay: bool = True


class SamplerSection(_Strict):
    kind: str = "euler_ode"
    steps: int = 10
    stochasticity: float = 0.0
    t_min: float = 1e-3

    @field_validator("kind")
    @classmethod
    def _kind(cls, v):
        if v not in KINDS:
            raise ValueError(f"unknown sampler kind {v!r}; choose from {KINDS}")
        return v

    @model_validator(mode="after")
    def _valid(self):
        self.build()
        return self

    def build(self, record=False) -> SamplerSpec:
        return SamplerSpec(self.kind, self.steps, self.stochasticity, self.t_min, record)


class EtaSection(_Strict):
    preset: Optional[str] = "default"
    rate: Optional[float] = None
    max: Optional[float] = None
    constant: Optional[float] = Field(None, ge=0, le=1)

    @field_validator("preset")
    @classmethod
    def _preset(cls, v):
        if v is not None and v not in ETA_PRESETS:
            raise ValueError(f"unknown eta preset {v!r}; choose from {sorted(ETA_PRESETS)}")
        return v

    def build(self) -> EtaSchedule:
        base = ETA_PRESETS[self.preset] if self.preset else EtaSchedule()
        if self.constant is not None:
            return EtaSchedule(constant=self.constant)
        return EtaSchedule(
            self.rate if self.rate is not None else base.rate,
            self.max if self.max is not None else base.max,
            base.constant,
        )


class RlSection(_Strict):
    beta: float = Field(1.0, gt=0)
    eta: EtaSection = Field(default_factory=EtaSection)
    z_mode: Literal["running_std", "constant"] = "running_std"
    z_value: float = Field(1.0, gt=0)
    z_window: int = Field(10, ge=1)
    z_floor: float = Field(1e-3, gt=0)
    group_size: int = Field(8, ge=2)
    groups_per_iter: int = Field(24, ge=1)
    grad_passes: int = Field(4, ge=1)
    minibatch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0)
    sampler: SamplerSection = Field(default_factory=SamplerSection)
    weighting: Literal["uniform", "one_minus_t", "adaptive"] = "adaptive"
    t_sampling: Literal["grid", "uniform"] = "grid"
    negative: bool = True
    iterations: int = Field(300, ge=0)
    eval_every: int = Field(10, ge=0)
    eval_samples: int = Field(512, ge=1)
    eval_sampler: SamplerSection = Field(default_factory=lambda: SamplerSection(steps=40))

    def build(self, seed: int, objective="nft") -> RlConfig:
        return RlConfig(
            beta=self.beta,
            eta=self.eta.build(),
            z_mode=self.z_mode,
            z_value=self.z_value,
            z_window=self.z_window,
            z_floor=self.z_floor,
            group_size=self.group_size,
            groups_per_iter=self.groups_per_iter,
            grad_passes=self.grad_passes,
            minibatch_size=self.minibatch_size,
            lr=self.lr,
            sampler=self.sampler.build(),
            weighting=self.weighting,
            t_sampling=self.t_sampling,
            negative=self.negative,
            objective=objective,
            iterations=self.iterations,
            eval_every=self.eval_every,
            eval_samples=self.eval_samples,
            eval_sampler=self.eval_sampler.build(),
            seed=seed,
        )


class BaselineSection(_Strict):
    grpo_stochasticity: float = Field(2**0.5, gt=0, le=2**0.5 + 1e-12)
    grpo_lr: Optional[float] = None


class MetricsSection(_Strict):
    # wall-clock time is the one column that cannot repeat across runs
    record_wall_clock: bool = True


class ExperimentConfig(_Strict):
    version: int = SCHEMA_VERSION
    seed: int = Field(0, ge=0, lt=2**64)
    schedule: str = "rectified_flow"
    out: str = "runs/default"
    data: DataSection = Field(default_factory=DataSection)
    reward: Union[dict, List[dict]] = Field(default_factory=lambda: {"kind": "indicator", "target": 1})
    model: ModelSection = Field(default_factory=ModelSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    rl: RlSection = Field(default_factory=RlSection)
    baseline: BaselineSection = Field(default_factory=BaselineSection)
    metrics: MetricsSection = Field(default_factory=MetricsSection)

    @field_validator("version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported config version {v}; this build reads version {SCHEMA_VERSION}")
        return v

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v):
        if v not in SCHEDULES:
            raise ValueError(f"unknown schedule {v!r}; choose from {sorted(SCHEDULES)}")
        return v

    @model_validator(mode="after")
    def _rewards_resolve(self):
        self.reward_fn()
        return self

    @property
    def dim(self):
        return len(self.data.conditions[0].means[0])

    @property
    def n_cond(self):
        return len(self.data.conditions)

    def mixtures(self):
        return [m.build() for m in self.data.conditions]

    def reward_specs(self):
        if isinstance(self.reward, list):
            if len(self.reward) != self.n_cond:
                raise ValueError("a reward list needs one entry per condition")
            return list(self.reward)
        return [self.reward] * self.n_cond

    def reward_fn(self):
        """``reward(x0, cond)`` dispatching to the per-condition reward."""
        from .rewards import build_reward

        fns = [build_reward(spec, mix) for spec, mix in zip(self.reward_specs(), self.mixtures())]
        return lambda x0, c: fns[int(c)](x0)

    def digest(self, sections=None) -> bytes:
        """sha256 of the canonical JSON of the chosen sections (default all but ``out``)."""
        data = self.model_dump(mode="json")
        data.pop("out")
        if sections is not None:
            data = {k: data[k] for k in sections}
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()


# sections that determine a pretrained model
PRETRAIN_SECTIONS = ("version", "seed", "schedule", "data", "model", "pretrain")


def _set_dotted(tree: dict, key: str, value):
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ValueError(f"override {key!r}: {p!r} is not a section")
        node = nxt
    node[parts[-1]] = value


def parse_override(text: str):
    if "=" not in text:
        raise ValueError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"override {text!r} has an empty key")
    return key, yaml.safe_load(raw) if raw.strip() else None


def load_config(path=None, overrides=(), seed=None, out=None) -> ExperimentConfig:
    """Read ``path`` (YAML), apply dotted ``key=value`` overrides, then validate."""
    tree = {}
    if path is not None:
        text = Path(path).read_text()
        tree = yaml.safe_load(text) or {}
        if not isinstance(tree, dict):
            raise ValueError(f"{path}: top level must be a mapping")
    for item in overrides:
        _set_dotted(tree, *parse_override(item))
    if seed is not None:
        tree["seed"] = seed
    if out is not None:
        tree["out"] = str(out)
    return ExperimentConfig.model_validate(tree)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False, default_flow_style=None)
