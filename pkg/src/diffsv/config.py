"""Run configuration: one document with a section per component.

Every key has a default; unknown keys and invalid values are collected and
reported together via :class:`~diffsv.errors.ConfigError`.
"""

from __future__ import annotations

import copy
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import yaml

from .diffusion import NoiseSchedule, ScoreNetConfig
from .enhancer import EnhancerConfig
from .errors import ConfigError
from .extractor import ExtractorConfig
from .features import NOISE_CATEGORIES, FeatureConfig

ABLATIONS = ("no-unified", "no-denoiser", "no-enh-loss", "no-hierarchical", "baseline")


@dataclass
class DiffusionConfig:
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0
    t_min: float = 1e-4
    train_steps: int = 2
    eval_steps: int = 10
    init: str = "mean"
    weighting: str = "sigma2"
    base_width: int = 4
    dim_mults: Tuple[int, ...] = (1, 2, 4)
    time_dim: int = 32
    groups: int = 4
    time_scale: float = 1000.0

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.beta0, self.beta1, self.T)

    def unet(self) -> ScoreNetConfig:
        return ScoreNetConfig(self.base_width, tuple(self.dim_mults), self.time_dim, self.groups, self.time_scale)


@dataclass
class ObjectiveConfig:
    s: float = 30.0
    m: float = 0.3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    crop_frames: int = 64
    lr_max: float = 1e-3
    lr_min: float = 1e-7
    lr_cycles: int = 4
    seed: int = 0
    grad_clip: float = 5.0
    snr_range: Tuple[float, float] = (0.0, 20.0)
    gain_range: Tuple[float, float] = (-6.0, 6.0)
    unified: bool = True
    use_denoiser: bool = True
    use_enh_loss: bool = True
    hierarchical: bool = True
    baseline: bool = False
    max_nonfinite: int = 3
    checkpoint_every: int = 1


@dataclass
class EvalConfig:
    p_target: float = 0.01
    c_miss: float = 1.0
    c_fa: float = 1.0
    snrs: Tuple[float, ...] = (0.0, 5.0, 10.0, 15.0, 20.0)
    categories: Tuple[str, ...] = ("babble", "music", "noise")
    seed: int = 0


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    enhancer: EnhancerConfig = field(default_factory=EnhancerConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    extractor: ExtractorConfig = field(default_factory=lambda: ExtractorConfig(width_mult=0.5))
    objectives: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            section = dataclasses.asdict(getattr(self, f.name))
            out[f.name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return out

    def replace(self, **sections) -> "RunConfig":
        """Copy with ``section={key: value}`` overrides applied (validated)."""
        d = self.to_dict()
        for name, overrides in sections.items():
            d.setdefault(name, {}).update(overrides)
        return RunConfig.from_dict(d)

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "RunConfig":
        data = data or {}
        problems = []
        if not isinstance(data, dict):
            raise ConfigError(["config document must be a mapping"])
        default = cls()
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for name in data:
            if name not in sections:
                problems.append(f"unknown section '{name}'")
        built = {}
        for name in sections:
            base = getattr(default, name)
            values = data.get(name) or {}
            if not isinstance(values, dict):
                problems.append(f"section '{name}' must be a mapping")
                built[name] = base
                continue
            kwargs = dataclasses.asdict(base)
            types = {f.name: f.type for f in dataclasses.fields(base)}
            for key, value in values.items():
                if key not in kwargs:
                    problems.append(f"unknown key '{name}.{key}'")
                    continue
                try:
                    kwargs[key] = _coerce(value, kwargs[key])
                except (TypeError, ValueError):
                    problems.append(f"'{name}.{key}': cannot use {value!r} ({types[key]})")
            built[name] = type(base)(**kwargs)
        cfg = cls(**built)
        problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    def problems(self):
        p = []
        tr, df, ev = self.training, self.diffusion, self.evaluation
        if not tr.lr_max > tr.lr_min > 0:
            p.append("training: need lr_max > lr_min > 0")
        if tr.epochs < 1:
            p.append("training.epochs must be >= 1")
        if tr.lr_cycles < 1:
            p.append("training.lr_cycles must be >= 1")
        if tr.batch_size < 2:
            p.append("training.batch_size must be >= 2")
        if tr.crop_frames < 16:
            p.append("training.crop_frames must be >= 16")
        if tr.max_nonfinite < 1:
            p.append("training.max_nonfinite must be >= 1")
        if not (0 <= tr.snr_range[0] <= tr.snr_range[1]):
            p.append("training.snr_range must be an increasing non-negative pair")
        try:
            df.schedule().check_terminal()
        except ValueError as exc:
            p.append(f"diffusion: {exc}")
        if df.t_min <= 0 or df.t_min >= df.T:
            p.append("diffusion.t_min must lie in (0, T)")
        if df.train_steps < 1 or df.eval_steps < 1:
            p.append("diffusion: sampler step counts must be >= 1")
        if df.init not in ("mean", "seeded-gaussian"):
            p.append(f"diffusion.init must be 'mean' or 'seeded-gaussian', got {df.init!r}")
        if df.weighting not in ("none", "sigma2"):
            p.append(f"diffusion.weighting must be 'none' or 'sigma2', got {df.weighting!r}")
        if self.enhancer.n_mels != self.features.n_mels or self.extractor.n_mels != self.features.n_mels:
            p.append("enhancer.n_mels and extractor.n_mels must equal features.n_mels")
        if self.enhancer.n_mels % self.enhancer.num_heads:
            p.append("enhancer.num_heads must divide n_mels")
        if self.extractor.embedding_dim < 8:
            p.append("extractor.embedding_dim must be >= 8")
        if self.objectives.s <= 0 or not 0 <= self.objectives.m < 1.5707963267948966:
            p.append("objectives: need s > 0 and 0 <= m < pi/2")
        bad = [c for c in ev.categories if c not in NOISE_CATEGORIES]
        if bad:
            p.append(f"evaluation.categories: unknown {bad}")
        if not 0 < ev.p_target < 1:
            p.append("evaluation.p_target must lie in (0, 1)")
        return p


def _coerce(value, like):
    if isinstance(like, bool):
        if not isinstance(value, bool):
            raise TypeError
        return value
    if isinstance(like, int) and not isinstance(like, bool):
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise TypeError
        return int(value)
    if isinstance(like, float) or like is None:
        if like is None and value is None:
            return None
        if isinstance(value, bool):
            raise TypeError
        return float(value)
    if isinstance(like, str):
        if not isinstance(value, str):
            raise TypeError
        return value
    if isinstance(like, (tuple, list)):
        if not isinstance(value, (list, tuple)):
            raise TypeError
        if like and all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in like):
            kind = float if any(isinstance(x, float) for x in like) else int
            return tuple(kind(x) for x in value)
        return tuple(value)
    return value


PRESETS = {
    "desk": {},
    "paper": {
        "diffusion": {"base_width": 32, "time_dim": 128, "groups": 8, "train_steps": 5,
                      "weighting": "none"},
        "extractor": {"width_mult": 1.0},
        "training": {"epochs": 320, "batch_size": 160, "crop_frames": 200},
    },
}


def preset(name: str = "desk") -> RunConfig:
    if name not in PRESETS:
        raise ConfigError([f"unknown preset '{name}' (choose from {sorted(PRESETS)})"])
    return RunConfig.from_dict(copy.deepcopy(PRESETS[name]))


def apply_ablation(cfg: RunConfig, ablation: Optional[str]) -> RunConfig:
    """Return ``cfg`` with one of the ablation toggles switched."""
    if ablation is None:
        return cfg
    toggles = {
        "no-unified": {"unified": False},
        "no-denoiser": {"use_denoiser": False},
        "no-enh-loss": {"use_enh_loss": False},
        "no-hierarchical": {"hierarchical": False},
        "baseline": {"baseline": True},
    }
    if ablation not in toggles:
        raise ConfigError([f"unknown ablation '{ablation}' (choose from {list(ABLATIONS)})"])
    return cfg.replace(training=toggles[ablation])


def load_config(path=None, base: str = "desk") -> RunConfig:
    """Read a YAML/JSON config document layered over a preset."""
    d = preset(base).to_dict()
    if path is not None:
        with open(path) as fh:
            try:
                user = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError([f"{path}: {exc}"]) from None
        if not isinstance(user, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        problems = []
        for name, values in user.items():
            if name not in d:
                problems.append(f"unknown section '{name}'")
            elif not isinstance(values, dict):
                problems.append(f"section '{name}' must be a mapping")
            else:
                d[name].update(values)
        if problems:
            # re-validate to gather key-level problems in the same report
            try:
                RunConfig.from_dict(user)
            except ConfigError as exc:
                problems = sorted(set(problems) | set(exc.problems))
            raise ConfigError(problems)
    cfg = RunConfig.from_dict(d)
    env_seed = os.environ.get("DIFFSV_SEED")
    if env_seed is not None:
        try:
            cfg = cfg.replace(training={"seed": int(env_seed)})
        except ValueError:
            raise ConfigError([f"DIFFSV_SEED must be an integer, got {env_seed!r}"]) from None
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
