"""YAML run configuration: one section per component plus a mandatory seed.

Unknown keys are rejected so typos fail loudly. ``dump_config`` emits every
field, which makes parse -> emit -> parse a fixed point.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .diffusion import SamplerKind, build_schedule
from .engine import EngineConfig
from .models import GmmSpec, ring_gmm
from .numerics import make_rng
from .trainer import TrainConfig
from .verifier import VerifierConfig


class ConfigError(ValueError):
    pass


@dataclass
class GmmSection:
    n_components: int = 8
    radius: float = 2.0
    sigma: float = 0.2

    def build(self) -> GmmSpec:
        return ring_gmm(self.n_components, self.radius, self.sigma)


@dataclass
class ModelSection:
    kind: str = "layered"              # "layered" or "analytic"
    n_layers: int = 8
    width: int = 64
    time_embed_dim: int = 8
    weights: str = "weights.bin"       # relative paths resolve against the config file


@dataclass
class ScheduleSection:
    kind: str = "linear"
    T: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.4

    def build(self):
        return build_schedule(self.kind, self.T, self.beta_start, self.beta_end)


@dataclass
class TrainerSection:
    steps: int = 5000
    batch: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def build(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **asdict(self))


@dataclass
class EngineSection:
    draft: str = "taylor"
    order: int = 1
    anchor_gap: int = 2
    sampler: str = "ddim"
    eta: float = 0.0
    warmup: str = "full"
    grid_refresh: bool = False
    reanchor: str = "extend"
    diagnostic: bool = False
    diag_cap: int = 16
    baseline: str | None = None
    baseline_param: float | None = None
    n_samples: int = 512
    n_jobs: int = 1


@dataclass
class VerifierSection:
    tau0: float = 0.4
    decay: float = 0.3
    epsilon: float = 1e-8
    norm_kind: str = "l2"
    verify_layer: int = -1
    max_draft_len: int = 4
    substitute_recomputed: bool = False


@dataclass
class AnalysisSection:
    n_seeds: int = 8
    sweep_samples: int = 128
    reference_samples: int = 4096
    reference_seed: int = 12345
    correlation_samples: int = 64
    trajectory_samples: int = 8


SECTIONS = {
    "gmm": GmmSection, "model": ModelSection, "schedule": ScheduleSection,
    "trainer": TrainerSection, "engine": EngineSection, "verifier": VerifierSection,
    "analysis": AnalysisSection,
}


@dataclass
class RunConfig:
    seed: int
    gmm: GmmSection = field(default_factory=GmmSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    engine: EngineSection = field(default_factory=EngineSection)
    verifier: VerifierSection = field(default_factory=VerifierSection)
    analysis: AnalysisSection = field(default_factory=AnalysisSection)
    base_dir: str = field(default=".", compare=False, repr=False)

    def engine_config(self) -> EngineConfig:
        e = self.engine
        return EngineConfig(
            draft=e.draft, order=e.order, anchor_gap=e.anchor_gap,
            verifier=VerifierConfig(**asdict(self.verifier)),
            sampler=SamplerKind(e.sampler, e.eta), seed=self.seed, warmup=e.warmup,
            grid_refresh=e.grid_refresh, reanchor=e.reanchor, diagnostic=e.diagnostic, diag_cap=e.diag_cap,
            baseline=e.baseline, baseline_param=e.baseline_param)

    def weights_path(self) -> Path:
        p = Path(self.model.weights)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> "RunConfig":
        """Build every component once so bad values surface as ConfigError."""
        try:
            make_rng(self.seed)
            self.gmm.build()
            self.schedule.build()
            self.trainer.build(self.seed)
            self.engine_config()
            if self.model.kind not in ("layered", "analytic"):
                raise ValueError(f"unknown model kind {self.model.kind!r}")
            for name in ("n_samples", "n_jobs"):
                if getattr(self.engine, name) < 1:
                    raise ValueError(f"engine.{name} must be >= 1")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self


def _section(name: str, cls, raw) -> object:
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"section [{name}] must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(unknown)}")
    for k, v in raw.items():
        if isinstance(v, float) and math.isnan(v):
            raise ConfigError(f"{name}.{k} is NaN")
    return cls(**raw)


def config_from_dict(d: dict, base_dir=".") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config must be a mapping")
    unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    if "seed" not in d:
        raise ConfigError("seed is mandatory")
    seed = d["seed"]
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    secs = {n: _section(n, cls, d.get(n)) for n, cls in SECTIONS.items()}
    return RunConfig(seed=seed, base_dir=str(base_dir), **secs).validate()


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(raw or {}, base_dir=path.parent)


def config_to_dict(cfg: RunConfig) -> dict:
    out = {"seed": cfg.seed}
    for name in SECTIONS:
        out[name] = asdict(getattr(cfg, name))
    return out


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
