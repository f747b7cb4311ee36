"""Run configuration: TOML files with [domains], [dst], [policy], [trpo] and [experiment] sections."""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .dst import DstConfig
from .env import DEFAULT_NOISE_P, DomainSpec, RewardConfig, get_domain, load_domain_file
from .nn import ConfigurationError
from .policy import PolicyConfig
from .trpo import Schedule, TrpoConfig

MODES = ("single", "mtl", "tl")
DESK_DOMAINS = ("bus", "movie", "rest", "rest_slot", "rest_style", "weather")


@dataclass
class DomainsConfig:
    names: list[str] = field(default_factory=lambda: list(DESK_DOMAINS))
    files: list[str] = field(default_factory=list)  # extra domain definitions (TOML)
    noise_p: float = DEFAULT_NOISE_P
    step_reward: float = -1.0
    success_bonus: float = 30.0
    max_turns: int = 15

    def specs(self, base: Path | None = None) -> list[DomainSpec]:
        try:
            out = [get_domain(n) for n in self.names]
        except KeyError as exc:
            raise ConfigurationError(f"[domains] {exc.args[0]}") from None
        for f in self.files:
            p = Path(f)
            try:
                out.append(load_domain_file(p if p.is_absolute() or base is None else base / p))
            except (OSError, KeyError, ValueError) as exc:
                raise ConfigurationError(f"[domains] bad domain file {f}: {exc}") from exc
        if len({d.name for d in out}) != len(out):
            raise ConfigurationError("duplicate domain names in [domains]")
        return out

    @property
    def reward(self) -> RewardConfig:
        return RewardConfig(self.step_reward, self.success_bonus, self.max_turns)


@dataclass
class ExperimentConfig:
    modes: list[str] = field(default_factory=lambda: list(MODES))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    budget: int = 3000
    checkpoint_interval: int = 250
    eval_dialogs: int = 200
    success_cut: int = 1000
    rule_episodes: int = 2000
    tl_targets: list[str] = field(default_factory=list)  # empty: leave-one-out over every domain
    out_dir: str = "runs/desk"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigurationError("experiment needs at least one seed")
        if self.budget < self.checkpoint_interval:
            raise ConfigurationError("budget must be >= checkpoint_interval")
        bad = [m for m in self.modes if m not in MODES]
        if bad:
            raise ConfigurationError(f"unknown modes {bad}; choose from {MODES}")


@dataclass
class RunConfig:
    domains: DomainsConfig = field(default_factory=DomainsConfig)
    dst: DstConfig = field(default_factory=DstConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    trpo: TrpoConfig = field(default_factory=TrpoConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    base_dir: Path | None = None

    def domain_specs(self) -> list[DomainSpec]:
        return self.domains.specs(self.base_dir)

    def schedule(self) -> Schedule:
        e = self.experiment
        return Schedule(e.budget, e.checkpoint_interval, e.eval_dialogs, self.domains.noise_p, self.domains.reward)


def preset(scale: str = "desk") -> RunConfig:
    if scale == "desk":
        return RunConfig()
    if scale == "paper":
        return RunConfig(dst=DstConfig.paper(), policy=PolicyConfig.paper(),
                         experiment=ExperimentConfig(seeds=list(range(10)), budget=10000, checkpoint_interval=1000,
                                                     success_cut=2000, out_dir="runs/paper"))
    raise ConfigurationError(f"unknown scale {scale!r}")


SECTIONS = {"domains": DomainsConfig, "dst": DstConfig, "policy": PolicyConfig, "trpo": TrpoConfig,
            "experiment": ExperimentConfig}


def _merge(obj, section: str, raw: dict[str, Any]):
    known = {f.name for f in fields(obj)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"[{section}] unknown keys: {', '.join(unknown)}")
    try:
        return replace(obj, **raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"[{section}] {exc}") from exc


def load_config(path: str | Path | None = None, scale: str = "desk") -> RunConfig:
    """Scale preset, overridden by whatever the TOML file sets."""
    cfg = preset(scale)
    if path is None:
        return cfg
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    unknown = sorted(set(raw) - set(SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown config sections: {', '.join(unknown)}")
    for section in SECTIONS:
        if section in raw:
            setattr(cfg, section, _merge(getattr(cfg, section), section, raw[section]))
    cfg.base_dir = path.parent
    return cfg
