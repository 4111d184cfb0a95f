"""Experiment configuration: dataclasses, TOML loading and schema checks.

Every table in the file maps onto one dataclass. Keys are checked against
the dataclass fields and the type of their defaults before any work starts;
a violation raises :class:`ConfigError` carrying a dotted field path.
"""
from __future__ import annotations

import dataclasses
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli

from .errors import ConfigError
from .federated import STRATEGIES
from .model import LossWeights, ModelConfig
from .priors import PRIOR_MODES
from .synth import GeneratorSpec
from .training import OptimConfig

# where the data prior D is counted: each client's own training labels, or the union
PRIOR_SCOPES = ("client", "global")


@dataclass(frozen=True)
class SplitConfig:
    ratio: float = 0.7
    repeats: int = 10

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise ConfigError(f"ratio must lie in (0, 1), got {self.ratio}", "split.ratio")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1", "split.repeats")


@dataclass(frozen=True)
class FederatedSection:
    strategies: tuple[str, ...] = STRATEGIES
    clients: int = 5
    rounds: int = 10
    local_epochs: int = 1
    theta: float = 0.9
    alpha4: float = 0.01
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 32

    def __post_init__(self):
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy {s!r}; choose from {list(STRATEGIES)}", "federated.strategies")
        if not self.strategies:
            raise ConfigError("at least one strategy is required", "federated.strategies")
        for name in ("clients", "rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", f"federated.{name}")
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}", "federated.theta")
        if self.alpha4 < 0 or self.lr <= 0 or not 0.0 <= self.momentum < 1.0:
            raise ConfigError("need alpha4 >= 0, lr > 0 and momentum in [0, 1)", "federated")

    @property
    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.momentum, self.batch_size)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    priors_path: str | None = None
    prior_scope: str = "client"
    federated: FederatedSection = field(default_factory=FederatedSection)
    split: SplitConfig = field(default_factory=SplitConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.model.n_classes != self.generator.n_classes:
            raise ConfigError("model.n_classes must equal generator.n_classes", "model.n_classes")
        if self.model.of_size != self.generator.of_size:
            raise ConfigError("model.of_size must equal generator.of_size", "model.of_size")
        if self.prior_scope not in PRIOR_SCOPES:
            raise ConfigError(f"scope must be one of {list(PRIOR_SCOPES)}", "priors.scope")
        if self.model.prior_mode not in PRIOR_MODES:
            raise ConfigError(f"prior_mode must be one of {list(PRIOR_MODES)}", "model.prior_mode")

    def with_overrides(self, seed=None, out_dir=None, rounds=None, clients=None, strategies=None):
        """Apply command-line overrides; ``None`` leaves a value untouched."""
        fed = self.federated
        if rounds is not None:
            fed = _checked(FederatedSection, dataclasses.asdict(fed) | {"rounds": rounds}, "federated")
        if clients is not None:
            fed = _checked(FederatedSection, dataclasses.asdict(fed) | {"clients": clients}, "federated")
        if strategies:
            fed = _checked(FederatedSection, dataclasses.asdict(fed) | {"strategies": tuple(strategies)}, "federated")
        return replace(
            self,
            seed=self.seed if seed is None else seed,
            out_dir=self.out_dir if out_dir is None else str(out_dir),
            federated=fed,
        )


def sub_seed(master: int, *names) -> np.random.SeedSequence:
    """Named child seed: the same ``(master, names)`` always gives the same stream."""
    keys = [zlib.crc32(str(n).encode()) for n in names]
    return np.random.SeedSequence([int(master), *keys])


def sub_int(master: int, *names) -> int:
    return int(sub_seed(master, *names).generate_state(1)[0])


# ------------------------------------------------------------------ schema


def _coerce(value, default, path):
    """Check ``value`` against the type of ``default``; tuples come in as lists."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, (list, tuple))
        if ok and default:
            if not isinstance(default[0], str) and len(value) != len(default):
                raise ConfigError(f"expected {len(default)} entries, got {len(value)}", path)
            value = tuple(_coerce(v, default[0], f"{path}[{i}]") for i, v in enumerate(value))
        elif ok:
            value = tuple(value)
    elif default is None or isinstance(default, dict):
        ok = value is None or isinstance(value, (dict, str))
    else:
        ok = True
    if not ok:
        raise ConfigError(f"expected {type(default).__name__}, got {type(value).__name__}", path)
    return value


def _defaults(cls) -> dict:
    out = {}
    for f in fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def _checked(cls, table: dict, path: str, nested: dict | None = None):
    nested = nested or {}
    defaults = _defaults(cls)
    kwargs = {}
    for key, value in table.items():
        where = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown key {key!r}", where)
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError("expected a table", where)
            kwargs[key] = _checked(nested[key], value, where)
        else:
            kwargs[key] = _coerce(value, defaults[key], where)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), path or "<root>") from exc


_TOP = {"seed", "generator", "model", "priors", "federated", "split", "output"}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed config table and build the :class:`ExperimentConfig`."""
    for key in raw:
        if key not in _TOP:
            raise ConfigError(f"unknown key {key!r}", key)
    for key in _TOP - {"seed"}:
        if key in raw and not isinstance(raw[key], dict):
            raise ConfigError("expected a table", key)
    seed = _coerce(raw.get("seed", 0), 0, "seed")
    if seed < 0:
        raise ConfigError("seed must be non-negative", "seed")
    gen_table = dict(raw.get("generator", {}))
    gen = _checked(GeneratorSpec, gen_table | {"seed": gen_table.get("seed", 0)}, "generator")
    model_table = dict(raw.get("model", {}))
    for key in ("n_classes", "of_size"):
        model_table.setdefault(key, getattr(gen, key))
    model = _checked(ModelConfig, model_table, "model", nested={"loss_weights": LossWeights})
    priors = raw.get("priors", {})
    unknown = set(priors) - {"path", "scope"}
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}", f"priors.{sorted(unknown)[0]}")
    priors_path = _coerce(priors["path"], "", "priors.path") if "path" in priors else None
    scope = _coerce(priors.get("scope", "client"), "", "priors.scope")
    fed = _checked(FederatedSection, raw.get("federated", {}), "federated")
    split = _checked(SplitConfig, raw.get("split", {}), "split")
    output = raw.get("output", {})
    if set(output) - {"out_dir"}:
        key = sorted(set(output) - {"out_dir"})[0]
        raise ConfigError(f"unknown key {key!r}", f"output.{key}")
    out_dir = _coerce(output.get("out_dir", "runs/default"), "", "output.out_dir")
    return ExperimentConfig(seed, gen, model, priors_path, scope, fed, split, out_dir)


def load_config(path) -> ExperimentConfig:
    """Read and validate a TOML experiment file.

    A relative ``priors.path`` is resolved against the config file's folder.
    """
    path = Path(path)
    try:
        raw = tomli.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"no such file: {path}", "<file>") from exc
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}", "<file>") from exc
    cfg = config_from_dict(raw)
    if cfg.priors_path and not Path(cfg.priors_path).is_absolute():
        cfg = replace(cfg, priors_path=str(path.parent / cfg.priors_path))
    return cfg
