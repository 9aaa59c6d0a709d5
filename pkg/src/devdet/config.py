"""Run configuration: one YAML file covering every pipeline stage.

All randomness flows from ``RunConfig.seed`` through named substreams
(``substream(seed, "pretrain")`` etc.), so changing one stage's settings
never perturbs the random draws of another stage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from .datagen import BenchmarkConfig, ConfigError, DomainSpec, default_benchmark_config
from .detector import TrainConfig
from .ffdev import Stage1Config
from .mining import MiningConfig, Strategy

STREAMS = ("benchmark", "pretrain", "pretrain.init", "stage1", "stage1.init", "dictionary", "daft", "daft_p")


def substream(root: int, name: str) -> int:
    """Deterministic 63-bit seed for a named stage."""
    digest = hashlib.sha256(f"{int(root)}/{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class DictConfig:
    num_atoms: int | None = None  # None -> min(64, N // 4)
    lambda_l1: float = 0.1
    percentiles: tuple[float, float] = (5.0, 95.0)

    def validate(self) -> list[str]:
        errs = []
        if self.num_atoms is not None and self.num_atoms < 1:
            errs.append("dictionary.num_atoms must be >= 1")
        if self.lambda_l1 < 0:
            errs.append("dictionary.lambda_l1 must be >= 0")
        lo, hi = self.percentiles
        if not 0 <= lo < hi <= 100:
            errs.append("dictionary.percentiles must satisfy 0 <= lo < hi <= 100")
        return errs


@dataclass
class DaftConfig:
    lr_scale: float = 0.1  # stage-2 learning rate = lr_scale * train.learning_rate
    epochs: int = 10
    base_dose: float = 0.25

    def validate(self) -> list[str]:
        errs = []
        if not self.lr_scale > 0:
            errs.append("daft.lr_scale must be > 0")
        if self.epochs < 0:
            errs.append("daft.epochs must be >= 0")
        if not 0 <= self.base_dose <= 1:
            errs.append("daft.base_dose must be in [0, 1]")
        return errs


@dataclass
class RunConfig:
    benchmark: BenchmarkConfig = field(default_factory=default_benchmark_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    mining: MiningConfig = field(default_factory=MiningConfig)
    dictionary: DictConfig = field(default_factory=DictConfig)
    daft: DaftConfig = field(default_factory=DaftConfig)
    threshold: float = 0.5
    out_dir: str = "runs/default"
    seed: int = 0

    # -- derived per-stage configs --------------------------------------------

    def seed_for(self, stream: str) -> int:
        if stream not in STREAMS:
            raise KeyError(f"unknown seed stream {stream!r}")
        return substream(self.seed, stream)

    def benchmark_config(self) -> BenchmarkConfig:
        return replace(self.benchmark, seed=self.seed_for("benchmark"))

    def pretrain_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed_for("pretrain"))

    def stage1_config(self) -> Stage1Config:
        return replace(self.stage1, seed=self.seed_for("stage1"))

    def daft_config(self, stream: str = "daft") -> TrainConfig:
        return replace(
            self.train,
            learning_rate=self.train.learning_rate * self.daft.lr_scale,
            epochs=self.daft.epochs,
            seed=self.seed_for(stream),
        )

    # -- validation / serialization -------------------------------------------

    def validate(self) -> list[str]:
        errs = []
        errs += self.benchmark.validate()
        errs += [f"train: {e}" for e in self.train.validate()]
        errs += [f"stage1: {e}" for e in self.stage1.validate()]
        errs += self.dictionary.validate()
        errs += self.daft.validate()
        m = self.mining
        for name in ("k_hard_fake", "k_easy_real"):
            v = getattr(m, name)
            if v is not None and v < 1:
                errs.append(f"mining.{name} must be >= 1")
        if not 0 < self.threshold < 1:
            errs.append("threshold must be in (0, 1)")
        if self.seed < 0:
            errs.append("seed must be >= 0")
        return errs

    def check(self) -> "RunConfig":
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self

    def to_dict(self) -> dict:
        d = {
            "benchmark": self.benchmark.to_dict(),
            "train": asdict(self.train),
            "stage1": asdict(self.stage1),
            "mining": {**asdict(self.mining), "strategy": Strategy(self.mining.strategy).value},
            "dictionary": {**asdict(self.dictionary), "percentiles": list(self.dictionary.percentiles)},
            "daft": asdict(self.daft),
            "threshold": self.threshold,
            "out_dir": self.out_dir,
            "seed": self.seed,
        }
        # stage seeds are derived, never configured
        for key in ("train", "stage1"):
            d[key].pop("seed")
        d["benchmark"].pop("seed")
        return d

    def hash(self) -> str:
        """Hash of everything that influences artifacts (out_dir excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


# -- loading --------------------------------------------------------------------


def _build(cls, raw: Any, section: str, errs: list[str], skip: tuple[str, ...] = (), template=None):
    """Instantiate dataclass ``cls`` from a mapping, recording problems.

    Missing keys fall back to ``template`` (default: ``cls()``).
    """
    defaults = cls() if template is None else template
    if raw is None:
        return defaults
    if not isinstance(raw, dict):
        errs.append(f"{section}: expected a mapping, got {type(raw).__name__}")
        return defaults
    known = {f.name for f in fields(cls)} - set(skip)
    for key in raw:
        if key not in known:
            errs.append(f"{section}: unknown key {key!r}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in raw or f.name in skip:
            continue
        value = raw[f.name]
        default = getattr(defaults, f.name)
        kwargs[f.name] = _coerce(value, default, f"{section}.{f.name}", errs)
    try:
        return replace(defaults, **kwargs)
    except (TypeError, ValueError) as exc:
        errs.append(f"{section}: {exc}")
        return defaults


def _coerce(value, default, where: str, errs: list[str]):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errs.append(f"{where}: expected true/false, got {value!r}")
            return default
        return value
    if isinstance(default, Strategy):
        try:
            return Strategy(value)
        except ValueError:
            errs.append(f"{where}: must be one of {[s.value for s in Strategy]}, got {value!r}")
            return default
    if isinstance(default, int) or (default is None and isinstance(value, int)):
        if value is None and default is None:
            return None
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append(f"{where}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append(f"{where}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            errs.append(f"{where}: expected a list of {len(default)} values, got {value!r}")
            return default
        return tuple(float(v) if isinstance(default[0], float) else v for v in value)
    return value


DOMAIN_REQUIRED = ("domain_id", "texture_kind", "color_mean", "trace_amplitude", "trace_kind")
DOMAIN_TEMPLATE = DomainSpec(0, "stripes", (0.5, 0.5, 0.5), 0.03, 0.1, "ellipse")


def _benchmark(raw: Any, errs: list[str]) -> BenchmarkConfig:
    base = default_benchmark_config()
    if raw is None:
        return base
    if not isinstance(raw, dict):
        errs.append("benchmark: expected a mapping")
        return base
    known = {"domains", "images_per_domain_per_class", "image_size", "holdout_domain_ids"}
    for key in raw:
        if key not in known:
            errs.append(f"benchmark: unknown key {key!r}" + (" (the benchmark seed is derived from the root seed)" if key == "seed" else ""))
    domains = base.domains
    if "domains" in raw:
        domains = []
        for i, d in enumerate(raw["domains"] or []):
            where = f"benchmark.domains[{i}]"
            if isinstance(d, dict):
                for key in DOMAIN_REQUIRED:
                    if key not in d:
                        errs.append(f"{where}: missing required key {key!r}")
            spec = _build(DomainSpec, d, where, errs, template=DOMAIN_TEMPLATE)
            if isinstance(d, dict) and isinstance(d.get("color_mean"), (list, tuple)):
                spec = replace(spec, color_mean=tuple(float(c) for c in d["color_mean"]))
            domains.append(spec)
        domains = tuple(domains)
    sizes = {
        key: _coerce(raw.get(key, getattr(base, key)), getattr(base, key), f"benchmark.{key}", errs)
        for key in ("images_per_domain_per_class", "image_size")
    }
    holdout = tuple(raw.get("holdout_domain_ids", base.holdout_domain_ids) or ())
    return BenchmarkConfig(domains, seed=base.seed, holdout_domain_ids=holdout, **sizes)


SECTIONS = {"benchmark", "train", "stage1", "mining", "dictionary", "daft", "threshold", "out_dir", "seed"}


def from_dict(raw: dict) -> RunConfig:
    """Build and validate a RunConfig; every violation is reported at once."""
    errs: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config file must contain a mapping at the top level"])
    for key in raw:
        if key not in SECTIONS:
            errs.append(f"unknown top-level key {key!r}")
    defaults = RunConfig()
    cfg = RunConfig(
        benchmark=_benchmark(raw.get("benchmark"), errs),
        train=_build(TrainConfig, raw.get("train"), "train", errs, skip=("seed",)),
        stage1=_build(Stage1Config, raw.get("stage1"), "stage1", errs, skip=("seed",)),
        mining=_build(MiningConfig, raw.get("mining"), "mining", errs),
        dictionary=_build(DictConfig, raw.get("dictionary"), "dictionary", errs),
        daft=_build(DaftConfig, raw.get("daft"), "daft", errs),
        threshold=_coerce(raw.get("threshold", defaults.threshold), defaults.threshold, "threshold", errs),
        out_dir=str(raw.get("out_dir", defaults.out_dir)),
        seed=_coerce(raw.get("seed", defaults.seed), defaults.seed, "seed", errs),
    )
    for section in ("train", "stage1"):
        if isinstance(raw.get(section), dict) and "seed" in raw[section]:
            errs.append(f"{section}: unknown key 'seed' (stage seeds are derived from the root seed)")
    errs += cfg.validate()
    if errs:
        raise ConfigError(errs)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"{path}: config file not found"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError([f"{path}: not valid YAML ({exc})"]) from None
    return from_dict(raw or {})


def with_overrides(cfg: RunConfig, seed: int | None = None, out_dir: str | None = None, stage_epochs: int | None = None) -> RunConfig:
    """Apply command-line overrides; ``stage_epochs`` sets every training stage's epochs."""
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out_dir is not None:
        cfg = replace(cfg, out_dir=str(out_dir))
    if stage_epochs is not None:
        cfg = replace(
            cfg,
            train=replace(cfg.train, epochs=stage_epochs),
            stage1=replace(cfg.stage1, epochs=stage_epochs),
            daft=replace(cfg.daft, epochs=stage_epochs),
        )
    return cfg.check()


__all__ = [
    "ConfigError",
    "DaftConfig",
    "DictConfig",
    "RunConfig",
    "from_dict",
    "load_config",
    "substream",
    "with_overrides",
]
