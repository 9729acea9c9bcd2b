"""Run configuration: `key = value` files with sections, overridable from the command line."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .learn.losses import MODES, SEM_WEIGHT, SSL_WEIGHTS
from .learn.params import LR_END, LR_START
from .learn.train import IMAGE_SAMPLING, TrainConfig
from .render import OCCLUSION_EPS_FRACTION
from .scenegen import DEFAULT_CLASSES


class ConfigError(ValueError):
    pass


# section -> keys accepted in that section
SECTIONS = {
    "data": ("data_dir", "n_train", "n_test", "image_size"),
    "model": ("k", "n_classes", "d", "n_planes", "hidden"),
    "train": ("mode", "total_steps", "batch_rays", "n_samples", "image_sampling", "semantic", "lr_start",
              "lr_end", "sem_weight", "checkpoint_every", "log_every"),
    "run": ("seed", "out", "threads"),
}


@dataclass(frozen=True)
class Config:
    data_dir: str = "data"
    n_train: int = 8
    n_test: int = 2
    image_size: int = 64
    k: int = 8
    n_classes: int = 6
    d: int = 8
    n_planes: int = 16
    hidden: int = 32
    mode: str = "with_gt_depth"
    total_steps: int = 20000
    batch_rays: int = 1024
    n_samples: int = 8
    image_sampling: str = "schedule"
    semantic: str = "surface"
    lr_start: float = LR_START
    lr_end: float = LR_END
    sem_weight: float = SEM_WEIGHT
    checkpoint_every: int = 500
    log_every: int = 100
    seed: int = 0
    out: str = "out"
    threads: int = 1

    # fixed constants, reported for reference only
    ssl_weights = SSL_WEIGHTS
    occlusion_eps_fraction = OCCLUSION_EPS_FRACTION

    def __post_init__(self):
        positive = ("n_train", "image_size", "k", "d", "n_planes", "hidden", "total_steps", "batch_rays",
                    "n_samples", "checkpoint_every", "log_every", "threads")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_test < 0:
            raise ConfigError("n_test must be >= 0")
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if not 2 <= self.n_classes <= len(DEFAULT_CLASSES):
            raise ConfigError(f"n_classes must lie in [2, {len(DEFAULT_CLASSES)}]")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {', '.join(MODES)}")
        if self.image_sampling not in IMAGE_SAMPLING:
            raise ConfigError(f"image_sampling must be one of {', '.join(IMAGE_SAMPLING)}")
        if self.semantic not in ("surface", "uniform"):
            raise ConfigError("semantic must be surface or uniform")
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if self.sem_weight < 0:
            raise ConfigError("sem_weight must be >= 0")

    def train_config(self, out_dir: str | Path | None = None) -> TrainConfig:
        return TrainConfig(
            data_dir=self.data_dir, out_dir=str(out_dir if out_dir is not None else self.out), mode=self.mode,
            total_steps=self.total_steps, batch_rays=self.batch_rays, n_samples=self.n_samples, k=self.k,
            d=self.d, n_planes=self.n_planes, hidden=self.hidden, n_classes=self.n_classes,
            sem_weight=self.sem_weight, lr_start=self.lr_start, lr_end=self.lr_end,
            image_sampling=self.image_sampling, semantic=self.semantic, seed=self.seed,
            checkpoint_every=self.checkpoint_every, log_every=self.log_every,
        )

    def with_overrides(self, **values) -> "Config":
        values = {k: v for k, v in values.items() if v is not None}
        unknown = set(values) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return replace(self, **values)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e


def _convert(name: str, raw: str):
    kind = {f.name: f.type for f in fields(Config)}[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from e
    return raw.strip()


def parse_config(text: str, base: Config = Config()) -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from e
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            values[key] = _convert(key, raw)
    return base.with_overrides(**values)


def load_config(path: str | Path | None, **overrides) -> Config:
    cfg = Config()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = parse_config(text, cfg)
    return cfg.with_overrides(**overrides)


def dump_config(cfg: Config) -> str:
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {getattr(cfg, k)}" for k in keys]
        lines.append("")
    return "\n".join(lines)
