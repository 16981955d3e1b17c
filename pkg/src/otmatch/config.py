"""Training configuration: a flat ``key = value`` text format with typed validation.

Lines starting with ``#`` are comments. Every key is optional; omitted keys
take the defaults below.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields

from .errors import ConfigError

__all__ = ["TrainConfig", "load_config", "parse_config", "format_config"]


@dataclass
class TrainConfig:
    # classes and batch geometry
    num_classes: int = 2
    batch_size: int = 4
    uratio: int = 7
    # optimisation
    total_steps: int = 20_000
    base_lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 5e-4
    ema_decay: float = 0.999
    # pseudo-labelling and losses
    teacher_temperature: float = 1.0
    threshold_momentum: float = 0.999
    w1: float = 1.0
    w2: float = 0.001
    lam: float = 0.5
    cost_momentum: float = 0.999
    cost_mode: str = "head"
    # data
    dataset: str = "two_moons"
    n_samples: int = 1000
    n_test: int = 1000
    noise: float = 0.1
    n_labels: int = 4
    mixture_dim: int = 2
    mixture_spread: float = 3.0
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    aug_noise: float = 0.1
    aug_mask_fraction: float = 0.2
    # model
    hidden: str = "64,64"
    # bookkeeping
    seed: int = 0
    eval_interval: int = 512

    @property
    def hidden_sizes(self) -> tuple[int, ...]:
        return tuple(int(h) for h in self.hidden.split(",") if h.strip())

    def validate(self) -> "TrainConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.num_classes >= 2, "num_classes must be >= 2")
        need(self.batch_size > 0, "batch_size must be positive")
        need(self.batch_size % self.num_classes == 0,
             f"batch_size {self.batch_size} must be a multiple of num_classes {self.num_classes}")
        need(self.uratio >= 1, "uratio must be >= 1")
        need(self.total_steps > 0, "total_steps must be positive")
        need(self.base_lr > 0, "base_lr must be positive")
        need(0 <= self.sgd_momentum < 1, "sgd_momentum must lie in [0, 1)")
        need(self.weight_decay >= 0, "weight_decay must be nonnegative")
        need(0 <= self.ema_decay <= 1, "ema_decay must lie in [0, 1]")
        need(self.teacher_temperature > 0, "teacher_temperature must be positive")
        need(0 <= self.threshold_momentum < 1, "threshold_momentum must lie in [0, 1)")
        need(min(self.w1, self.w2, self.lam) >= 0, "loss weights must be nonnegative")
        need(0 <= self.cost_momentum <= 1, "cost_momentum must lie in [0, 1]")
        need(self.cost_mode in ("head", "binary", "covariance"),
             "cost_mode must be head, binary or covariance")
        need(self.dataset in ("two_moons", "gaussian_mixture", "idx"),
             "dataset must be two_moons, gaussian_mixture or idx")
        need(self.n_samples > 0 and self.n_test > 0, "sample counts must be positive")
        need(self.noise >= 0 and self.aug_noise >= 0, "noise levels must be nonnegative")
        need(0 <= self.aug_mask_fraction <= 1, "aug_mask_fraction must lie in [0, 1]")
        need(self.n_labels > 0 and self.n_labels % self.num_classes == 0,
             "n_labels must be a positive multiple of num_classes")
        need(self.batch_size // self.num_classes <= self.n_labels // self.num_classes,
             "each class needs at least batch_size/num_classes labeled examples")
        need(self.eval_interval > 0, "eval_interval must be positive")
        try:
            sizes = self.hidden_sizes
        except ValueError:
            raise ConfigError(f"hidden must be comma-separated integers, got {self.hidden!r}")
        need(len(sizes) >= 1 and all(s > 0 for s in sizes), "hidden needs positive layer widths")
        if self.dataset == "two_moons":
            need(self.num_classes == 2, "two_moons has exactly 2 classes")
            need(self.n_samples % 2 == 0 and self.n_test % 2 == 0, "two_moons needs even sample counts")
        if self.dataset == "gaussian_mixture":
            need(self.n_samples % self.num_classes == 0 and self.n_test % self.num_classes == 0,
                 "gaussian_mixture sample counts must divide by num_classes")
        if self.dataset == "idx":
            need(all([self.idx_train_images, self.idx_train_labels,
                      self.idx_test_images, self.idx_test_labels]),
                 "idx dataset needs all four idx_* paths")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_CASTS = {"int": int, "float": float, "str": str}


def _convert(name, typ, raw):
    cast = _CASTS[typ if isinstance(typ, str) else typ.__name__]
    try:
        if cast is int:
            return int(raw.replace("_", ""))
        return cast(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {cast.__name__}") from None


def parse_config(text: str) -> TrainConfig:
    types = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, types[key], raw)
    return TrainConfig(**values).validate()


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())


def format_config(cfg: TrainConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_dict().items())
