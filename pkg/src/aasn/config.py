"""Run configuration: dataclass sections serialized as ``key = value`` INI text.

Every checkpoint and report embeds :meth:`RunConfig.to_text`, so a run can be
repeated from its artifacts alone.  Paths may also come from the environment
(``AASN_DATA_DIR``, ``AASN_RUN_DIR``); nothing else does.
"""

from __future__ import annotations

import configparser
import copy
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .model import ModelConfig
from .synthdata import PhantomSpec


@dataclass
class DataConfig:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 250
    n_test: int = 500
    image_hw: tuple = (128, 224)
    lesion_prob: float = 0.4
    max_lesions: int = 2
    pose_magnitude: float = 1.0
    nuisance_magnitude: float = 1.25
    lesion_contrast: float = 0.2
    lesion_width_px: float = 2.5
    noise_sigma: float = 0.02
    max_variants: int = 3
    margin_frac: float = 0.1
    tps_reg: float = 1e-3

    @property
    def n_images(self) -> int:
        return self.n_train + self.n_val + self.n_test

    @property
    def fractions(self) -> tuple:
        n = self.n_images
        return self.n_train / n, self.n_val / n, self.n_test / n

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            seed=self.seed, image_hw=tuple(self.image_hw), n_images=self.n_images,
            lesion_prob=self.lesion_prob, max_lesions=self.max_lesions,
            pose_magnitude=self.pose_magnitude, nuisance_magnitude=self.nuisance_magnitude,
            lesion_contrast=self.lesion_contrast, lesion_width_px=self.lesion_width_px,
            noise_sigma=self.noise_sigma, max_variants=self.max_variants,
        )


@dataclass
class TrainConfig:
    seed: int = 0
    epochs: int = 12
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 0.5
    cl_warmup_epochs: int = 4  # lam ramps linearly, full from this epoch on
    margin: float = 0.5
    dilation_radius: float = 12.0
    reduction: str = "mean"
    max_train: int = 0  # 0: use the whole train split


@dataclass
class EvalConfig:
    split: str = "test"
    ambiguity_radius: float = 12.0
    n_png: int = 0


@dataclass
class PathsConfig:
    data_dir: str = "data"
    run_dir: str = "runs/default"


SECTIONS = {"model": ModelConfig, "data": DataConfig, "train": TrainConfig, "eval": EvalConfig, "paths": PathsConfig}
ENV_PATHS = {"data_dir": "AASN_DATA_DIR", "run_dir": "AASN_RUN_DIR"}

# FF / FA / CL / projection flags of the ablation rows
VARIANTS = {
    "baseline": dict(fusion="none", align="image", contrastive="off"),
    "ff": dict(fusion="inside_transition", align="image", contrastive="off"),
    "ff_fa": dict(fusion="inside_transition", align="feature", contrastive="off"),
    "ff_fa_cl_noproj": dict(fusion="inside_transition", align="feature", contrastive="on_no_projection"),
    "full": dict(fusion="inside_transition", align="feature", contrastive="on_with_projection"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> None:
        self.model.validate()
        self.data.phantom_spec().validate()
        t = self.train
        if t.epochs < 1 or t.batch_size < 1 or t.cl_warmup_epochs < 0:
            raise ConfigError("epochs and batch_size must be >= 1, cl_warmup_epochs >= 0")
        if t.lr <= 0 or not (0 <= t.beta1 < 1 and 0 <= t.beta2 < 1):
            raise ConfigError("lr must be positive and betas in [0, 1)")
        if t.reduction not in ("mean", "sum"):
            raise ConfigError(f"reduction must be mean or sum, got {t.reduction!r}")
        if t.dilation_radius <= 0 or self.eval.ambiguity_radius <= 0:
            raise ConfigError("dilation_radius and ambiguity_radius must be positive")
        if min(self.data.n_train, self.data.n_val, self.data.n_test) < 1:
            raise ConfigError("every split needs at least one sample")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError(f"eval split must be train, val or test, got {self.eval.split!r}")
        if not 0 <= self.data.margin_frac < 1 or self.data.tps_reg < 0:
            raise ConfigError("margin_frac must be in [0, 1) and tps_reg >= 0")

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for sec, obj in self.sections():
            cp[sec] = {f.name: _fmt(getattr(obj, f.name)) for f in fields(obj)}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    def sections(self):
        return [(name, getattr(self, name)) for name in SECTIONS]

    def set(self, dotted: str, value: str) -> None:
        sec, _, key = dotted.partition(".")
        if sec not in SECTIONS or not key:
            raise ConfigError(f"override {dotted!r} must look like section.key with section in {list(SECTIONS)}")
        obj = getattr(self, sec)
        kinds = {f.name: f for f in fields(obj)}
        if key not in kinds:
            raise ConfigError(f"unknown key {key!r} in section [{sec}]")
        setattr(obj, key, _parse(kinds[key], value, f"{sec}.{key}"))

    def apply_variant(self, name: str) -> None:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        for k, v in VARIANTS[name].items():
            setattr(self.model, k, v)

    def copy(self) -> "RunConfig":
        return copy.deepcopy(self)

    @classmethod
    def from_text(cls, text: str, env: bool = True) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        cfg = cls()
        for sec in cp.sections():
            if sec not in SECTIONS:
                raise ConfigError(f"unknown section [{sec}]")
            for key, val in cp[sec].items():
                cfg.set(f"{sec}.{key}", val)
        if env:
            cfg.apply_env()
        return cfg

    @classmethod
    def load(cls, path, env: bool = True) -> "RunConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        return cls.from_text(text, env)

    def apply_env(self) -> None:
        for key, var in ENV_PATHS.items():
            if os.environ.get(var):
                setattr(self.paths, key, os.environ[var])


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return "x".join(str(i) for i in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(f, value: str, where: str):
    kind = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    value = value.strip()
    try:
        if kind == "tuple":
            return tuple(int(p) for p in value.lower().replace(",", "x").split("x"))
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return value.lower() in ("true", "1", "yes")
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {value!r} as {kind}") from None
    return value
