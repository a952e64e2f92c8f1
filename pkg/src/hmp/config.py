"""Configuration: model extents, per-stage hyperparameters, profiles and file loading.

Resolution order, later wins: built-in defaults, profile, config file, flags.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields, replace

from hmp.data.synthetic import GenConfig

PROFILES = ("desk", "paper")


@dataclass(frozen=True)
class ModelDims:
    T: int = 16
    d_f: int = 32
    d_dem: int = 12
    n_icd: int = 128
    n_drug: int = 64
    d_note: int = 32
    max_stays: int = 3
    d_r: int = 16

    @classmethod
    def from_gen(cls, gen: GenConfig, d_r: int) -> "ModelDims":
        return cls(gen.T, gen.d_f, gen.d_dem, gen.n_icd, gen.n_drug, gen.d_note, gen.max_stays, d_r)


@dataclass(frozen=True)
class StayTrainConfig:
    lr: float = 5e-3
    epochs: int = 20
    batch_size: int = 32
    weight_decay: float = 1e-8
    seed: int = 0


@dataclass(frozen=True)
class AdmissionTrainConfig:
    lr: float = 3e-3
    epochs: int = 30
    batch_size: int = 64
    weight_decay: float = 1e-8
    lam: float = 0.1
    tau: float = 0.1
    mask_rate: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")


@dataclass(frozen=True)
class FinetuneConfig:
    lr: float = 0.1
    batch_size: int = 32
    weight_decay: float = 1e-2
    max_epochs: int = 30
    patience: int = 5
    threshold: float = 0.5
    optimizer: str = "sgd"


@dataclass
class Config:
    """Flat view of every tunable, as read from profiles, files and flags."""

    profile: str = "desk"
    seed: int = 0
    # data generation
    n_patients: int = 500
    max_admissions: int = 3
    max_stays: int = 3
    T: int = 16
    d_f: int = 32
    d_dem: int = 12
    n_icd: int = 128
    n_drug: int = 64
    d_note: int = 32
    latent_dim: int = 8
    sparsity: float = 0.3
    # model
    d_r: int = 16
    # stage 1
    stay_lr: float = 5e-3
    stay_epochs: int = 20
    stay_batch: int = 32
    stay_weight_decay: float = 1e-8
    # stage 2
    adm_lr: float = 3e-3
    adm_epochs: int = 30
    adm_batch: int = 64
    adm_weight_decay: float = 1e-8
    lam: float = 0.1
    tau: float = 0.1
    mask_rate: float = 0.15
    # fine-tuning
    ft_lr: float = 0.1
    ft_batch: int = 32
    ft_weight_decay: float = 1e-2
    ft_max_epochs: int = 30
    ft_patience: int = 5
    ft_threshold: float = 0.5
    ft_grid: bool = False
    log_file: str = ""

    def validate(self):
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if self.d_r <= 0:
            raise ValueError("d_r must be positive")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must be in [0, 1]")
        return self

    def gen(self) -> GenConfig:
        return GenConfig(
            n_patients=self.n_patients,
            max_admissions=self.max_admissions,
            max_stays=self.max_stays,
            T=self.T,
            d_f=self.d_f,
            d_dem=self.d_dem,
            n_icd=self.n_icd,
            n_drug=self.n_drug,
            d_note=self.d_note,
            latent_dim=self.latent_dim,
            sparsity=self.sparsity,
            seed=self.seed,
        )

    def dims(self) -> ModelDims:
        return ModelDims.from_gen(self.gen(), self.d_r)

    def stay_train(self) -> StayTrainConfig:
        return StayTrainConfig(self.stay_lr, self.stay_epochs, self.stay_batch, self.stay_weight_decay, self.seed)

    def admission_train(self) -> AdmissionTrainConfig:
        return AdmissionTrainConfig(
            self.adm_lr,
            self.adm_epochs,
            self.adm_batch,
            self.adm_weight_decay,
            self.lam,
            self.tau,
            self.mask_rate,
            self.seed,
        )

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(
            self.ft_lr,
            self.ft_batch,
            self.ft_weight_decay,
            self.ft_max_epochs,
            self.ft_patience,
            self.ft_threshold,
        )

    def as_dict(self) -> dict:
        return asdict(self)


# Values reported for the full-scale setup. Extents follow the extracted
# clinical data; the batch of 4096 is the contrastive batch.
PAPER_PROFILE = dict(
    T=48,
    d_f=1318,
    d_dem=73,
    n_icd=7686,
    n_drug=1701,
    d_note=768,
    d_r=256,
    stay_lr=5e-4,
    stay_epochs=200,
    stay_batch=128,
    stay_weight_decay=1e-8,
    adm_lr=2e-5,
    adm_epochs=300,
    adm_batch=4096,
    adm_weight_decay=1e-8,
    lam=0.1,
    tau=0.1,
    mask_rate=0.15,
    ft_max_epochs=30,
    ft_patience=5,
    ft_weight_decay=1e-2,
    ft_grid=True,
)

# Fine-tuning search space used when ``ft_grid`` is on.
FINETUNE_GRID = {"batch_size": (16, 32, 64), "lr": (2e-5, 1e-4, 5e-4, 1e-3, 5e-3)}


def profile_config(name: str) -> Config:
    if name not in PROFILES:
        raise ValueError(f"unknown profile {name!r}; expected one of {PROFILES}")
    cfg = Config(profile=name)
    if name == "paper":
        cfg = replace(cfg, **PAPER_PROFILE)
    return cfg


def coerce_value(field_type, raw: str):
    kind = field_type if isinstance(field_type, type) else {"int": int, "float": float, "bool": bool, "str": str}[field_type]
    if kind is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw)


def field_types() -> dict:
    return {f.name: f.type for f in fields(Config)}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    types = field_types()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in types:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        try:
            out[key] = coerce_value(types[key], raw)
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return out


def resolve_config(profile: str | None = None, config_file=None, overrides: dict | None = None) -> Config:
    """Defaults, then profile (flag, else ``HMP_PROFILE``), then file, then flags."""
    file_values = {}
    if config_file:
        with open(config_file, encoding="utf-8") as fh:
            file_values = parse_config_text(fh.read())
    name = profile or file_values.get("profile") or os.environ.get("HMP_PROFILE") or "desk"
    cfg = profile_config(name)
    file_values.pop("profile", None)
    cfg = replace(cfg, **file_values)
    cfg = replace(cfg, **{k: v for k, v in (overrides or {}).items() if v is not None})
    return cfg.validate()
