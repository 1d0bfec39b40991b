"""Experiment configuration: pydantic models plus a flat text format.

Config files are plain ``key=value`` lines with dotted namespaces, e.g.::

    dataset.spec=blobs,n=1024,side=32,classes=10,seed=11
    target.model.mask_ratio=0.75
    pretrain.epochs=200
    grid.mask_ratio=0.1;0.5;0.9

Lists use ``;`` as the separator (a comma would collide with synthetic
dataset specs). Blank lines and ``#`` comments are ignored. A CLI flag of
the form ``--set key=value`` overrides the file.

One master seed fans out to every component through
``derive_seed(master, name)``: the SHA-256 of ``"{master}:{name}"``,
truncated to 64 bits. Component names are fixed strings (``split``,
``pretrain.target``, ``pretrain.shadow``, ``finetune``, ``score.shadow``,
``score.target``, ``baseline.*``, ``downstream``), so a full run is
reproducible from the master seed alone.
"""

from __future__ import annotations

import hashlib
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .datasets import SplitSpec
from .model import ModelConfig
from .trainer import TrainConfig


class ConfigError(Exception):
    """Malformed experiment configuration."""


def derive_seed(master: int, name: str) -> int:
    digest = hashlib.sha256(f"{master}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSection(_Section):
    spec: Optional[str] = "blobs,n=1024,side=32,classes=10,seed=11"
    path: Optional[str] = None
    format: str = "synthetic"

    @model_validator(mode="after")
    def _source_consistent(self):
        if self.format == "synthetic":
            if not self.spec:
                raise ValueError("synthetic datasets need dataset.spec")
        elif self.format in ("idx", "raw-tensor"):
            if not self.path:
                raise ValueError(f"{self.format} datasets need dataset.path")
        else:
            raise ValueError(f"unknown dataset format {self.format!r}")
        return self

    @property
    def source(self) -> str:
        return self.spec if self.format == "synthetic" else self.path


class SplitSection(_Section):
    shadow_train: int = 256
    shadow_test: int = 256
    target_train: int = 256
    target_test: int = 256
    seed: Optional[int] = None
    shadow_train_indices: Optional[list[int]] = None
    shadow_test_indices: Optional[list[int]] = None
    target_train_indices: Optional[list[int]] = None
    target_test_indices: Optional[list[int]] = None

    @model_validator(mode="after")
    def _indices_disjoint(self):
        groups = {
            "shadow_train": self.shadow_train_indices,
            "shadow_test": self.shadow_test_indices,
            "target_train": self.target_train_indices,
            "target_test": self.target_test_indices,
        }
        given = {k: set(v) for k, v in groups.items() if v is not None}
        if given and len(given) != 4:
            raise ValueError("explicit split indices must be given for all four sets or none")
        names = list(given)
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                common = given[a] & given[b]
                if common:
                    raise ValueError(
                        f"split index sets {a} and {b} overlap on {sorted(common)[:5]}"
                    )
        return self

    @property
    def explicit(self) -> bool:
        return self.shadow_train_indices is not None

    def to_spec(self, master_seed: int) -> SplitSpec:
        seed = self.seed if self.seed is not None else derive_seed(master_seed, "split")
        return SplitSpec(
            shadow_train=self.shadow_train,
            shadow_test=self.shadow_test,
            target_train=self.target_train,
            target_test=self.target_test,
            seed=seed,
        )


class ModelSection(_Section):
    image_side: int = 32
    channels: int = 1
    patch_side: int = 8
    embed_dim: int = 64
    encoder_layers: int = 4
    decoder_layers: int = 4
    heads: int = 4
    mask_ratio: float = 0.75
    dropout_rate: float = 0.0

    def to_model_config(self) -> ModelConfig:
        try:
            return ModelConfig(**self.model_dump())
        except Exception as exc:
            raise ConfigError(str(exc)) from exc


class ShadowModelSection(_Section):
    """Shadow overrides; unset fields inherit the target model."""

    decoder_layers: Optional[int] = None
    mask_ratio: Optional[float] = None
    dropout_rate: Optional[float] = None


class TrainSection(_Section):
    epochs: int = 200
    batch_size: int = 64
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    dropout_rate: Optional[float] = None
    warmup_epochs: int = 5
    grad_clip: Optional[float] = 1.0
    loss_norm: str = "pixel"

    @field_validator("loss_norm")
    @classmethod
    def _norm_known(cls, v):
        if v not in ("pixel", "patch"):
            raise ValueError("loss_norm must be 'pixel' or 'patch'")
        return v

    def to_train_config(self, seed: int, freeze_encoder: bool = False, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs if epochs is None else epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout_rate=self.dropout_rate,
            seed=seed,
            freeze_encoder=freeze_encoder,
            warmup_epochs=self.warmup_epochs,
            grad_clip=self.grad_clip,
            loss_norm=self.loss_norm,
        )


class FinetuneSection(_Section):
    epochs: Optional[int] = None  # default: 20% of pretrain epochs
    batch_size: int = 64
    learning_rate: float = 1e-3
    warmup_epochs: int = 0
    grad_clip: Optional[float] = 1.0

    def resolved_epochs(self, pretrain_epochs: int) -> int:
        if self.epochs is not None:
            return self.epochs
        return max(1, round(0.2 * pretrain_epochs))

    def to_train_config(self, seed: int, pretrain_epochs: int, epochs: int | None = None) -> TrainConfig:
        return TrainConfig(
            epochs=self.resolved_epochs(pretrain_epochs) if epochs is None else epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=seed,
            freeze_encoder=True,
            warmup_epochs=self.warmup_epochs,
            grad_clip=self.grad_clip,
        )


class AttackSection(_Section):
    n_draws: int = 4
    scope: str = "masked-only"

    @field_validator("scope")
    @classmethod
    def _scope_known(cls, v):
        if v not in ("masked-only", "full-image"):
            raise ValueError("attack.scope must be 'masked-only' or 'full-image'")
        return v

    @field_validator("n_draws")
    @classmethod
    def _draws_positive(cls, v):
        if v < 1:
            raise ValueError("attack.n_draws must be >= 1")
        return v


class BaselineSection(_Section):
    downstream_spec: Optional[str] = None  # default derived from dataset.spec
    downstream_n: int = 512
    k: int = 10
    classifier_epochs: int = 300


class DefenseSection(_Section):
    """Target-side training overrides implementing the two defenses."""

    dropout_rate: Optional[float] = None
    weight_decay: Optional[float] = None


class GridSection(_Section):
    mask_ratio: Optional[list[float]] = None
    epoch_fractions: Optional[list[float]] = None
    shadow_decoder_layers: Optional[list[int]] = None
    shadow_dataset: Optional[list[str]] = None
    shadow_mask_ratio: Optional[list[float]] = None

    @model_validator(mode="after")
    def _axes_nonempty(self):
        for name, axis in self.axes().items():
            if axis is not None and len(axis) == 0:
                raise ValueError(f"grid axis {name} is present but empty")
        if self.epoch_fractions is not None:
            for f in self.epoch_fractions:
                if not (0.0 < f <= 1.0):
                    raise ValueError(f"epoch fraction {f} outside (0, 1]")
        return self

    def axes(self) -> dict:
        return {
            "mask_ratio": self.mask_ratio,
            "epoch_fraction": self.epoch_fractions,
            "shadow_decoder_layers": self.shadow_decoder_layers,
            "shadow_dataset": self.shadow_dataset,
            "shadow_mask_ratio": self.shadow_mask_ratio,
        }

    def active_axes(self) -> dict:
        return {k: v for k, v in self.axes().items() if v is not None}


class TargetSection(_Section):
    model: ModelSection = Field(default_factory=ModelSection)


class ShadowSection(_Section):
    model: ShadowModelSection = Field(default_factory=ShadowModelSection)
    dataset: Optional[DatasetSection] = None


class ExperimentConfig(_Section):
    seed: int = 0
    run_id: Optional[str] = None
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    split: SplitSection = Field(default_factory=SplitSection)
    target: TargetSection = Field(default_factory=TargetSection)
    shadow: ShadowSection = Field(default_factory=ShadowSection)
    pretrain: TrainSection = Field(default_factory=TrainSection)
    finetune: FinetuneSection = Field(default_factory=FinetuneSection)
    attack: AttackSection = Field(default_factory=AttackSection)
    baseline: BaselineSection = Field(default_factory=BaselineSection)
    defense: DefenseSection = Field(default_factory=DefenseSection)
    grid: GridSection = Field(default_factory=GridSection)

    def target_model(self) -> ModelConfig:
        return self.target.model.to_model_config()

    def shadow_model(self) -> ModelConfig:
        merged = self.target.model.model_dump()
        for key, value in self.shadow.model.model_dump().items():
            if value is not None:
                merged[key] = value
        try:
            return ModelConfig(**merged)
        except Exception as exc:
            raise ConfigError(str(exc)) from exc

    def downstream_spec(self) -> str:
        if self.baseline.downstream_spec:
            return self.baseline.downstream_spec
        if self.dataset.format != "synthetic":
            raise ConfigError(
                "baseline.downstream_spec is required when the dataset is not synthetic"
            )
        family = self.dataset.spec.split(",", 1)[0]
        seed = derive_seed(self.seed, "downstream") % (2**31)
        return f"{family},n={self.baseline.downstream_n},side={self.target.model.image_side},classes=10,seed={seed},channels={self.target.model.channels}"


# -- flat text format -----------------------------------------------------------

_LIST_SEP = ";"


def _nest(flat: dict[str, str]) -> dict:
    root: dict = {}
    for dotted, value in flat.items():
        parts = dotted.split(".")
        node = root
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"key {dotted!r} conflicts with a scalar parent")
        node[parts[-1]] = value
    return root


def _coerce_lists(tree: dict, model_cls) -> None:
    """Split ';'-joined values for fields annotated as lists."""
    for name, field_info in model_cls.model_fields.items():
        if name not in tree:
            continue
        anno = str(field_info.annotation)
        sub = tree[name]
        if isinstance(sub, dict):
            inner = field_info.annotation
            # unwrap Optional[Model]
            for arg in getattr(inner, "__args__", (inner,)):
                if isinstance(arg, type) and issubclass(arg, BaseModel):
                    _coerce_lists(sub, arg)
                    break
        elif isinstance(sub, str) and "list[" in anno:
            tree[name] = [piece for piece in sub.split(_LIST_SEP) if piece != ""]


def parse_flat(text: str) -> dict[str, str]:
    flat: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        flat[key.strip()] = value.strip()
    return flat


def config_from_flat(flat: dict[str, str]) -> ExperimentConfig:
    tree = _nest(dict(flat))
    _coerce_lists(tree, ExperimentConfig)
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    flat = parse_flat(text)
    flat.update(overrides or {})
    return config_from_flat(flat)


def _flatten(prefix: str, value, out: dict[str, str]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], out)
    elif isinstance(value, list):
        out[prefix] = _LIST_SEP.join(str(v) for v in value)
    elif value is None:
        return
    else:
        out[prefix] = repr(value) if isinstance(value, float) else str(value)


def dump_flat(cfg: ExperimentConfig) -> str:
    out: dict[str, str] = {}
    _flatten("", cfg.model_dump(), out)
    return "\n".join(f"{k}={v}" for k, v in sorted(out.items())) + "\n"


def config_fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(dump_flat(cfg).encode("utf-8")).hexdigest()[:16]
