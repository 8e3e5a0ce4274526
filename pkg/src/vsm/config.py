"""TOML experiment configuration.

Sections: ``[data]`` (dataset source and split), ``[model]`` (encoder and
Gaussian network settings), ``[train]`` (episode shape, optimizer, sampling
and evaluation) and ``[memory]`` (store settings). Every key is checked
against its field type; errors name the section and key.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import tomli

from .data import ClassDataset, augment_rotations, load_image_folder, synthetic_splits
from .networks import ARCHITECTURES, EncoderConfig, NetworkConfig
from .trainer import TrainConfig

PRECISION_ENV = "VSM_PRECISION"


class ConfigError(ValueError):
    """Config file missing, unparsable or with an invalid field."""


@dataclass
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "folder"
    path: str = ""
    split: list = field(default_factory=lambda: ["all", 0, 0])
    image_size: list = field(default_factory=lambda: [28, 28])
    channels: int = 1
    invert: bool = False
    rotate: bool = False  # four rotated copies of every class
    seed: int = 0
    # synthetic clusters
    n_train: int = 50
    n_val: int = 10
    n_test: int = 10
    d_img: int = 16
    samples_per_class: int = 40
    cluster_spread: float = 0.35
    n_blobs: int = 3

    @property
    def image_shape(self) -> tuple[int, int, int]:
        if self.source == "synthetic":
            return (self.d_img, self.d_img, self.channels)
        return (int(self.image_size[0]), int(self.image_size[1]), self.channels)


@dataclass
class ModelConfig:
    architecture: str = "omniglot"
    blocks: int | None = None
    channels: int = 64
    pool_padding: str | None = None
    dropout: float | None = None
    dropout_convention: str = "keep"
    batch_norm: bool = False
    hidden: int = 256
    variance_floor: float = 1e-6
    residual_mean: bool = True
    head_gain: float = 0.01
    log_var_init: float = -3.0


@dataclass
class ExperimentConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig

    def network_config(self) -> NetworkConfig:
        m = self.model
        overrides = {"image_shape": self.data.image_shape, "channels": m.channels,
                     "dropout_convention": m.dropout_convention, "batch_norm": m.batch_norm}
        for key in ("blocks", "pool_padding", "dropout"):
            if getattr(m, key) is not None:
                overrides[key] = getattr(m, key)
        encoder = EncoderConfig.for_architecture(m.architecture, **overrides)
        return NetworkConfig(
            encoder=encoder,
            hidden=m.hidden,
            variance_floor=m.variance_floor,
            residual_mean=m.residual_mean,
            head_gain=m.head_gain,
            log_var_init=m.log_var_init,
        )

    def to_dict(self) -> dict:
        return {
            "data": dataclasses.asdict(self.data),
            "model": dataclasses.asdict(self.model),
            "train": self.train.to_dict(),
        }


# [memory] keys -> TrainConfig fields
MEMORY_KEYS = {
    "alpha": "alpha",
    "cap": "memory_cap",
    "sigma": "memory_sigma",
    "samples": "n_memory_samples",
    "gumbel_temperature": "gumbel_temperature",
    "gumbel_min_temperature": "gumbel_min_temperature",
    "gumbel_decay": "gumbel_decay",
}
_TRAIN_ONLY = {f.name for f in dataclasses.fields(TrainConfig)} - set(MEMORY_KEYS.values())


def _expected_types(dc_field: dataclasses.Field) -> tuple:
    default = dc_field.default
    if default is dataclasses.MISSING and dc_field.default_factory is not dataclasses.MISSING:
        default = dc_field.default_factory()
    annotation = str(dc_field.type)
    optional = "None" in annotation
    if isinstance(default, bool):
        types = (bool,)
    elif isinstance(default, int):
        types = (int,)
    elif isinstance(default, float):
        types = (int, float)
    elif isinstance(default, str):
        types = (str,)
    elif isinstance(default, (list, tuple)):
        types = (list, str)
    elif "int" in annotation and "float" not in annotation:
        types = (int,)
    elif "float" in annotation:
        types = (int, float)
    elif "str" in annotation:
        types = (str,)
    else:
        types = (object,)
    return types, optional


def _check_value(section: str, key: str, value, dc_field: dataclasses.Field):
    types, optional = _expected_types(dc_field)
    if value is None and optional:
        return None
    ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in types)
    if not ok:
        names = "/".join(t.__name__ for t in types)
        raise ConfigError(f"[{section}] {key}: expected {names}, got {type(value).__name__} ({value!r})")
    if types == (int, float):
        return float(value)
    return value


def _build(section: str, cls, values: dict, key_map: dict | None = None, allowed: set | None = None):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        target = key_map.get(key) if key_map else key
        if target not in fields or (allowed is not None and target not in allowed):
            valid = sorted(key_map) if key_map else sorted(allowed or fields)
            raise ConfigError(f"[{section}] unknown key {key!r}; valid keys: {', '.join(valid)}")
        kwargs[target] = _check_value(section, key, value, fields[target])
    return kwargs


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    unknown = set(raw) - {"data", "model", "train", "memory"}
    if unknown:
        raise ConfigError(f"{source}: unknown section(s) {sorted(unknown)}; expected data, model, train, memory")
    for name, value in raw.items():
        if not isinstance(value, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")

    data = DataConfig(**_build("data", DataConfig, raw.get("data", {})))
    if data.source not in ("synthetic", "folder"):
        raise ConfigError(f"[data] source: expected 'synthetic' or 'folder', got {data.source!r}")
    if data.source == "folder" and not data.path:
        raise ConfigError("[data] path: required when source = 'folder'")

    model = ModelConfig(**_build("model", ModelConfig, raw.get("model", {})))
    if model.architecture not in ARCHITECTURES:
        raise ConfigError(f"[model] architecture: expected one of {sorted(ARCHITECTURES)}, got {model.architecture!r}")

    train_kwargs = _build("train", TrainConfig, raw.get("train", {}), allowed=_TRAIN_ONLY)
    train_kwargs.update(_build("memory", TrainConfig, raw.get("memory", {}), key_map=MEMORY_KEYS))
    env = os.environ.get(PRECISION_ENV)
    if env:
        train_kwargs["precision"] = env
    try:
        train = TrainConfig(**train_kwargs)
    except ValueError as exc:
        raise ConfigError(f"[train]/[memory]: {exc}") from exc
    config = ExperimentConfig(data, model, train)
    try:
        config.network_config().encoder.feature_shape()
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from exc
    return config


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def load_datasets(data: DataConfig) -> dict[str, ClassDataset]:
    if data.source == "synthetic":
        splits = synthetic_splits(
            n_train=data.n_train,
            n_val=data.n_val,
            n_test=data.n_test,
            d_img=data.d_img,
            samples_per_class=data.samples_per_class,
            cluster_spread=data.cluster_spread,
            channels=data.channels,
            n_blobs=data.n_blobs,
            seed=data.seed,
        )
    else:
        splits = load_image_folder(
            data.path,
            split_spec=data.split,
            image_size=tuple(data.image_size),
            channels=data.channels,
            seed=data.seed,
            invert=data.invert,
        )
    if data.rotate:
        splits = {k: augment_rotations(v) for k, v in splits.items()}
    return splits


# ablation grids --------------------------------------------------------------------


def _grid_values(key: str, spec: str) -> list:
    from .trainer import alpha_grid

    spec = spec.strip()
    if not spec:
        raise ConfigError(f"grid key {key!r} has no values")
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"range for {key!r} must be start:stop:step, got {spec!r}")
        try:
            start, stop, step = (float(p) for p in parts)
            return alpha_grid(start, stop, step)
        except ValueError as exc:
            raise ConfigError(f"bad range for {key!r}: {exc}") from exc
    values = []
    for item in spec.split(","):
        item = item.strip()
        for cast in (int, float):
            try:
                values.append(cast(item))
                break
            except ValueError:
                continue
        else:
            values.append(item)
    return values


GRID_KEYS = {"alpha": "alpha", "mode": "mode", "cap": "memory_cap", "seed": "seed"}


def parse_grid(spec: str) -> list[dict]:
    """``"mode=vpn,vsm;alpha=0:1:0.1"`` -> cartesian product of overrides."""
    import itertools

    axes = []
    for chunk in (spec or "").split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        if "=" not in chunk:
            raise ConfigError(f"grid entry {chunk!r} must look like key=values")
        key, values = (s.strip() for s in chunk.split("=", 1))
        if key not in GRID_KEYS:
            raise ConfigError(f"unknown grid key {key!r}; valid keys: {', '.join(sorted(GRID_KEYS))}")
        axes.append((GRID_KEYS[key], _grid_values(key, values)))
    if not axes:
        raise ConfigError("ablation grid is empty")
    names = [a[0] for a in axes]
    return [dict(zip(names, combo)) for combo in itertools.product(*(a[1] for a in axes))]
