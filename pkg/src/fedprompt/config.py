"""Run configuration: a line-oriented `key = value` file with [section]
headers, validated field by field with named errors.

The resolved configuration echoes back to disk in a canonical form that
reparses to the identical RunConfig, so a run can always be reproduced
from its own output directory.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .data import (
    DatasetSpec,
    DomainTransform,
    SyntheticDataset,
    auto_attribute_map,
    load_attribute_file,
    make_synthetic_dataset,
)
from .encoders import FrozenViTConfig, TextEmbeddingStore, load_text_embeddings, synth_text_embeddings
from .objective import ScoringConfig
from .seeding import derive_seed


class ConfigError(ValueError):
    """Invalid, unknown, or missing configuration."""


@dataclass
class RunConfig:
    # federation
    master_seed: int = 0
    rounds: int = 20
    participation_rate: float = 1.0
    local_iters: int = 5
    batch_size: int = 128
    lora_rank: int = 4
    lora_scale: float = 1.0
    lora_threshold: float = 0.5
    # optimizer
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-5
    # objective
    alpha: float = 10.0
    tau: float = 0.01
    scoring: str = "desc"
    # encoder
    d_v: int = 32
    d_t: int = 16
    depth: int = 2
    heads: int = 4
    patch_grid: int = 2
    # promptformer
    m: int = 4
    d_ff: int = 0  # 0 -> d_v // 2
    # data
    num_classes: int = 16
    attrs_per_class: int = 2
    attribute_pool_size: int = 10
    samples_per_class: int = 12
    eval_per_class: int = 4
    image_size: str = "8x8"
    noise_std: float = 0.1
    domains: str = "identity:1.0:0.0"
    attributes_file: str = ""
    embeddings_file: str = ""
    shots: int = 8
    classes_per_client: int = 2
    base_fraction: float = 0.75
    # run
    mode: str = "base2new"
    held_domain: str = ""
    precision: str = "single"
    output_dir: str = "out"


_SECTIONS: dict[str, list[str]] = {
    "federation": ["master_seed", "rounds", "participation_rate", "local_iters",
                   "batch_size", "lora_rank", "lora_scale", "lora_threshold"],
    "optimizer": ["lr", "momentum", "weight_decay"],
    "objective": ["alpha", "tau", "scoring"],
    "encoder": ["d_v", "d_t", "depth", "heads", "patch_grid"],
    "promptformer": ["m", "d_ff"],
    "data": ["num_classes", "attrs_per_class", "attribute_pool_size",
             "samples_per_class", "eval_per_class", "image_size", "noise_std",
             "domains", "attributes_file", "embeddings_file", "shots",
             "classes_per_client", "base_fraction"],
    "run": ["mode", "held_domain", "precision", "output_dir"],
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
_ALL_KEYS = {key for keys in _SECTIONS.values() for key in keys}


def _convert(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int" or kind is int:
            return int(raw)
        if kind == "float" or kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key '{key}': cannot parse {raw!r}") from exc


def parse_config(path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(path.read_text(encoding="utf-8"), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    flat: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key not in _ALL_KEYS:
                raise ConfigError(f"{path}: unknown config key '{key}' in [{section}]")
            if key in flat:
                raise ConfigError(f"{path}: duplicate config key '{key}'")
            flat[key] = value
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in _ALL_KEYS:
            raise ConfigError(f"unknown override key '{key}'")
        flat[key] = value.strip()

    cfg = RunConfig(**{key: _convert(key, raw) for key, raw in flat.items()})
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    def need(cond: bool, message: str):
        if not cond:
            raise ConfigError(message)

    need(cfg.rounds >= 0, f"rounds must be >= 0, got {cfg.rounds}")
    need(0.0 < cfg.participation_rate <= 1.0,
         f"participation_rate must be in (0, 1], got {cfg.participation_rate}")
    need(cfg.local_iters >= 1, f"local_iters must be >= 1, got {cfg.local_iters}")
    need(cfg.batch_size >= 1, f"batch_size must be >= 1, got {cfg.batch_size}")
    need(cfg.lora_rank >= 1, f"lora_rank must be >= 1, got {cfg.lora_rank}")
    need(cfg.lora_scale > 0.0, f"lora_scale must be positive, got {cfg.lora_scale}")
    need(cfg.lr > 0.0, f"lr must be positive, got {cfg.lr}")
    need(0.0 <= cfg.momentum < 1.0, f"momentum must be in [0, 1), got {cfg.momentum}")
    need(cfg.weight_decay >= 0.0, f"weight_decay must be >= 0, got {cfg.weight_decay}")
    need(cfg.alpha >= 0.0, f"alpha must be >= 0, got {cfg.alpha}")
    need(cfg.tau > 0.0, f"tau must be positive, got {cfg.tau}")
    need(cfg.scoring in ("desc", "mean_feature"),
         f"scoring must be desc or mean_feature, got '{cfg.scoring}'")
    need(cfg.d_v >= 1 and cfg.d_t >= 1, "d_v and d_t must be positive")
    need(cfg.depth >= 1, f"depth must be >= 1, got {cfg.depth}")
    need(cfg.heads >= 1, f"heads must be >= 1, got {cfg.heads}")
    need(cfg.d_v % cfg.heads == 0, f"d_v={cfg.d_v} must divide by heads={cfg.heads}")
    need(cfg.patch_grid >= 1, f"patch_grid must be >= 1, got {cfg.patch_grid}")
    need(cfg.m >= 1, f"m must be >= 1, got {cfg.m}")
    need(cfg.d_ff >= 0, f"d_ff must be >= 0, got {cfg.d_ff}")
    need(cfg.num_classes >= 2, f"num_classes must be >= 2, got {cfg.num_classes}")
    need(cfg.attrs_per_class >= 1, "attrs_per_class must be >= 1")
    need(cfg.samples_per_class >= 1, "samples_per_class must be >= 1")
    need(cfg.eval_per_class >= 1, "eval_per_class must be >= 1")
    need(cfg.noise_std >= 0.0, "noise_std must be >= 0")
    need(cfg.shots >= 1, f"shots must be >= 1, got {cfg.shots}")
    need(cfg.shots <= cfg.samples_per_class,
         f"shots={cfg.shots} exceeds samples_per_class={cfg.samples_per_class}")
    need(cfg.classes_per_client >= 1, "classes_per_client must be >= 1")
    need(0.0 < cfg.base_fraction <= 1.0,
         f"base_fraction must be in (0, 1], got {cfg.base_fraction}")
    need(cfg.mode in ("base2new", "msst", "ssmt"),
         f"mode must be base2new, msst or ssmt, got '{cfg.mode}'")
    need(cfg.precision in ("single", "double"),
         f"precision must be single or double, got '{cfg.precision}'")
    h, w = image_shape(cfg)
    need(h % cfg.patch_grid == 0 and w % cfg.patch_grid == 0,
         f"image size {h}x{w} not divisible by patch_grid={cfg.patch_grid}")
    transforms = domain_transforms(cfg)
    if cfg.mode in ("msst", "ssmt"):
        need(len(transforms) >= 2, f"mode {cfg.mode} needs at least 2 domains")
        need(cfg.held_domain != "", f"mode {cfg.mode} needs held_domain")
        need(cfg.held_domain in [t.name for t in transforms],
             f"held_domain '{cfg.held_domain}' not among configured domains")


def image_shape(cfg: RunConfig) -> tuple[int, int]:
    raw = cfg.image_size.lower().replace(" ", "")
    try:
        if "x" in raw:
            h_s, _, w_s = raw.partition("x")
            return int(h_s), int(w_s)
        side = int(raw)
        return side, side
    except ValueError as exc:
        raise ConfigError(f"image_size must look like '8x8', got {cfg.image_size!r}") from exc


def domain_transforms(cfg: RunConfig) -> tuple[DomainTransform, ...]:
    out = []
    for chunk in cfg.domains.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ConfigError(f"domain entry '{chunk}' is not name:gain:offset")
        try:
            out.append(DomainTransform(parts[0], float(parts[1]), float(parts[2])))
        except ValueError as exc:
            raise ConfigError(f"domain entry '{chunk}': {exc}") from exc
    if not out:
        raise ConfigError("domains: no entries")
    return tuple(out)


def resolved_text(cfg: RunConfig) -> str:
    """Canonical echo; parsing it back yields an identical RunConfig."""
    lines = []
    for section, keys in _SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(cfg, key)
            text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{key} = {text}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# derived objects


def dtype_of(cfg: RunConfig):
    return np.float64 if cfg.precision == "double" else np.float32


def scoring_config(cfg: RunConfig) -> ScoringConfig:
    return ScoringConfig(tau=cfg.tau, alpha=cfg.alpha, scoring=cfg.scoring)


def dataset_spec(cfg: RunConfig) -> DatasetSpec:
    if cfg.attributes_file:
        mapping_lists = load_attribute_file(cfg.attributes_file)
        mapping = {k: tuple(v) for k, v in mapping_lists.items()}
        pool = tuple(sorted({a for attrs in mapping.values() for a in attrs}))
    else:
        pool, mapping = auto_attribute_map(cfg.num_classes, cfg.attribute_pool_size,
                                           cfg.attrs_per_class,
                                           derive_seed(cfg.master_seed, "attrmap"))
    return DatasetSpec(
        samples_per_class=cfg.samples_per_class,
        eval_per_class=cfg.eval_per_class,
        image_size=image_shape(cfg),
        attribute_pool=pool,
        class_attribute_map=mapping,
        domain_transforms=domain_transforms(cfg),
        noise_std=cfg.noise_std,
        seed=derive_seed(cfg.master_seed, "dataset"),
    )


def build_dataset(cfg: RunConfig) -> SyntheticDataset:
    return make_synthetic_dataset(dataset_spec(cfg))


def build_store(cfg: RunConfig, dataset: SyntheticDataset) -> TextEmbeddingStore:
    if cfg.embeddings_file:
        store = load_text_embeddings(cfg.embeddings_file)
        if store.d_t != cfg.d_t:
            raise ConfigError(
                f"embeddings file d_t={store.d_t} does not match config d_t={cfg.d_t}")
        missing = set(dataset.class_names) - set(store.class_names)
        if missing:
            raise ConfigError(f"embeddings file missing classes {sorted(missing)}")
        return store
    mapping = {k: list(v) for k, v in dataset.spec.class_attribute_map.items()}
    return synth_text_embeddings(dataset.class_names, mapping, cfg.d_t,
                                 derive_seed(cfg.master_seed, "text"),
                                 dtype=dtype_of(cfg))


def vit_config(cfg: RunConfig) -> FrozenViTConfig:
    return FrozenViTConfig(
        patch_grid=cfg.patch_grid,
        d_v=cfg.d_v,
        feature_dim=cfg.d_t,
        depth=cfg.depth,
        heads=cfg.heads,
        seed=derive_seed(cfg.master_seed, "vit"),
    )
