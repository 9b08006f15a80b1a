"""Synthetic data with controllable class/attribute/domain structure,
plus non-IID partitioning.

Each class renders as a sum of Gaussian blobs, one blob per attribute
string, so classes that share attributes share visual structure and
held-out classes remain recognizable through the attributes they reuse.
Domains are fixed invertible pixel maps applied on top. Classes are split
into base (training) and new (held-out) groups, and base classes are
chunked into pairwise disjoint per-client sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from . import fileio
from .encoders import TextEmbeddingStore
from .seeding import generator


@dataclass(frozen=True)
class DomainTransform:
    """Affine pixel map; gain must be nonzero so the map is invertible."""
    name: str
    gain: float
    offset: float

    def __post_init__(self):
        if self.gain == 0.0:
            raise ValueError(f"domain '{self.name}': zero gain is not invertible")

    def apply(self, image: np.ndarray) -> np.ndarray:
        return image * self.gain + self.offset


@dataclass(frozen=True)
class DatasetSpec:
    samples_per_class: int
    eval_per_class: int
    image_size: tuple[int, int]
    attribute_pool: tuple[str, ...]
    class_attribute_map: dict[str, tuple[str, ...]]
    domain_transforms: tuple[DomainTransform, ...]
    noise_std: float
    seed: int

    def __post_init__(self):
        if not self.class_attribute_map:
            raise ValueError("dataset spec: no classes")
        pool = set(self.attribute_pool)
        for name, attrs in self.class_attribute_map.items():
            if not attrs:
                raise ValueError(f"class '{name}': needs at least one attribute")
            missing = set(attrs) - pool
            if missing:
                raise ValueError(f"class '{name}': attributes {sorted(missing)} not in pool")
        if not self.domain_transforms:
            raise ValueError("dataset spec: needs at least one domain")
        if self.samples_per_class < 1:
            raise ValueError("samples_per_class must be >= 1")

    @property
    def num_classes(self) -> int:
        return len(self.class_attribute_map)


def auto_attribute_map(num_classes: int, pool_size: int, attrs_per_class: int,
                       seed: int) -> tuple[tuple[str, ...], dict[str, tuple[str, ...]]]:
    """Distinct attribute subsets per class, drawn deterministically.

    Subsets are sampled without repetition so no two classes look identical.
    """
    pool = tuple(f"attr_{i:02d}" for i in range(pool_size))
    combos = list(combinations(range(pool_size), attrs_per_class))
    if len(combos) < num_classes:
        raise ValueError(
            f"cannot give {num_classes} classes distinct {attrs_per_class}-subsets "
            f"of a {pool_size}-attribute pool")
    rng = generator(seed, "attr-map")
    chosen = rng.permutation(len(combos))[:num_classes]
    mapping = {
        f"class_{i:02d}": tuple(pool[j] for j in combos[int(c)])
        for i, c in enumerate(chosen)
    }
    return pool, mapping


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    class_names: list[str]
    domains: list[str]
    prototypes: dict[str, np.ndarray]
    train: dict[tuple[str, str], np.ndarray]   # (domain, class) -> (n, h, w)
    eval: dict[tuple[str, str], np.ndarray]

    def train_images(self, domain: str, class_name: str) -> np.ndarray:
        return self.train[(domain, class_name)]

    def eval_images(self, domain: str, class_name: str) -> np.ndarray:
        return self.eval[(domain, class_name)]


def _blob(attribute: str, h: int, w: int, seed: int) -> np.ndarray:
    rng = generator(seed, "blob", attribute)
    cy = rng.uniform(0.15, 0.85) * h
    cx = rng.uniform(0.15, 0.85) * w
    sigma = rng.uniform(h / 6.0, h / 3.0)
    amp = rng.uniform(0.6, 1.0)
    yy, xx = np.mgrid[0:h, 0:w]
    return (amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))).astype(np.float32)


def _prototype(attrs, h: int, w: int, seed: int) -> np.ndarray:
    """Blob sum rescaled to unit pixel std, so image content carries the
    same weight as the encoder's positional signal."""
    raw = sum(_blob(a, h, w, seed) for a in attrs)
    return (raw / max(float(raw.std()), 1e-6)).astype(np.float32)


def make_synthetic_dataset(spec: DatasetSpec) -> SyntheticDataset:
    h, w = spec.image_size
    class_names = list(spec.class_attribute_map)
    prototypes = {
        name: _prototype(attrs, h, w, spec.seed)
        for name, attrs in spec.class_attribute_map.items()
    }
    train: dict[tuple[str, str], np.ndarray] = {}
    eval_: dict[tuple[str, str], np.ndarray] = {}
    for name in class_names:
        proto = prototypes[name]
        total = spec.samples_per_class + spec.eval_per_class
        rng = generator(spec.seed, "samples", name)
        noise = rng.normal(0.0, spec.noise_std, (total, h, w)).astype(np.float32) \
            if spec.noise_std > 0 else np.zeros((total, h, w), np.float32)
        base = proto[None, :, :] + noise
        for dom in spec.domain_transforms:
            stack = dom.apply(base).astype(np.float32)
            train[(dom.name, name)] = stack[:spec.samples_per_class]
            eval_[(dom.name, name)] = stack[spec.samples_per_class:]
    return SyntheticDataset(
        spec=spec,
        class_names=class_names,
        domains=[d.name for d in spec.domain_transforms],
        prototypes=prototypes,
        train=train,
        eval=eval_,
    )


def dump_images(dataset: SyntheticDataset, path, domain: str | None = None) -> None:
    """Write one domain's training images into the tensor container,
    named img/<class>/<idx>."""
    domain = domain or dataset.domains[0]
    tensors = {}
    for name in dataset.class_names:
        stack = dataset.train_images(domain, name)
        for idx in range(stack.shape[0]):
            tensors[f"img/{name}/{idx}"] = stack[idx]
    fileio.save_tensors(path, tensors)


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    base_classes: list[str]
    new_classes: list[str]
    client_classes: list[list[str]]

    @property
    def num_clients(self) -> int:
        return len(self.client_classes)

    def describe(self) -> str:
        lines = [f"base: {' '.join(self.base_classes)}",
                 f"new: {' '.join(self.new_classes)}"]
        for i, names in enumerate(self.client_classes):
            lines.append(f"client {i}: {' '.join(names)}")
        return "\n".join(lines)


def plan_splits(dataset: SyntheticDataset, classes_per_client: int,
                base_fraction: float, seed: int) -> SplitPlan:
    """Shuffle classes, split into base/new, chunk base into disjoint
    per-client sets of `classes_per_client` (the last chunk may be smaller)."""
    if classes_per_client <= 0:
        raise ValueError(f"classes_per_client must be positive, got {classes_per_client}")
    if not 0.0 < base_fraction <= 1.0:
        raise ValueError(f"base_fraction must be in (0, 1], got {base_fraction}")
    k_total = len(dataset.class_names)
    n_base = int(round(base_fraction * k_total))
    if n_base < classes_per_client:
        raise ValueError(
            f"base split of {n_base} classes cannot host clients of {classes_per_client} classes")
    rng = generator(seed, "split")
    shuffled = [dataset.class_names[i] for i in rng.permutation(k_total)]
    base = shuffled[:n_base]
    new = shuffled[n_base:]
    clients = [base[i:i + classes_per_client] for i in range(0, n_base, classes_per_client)]
    return SplitPlan(base_classes=base, new_classes=new, client_classes=clients)


# ---------------------------------------------------------------------------
# client shards


@dataclass
class ClientShard:
    """One client's local data; labels index into its own class list."""
    client_id: int
    class_names: list[str]
    images: np.ndarray       # (n, h, w)
    labels: np.ndarray       # (n,) local indices
    attributes: np.ndarray   # stacked attribute embeddings for class_names
    domain: str

    def __post_init__(self):
        if len(self.labels) and not ((0 <= self.labels).all()
                                     and (self.labels < len(self.class_names)).all()):
            raise ValueError(f"client {self.client_id}: labels outside its class set")


def build_client_shards(dataset: SyntheticDataset, plan: SplitPlan,
                        store: TextEmbeddingStore,
                        client_domains: list[str] | None = None) -> list[ClientShard]:
    """Materialize shards with every available training sample; apply
    few_shot_subsample afterwards to cut them down."""
    domains = client_domains or [dataset.domains[0]] * plan.num_clients
    if len(domains) != plan.num_clients:
        raise ValueError("one domain per client required")
    shards = []
    for cid, (names, domain) in enumerate(zip(plan.client_classes, domains)):
        images, labels = [], []
        for local, name in enumerate(names):
            stack = dataset.train_images(domain, name)
            images.append(stack)
            labels.extend([local] * stack.shape[0])
        shards.append(ClientShard(
            client_id=cid,
            class_names=list(names),
            images=np.concatenate(images, axis=0),
            labels=np.asarray(labels, dtype=np.int64),
            attributes=store.attribute_matrix(names),
            domain=domain,
        ))
    return shards


def few_shot_subsample(shard: ClientShard, shots: int, seed: int) -> ClientShard:
    """Keep exactly `shots` samples per class, chosen without replacement."""
    rng = generator(seed, "fewshot", shard.client_id)
    keep: list[int] = []
    for local in range(len(shard.class_names)):
        idx = np.flatnonzero(shard.labels == local)
        if len(idx) < shots:
            raise ValueError(
                f"client {shard.client_id} class '{shard.class_names[local]}': "
                f"{len(idx)} samples available, {shots} requested")
        keep.extend(rng.choice(idx, size=shots, replace=False).tolist())
    keep = sorted(keep)
    return ClientShard(
        client_id=shard.client_id,
        class_names=shard.class_names,
        images=shard.images[keep],
        labels=shard.labels[keep],
        attributes=shard.attributes,
        domain=shard.domain,
    )


# ---------------------------------------------------------------------------
# attribute files


def load_attribute_file(path) -> dict[str, list[str]]:
    """Parse `class_name | attr1; attr2; ...` lines; '#' starts a comment."""
    mapping: dict[str, list[str]] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "|" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'class | attributes', got: {line!r}")
        name, _, attrs_part = line.partition("|")
        name = name.strip()
        if not name:
            raise ValueError(f"{path}:{lineno}: empty class name")
        if name in mapping:
            raise ValueError(f"{path}:{lineno}: duplicate class '{name}'")
        attrs = [a.strip() for a in attrs_part.split(";") if a.strip()]
        if not attrs:
            raise ValueError(f"{path}:{lineno}: class '{name}' has no attributes")
        mapping[name] = attrs
    if not mapping:
        raise ValueError(f"{path}: no classes found")
    return mapping


def save_attribute_file(path, mapping: dict[str, list[str]]) -> None:
    lines = [f"{name} | {'; '.join(attrs)}" for name, attrs in mapping.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def composite_prompts(class_name: str, attributes: list[str],
                      prefix: str | None = None) -> list[str]:
    """Combine a hand-crafted prefix with each attribute for text embedding."""
    prefix = prefix or f"a photo of a {class_name}"
    return [f"{prefix}, which has {a}" for a in attributes]


# ---------------------------------------------------------------------------
# domain generalization schedules


@dataclass(frozen=True)
class DomainSchedule:
    mode: str                      # "msst" or "ssmt"
    train_domains: tuple[str, ...]
    test_domains: tuple[str, ...]

    def client_domains(self, num_clients: int) -> list[str]:
        """Each client sees exactly one training domain, assigned round-robin."""
        return [self.train_domains[i % len(self.train_domains)] for i in range(num_clients)]


def dg_schedule(dataset: SyntheticDataset, mode: str, domain: str) -> DomainSchedule:
    """msst: hold one domain out for testing, train on the rest.
    ssmt: train on a single source domain, test on all others."""
    if len(dataset.domains) < 2:
        raise ValueError("domain generalization needs at least 2 domains")
    if domain not in dataset.domains:
        raise ValueError(f"unknown domain '{domain}'; have {dataset.domains}")
    others = tuple(d for d in dataset.domains if d != domain)
    if mode == "msst":
        return DomainSchedule(mode="msst", train_domains=others, test_domains=(domain,))
    if mode == "ssmt":
        return DomainSchedule(mode="ssmt", train_domains=(domain,), test_domains=others)
    raise ValueError(f"unknown mode '{mode}', expected msst or ssmt")
