"""Metrics and evaluation schedules.

Local accuracy restricts each client's candidate set to its own classes;
base accuracy scores the aggregated model over the union of base classes;
new-class accuracy uses the held-out classes with their own attribute
stores. Base and new are summarized by their harmonic mean. Domain
generalization evaluation reuses the same accuracy loop per held-out
domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClientShard, DomainSchedule, SplitPlan, SyntheticDataset
from .model import FrozenEncoderBundle, predict_sample
from .objective import ScoringConfig
from .promptformer import LoRABank, PromptFormerParams

METRICS_HEADER = "round,clients,mean_train_loss,local_acc,base_acc,new_acc,hm,params_sent"


@dataclass
class MetricsRecord:
    round: int
    clients: int
    mean_train_loss: float
    local_acc: float
    base_acc: float
    new_acc: float
    hm: float
    params_sent: int
    domain_accs: dict[str, float] = field(default_factory=dict)

    def csv_row(self) -> str:
        return ",".join([
            str(self.round),
            str(self.clients),
            _fmt(self.mean_train_loss),
            _fmt(self.local_acc),
            _fmt(self.base_acc),
            _fmt(self.new_acc),
            _fmt(self.hm),
            str(self.params_sent),
        ])


def _fmt(x: float) -> str:
    return format(float(x), ".10g")


def write_metrics_csv(path, records: list[MetricsRecord]) -> None:
    rows = [METRICS_HEADER] + [r.csv_row() for r in records]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def harmonic_mean(base_acc: float, new_acc: float) -> float:
    """2ab / (a+b), defined as 0 when either accuracy is 0."""
    if base_acc < 0 or new_acc < 0:
        raise ValueError(f"accuracies must be non-negative, got {base_acc}, {new_acc}")
    if base_acc == 0.0 or new_acc == 0.0:
        return 0.0
    return 2.0 * base_acc * new_acc / (base_acc + new_acc)


def accuracy(bundle: FrozenEncoderBundle, params: PromptFormerParams,
             lora: LoRABank | None, images, labels, class_names: list[str],
             cfg: ScoringConfig) -> float:
    """Fraction of argmax predictions equal to labels; `labels` index into
    `class_names`."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] == 0:
        raise ValueError("accuracy: empty sample set")
    missing = [n for n in class_names if n not in bundle.store.class_names]
    if missing:
        raise ValueError(f"accuracy: no text store for classes {missing}")
    hits = 0
    for img, lab in zip(images, labels):
        hits += int(predict_sample(bundle, params, lora, img, class_names, cfg) == int(lab))
    return hits / images.shape[0]


def _class_eval_set(dataset: SyntheticDataset, class_names: list[str], domain: str):
    images = []
    labels = []
    for local, name in enumerate(class_names):
        stack = dataset.eval_images(domain, name)
        images.append(stack)
        labels.extend([local] * stack.shape[0])
    return np.concatenate(images, axis=0), np.asarray(labels, dtype=np.int64)


def local_accuracies(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                     lora: LoRABank | None, shards: list[ClientShard],
                     dataset: SyntheticDataset, cfg: ScoringConfig) -> list[float]:
    """Per-client accuracy on eval images of its own classes, candidates
    restricted to its class set."""
    out = []
    for shard in shards:
        images, labels = _class_eval_set(dataset, shard.class_names, shard.domain)
        out.append(accuracy(bundle, params, lora, images, labels, shard.class_names, cfg))
    return out


def evaluate_round(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                   lora: LoRABank | None, plan: SplitPlan, shards: list[ClientShard],
                   dataset: SyntheticDataset, cfg: ScoringConfig,
                   eval_domain: str | None = None) -> dict:
    """Local / base / new accuracies and their harmonic mean.

    When the plan holds no new classes (domain-generalization runs train on
    every class) new_acc and hm report 0.
    """
    domain = eval_domain or dataset.domains[0]
    locals_ = local_accuracies(bundle, params, lora, shards, dataset, cfg)
    base_images, base_labels = _class_eval_set(dataset, plan.base_classes, domain)
    base_acc = accuracy(bundle, params, lora, base_images, base_labels, plan.base_classes, cfg)
    if plan.new_classes:
        new_images, new_labels = _class_eval_set(dataset, plan.new_classes, domain)
        new_acc = accuracy(bundle, params, lora, new_images, new_labels, plan.new_classes, cfg)
    else:
        new_acc = 0.0
    return {
        "local_acc": float(np.mean(locals_)),
        "base_acc": base_acc,
        "new_acc": new_acc,
        "hm": harmonic_mean(base_acc, new_acc),
        "per_client": locals_,
    }


def evaluate_dg(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                lora: LoRABank | None, plan: SplitPlan, schedule: DomainSchedule,
                dataset: SyntheticDataset, cfg: ScoringConfig) -> dict[str, float]:
    """Accuracy over the trained classes per held-out domain, plus the
    average across targets under key 'mean'."""
    for domain in schedule.test_domains:
        if domain not in dataset.domains:
            raise ValueError(f"schedule/test domain '{domain}' not in dataset")
    accs = {}
    for domain in schedule.test_domains:
        images, labels = _class_eval_set(dataset, plan.base_classes, domain)
        accs[domain] = accuracy(bundle, params, lora, images, labels, plan.base_classes, cfg)
    accs["mean"] = float(np.mean([accs[d] for d in schedule.test_domains]))
    return accs
