"""Training and inference objective.

Classification probability is attribute-averaged: for each attribute slot
a softmax over classes of cosine(feature, class text feature) / tau, then
the mean over slots. With one attribute per class this collapses to the
plain CLIP-style softmax. The training loss couples cross-entropy with a
consistency term between the prompted encoding and the plain encoding of
an augmented view.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, constant

PROB_FLOOR = 1e-12
UNIT_NORM_TOL = 1e-4


@dataclass(frozen=True)
class ScoringConfig:
    tau: float = 0.01        # softmax temperature
    alpha: float = 10.0      # consistency weight
    scoring: str = "desc"    # "desc" = per-attribute averaging, "mean_feature" = single feature

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.scoring not in ("desc", "mean_feature"):
            raise ValueError(f"unknown scoring mode '{self.scoring}'")


@dataclass
class LossBundle:
    ce: Tensor
    con: Tensor
    total: Tensor
    probs: Tensor  # (1, K)


class _Counter:
    """Counts probability clamps in ce_loss; pathological configs show up here."""

    def __init__(self):
        self.count = 0

    def bump(self):
        self.count += 1

    def reset(self):
        self.count = 0


clamp_warnings = _Counter()


def _as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=dtype))


def probs_from_scores(scores: Tensor, tau: float) -> Tensor:
    """Mean over attribute slots of per-slot softmax across classes.

    `scores` has one row per attribute slot and one column per class.
    Every row normalizes independently, so the mean is itself a
    distribution.
    """
    soft = ad.row_softmax(ad.scale(scores, 1.0 / tau))
    n_slots = soft.shape[0]
    if n_slots == 1:
        return soft
    pool = constant(np.full((1, n_slots), 1.0 / n_slots, dtype=str(soft.dtype)))
    return ad.matmul(pool, soft)


def _check_unit(v: Tensor) -> None:
    norm = float(np.linalg.norm(v.data))
    if abs(norm - 1.0) > UNIT_NORM_TOL:
        raise ValueError(f"class_probs: feature norm {norm:.6f} is not unit within {UNIT_NORM_TOL}")


def _score_rows(v: Tensor, class_feature_rows: list[np.ndarray]) -> Tensor:
    """(n_slots, K) cosine score matrix; classes with fewer attribute rows
    cycle modulo their own count so every slot compares all classes."""
    if not class_feature_rows:
        raise ValueError("class_probs: empty class feature list")
    dtype = str(v.dtype)
    n_slots = max(rows.shape[0] for rows in class_feature_rows)
    slot_rows = []
    for j in range(n_slots):
        cols = [ad.cosine_sim(v, constant(np.asarray(rows[j % rows.shape[0]], dtype=dtype)[None, :]))
                for rows in class_feature_rows]
        slot_rows.append(ad.transpose(ad.concat_rows(cols)))
    return slot_rows[0] if n_slots == 1 else ad.concat_rows(slot_rows)


def _mean_feature(rows: np.ndarray) -> np.ndarray:
    m = rows.mean(axis=0)
    return (m / np.linalg.norm(m))[None, :]


def class_probs(v, class_feature_rows: list[np.ndarray], tau: float,
                scoring: str = "desc") -> Tensor:
    """Probability over the candidate classes for a unit feature vector.

    `class_feature_rows[k]` holds class k's composite text features, one
    row per attribute.
    """
    v = _as_tensor(v)
    _check_unit(v)
    if scoring == "mean_feature":
        class_feature_rows = [_mean_feature(rows) for rows in class_feature_rows]
    return probs_from_scores(_score_rows(v, class_feature_rows), tau)


def ce_loss(probs: Tensor, label: int) -> Tensor:
    """Negative log probability of the label, floor-clamped at 1e-12."""
    k = probs.shape[1]
    if not 0 <= label < k:
        raise ValueError(f"ce_loss: label {label} outside [0, {k})")
    if float(probs.data[0, label]) < PROB_FLOOR:
        clamp_warnings.bump()
    pick = np.zeros((k, 1), dtype=str(probs.dtype))
    pick[label, 0] = 1.0
    return ad.neg(ad.log(ad.matmul(probs, constant(pick)), floor=PROB_FLOOR))


def consistency_loss(v_prompted, v_plain) -> Tensor:
    """1 - cosine(prompted encoding, plain encoding of the augmented view)."""
    v_prompted = _as_tensor(v_prompted)
    v_plain = _as_tensor(v_plain)
    one = constant(np.ones((1, 1), dtype=str(v_prompted.dtype)))
    return ad.add(one, ad.neg(ad.cosine_sim(v_prompted, v_plain)))


def total_loss(ce: Tensor, con: Tensor, alpha: float) -> Tensor:
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return ad.add(ce, ad.scale(con, alpha))


def predict(v, class_feature_rows: list[np.ndarray], tau: float,
            scoring: str = "desc") -> int:
    """Argmax class index; ties break toward the lowest index."""
    p = class_probs(v, class_feature_rows, tau, scoring)
    return int(np.argmax(p.data[0]))
