"""The composed model: frozen encoders plus the trainable prompt generator.

Everything here is a pure function of (bundle, params, lora) so server and
clients can share snapshots freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import FrozenViT, TextEmbeddingStore, augment, encode, patchify
from .objective import LossBundle, ScoringConfig, ce_loss, class_probs, consistency_loss, predict, total_loss
from .promptformer import LoRABank, PromptFormerParams, generate_prompts


@dataclass
class FrozenEncoderBundle:
    """Shared frozen parts: the vision encoder and the text store."""
    vit: FrozenViT
    store: TextEmbeddingStore

    def checksum(self) -> str:
        return self.vit.weights_checksum() + ":" + self.store.checksum()


def prompted_feature(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                     lora: LoRABank | None, image: np.ndarray,
                     class_names: list[str]) -> Tensor:
    """Unit feature of an image encoded with generated prompts conditioned
    on the candidate class set."""
    pack = patchify(image, bundle.vit)
    prompts = generate_prompts(params, lora, bundle.store.attribute_matrix(class_names),
                               pack.patches)
    return encode(bundle.vit, pack.cls, pack.patches, prompts)


def plain_feature(bundle: FrozenEncoderBundle, image: np.ndarray) -> Tensor:
    """Unit feature of an image encoded without prompts."""
    pack = patchify(image, bundle.vit)
    return encode(bundle.vit, pack.cls, pack.patches, None)


def sample_loss(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                lora: LoRABank | None, image: np.ndarray, label_index: int,
                class_names: list[str], cfg: ScoringConfig, aug_seed: int) -> LossBundle:
    """Full objective for one sample against a candidate class set.

    The consistency term compares the prompted encoding of the image with
    the plain encoding of its augmented view.
    """
    v = prompted_feature(bundle, params, lora, image, class_names)
    feature_rows = [bundle.store.composite_rows(n) for n in class_names]
    probs = class_probs(v, feature_rows, cfg.tau, cfg.scoring)
    ce = ce_loss(probs, label_index)
    v_plain = plain_feature(bundle, augment(image, aug_seed))
    con = consistency_loss(v, v_plain)
    return LossBundle(ce=ce, con=con, total=total_loss(ce, con, cfg.alpha), probs=probs)


def batch_loss(bundle: FrozenEncoderBundle, params: PromptFormerParams,
               lora: LoRABank | None, images: list[np.ndarray], label_indices: list[int],
               class_names: list[str], cfg: ScoringConfig, aug_seeds: list[int]) -> Tensor:
    """Mean total loss over a batch, as one graph for a single backward."""
    totals = [sample_loss(bundle, params, lora, img, lab, class_names, cfg, seed).total
              for img, lab, seed in zip(images, label_indices, aug_seeds)]
    return ad.mean(ad.concat_rows(totals))


def predict_sample(bundle: FrozenEncoderBundle, params: PromptFormerParams,
                   lora: LoRABank | None, image: np.ndarray,
                   class_names: list[str], cfg: ScoringConfig) -> int:
    """Index into class_names of the predicted class."""
    v = prompted_feature(bundle, params, lora, image, class_names)
    feature_rows = [bundle.store.composite_rows(n) for n in class_names]
    return predict(v, feature_rows, cfg.tau, cfg.scoring)
