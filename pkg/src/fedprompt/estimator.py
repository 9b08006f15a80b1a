"""Scikit-learn estimator facade over the federated prompt tuner.

`fit(X, y)` spreads the classes disjointly over simulated clients, trains
the prompt generator with FedAvg rounds on frozen encoders, and keeps the
aggregated model; `predict`/`predict_proba` classify new images against
the class text stores. The estimator plays by sklearn rules (get_params /
set_params / clone), so it drops into pipelines and model selection.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import ClientShard
from .encoders import FrozenViTConfig, build_frozen_vit, synth_text_embeddings
from .federation import (
    ClientRecord,
    LocalTrainSettings,
    ServerState,
    aggregate,
    select_clients,
    train_selected,
)
from .model import FrozenEncoderBundle, predict_sample, prompted_feature
from .objective import ScoringConfig, class_probs
from .promptformer import init_promptformer
from .seeding import derive_seed, generator


class FedPromptClassifier(BaseEstimator, ClassifierMixin):
    """Image classifier trained by federated visual prompt tuning.

    Parameters mirror the simulator's knobs; the frozen encoders are
    synthesized deterministically from `random_state`.
    """

    def __init__(self, n_clients=2, rounds=5, local_iters=3, shots=None,
                 batch_size=16, participation_rate=1.0, lr=0.05, momentum=0.9,
                 weight_decay=1e-5, alpha=1.0, tau=0.05, scoring="desc",
                 lora_rank=4, lora_threshold=0.5, embed_dim=32, text_dim=16,
                 depth=1, heads=4, patch_grid=2, prompt_len=4, ffn_dim=0,
                 image_shape=None, class_attributes=None, random_state=0):
        self.n_clients = n_clients
        self.rounds = rounds
        self.local_iters = local_iters
        self.shots = shots
        self.batch_size = batch_size
        self.participation_rate = participation_rate
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.tau = tau
        self.scoring = scoring
        self.lora_rank = lora_rank
        self.lora_threshold = lora_threshold
        self.embed_dim = embed_dim
        self.text_dim = text_dim
        self.depth = depth
        self.heads = heads
        self.patch_grid = patch_grid
        self.prompt_len = prompt_len
        self.ffn_dim = ffn_dim
        self.image_shape = image_shape
        self.class_attributes = class_attributes
        self.random_state = random_state

    # ------------------------------------------------------------------

    def _as_images(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2:
            if self.image_shape is not None:
                h, w = self.image_shape
            else:
                side = math.isqrt(X.shape[1])
                if side * side != X.shape[1]:
                    raise ValueError(
                        f"flat samples of length {X.shape[1]} are not square images; "
                        "pass image_shape=(h, w)")
                h = w = side
            if h * w != X.shape[1]:
                raise ValueError(f"image_shape {h}x{w} does not match {X.shape[1]} features")
            X = X.reshape(X.shape[0], h, w)
        if X.ndim != 3:
            raise ValueError(f"X must be (n, h, w) images or flat rows, got shape {X.shape}")
        h, w = X.shape[1:]
        if h % self.patch_grid or w % self.patch_grid:
            raise ValueError(
                f"images {h}x{w} not divisible into a {self.patch_grid}x{self.patch_grid} grid")
        return X

    def _attribute_map(self, names: list[str]) -> dict[str, list[str]]:
        if self.class_attributes is None:
            return {n: [f"{n} marking a", f"{n} marking b"] for n in names}
        mapping = {}
        for original, name in zip(self.classes_, names):
            attrs = self.class_attributes.get(original)
            if not attrs:
                raise ValueError(f"class_attributes missing entries for class {original!r}")
            mapping[name] = list(attrs)
        return mapping

    # ------------------------------------------------------------------

    def fit(self, X, y):
        X, y = check_X_y(X, y, allow_nd=True)
        images = self._as_images(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if len(self.classes_) < self.n_clients:
            raise ValueError(
                f"{self.n_clients} clients need at least that many classes, "
                f"got {len(self.classes_)}")
        names = [f"class:{c}" for c in self.classes_]
        store = synth_text_embeddings(names, self._attribute_map(names), self.text_dim,
                                      seed=derive_seed(self.random_state, "text"))
        vit = build_frozen_vit(FrozenViTConfig(
            patch_grid=self.patch_grid, d_v=self.embed_dim, feature_dim=self.text_dim,
            depth=self.depth, heads=self.heads,
            seed=derive_seed(self.random_state, "vit")))
        bundle = FrozenEncoderBundle(vit=vit, store=store)

        clients = {}
        rng = generator(self.random_state, "shards")
        for cid in range(self.n_clients):
            local_names = names[cid::self.n_clients]
            local_globals = list(range(len(names)))[cid::self.n_clients]
            keep = []
            for local, gidx in enumerate(local_globals):
                idx = np.flatnonzero(encoded == gidx)
                if idx.size == 0:
                    raise ValueError(f"class {self.classes_[gidx]!r} has no samples")
                if self.shots is not None and self.shots < idx.size:
                    idx = np.sort(rng.choice(idx, size=self.shots, replace=False))
                keep.extend((int(i), local) for i in idx)
            shard = ClientShard(
                client_id=cid,
                class_names=local_names,
                images=np.stack([images[i] for i, _ in keep]),
                labels=np.asarray([lab for _, lab in keep], dtype=np.int64),
                attributes=store.attribute_matrix(local_names),
                domain="default",
            )
            clients[cid] = ClientRecord(id=cid, shard=shard)

        params = init_promptformer(self.prompt_len, self.embed_dim, self.text_dim,
                                   self.heads, seed=derive_seed(self.random_state, "init"),
                                   d_ff=self.ffn_dim or None)
        params.set_requires_grad(False)
        server = ServerState(round=0, global_params=params, global_lora=None,
                             rng_seed=derive_seed(self.random_state, "select"))
        settings = LocalTrainSettings(
            iters=self.local_iters, lr=self.lr, momentum=self.momentum,
            weight_decay=self.weight_decay, batch_size=self.batch_size,
            lora_threshold=self.lora_threshold, lora_rank=self.lora_rank,
            lora_scale=1.0)
        scoring = ScoringConfig(tau=self.tau, alpha=self.alpha, scoring=self.scoring)
        for _ in range(self.rounds):
            selected = select_clients(server.rng_seed, server.round, sorted(clients),
                                      self.participation_rate)
            payloads = train_selected(bundle, server, clients, selected, settings,
                                      scoring, derive_seed(self.random_state, "train"),
                                      workers=1)
            aggregate(server, payloads)

        self.bundle_ = bundle
        self.server_ = server
        self.class_names_ = names
        self.scoring_ = scoring
        self.n_features_in_ = X.shape[1] if X.ndim == 2 else int(np.prod(X.shape[1:]))
        return self

    def predict(self, X):
        check_is_fitted(self, "server_")
        X = check_array(X, allow_nd=True)
        images = self._as_images(X)
        out = [
            predict_sample(self.bundle_, self.server_.global_params,
                           self.server_.global_lora, img, self.class_names_,
                           self.scoring_)
            for img in images
        ]
        return self.classes_[np.asarray(out)]

    def predict_proba(self, X):
        check_is_fitted(self, "server_")
        X = check_array(X, allow_nd=True)
        images = self._as_images(X)
        rows = [self.bundle_.store.composite_rows(n) for n in self.class_names_]
        probs = []
        for img in images:
            v = prompted_feature(self.bundle_, self.server_.global_params,
                                 self.server_.global_lora, img, self.class_names_)
            probs.append(class_probs(v, rows, self.scoring_.tau,
                                     self.scoring_.scoring).data[0])
        return np.asarray(probs)
