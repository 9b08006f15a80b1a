"""Frozen encoders: a deterministic vision transformer and a text
embedding provider.

The vision encoder is a standard pre-norm transformer (LN -> MHSA ->
residual, LN -> FFN -> residual) over a [CLS] + patches (+ prompts)
sequence. Its weights are sampled once from a seeded Gaussian and never
updated; the forward pass is differentiable so gradients reach injected
prompt rows. The output feature is the final CLS row pushed through a
frozen linear head into the text embedding space and unit-normalized, so
image and text features compare by cosine similarity.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from . import fileio
from .autodiff import ShapeError, Tensor, constant
from .seeding import generator

REFERENCE_WIDTH = 768  # the full-scale transformer width the 0.02 std is tuned for


def block_weight_std(d_v: int) -> float:
    """Init std for block weights, width-scaled so reduced-scale encoders
    keep the same per-block signal contribution as the full-scale one.
    At width 768 this is exactly 0.02; shrinking the width without raising
    the std degenerates the blocks toward identity maps."""
    return 0.02 * math.sqrt(REFERENCE_WIDTH / d_v)


@dataclass(frozen=True)
class FrozenViTConfig:
    patch_grid: int          # images split into patch_grid x patch_grid patches
    d_v: int                 # width of the transformer
    feature_dim: int         # output width after the frozen head (text space)
    depth: int
    heads: int
    seed: int
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.d_v % self.heads != 0:
            raise ValueError(f"d_v={self.d_v} not divisible by heads={self.heads}")
        if self.patch_grid < 1:
            raise ValueError(f"patch_grid must be >= 1, got {self.patch_grid}")


@dataclass
class PatchPack:
    """[CLS] row plus the b patch rows (positional encodings already added)."""
    cls: np.ndarray      # (1, d_v)
    patches: np.ndarray  # (b, d_v)


class FrozenViT:
    """Vision encoder with immutable, seed-derived weights.

    Instances are safe to share across concurrent client tasks; the only
    mutation after construction is the lock-guarded cache of patch
    projection matrices (one per flattened-patch size, value depends only
    on the seed).
    """

    def __init__(self, config: FrozenViTConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = generator(config.seed, "vit")
        d = config.d_v
        std = block_weight_std(d)

        def w(*shape):
            return constant(rng.normal(0.0, std, shape).astype(self.dtype))

        self.blocks = []
        for _ in range(config.depth):
            self.blocks.append({
                "ln1_g": constant(np.ones((1, d), self.dtype)),
                "ln1_b": constant(np.zeros((1, d), self.dtype)),
                "wq": w(d, d), "wk": w(d, d), "wv": w(d, d), "wo": w(d, d),
                "ln2_g": constant(np.ones((1, d), self.dtype)),
                "ln2_b": constant(np.zeros((1, d), self.dtype)),
                "fc1_w": w(d, config.mlp_ratio * d),
                "fc1_b": constant(np.zeros((1, config.mlp_ratio * d), self.dtype)),
                "fc2_w": w(config.mlp_ratio * d, d),
                "fc2_b": constant(np.zeros((1, d), self.dtype)),
            })
        self.ln_post_g = constant(np.ones((1, d), self.dtype))
        self.ln_post_b = constant(np.zeros((1, d), self.dtype))
        self.head = w(d, config.feature_dim)
        self.cls = rng.normal(0.0, std, (1, d)).astype(self.dtype)
        self._patch_proj: dict[int, np.ndarray] = {}
        self._lock = threading.Lock()

    def patch_projection(self, patch_dim: int) -> np.ndarray:
        """Projection from flattened pixels to d_v, derived lazily per patch
        size. Scaled by 1/sqrt(patch_dim) so patch content keeps pixel-scale
        magnitude next to the positional encodings."""
        with self._lock:
            wp = self._patch_proj.get(patch_dim)
            if wp is None:
                rng = generator(self.config.seed, "vit-patch", patch_dim)
                wp = rng.normal(0.0, 1.0 / np.sqrt(patch_dim),
                                (patch_dim, self.config.d_v)).astype(self.dtype)
                self._patch_proj[patch_dim] = wp
            return wp

    def weights_checksum(self) -> str:
        h = hashlib.sha256()
        for block in self.blocks:
            for key in sorted(block):
                h.update(block[key].data.tobytes())
        for t in (self.ln_post_g, self.ln_post_b, self.head):
            h.update(t.data.tobytes())
        h.update(self.cls.tobytes())
        # patch projections are a pure function of (seed, patch size); the
        # lazily filled cache is not state, so it stays out of the checksum
        return h.hexdigest()


def build_frozen_vit(config: FrozenViTConfig, dtype=np.float32) -> FrozenViT:
    return FrozenViT(config, dtype)


def sinusoidal_positions(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sin/cos positional table, (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    idx = np.arange(d, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (idx // 2)) / d)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table.astype(dtype)


def patchify(image: np.ndarray, vit: FrozenViT) -> PatchPack:
    """Split an h x w grid into patch_grid^2 patches, project, add positions."""
    image = np.asarray(image, dtype=vit.dtype)
    if image.ndim != 2:
        raise ShapeError(f"patchify: expected 2-D image, got shape {image.shape}")
    g = vit.config.patch_grid
    h, w = image.shape
    if h % g or w % g:
        raise ShapeError(f"patchify: image {h}x{w} not divisible into a {g}x{g} patch grid")
    ph, pw = h // g, w // g
    rows = image.reshape(g, ph, g, pw).transpose(0, 2, 1, 3).reshape(g * g, ph * pw)
    wp = vit.patch_projection(ph * pw)
    patches = rows @ wp + sinusoidal_positions(g * g, vit.config.d_v, vit.dtype)
    return PatchPack(cls=vit.cls.copy(), patches=patches.astype(vit.dtype))


@lru_cache(maxsize=None)
def _head_selectors(d: int, heads: int, dtype_name: str) -> tuple:
    """Constant column-selector matrices, one (d, d/heads) slab per head."""
    dh = d // heads
    out = []
    for h in range(heads):
        s = np.zeros((d, dh), dtype=dtype_name)
        s[h * dh:(h + 1) * dh] = np.eye(dh, dtype=dtype_name)
        out.append((constant(s), constant(s.T.copy())))
    return tuple(out)


def multi_head_attention(queries: Tensor, context: Tensor, wq: Tensor, wk: Tensor,
                         wv: Tensor, wo: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention with the width split evenly over heads.

    `queries` provides the query rows, `context` the key/value rows; for
    self-attention pass the same tensor twice.
    """
    d = wq.shape[1]
    if d % heads:
        raise ShapeError(f"attention width {d} not divisible by {heads} heads")
    dh = d // heads
    q = ad.matmul(queries, wq)
    k = ad.matmul(context, wk)
    v = ad.matmul(context, wv)
    merged = None
    for sel, sel_t in _head_selectors(d, heads, str(q.dtype)):
        qh = ad.matmul(q, sel)
        kh = ad.matmul(k, sel)
        vh = ad.matmul(v, sel)
        weights = ad.row_softmax(ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / np.sqrt(dh)))
        ctx = ad.matmul(ad.matmul(weights, vh), sel_t)
        merged = ctx if merged is None else ad.add(merged, ctx)
    return ad.matmul(merged, wo)


def encode_sequence(vit: FrozenViT, seq: Tensor) -> Tensor:
    """Run the transformer over an explicit row sequence; returns the CLS-row
    feature, unit-normalized, in the text embedding space."""
    if seq.shape[1] != vit.config.d_v:
        raise ShapeError(f"encode: sequence width {seq.shape[1]} vs d_v={vit.config.d_v}")
    x = seq
    for blk in vit.blocks:
        a_in = ad.layer_norm(x, blk["ln1_g"], blk["ln1_b"])
        x = ad.add(x, multi_head_attention(a_in, a_in, blk["wq"], blk["wk"], blk["wv"],
                                           blk["wo"], vit.config.heads))
        f_in = ad.layer_norm(x, blk["ln2_g"], blk["ln2_b"])
        hidden = ad.gelu(ad.add(ad.matmul(f_in, blk["fc1_w"]), blk["fc1_b"]))
        x = ad.add(x, ad.add(ad.matmul(hidden, blk["fc2_w"]), blk["fc2_b"]))
    x = ad.layer_norm(x, vit.ln_post_g, vit.ln_post_b)
    take_cls = np.zeros((1, x.shape[0]), dtype=str(x.dtype))
    take_cls[0, 0] = 1.0
    cls_row = ad.matmul(constant(take_cls), x)
    return ad.unit_normalize(ad.matmul(cls_row, vit.head))


def encode(vit: FrozenViT, cls: np.ndarray, patches: np.ndarray,
           prompts: Tensor | None = None) -> Tensor:
    """Encode a [CLS; patches; prompts] sequence. Gradients flow to `prompts`
    (and through them to their producer) but never into the encoder."""
    rows = [constant(cls), constant(patches)]
    if prompts is not None:
        if prompts.shape[1] != vit.config.d_v:
            raise ShapeError(f"encode: prompts width {prompts.shape[1]} vs d_v={vit.config.d_v}")
        rows.append(prompts)
    return encode_sequence(vit, ad.concat_rows(rows))


def augment(image: np.ndarray, seed: int, max_shift: int = 1,
            noise_scale: float = 0.05) -> np.ndarray:
    """Seeded toroidal shift of up to `max_shift` pixels plus additive
    Gaussian noise with std = noise_scale * image std."""
    image = np.asarray(image)
    rng = generator(seed, "augment")
    out = image
    if max_shift > 0:
        dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
        out = np.roll(out, (int(dy), int(dx)), axis=(0, 1))
    if noise_scale > 0.0:
        std = float(image.std())
        if std > 0.0:
            out = out + rng.normal(0.0, noise_scale * std, image.shape).astype(image.dtype)
    return out.astype(image.dtype, copy=False)


# ---------------------------------------------------------------------------
# text side


class TextEmbeddingStore:
    """Per-class composite text features and raw attribute embeddings.

    Rows are unit-normalized; immutable after construction and safe to share.
    """

    def __init__(self, d_t: int, entries: list[tuple[str, np.ndarray, np.ndarray]]):
        if not entries:
            raise ValueError("TextEmbeddingStore: no classes")
        self.d_t = d_t
        self.class_names: list[str] = []
        self._t: dict[str, np.ndarray] = {}
        self._a: dict[str, np.ndarray] = {}
        for name, t_rows, a_rows in entries:
            t_rows = np.atleast_2d(np.asarray(t_rows))
            a_rows = np.atleast_2d(np.asarray(a_rows))
            if t_rows.shape[0] < 1:
                raise ValueError(f"class '{name}': needs at least one attribute")
            if t_rows.shape[1] != d_t or a_rows.shape[1] != d_t:
                raise ValueError(f"class '{name}': row width mismatch with d_t={d_t}")
            norms = np.linalg.norm(t_rows, axis=1)
            if np.abs(norms - 1.0).max() > 1e-6:
                raise ValueError(f"class '{name}': composite rows must be unit-norm")
            self.class_names.append(name)
            self._t[name] = t_rows
            self._a[name] = a_rows

    def composite_rows(self, name: str) -> np.ndarray:
        return self._t[name]

    def attribute_rows(self, name: str) -> np.ndarray:
        return self._a[name]

    def attribute_count(self, name: str) -> int:
        return self._t[name].shape[0]

    def subset(self, names) -> "TextEmbeddingStore":
        return TextEmbeddingStore(self.d_t, [(n, self._t[n], self._a[n]) for n in names])

    def attribute_matrix(self, names=None) -> np.ndarray:
        names = list(names) if names is not None else self.class_names
        return np.concatenate([self._a[n] for n in names], axis=0)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.class_names:
            h.update(name.encode("utf-8"))
            h.update(self._t[name].tobytes())
            h.update(self._a[name].tobytes())
        return h.hexdigest()


def _unit_rows(rows: np.ndarray) -> np.ndarray:
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def synth_text_embeddings(class_names: list[str], attributes_per_class: dict[str, list[str]],
                          d_t: int, seed: int, dtype=np.float32) -> TextEmbeddingStore:
    """Hash-seeded stand-in for a text encoder over composite class/attribute
    prompts. Classes sharing an attribute string share that embedding
    component exactly, so attribute overlap carries over into feature space."""

    def gaussian(kind: str, text: str) -> np.ndarray:
        return generator(seed, kind, text).normal(0.0, 1.0 / np.sqrt(d_t), d_t)

    entries = []
    for name in class_names:
        attrs = attributes_per_class.get(name, [])
        if not attrs:
            raise ValueError(f"class '{name}': empty attribute list")
        cvec = gaussian("class", name)
        avecs = np.stack([gaussian("attr", a) for a in attrs])
        t_rows = _unit_rows(cvec[None, :] + avecs).astype(dtype)
        a_rows = _unit_rows(avecs).astype(dtype)
        entries.append((name, t_rows, a_rows))
    return TextEmbeddingStore(d_t, entries)


def save_text_embeddings(path, store: TextEmbeddingStore) -> None:
    fileio.save_embeddings(path, store.d_t, [
        (n, store.composite_rows(n), store.attribute_rows(n)) for n in store.class_names])


def load_text_embeddings(path) -> TextEmbeddingStore:
    """Load a store, renormalizing composite rows only where they drift
    beyond tolerance so a save/load round trip is bit-identical."""
    d_t, classes = fileio.load_embeddings(path)
    entries = []
    for name, t_rows, a_rows in classes:
        norms = np.linalg.norm(t_rows, axis=1)
        if (norms == 0.0).any():
            raise fileio.FormatError(f"{path}: class '{name}' has a zero composite row")
        off = np.abs(norms - 1.0) > 5e-7
        if off.any():
            t_rows = t_rows.copy()
            t_rows[off] = t_rows[off] / norms[off, None]
        entries.append((name, t_rows, a_rows))
    return TextEmbeddingStore(d_t, entries)
