"""Trainable cross-attention prompt generator.

A bank of m learnable query rows is fused with the image's patch
embeddings and with projected class-attribute embeddings through two
multi-head cross-attention stages (image first, attributes second), each
followed by layer normalization and a bottleneck FFN with a residual.
The m output rows are the visual prompts injected into the frozen vision
encoder. Optional low-rank (LoRA) adapters ride on the six attention
projection matrices so a client can train and transmit a small payload
instead of the full parameter set.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .encoders import block_weight_std, multi_head_attention
from .seeding import generator

QUERY_STD = 0.02  # query bank init, fixed across widths
LORA_PROJECTIONS = ("wq", "wk", "wv")  # adapters cover query/key/value only


@dataclass
class PromptFormerParams:
    """All trainable weights of the prompt generator.

    This is the only parameter set that is ever transmitted between
    clients and the server.
    """
    m: int
    d_v: int
    d_t: int
    heads: int
    d_ff: int
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.zero_grad()

    def copy(self) -> "PromptFormerParams":
        clone = PromptFormerParams(self.m, self.d_v, self.d_t, self.heads, self.d_ff)
        for name, t in self.tensors.items():
            clone.tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
        return clone

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            h.update(name.encode())
            h.update(self.tensors[name].data.tobytes())
        return h.hexdigest()


@dataclass
class LoRABank:
    """Low-rank down/up factor pairs for the six attention projections."""
    rank: int
    scale: float
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def named(self) -> dict[str, Tensor]:
        return self.tensors

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.tensors.values():
            t.requires_grad = flag
            t.zero_grad()

    def copy(self) -> "LoRABank":
        clone = LoRABank(self.rank, self.scale)
        for name, t in self.tensors.items():
            clone.tensors[name] = Tensor(t.data.copy(), requires_grad=t.requires_grad, name=name)
        return clone


def init_promptformer(m: int, d_v: int, d_t: int, heads: int, seed: int,
                      d_ff: int | None = None, dtype=np.float32) -> PromptFormerParams:
    """Gaussian init: std 0.02 for the query bank, width-scaled std for the
    linear weights (matching 0.02 at the full-scale width of 768 so the
    cross-attention paths keep signal at reduced widths), zero biases,
    identity layer norms. Deterministic per seed."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if d_v % heads != 0:
        raise ValueError(f"d_v={d_v} not divisible by heads={heads}")
    if d_ff is None:
        d_ff = max(1, d_v // 2)
    rng = generator(seed, "promptformer")
    params = PromptFormerParams(m=m, d_v=d_v, d_t=d_t, heads=heads, d_ff=d_ff)
    linear_std = block_weight_std(d_v)

    def w(name, *shape):
        params.tensors[name] = Tensor(rng.normal(0.0, linear_std, shape).astype(dtype),
                                      requires_grad=True, name=name)

    def zeros(name, *shape):
        params.tensors[name] = Tensor(np.zeros(shape, dtype), requires_grad=True, name=name)

    def ones(name, *shape):
        params.tensors[name] = Tensor(np.ones(shape, dtype), requires_grad=True, name=name)

    params.tensors["query_bank"] = Tensor(
        rng.normal(0.0, QUERY_STD, (m, d_v)).astype(dtype), requires_grad=True,
        name="query_bank")
    w("t_proj/w", d_t, d_v)
    zeros("t_proj/b", 1, d_v)
    for stage in ("s1", "s2"):
        for proj in ("wq", "wk", "wv", "wo"):
            w(f"{stage}/{proj}", d_v, d_v)
        ones(f"{stage}/ln_g", 1, d_v)
        zeros(f"{stage}/ln_b", 1, d_v)
        w(f"{stage}/ffn1_w", d_v, d_ff)
        zeros(f"{stage}/ffn1_b", 1, d_ff)
        w(f"{stage}/ffn2_w", d_ff, d_v)
        zeros(f"{stage}/ffn2_b", 1, d_v)
    return params


def inject_lora(params: PromptFormerParams, rank: int, seed: int, scale: float = 1.0) -> LoRABank:
    """Fresh adapter bank: down ~ N(0, 0.02^2), up = 0, so the composed
    weights equal the base weights exactly at injection time."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    rng = generator(seed, "lora")
    d_v = params.d_v
    dtype = params.tensors["query_bank"].data.dtype
    bank = LoRABank(rank=rank, scale=scale)
    for stage in ("s1", "s2"):
        for proj in LORA_PROJECTIONS:
            down = rng.normal(0.0, 0.02, (d_v, rank)).astype(dtype)
            bank.tensors[f"{stage}/{proj}/down"] = Tensor(down, requires_grad=True)
            bank.tensors[f"{stage}/{proj}/up"] = Tensor(np.zeros((rank, d_v), dtype),
                                                        requires_grad=True)
    return bank


def param_count(params: PromptFormerParams, mode: str, lora: LoRABank | None = None) -> int:
    """Exact scalar count of the payload `mode` would transmit."""
    if mode == "full":
        return sum(t.data.size for t in params.tensors.values())
    if mode == "lora_only":
        if lora is None:
            raise ValueError("param_count: lora_only mode needs a bank")
        return sum(t.data.size for t in lora.tensors.values())
    raise ValueError(f"param_count: unknown mode '{mode}'")


def project_attributes(params: PromptFormerParams, attributes: Tensor) -> Tensor:
    """Affine map of attribute embeddings into the patch embedding space."""
    if attributes.shape[1] != params.d_t:
        raise ShapeError(f"project_attributes: width {attributes.shape[1]} vs d_t={params.d_t}")
    return ad.add(ad.matmul(attributes, params.tensors["t_proj/w"]), params.tensors["t_proj/b"])


def _effective_projection(params: PromptFormerParams, lora: LoRABank | None,
                          stage: str, proj: str) -> Tensor:
    base = params.tensors[f"{stage}/{proj}"]
    if lora is None or proj not in LORA_PROJECTIONS:
        return base
    down = lora.tensors[f"{stage}/{proj}/down"]
    up = lora.tensors[f"{stage}/{proj}/up"]
    return ad.add(base, ad.scale(ad.matmul(down, up), lora.scale))


def _stage(params: PromptFormerParams, lora: LoRABank | None, stage: str,
           queries: Tensor, context: Tensor) -> Tensor:
    attn = multi_head_attention(
        queries, context,
        _effective_projection(params, lora, stage, "wq"),
        _effective_projection(params, lora, stage, "wk"),
        _effective_projection(params, lora, stage, "wv"),
        params.tensors[f"{stage}/wo"],
        params.heads,
    )
    x = ad.layer_norm(ad.add(queries, attn),
                      params.tensors[f"{stage}/ln_g"], params.tensors[f"{stage}/ln_b"])
    hidden = ad.gelu(ad.add(ad.matmul(x, params.tensors[f"{stage}/ffn1_w"]),
                            params.tensors[f"{stage}/ffn1_b"]))
    ffn = ad.add(ad.matmul(hidden, params.tensors[f"{stage}/ffn2_w"]),
                 params.tensors[f"{stage}/ffn2_b"])
    return ad.add(x, ffn)


def generate_prompts(params: PromptFormerParams, lora: LoRABank | None,
                     attributes, patches) -> Tensor:
    """Produce the m visual prompt rows for one image.

    `attributes` is the stacked attribute-embedding matrix of the candidate
    class set (never just the label's class, which would leak it);
    `patches` is the image's b x d_v patch embedding matrix.
    """
    attributes = attributes if isinstance(attributes, Tensor) else ad.constant(
        np.asarray(attributes, dtype=params.tensors["query_bank"].data.dtype))
    patches = patches if isinstance(patches, Tensor) else ad.constant(
        np.asarray(patches, dtype=params.tensors["query_bank"].data.dtype))
    if attributes.shape[0] < 1:
        raise ShapeError("generate_prompts: empty attribute matrix")
    if patches.shape[1] != params.d_v:
        raise ShapeError(f"generate_prompts: patch width {patches.shape[1]} vs d_v={params.d_v}")

    x = _stage(params, lora, "s1", params.tensors["query_bank"], patches)
    projected = project_attributes(params, attributes)
    return _stage(params, lora, "s2", x, projected)
