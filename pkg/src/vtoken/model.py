"""Toy vision-language decoder: visual encoder, adapter, causal decoder and two heads."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, LengthError, ShapeError, VocabularyError
from .tensor import Tensor

GROUPS = ("visual_encoder", "adapter", "decoder", "mm_head", "vm_head")
INIT_STD = 0.02
_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    vocab_size: int = 64
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_len: int = 128
    grid: tuple = (4, 4)
    patch: tuple = (8, 8, 3)
    visual_dim: int = 64
    adapter_hidden: int = 128
    mlp_ratio: int = 4

    def __post_init__(self):
        self.grid = tuple(self.grid)
        self.patch = tuple(self.patch)
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.n_heads} heads")

    @property
    def n_patches(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return int(np.prod(self.patch))

    @property
    def image_shape(self) -> tuple:
        return (self.grid[0] * self.patch[0], self.grid[1] * self.patch[1], self.patch[2])

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"], d["patch"] = list(self.grid), list(self.patch)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class ParamSet:
    """Named parameters, each assigned to exactly one group."""

    tensors: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)

    def add(self, name: str, group: str, data: np.ndarray):
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        if name in self.tensors:
            raise ValueError(f"duplicate parameter {name!r}")
        self.tensors[name] = Tensor(data)
        self.groups[name] = group

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self, group: str | None = None) -> list:
        return [n for n in self.tensors if group is None or self.groups[n] == group]

    def in_groups(self, groups) -> list:
        groups = set(groups)
        return [n for n in self.tensors if self.groups[n] in groups]

    def set_trainable(self, groups):
        """Enable gradients exactly for the parameters in ``groups``."""
        groups = set(groups)
        for name, t in self.tensors.items():
            t.requires_grad = self.groups[name] in groups
            t.grad = None

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def snapshot(self) -> dict:
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def astype(self, dtype) -> "ParamSet":
        out = ParamSet()
        for n, t in self.tensors.items():
            out.add(n, self.groups[n], t.data.copy() if dtype is None else t.data.astype(dtype))
        return out

    def copy(self) -> "ParamSet":
        return self.astype(None)


def _trunc_normal(rng: np.random.Generator, shape, std=INIT_STD, dtype=None) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype or T.default_dtype())


def init_params(config: ModelConfig, seed: int = 0) -> ParamSet:
    rng = np.random.default_rng(seed)
    dt = T.default_dtype()
    d, dv, C = config.model_dim, config.visual_dim, config.vocab_size
    hidden = config.mlp_ratio * d
    p = ParamSet()

    def w(*shape):
        return _trunc_normal(rng, shape, dtype=dt)

    def zeros(*shape):
        return np.zeros(shape, dtype=dt)

    def ones(*shape):
        return np.ones(shape, dtype=dt)

    p.add("encoder.patch_w", "visual_encoder", w(config.patch_dim, dv))
    p.add("encoder.patch_b", "visual_encoder", zeros(dv))
    p.add("encoder.pos", "visual_encoder", zeros(config.n_patches, dv))

    p.add("adapter.w1", "adapter", w(dv, config.adapter_hidden))
    p.add("adapter.b1", "adapter", zeros(config.adapter_hidden))
    p.add("adapter.w2", "adapter", w(config.adapter_hidden, d))
    p.add("adapter.b2", "adapter", zeros(d))

    p.add("decoder.embed", "decoder", w(C, d))
    p.add("decoder.pos", "decoder", zeros(config.max_len, d))
    for i in range(config.n_layers):
        pre = f"decoder.layers.{i}"
        p.add(f"{pre}.ln1.g", "decoder", ones(d))
        p.add(f"{pre}.ln1.b", "decoder", zeros(d))
        for proj in ("q", "k", "v", "o"):
            p.add(f"{pre}.attn.w{proj}", "decoder", w(d, d))
            p.add(f"{pre}.attn.b{proj}", "decoder", zeros(d))
        p.add(f"{pre}.ln2.g", "decoder", ones(d))
        p.add(f"{pre}.ln2.b", "decoder", zeros(d))
        p.add(f"{pre}.mlp.w1", "decoder", w(d, hidden))
        p.add(f"{pre}.mlp.b1", "decoder", zeros(hidden))
        p.add(f"{pre}.mlp.w2", "decoder", w(hidden, d))
        p.add(f"{pre}.mlp.b2", "decoder", zeros(d))
    p.add("decoder.ln_f.g", "decoder", ones(d))
    p.add("decoder.ln_f.b", "decoder", zeros(d))

    p.add("mm_head.w", "mm_head", w(C, d))
    p.add("vm_head.w", "vm_head", w(C, d))
    return p


def patchify(pixels: np.ndarray, config: ModelConfig) -> np.ndarray:
    """``[..., H, W, 3]`` uint8 image(s) -> ``[..., P, patch_dim]`` floats in [-0.5, 0.5]."""
    pixels = np.asarray(pixels)
    if pixels.shape[-3:] != config.image_shape:
        raise ShapeError(f"image shape {pixels.shape[-3:]} does not match grid "
                         f"{config.grid} of {config.patch} patches")
    gr, gc = config.grid
    ph, pw, ch = config.patch
    lead = pixels.shape[:-3]
    x = pixels.reshape(*lead, gr, ph, gc, pw, ch)
    x = np.moveaxis(x, -4, -3)  # [..., gr, gc, ph, pw, ch]
    x = x.reshape(*lead, gr * gc, ph * pw * ch)
    return x.astype(T.default_dtype()) / 255.0 - 0.5


class VisionLanguageModel:
    """Stateless forward functions over a :class:`ParamSet`."""

    def __init__(self, config: ModelConfig, params: ParamSet | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)

    # -- visual side --
    def visual_encode(self, image) -> Tensor:
        """Per-patch linear projection of raw pixels plus a 2-D positional table."""
        p = self.params
        x = Tensor(patchify(image, self.config), dtype=p["encoder.patch_w"].dtype)
        feats = T.matmul(x, p["encoder.patch_w"]) + p["encoder.patch_b"]
        return feats + p["encoder.pos"]

    def adapt(self, features: Tensor) -> Tensor:
        p = self.params
        if features.shape[-1] != self.config.visual_dim:
            raise ShapeError(f"adapter expects feature dim {self.config.visual_dim}, "
                             f"got {features.shape}")
        h = T.gelu(T.matmul(features, p["adapter.w1"]) + p["adapter.b1"])
        return T.matmul(h, p["adapter.w2"]) + p["adapter.b2"]

    def image_embeddings(self, image) -> Tensor:
        return self.adapt(self.visual_encode(image))

    # -- text side --
    def embed_text(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        C = self.config.vocab_size
        if ids.size and (ids.min() < 0 or ids.max() >= C):
            bad = ids[(ids < 0) | (ids >= C)][0]
            raise VocabularyError(f"token id {int(bad)} outside vocabulary of size {C}")
        return T.embedding(self.params["decoder.embed"], ids)

    # -- decoder --
    def decode(self, x: Tensor, modality_tags=None) -> Tensor:
        """Pre-norm causal transformer; accepts ``[L, d]`` or ``[B, L, d]``."""
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        B, L, d = x.shape
        if L > self.config.max_len:
            raise LengthError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        if d != self.config.model_dim:
            raise ShapeError(f"decoder expects width {self.config.model_dim}, got {x.shape}")
        if modality_tags is not None and len(modality_tags) not in (L, B):
            raise ContractError(f"{len(modality_tags)} modality tags for length {L}")
        p = self.params
        x = x + p["decoder.pos"][:L]
        future = np.triu(np.ones((L, L), dtype=bool), k=1)
        for i in range(self.config.n_layers):
            pre = f"decoder.layers.{i}"
            h = T.layer_norm(x, p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
            x = x + self._attention(h, pre, future)
            h = T.layer_norm(x, p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])
            h = T.gelu(T.matmul(h, p[f"{pre}.mlp.w1"]) + p[f"{pre}.mlp.b1"])
            x = x + (T.matmul(h, p[f"{pre}.mlp.w2"]) + p[f"{pre}.mlp.b2"])
        x = T.layer_norm(x, p["decoder.ln_f.g"], p["decoder.ln_f.b"])
        return T.reshape(x, (L, d)) if squeeze else x

    def _attention(self, h: Tensor, pre: str, future: np.ndarray) -> Tensor:
        p = self.params
        B, L, d = h.shape
        H = self.config.n_heads
        dh = d // H

        def heads(name):
            t = T.matmul(h, p[f"{pre}.attn.w{name}"]) + p[f"{pre}.attn.b{name}"]
            return T.transpose(T.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        att = T.softmax(T.masked_fill(scores, future, _MASK_VALUE))
        y = T.reshape(T.transpose(T.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
        return T.matmul(y, p[f"{pre}.attn.wo"]) + p[f"{pre}.attn.bo"]

    # -- heads --
    def _head(self, name: str, h: Tensor) -> Tensor:
        w = self.params[name]
        if h.shape[-1] != w.shape[1]:
            raise ShapeError(f"{name}: expected last dim {w.shape[1]}, got {h.shape}")
        return T.matmul(h, T.transpose(w, (1, 0)))

    def mm_head(self, hidden: Tensor) -> Tensor:
        """Vocabulary logits from decoder states (no bias)."""
        return self._head("mm_head.w", hidden)

    def vm_head(self, x_image: Tensor) -> Tensor:
        """Vocabulary logits from visual embeddings (no bias)."""
        return self._head("vm_head.w", x_image)
