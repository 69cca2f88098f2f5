"""Vision patch encoder, word-embedding table and bidirectional text encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, NumericError, ShapeError, VocabError
from .lora import LoraLinear


@dataclass(frozen=True)
class BackboneConfig:
    d_m: int = 64            # vision width
    D: int = 64              # text width
    V: int = 512             # vocabulary size
    vision_layers: int = 2
    text_layers: int = 2
    heads: int = 4
    patch_size: int = 16
    dropout: float = 0.1
    image_size: int = 224
    max_text_len: int = 320

    def __post_init__(self):
        for name in ("d_m", "D", "V", "heads", "patch_size", "image_size", "max_text_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_m % self.heads or self.D % self.heads:
            raise ConfigError(f"d_m={self.d_m} and D={self.D} must be divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")

    @classmethod
    def full_scale(cls) -> "BackboneConfig":
        """Full-width configuration: 768 wide, 12 layers each, 30522-word vocabulary."""
        return cls(d_m=768, D=768, V=30522, vision_layers=12, text_layers=12, heads=12)

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


class SelfAttention(nn.Module):
    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = LoraLinear(width, width)
        self.k = LoraLinear(width, width)
        self.v = LoraLinear(width, width)
        self.o = LoraLinear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        *lead, t, width = x.shape
        dh = width // self.heads

        def split(z):
            return z.reshape(*lead, t, self.heads, dh).transpose(-3, -2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        probs = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
        ctx = self.drop(probs) @ v
        return self.o(ctx.transpose(-3, -2).reshape(*lead, t, width))


class Block(nn.Module):
    """Pre-norm transformer block, no masking."""

    def __init__(self, width: int, heads: int, dropout: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = SelfAttention(width, heads, dropout)
        self.norm2 = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, 4 * width)
        self.fc2 = nn.Linear(4 * width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.fc2(F.gelu(self.fc1(self.norm2(x)))))


class VisionEncoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.d_m)
        self.pos = nn.Parameter(torch.zeros(cfg.num_patches, cfg.d_m))
        self.layers = nn.ModuleList(Block(cfg.d_m, cfg.heads, cfg.dropout) for _ in range(cfg.vision_layers))
        self.norm = nn.LayerNorm(cfg.d_m)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        return encode_image(self, patches)


class WordEmbeddingTable(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.E = nn.Parameter(torch.zeros(cfg.V, cfg.D))

    @property
    def vocab_size(self) -> int:
        return self.E.shape[0]


class TextEncoder(nn.Module):
    """Bidirectional encoder stack; no final norm so zeroed blocks pass inputs through."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.pos = nn.Parameter(torch.zeros(cfg.max_text_len, cfg.D))
        self.layers = nn.ModuleList(Block(cfg.D, cfg.heads, cfg.dropout) for _ in range(cfg.text_layers))

    def forward(self, seq: torch.Tensor) -> torch.Tensor:
        return encode_sequence(self, seq)


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    """Scaled-Gaussian init in parameter registration order (deterministic)."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            if "norm" in name or ".bn." in f".{name}":
                p.fill_(1.0 if leaf == "weight" else 0.0)
            elif leaf == "bias":
                p.zero_()
            elif leaf == "pos":
                p.copy_(0.02 * torch.randn(p.shape, generator=gen))
            elif leaf == "E":
                # unit scale keeps prototype keys, and so reprogramming logits, O(1)
                p.copy_(torch.randn(p.shape, generator=gen))
            else:
                # x @ W projections are (in, out); layer weights are (out, in, ...)
                fan_in = p.shape[0] if leaf in ("q", "k", "v", "out") else p[0].numel()
                p.copy_(torch.randn(p.shape, generator=gen) / math.sqrt(fan_in))


def init_backbones(config: BackboneConfig, seed: int, weights_path=None):
    """Build (vision encoder, word embeddings, text encoder); a weight file overrides init."""
    gen = torch.Generator().manual_seed(seed)
    vision, embed, text = VisionEncoder(config), WordEmbeddingTable(config), TextEncoder(config)
    for m in (vision, embed, text):
        _init_module(m, gen)
    if weights_path is not None:
        from .weightfile import load_into

        holder = nn.Module()
        holder.vision, holder.embed, holder.text = vision, embed, text
        load_into(holder, weights_path, backbone_header(config), strict=False)
    return vision, embed, text


def backbone_header(cfg: BackboneConfig) -> list[int]:
    return [cfg.d_m, cfg.D, cfg.V, cfg.vision_layers, cfg.text_layers, cfg.heads,
            cfg.patch_size, round(cfg.dropout * 10000), cfg.image_size, cfg.max_text_len]


def encode_image(w: VisionEncoder, patches: torch.Tensor) -> torch.Tensor:
    """(…, N, patch_dim) → (…, N, d_m)."""
    if patches.shape[-2] != w.pos.shape[0]:
        raise ShapeError(f"{patches.shape[-2]} patches, positional table has {w.pos.shape[0]}")
    if patches.shape[-1] != w.patch_proj.in_features:
        raise ShapeError(f"patch dim {patches.shape[-1]} != {w.patch_proj.in_features}")
    x = w.patch_proj(patches) + w.pos
    for layer in w.layers:
        x = layer(x)
    return w.norm(x)


def embed_tokens(E: WordEmbeddingTable, ids) -> torch.Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long).reshape(-1)
    if ids.numel() and (int(ids.max()) >= E.vocab_size or int(ids.min()) < 0):
        raise VocabError(f"token id outside [0, {E.vocab_size})")
    return E.E[ids]


def encode_sequence(w: TextEncoder, seq: torch.Tensor) -> torch.Tensor:
    """(…, T, D) → (…, T, D); positions are added inside."""
    t = seq.shape[-2]
    if t < 1:
        raise ShapeError("empty sequence")
    if t > w.pos.shape[0]:
        raise ShapeError(f"sequence length {t} exceeds max_text_len {w.pos.shape[0]}")
    if not torch.isfinite(seq).all():
        raise NumericError("non-finite values in encoder input")
    x = seq + w.pos[:t]
    for layer in w.layers:
        x = layer(x)
    return x
