"""Assembled depth model: patches → vision encoder → reprogramming → prompt fusion → text encoder → head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from . import weightfile
from .apg import Tokenizer, build_prompt_bundle
from .backbone import (BackboneConfig, _init_module, backbone_header, embed_tokens,
                       encode_image, encode_sequence, init_backbones)
from .dataset import patchify
from .errors import ConfigError
from .head import AdaptationHead, HeadConfig, check_depth_range, head_forward, to_metric_depth
from .lora import LoraLinear, adapters
from .reprogramming import Fusion, PrototypeMap, ReprogrammingWeights, derive_prototypes, fuse, reprogram

LORA_SCHEMES = ("frozen", "lora_vision", "lora_both")
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    n_prototypes: int = 32
    head_channels: tuple[int, int, int, int] = (16, 8, 8, 4)
    d_min: float = 1e-3
    d_max: float = 10.0

    def __post_init__(self):
        check_depth_range(self.d_min, self.d_max)

    @property
    def head(self) -> HeadConfig:
        b = self.backbone
        return HeadConfig(width=b.D, grid=b.grid, channels=tuple(self.head_channels), target=b.image_size)

    def header(self) -> list[int]:
        # depth range is kept in millimetres so the header stays integral
        return backbone_header(self.backbone) + [self.n_prototypes, *self.head_channels,
                                                 round(self.d_min * 1000), round(self.d_max * 1000)]


@dataclass(frozen=True)
class LoraSettings:
    scheme: str = "lora_both"
    vision_rank: int = 8
    vision_alpha: float = 16.0
    text_rank: int = 8
    text_alpha: float = 8.0
    targets: tuple[str, ...] = ("q", "v")

    def __post_init__(self):
        if self.scheme not in LORA_SCHEMES:
            raise ConfigError(f"LoRA scheme {self.scheme!r} not in {LORA_SCHEMES}")


class LlmMde(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        b = cfg.backbone
        self.vision, self.embed, self.text = init_backbones(b, seed)
        gen = torch.Generator().manual_seed(seed + 1)
        self.proto = PrototypeMap(cfg.n_prototypes, b.V)
        self.reprog = ReprogrammingWeights(b.d_m, b.D, b.heads)
        self.fusion = Fusion(b.d_m, b.D)
        self.head = AdaptationHead(cfg.head)
        for m in (self.proto, self.reprog, self.fusion, self.head):
            _init_module(m, gen)
        self.lora = LoraSettings(scheme="frozen")
        self.freeze_backbones()

    # -- trainability -----------------------------------------------------

    def backbone_modules(self):
        return (self.vision, self.embed, self.text)

    def freeze_backbones(self) -> None:
        for m in self.backbone_modules():
            for name, p in m.named_parameters():
                if ".adapter." not in name:
                    p.requires_grad_(False)

    def apply_lora(self, settings: LoraSettings, seed: int = 0) -> None:
        """Attach adapters to the attention projections the scheme selects."""
        if adapters(self):
            raise ConfigError("adapters already attached")
        self.lora = settings
        plan = []
        if settings.scheme in ("lora_vision", "lora_both"):
            plan.append(("vision", self.vision, settings.vision_rank, settings.vision_alpha))
        if settings.scheme == "lora_both":
            plan.append(("text", self.text, settings.text_rank, settings.text_alpha))
        i = 0
        for prefix, enc, rank, alpha in plan:
            for li, layer in enumerate(enc.layers):
                for t in settings.targets:
                    lin: LoraLinear = getattr(layer.attn, t)
                    lin.attach(rank, alpha, seed=seed * 1009 + i, target=f"{prefix}.layers.{li}.attn.{t}")
                    i += 1
        self.freeze_backbones()

    def merge_adapters(self) -> None:
        for m in self.modules():
            if isinstance(m, LoraLinear) and m.adapter is not None:
                m.merge()

    def frozen_tensors(self) -> dict[str, torch.Tensor]:
        return {n: p for n, p in self.named_parameters() if not p.requires_grad}

    # -- forward ----------------------------------------------------------

    def prototypes(self) -> torch.Tensor:
        return derive_prototypes(self.embed.E, self.proto.P)

    def forward_unit(self, images: torch.Tensor, prompt_ids) -> torch.Tensor:
        """images (B, H, W, 3); prompt_ids: one id list per image. Returns unit depth (B, H, W)."""
        mean = images.new_tensor(IMAGE_MEAN)
        std = images.new_tensor(IMAGE_STD)
        patches = patchify((images - mean) / std, self.cfg.backbone.patch_size)
        feats = encode_image(self.vision, patches)
        F = reprogram(feats, self.prototypes(), self.reprog)
        # prompt lengths differ across images, so the text stack runs per prompt length
        hidden = [None] * len(prompt_ids)
        groups: dict[int, list[int]] = {}
        for i, ids in enumerate(prompt_ids):
            groups.setdefault(len(ids), []).append(i)
        for idx in groups.values():
            ids = torch.as_tensor([list(prompt_ids[i]) for i in idx], dtype=torch.long)
            prompt = embed_tokens(self.embed, ids).reshape(len(idx), ids.shape[1], self.cfg.backbone.D)
            seq = fuse(F[idx], prompt, self.fusion)
            out = encode_sequence(self.text, seq.tokens)
            for j, i in enumerate(idx):
                hidden[i] = out[j, seq.prompt_len:]
        return head_forward(self.head, torch.stack(hidden))

    def forward(self, images: torch.Tensor, prompt_ids) -> torch.Tensor:
        return to_metric_depth(self.forward_unit(images, prompt_ids), self.cfg.d_min, self.cfg.d_max)

    @torch.no_grad()
    def predict(self, samples, tokenizer: Tokenizer, dataset_name: str, mode: str = "apg") -> np.ndarray:
        was_training = self.training
        self.eval()
        images = torch.from_numpy(np.stack([s.image for s in samples])).to(self.dtype)
        ids = [build_prompt_bundle(s, dataset_name, tokenizer, mode).token_ids for s in samples]
        out = self(images, ids).cpu().numpy()
        self.train(was_training)
        return out

    @property
    def dtype(self):
        return self.head.linear.weight.dtype

    # -- persistence --------------------------------------------------------

    def save(self, path) -> None:
        weightfile.save_module(self, path, self.cfg.header())

    def load(self, path) -> None:
        weightfile.load_into(self, path, self.cfg.header(), strict=True)
        self.freeze_backbones()


def save_backbones(vision, embed, text, cfg: BackboneConfig, path) -> None:
    holder = nn.Module()
    holder.vision, holder.embed, holder.text = vision, embed, text
    weightfile.save_module(holder, path, backbone_header(cfg))


def model_config_from_header(header: list[int]) -> ModelConfig:
    if len(header) != 17:
        raise ConfigError(f"model header has {len(header)} fields, expected 17")
    b = BackboneConfig(d_m=header[0], D=header[1], V=header[2], vision_layers=header[3],
                       text_layers=header[4], heads=header[5], patch_size=header[6],
                       dropout=header[7] / 10000, image_size=header[8], max_text_len=header[9])
    return ModelConfig(backbone=b, n_prototypes=header[10], head_channels=tuple(header[11:15]),
                       d_min=header[15] / 1000, d_max=header[16] / 1000)


def load_model(path) -> LlmMde:
    header, _ = weightfile.read_tensors(path)
    model = LlmMde(model_config_from_header(header))
    model.load(path)
    return model
