"""Low-rank adapters for linear projections: W' = W + (alpha / r) * A @ B."""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ConfigError, ShapeError, StateError


class LoraAdapter(nn.Module):
    """Trainable low-rank update for one ``d_out x d_in`` weight.

    ``A`` is ``d_out x r`` and ``B`` is ``r x d_in``; ``B`` starts at zero so a
    fresh adapter leaves the wrapped weight unchanged.
    """

    def __init__(self, d_out: int, d_in: int, rank: int, alpha: float, target: str = ""):
        super().__init__()
        if rank < 1:
            raise ConfigError(f"LoRA rank must be >= 1, got {rank}")
        if rank > min(d_out, d_in) / 2:
            raise ConfigError(f"LoRA rank {rank} exceeds min({d_out}, {d_in}) / 2")
        self.rank = rank
        self.alpha = float(alpha)
        self.target = target
        self.merged = False
        self.A = nn.Parameter(torch.zeros(d_out, rank))
        self.B = nn.Parameter(torch.zeros(rank, d_in))

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.A @ self.B)

    def extra_repr(self):
        return f"target={self.target!r}, rank={self.rank}, alpha={self.alpha}"


def init_adapter(d_out: int, d_in: int, r: int, alpha: float, seed: int, target: str = "") -> LoraAdapter:
    adapter = LoraAdapter(d_out, d_in, r, alpha, target)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        adapter.A.copy_(torch.randn(d_out, r, generator=gen) / math.sqrt(r))
    return adapter


def effective_weight(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    if W.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise ShapeError(f"weight {tuple(W.shape)} vs adapter "
                         f"{adapter.A.shape[0]}x{adapter.B.shape[1]}")
    return W + adapter.delta()


def merge_adapter(W: torch.Tensor, adapter: LoraAdapter) -> torch.Tensor:
    """Fold the adapter into a copy of ``W`` and retire the adapter."""
    if adapter.merged:
        raise StateError(f"adapter {adapter.target!r} already merged")
    with torch.no_grad():
        merged = effective_weight(W, adapter).detach().clone()
    adapter.merged = True
    adapter.requires_grad_(False)
    return merged


class LoraLinear(nn.Module):
    """Linear layer with a frozen-able base weight and an optional adapter."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d_out, d_in))
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None
        self.adapter: LoraAdapter | None = None

    @property
    def in_features(self):
        return self.weight.shape[1]

    @property
    def out_features(self):
        return self.weight.shape[0]

    def attach(self, rank: int, alpha: float, seed: int, target: str = "") -> LoraAdapter:
        if self.adapter is not None:
            raise StateError(f"{target or 'layer'} already has an adapter")
        self.adapter = init_adapter(self.out_features, self.in_features, rank, alpha, seed, target)
        self.adapter.to(self.weight.dtype)
        return self.adapter

    def merge(self) -> None:
        if self.adapter is None:
            raise StateError("no adapter to merge")
        merged = merge_adapter(self.weight.data, self.adapter)
        self.weight.data.copy_(merged)
        self.adapter = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = x @ self.weight.T
        if self.adapter is not None:
            # x (A B)^T = (x B^T) A^T, cheaper than forming the full delta
            out = out + self.adapter.scaling * ((x @ self.adapter.B.T) @ self.adapter.A.T)
        if self.bias is not None:
            out = out + self.bias
        return out


def adapters(model: nn.Module) -> list[LoraAdapter]:
    return [m for m in model.modules() if isinstance(m, LoraAdapter)]


def trainable_param_count(model: nn.Module) -> tuple[int, int]:
    """(trainable, total) scalar parameter counts; total includes frozen tensors."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total
