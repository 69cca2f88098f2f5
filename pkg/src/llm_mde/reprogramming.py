"""Cross-modal reprogramming: vision patches attend over text prototypes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError, NumericError, ShapeError


class PrototypeMap(nn.Module):
    """Learned ``V' x V`` mixing matrix; prototypes are ``P @ E``."""

    def __init__(self, n_prototypes: int, vocab_size: int):
        super().__init__()
        if n_prototypes < 1 or n_prototypes > vocab_size / 4:
            raise ConfigError(f"prototype count {n_prototypes} must be in 1..V/4 (V={vocab_size})")
        self.P = nn.Parameter(torch.zeros(n_prototypes, vocab_size))


def derive_prototypes(E: torch.Tensor, P: torch.Tensor) -> torch.Tensor:
    if P.shape[-1] != E.shape[0]:
        raise ShapeError(f"P has {P.shape[-1]} columns, E has {E.shape[0]} rows")
    return P @ E.detach()


class _HeadProjections(nn.Module):
    def __init__(self, d_m: int, D: int, d: int):
        super().__init__()
        self.q = nn.Parameter(torch.zeros(d_m, d))
        self.k = nn.Parameter(torch.zeros(D, d))
        self.v = nn.Parameter(torch.zeros(D, d))


class ReprogrammingWeights(nn.Module):
    """Per-head query/key/value projections plus a ``d_m x d_m`` output projection.

    Heads are registered as ``head0 .. head{K-1}`` so tensor names read
    ``reprog.head{k}.{q,k,v}`` and ``reprog.out``.
    """

    def __init__(self, d_m: int, D: int, heads: int):
        super().__init__()
        if d_m % heads:
            raise ConfigError(f"d_m={d_m} not divisible by {heads} heads")
        self.d_m, self.D, self.heads = d_m, D, heads
        self.d = d_m // heads
        for k in range(heads):
            self.add_module(f"head{k}", _HeadProjections(d_m, D, self.d))
        self.out = nn.Parameter(torch.eye(d_m))

    def head(self, k: int) -> _HeadProjections:
        return getattr(self, f"head{k}")

    def stacked(self):
        hs = [self.head(k) for k in range(self.heads)]
        return (torch.stack([h.q for h in hs]), torch.stack([h.k for h in hs]),
                torch.stack([h.v for h in hs]))


def reprogram(Xp: torch.Tensor, Eprime: torch.Tensor, w: ReprogrammingWeights,
              return_attention: bool = False, project: bool = True):
    """Multi-head cross-attention from patches ``(…, N, d_m)`` to prototypes ``(V', D)``.

    Returns ``(…, N, d_m)``; with ``return_attention`` also the ``(…, K, N, V')``
    attention weights. ``project=False`` skips the output projection.
    """
    if Xp.shape[-1] != w.d_m:
        raise ShapeError(f"patch width {Xp.shape[-1]} != d_m {w.d_m}")
    if Eprime.ndim != 2 or Eprime.shape[-1] != w.D:
        raise ShapeError(f"prototype matrix {tuple(Eprime.shape)} must be (V', {w.D})")
    Wq, Wk, Wv = w.stacked()                          # (K, d_m, d), (K, D, d), (K, D, d)
    q = torch.einsum("...nm,kmd->...knd", Xp, Wq)
    keys = torch.einsum("vD,kDd->kvd", Eprime, Wk)
    vals = torch.einsum("vD,kDd->kvd", Eprime, Wv)
    logits = torch.einsum("...knd,kvd->...knv", q, keys) / math.sqrt(w.d)
    if not torch.isfinite(logits).all():
        raise NumericError("non-finite attention logits")
    attn = torch.softmax(logits, dim=-1)
    heads = torch.einsum("...knv,kvd->...knd", attn, vals)
    F = heads.transpose(-3, -2).reshape(*Xp.shape[:-1], w.d_m)   # concat heads along width
    if project:
        F = F @ w.out
    return (F, attn) if return_attention else F


class Fusion(nn.Module):
    """Projects reprogrammed patches to the text width and appends them after prompt tokens."""

    def __init__(self, d_m: int, D: int):
        super().__init__()
        self.proj = nn.Linear(d_m, D)


@dataclass
class FusedSequence:
    tokens: torch.Tensor        # (…, T_prompt + N, D)
    prompt_len: int
    vision_len: int


def fuse(F: torch.Tensor, prompt_embeddings: torch.Tensor, fusion: Fusion) -> FusedSequence:
    if not torch.isfinite(F).all():
        raise NumericError("non-finite reprogrammed features")
    vision = fusion.proj(F)
    if prompt_embeddings.shape[-1] != vision.shape[-1]:
        raise ShapeError(f"prompt width {prompt_embeddings.shape[-1]} != {vision.shape[-1]}")
    if prompt_embeddings.ndim < vision.ndim:
        prompt_embeddings = prompt_embeddings.expand(*vision.shape[:-2], *prompt_embeddings.shape[-2:])
    tokens = torch.cat([prompt_embeddings.to(vision.dtype), vision], dim=-2)
    return FusedSequence(tokens, prompt_embeddings.shape[-2], vision.shape[-2])
