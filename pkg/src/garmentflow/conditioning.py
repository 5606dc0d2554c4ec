"""Prompt encoders and embedding refiners producing the condition sequence C.

C is always text tokens followed by garment-patch tokens. The boolean
``is_image`` tag vector travels with it so the masks can be rebuilt anywhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffcore import ShapeError, patchify
from .layers import Mlp, SelfAttention
from .worldgen import PROMPT_LEN, VOCAB_SIZE

VARIANTS = ("none", "mlp", "joint", "parallel", "fusion")


@dataclass(frozen=True)
class RefinerConfig:
    variant: str = "fusion"
    depth: int = 2
    dim: int = 64
    heads: int = 4
    # image queries blocked from text keys (masked self attention)
    masked: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown refiner variant {self.variant!r}; expected one of {VARIANTS}")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.variant != "none" and self.depth < 1:
            raise ValueError("refiner depth must be >= 1")


def modality_tags(n_text: int, n_image: int):
    """``is_image`` per token in canonical text-then-image order."""
    return torch.cat([torch.zeros(n_text, dtype=torch.bool), torch.ones(n_image, dtype=torch.bool)])


def text_blind_mask(is_image):
    """Allowed-mask blocking image queries from text keys; text queries see all."""
    return ~(is_image[:, None] & ~is_image[None, :])


class TextEncoder(nn.Module):
    def __init__(self, dim: int, vocab: int = VOCAB_SIZE, length: int = PROMPT_LEN):
        super().__init__()
        self.vocab = vocab
        self.table = nn.Parameter(torch.randn(vocab, dim) * 0.5)
        self.pos = nn.Parameter(torch.randn(length, dim) * 0.02)

    def forward(self, ids):
        """``ids``: ``[B, L]`` long -> ``[B, L, d]``."""
        if ids.dtype not in (torch.int64, torch.int32):
            raise TypeError("token ids must be integers")
        if bool(((ids < 0) | (ids >= self.vocab)).any()):
            raise ValueError(f"token id out of range [0, {self.vocab})")
        if ids.shape[-1] != self.pos.shape[0]:
            raise ShapeError("encode_text", ids.shape, self.pos.shape)
        return self.table[ids] + self.pos


class GarmentEncoder(nn.Module):
    """Patchify the product image and project each patch to ``dim``."""

    def __init__(self, dim: int, size: int = 16, patch: int = 4):
        super().__init__()
        self.size = size
        self.patch = patch
        n = (size // patch) ** 2
        self.proj = nn.Linear(3 * patch * patch, dim)
        self.pos = nn.Parameter(torch.randn(n, dim) * 0.02)

    def forward(self, img):
        """``img``: ``[B, size, size, 3]`` -> ``[B, (size/patch)^2, d]``."""
        if img.dim() != 4 or tuple(img.shape[1:]) != (self.size, self.size, 3):
            raise ShapeError("encode_garment", img.shape, detail=f"expected [B, {self.size}, {self.size}, 3]")
        return self.proj(patchify(img, self.patch)) + self.pos


class RefinerBlock(nn.Module):
    """Pre-norm transformer block; the allowed-mask is passed per call."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x, allowed=None):
        x = x + self.attn(self.norm1(x), allowed)
        return x + self.mlp(self.norm2(x))


class MlpBlock(nn.Module):
    """Token-local LayerNorm -> MLP with residual; no mixing across tokens."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.mlp = Mlp(dim)

    def forward(self, x):
        return x + self.mlp(self.norm(x))


class Refiner(nn.Module):
    def __init__(self, cfg: RefinerConfig):
        super().__init__()
        self.cfg = cfg
        d, h, n = cfg.dim, cfg.heads, cfg.depth
        v = cfg.variant
        if v == "mlp":
            self.blocks = nn.ModuleList(MlpBlock(d) for _ in range(n))
        elif v == "joint":
            self.blocks = nn.ModuleList(RefinerBlock(d, h) for _ in range(n))
        elif v in ("parallel", "fusion"):
            self.text = nn.ModuleList(RefinerBlock(d, h) for _ in range(n))
            self.image = nn.ModuleList(RefinerBlock(d, h) for _ in range(n))
            if v == "fusion":
                self.shared = nn.ModuleList(RefinerBlock(d, h) for _ in range(n))
        if v != "none":
            self.out_norm = nn.LayerNorm(d)

    def forward(self, text, image):
        """``[B, Lt, d]``, ``[B, Li, d]`` -> C ``[B, Lt + Li, d]``."""
        v = self.cfg.variant
        if v == "none":
            return torch.cat([text, image], dim=1)
        lt = text.shape[1]
        allowed = None
        if self.cfg.masked:
            allowed = text_blind_mask(modality_tags(lt, image.shape[1]))
        if v == "mlp":
            x = torch.cat([text, image], dim=1)
            for blk in self.blocks:
                x = blk(x)
        elif v == "joint":
            x = torch.cat([text, image], dim=1)
            for blk in self.blocks:
                x = blk(x, allowed)
        else:
            for blk in self.text:
                text = blk(text)
            for blk in self.image:
                image = blk(image)
            x = torch.cat([text, image], dim=1)
            if v == "fusion":
                for blk in self.shared:
                    x = blk(x, allowed)
        return self.out_norm(x)


def refine(text, image, refiner: Refiner):
    """Functional spelling of ``refiner(text, image)``; returns (C, is_image)."""
    return refiner(text, image), modality_tags(text.shape[1], image.shape[1])


class ConditionEncoder(nn.Module):
    """Text encoder + garment encoder + refiner."""

    def __init__(self, cfg: RefinerConfig, garment_size: int = 16, garment_patch: int = 4):
        super().__init__()
        self.text_encoder = TextEncoder(cfg.dim)
        self.garment_encoder = GarmentEncoder(cfg.dim, garment_size, garment_patch)
        self.refiner = Refiner(cfg)

    def forward(self, prompt_ids, garment):
        return self.refiner(self.text_encoder(prompt_ids), self.garment_encoder(garment))


def masked_self_attention(x, is_image, attn: SelfAttention, masked: bool = True):
    """Self-attention where image-tagged queries cannot see text-tagged keys."""
    return attn(x, text_blind_mask(is_image) if masked else None)

