"""Attention and MLP building blocks shared by the refiner and the backbone."""
from __future__ import annotations

import math

import torch
from torch import nn

from .diffcore import masked_softmax


def split_heads(x, heads: int):
    b, n, d = x.shape
    return x.view(b, n, heads, d // heads).transpose(1, 2)


def merge_heads(x):
    b, h, n, dh = x.shape
    return x.transpose(1, 2).reshape(b, n, h * dh)


def attend(q, k, v, allowed=None):
    """Scaled dot-product attention on ``[B, H, N, dh]`` with an allowed-mask."""
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    return masked_softmax(scores, allowed) @ v


class SelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, allowed=None):
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        h = self.heads
        out = attend(split_heads(q, h), split_heads(k, h), split_heads(v, h), allowed)
        return self.proj(merge_heads(out))


class Mlp(nn.Module):
    def __init__(self, dim: int, ratio: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(dim, ratio * dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(ratio * dim, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))
