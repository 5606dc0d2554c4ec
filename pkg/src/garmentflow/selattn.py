"""Selective attention: noise-token queries over condition keys/values with a
sparsifying softmax, plus the joint-attention mask for ``[C || Z]``.

Selection is treated as a constant support: gradients flow through the
surviving entries and are exactly zero for dropped ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .diffcore import NonFiniteError, ShapeError, masked_softmax

KINDS = ("full", "top-k", "top-p", "top-p-tau", "top-pk")

# best values from the grid search being reproduced
DEFAULT_K = 8
DEFAULT_P = 0.2
DEFAULT_TAU = 1.0
DEFAULT_TAU_TOP_P_TAU = 0.8


@dataclass(frozen=True)
class SelectionStrategy:
    kind: str = "full"
    k: int = DEFAULT_K
    p: float = DEFAULT_P
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown selection strategy {self.kind!r}; expected one of {KINDS}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0 < self.p <= 1:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    @classmethod
    def make(cls, kind: str, k=None, p=None, tau=None) -> "SelectionStrategy":
        """Fill unspecified hyperparameters with the per-kind defaults."""
        if tau is None:
            tau = DEFAULT_TAU_TOP_P_TAU if kind == "top-p-tau" else DEFAULT_TAU
        return cls(kind, DEFAULT_K if k is None else int(k), DEFAULT_P if p is None else float(p), float(tau))

    def label(self) -> str:
        if self.kind == "full":
            return "full"
        if self.kind == "top-k":
            return f"top-k{self.k}"
        if self.kind == "top-pk":
            return f"top-pk(p={self.p:g},k={self.k})"
        return f"{self.kind}(p={self.p:g},tau={self.tau:g})"


def _rank(scores):
    """Position of each entry in a descending sort; ties go to the lower index."""
    order = torch.sort(scores, dim=-1, descending=True, stable=True).indices
    ranks = torch.empty_like(order)
    pos = torch.arange(scores.shape[-1], device=scores.device).expand_as(order)
    return order, ranks.scatter_(-1, order, pos)


def selection_mask(scores, strategy: SelectionStrategy):
    """Boolean keep-mask over the last dim of ``scores`` (already divided by tau)."""
    n = scores.shape[-1]
    if n == 0:
        raise ShapeError("sel_softmax", scores.shape, detail="no entries to select from")
    if not bool(torch.isfinite(scores).all()):
        raise NonFiniteError("sel_softmax scores")
    kind = strategy.kind
    if kind == "full" or (kind == "top-k" and strategy.k >= n):
        return None
    if kind in ("top-p", "top-p-tau") and strategy.p >= 1:
        return None
    with torch.no_grad():
        order, rank = _rank(scores)
        if kind == "top-k":
            return rank < strategy.k
        probs = torch.softmax(scores, dim=-1)
        sorted_p = probs.gather(-1, order)
        mass_before = torch.cumsum(sorted_p, dim=-1) - sorted_p
        keep_sorted = mass_before < strategy.p
        keep_sorted[..., 0] = True
        if kind in ("top-p", "top-p-tau"):
            return keep_sorted.gather(-1, rank)
        # top-pk: the smaller of the two supports, highest probability first
        n_keep = keep_sorted.sum(-1, keepdim=True).clamp(max=strategy.k)
        return rank < n_keep


def sel_softmax(scores, strategy: SelectionStrategy):
    scaled = scores / strategy.tau if strategy.tau != 1.0 else scores
    return masked_softmax(scaled, selection_mask(scaled, strategy))


def selective_attention(q, k, v, strategy: SelectionStrategy):
    """``sel_softmax(q k^T / (sqrt(d) tau)) v`` over the last two dims.

    Returns the output and the attention weights.
    """
    if k.shape[-2] == 0:
        raise ShapeError("selective_attention", q.shape, k.shape, detail="empty keys")
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("selective_attention", q.shape, k.shape, v.shape)
    scores = (q @ k.transpose(-1, -2)) / math.sqrt(q.shape[-1])
    w = sel_softmax(scores, strategy)
    return w @ v, w


class SelectiveAttention(nn.Module):
    """Multi-head cross-attention, queries from noise tokens, keys/values from C."""

    def __init__(self, dim: int, heads: int, strategy: SelectionStrategy):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.strategy = strategy
        self.q = nn.Linear(dim, dim)
        self.kv = nn.Linear(dim, 2 * dim)
        self.proj = nn.Linear(dim, dim)
        self.last_weights = None
        self.keep_weights = False

    def forward(self, z, c):
        b, nz, d = z.shape
        nc = c.shape[1]
        if nc == 0:
            raise ShapeError("selective_attention", z.shape, c.shape, detail="empty condition")
        h = self.heads
        q = self.q(z).view(b, nz, h, d // h).transpose(1, 2)
        k, v = self.kv(c).view(b, nc, 2, h, d // h).permute(2, 0, 3, 1, 4)
        out, w = selective_attention(q, k, v, self.strategy)
        if self.keep_weights:
            self.last_weights = w.detach()
        return self.proj(out.transpose(1, 2).reshape(b, nz, d))


def build_joint_mask(n_cond: int, n_noise: int, block_cond_queries: bool = True, noise_sees_cond: bool = True):
    """Allowed-mask over ``[C || Z]`` in (query, key) indexing.

    Condition queries never see noise keys when ``block_cond_queries``; setting
    ``noise_sees_cond=False`` also cuts the noise->condition path so condition
    reaches the noise stream only through selective attention.
    """
    n = n_cond + n_noise
    allowed = torch.ones(n, n, dtype=torch.bool)
    if block_cond_queries:
        allowed[:n_cond, n_cond:] = False
    if not noise_sees_cond:
        allowed[n_cond:, :n_cond] = False
    return allowed
