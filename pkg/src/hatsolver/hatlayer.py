"""Hierarchical attention over token trees of arbitrary depth.

Inputs have shape ``(B, l_{L-1}, ..., l_0, d)`` with a boolean mask of shape
``(B, l_{L-1}, ..., l_0)``.  Level ``i`` attends along axis ``l_i``.  The
bottom-up pass pools each level into the next; the top-down pass lets every
level read the refined summaries of its parent level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from . import tensor as T

POOLINGS = ("mean", "first")
TOPDOWN = ("cross", "additive")
POS_COMBINE = ("concat", "sum")


@dataclass(frozen=True)
class HatConfig:
    levels: int = 2
    d_in: int = 128
    widths: Optional[tuple] = None  # (d_0, ..., d_{L-1}); defaults to d_in everywhere
    pooling: str = "mean"
    topdown: str = "cross"
    heads: int = 1

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.widths is not None and len(self.widths) != self.levels:
            raise ValueError(f"widths needs {self.levels} entries, got {len(self.widths)}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}")
        if self.topdown not in TOPDOWN:
            raise ValueError(f"topdown must be one of {TOPDOWN}")
        for d in self.dims:
            if d % self.heads:
                raise ValueError(f"width {d} not divisible by {self.heads} heads")

    @property
    def dims(self) -> tuple:
        return tuple(self.widths) if self.widths is not None else (self.d_in,) * self.levels


# ---------------------------------------------------------------------------
# building blocks

def attention(Q, K, V, key_mask=None, heads: int = 1):
    """Scaled dot-product attention.

    ``Q: (..., s, d)``, ``K, V: (..., l, d)``; ``key_mask`` is a bool tensor
    broadcastable to ``(..., s, l)`` (pass ``m[..., None, :]`` for a per-key
    mask).  Rows whose keys are all masked attend uniformly to every key;
    such rows only arise for padded queries and are masked downstream.
    """
    d = Q.shape[-1]
    if K.shape[-1] != d or V.shape[-2] != K.shape[-2]:
        raise T.ShapeError(f"attention: Q {tuple(Q.shape)}, K {tuple(K.shape)}, V {tuple(V.shape)}")
    if heads > 1:
        Q, K, V = (_split_heads(x, heads) for x in (Q, K, V))
        if key_mask is not None:
            key_mask = key_mask.unsqueeze(-3)
    scores = T.matmul(Q, T.transpose_last2(K)) / math.sqrt(Q.shape[-1])
    if key_mask is not None:
        key_mask = key_mask.expand(scores.shape)
        empty = ~key_mask.any(dim=-1, keepdim=True)
        key_mask = key_mask | empty
    out = T.matmul(T.softmax_lastaxis(scores, key_mask), V)
    if heads > 1:
        out = _merge_heads(out)
    return out


def _split_heads(x, h):
    *lead, s, d = x.shape
    return x.reshape(*lead, s, h, d // h).transpose(-2, -3)


def _merge_heads(x):
    *lead, h, s, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, s, h * dh)


def pool(Y, mask, mode: str = "mean"):
    """Summarize the second-to-last axis of ``Y`` using only valid rows.

    Groups with no valid row pool to zeros.
    """
    if mode == "first":
        return Y[..., 0, :] * mask[..., :1].to(Y.dtype)
    if mode != "mean":
        raise ValueError(f"unknown pooling {mode!r}")
    m = mask.to(Y.dtype).unsqueeze(-1)
    count = m.sum(dim=-2).clamp(min=1.0)
    return (Y * m).sum(dim=-2) / count


def level_masks(mask, levels: int) -> list:
    """``masks[i]`` has shape ``(B, l_{L-1}, ..., l_i)``; a group is valid
    iff it holds at least one valid leaf."""
    masks = [mask]
    for _ in range(1, levels):
        masks.append(masks[-1].any(dim=-1))
    return masks


# ---------------------------------------------------------------------------
# the layer

class HierarchicalAttention(nn.Module):
    def __init__(self, cfg: HatConfig):
        super().__init__()
        self.cfg = cfg
        dims = cfg.dims
        L = cfg.levels
        ins = (cfg.d_in,) + dims[:-1]
        self.W_q = nn.ParameterList([T.linear_weight(ins[i], dims[i]) for i in range(L)])
        self.W_k = nn.ParameterList([T.linear_weight(ins[i], dims[i]) for i in range(L)])
        self.W_v = nn.ParameterList([T.linear_weight(ins[i], dims[i]) for i in range(L)])
        if cfg.topdown == "cross":
            self.U_k = nn.ParameterList([T.linear_weight(dims[i + 1], dims[i]) for i in range(L - 1)])
            self.U_v = nn.ParameterList([T.linear_weight(dims[i + 1], dims[i]) for i in range(L - 1)])
        else:
            self.P = nn.ParameterList([T.linear_weight(dims[i + 1], dims[i]) for i in range(L - 1)])

    def _check(self, X, mask):
        L = self.cfg.levels
        if X.dim() != L + 2 or X.shape[-1] != self.cfg.d_in:
            raise T.ShapeError(
                f"expected input (B, {L} tree axes, {self.cfg.d_in}), got {tuple(X.shape)}")
        if mask is None:
            mask = torch.ones(X.shape[:-1], dtype=torch.bool, device=X.device)
        if tuple(mask.shape) != tuple(X.shape[:-1]):
            raise T.ShapeError(f"mask {tuple(mask.shape)} does not match input {tuple(X.shape)}")
        return mask

    def bottom_up(self, X, mask=None):
        """Returns ``(Y, masks)``; ``Y[i]`` has shape ``(B, l_{L-1}..l_i, d_i)``."""
        mask = self._check(X, mask)
        masks = level_masks(mask, self.cfg.levels)
        Ys = []
        x = X
        for i in range(self.cfg.levels):
            Q = T.matmul(x, self.W_q[i])
            K = T.matmul(x, self.W_k[i])
            V = T.matmul(x, self.W_v[i])
            y = attention(Q, K, V, masks[i].unsqueeze(-2), self.cfg.heads)
            Ys.append(y)
            if i + 1 < self.cfg.levels:
                x = pool(y, masks[i], self.cfg.pooling)
        return Ys, masks

    def top_down(self, Ys, masks):
        """Returns ``Z`` with ``Z[i]`` shaped like ``Y[i]``."""
        L = self.cfg.levels
        Z = [None] * L
        Z[L - 1] = Ys[L - 1]
        for i in range(L - 2, -1, -1):
            y, parent = Ys[i], Z[i + 1]
            if self.cfg.topdown == "additive":
                Z[i] = y + T.matmul(parent, self.P[i]).unsqueeze(-2)
                continue
            K = T.matmul(parent, self.U_k[i])
            V = T.matmul(parent, self.U_v[i])
            lead = y.shape[:-3]
            l_up, l_i, d = y.shape[-3:]
            q = T.reshape(y, (*lead, l_up * l_i, d))
            att = attention(q, K, V, masks[i + 1].unsqueeze(-2), self.cfg.heads)
            Z[i] = y + T.reshape(att, y.shape)
        return Z

    def forward(self, X, mask=None):
        Ys, masks = self.bottom_up(X, mask)
        return self.top_down(Ys, masks)


# ---------------------------------------------------------------------------
# positional embeddings

class TreePositionalEmbedding(nn.Module):
    """One learned table per tree axis, combined by sum or by concatenation
    followed by a projection back to ``d``."""

    def __init__(self, max_lengths: Sequence[int], d: int, combine: str = "concat"):
        super().__init__()
        if combine not in POS_COMBINE:
            raise ValueError(f"combine must be one of {POS_COMBINE}")
        self.max_lengths = tuple(int(x) for x in max_lengths)
        self.combine = combine
        self.d = d
        self.tables = nn.ParameterList([T.embedding_table(m, d) for m in self.max_lengths])
        if combine == "concat":
            self.proj = T.linear_weight(d * len(self.max_lengths), d)

    def forward(self, shape: Sequence[int]):
        """Embedding of shape ``(*shape, d)`` for a tree of the given shape."""
        shape = tuple(shape)
        if len(shape) != len(self.max_lengths):
            raise T.ShapeError(f"tree has {len(shape)} axes, embedding has {len(self.max_lengths)}")
        parts = []
        for j, (n, m) in enumerate(zip(shape, self.max_lengths)):
            if n > m:
                raise T.ShapeError(f"axis {j} length {n} exceeds positional table size {m}")
            view = [1] * len(shape) + [self.d]
            view[j] = n
            parts.append(self.tables[j][:n].reshape(view).expand(*shape, self.d))
        if self.combine == "sum":
            return sum(parts)
        return T.matmul(T.concat(parts, -1), self.proj)


# ---------------------------------------------------------------------------
# cost model

@dataclass(frozen=True)
class CostReport:
    lengths: tuple  # (l_{L-1}, ..., l_0)
    widths: tuple  # (d_0, ..., d_{L-1})
    d_in: int
    up: tuple  # C_up^i for i = 0..L-1
    down: tuple  # C_down^i for i = 0..L-2
    flat: int = field(default=0)

    @property
    def total(self) -> int:
        return sum(self.up) + sum(self.down)

    @property
    def ratio(self) -> float:
        return self.total / self.flat


def cost_model(lengths: Sequence[int], widths: Optional[Sequence[int]] = None,
               d_in: Optional[int] = None) -> CostReport:
    """Closed-form multiply-add count of one hierarchical attention layer.

    ``lengths`` lists the tree axes outermost first, as in tensor shapes.
    ``widths`` lists ``d_0 .. d_{L-1}`` (leaf level first).  Projections,
    score products and value products are counted; pooling is not.
    """
    lengths = tuple(int(x) for x in lengths)
    L = len(lengths)
    if L < 1:
        raise ValueError("need at least one level")
    if min(lengths) < 1:
        raise ValueError(f"tree lengths must be positive, got {lengths}")
    ell = lengths[::-1]  # ell[i] = l_i
    if widths is None:
        if d_in is None:
            raise ValueError("give widths or d_in")
        widths = (d_in,) * L
    widths = tuple(int(x) for x in widths)
    if len(widths) != L:
        raise ValueError(f"widths needs {L} entries")
    d_in = widths[0] if d_in is None else int(d_in)

    def cum(i):  # L_i = prod_{k >= i} l_k, with L_L = 1
        return math.prod(ell[i:])

    ins = (d_in,) + widths[:-1]
    up = tuple(3 * cum(i) * ins[i] * widths[i] + 2 * cum(i) * ell[i] * widths[i]
               for i in range(L))
    down = tuple(2 * cum(i + 1) * widths[i + 1] * widths[i] + 2 * cum(i) * ell[i + 1] * widths[i]
                 for i in range(L - 1))
    total_len = cum(0)
    flat = 3 * total_len * d_in * d_in + 2 * total_len * total_len * d_in
    return CostReport(lengths, widths, d_in, up, down, flat)


def flop_counter(lengths: Sequence[int], widths: Optional[Sequence[int]] = None,
                 d_in: Optional[int] = None, topdown: str = "cross", seed: int = 0) -> int:
    """Measured multiply-adds of one forward pass on a full tree."""
    lengths = tuple(int(x) for x in lengths)
    L = len(lengths)
    if not lengths or min(lengths) < 1:
        raise ValueError(f"tree lengths must be positive, got {lengths}")
    if widths is None:
        widths = (d_in,) * L
    d_in = widths[0] if d_in is None else d_in
    gen = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        layer = HierarchicalAttention(HatConfig(levels=L, d_in=d_in, widths=tuple(widths),
                                                topdown=topdown))
    X = torch.randn((1, *lengths, d_in), generator=gen)
    with torch.no_grad(), T.count_flops() as c:
        layer(X)
    return c.total
