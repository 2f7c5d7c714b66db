"""Encoder-decoder solver: hierarchical-attention encoder over token trees and
a standard causal decoder over flat target tokens."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from . import tensor as T
from .ffpoly import LEX
from .hatlayer import HatConfig, HierarchicalAttention, TreePositionalEmbedding, attention
from .tokenizer import TokenizeError, Vocab, detokenize, to_token_tree, tokenize_system

MEMORY_MODES = ("leaves", "leaves+summaries")


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    enc_layers: int = 2
    dec_layers: int = 2
    levels: int = 2
    enc_heads: int = 1
    dec_heads: int = 4
    ffn_mult: int = 4
    dim_expansion: float = 1.0
    pooling: str = "mean"
    topdown: str = "cross"
    pos_combine: str = "concat"
    max_tree: tuple = (64, 8)  # positional table sizes, outermost axis first
    max_out_len: int = 128
    dropout: float = 0.0
    memory: str = "leaves"
    pad_id: int = 0
    bos_id: int = 1
    eos_id: int = 2

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.max_out_len, self.ffn_mult) <= 0:
            raise ValueError("sizes must be positive")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ValueError("layer counts must be >= 0")
        if len(self.max_tree) != self.levels:
            raise ValueError(f"max_tree needs {self.levels} entries, got {self.max_tree}")
        if self.memory not in MEMORY_MODES:
            raise ValueError(f"memory must be one of {MEMORY_MODES}")
        if self.d_model % self.dec_heads:
            raise ValueError("d_model must be divisible by dec_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.memory != "leaves" and self.dim_expansion != 1.0:
            raise ValueError("upper-level summaries need equal widths (dim_expansion 1)")
        self.hat_config()

    def hat_config(self) -> HatConfig:
        widths = tuple(int(round(self.d_model * self.dim_expansion ** i)) for i in range(self.levels))
        return HatConfig(levels=self.levels, d_in=self.d_model, widths=widths,
                         pooling=self.pooling, topdown=self.topdown, heads=self.enc_heads)

    def to_json(self) -> dict:
        d = asdict(self)
        d["max_tree"] = list(self.max_tree)
        return d

    @classmethod
    def from_json(cls, obj) -> "ModelConfig":
        obj = dict(obj)
        obj["max_tree"] = tuple(obj["max_tree"])
        return cls(**obj)


# ---------------------------------------------------------------------------
# blocks

class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, dropout: float):
        super().__init__()
        self.w1 = T.linear_weight(d, hidden)
        self.b1 = nn.Parameter(torch.zeros(hidden))
        self.w2 = T.linear_weight(hidden, d)
        self.b2 = nn.Parameter(torch.zeros(d))
        self.dropout = dropout

    def forward(self, x):
        h = F.gelu(T.matmul(x, self.w1) + self.b1)
        h = F.dropout(h, self.dropout, self.training)
        return T.matmul(h, self.w2) + self.b2


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.w_q = T.linear_weight(d, d)
        self.w_k = T.linear_weight(d, d)
        self.w_v = T.linear_weight(d, d)
        self.w_o = T.linear_weight(d, d)
        self.b_o = nn.Parameter(torch.zeros(d))

    def forward(self, x, mem, mask):
        out = attention(T.matmul(x, self.w_q), T.matmul(mem, self.w_k),
                        T.matmul(mem, self.w_v), mask, self.heads)
        return T.matmul(out, self.w_o) + self.b_o


class EncoderLayer(nn.Module):
    """Pre-norm block: hierarchical attention then feed-forward, each with a
    residual connection."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.hat = HierarchicalAttention(cfg.hat_config())
        self.ln2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult * d, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, x, mask):
        Z = self.hat(self.ln1(x), mask)
        x = x + F.dropout(Z[0], self.dropout, self.training)
        x = x + F.dropout(self.ffn(self.ln2(x)), self.dropout, self.training)
        return x, Z


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.ln1 = nn.LayerNorm(d)
        self.self_att = MultiHeadAttention(d, cfg.dec_heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_att = MultiHeadAttention(d, cfg.dec_heads)
        self.ln3 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_mult * d, cfg.dropout)
        self.dropout = cfg.dropout

    def forward(self, y, self_mask, mem, mem_mask):
        drop = lambda t: F.dropout(t, self.dropout, self.training)  # noqa: E731
        h = self.ln1(y)
        y = y + drop(self.self_att(h, h, self_mask))
        y = y + drop(self.cross_att(self.ln2(y), mem, mem_mask))
        return y + drop(self.ffn(self.ln3(y)))


# ---------------------------------------------------------------------------
# the model

class HATSolver(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.embed = T.embedding_table(cfg.vocab_size, d)
        self.tree_pos = TreePositionalEmbedding(cfg.max_tree, d, cfg.pos_combine)
        self.encoder = nn.ModuleList([EncoderLayer(cfg) for _ in range(cfg.enc_layers)])
        self.enc_ln = nn.LayerNorm(d)
        self.out_pos = T.embedding_table(cfg.max_out_len, d)
        self.decoder = nn.ModuleList([DecoderLayer(cfg) for _ in range(cfg.dec_layers)])
        self.dec_ln = nn.LayerNorm(d)
        self.w_out = T.linear_weight(d, cfg.vocab_size)
        self.b_out = nn.Parameter(torch.zeros(cfg.vocab_size))

    def encode(self, ids, mask):
        """Token tree ``(B, l_{L-1}, ..., l_0)`` to memory ``(B, N, d)`` and
        its validity mask ``(B, N)``."""
        ids = torch.as_tensor(ids)
        mask = torch.as_tensor(mask, dtype=torch.bool)
        if ids.dim() != self.cfg.levels + 1 or tuple(ids.shape) != tuple(mask.shape):
            raise T.ShapeError(
                f"expected ids/mask of shape (B, {self.cfg.levels} axes), got "
                f"{tuple(ids.shape)} and {tuple(mask.shape)}")
        x = T.gather_rows(self.embed, ids) + self.tree_pos(ids.shape[1:])
        Z = None
        for layer in self.encoder:
            x, Z = layer(x, mask)
        if self.encoder:
            x = self.enc_ln(x)
        B, d = x.shape[0], x.shape[-1]
        mem = x.reshape(B, -1, d)
        mem_mask = mask.reshape(B, -1)
        if self.cfg.memory == "leaves+summaries" and Z is not None:
            masks = [mask]
            for _ in range(1, self.cfg.levels):
                masks.append(masks[-1].any(dim=-1))
            extra = [Z[i].reshape(B, -1, d) for i in range(1, self.cfg.levels)]
            mem = torch.cat([mem] + extra, dim=1)
            mem_mask = torch.cat([mem_mask] + [m.reshape(B, -1) for m in masks[1:]], dim=1)
        return mem, mem_mask

    def decode(self, prefix, mem, mem_mask):
        """Next-token logits ``(B, T, V)`` for every prefix position."""
        prefix = torch.as_tensor(prefix)
        B, Tn = prefix.shape
        if Tn > self.cfg.max_out_len:
            raise T.ShapeError(f"target length {Tn} exceeds max_out_len {self.cfg.max_out_len}")
        y = T.gather_rows(self.embed, prefix) + self.out_pos[:Tn]
        causal = torch.ones(Tn, Tn, dtype=torch.bool).tril()
        keep = prefix != self.cfg.pad_id
        self_mask = causal.unsqueeze(0) & keep.unsqueeze(1)
        cross_mask = mem_mask.unsqueeze(1)
        for layer in self.decoder:
            y = layer(y, self_mask, mem, cross_mask)
        y = self.dec_ln(y)
        return T.matmul(y, self.w_out) + self.b_out

    def forward(self, ids, mask, prefix):
        mem, mem_mask = self.encode(ids, mask)
        return self.decode(prefix, mem, mem_mask)

    def loss(self, batch: "Batch"):
        logits = self(batch.ids, batch.mask, batch.target[:, :-1])
        gold = batch.target[:, 1:]
        return cross_entropy(logits, gold, gold != self.cfg.pad_id)


def cross_entropy(logits, targets, mask):
    """Mean next-token cross-entropy over positions where ``mask`` holds."""
    if tuple(logits.shape[:-1]) != tuple(targets.shape) or tuple(mask.shape) != tuple(targets.shape):
        raise T.ShapeError(
            f"loss: logits {tuple(logits.shape)}, targets {tuple(targets.shape)}, "
            f"mask {tuple(mask.shape)}")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss: every position is masked")
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * mask.to(nll.dtype)).sum() / count


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    ids: torch.Tensor  # (B, *tree)
    mask: torch.Tensor
    target: torch.Tensor  # (B, T): <bos> ... <eos> <pad>...
    sample_ids: list = field(default_factory=list)

    def __len__(self):
        return int(self.ids.shape[0])


@dataclass(frozen=True)
class EncodedSample:
    tree_ids: np.ndarray
    tree_mask: np.ndarray
    target: tuple
    sample_id: object = None


def encode_sample(sample, vocab: Vocab, levels: int, sample_id=None) -> EncodedSample:
    tree = to_token_tree(sample.F, vocab, levels)
    target = tokenize_system(sample.G_system, vocab, eos=True).ids
    return EncodedSample(tree.ids, tree.mask, target, sample_id)


def collate(items: Sequence[EncodedSample], pad_id: int = 0,
            pad_lengths: Optional[Sequence[int]] = None) -> Batch:
    """Stack encoded samples, padding every tree axis to the batch maximum
    (or to ``pad_lengths``) and targets to the longest target."""
    if not items:
        raise ValueError("cannot collate an empty batch")
    nd = items[0].tree_ids.ndim
    shape = [max(it.tree_ids.shape[a] for it in items) for a in range(nd)]
    if pad_lengths is not None:
        for a, (s, p) in enumerate(zip(shape, pad_lengths)):
            if s > p:
                raise ValueError(f"axis {a} overflow: {s} > pad length {p}")
        shape = list(pad_lengths)
    B = len(items)
    ids = np.full([B] + shape, pad_id, dtype=np.int64)
    mask = np.zeros([B] + shape, dtype=bool)
    for b, it in enumerate(items):
        sl = (b,) + tuple(slice(0, s) for s in it.tree_ids.shape)
        ids[sl] = it.tree_ids
        mask[sl] = it.tree_mask
    Tn = max(len(it.target) for it in items)
    tgt = np.full((B, Tn), pad_id, dtype=np.int64)
    for b, it in enumerate(items):
        tgt[b, :len(it.target)] = it.target
    return Batch(torch.from_numpy(ids), torch.from_numpy(mask), torch.from_numpy(tgt),
                 [it.sample_id for it in items])


def make_batch(samples, vocab: Vocab, levels: int, pad_lengths=None) -> Batch:
    return collate([encode_sample(s, vocab, levels, k) for k, s in enumerate(samples)],
                   vocab.pad_id, pad_lengths)


# ---------------------------------------------------------------------------
# decoding

@dataclass
class Generation:
    sequences: List[list]  # each starts with <bos>; ends with <eos> unless truncated
    truncated: List[bool]


@torch.no_grad()
def generate(model: HATSolver, ids, mask, max_len: Optional[int] = None,
             logits_hook: Optional[Callable] = None) -> Generation:
    """Greedy decoding of a batch.

    ``logits_hook(step, logits)`` may replace the next-token logits (used by
    tests to force a chosen output).
    """
    cfg = model.cfg
    max_len = cfg.max_out_len if max_len is None else min(max_len, cfg.max_out_len)
    was_training = model.training
    model.eval()
    try:
        mem, mem_mask = model.encode(ids, mask)
        B = mem.shape[0]
        prefix = torch.full((B, 1), cfg.bos_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        step = 0
        while prefix.shape[1] < max_len and not bool(done.all()):
            logits = model.decode(prefix, mem, mem_mask)[:, -1]
            if logits_hook is not None:
                logits = logits_hook(step, logits)
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, cfg.pad_id), nxt)
            prefix = torch.cat([prefix, nxt.unsqueeze(1)], dim=1)
            done = done | (nxt == cfg.eos_id)
            step += 1
    finally:
        model.train(was_training)
    seqs, trunc = [], []
    for row in prefix.tolist():
        if cfg.eos_id in row:
            seqs.append(row[:row.index(cfg.eos_id) + 1])
            trunc.append(False)
        else:
            seqs.append(row)
            trunc.append(True)
    return Generation(seqs, trunc)


# ---------------------------------------------------------------------------
# metrics

def canonicalize(sys) -> tuple:
    """Lex order, monic elements, sorted by leading monomial (largest first)."""
    polys = [p.reorder(LEX).monic() for p in sys if p]
    return tuple(sorted(polys, key=lambda p: LEX.key(p.lm), reverse=True))


def exact_match(pred, gold) -> bool:
    return canonicalize(pred) == canonicalize(gold)


def support_match(pred, gold) -> bool:
    a, b = canonicalize(pred), canonicalize(gold)
    return len(a) == len(b) and all(p.support() == g.support() for p, g in zip(a, b))


def _strip(ids, vocab: Vocab) -> list:
    ids = list(ids)
    if ids and ids[0] == vocab.bos_id:
        ids = ids[1:]
    while ids and ids[-1] == vocab.pad_id:
        ids.pop()
    if vocab.eos_id in ids:
        ids = ids[:ids.index(vocab.eos_id) + 1]
    return ids


def per_token_accuracy(pred_ids, gold_ids, vocab: Vocab) -> float:
    """Position-wise agreement up to the longer length; the leading <bos> is
    not scored and missing positions count as wrong."""
    p, g = _strip(pred_ids, vocab), _strip(gold_ids, vocab)
    total = max(len(p), len(g))
    if total == 0:
        return 1.0
    return sum(a == b for a, b in zip(p, g)) / total


def sample_metrics(pred_ids, gold_sys, vocab: Vocab, n: int) -> dict:
    gold_ids = tokenize_system(gold_sys, vocab, eos=True).ids
    tok = per_token_accuracy(pred_ids, gold_ids, vocab)
    try:
        pred = detokenize(pred_ids, vocab, n)
    except (TokenizeError, ValueError):
        return {"exact": 0.0, "support": 0.0, "per_token": tok}
    return {"exact": float(exact_match(pred, gold_sys)),
            "support": float(support_match(pred, gold_sys)),
            "per_token": tok}


@torch.no_grad()
def teacher_forced_accuracy(model: HATSolver, batch: Batch) -> float:
    """Fraction of target tokens predicted correctly given the gold prefix."""
    was = model.training
    model.eval()
    try:
        logits = model(batch.ids, batch.mask, batch.target[:, :-1])
    finally:
        model.train(was)
    gold = batch.target[:, 1:]
    keep = gold != model.cfg.pad_id
    hit = (logits.argmax(-1) == gold) & keep
    return float(hit.sum()) / max(int(keep.sum()), 1)
