"""Token encoding of polynomial systems.

Each term becomes ``n + 2`` tokens: a structural token (``<bos>`` for the very
first term, ``<sep>`` for the first term of every later polynomial, ``+``
otherwise), the coefficient token ``C<a>`` and one exponent token ``E<u>`` per
variable, zero exponents included.  Decoder targets additionally end in
``<eos>``.  ``<pad>`` always has id 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .ffpoly import LEX, Polynomial, PolySystem

PAD, BOS, EOS, PLUS, SEP = "<pad>", "<bos>", "<eos>", "+", "<sep>"
SPECIALS = (PAD, BOS, EOS, PLUS, SEP)


class TokenizeError(ValueError):
    """Malformed token sequence; ``position`` is the offending index."""

    def __init__(self, message: str, position: Optional[int] = None):
        if position is not None:
            message = f"{message} (at token {position})"
        super().__init__(message)
        self.position = position


class Vocab:
    def __init__(self, q: int, max_degree: int):
        if q < 2 or max_degree < 0:
            raise ValueError("need q >= 2 and max_degree >= 0")
        self.q = q
        self.max_degree = max_degree
        self.tokens = list(SPECIALS)
        self.tokens += [f"C{a}" for a in range(1, q)]
        self.tokens += [f"E{u}" for u in range(max_degree + 1)]
        self.ids = {t: i for i, t in enumerate(self.tokens)}
        self.pad_id = self.ids[PAD]
        self.bos_id = self.ids[BOS]
        self.eos_id = self.ids[EOS]
        self.plus_id = self.ids[PLUS]
        self.sep_id = self.ids[SEP]
        self._coef0 = self.ids["C1"] if q > 1 else None
        self._exp0 = self.ids["E0"]

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def coef_id(self, a: int) -> int:
        return self._coef0 + a - 1

    def exp_id(self, u: int) -> int:
        return self._exp0 + u

    def is_coef(self, i: int) -> bool:
        return self._coef0 <= i < self._exp0

    def is_exp(self, i: int) -> bool:
        return self._exp0 <= i < len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list:
        try:
            return [self.ids[t] for t in tokens]
        except KeyError as exc:
            raise TokenizeError(f"unknown token {exc.args[0]!r}") from None

    def decode(self, ids: Sequence[int]) -> list:
        return [self.tokens[i] for i in ids]

    def to_json(self) -> dict:
        return {"q": self.q, "max_degree": self.max_degree, "tokens": self.tokens}

    @classmethod
    def from_json(cls, obj) -> "Vocab":
        v = cls(int(obj["q"]), int(obj["max_degree"]))
        if "tokens" in obj and list(obj["tokens"]) != v.tokens:
            raise ValueError("serialized vocabulary does not match (q, max_degree)")
        return v


@dataclass(frozen=True)
class FlatSequence:
    ids: tuple

    def __len__(self):
        return len(self.ids)

    def tokens(self, vocab: Vocab) -> list:
        return vocab.decode(self.ids)


def _term_tokens(vocab: Vocab, lead_id: int, mono, c: int, d: int) -> list:
    if c == 0:
        raise TokenizeError("zero coefficient cannot be tokenized")
    out = [lead_id, vocab.coef_id(c)]
    for e in mono:
        if e > d:
            raise TokenizeError(f"exponent {e} exceeds vocabulary max degree {d}")
        out.append(vocab.exp_id(e))
    return out


def term_blocks(sys, vocab: Vocab) -> list:
    """Token blocks grouped per polynomial: ``[[block, ...], ...]``."""
    polys = list(sys)
    if not polys:
        raise TokenizeError("cannot tokenize an empty system")
    d = vocab.max_degree
    out = []
    for k, f in enumerate(polys):
        if f.is_zero():
            raise TokenizeError(f"polynomial {k} is zero")
        blocks = []
        for t, (m, c) in enumerate(f.terms):
            if t == 0:
                lead = vocab.bos_id if k == 0 else vocab.sep_id
            else:
                lead = vocab.plus_id
            blocks.append(_term_tokens(vocab, lead, m, c, d))
        out.append(blocks)
    return out


def tokenize_system(sys, vocab: Vocab, *, eos: bool = False) -> FlatSequence:
    ids = [i for blocks in term_blocks(sys, vocab) for b in blocks for i in b]
    if eos:
        ids.append(vocab.eos_id)
    return FlatSequence(tuple(ids))


def detokenize(seq, vocab: Vocab, n: int, order=LEX) -> PolySystem:
    """Inverse of :func:`tokenize_system`.  Stops at the first ``<eos>``;
    trailing ``<pad>`` is ignored."""
    ids = list(seq.ids if isinstance(seq, FlatSequence) else seq)
    if ids and ids[-1] == vocab.pad_id:
        while ids and ids[-1] == vocab.pad_id:
            ids.pop()
    if vocab.eos_id in ids:
        ids = ids[:ids.index(vocab.eos_id)]
    if not ids:
        raise TokenizeError("empty sequence", 0)
    if ids[0] != vocab.bos_id:
        raise TokenizeError(f"sequence must start with <bos>, got {_name(vocab, ids[0])}", 0)
    if len(ids) == 1:
        raise TokenizeError("no terms after <bos>", 1)
    width = n + 2
    q = vocab.q
    polys, current = [], []
    pos = 0
    while pos < len(ids):
        lead = ids[pos]
        if pos > 0:
            if lead == vocab.sep_id:
                polys.append(current)
                current = []
            elif lead != vocab.plus_id:
                raise TokenizeError(
                    f"expected '+' or <sep>, got {_name(vocab, lead)}", pos)
        block = ids[pos + 1: pos + width]
        if len(block) < width - 1:
            raise TokenizeError(
                f"truncated term: expected {width - 1} tokens after the separator, "
                f"got {len(block)}", pos)
        if not vocab.is_coef(block[0]):
            raise TokenizeError(
                f"expected coefficient token, got {_name(vocab, block[0])}", pos + 1)
        c = block[0] - vocab.coef_id(1) + 1
        mono = []
        for j, tok in enumerate(block[1:]):
            if not vocab.is_exp(tok):
                raise TokenizeError(
                    f"expected exponent token, got {_name(vocab, tok)}", pos + 2 + j)
            mono.append(tok - vocab.exp_id(0))
        current.append((tuple(mono), c))
        pos += width
    polys.append(current)
    out = []
    for k, terms in enumerate(polys):
        mons = [m for m, _ in terms]
        if len(set(mons)) != len(mons):
            raise TokenizeError(f"polynomial {k} repeats a monomial")
        out.append(Polynomial(n, q, terms, order))
    return PolySystem(tuple(out))


def _name(vocab, i):
    return vocab.tokens[i] if 0 <= i < len(vocab.tokens) else f"<id {i}>"


# ---------------------------------------------------------------------------
# hierarchical grouping

@dataclass(frozen=True)
class TokenTree:
    """Padded token ids and validity mask of shape ``(l_{L-1}, ..., l_0)``."""

    ids: np.ndarray
    mask: np.ndarray
    axes: tuple  # names of the axes, outermost first

    @property
    def shape(self):
        return self.ids.shape

    @property
    def levels(self):
        return self.ids.ndim

    def flatten(self) -> FlatSequence:
        """Masked flattening; reproduces the flat token order."""
        return FlatSequence(tuple(int(i) for i in self.ids[self.mask]))


def observed_lengths(sys, levels: int) -> tuple:
    polys = list(sys)
    width = polys[0].n + 2
    if levels == 3:
        return (len(polys), max(len(f) for f in polys), width)
    if levels == 2:
        return (sum(len(f) for f in polys), width)
    raise ValueError(f"levels must be 2 or 3, got {levels}")


def to_token_tree(sys, vocab: Vocab, levels: int = 3,
                  pad_lengths: Optional[Sequence[int]] = None) -> TokenTree:
    """Group a system into a padded tree.

    ``levels=3`` gives axes (equations, terms, tokens); ``levels=2`` gives
    (terms across the whole system, tokens).  Each term's separator token sits
    in leaf slot 0.
    """
    blocks = term_blocks(sys, vocab)
    obs = observed_lengths(sys, levels)
    shape = tuple(obs if pad_lengths is None else pad_lengths)
    if len(shape) != levels:
        raise ValueError(f"pad_lengths {shape} does not have {levels} entries")
    names = ("equations", "terms", "tokens") if levels == 3 else ("terms", "tokens")
    for name, o, p in zip(names, obs, shape):
        if o > p:
            raise ValueError(f"{name} axis overflow: {o} > pad length {p}")
    if shape[-1] != obs[-1]:
        raise ValueError(f"leaf axis must be exactly n+2={obs[-1]}, got {shape[-1]}")
    ids = np.full(shape, vocab.pad_id, dtype=np.int64)
    mask = np.zeros(shape, dtype=bool)
    if levels == 3:
        for e, poly_blocks in enumerate(blocks):
            for t, b in enumerate(poly_blocks):
                ids[e, t] = b
                mask[e, t] = True
    else:
        t = 0
        for poly_blocks in blocks:
            for b in poly_blocks:
                ids[t] = b
                mask[t] = True
                t += 1
    return TokenTree(ids, mask, names)


def tree_from_flat(seq, vocab: Vocab, n: int, levels: int = 3, pad_lengths=None) -> TokenTree:
    return to_token_tree(detokenize(seq, vocab, n), vocab, levels, pad_lengths)
