"""Prime field arithmetic and sparse multivariate polynomials over F_q.

Polynomials are immutable.  Terms are stored as ``(exponents, coeff)`` pairs,
strictly descending under the polynomial's monomial order, with coefficients
kept as canonical residues in ``[0, q)``.  The order travels with the value so
a polynomial can be re-sorted with :meth:`Polynomial.reorder`.

Text form (round-trippable)::

    poly   := "0" | term (" + " term)*
    term   := coeff ("*" var)* | var ("*" var)*
    var    := "x" index ("^" exponent)?

``coeff`` is a residue in ``[1, q)``; :func:`format_poly` always writes it.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

DEFAULT_MAX_EXPONENT = 63

Monomial = tuple  # tuple[int, ...]


class FieldError(ValueError):
    pass


class RingMismatchError(ValueError):
    pass


def is_prime(q: int) -> bool:
    if q < 2:
        return False
    if q % 2 == 0:
        return q == 2
    f = 3
    while f * f <= q:
        if q % f == 0:
            return False
        f += 2
    return True


def check_modulus(q: int) -> int:
    if not isinstance(q, int) or not is_prime(q):
        raise FieldError(
            f"modulus {q!r} is not prime; only prime fields F_q are supported")
    return q


@dataclass(frozen=True)
class FieldElement:
    value: int
    q: int

    def __post_init__(self):
        check_modulus(self.q)
        object.__setattr__(self, "value", self.value % self.q)

    def __int__(self):
        return self.value

    def __repr__(self):
        return f"{self.value} (mod {self.q})"


def _same_field(a: FieldElement, b: FieldElement) -> int:
    if a.q != b.q:
        raise FieldError(f"modulus mismatch: {a.q} vs {b.q}")
    return a.q


def field_add(a: FieldElement, b: FieldElement) -> FieldElement:
    q = _same_field(a, b)
    return FieldElement((a.value + b.value) % q, q)


def field_mul(a: FieldElement, b: FieldElement) -> FieldElement:
    q = _same_field(a, b)
    return FieldElement((a.value * b.value) % q, q)


def field_neg(a: FieldElement) -> FieldElement:
    return FieldElement((-a.value) % a.q, a.q)


def inv_mod(a: int, q: int) -> int:
    a %= q
    if a == 0:
        raise ZeroDivisionError(f"0 has no inverse in F_{q}")
    return pow(a, q - 2, q)


def field_inv(a: FieldElement) -> FieldElement:
    return FieldElement(inv_mod(a.value, a.q), a.q)


# ---------------------------------------------------------------------------
# monomial orders

class MonomialOrder:
    """Total order on exponent tuples; ``key`` maps a monomial to a sortable value.

    Larger key means larger monomial.  Variables are ranked x0 > x1 > ... .
    """

    name = "abstract"

    def key(self, m: Monomial):
        raise NotImplementedError

    def compare(self, a: Monomial, b: Monomial) -> int:
        """Return -1, 0 or 1 as ``a`` is smaller, equal or larger than ``b``."""
        if len(a) != len(b):
            raise ValueError(
                f"monomials have different lengths: {len(a)} vs {len(b)}")
        ka, kb = self.key(a), self.key(b)
        return (ka > kb) - (ka < kb)

    def __eq__(self, other):
        return isinstance(other, MonomialOrder) and other.name == self.name

    def __hash__(self):
        return hash(self.name)

    def __repr__(self):
        return self.name


class Lex(MonomialOrder):
    # x^a < x^b iff the leftmost nonzero entry of b - a is positive, which is
    # plain tuple comparison.
    name = "lex"

    def key(self, m):
        return m


class GrevLex(MonomialOrder):
    # total degree first, ties: the rightmost nonzero entry of a - b is negative
    name = "grevlex"

    def key(self, m):
        return (sum(m), tuple(-e for e in reversed(m)))


LEX = Lex()
GREVLEX = GrevLex()
ORDERS = {"lex": LEX, "grevlex": GREVLEX}


def get_order(order) -> MonomialOrder:
    if isinstance(order, MonomialOrder):
        return order
    try:
        return ORDERS[order]
    except KeyError:
        raise ValueError(f"unknown monomial order {order!r}") from None


def compare(a: Monomial, b: Monomial, order=LEX) -> int:
    return get_order(order).compare(tuple(a), tuple(b))


def monomial_degree(m: Monomial) -> int:
    return sum(m)


def monomial_divides(a: Monomial, b: Monomial) -> bool:
    """True if x^a divides x^b."""
    return all(x <= y for x, y in zip(a, b))


def monomial_lcm(a: Monomial, b: Monomial) -> Monomial:
    return tuple(max(x, y) for x, y in zip(a, b))


def monomial_mul(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x + y for x, y in zip(a, b))


def monomial_div(a: Monomial, b: Monomial) -> Monomial:
    return tuple(x - y for x, y in zip(a, b))


def count_monomials(n: int, d: int) -> int:
    """Number of monomials in ``n`` variables of total degree at most ``d``."""
    if n < 1 or d < 0:
        raise ValueError("need n >= 1 and d >= 0")
    return math.comb(d + n, d)


def monomials_up_to(n: int, d: int) -> list:
    """All exponent tuples of length ``n`` with total degree <= ``d``."""
    if n == 1:
        return [(e,) for e in range(d + 1)]
    out = []
    for e in range(d + 1):
        for rest in monomials_up_to(n - 1, d - e):
            out.append((e,) + rest)
    return out


# ---------------------------------------------------------------------------
# polynomials

class Polynomial:
    """Sparse polynomial in F_q[x0..x_{n-1}]; immutable and hashable."""

    __slots__ = ("n", "q", "order", "terms", "max_exponent", "_hash")

    def __init__(self, n: int, q: int, terms=(), order=LEX,
                 max_exponent: int = DEFAULT_MAX_EXPONENT, *, _canonical=False):
        self.n = n
        self.q = q
        self.order = get_order(order)
        self.max_exponent = max_exponent
        self._hash = None
        if _canonical:
            self.terms = terms
            return
        check_modulus(q)
        acc: dict = {}
        items = terms.items() if isinstance(terms, Mapping) else terms
        for mono, c in items:
            mono = tuple(int(e) for e in mono)
            if len(mono) != n:
                raise ValueError(
                    f"monomial {mono} has {len(mono)} exponents, expected {n}")
            for e in mono:
                if e < 0:
                    raise ValueError(f"negative exponent in {mono}")
                if e > max_exponent:
                    raise OverflowError(
                        f"exponent {e} exceeds max_exponent={max_exponent}")
            acc[mono] = (acc.get(mono, 0) + int(c)) % q
        key = self.order.key
        self.terms = tuple(sorted(((m, c) for m, c in acc.items() if c),
                                  key=lambda t: key(t[0]), reverse=True))

    # -- constructors -----------------------------------------------------
    @classmethod
    def zero(cls, n, q, order=LEX):
        return cls(n, q, (), order)

    @classmethod
    def constant(cls, c, n, q, order=LEX):
        return cls(n, q, [((0,) * n, c)], order)

    @classmethod
    def variable(cls, i, n, q, order=LEX, power=1):
        m = [0] * n
        m[i] = power
        return cls(n, q, [(tuple(m), 1)], order)

    def _new(self, acc: dict) -> "Polynomial":
        # acc holds nonzero canonical residues
        key = self.order.key
        for m in acc:
            for e in m:
                if e > self.max_exponent:
                    raise OverflowError(
                        f"exponent {e} exceeds max_exponent={self.max_exponent}")
        terms = tuple(sorted(acc.items(), key=lambda t: key(t[0]), reverse=True))
        return Polynomial(self.n, self.q, terms, self.order, self.max_exponent,
                          _canonical=True)

    # -- accessors --------------------------------------------------------
    def is_zero(self) -> bool:
        return not self.terms

    def __bool__(self):
        return bool(self.terms)

    def __len__(self):
        return len(self.terms)

    @property
    def lm(self) -> Monomial:
        if not self.terms:
            raise ValueError("zero polynomial has no leading monomial")
        return self.terms[0][0]

    @property
    def lc(self) -> int:
        if not self.terms:
            raise ValueError("zero polynomial has no leading coefficient")
        return self.terms[0][1]

    def lt(self):
        return self.terms[0]

    def monomials(self):
        return [m for m, _ in self.terms]

    def support(self) -> frozenset:
        return frozenset(m for m, _ in self.terms)

    def degree(self) -> int:
        """Total degree; -1 for the zero polynomial."""
        return max((sum(m) for m, _ in self.terms), default=-1)

    def as_dict(self) -> dict:
        return dict(self.terms)

    def coeff(self, mono) -> int:
        return self.as_dict().get(tuple(mono), 0)

    def variables(self) -> set:
        return {i for m, _ in self.terms for i, e in enumerate(m) if e}

    def is_univariate_in(self, i: int) -> bool:
        return all(e == 0 for m, _ in self.terms for j, e in enumerate(m) if j != i)

    # -- ring operations --------------------------------------------------
    def _check(self, other: "Polynomial"):
        if not isinstance(other, Polynomial):
            raise TypeError(f"expected Polynomial, got {type(other).__name__}")
        if (self.n, self.q) != (other.n, other.q) or self.order != other.order:
            raise RingMismatchError(
                f"ring mismatch: (n={self.n}, q={self.q}, {self.order}) vs "
                f"(n={other.n}, q={other.q}, {other.order})")

    def __add__(self, other):
        if isinstance(other, int):
            other = Polynomial.constant(other, self.n, self.q, self.order)
        self._check(other)
        q = self.q
        acc = dict(self.terms)
        for m, c in other.terms:
            v = (acc.get(m, 0) + c) % q
            if v:
                acc[m] = v
            else:
                acc.pop(m, None)
        return self._new(acc)

    __radd__ = __add__

    def __neg__(self):
        q = self.q
        return Polynomial(self.n, q, tuple((m, q - c) for m, c in self.terms),
                          self.order, self.max_exponent, _canonical=True)

    def __sub__(self, other):
        if isinstance(other, int):
            other = Polynomial.constant(other, self.n, self.q, self.order)
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def scale(self, c: int) -> "Polynomial":
        c %= self.q
        if c == 0:
            return Polynomial.zero(self.n, self.q, self.order)
        q = self.q
        return Polynomial(self.n, q, tuple((m, v * c % q) for m, v in self.terms),
                          self.order, self.max_exponent, _canonical=True)

    def mul_term(self, mono: Monomial, c: int) -> "Polynomial":
        """Multiply by the single term ``c * x^mono`` (order is preserved)."""
        c %= self.q
        if c == 0 or not self.terms:
            return Polynomial.zero(self.n, self.q, self.order)
        q = self.q
        terms = tuple((tuple(a + b for a, b in zip(m, mono)), v * c % q)
                      for m, v in self.terms)
        if any(e > self.max_exponent for m, _ in terms for e in m):
            raise OverflowError(f"exponent exceeds max_exponent={self.max_exponent}")
        return Polynomial(self.n, q, terms, self.order, self.max_exponent,
                          _canonical=True)

    def __mul__(self, other):
        if isinstance(other, int):
            return self.scale(other)
        self._check(other)
        q = self.q
        acc: dict = {}
        for m1, c1 in self.terms:
            for m2, c2 in other.terms:
                m = tuple(a + b for a, b in zip(m1, m2))
                acc[m] = (acc.get(m, 0) + c1 * c2) % q
        return self._new({m: c for m, c in acc.items() if c})

    __rmul__ = __mul__

    def __pow__(self, k: int):
        out = Polynomial.constant(1, self.n, self.q, self.order)
        for _ in range(k):
            out = out * self
        return out

    def monic(self) -> "Polynomial":
        if not self.terms:
            return self
        return self.scale(inv_mod(self.lc, self.q))

    def reorder(self, order) -> "Polynomial":
        return Polynomial(self.n, self.q, self.terms, get_order(order),
                          self.max_exponent)

    def evaluate(self, point: Sequence[int]) -> int:
        q = self.q
        total = 0
        for m, c in self.terms:
            v = c
            for x, e in zip(point, m):
                v = v * pow(x, e, q) % q
            total += v
        return total % q

    # -- comparison / hashing ---------------------------------------------
    def __eq__(self, other):
        if isinstance(other, int):
            other = Polynomial.constant(other, self.n, self.q, self.order)
        if not isinstance(other, Polynomial):
            return NotImplemented
        return (self.n, self.q, self.order, self.terms) == \
            (other.n, other.q, other.order, other.terms)

    def __hash__(self):
        if self._hash is None:
            self._hash = hash((self.n, self.q, self.order.name, self.terms))
        return self._hash

    def __repr__(self):
        return f"Polynomial({format_poly(self)!r}, n={self.n}, q={self.q}, {self.order})"

    def __str__(self):
        return format_poly(self)


def normalize(f: Polynomial) -> Polynomial:
    """Rebuild the canonical form (merge, prune zeros, sort)."""
    return Polynomial(f.n, f.q, f.terms, f.order, f.max_exponent)


@dataclass(frozen=True)
class PolySystem:
    """Non-empty sequence of polynomials sharing n, q and monomial order."""

    generators: tuple

    def __post_init__(self):
        gens = tuple(self.generators)
        if not gens:
            raise ValueError("a polynomial system needs at least one generator")
        f0 = gens[0]
        for g in gens[1:]:
            f0._check(g)
        object.__setattr__(self, "generators", gens)

    @property
    def n(self):
        return self.generators[0].n

    @property
    def q(self):
        return self.generators[0].q

    @property
    def order(self):
        return self.generators[0].order

    def __len__(self):
        return len(self.generators)

    def __iter__(self):
        return iter(self.generators)

    def __getitem__(self, i):
        return self.generators[i]

    def reorder(self, order) -> "PolySystem":
        return PolySystem(tuple(g.reorder(order) for g in self.generators))

    def to_text(self) -> list:
        return [format_poly(g) for g in self.generators]


# ---------------------------------------------------------------------------
# text form

def format_poly(f: Polynomial) -> str:
    if not f.terms:
        return "0"
    parts = []
    for m, c in f.terms:
        factors = [str(c)]
        for i, e in enumerate(m):
            if e == 1:
                factors.append(f"x{i}")
            elif e > 1:
                factors.append(f"x{i}^{e}")
        parts.append("*".join(factors))
    return " + ".join(parts)


_VAR_RE = re.compile(r"^x(\d+)(?:\^(\d+))?$")


def parse_poly(text: str, n: int, q: int, order=LEX,
               max_exponent: int = DEFAULT_MAX_EXPONENT) -> Polynomial:
    """Parse the text form written by :func:`format_poly`.

    Also accepts a leading ``-`` on a term and omitted unit coefficients.
    """
    text = text.strip()
    if not text:
        raise ValueError("empty polynomial text")
    if text == "0":
        return Polynomial.zero(n, q, order)
    terms = []
    # split on '+' and on '-' that starts a new term
    chunks = re.split(r"\s*\+\s*|\s+(?=-)", text)
    for chunk in chunks:
        chunk = chunk.strip()
        if not chunk:
            raise ValueError(f"empty term in {text!r}")
        sign = 1
        if chunk.startswith("-"):
            sign = -1
            chunk = chunk[1:].strip()
        coeff = 1
        mono = [0] * n
        for j, factor in enumerate(chunk.split("*")):
            factor = factor.strip()
            if j == 0 and factor.isdigit():
                coeff = int(factor)
                continue
            mt = _VAR_RE.match(factor)
            if not mt:
                raise ValueError(f"cannot parse factor {factor!r} in {text!r}")
            idx = int(mt.group(1))
            if idx >= n:
                raise ValueError(f"variable x{idx} out of range for n={n}")
            mono[idx] += int(mt.group(2) or 1)
        terms.append((tuple(mono), sign * coeff))
    return Polynomial(n, q, terms, order, max_exponent)


def parse_system(texts: Iterable[str], n: int, q: int, order=LEX) -> PolySystem:
    return PolySystem(tuple(parse_poly(t, n, q, order) for t in texts))
