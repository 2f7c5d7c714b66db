"""Buchberger's algorithm and the checks built on it.

This is the ground-truth oracle: data generation verifies every sample with it
and evaluation compares model output against it.  Everything here is a pure
function of immutable inputs.
"""

from __future__ import annotations

import heapq
import itertools
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .ffpoly import (
    GREVLEX,
    LEX,
    Polynomial,
    PolySystem,
    get_order,
    inv_mod,
    monomial_divides,
    monomial_lcm,
)

DEFAULT_MAX_STEPS = 100_000
# lex intermediates routinely pass the serialization cap on exponents
ORACLE_MAX_EXPONENT = (1 << 15) - 1


class OracleTimeout(RuntimeError):
    """Raised when Buchberger exceeds its step or wall-clock budget."""

    def __init__(self, reason: str, partial_size: int, steps: int, elapsed: float):
        super().__init__(
            f"buchberger budget exceeded ({reason}) after {steps} S-pair "
            f"reductions, {elapsed:.2f}s, partial basis size {partial_size}")
        self.reason = reason
        self.partial_size = partial_size
        self.steps = steps
        self.elapsed = elapsed


@dataclass(frozen=True)
class GroebnerBasis:
    basis: tuple
    order: object = LEX
    reduced: bool = False
    # cofactors[k][j] is the multiplier of input generator j in basis[k]
    cofactors: Optional[tuple] = field(default=None, compare=False, repr=False)
    steps: int = field(default=0, compare=False)

    def __len__(self):
        return len(self.basis)

    def __iter__(self):
        return iter(self.basis)

    def system(self) -> PolySystem:
        return PolySystem(self.basis)


@dataclass(frozen=True)
class ShapeBasis:
    """``{h(x_last), x_0 - g_0(x_last), ..., x_{n-2} - g_{n-2}(x_last)}``."""

    h: Polynomial
    g_list: tuple

    def __post_init__(self):
        object.__setattr__(self, "g_list", tuple(self.g_list))
        n = self.h.n
        last = n - 1
        if len(self.g_list) != n - 1:
            raise ValueError(f"expected {n - 1} g polynomials, got {len(self.g_list)}")
        if self.h.is_zero() or not self.h.is_univariate_in(last):
            raise ValueError("h must be a nonzero univariate polynomial in the last variable")
        dh = self.h.degree()
        for g in self.g_list:
            if not g.is_univariate_in(last):
                raise ValueError("each g must be univariate in the last variable")
            if g.degree() >= dh:
                raise ValueError(f"deg g = {g.degree()} is not below deg h = {dh}")

    @property
    def n(self):
        return self.h.n

    @property
    def q(self):
        return self.h.q

    def expand(self) -> PolySystem:
        """The basis as polynomials, in the order h, x_0 - g_0, x_1 - g_1, ..."""
        h = self.h
        polys = [h]
        for i, g in enumerate(self.g_list):
            polys.append(Polynomial.variable(i, h.n, h.q, h.order) - g)
        return PolySystem(tuple(polys))


# ---------------------------------------------------------------------------
# reduction

class _Packer:
    """Monomials packed into one int, 16 bits per variable with x0 most
    significant.  Products are integer sums and divisibility is one
    subtraction; bit 15 of each field is a guard that flags overflow."""

    BITS = 16

    def __init__(self, n: int, order):
        self.n = n
        self.order = order
        self.shifts = [self.BITS * (n - 1 - i) for i in range(n)]
        self.guard = sum(1 << (s + self.BITS - 1) for s in self.shifts)
        self._cache: dict = {}
        if order.name == "lex":
            self.key = None
        else:
            self.key = self._cached_key

    def pack(self, mono) -> int:
        v = 0
        for e in mono:
            if e >= 1 << (self.BITS - 1):
                raise OverflowError(f"exponent {e} too large for the oracle")
            v = (v << self.BITS) | e
        return v

    def unpack(self, m: int) -> tuple:
        mask = (1 << self.BITS) - 1
        return tuple((m >> s) & mask for s in self.shifts)

    def divides(self, a: int, b: int) -> bool:
        g = self.guard
        return ((b | g) - a) & g == g

    def lcm(self, a: int, b: int) -> int:
        return self.pack(max(x, y) for x, y in zip(self.unpack(a), self.unpack(b)))

    def coprime(self, a: int, b: int) -> bool:
        return all(x == 0 or y == 0 for x, y in zip(self.unpack(a), self.unpack(b)))

    def _cached_key(self, m: int):
        k = self._cache.get(m)
        if k is None:
            k = self.order.key(self.unpack(m))
            self._cache[m] = k
        return k

    def sort_key(self, m: int):
        return m if self.key is None else self.key(m)

    def poly(self, f: Polynomial) -> dict:
        return {self.pack(m): c for m, c in f.terms}

    def to_poly(self, d: dict, q: int, max_exponent: int) -> Polynomial:
        return Polynomial(self.n, q, [(self.unpack(m), c) for m, c in d.items()],
                          self.order, max_exponent)


def _reduce_packed(p: dict, reducers: list, pk: _Packer, q: int, quot: Optional[list] = None) -> dict:
    """Full reduction of the dict polynomial ``p`` (consumed) by monic
    ``reducers`` given as ``(lm, tail)`` with ``tail`` a list of terms.

    The earliest reducer whose leading monomial divides wins.  When ``quot``
    is given, ``quot[k]`` accumulates the quotient of reducer ``k``.
    """
    guard = pk.guard
    key = pk.key
    rem = {}
    if key is None:
        heap = [-m for m in p]
        heapq.heapify(heap)
    else:
        back: dict = {}
        heap = []
        for m in p:
            k = key(m)
            back[k] = m
            heap.append(_Neg(k))
        heapq.heapify(heap)
    while heap:
        if key is None:
            m = -heapq.heappop(heap)
        else:
            m = back[heapq.heappop(heap).k]
        c = p.pop(m, 0)
        if not c:
            continue
        mg = m | guard
        for idx, (lm, tail) in enumerate(reducers):
            if (mg - lm) & guard == guard:
                shift = m - lm
                for gm, gc in tail:
                    nm = gm + shift
                    old = p.get(nm)
                    if old is None:
                        if nm & guard:
                            raise OverflowError("exponent overflow in the oracle")
                        p[nm] = (-c * gc) % q
                        if key is None:
                            heapq.heappush(heap, -nm)
                        else:
                            k = key(nm)
                            back[k] = nm
                            heapq.heappush(heap, _Neg(k))
                    else:
                        v = (old - c * gc) % q
                        if v:
                            p[nm] = v
                        else:
                            p[nm] = 0  # keeps the heap entry consistent
                if quot is not None:
                    d = quot[idx]
                    d[shift] = (d.get(shift, 0) + c) % q
                break
        else:
            rem[m] = c
    return rem


class _Neg:
    """Reverses the order of an arbitrary sort key inside a min-heap."""

    __slots__ = ("k",)

    def __init__(self, k):
        self.k = k

    def __lt__(self, other):
        return other.k < self.k


def _monic_packed(d: dict, pk: _Packer, q: int):
    lm = max(d, key=pk.sort_key)
    inv = inv_mod(d[lm], q)
    tail = sorted(((m, c * inv % q) for m, c in d.items() if m != lm),
                  key=lambda t: pk.sort_key(t[0]), reverse=True)
    return lm, tail, inv


def divide(f: Polynomial, basis: Sequence[Polynomial], order=None,
           *, with_quotients: bool = False):
    """Multivariate division of ``f`` by ``basis``.

    Returns the remainder, or ``(quotients, remainder)`` when ``with_quotients``
    is set, such that ``f == sum(q_k * b_k) + remainder`` and no monomial of the
    remainder is divisible by a leading monomial of the basis.  The reducer
    picked at each step is the earliest basis element whose leading monomial
    divides the current one.
    """
    order = get_order(order) if order is not None else f.order
    if f.order != order:
        f = f.reorder(order)
    basis = [b if b.order == order else b.reorder(order) for b in basis]
    for b in basis:
        f._check(b)
    q, n = f.q, f.n
    pk = _Packer(n, order)
    nonzero = [k for k, b in enumerate(basis) if b]
    reducers, invs = [], []
    for k in nonzero:
        lm, tail, inv = _monic_packed(pk.poly(basis[k]), pk, q)
        reducers.append((lm, tail))
        invs.append(inv)
    quot = [dict() for _ in nonzero] if with_quotients else None
    rem = _reduce_packed(pk.poly(f), reducers, pk, q, quot)
    remainder = pk.to_poly(rem, q, f.max_exponent)
    if not with_quotients:
        return remainder
    out = [Polynomial.zero(n, q, order) for _ in basis]
    for k, d, inv in zip(nonzero, quot, invs):
        # reducers were made monic, so rescale back to the caller's b_k
        out[k] = pk.to_poly({m: c * inv % q for m, c in d.items()}, q, f.max_exponent)
    return out, remainder


def reduce(f: Polynomial, basis, order=None) -> Polynomial:
    """Normal form of ``f`` modulo ``basis`` (an iterable of polynomials)."""
    return divide(f, list(basis), order)


def s_polynomial(f: Polynomial, g: Polynomial, order=None) -> Polynomial:
    """``(lcm/lt(f)) f - (lcm/lt(g)) g`` for the lcm of the leading monomials."""
    if not f or not g:
        raise ValueError("S-polynomial of a zero polynomial is undefined")
    order = get_order(order) if order is not None else f.order
    if f.order != order:
        f = f.reorder(order)
    if g.order != order:
        g = g.reorder(order)
    f._check(g)
    lcm = monomial_lcm(f.lm, g.lm)
    q = f.q
    a = f.mul_term(tuple(x - y for x, y in zip(lcm, f.lm)), inv_mod(f.lc, q))
    b = g.mul_term(tuple(x - y for x, y in zip(lcm, g.lm)), inv_mod(g.lc, q))
    return a - b


# ---------------------------------------------------------------------------
# Buchberger

def buchberger(gens, order=LEX, *, max_steps: int = DEFAULT_MAX_STEPS,
               time_budget: Optional[float] = None,
               record_cofactors: bool = False,
               grevlex_first: bool = True) -> GroebnerBasis:
    """Groebner basis of the ideal generated by ``gens``.

    Pairs are selected by the normal strategy (smallest lcm, FIFO on ties).
    Useless pairs are discarded with the Gebauer-Moeller criteria, which
    include the coprime-leading-monomial test, and elements whose leading
    monomial is divisible by a newer one leave the working basis.  The output
    is not inter-reduced; pass it to :func:`inter_reduce` for the reduced
    basis.

    For lex with ``grevlex_first`` the generators are first replaced by their
    grevlex basis, which spans the same ideal and avoids most of the
    coefficient and degree swell of a direct lex run.

    ``max_steps`` bounds the number of S-pair reductions and ``time_budget``
    the wall-clock seconds (both shared by the two passes); exceeding either
    raises :class:`OracleTimeout`.  With ``record_cofactors`` every basis
    element carries its expression as a combination of the inputs.
    """
    order = get_order(order)
    gens = list(gens)
    if not gens:
        raise ValueError("buchberger needs at least one generator")
    if not (grevlex_first and order.name == "lex" and gens[0].n > 1):
        return _buchberger(gens, order, max_steps, time_budget, record_cofactors)
    start = time.perf_counter()
    pre = _buchberger(gens, GREVLEX, max_steps, time_budget, record_cofactors)
    left = None if time_budget is None else time_budget - (time.perf_counter() - start)
    try:
        post = _buchberger([p.reorder(order) for p in pre.basis], order,
                           max_steps - pre.steps, left, record_cofactors)
    except OracleTimeout as exc:
        raise OracleTimeout(exc.reason, exc.partial_size, exc.steps + pre.steps,
                            time.perf_counter() - start) from None
    cof = None
    if record_cofactors:
        m = len(gens)
        inner = [[c.reorder(order) for c in row] for row in pre.cofactors]
        cof = []
        for row in post.cofactors:
            out = []
            for t in range(m):
                acc = Polynomial.zero(gens[0].n, gens[0].q, order)
                for k, c in enumerate(row):
                    if c and inner[k][t]:
                        acc = acc + c * inner[k][t]
                out.append(acc)
            cof.append(tuple(out))
        cof = tuple(cof)
    return GroebnerBasis(post.basis, order, reduced=False, cofactors=cof,
                         steps=pre.steps + post.steps)


def _buchberger(gens, order, max_steps, time_budget, record_cofactors) -> GroebnerBasis:
    order = get_order(order)
    gens = list(gens)
    if not gens:
        raise ValueError("buchberger needs at least one generator")
    f0 = gens[0]
    for g in gens[1:]:
        f0._check(g)
    n, q = f0.n, f0.q
    m = len(gens)
    pk = _Packer(n, order)
    skey = pk.sort_key
    zero = Polynomial.zero(n, q, order)

    basis: list = []  # (lm, tail) pairs, monic
    cof: list = []
    alive: list = []
    heap: list = []
    live: set = set()
    counter = itertools.count()

    def update(lm, tail):
        # Gebauer-Moeller pair update plus removal of redundant elements
        k = len(basis)
        basis.append((lm, tail))
        alive.append(True)
        by_lcm: dict = {}
        for i in range(k):
            if alive[i]:
                by_lcm.setdefault(pk.lcm(basis[i][0], lm), []).append(i)
        lcms = list(by_lcm)
        for lcm, idx in by_lcm.items():
            if any(other != lcm and pk.divides(other, lcm) for other in lcms):
                continue
            if any(pk.coprime(basis[i][0], lm) for i in idx):
                continue
            heapq.heappush(heap, (skey(lcm), next(counter), idx[0], k))
            live.add((idx[0], k))
        for pair in list(live):
            i, j = pair
            if j == k:
                continue
            lcm = pk.lcm(basis[i][0], basis[j][0])
            if (pk.divides(lm, lcm) and pk.lcm(basis[i][0], lm) != lcm
                    and pk.lcm(basis[j][0], lm) != lcm):
                live.discard(pair)
        for i in range(k):
            if alive[i] and pk.divides(lm, basis[i][0]):
                alive[i] = False

    def cof_poly(d: dict) -> Polynomial:
        return pk.to_poly(d, q, ORACLE_MAX_EXPONENT)

    for j, g in enumerate(gens):
        if g.order != order:
            g = g.reorder(order)
        if not g:
            continue
        lm, tail, inv = _monic_packed(pk.poly(g), pk, q)
        if record_cofactors:
            row = [zero] * m
            row[j] = cof_poly({0: inv})
            cof.append(row)
        update(lm, tail)

    start = time.perf_counter()
    steps = 0
    while heap:
        _, _, i, j = heapq.heappop(heap)
        if (i, j) not in live:
            continue
        live.discard((i, j))
        if steps >= max_steps:
            raise OracleTimeout("steps", sum(alive), steps, time.perf_counter() - start)
        if time_budget is not None and time.perf_counter() - start > time_budget:
            raise OracleTimeout("time", sum(alive), steps, time.perf_counter() - start)
        steps += 1
        (lmi, ti), (lmj, tj) = basis[i], basis[j]
        lcm = pk.lcm(lmi, lmj)
        a, b = lcm - lmi, lcm - lmj
        s: dict = {}
        for mono, c in ti:
            s[mono + a] = c
        for mono, c in tj:
            nm = mono + b
            v = (s.get(nm, 0) - c) % q
            if v:
                s[nm] = v
            else:
                s.pop(nm, None)
        current = [k for k in range(len(basis)) if alive[k]]
        quot = [dict() for _ in current] if record_cofactors else None
        r = _reduce_packed(s, [basis[k] for k in current], pk, q, quot)
        r = {mono: c for mono, c in r.items() if c}
        if not r:
            continue
        lm, tail, inv = _monic_packed(r, pk, q)
        if record_cofactors:
            ap, bp = cof_poly({a: 1}), cof_poly({b: 1})
            qp = [(k, cof_poly(d)) for k, d in zip(current, quot) if d]
            row = []
            for t in range(m):
                c = ap * cof[i][t] - bp * cof[j][t]
                for k, qk in qp:
                    c = c - qk * cof[k][t]
                row.append(c.scale(inv))
            cof.append(row)
        update(lm, tail)

    keep = [k for k in range(len(basis)) if alive[k]]
    out = []
    for k in keep:
        lm, tail = basis[k]
        d = dict(tail)
        d[lm] = 1
        out.append(pk.to_poly(d, q, ORACLE_MAX_EXPONENT))
    return GroebnerBasis(tuple(out), order, reduced=False,
                         cofactors=tuple(tuple(cof[k]) for k in keep) if record_cofactors else None,
                         steps=steps)


def inter_reduce(gb) -> GroebnerBasis:
    """Reduced Groebner basis: minimal, monic, tails reduced, sorted by
    leading monomial (largest first)."""
    if isinstance(gb, GroebnerBasis):
        order, polys = gb.order, list(gb.basis)
    else:
        polys = list(gb)
        order = polys[0].order
    polys = [p for p in polys if p]
    key = order.key
    minimal: list = []
    for f in sorted(polys, key=lambda p: key(p.lm)):
        if not any(monomial_divides(g.lm, f.lm) for g in minimal):
            minimal.append(f.monic())
    reduced = []
    for i, f in enumerate(minimal):
        others = minimal[:i] + minimal[i + 1:]
        reduced.append(divide(f, others, order).monic())
    reduced.sort(key=lambda p: key(p.lm), reverse=True)
    return GroebnerBasis(tuple(reduced), order, reduced=True)


def reduced_groebner_basis(gens, order=LEX, **budget) -> GroebnerBasis:
    return inter_reduce(buchberger(gens, order, **budget))


def is_groebner(sys, order=None) -> bool:
    """Buchberger's criterion: every pairwise S-polynomial reduces to zero."""
    polys = [p for p in sys if p]
    if not polys:
        return True
    order = get_order(order) if order is not None else polys[0].order
    polys = [p if p.order == order else p.reorder(order) for p in polys]
    for i in range(len(polys)):
        for j in range(i + 1, len(polys)):
            if divide(s_polynomial(polys[i], polys[j], order), polys, order):
                return False
    return True


def is_reduced(sys) -> bool:
    polys = list(sys)
    for i, g in enumerate(polys):
        if not g or g.lc != 1:
            return False
        others = [p.lm for j, p in enumerate(polys) if j != i]
        for m, _ in g.terms:
            if any(monomial_divides(lm, m) for lm in others):
                return False
    return True


def is_shape_position(gb) -> Optional[ShapeBasis]:
    """Decompose a reduced lex basis as ``{h, x_i - g_i}``; None if it is not
    of that form."""
    polys = list(gb.basis if isinstance(gb, GroebnerBasis) else gb)
    if not polys:
        return None
    n = polys[0].n
    last = n - 1
    if len(polys) != n:
        return None
    h = None
    gs: dict = {}
    for p in polys:
        if not p or p.lc != 1:
            return None
        lm = p.lm
        if p.is_univariate_in(last):
            if lm[last] == 0 or h is not None:
                return None
            h = p
            continue
        # expect x_i - g(x_last): leading monomial x_i, remaining terms in x_last
        if sum(lm) != 1 or lm[last] == 1:
            return None
        i = lm.index(1)
        if i in gs:
            return None
        tail = Polynomial(n, p.q, p.terms[1:], p.order, _canonical=True)
        if not tail.is_univariate_in(last):
            return None
        gs[i] = -tail
    if h is None or sorted(gs) != list(range(n - 1)):
        return None
    if any(g.degree() >= h.degree() for g in gs.values()):
        return None
    return ShapeBasis(h, tuple(gs[i] for i in range(n - 1)))


def is_zero_dimensional(gb) -> bool:
    """True iff every variable has a pure power among the leading monomials."""
    polys = [p for p in (gb.basis if isinstance(gb, GroebnerBasis) else gb) if p]
    if not polys:
        return False
    n = polys[0].n
    seen = set()
    for p in polys:
        lm = p.lm
        nz = [i for i, e in enumerate(lm) if e]
        if len(nz) == 1:
            seen.add(nz[0])
        elif not nz:
            # a unit: the ideal is the whole ring, variety is empty
            return True
    return len(seen) == n
