"""Backward generation of (F, G) training pairs.

A random reduced lex basis G in shape position is drawn first, then hidden
behind ``F = U1 P U2 G`` where U1 (s x s) and U2 (s x n) are unit upper
triangular polynomial matrices and P permutes rows.  Both matrices keep the
ideal unchanged, so <F> = <G> while F itself is (almost never) a Groebner
basis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

import numpy as np

from .ffpoly import LEX, Polynomial, PolySystem, check_modulus, monomials_up_to, parse_poly
from .groebner import (
    OracleTimeout,
    ShapeBasis,
    buchberger,
    inter_reduce,
    is_groebner,
    is_shape_position,
)


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n: int
    q: int = 7
    max_degree_G: int = 5
    max_num_terms_G: int = 5
    max_degree_F: int = 3
    max_num_terms_F: int = 2
    max_size_F: Optional[int] = None  # None means n + 2
    density: float = 1.0
    term_sampling: str = "uniform"
    degree_sampling: str = "fixed"  # "fixed": deg h = max_degree_G; "uniform": [1, max]
    seed: int = 0
    max_terms_per_equation: int = 400
    max_attempts: int = 100
    verify: str = "auto"  # "auto" | "always" | "never"
    oracle_max_steps: int = 100_000
    oracle_time_budget: Optional[float] = None

    def __post_init__(self):
        if self.max_size_F is None:
            object.__setattr__(self, "max_size_F", self.n + 2)
        if self.n < 1:
            raise ValueError("n must be >= 1")
        check_modulus(self.q)
        if not (0.0 < self.density <= 1.0):
            raise ValueError(f"density must lie in (0, 1], got {self.density}")
        if self.max_size_F < self.n:
            raise ValueError("max_size_F must be >= n")
        if self.max_degree_G < 1 or self.max_num_terms_G < 1:
            raise ValueError("max_degree_G and max_num_terms_G must be >= 1")
        if self.max_degree_F < 0 or self.max_num_terms_F < 1:
            raise ValueError("max_degree_F must be >= 0 and max_num_terms_F >= 1")
        if self.term_sampling != "uniform":
            raise ValueError(f"unsupported term_sampling {self.term_sampling!r}")
        if self.degree_sampling not in ("fixed", "uniform"):
            raise ValueError(f"unsupported degree_sampling {self.degree_sampling!r}")
        if self.verify not in ("auto", "always", "never"):
            raise ValueError(f"verify must be auto/always/never, got {self.verify!r}")

    @property
    def rho(self):
        return self.density

    def should_verify(self) -> bool:
        if self.verify == "auto":
            return self.n <= 2 or (self.n == 3 and self.max_degree_G <= 3)
        return self.verify == "always"


@dataclass(frozen=True)
class UnimodularMatrix:
    entries: tuple  # rows of Polynomial
    rows: int
    cols: int

    def __post_init__(self):
        k = min(self.rows, self.cols)
        for i in range(k):
            e = self.entries[i][i]
            if e != Polynomial.constant(1, e.n, e.q, e.order):
                raise ValueError(f"diagonal entry ({i},{i}) is not 1")
            for j in range(i):
                if self.entries[i][j]:
                    raise ValueError(f"entry ({i},{j}) below the diagonal is nonzero")

    def apply(self, vec) -> list:
        vec = list(vec)
        if len(vec) != self.cols:
            raise ValueError(f"matrix has {self.cols} columns, vector has {len(vec)} rows")
        out = []
        for row in self.entries:
            acc = None
            for e, v in zip(row, vec):
                if e:
                    t = e * v
                    acc = t if acc is None else acc + t
            out.append(acc if acc is not None else Polynomial.zero(vec[0].n, vec[0].q, vec[0].order))
        return out

    def offdiag_count(self) -> tuple:
        """(nonzero, permitted) counts over the entries free to be nonzero."""
        nz = total = 0
        for i in range(self.rows):
            for j in range(self.cols):
                if i < self.cols and j <= i:
                    continue
                total += 1
                nz += bool(self.entries[i][j])
        return nz, total


@dataclass(frozen=True)
class SamplePair:
    F: PolySystem
    G: ShapeBasis
    meta: dict = field(default_factory=dict)

    @property
    def G_system(self) -> PolySystem:
        return self.G.expand()

    def to_json(self) -> dict:
        return {
            "n": self.F.n,
            "q": self.F.q,
            "rho": self.meta.get("rho"),
            "F": self.F.to_text(),
            "G": self.G_system.to_text(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SamplePair":
        n, q = int(obj["n"]), int(obj["q"])
        F = PolySystem(tuple(parse_poly(t, n, q) for t in obj["F"]))
        gpolys = [parse_poly(t, n, q) for t in obj["G"]]
        G = is_shape_position(gpolys)
        if G is None:
            raise DatasetFormatError("G is not in shape position")
        return cls(F, G, dict(obj.get("meta", {})))


# ---------------------------------------------------------------------------
# sampling

@lru_cache(maxsize=None)
def _monomial_table(n: int, d: int) -> tuple:
    return tuple(monomials_up_to(n, d))


def random_polynomial(n, q, max_degree, max_terms, rng, order=LEX) -> Polynomial:
    """Nonzero polynomial with a uniform number of terms in [1, max_terms],
    distinct monomials of degree <= max_degree and nonzero coefficients."""
    table = _monomial_table(n, max_degree)
    t = int(rng.integers(1, max_terms + 1))
    t = min(t, len(table))
    idx = rng.choice(len(table), size=t, replace=False)
    coeffs = rng.integers(1, q, size=t)
    return Polynomial(n, q, [(table[i], int(c)) for i, c in zip(idx, coeffs)], order)


def _univariate(n, q, degs, coeffs, order=LEX) -> Polynomial:
    last = n - 1
    terms = []
    for d, c in zip(degs, coeffs):
        m = [0] * n
        m[last] = int(d)
        terms.append((tuple(m), int(c)))
    return Polynomial(n, q, terms, order)


def sample_shape_basis(cfg: GenConfig, rng) -> ShapeBasis:
    n, q = cfg.n, cfg.q
    if cfg.degree_sampling == "fixed":
        d = cfg.max_degree_G
    else:
        d = int(rng.integers(1, cfg.max_degree_G + 1))
    t = min(int(rng.integers(1, cfg.max_num_terms_G + 1)), d + 1)
    lower = rng.choice(d, size=t - 1, replace=False)
    h = _univariate(n, q, [d, *lower], [1, *rng.integers(1, q, size=t - 1)])
    gs = []
    for _ in range(n - 1):
        t = min(int(rng.integers(1, cfg.max_num_terms_G + 1)), d)
        degs = rng.choice(d, size=t, replace=False)
        gs.append(_univariate(n, q, degs, rng.integers(1, q, size=t)))
    return ShapeBasis(h, tuple(gs))


def sample_unimodular(rows: int, cols: int, cfg: GenConfig, rng) -> UnimodularMatrix:
    """Unit upper-triangular leading block stacked over free extra rows.

    Every entry not fixed by the structure is nonzero with probability
    ``cfg.density``; nonzero entries are random polynomials with at most
    ``max_num_terms_F`` terms of degree at most ``max_degree_F``.
    """
    if rows < cols:
        raise ValueError(f"need rows >= cols, got {rows}x{cols}")
    n, q = cfg.n, cfg.q
    zero = Polynomial.zero(n, q)
    one = Polynomial.constant(1, n, q)
    entries = []
    for i in range(rows):
        row = []
        for j in range(cols):
            if i < cols and j < i:
                row.append(zero)
            elif i < cols and j == i:
                row.append(one)
            elif rng.random() < cfg.density:
                row.append(random_polynomial(n, q, cfg.max_degree_F, cfg.max_num_terms_F, rng))
            else:
                row.append(zero)
        entries.append(tuple(row))
    return UnimodularMatrix(tuple(entries), rows, cols)


def _resample_row(U: UnimodularMatrix, i: int, cfg: GenConfig, rng) -> UnimodularMatrix:
    fresh = sample_unimodular(U.rows, U.cols, cfg, rng)
    entries = list(U.entries)
    entries[i] = fresh.entries[i]
    return UnimodularMatrix(tuple(entries), U.rows, U.cols)


def _identity(size: int, cfg: GenConfig) -> UnimodularMatrix:
    n, q = cfg.n, cfg.q
    zero, one = Polynomial.zero(n, q), Polynomial.constant(1, n, q)
    return UnimodularMatrix(
        tuple(tuple(one if i == j else zero for j in range(size)) for i in range(size)),
        size, size)


def backward_generate(cfg: GenConfig, rng, *, index: int = 0,
                      force_identity_attempts: int = 0) -> SamplePair:
    """Draw one (F, G) pair.

    ``force_identity_attempts`` is a test hook: the first that many attempts
    use identity matrices (so F equals G and must be rejected).
    """
    n = cfg.n
    for attempt in range(1, cfg.max_attempts + 1):
        G = sample_shape_basis(cfg, rng)
        gvec = list(G.expand())
        if attempt <= force_identity_attempts:
            s = n
            U2, U1, perm = _identity(n, cfg), _identity(n, cfg), np.arange(n)
        else:
            s = int(rng.integers(n, cfg.max_size_F + 1))
            U2 = sample_unimodular(s, n, cfg, rng)
            perm = rng.permutation(s)
            U1 = sample_unimodular(s, s, cfg, rng)
        H = U2.apply(gvec)
        PH = [H[int(k)] for k in perm]
        F = U1.apply(PH)
        ok = True
        for i in range(s):
            tries = 0
            while len(F[i]) > cfg.max_terms_per_equation:
                tries += 1
                if tries > cfg.max_attempts:
                    ok = False
                    break
                U1 = _resample_row(U1, i, cfg, rng)
                F[i] = U1.apply(PH)[i]
            if not ok:
                break
        if not ok or any(f.is_zero() for f in F):
            continue
        if set(F) == set(gvec) or is_groebner(F):
            continue
        meta = _meta(cfg, F, gvec, index, attempt)
        if cfg.should_verify():
            try:
                gb = inter_reduce(buchberger(F, max_steps=cfg.oracle_max_steps,
                                             time_budget=cfg.oracle_time_budget))
            except OracleTimeout:
                meta["verified"] = False
                meta["oracle"] = "TIMEOUT"
            else:
                if set(gb.basis) != set(gvec):
                    raise GenerationError(
                        f"oracle disagrees with generated basis for {cfg}")
                meta["verified"] = True
                meta["oracle"] = "MATCH"
        else:
            meta["verified"] = False
            meta["oracle"] = "SKIPPED"
        return SamplePair(PolySystem(tuple(F)), G, meta)
    raise GenerationError(f"resample budget of {cfg.max_attempts} attempts exhausted for {cfg}")


def _meta(cfg, F, gvec, index, attempt) -> dict:
    n = cfg.n
    terms = [len(f) for f in F]
    g_terms = sum(len(g) for g in gvec)
    return {
        "n": n,
        "q": cfg.q,
        "rho": cfg.density,
        "seed": cfg.seed,
        "index": index,
        "attempts": attempt,
        "num_equations": len(F),
        "terms_per_equation": terms,
        "total_terms": sum(terms),
        "max_degree": max(f.degree() for f in F),
        "input_tokens": sum(terms) * (n + 2),
        "target_tokens": g_terms * (n + 2) + 1,
    }


def sample_rng(seed: int, index: int):
    """Independent stream for sample ``index`` of a corpus seeded with ``seed``."""
    return np.random.default_rng([seed, index])


def _generate_one(args):
    cfg, index = args
    return backward_generate(cfg, sample_rng(cfg.seed, index), index=index)


def generate_dataset(cfg: GenConfig, count: int, *, start: int = 0,
                     workers: int = 1) -> list:
    jobs = [(cfg, i) for i in range(start, start + count)]
    if workers <= 1:
        return [_generate_one(j) for j in jobs]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(workers) as pool:
        return list(pool.imap(_generate_one, jobs, chunksize=16))


# ---------------------------------------------------------------------------
# statistics

def _summary(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"max": float(a.max()), "mean": float(a.mean()), "std": float(a.std())}


def dataset_stats(samples) -> dict:
    """Per-dataset monomial statistics.

    ``max_terms_per_system`` summarizes, over systems, the largest equation of
    each system; ``terms_per_equation`` summarizes all equations pooled;
    ``total_terms`` the number of monomials per system.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("dataset_stats needs at least one sample")
    per_system_max, pooled, totals, degrees, n_eq = [], [], [], [], []
    for s in samples:
        counts = [len(f) for f in s.F]
        per_system_max.append(max(counts))
        pooled.extend(counts)
        totals.append(sum(counts))
        degrees.append(max(f.degree() for f in s.F))
        n_eq.append(len(counts))
    tot = _summary(totals)
    return {
        "num_samples": len(samples),
        "max_terms_per_system": _summary(per_system_max),
        "terms_per_equation": _summary(pooled),
        "total_terms": {"mean": tot["mean"], "std": tot["std"], "max": tot["max"]},
        "max_degree": int(max(degrees)),
        "equations_per_sample": _summary(n_eq),
    }


# ---------------------------------------------------------------------------
# persistence

def _dump_line(sample: SamplePair) -> str:
    return json.dumps(sample.to_json(), separators=(",", ":"))


def write_dataset(path, samples: Iterable[SamplePair]) -> int:
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(_dump_line(s))
            fh.write("\n")
            count += 1
    return count


def read_dataset(path) -> list:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append(SamplePair.from_json(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from exc
    return out
