import numpy as np
import pytest
import sympy

from hatsolver.ffpoly import GREVLEX, LEX, Polynomial, PolySystem, parse_poly
from hatsolver.groebner import (OracleTimeout, ShapeBasis, buchberger, divide,
                                inter_reduce, is_groebner, is_reduced,
                                is_shape_position, is_zero_dimensional,
                                reduced_groebner_basis, s_polynomial)

from conftest import random_poly, random_system


def to_sympy(f, gens):
    return sum(c * sympy.prod([g ** e for g, e in zip(gens, m)]) for m, c in f.terms)


def sympy_basis(system, order):
    n, q = system.n, system.q
    gens = sympy.symbols(f"x0:{n}")
    G = sympy.groebner([to_sympy(f, gens) for f in system], *gens,
                       modulus=q, order=order.name)
    out = []
    for g in G.exprs:
        p = sympy.Poly(g, *gens, modulus=q)
        out.append(Polynomial(n, q, [(m, int(c) % q) for m, c in p.terms()], order))
    return out


@pytest.mark.parametrize("order", [LEX, GREVLEX])
@pytest.mark.parametrize("n", [2, 3])
def test_matches_sympy(order, n):
    rng = np.random.default_rng(10 + n)
    for _ in range(15 if n == 2 else 6):
        F = random_system(rng, n, 7, 2, n, 3, order)
        ours = list(reduced_groebner_basis(F, order).basis)
        ref = sorted(sympy_basis(F, order), key=lambda p: order.key(p.lm), reverse=True)
        assert ours == ref


def test_division_identity(rng):
    for order in (LEX, GREVLEX):
        for _ in range(30):
            f = random_poly(rng, 3, 7, 4, 6, order)
            basis = [random_poly(rng, 3, 7, 2, 3, order) for _ in range(3)]
            quots, r = divide(f, basis, with_quotients=True)
            total = r
            for qk, b in zip(quots, basis):
                total = total + qk * b
            assert total == f
            lms = [b.lm for b in basis if b]
            for m, _ in r.terms:
                assert not any(all(x <= y for x, y in zip(lm, m)) for lm in lms)


def test_s_polynomial_cancels_leading_terms():
    f = parse_poly("x0^2*x1 + 3*x1", 2, 7)
    g = parse_poly("2*x0*x1^2 + x0", 2, 7)
    s = s_polynomial(f, g)
    assert s.lm < (2, 2) or s.is_zero()
    assert s == parse_poly("3*x1^2 + 3*x0^2", 2, 7)


def test_cofactors_express_basis(rng):
    for order in (LEX, GREVLEX):
        for _ in range(5):
            F = random_system(rng, 3, 7, 2, 3, 3, order)
            gb = buchberger(F, order, record_cofactors=True)
            for g, row in zip(gb.basis, gb.cofactors):
                acc = Polynomial.zero(3, 7, order)
                for c, f in zip(row, F):
                    acc = acc + c * f
                assert acc == g


def test_inter_reduce_is_reduced_and_idempotent(rng):
    F = random_system(rng, 2, 5, 3, 3, 3)
    gb = reduced_groebner_basis(F)
    assert is_reduced(gb)
    assert is_groebner(gb)
    assert inter_reduce(gb) == gb


def test_shape_position_detection():
    h = parse_poly("x1^3 + 2*x1 + 1", 2, 7)
    g = parse_poly("x1^2 + 3", 2, 7)
    sb = ShapeBasis(h, (g,))
    polys = sb.expand()
    assert is_shape_position(polys) == sb
    assert is_groebner(polys)
    assert is_zero_dimensional(polys)
    # x0 - g with deg g >= deg h breaks shape position
    bad = PolySystem((h, parse_poly("x0 + x1^3", 2, 7)))
    assert is_shape_position(bad) is None


def test_non_zero_dimensional():
    F = PolySystem((parse_poly("x0*x1", 2, 7),))
    gb = reduced_groebner_basis(F)
    assert not is_zero_dimensional(gb)
    assert is_shape_position(gb) is None


def test_step_budget_raises():
    rng = np.random.default_rng(3)
    F = random_system(rng, 3, 7, 3, 3, 4)
    with pytest.raises(OracleTimeout) as err:
        buchberger(F, LEX, max_steps=1)
    assert err.value.steps >= 1
    assert err.value.reason


def test_unit_ideal():
    F = PolySystem((parse_poly("x0 + 1", 2, 7), parse_poly("x0", 2, 7)))
    gb = reduced_groebner_basis(F)
    assert [g.as_dict() for g in gb.basis] == [{(0, 0): 1}]
