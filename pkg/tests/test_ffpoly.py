import itertools

import pytest

from hatsolver.ffpoly import (GREVLEX, LEX, FieldElement, FieldError, Polynomial,
                              PolySystem, RingMismatchError, compare, count_monomials,
                              field_add, field_inv, field_mul, format_poly, inv_mod,
                              monomial_divides, monomial_lcm, monomials_up_to,
                              parse_poly)

from conftest import random_poly


def test_field_examples():
    assert field_add(FieldElement(3, 7), FieldElement(5, 7)) == FieldElement(1, 7)
    assert field_inv(FieldElement(3, 7)) == FieldElement(5, 7)
    assert field_mul(FieldElement(6, 7), FieldElement(6, 7)).value == 1


def test_inverse_table_all_primes():
    for q in (2, 3, 5, 7, 11, 13, 31):
        for a in range(1, q):
            assert a * inv_mod(a, q) % q == 1


def test_zero_has_no_inverse():
    with pytest.raises(ZeroDivisionError):
        inv_mod(0, 7)


def test_composite_modulus_rejected():
    with pytest.raises(FieldError, match="not prime"):
        FieldElement(1, 8)
    with pytest.raises(FieldError):
        Polynomial(2, 9, [((1, 0), 1)])


def test_mixed_modulus_rejected():
    with pytest.raises(FieldError):
        field_add(FieldElement(1, 5), FieldElement(1, 7))
    a = Polynomial.variable(0, 2, 5)
    b = Polynomial.variable(0, 2, 7)
    with pytest.raises(RingMismatchError):
        a + b


def test_order_examples():
    # x0 x1^2 vs x0^2: lex puts x0^2 higher; grevlex the cubic
    assert compare((1, 2), (2, 0), LEX) == -1
    assert compare((1, 2), (2, 0), GREVLEX) == 1
    # grevlex ties on degree break on the last variable
    assert compare((1, 1, 0), (1, 0, 1), GREVLEX) == 1
    assert compare((0, 0), (0, 0), LEX) == 0


def test_orders_are_total_and_multiplicative():
    monos = monomials_up_to(3, 3)
    for order in (LEX, GREVLEX):
        ranked = sorted(monos, key=order.key)
        for a, b in zip(ranked, ranked[1:]):
            assert compare(a, b, order) == -1
        for a, b in itertools.product(monos[:10], monos[:10]):
            c = (1, 0, 2)
            ac = tuple(x + y for x, y in zip(a, c))
            bc = tuple(x + y for x, y in zip(b, c))
            assert compare(a, b, order) == compare(ac, bc, order)
        assert min(monos, key=order.key) == (0, 0, 0)


def test_square_expansion():
    x = Polynomial.variable(0, 2, 7)
    one = Polynomial.constant(1, 2, 7)
    f = (x + one) ** 2
    assert f.as_dict() == {(2, 0): 1, (1, 0): 2, (0, 0): 1}
    assert format_poly(f) == "1*x0^2 + 2*x0 + 1"


def test_frobenius_in_char_p():
    x = Polynomial.variable(0, 2, 7)
    y = Polynomial.variable(1, 2, 7)
    assert (x + y) ** 7 == x ** 7 + y ** 7


def test_count_monomials():
    assert count_monomials(5, 10) == 3003
    for n in range(1, 5):
        for d in range(0, 5):
            assert count_monomials(n, d) == len(monomials_up_to(n, d))


def test_monomial_helpers():
    assert monomial_divides((1, 0), (2, 3))
    assert not monomial_divides((0, 4), (2, 3))
    assert monomial_lcm((1, 5), (3, 2)) == (3, 5)


def test_ring_axioms(rng):
    for _ in range(50):
        f, g, h = (random_poly(rng, 3, 5, 3, 4) for _ in range(3))
        assert f + g == g + f
        assert f * g == g * f
        assert (f * g) * h == f * (g * h)
        assert f * (g + h) == f * g + f * h
        assert (f - f).is_zero()


def test_terms_sorted_and_canonical(rng):
    for order in (LEX, GREVLEX):
        f = random_poly(rng, 3, 7, 4, 8, order)
        keys = [order.key(m) for m, _ in f.terms]
        assert keys == sorted(keys, reverse=True)
        assert all(0 < c < 7 for _, c in f.terms)


def test_evaluate_is_homomorphism(rng):
    for _ in range(30):
        f, g = random_poly(rng, 2, 11, 3, 3), random_poly(rng, 2, 11, 3, 3)
        pt = [int(v) for v in rng.integers(0, 11, size=2)]
        assert (f * g).evaluate(pt) == f.evaluate(pt) * g.evaluate(pt) % 11


def test_text_round_trip(rng):
    for _ in range(100):
        f = random_poly(rng, 3, 7, 4, 5)
        assert parse_poly(format_poly(f), 3, 7) == f
    assert parse_poly("x0^2 - x1", 2, 7).as_dict() == {(2, 0): 1, (0, 1): 6}


def test_parse_errors():
    with pytest.raises(ValueError):
        parse_poly("x3", 2, 7)
    with pytest.raises(ValueError):
        parse_poly("", 2, 7)


def test_exponent_overflow():
    with pytest.raises(OverflowError):
        Polynomial(1, 7, [((64,), 1)])


def test_empty_system_rejected():
    with pytest.raises(ValueError):
        PolySystem(())
