import json
import math

import numpy as np
import pytest

from hatsolver.datagen import (DatasetFormatError, GenConfig, GenerationError,
                               SamplePair, backward_generate, dataset_stats,
                               generate_dataset, read_dataset, sample_rng,
                               sample_shape_basis, sample_unimodular, write_dataset)
from hatsolver.ffpoly import Polynomial, PolySystem, parse_poly
from hatsolver.groebner import (ShapeBasis, divide, inter_reduce, is_groebner,
                                is_shape_position, buchberger)


def test_config_validation():
    assert GenConfig(n=3).max_size_F == 5
    with pytest.raises(ValueError):
        GenConfig(n=2, density=0.0)
    with pytest.raises(ValueError):
        GenConfig(n=2, max_size_F=1)
    with pytest.raises(ValueError):
        GenConfig(n=2, q=6)


def test_shape_basis_example_is_shape_position():
    h = parse_poly("x1^2 + 3*x1 + 1", 2, 7)
    g = parse_poly("2*x1", 2, 7)
    assert is_shape_position(ShapeBasis(h, (g,)).expand()) is not None


def test_shape_basis_degrees():
    cfg = GenConfig(n=3, max_degree_G=3, degree_sampling="uniform")
    rng = np.random.default_rng(0)
    for _ in range(2000):
        G = sample_shape_basis(cfg, rng)
        assert G.h.lc == 1 and G.h.degree() >= 1
        assert all(g.degree() < G.h.degree() for g in G.g_list)


def test_unimodular_structure_and_density():
    cfg = GenConfig(n=2, density=0.3)
    rng = np.random.default_rng(1)
    nz = total = 0
    for _ in range(1000):
        U = sample_unimodular(4, 2, cfg, rng)
        a, b = U.offdiag_count()
        nz += a
        total += b
        for row in U.entries:
            for e in row:
                assert len(e) <= cfg.max_num_terms_F
                assert e.is_zero() or e.degree() <= cfg.max_degree_F
    # a nonzero draw can still cancel to zero, so allow a small downward bias
    sigma = math.sqrt(total * 0.3 * 0.7)
    assert abs(nz - 0.3 * total) <= 3 * sigma + 0.02 * total


def test_unimodular_shape_error():
    with pytest.raises(ValueError):
        sample_unimodular(1, 2, GenConfig(n=2), np.random.default_rng(0))


def test_tiny_density_square_is_identity():
    cfg = GenConfig(n=3, density=1e-12)
    U = sample_unimodular(3, 3, cfg, np.random.default_rng(0))
    assert U.offdiag_count()[0] == 0


def test_identity_attempts_are_rejected():
    cfg = GenConfig(n=2, max_degree_G=2)
    s = backward_generate(cfg, np.random.default_rng(0), force_identity_attempts=3)
    assert s.meta["attempts"] == 4
    assert not is_groebner(s.F)


def test_resample_budget_error():
    cfg = GenConfig(n=2, max_degree_G=2, max_attempts=2)
    with pytest.raises(GenerationError, match="max_attempts=2"):
        backward_generate(cfg, np.random.default_rng(0), force_identity_attempts=5)


def test_oracle_round_trip_n2():
    cfg = GenConfig(n=2, max_degree_G=2, verify="always")
    for s in generate_dataset(cfg, 100):
        gvec = s.G_system
        assert s.meta["oracle"] == "MATCH"
        assert list(inter_reduce(buchberger(s.F)).basis) == sorted(
            gvec, key=lambda p: p.order.key(p.lm), reverse=True)
        assert is_groebner(gvec) and not is_groebner(s.F)
        # ideal preservation both ways
        assert all(divide(f, list(gvec)).is_zero() for f in s.F)


def test_generation_is_deterministic():
    cfg = GenConfig(n=2, max_degree_G=2, seed=5)
    a = generate_dataset(cfg, 20)
    b = generate_dataset(cfg, 20)
    assert [x.to_json() for x in a] == [y.to_json() for y in b]
    # sample i does not depend on where the run starts
    c = generate_dataset(cfg, 5, start=15)
    assert [x.to_json() for x in a[15:]] == [y.to_json() for y in c]


def test_density_lowers_term_counts():
    mean = {}
    for rho in (0.2, 1.0):
        cfg = GenConfig(n=2, max_degree_G=2, density=rho, verify="never", seed=7)
        mean[rho] = np.mean([s.meta["total_terms"] for s in generate_dataset(cfg, 200)])
    assert mean[0.2] < mean[1.0]


def test_stats_example():
    x0 = Polynomial.variable(0, 2, 7)
    x1 = Polynomial.variable(1, 2, 7)
    one = Polynomial.constant(1, 2, 7)
    f1 = x0 + x1 + one
    f2 = x0 ** 2 + x1 ** 2 + x0 * x1 + x0 + x1
    G = ShapeBasis(Polynomial.variable(1, 2, 7), (Polynomial.zero(2, 7),))
    stats = dataset_stats([SamplePair(PolySystem((f1, f2)), G, {})])
    assert stats["terms_per_equation"]["max"] == 5
    assert stats["terms_per_equation"]["mean"] == 4
    assert stats["total_terms"]["mean"] == 8


def test_stats_pure_and_empty_error():
    cfg = GenConfig(n=3, max_degree_G=2, density=0.5, verify="never")
    samples = generate_dataset(cfg, 200)
    assert dataset_stats(samples) == dataset_stats(samples)
    with pytest.raises(ValueError):
        dataset_stats([])


def test_dataset_round_trip(tmp_path):
    cfg = GenConfig(n=2, max_degree_G=2, verify="never")
    samples = generate_dataset(cfg, 100)
    path = tmp_path / "d.jsonl"
    assert write_dataset(path, samples) == 100
    back = read_dataset(path)
    assert [s.to_json() for s in back] == [s.to_json() for s in samples]
    obj = json.loads(path.read_text().splitlines()[0])
    assert set(obj) >= {"n", "q", "rho", "F", "G", "meta"}


def test_empty_and_truncated_files(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_text("")
    assert read_dataset(empty) == []
    cfg = GenConfig(n=2, max_degree_G=2, verify="never")
    path = tmp_path / "t.jsonl"
    write_dataset(path, generate_dataset(cfg, 3))
    text = path.read_text()
    path.write_text(text[: len(text) - 20])
    with pytest.raises(DatasetFormatError, match="line 3"):
        read_dataset(path)


def test_sample_rng_streams_differ():
    assert sample_rng(0, 1).random() != sample_rng(0, 2).random()
