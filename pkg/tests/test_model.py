import math

import pytest
import torch

from hatsolver import tensor as T
from hatsolver.datagen import GenConfig, generate_dataset
from hatsolver.ffpoly import parse_system
from hatsolver.model import (HATSolver, ModelConfig, cross_entropy,
                             exact_match, generate, make_batch, per_token_accuracy,
                             sample_metrics, support_match, teacher_forced_accuracy)
from hatsolver.tokenizer import Vocab, tokenize_system

from conftest import fd_rel_error, model_fd_error, unit_scale_tables


@pytest.fixture(scope="module")
def samples():
    return generate_dataset(GenConfig(n=2, max_degree_G=2, verify="never", seed=3), 6)


@pytest.fixture(scope="module")
def vocab():
    return Vocab(7, 10)


def small_model(vocab, levels=2, **kw):
    torch.manual_seed(0)
    max_tree = (128, 4) if levels == 2 else (6, 64, 4)
    cfg = ModelConfig(vocab_size=len(vocab), d_model=16, enc_layers=1, dec_layers=1,
                      levels=levels, dec_heads=2, ffn_mult=2, max_tree=max_tree,
                      max_out_len=40, **kw)
    return HATSolver(cfg)


def test_config_json_round_trip(vocab):
    cfg = small_model(vocab).cfg
    assert ModelConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, levels=3, max_tree=(4, 4))


def test_batch_invariants(samples, vocab):
    batch = make_batch(samples, vocab, 2)
    for row in batch.target.tolist():
        assert row[0] == vocab.bos_id
        trimmed = [t for t in row if t != vocab.pad_id]
        assert trimmed[-1] == vocab.eos_id
    assert batch.ids.shape[-1] == 4
    assert len(batch) == len(samples)
    with pytest.raises(ValueError, match="axis 0"):
        make_batch(samples, vocab, 2, pad_lengths=(2, 4))


@pytest.mark.parametrize("levels", [2, 3])
def test_encoder_memory_length(samples, vocab, levels):
    model = small_model(vocab, levels)
    batch = make_batch(samples, vocab, levels)
    mem, mem_mask = model.encode(batch.ids, batch.mask)
    assert mem.shape[1] == math.prod(batch.ids.shape[1:])
    assert torch.equal(mem_mask, batch.mask.reshape(len(batch), -1))
    logits = model(batch.ids, batch.mask, batch.target[:, :-1])
    assert logits.shape == (*batch.target[:, :-1].shape, len(vocab))


def test_zero_layer_encoder_is_passthrough(samples, vocab):
    torch.manual_seed(0)
    model = HATSolver(ModelConfig(vocab_size=len(vocab), d_model=8, enc_layers=0,
                                  dec_layers=1, dec_heads=2, max_tree=(128, 4)))
    batch = make_batch(samples[:2], vocab, 2)
    mem, _ = model.encode(batch.ids, batch.mask)
    expected = model.embed[batch.ids] + model.tree_pos(batch.ids.shape[1:])
    assert torch.equal(mem, expected.reshape(2, -1, 8))


def test_encoder_mask_independence(samples, vocab, f64):
    for memory in ("leaves", "leaves+summaries"):
        model = small_model(vocab, memory=memory).double()
        batch = make_batch(samples, vocab, 2)
        mem1, mm = model.encode(batch.ids, batch.mask)
        ids2 = batch.ids.clone()
        ids2[~batch.mask] = torch.randint(0, len(vocab), (int((~batch.mask).sum()),))
        mem2, _ = model.encode(ids2, batch.mask)
        assert torch.equal(mem1[mm], mem2[mm])


def test_cross_entropy_examples():
    V = 9
    targets = torch.tensor([[1, 4, 2]])
    mask = torch.ones(1, 3, dtype=torch.bool)
    assert math.isclose(float(cross_entropy(torch.zeros(1, 3, V), targets, mask)), math.log(V),
                        rel_tol=1e-6)
    onehot = torch.nn.functional.one_hot(targets, V).float() * 100
    assert float(cross_entropy(onehot, targets, mask)) < 1e-6
    with pytest.raises(ValueError):
        cross_entropy(torch.zeros(1, 3, V), targets, torch.zeros(1, 3, dtype=torch.bool))
    with pytest.raises(T.ShapeError):
        cross_entropy(torch.zeros(1, 2, V), targets, mask)


def test_cross_entropy_gradient():
    targets = torch.tensor([[1, 4, 0]])
    mask = torch.tensor([[True, True, False]])
    err = fd_rel_error(lambda x: cross_entropy(x, targets, mask), [torch.randn(1, 3, 5)])
    assert err <= 1e-7


def test_generate_forced_and_deterministic(samples, vocab):
    model = small_model(vocab)
    batch = make_batch(samples[:2], vocab, 2)
    chosen = list(batch.target[0].tolist())
    chosen = chosen[:chosen.index(vocab.eos_id) + 1]

    def hook(step, logits):
        forced = torch.full_like(logits, -1e9)
        forced[:, chosen[step + 1]] = 0.0
        return forced

    gen = generate(model, batch.ids, batch.mask, logits_hook=hook)
    assert gen.sequences[0] == chosen
    assert gen.truncated == [False, False]
    a = generate(model, batch.ids, batch.mask, max_len=6)
    b = generate(model, batch.ids, batch.mask, max_len=6)
    assert a.sequences == b.sequences
    assert all(s[0] == vocab.bos_id for s in a.sequences)


def test_generate_flags_truncation(samples, vocab):
    model = small_model(vocab)
    batch = make_batch(samples[:1], vocab, 2)
    never_eos = lambda step, logits: logits.index_fill(-1, torch.tensor([vocab.eos_id]), -1e9)
    gen = generate(model, batch.ids, batch.mask, max_len=5, logits_hook=never_eos)
    assert gen.truncated == [True]
    assert len(gen.sequences[0]) == 5


def test_metric_examples(vocab):
    gold = parse_system(["x0 + 1"], 2, 7)
    pred = parse_system(["x0 + 2"], 2, 7)
    gold_ids = tokenize_system(gold, vocab, eos=True).ids
    same = sample_metrics(gold_ids, gold, vocab, 2)
    assert same == {"exact": 1.0, "support": 1.0, "per_token": 1.0}
    pred_ids = tokenize_system(pred, vocab, eos=True).ids
    m = sample_metrics(pred_ids, gold, vocab, 2)
    assert m["exact"] == 0.0 and m["support"] == 1.0 and m["per_token"] < 1.0
    # missing the final token of a length-T target scores (T-1)/T
    T_len = len(gold_ids) - 1
    assert per_token_accuracy(gold_ids[:-1], gold_ids, vocab) == (T_len - 1) / T_len


def test_unparseable_prediction(vocab):
    gold = parse_system(["x0 + 1"], 2, 7)
    bad = [vocab.bos_id, vocab.plus_id, vocab.eos_id]
    m = sample_metrics(bad, gold, vocab, 2)
    assert m["exact"] == 0.0 and m["support"] == 0.0
    assert 0.0 <= m["per_token"] < 1.0


def test_exact_implies_support():
    a = parse_system(["2*x0 + 2", "x1"], 2, 7)
    b = parse_system(["x1", "x0 + 1"], 2, 7)
    assert exact_match(a, b) and support_match(a, b)


def test_full_model_gradient():
    with T.verification_mode():
        torch.manual_seed(0)
        cfg = ModelConfig(vocab_size=20, d_model=4, enc_layers=1, dec_layers=1,
                          dec_heads=2, ffn_mult=1, max_tree=(5, 4), max_out_len=8)
        model = unit_scale_tables(HATSolver(cfg))
        ids = torch.tensor([[[1, 5, 12, 13], [3, 6, 11, 12], [4, 7, 14, 11]]])
        mask = torch.tensor([[[1, 1, 1, 1], [1, 1, 1, 1], [0, 0, 0, 0]]]).bool()
        prefix = torch.tensor([[1, 5, 11, 12]])
        assert model_fd_error(model, (ids, mask, prefix)) <= 1e-7


def test_teacher_forced_accuracy_range(samples, vocab):
    model = small_model(vocab)
    acc = teacher_forced_accuracy(model, make_batch(samples, vocab, 2))
    assert 0.0 <= acc <= 1.0
