import itertools

import numpy as np
import pytest

from infra.exceptions import ValidationError
from domain.models import SymbolSpace, ContextTuple, GeneticParams, CONTEXT_NAMES
from domain.codes import CodeShape, HEVC_ANCHOR_SHAPE
from domain.dataset import build_histogram
from domain.labels import Label, DynamicList, dynamic_vocabulary, apply_unavailable_rule
from domain.scheme import Test, DynamicLeaf, preset_tests
from domain.anchors import anchor_hevc
from domain.dynlist import (
    resolve, ListCostModel, genetic_list_search, DynlistConfig, build_tree_dynlist, reoptimize_dynlist_scheme,
    MultipassTrainer, multipass_train
)

TINY = SymbolSpace(4)
TINY_VOCAB = (Label.parse("L"), Label.parse("U")) + tuple(Label.numeric(m) for m in range(4))
TINY_CODES = [CodeShape.parse("1+2+(3x2)"), CodeShape.parse("2+(2x3)")]
TINY_TESTS = [Test.parse("L==U"), Test.parse("L<2")]
TINY_GA = GeneticParams(population=16, children_per_parent=4, mutation_rate=0.1, iterations=150, seed=7)


def _hevc_vocab():
    return tuple(Label.parse(t) for t in ("L", "U", "L-1", "L+1")) + tuple(Label.numeric(m) for m in range(35))


def _hevc_config(**overrides):
    base = dict(
        test_set=preset_tests("dynlist"),
        vocabulary=_hevc_vocab(),
        code_set=[HEVC_ANCHOR_SHAPE, CodeShape.parse("1+3+3+(7x32)")],
        num_leaves=2,
        max_depth=2,
        genetic=GeneticParams(population=4, children_per_parent=2, iterations=4, seed=5),
        workers=1,
    )
    base.update(overrides)
    return DynlistConfig(**base)


# =============================================================================
# Resolve / cost model
# =============================================================================

def test_resolve_skips_unavailable_and_duplicates(hevc_space):
    dyn = DynamicList(dynamic_vocabulary(hevc_space), hevc_space)
    order = resolve(dyn, ContextTuple(l=10, u=26), hevc_space)
    assert sorted(order) == list(range(35))
    assert order[:3] == [10, 9, 11]
    assert resolve(dyn, ContextTuple(u=26), hevc_space)[0] == 26


def test_list_cost_matches_per_sample_resolution(make_samples):
    samples = make_samples(TINY, 120, seed=8)
    hist = build_histogram(samples, ("L", "U"), TINY)
    model = ListCostModel(hist, TINY_VOCAB, TINY_CODES, TINY)
    rng = np.random.default_rng(0)
    for _ in range(5):
        order = rng.permutation(len(TINY_VOCAB))
        dyn = DynamicList(tuple(TINY_VOCAB[i] for i in order), TINY)
        per_code = [0] * len(TINY_CODES)
        for s in samples:
            rank = resolve(dyn, s.ctx, TINY).index(s.ipm)
            for ci, shape in enumerate(TINY_CODES):
                per_code[ci] += int(shape.rank_lengths()[rank])
        assert model.bits(order) == min(per_code)
        assert model.index_histogram(order).sum() == len(samples)


def test_genetic_list_search_finds_best_permutation(make_samples):
    samples = make_samples(TINY, 200, seed=9)
    hist = build_histogram(samples, ("L", "U"), TINY)
    model = ListCostModel(hist, TINY_VOCAB, TINY_CODES, TINY)
    brute = min(model.bits(np.array(p)) for p in itertools.permutations(range(len(TINY_VOCAB))))
    result = genetic_list_search(hist, TINY_VOCAB, TINY_CODES, TINY_GA, TINY, workers=1)
    assert result.total_bits == brute
    assert result.cost == pytest.approx(brute / len(samples))
    dyn, shape, cost = result
    assert set(dyn.labels) == set(TINY_VOCAB)
    assert shape in TINY_CODES


def test_warm_start_must_cover_vocabulary(make_samples):
    hist = build_histogram(make_samples(TINY, 20, seed=1), ("L", "U"), TINY)
    partial = DynamicList(TINY_VOCAB[1:], TINY)
    with pytest.raises(ValidationError):
        genetic_list_search(hist, TINY_VOCAB, TINY_CODES, TINY_GA, TINY, warm_start=partial, workers=1)


def test_zero_iterations_never_worse_than_warm_start(make_samples):
    hist = build_histogram(make_samples(TINY, 80, seed=2), ("L", "U"), TINY)
    warm = DynamicList(TINY_VOCAB, TINY)
    model = ListCostModel(hist, TINY_VOCAB, TINY_CODES, TINY)
    result = genetic_list_search(hist, TINY_VOCAB, TINY_CODES, GeneticParams(iterations=0), TINY,
                                 warm_start=warm, workers=1)
    assert result.total_bits <= model.bits(np.arange(len(TINY_VOCAB)))


# =============================================================================
# Tree + dynamic lists
# =============================================================================

def test_dynlist_config_validation():
    with pytest.raises(ValidationError):
        DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=0)
    with pytest.raises(ValidationError):
        DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=9)


def test_single_leaf_matches_list_search(make_samples):
    hist = build_histogram(make_samples(TINY, 150, seed=3), ("L", "U"), TINY)
    config = DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=1, genetic=TINY_GA, workers=1)
    scheme = build_tree_dynlist(hist, TINY, config)
    assert scheme.num_leaves == 1
    assert scheme.name == "dynlist-1"
    expected = genetic_list_search(hist, TINY_VOCAB, TINY_CODES, TINY_GA, TINY, workers=1)
    assert scheme.evaluate(hist).total_bits == expected.total_bits


def test_two_leaves_never_worse_than_one(make_samples):
    hist = build_histogram(make_samples(TINY, 300, seed=4), ("L", "U"), TINY)
    one = build_tree_dynlist(hist, TINY, DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=1,
                                                        genetic=TINY_GA, workers=1))
    two = build_tree_dynlist(hist, TINY, DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=2,
                                                        max_depth=1, genetic=TINY_GA, workers=1))
    assert two.num_leaves <= 2
    assert all(isinstance(leaf, DynamicLeaf) for leaf in two.leaves)
    assert two.evaluate(hist).total_bits <= one.evaluate(hist).total_bits


def test_reoptimize_keeps_structure(make_samples):
    hist = build_histogram(make_samples(TINY, 300, seed=6), ("L", "U"), TINY)
    config = DynlistConfig(TINY_TESTS, TINY_VOCAB, TINY_CODES, num_leaves=2, max_depth=1, genetic=TINY_GA,
                           workers=1)
    scheme = build_tree_dynlist(hist, TINY, config)
    again = reoptimize_dynlist_scheme(scheme, hist, config)
    assert again.num_leaves == scheme.num_leaves
    assert again.name.endswith("+reopt")
    assert again.evaluate(hist).total_bits <= scheme.evaluate(hist).total_bits
    assert reoptimize_dynlist_scheme(anchor_hevc(), hist, config) is None


# =============================================================================
# Multipass training
# =============================================================================

def test_reselect_without_rate_keeps_rd_choice(hevc_synth_rd, hevc_space):
    trainer = MultipassTrainer(hevc_space, _hevc_config(), lam=0.0)
    data, flipped = trainer.reselect(anchor_hevc(), hevc_synth_rd)
    assert flipped == 0
    assert [s.ipm for s in data] == [s.ipm for s in hevc_synth_rd]


def test_reselect_with_large_rate_picks_cheapest_mode(hevc_synth_rd, hevc_space):
    trainer = MultipassTrainer(hevc_space, _hevc_config(), lam=1e9)
    scheme = anchor_hevc()
    data, _ = trainer.reselect(scheme, hevc_synth_rd)
    inverse, table = trainer.mode_bits(scheme, hevc_synth_rd)
    for i, (old, new) in enumerate(zip(hevc_synth_rd, data)):
        row = table[inverse[i]]
        assert row[new.ipm] == min(row[m] for m, _ in old.rd_candidates)


def test_multipass_never_regresses(hevc_synth_rd, hevc_space):
    trainer = MultipassTrainer(hevc_space, _hevc_config(), lam=0.5)
    reports = trainer.train(hevc_synth_rd, anchor_hevc(), passes=2)
    assert [r.pass_index for r in reports] == [1, 2]
    assert reports[0].anchor_cost == pytest.approx(reports[0].ref_cost)
    for r in reports:
        assert r.new_cost <= r.ref_cost + 1e-12
        assert r.delta <= 1e-12
        if r.retained_reference:
            assert r.new_cost == r.ref_cost
    hist = build_histogram(hevc_synth_rd, CONTEXT_NAMES, hevc_space)
    trainer.final_scheme.evaluate(hist)


def test_multipass_uses_sample_provider(hevc_synth_rd, hevc_space):
    seen = []

    def provider(p):
        seen.append(p)
        return hevc_synth_rd

    reports = multipass_train([], anchor_hevc(), 2, 0.5, _hevc_config(num_leaves=1), hevc_space, provider)
    assert seen == [1, 2]
    assert len(reports) == 2


def test_multipass_rejects_bad_input(hevc_synth, hevc_synth_rd, hevc_space):
    with pytest.raises(ValidationError):
        MultipassTrainer(hevc_space, _hevc_config(), lam=-1.0)
    with pytest.raises(ValidationError):
        multipass_train(hevc_synth[:50], anchor_hevc(), 1, 0.5, _hevc_config(), hevc_space)
    with pytest.raises(ValidationError):
        multipass_train(hevc_synth_rd, anchor_hevc(), 0, 0.5, _hevc_config(), hevc_space)


# =============================================================================
# Acceptance-scale checks
# =============================================================================

@pytest.mark.slow
@pytest.mark.parametrize("space,rule", [(SymbolSpace.hevc(), "dc"), (SymbolSpace.jem(), "keep")], ids=["hevc", "jem"])
def test_resolution_is_always_a_permutation(space, rule):
    rng = np.random.default_rng(space.k)
    vocabulary = dynamic_vocabulary(space)
    for _ in range(10):
        dyn = DynamicList([vocabulary[i] for i in rng.permutation(len(vocabulary))], space)
        ctx = rng.integers(-1, space.k, size=(10_000, len(CONTEXT_NAMES)))
        columns = apply_unavailable_rule({name: ctx[:, i] for i, name in enumerate(CONTEXT_NAMES)}, rule)
        ranks = dyn.ranks(columns, space)
        assert (np.sort(ranks, axis=1) == np.arange(space.k)).all()
        first = ContextTuple(*(int(v) for v in ctx[0]))
        assert resolve(dyn, first, space, rule) == [int(m) for m in np.argsort(ranks[0])]


@pytest.mark.slow
def test_list_search_matches_brute_force_over_eight_labels(make_samples):
    space = SymbolSpace(6)
    vocabulary = (Label.parse("L"), Label.parse("U")) + tuple(Label.numeric(m) for m in range(6))
    codes = [CodeShape.parse("1+2+(4x4)"), CodeShape.parse("2+2+(3x4)")]
    samples = make_samples(space, 400, seed=21)
    hist = build_histogram(samples, ("L", "U"), space)
    model = ListCostModel(hist, vocabulary, codes, space)
    brute = min(model.bits(np.array(p)) for p in itertools.permutations(range(len(vocabulary))))
    params = GeneticParams(population=32, children_per_parent=4, mutation_rate=0.1, iterations=400, seed=3)
    result = genetic_list_search(hist, vocabulary, codes, params, space, workers=1)
    assert result.total_bits == brute


@pytest.mark.slow
def test_multipass_improvements_shrink_after_second_pass(hevc_synth_rd, hevc_space):
    config = _hevc_config(genetic=GeneticParams(population=8, children_per_parent=2, iterations=40, seed=5))
    reports = MultipassTrainer(hevc_space, config, lam=0.5).train(hevc_synth_rd, anchor_hevc(), passes=4)
    assert all(r.new_cost <= r.ref_cost + 1e-12 for r in reports)
    later = [abs(r.delta) for r in reports[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(later, later[1:]))
