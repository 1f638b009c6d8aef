import math

import numpy as np
import pytest

from infra.exceptions import ValidationError, EmptyInputError
from domain.models import SymbolSpace, SynthParams, GeneticParams, CONTEXT_NAMES
from domain.dataset import synth_dataset, build_histogram
from domain.codes import HEVC_ANCHOR_SHAPE, CodeShape, code_set_preset
from domain.entropy import code_based_entropy, cell_code_costs
from domain.labels import Label, label_preset
from domain.scheme import preset_tests
from domain.anchors import anchor_hevc, derived_hevc_five_leaf
from domain.search import (
    SearchConfig, GeneticEngine, TreeSearch, CellTable, CellClusterSearch, exhaustive_tree_search,
    genetic_tree_search, derive_curve, genetic_cell_clustering, search_tree_from_scheme, count_leaves,
    tree_depth, serialize_tree, INFEASIBLE
)

FAST_GA = GeneticParams(population=16, children_per_parent=4, mutation_rate=0.05, iterations=60, seed=1)
ALT_SHAPE = CodeShape.parse("1+3+3+(7x32)")


def _config(hevc_space, **overrides):
    base = dict(
        test_set=preset_tests("hevc-anchor"),
        label_set=label_preset("hevc-basic", hevc_space),
        code_set=[HEVC_ANCHOR_SHAPE],
        max_leaves=5,
        max_depth=4,
        genetic=FAST_GA,
        workers=1,
    )
    base.update(overrides)
    return SearchConfig(**base)


# =============================================================================
# Configuration
# =============================================================================

def test_search_config_validation(hevc_space):
    with pytest.raises(ValidationError):
        _config(hevc_space, max_leaves=0)
    with pytest.raises(EmptyInputError):
        _config(hevc_space, code_set=[])
    with pytest.raises(EmptyInputError):
        _config(hevc_space, label_set=[])
    with pytest.raises(ValueError):
        GeneticParams(population=1)


def test_cell_table_drops_items_outside_histogram(hevc_hist_lu, hevc_space):
    labels = [Label.parse("L"), Label.parse("UL")]
    table = CellTable(hevc_hist_lu, hevc_space, labels, preset_tests("hevc-extended"), "dc")
    assert [str(l) for l in table.labels] == ["L"]
    assert all(set(t.contexts) <= {"L", "U"} for t in table.tests)


# =============================================================================
# Genetic engine
# =============================================================================

def test_genetic_engine_finds_integer_minimum():
    params = GeneticParams(population=6, children_per_parent=3, iterations=80, seed=2)
    engine = GeneticEngine(params, lambda x: float((x - 17) ** 2),
                           lambda x, rng: x + int(rng.integers(-3, 4)), key=lambda x: f"{x:+06d}")
    best, fit = engine.run([0, 100], np.random.default_rng(2))
    assert (best, fit) == (17, 0.0)
    assert all(b <= a for a, b in zip(engine.history, engine.history[1:]))


# =============================================================================
# Tree search
# =============================================================================

def test_exhaustive_beats_the_anchor(hevc_hist_lu, hevc_space):
    cfg = _config(hevc_space)
    search = TreeSearch(hevc_hist_lu, hevc_space, cfg)
    anchor_tree = search_tree_from_scheme(anchor_hevc(), search.tests)
    anchor_bits = anchor_hevc().evaluate(hevc_hist_lu).total_bits
    relabelled = search.fitness(anchor_tree)
    assert relabelled <= anchor_bits

    result = search.exhaustive()
    assert result.total_bits <= min(relabelled, anchor_bits)
    assert result.report.total_bits == result.total_bits
    assert count_leaves(result.tree) <= 5
    assert tree_depth(result.tree) <= 4
    result.scheme.validate()


def test_exhaustive_rejects_large_budgets(hevc_hist_lu, hevc_space):
    with pytest.raises(ValidationError):
        TreeSearch(hevc_hist_lu, hevc_space, _config(hevc_space, max_leaves=9)).exhaustive()


def test_empty_test_set_gives_single_leaf(hevc_hist_lu, hevc_space):
    scheme, report = exhaustive_tree_search(hevc_hist_lu, hevc_space, _config(hevc_space, test_set=[]))
    assert scheme.num_leaves == 1
    single = exhaustive_tree_search(hevc_hist_lu, hevc_space, _config(hevc_space, max_leaves=1))
    assert report.total_bits == single.total_bits


def test_genetic_matches_exhaustive_on_small_budget(hevc_hist_lu, hevc_space):
    cfg = _config(hevc_space, max_leaves=3, max_depth=2)
    exact = exhaustive_tree_search(hevc_hist_lu, hevc_space, cfg)
    found = genetic_tree_search(hevc_hist_lu, hevc_space, cfg)
    assert found.total_bits == exact.total_bits
    assert found.history[-1] == found.total_bits


def test_genetic_is_deterministic(hevc_hist_lu, hevc_space):
    cfg = _config(hevc_space, max_leaves=3, max_depth=2)
    a = genetic_tree_search(hevc_hist_lu, hevc_space, cfg)
    b = genetic_tree_search(hevc_hist_lu, hevc_space, cfg)
    assert a.scheme.hash() == b.scheme.hash()
    assert a.history == b.history


def test_zero_iterations_keeps_warm_start(hevc_hist_lu, hevc_space):
    cfg = _config(hevc_space, genetic=GeneticParams(iterations=0))
    search = TreeSearch(hevc_hist_lu, hevc_space, cfg)
    warm = search_tree_from_scheme(anchor_hevc(), search.tests)
    if search.fitness(warm) == INFEASIBLE:
        pytest.skip("synthetic data leaves an anchor leaf empty")
    result = search.genetic(warm)
    assert result.tree == warm
    assert serialize_tree(result.tree, search.tests) == serialize_tree(warm, search.tests)


def test_multi_code_never_loses_to_single_code(hevc_hist_lu, hevc_space):
    codes = [HEVC_ANCHOR_SHAPE, ALT_SHAPE]
    multi = exhaustive_tree_search(hevc_hist_lu, hevc_space, _config(hevc_space, code_set=codes, max_leaves=3))
    single = exhaustive_tree_search(hevc_hist_lu, hevc_space,
                                    _config(hevc_space, code_set=codes, max_leaves=3, multi_code=False))
    assert multi.total_bits <= single.total_bits
    assert len({leaf.shape for leaf in single.scheme.leaves}) == 1


def test_derive_curve_is_nonincreasing(hevc_hist_lu, hevc_space):
    results = derive_curve(hevc_hist_lu, hevc_space, _config(hevc_space), [3, 1, 2], method="exhaustive")
    bits = [r.total_bits for r in results]
    assert len(results) == 3
    assert all(b <= a for a, b in zip(bits, bits[1:]))
    assert all(r.scheme.num_leaves <= n for r, n in zip(results, (1, 2, 3)))


# =============================================================================
# Cell clustering
# =============================================================================

def test_single_cluster_equals_best_single_code(hevc_hist_lu, hevc_space):
    codes = code_set_preset(hevc_space, "tree")
    clustering, bits = genetic_cell_clustering(hevc_hist_lu, hevc_space, 1, codes, "perfect_labels",
                                               GeneticParams(population=4, iterations=3))
    expected = cell_code_costs(hevc_hist_lu, codes).sum(axis=0).min() / hevc_hist_lu.total
    assert bits == pytest.approx(expected)
    assert clustering.num_clusters == 1
    assert set(clustering.assignment.values()) == {0}


def test_one_cluster_per_cell_reaches_code_based_entropy(hevc_hist_lu, hevc_space):
    codes = [HEVC_ANCHOR_SHAPE, ALT_SHAPE]
    n = hevc_hist_lu.num_cells
    clustering, bits = genetic_cell_clustering(hevc_hist_lu, hevc_space, n, codes, "perfect_labels",
                                               GeneticParams(population=4, iterations=2))
    assert bits == pytest.approx(code_based_entropy(hevc_hist_lu, codes).bits_per_symbol)
    assert len(clustering.assignment) == n


def test_label_set_clustering_never_loses_to_one_cluster(hevc_hist_lu, hevc_space):
    labels = label_preset("hevc-basic", hevc_space)
    params = GeneticParams(population=6, iterations=10, seed=3)
    one, one_bits = genetic_cell_clustering(hevc_hist_lu, hevc_space, 1, [HEVC_ANCHOR_SHAPE], "label_set",
                                            params, labels)
    two, two_bits = genetic_cell_clustering(hevc_hist_lu, hevc_space, 2, [HEVC_ANCHOR_SHAPE], "label_set",
                                            params, labels)
    assert math.isfinite(one_bits)
    assert two_bits <= one_bits
    assert all(labelling is not None for labelling in two.labellings)
    assert sorted(set(two.assignment.values())) == list(range(two.num_clusters))


def test_clustering_rejects_bad_arguments(hevc_hist_lu, hevc_space):
    search = CellClusterSearch(hevc_hist_lu, hevc_space, [HEVC_ANCHOR_SHAPE])
    with pytest.raises(ValidationError):
        search.run(0, "perfect_labels", FAST_GA)
    with pytest.raises(ValidationError):
        search.run(2, "kmeans", FAST_GA)
    with pytest.raises(ValidationError):
        search.run(2, "label_set", FAST_GA)
    with pytest.raises(EmptyInputError):
        CellClusterSearch(hevc_hist_lu, hevc_space, [])


def test_assignment_vector_follows_histogram_keys(hevc_hist_lu, hevc_space):
    search = CellClusterSearch(hevc_hist_lu, hevc_space, [HEVC_ANCHOR_SHAPE, ALT_SHAPE])
    clustering, _ = search.run(3, "perfect_labels", GeneticParams(population=4, iterations=5))
    vector = search.assignment_vector(clustering)
    assert len(vector) == hevc_hist_lu.num_cells
    assert search.perfect_cost(vector, clustering.num_clusters) >= 0


# =============================================================================
# Acceptance-scale checks
# =============================================================================

HEVC_THREE_MPM_CODES = [s for s in code_set_preset(SymbolSpace.hevc(), "tree") if s.num_mpm == 3]
WIDE_GA = GeneticParams(population=32, children_per_parent=4, mutation_rate=0.05, iterations=300, seed=11)


@pytest.mark.slow
def test_genetic_matches_exhaustive_for_every_leaf_budget(hevc_hist_lu, hevc_space):
    cfg = _config(hevc_space, code_set=HEVC_THREE_MPM_CODES, max_depth=4, genetic=WIDE_GA)
    budgets = list(range(2, 9))
    found = derive_curve(hevc_hist_lu, hevc_space, cfg, budgets, method="genetic")
    for n, result in zip(budgets, found):
        exact = exhaustive_tree_search(hevc_hist_lu, hevc_space, _config(
            hevc_space, code_set=HEVC_THREE_MPM_CODES, max_leaves=n, max_depth=4))
        assert result.total_bits == exact.total_bits, f"{n} leaves"


@pytest.mark.slow
@pytest.mark.parametrize("seed", [3, 17])
@pytest.mark.parametrize("clusters", range(3, 9))
def test_multi_code_never_loses_at_any_cluster_count(seed, clusters, hevc_space):
    # 같은 데이터셋 위에서 단일/다중 코드 비교
    samples = synth_dataset(hevc_space, SynthParams(width=24, height=24, seed=seed))
    hist = build_histogram(samples, ("L", "U"), hevc_space)
    codes = [HEVC_ANCHOR_SHAPE, ALT_SHAPE, CodeShape.parse("2+2+2+(7x32)")]
    multi = exhaustive_tree_search(hist, hevc_space, _config(hevc_space, code_set=codes, max_leaves=clusters))
    single = exhaustive_tree_search(hist, hevc_space,
                                    _config(hevc_space, code_set=codes, max_leaves=clusters, multi_code=False))
    assert multi.total_bits <= single.total_bits


@pytest.mark.slow
def test_derived_five_leaf_schemes_beat_the_anchor(hevc_synth, hevc_hist_lu, hevc_space):
    full = build_histogram(hevc_synth, CONTEXT_NAMES, hevc_space)
    anchor = anchor_hevc().evaluate(full).bits_per_ipm
    assert derived_hevc_five_leaf().evaluate(full).bits_per_ipm < anchor

    cfg = _config(hevc_space, test_set=preset_tests("hevc-extended"),
                  label_set=label_preset("hevc-extended", hevc_space),
                  code_set=code_set_preset(hevc_space, "tree"), genetic=WIDE_GA)
    search = TreeSearch(hevc_hist_lu, hevc_space, cfg)
    result = search.genetic(search_tree_from_scheme(anchor_hevc(), search.tests))
    assert result.scheme.num_leaves <= 5
    assert result.report.bits_per_ipm < anchor_hevc().evaluate(hevc_hist_lu).bits_per_ipm
