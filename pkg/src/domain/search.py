import math
import hashlib
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Dict, Optional, Sequence, Tuple, Callable, Generic, TypeVar, Any

import numpy as np

from infra.config import ConfigLoader
from infra.exceptions import ValidationError, EmptyInputError
from domain.models import SymbolSpace, GeneticParams, CostReport, CONTEXT_NAMES
from domain.codes import CodeShape
from domain.dataset import ConditionalHistogram
from domain.entropy import cell_code_costs
from domain.labels import (
    Label, LabelSearchResult, GreedyLabelSearch, LeafStatistics, apply_unavailable_rule,
    evaluate_labels, leaf_statistics
)
from domain.scheme import Scheme, Node, StaticLeaf, Test, Tree, context_universe

logger = logging.getLogger("System")

INFEASIBLE = math.inf

# (test index, false subtree, true subtree) | None (leaf)
SearchTree = Optional[Tuple[int, Any, Any]]

I = TypeVar("I")


# =============================================================================
# Configuration
# =============================================================================

@dataclass
class SearchConfig:
    test_set: Sequence[Test]
    label_set: Sequence[Label]
    code_set: Sequence[CodeShape]
    max_leaves: int = 5
    max_depth: int = 4
    multi_code: bool = True
    genetic: GeneticParams = field(default_factory=GeneticParams)
    unavailable_rule: str = "dc"
    workers: int = 0  # 0 이면 IPM_WORKERS
    universe_cap: int = 50000

    def __post_init__(self):
        if self.max_leaves < 1 or self.max_depth < 0:
            raise ValidationError("max_leaves >= 1 and max_depth >= 0 required")
        if not self.code_set:
            raise EmptyInputError("code set")
        if not self.label_set:
            raise EmptyInputError("label set")

    @property
    def worker_count(self) -> int:
        return self.workers or ConfigLoader.workers()


# =============================================================================
# Genetic engine
# =============================================================================

class GeneticEngine(Generic[I]):
    """
    [SEARCH-GA] 엘리트 보존 + 무작위 생존자 선택의 (mu + lambda) 루프.
    부모마다 children_per_parent 개의 자식을 변이로 만들고, 자식 적합도는 병렬 평가.
    동률은 key(개체) 사전순으로 정리합니다.
    """

    def __init__(self, params: GeneticParams, fitness: Callable[[I], float],
                 mutate: Callable[[I, np.random.Generator], I], key: Callable[[I], str],
                 workers: int = 1, prefix: str = "[Search:GA]"):
        self.params = params
        self.fitness = fitness
        self.mutate = mutate
        self.key = key
        self.workers = max(1, workers)
        self._prefix = prefix
        self.history: List[float] = []

    def _score(self, individuals: List[I], pool: Optional[ThreadPoolExecutor]) -> List[float]:
        if pool is None:
            return [self.fitness(ind) for ind in individuals]
        return list(pool.map(self.fitness, individuals))

    def run(self, initial: List[I], rng: np.random.Generator) -> Tuple[I, float]:
        method_prefix = f"{self._prefix}:run"
        params = self.params
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else None
        try:
            scored = self._unique(list(zip(initial, self._score(initial, pool))))
            scored.sort(key=lambda p: (p[1], self.key(p[0])))
            population = scored[:params.population]
            best = population[0]
            self.history = [best[1]]

            for generation in range(params.iterations):
                children = [self.mutate(parent, rng)
                            for parent, _ in population for _ in range(params.children_per_parent)]
                merged = self._unique(population + list(zip(children, self._score(children, pool))))
                merged.sort(key=lambda p: (p[1], self.key(p[0])))
                population = self._select(merged, rng)
                if (population[0][1], self.key(population[0][0])) < (best[1], self.key(best[0])):
                    best = population[0]
                self.history.append(best[1])
                if generation % 200 == 0:
                    logger.debug(f"{method_prefix} gen={generation} best={best[1]}")
        finally:
            if pool is not None:
                pool.shutdown()
        return best

    def _unique(self, scored: List[Tuple[I, float]]) -> List[Tuple[I, float]]:
        seen = set()
        out = []
        for ind, fit in scored:
            k = self.key(ind)
            if k not in seen:
                seen.add(k)
                out.append((ind, fit))
        return out

    def _select(self, merged: List[Tuple[I, float]], rng: np.random.Generator) -> List[Tuple[I, float]]:
        size = self.params.population
        if len(merged) <= size:
            return merged
        survivors = min(self.params.survivors, size - 1)
        elite = merged[:size - survivors]
        rest = merged[size - survivors:]
        picks = sorted(rng.choice(len(rest), size=min(survivors, len(rest)), replace=False))
        chosen = elite + [rest[i] for i in picks]
        chosen.sort(key=lambda p: (p[1], self.key(p[0])))
        return chosen


# =============================================================================
# Cell table & leaf evaluator
# =============================================================================

class CellTable:
    """
    관측 셀(비용)과 검증 셀(라벨 유효성)의 라벨 값/테스트 결과 표.
    검증 셀 = 참조 컨텍스트의 모든 값 조합, 너무 크면 관측 셀.
    """

    def __init__(self, hist: ConditionalHistogram, space: SymbolSpace, labels: Sequence[Label],
                 tests: Sequence[Test], rule: str, universe_cap: Optional[int] = 50000):
        self._prefix = "[Search:CellTable]"
        self.hist = hist
        self.space = space
        self.rule = rule
        known = set(hist.context_set)
        self.labels = [l for l in labels if set(l.contexts) <= known]
        self.tests = [t for t in tests if set(t.contexts) <= known]
        dropped = (len(labels) - len(self.labels), len(tests) - len(self.tests))
        if any(dropped):
            logger.warning(f"{self._prefix} dropped {dropped[0]} labels / {dropped[1]} tests "
                           f"referencing contexts outside {hist.context_set}")
        used = {c for item in list(self.labels) + list(self.tests) for c in item.contexts}
        self.obs = apply_unavailable_rule({n: hist.column(n) for n in CONTEXT_NAMES}, rule)
        self.counts = hist.counts
        univ = None if universe_cap is None else context_universe(sorted(used), space, rule, universe_cap)
        if universe_cap is None:
            self.univ = self.obs  # 관측 셀만 검증
        elif univ is None:
            logger.warning(f"{self._prefix} context universe over {sorted(used)} exceeds {universe_cap} cells; "
                           f"label validity is checked on observed cells only")
            self.univ = self.obs
        else:
            self.univ = apply_unavailable_rule(univ, rule)
        self.obs_values = evaluate_labels(self.labels, self.obs, space)
        self.univ_values = evaluate_labels(self.labels, self.univ, space)
        self.obs_tests = self._test_table(self.obs)
        self.univ_tests = self._test_table(self.univ)

    def _test_table(self, columns) -> np.ndarray:
        n = len(columns["L"])
        if not self.tests:
            return np.zeros((n, 0), dtype=bool)
        return np.stack([t.evaluate_columns(columns) for t in self.tests], axis=1)

    @property
    def n_obs(self) -> int:
        return self.obs_values.shape[0]

    @property
    def n_univ(self) -> int:
        return self.univ_values.shape[0]

    def root(self) -> Tuple[np.ndarray, np.ndarray]:
        return np.ones(self.n_obs, dtype=bool), np.ones(self.n_univ, dtype=bool)

    def split(self, obs: np.ndarray, univ: np.ndarray, test: int):
        o, u = self.obs_tests[:, test], self.univ_tests[:, test]
        return (obs & ~o, univ & ~u), (obs & o, univ & u)

    def samples(self, obs: np.ndarray) -> int:
        return int(self.counts[obs].sum())


def _mask_key(obs: np.ndarray, univ: np.ndarray) -> bytes:
    return hashlib.sha1(np.packbits(obs).tobytes() + b"|" + np.packbits(univ).tobytes()).digest()


class LeafEvaluator:
    """(leaf 셀 집합, 코드) -> greedy 라벨 탐색 결과. 셀 집합의 내용 해시로 캐시"""

    def __init__(self, table: CellTable, codes: Sequence[CodeShape], max_nodes: int = 200000):
        self.table = table
        self.codes = list(codes)
        self.greedy = GreedyLabelSearch(max_nodes)
        self._stats: Dict[bytes, Optional[LeafStatistics]] = {}
        self._results: Dict[Tuple[bytes, int], Optional[LabelSearchResult]] = {}
        self._lock = threading.Lock()

    def stats(self, key: bytes, obs: np.ndarray, univ: np.ndarray) -> Optional[LeafStatistics]:
        if key in self._stats:
            return self._stats[key]
        if self.table.samples(obs) == 0:
            stats = None  # dead leaf
        else:
            t = self.table
            stats = leaf_statistics(t.obs_values[obs], t.counts[obs], t.univ_values[univ])
        with self._lock:
            self._stats[key] = stats
        return stats

    def solve(self, obs: np.ndarray, univ: np.ndarray, code: int,
              key: Optional[bytes] = None) -> Optional[LabelSearchResult]:
        key = key or _mask_key(obs, univ)
        cache_key = (key, code)
        if cache_key in self._results:
            return self._results[cache_key]
        stats = self.stats(key, obs, univ)
        result = None
        if stats is not None:
            result = self.greedy.search(stats, self.table.labels, self.codes[code])
        with self._lock:
            self._results[cache_key] = result
        return result

    def best(self, obs: np.ndarray, univ: np.ndarray,
             codes: Optional[Sequence[int]] = None) -> Optional[Tuple[int, int, LabelSearchResult]]:
        """(bits, code index, 결과) 최소; 동률은 코드 인덱스 순"""
        key = _mask_key(obs, univ)
        found = None
        for code in (range(len(self.codes)) if codes is None else codes):
            result = self.solve(obs, univ, code, key)
            if result is not None and (found is None or result.total_bits < found[0]):
                found = (result.total_bits, code, result)
        return found


# =============================================================================
# Search-tree helpers
# =============================================================================

def count_leaves(tree: SearchTree) -> int:
    return 1 if tree is None else count_leaves(tree[1]) + count_leaves(tree[2])


def tree_depth(tree: SearchTree) -> int:
    return 0 if tree is None else 1 + max(tree_depth(tree[1]), tree_depth(tree[2]))


def leaf_masks(tree: SearchTree, table: CellTable) -> List[Tuple[np.ndarray, np.ndarray]]:
    out = []

    def rec(node: SearchTree, obs: np.ndarray, univ: np.ndarray):
        if node is None:
            out.append((obs, univ))
            return
        (fo, fu), (to, tu) = table.split(obs, univ, node[0])
        rec(node[1], fo, fu)
        rec(node[2], to, tu)

    rec(tree, *table.root())
    return out


def tree_paths(tree: SearchTree, path: Tuple[int, ...] = ()) -> List[Tuple[Tuple[int, ...], bool]]:
    """(경로, 내부 노드 여부); 경로 원소 1 = false 가지, 2 = true 가지"""
    if tree is None:
        return [(path, False)]
    return [(path, True)] + tree_paths(tree[1], path + (1,)) + tree_paths(tree[2], path + (2,))


def subtree_at(tree: SearchTree, path: Tuple[int, ...]) -> SearchTree:
    for step in path:
        tree = tree[step]
    return tree


def replace_at(tree: SearchTree, path: Tuple[int, ...], new: SearchTree) -> SearchTree:
    if not path:
        return new
    node = list(tree)
    node[path[0]] = replace_at(tree[path[0]], path[1:], new)
    return tuple(node)


def serialize_tree(tree: SearchTree, tests: Sequence[Test]) -> str:
    if tree is None:
        return "*"
    return f"({tests[tree[0]]}?{serialize_tree(tree[1], tests)}:{serialize_tree(tree[2], tests)})"


def search_tree_from_scheme(scheme: Scheme, tests: Sequence[Test]) -> SearchTree:
    """Scheme 트리를 test 인덱스 트리로 변환 (test 가 tests 에 없으면 ValidationError)"""
    index = {str(t): i for i, t in enumerate(tests)}

    def rec(node: Tree) -> SearchTree:
        if isinstance(node, Node):
            if str(node.test) not in index:
                raise ValidationError(f"test {node.test} not in the search test set")
            return (index[str(node.test)], rec(node.false), rec(node.true))
        return None

    return rec(scheme.tree)


# =============================================================================
# Tree search
# =============================================================================

@dataclass
class TreeSearchResult:
    scheme: Scheme
    report: CostReport
    tree: SearchTree
    total_bits: int
    history: List[float] = field(default_factory=list)

    def __iter__(self):
        # scheme, report = exhaustive_tree_search(...)
        return iter((self.scheme, self.report))


class TreeSearch:
    """
    [SEARCH-TREE] 결정 트리 + leaf 라벨 목록 + 코드 탐색.
    leaf 비용은 greedy 라벨 탐색, leaf 가 빈(관측 샘플 0) 트리는 불가능한 후보.
    """

    def __init__(self, hist: ConditionalHistogram, space: SymbolSpace, config: SearchConfig):
        self.hist = hist
        self.space = space
        self.config = config
        self.table = CellTable(hist, space, config.label_set, config.test_set,
                               config.unavailable_rule, config.universe_cap)
        self.tests = self.table.tests
        self.evaluator = LeafEvaluator(self.table, config.code_set)
        self._prefix = "[Search:Tree]"
        self._memo: Dict[Tuple[bytes, int, int, int], Optional[Tuple[int, str, SearchTree]]] = {}

    # ------------------------------------------------------------------
    # 공통
    # ------------------------------------------------------------------
    def _code_choices(self) -> List[Optional[int]]:
        return [None] if self.config.multi_code else list(range(len(self.config.code_set)))

    def tree_cost(self, tree: SearchTree, code: Optional[int] = None) -> float:
        """code=None: leaf 마다 최적 코드, 아니면 모든 leaf 가 같은 코드"""
        total = 0
        for obs, univ in leaf_masks(tree, self.table):
            found = self.evaluator.best(obs, univ, None if code is None else [code])
            if found is None:
                return INFEASIBLE
            total += found[0]
        return total

    def fitness(self, tree: SearchTree) -> float:
        if count_leaves(tree) > self.config.max_leaves or tree_depth(tree) > self.config.max_depth:
            return INFEASIBLE
        return min(self.tree_cost(tree, code) for code in self._code_choices())

    def _best_code(self, tree: SearchTree) -> Optional[int]:
        if self.config.multi_code:
            return None
        costs = [(self.tree_cost(tree, c), c) for c in range(len(self.config.code_set))]
        return min(costs)[1]

    def build_scheme(self, tree: SearchTree, code: Optional[int] = None, name: str = "") -> Scheme:
        counter = [0]
        masks = leaf_masks(tree, self.table)

        def rec(node: SearchTree) -> Tree:
            if node is None:
                obs, univ = masks[counter[0]]
                counter[0] += 1
                found = self.evaluator.best(obs, univ, None if code is None else [code])
                if found is None:
                    raise ValidationError("cannot build a scheme from an infeasible tree")
                bits, ci, result = found
                return StaticLeaf(result.labelling, self.config.code_set[ci])
            false = rec(node[1])
            true = rec(node[2])
            return Node(self.tests[node[0]], true, false)

        return Scheme(self.space, rec(tree), self.config.unavailable_rule, name)

    def _finish(self, tree: SearchTree, bits: float, history: List[float], name: str) -> TreeSearchResult:
        scheme = self.build_scheme(tree, self._best_code(tree), name)
        report = scheme.evaluate(self.hist)
        if report.total_bits != bits:
            logger.warning(f"{self._prefix} search cost {bits} differs from evaluated {report.total_bits}")
        return TreeSearchResult(scheme, report, tree, int(report.total_bits), history)

    # ------------------------------------------------------------------
    # 전수 탐색 (메모이제이션 DP)
    # ------------------------------------------------------------------
    def exhaustive(self) -> TreeSearchResult:
        method_prefix = f"{self._prefix}:exhaustive"
        cfg = self.config
        if cfg.max_leaves > 8 or cfg.max_depth > 4:
            raise ValidationError("exhaustive search is limited to 8 leaves and depth 4")
        best: Optional[Tuple[int, str, SearchTree]] = None
        for code in self._code_choices():
            found = self._dp(*self.table.root(), cfg.max_leaves, cfg.max_depth, -1 if code is None else code)
            if found is not None and (best is None or found[:2] < best[:2]):
                best = found
        if best is None:
            raise ValidationError("no feasible tree: even a single leaf has no valid labelling")
        logger.info(f"{method_prefix} leaves<={cfg.max_leaves} depth<={cfg.max_depth} "
                    f"bits={best[0]} states={len(self._memo)}")
        return self._finish(best[2], best[0], [], f"exhaustive-{cfg.max_leaves}")

    def _leaf_option(self, obs, univ, code: int) -> Optional[Tuple[int, str, SearchTree]]:
        found = self.evaluator.best(obs, univ, None if code < 0 else [code])
        if found is None:
            return None
        bits, ci, result = found
        labels = ",".join(str(l) for l in result.labelling)
        return bits, f"[{labels}|{self.config.code_set[ci]}]", None

    def _dp(self, obs, univ, leaves: int, depth: int, code: int) -> Optional[Tuple[int, str, SearchTree]]:
        leaves = min(leaves, 2 ** depth)
        memo_key = (_mask_key(obs, univ), leaves, depth, code)
        if memo_key in self._memo:
            return self._memo[memo_key]
        best = self._leaf_option(obs, univ, code)
        if leaves >= 2 and depth >= 1:
            for t in range(len(self.tests)):
                (fo, fu), (to, tu) = self.table.split(obs, univ, t)
                if self.table.samples(fo) == 0 or self.table.samples(to) == 0:
                    continue
                for n_false in range(1, leaves):
                    left = self._dp(fo, fu, n_false, depth - 1, code)
                    if left is None:
                        continue
                    right = self._dp(to, tu, leaves - n_false, depth - 1, code)
                    if right is None:
                        continue
                    cand = (left[0] + right[0], f"({self.tests[t]}?{left[1]}:{right[1]})", (t, left[2], right[2]))
                    if best is None or cand[:2] < best[:2]:
                        best = cand
        self._memo[memo_key] = best
        return best

    # ------------------------------------------------------------------
    # 유전 탐색
    # ------------------------------------------------------------------
    def _random_tree(self, rng: np.random.Generator, leaves: int, depth: int) -> SearchTree:
        if leaves < 2 or depth <= 0 or not self.tests or rng.random() < 0.25:
            return None
        t = int(rng.integers(len(self.tests)))
        n_false = int(rng.integers(1, leaves))
        return (t, self._random_tree(rng, n_false, depth - 1), self._random_tree(rng, leaves - n_false, depth - 1))

    def mutate(self, tree: SearchTree, rng: np.random.Generator) -> SearchTree:
        cfg = self.config
        rounds = 1 + int(rng.binomial(len(tree_paths(tree)), cfg.genetic.mutation_rate))
        for _ in range(rounds):
            paths = tree_paths(tree)
            internal = [p for p, is_node in paths if is_node]
            leaves = [p for p, is_node in paths if not is_node]
            op = int(rng.integers(4))
            if op == 0 and internal and self.tests:
                path = internal[int(rng.integers(len(internal)))]
                node = subtree_at(tree, path)
                tree = replace_at(tree, path, (int(rng.integers(len(self.tests))), node[1], node[2]))
            elif op == 1:
                path, _ = paths[int(rng.integers(len(paths)))]
                sub = subtree_at(tree, path)
                budget = cfg.max_leaves - (count_leaves(tree) - count_leaves(sub))
                tree = replace_at(tree, path, self._random_tree(rng, budget, cfg.max_depth - len(path)))
            elif op == 2 and self.tests and count_leaves(tree) < cfg.max_leaves:
                open_leaves = [p for p in leaves if len(p) < cfg.max_depth]
                if open_leaves:
                    path = open_leaves[int(rng.integers(len(open_leaves)))]
                    tree = replace_at(tree, path, (int(rng.integers(len(self.tests))), None, None))
            elif internal:
                path = internal[int(rng.integers(len(internal)))]
                tree = replace_at(tree, path, None)
        return tree

    def genetic(self, warm_start: SearchTree = None) -> TreeSearchResult:
        method_prefix = f"{self._prefix}:genetic"
        cfg = self.config
        params = cfg.genetic
        rng = np.random.default_rng(params.seed)
        key = lambda tree: serialize_tree(tree, self.tests)

        if params.iterations == 0:
            bits = self.fitness(warm_start)
            if bits == INFEASIBLE:
                raise ValidationError("warm-start tree is infeasible")
            return self._finish(warm_start, bits, [bits], f"genetic-{cfg.max_leaves}")

        initial: List[SearchTree] = [warm_start, None]
        while len(initial) < params.population:
            initial.append(self._random_tree(rng, cfg.max_leaves, cfg.max_depth))
        engine = GeneticEngine(params, self.fitness, self.mutate, key, cfg.worker_count, method_prefix)
        tree, bits = engine.run(initial, rng)
        tree, bits = self.sweep(tree, bits)
        if bits == INFEASIBLE:
            raise ValidationError("genetic tree search found no feasible tree")
        logger.info(f"{method_prefix} leaves<={cfg.max_leaves} bits={bits} iterations={params.iterations}")
        return self._finish(tree, bits, engine.history + [bits], f"genetic-{cfg.max_leaves}")

    def sweep(self, tree: SearchTree, bits: float) -> Tuple[SearchTree, float]:
        """내부 노드마다 모든 대체 test 를 시도하여 개선만 유지 (개선이 없을 때까지)"""
        key = lambda t: serialize_tree(t, self.tests)
        improved = True
        while improved:
            improved = False
            for path, is_node in tree_paths(tree):
                if not is_node:
                    continue
                node = subtree_at(tree, path)
                for t in range(len(self.tests)):
                    cand = replace_at(tree, path, (t, node[1], node[2]))
                    cost = self.fitness(cand)
                    if (cost, key(cand)) < (bits, key(tree)):
                        tree, bits, improved = cand, cost, True
                        node = subtree_at(tree, path)
        return tree, bits


def exhaustive_tree_search(hist: ConditionalHistogram, space: SymbolSpace, config: SearchConfig) -> TreeSearchResult:
    if not config.test_set:
        single = SearchConfig(config.test_set, config.label_set, config.code_set, 1, 0, config.multi_code,
                              config.genetic, config.unavailable_rule, config.workers, config.universe_cap)
        return TreeSearch(hist, space, single).exhaustive()
    return TreeSearch(hist, space, config).exhaustive()


def genetic_tree_search(hist: ConditionalHistogram, space: SymbolSpace, config: SearchConfig,
                        warm_start: SearchTree = None) -> TreeSearchResult:
    return TreeSearch(hist, space, config).genetic(warm_start)


def derive_curve(hist: ConditionalHistogram, space: SymbolSpace, config: SearchConfig,
                 leaf_counts: Sequence[int], method: str = "genetic") -> List[TreeSearchResult]:
    """leaf 예산을 오름차순으로 탐색; 유전 탐색은 직전 최적 트리에서 시작"""
    results: List[TreeSearchResult] = []
    warm: SearchTree = None
    for n in sorted(set(leaf_counts)):
        cfg = SearchConfig(config.test_set, config.label_set, config.code_set, n, config.max_depth,
                           config.multi_code, config.genetic, config.unavailable_rule, config.workers,
                           config.universe_cap)
        if method == "exhaustive":
            result = exhaustive_tree_search(hist, space, cfg)
        else:
            result = genetic_tree_search(hist, space, cfg, warm)
        warm = result.tree
        results.append(result)
        logger.info(f"[Search:Curve] leaves<={n} bits/IPM={result.report.bits_per_ipm:.4f}")
    return results


# =============================================================================
# Cell clustering
# =============================================================================

@dataclass
class CellClustering:
    assignment: Dict[Tuple[int, ...], int]
    num_clusters: int
    shapes: List[CodeShape]
    labellings: List[Optional[Tuple[Label, ...]]] = field(default_factory=list)


class CellClusterSearch:
    """
    [SEARCH-CLUSTER] 컨텍스트 셀 -> 클러스터 할당의 유전 탐색.
    perfect_labels: 셀마다 최적 모드 순위, 클러스터는 코드만 공유.
    label_set: 클러스터의 셀 합집합에서 greedy 라벨 탐색.
    """

    def __init__(self, hist: ConditionalHistogram, space: SymbolSpace, codes: Sequence[CodeShape],
                 labels: Sequence[Label] = (), unavailable_rule: str = "dc", workers: int = 0):
        if not codes:
            raise EmptyInputError("code set")
        self.hist = hist
        self.space = space
        self.codes = list(codes)
        self.cell_costs = cell_code_costs(hist, codes)
        self.table = CellTable(hist, space, labels, (), unavailable_rule, universe_cap=None) if labels else None
        self.evaluator = LeafEvaluator(self.table, codes) if self.table is not None else None
        self.workers = workers or ConfigLoader.workers()
        self._prefix = "[Search:Cluster]"

    def perfect_cost(self, assignment: np.ndarray, num_clusters: int) -> float:
        sums = np.zeros((num_clusters, len(self.codes)), dtype=np.int64)
        np.add.at(sums, assignment, self.cell_costs)
        used = np.bincount(assignment, minlength=num_clusters) > 0
        return float(sums[used].min(axis=1).sum())

    def label_cost(self, assignment: np.ndarray, num_clusters: int) -> float:
        total = 0
        for cid in range(num_clusters):
            obs = assignment == cid
            if not obs.any():
                continue
            found = self.evaluator.best(obs, obs)
            if found is None:
                return INFEASIBLE
            total += found[0]
        return float(total)

    def run(self, num_clusters: int, mode: str, params: GeneticParams,
            warm_start: Optional[np.ndarray] = None) -> Tuple[CellClustering, float]:
        method_prefix = f"{self._prefix}:{mode}"
        if num_clusters < 1:
            raise ValidationError("num_clusters must be >= 1")
        if mode not in ("perfect_labels", "label_set"):
            raise ValidationError(f"unknown clustering mode '{mode}'")
        if mode == "label_set" and self.evaluator is None:
            raise ValidationError("label_set clustering needs a label set")
        n_cells = self.hist.num_cells
        rng = np.random.default_rng(params.seed)
        cost_fn = self.perfect_cost if mode == "perfect_labels" else self.label_cost
        fitness = lambda a: cost_fn(a, num_clusters)

        def mutate(a: np.ndarray, gen: np.random.Generator) -> np.ndarray:
            child = a.copy()
            flips = gen.random(n_cells) < params.mutation_rate
            if not flips.any():
                flips[int(gen.integers(n_cells))] = True
            child[flips] = gen.integers(num_clusters, size=int(flips.sum()))
            return child

        initial: List[np.ndarray] = []
        if warm_start is not None:
            initial.append(np.asarray(warm_start, dtype=np.int64) % num_clusters)
        if num_clusters >= n_cells:
            initial.append(np.arange(n_cells, dtype=np.int64))
        initial.append(np.zeros(n_cells, dtype=np.int64))
        while len(initial) < params.population:
            initial.append(rng.integers(num_clusters, size=n_cells))

        key = lambda a: a.tobytes().hex()
        engine = GeneticEngine(params, fitness, mutate, key, self.workers, method_prefix)
        best, cost = engine.run(initial, rng)
        clustering = self._compact(best, mode)
        logger.info(f"{method_prefix} clusters={clustering.num_clusters} bits={cost}")
        return clustering, cost

    def _compact(self, assignment: np.ndarray, mode: str) -> CellClustering:
        used = sorted(set(int(v) for v in assignment))
        remap = {old: new for new, old in enumerate(used)}
        dense = np.array([remap[int(v)] for v in assignment], dtype=np.int64)
        shapes: List[CodeShape] = []
        labellings: List[Optional[Tuple[Label, ...]]] = []
        for cid in range(len(used)):
            members = dense == cid
            if mode == "perfect_labels":
                shapes.append(self.codes[int(self.cell_costs[members].sum(axis=0).argmin())])
                labellings.append(None)
            else:
                _, ci, result = self.evaluator.best(members, members)
                shapes.append(self.codes[ci])
                labellings.append(result.labelling)
        keys = [tuple(int(v) for v in k) for k in self.hist.keys]
        return CellClustering(dict(zip(keys, (int(v) for v in dense))), len(used), shapes, labellings)

    def assignment_vector(self, clustering: CellClustering) -> np.ndarray:
        keys = [tuple(int(v) for v in k) for k in self.hist.keys]
        return np.array([clustering.assignment[k] for k in keys], dtype=np.int64)


def genetic_cell_clustering(hist: ConditionalHistogram, space: SymbolSpace, num_clusters: int,
                            code_set: Sequence[CodeShape], mode: str, params: GeneticParams,
                            labels: Sequence[Label] = (), unavailable_rule: str = "dc",
                            warm_start: Optional[np.ndarray] = None) -> Tuple[CellClustering, float]:
    """반환 비용은 정수 비트 합을 샘플 수로 나눈 bits/IPM"""
    search = CellClusterSearch(hist, space, code_set, labels, unavailable_rule)
    clustering, bits = search.run(num_clusters, mode, params, warm_start)
    return clustering, bits / hist.total
