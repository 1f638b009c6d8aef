import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, Dict, Optional, Sequence, Tuple, Callable

import numpy as np

from infra.config import ConfigLoader
from infra.exceptions import ValidationError, EmptyInputError
from domain.models import SymbolSpace, ContextTuple, Sample, GeneticParams, PassReport, CONTEXT_NAMES
from domain.codes import CodeShape
from domain.dataset import ConditionalHistogram, build_histogram, samples_to_arrays
from domain.labels import (
    Label, DynamicList, apply_unavailable_rule, context_columns, evaluate_labels
)
from domain.scheme import Scheme, Node, DynamicLeaf, Test, Tree, iter_leaves, map_leaves, route_columns
from domain.search import GeneticEngine

logger = logging.getLogger("System")

LIST_TEST_CONTEXTS = ("L", "U")


# =============================================================================
# Resolve
# =============================================================================

def resolve(dynamic_list: DynamicList, ctx: ContextTuple, space: SymbolSpace,
            unavailable_rule: str = "keep") -> List[int]:
    """라벨을 순서대로 평가하여 unavailable / 중복을 건너뛴 모드 순열"""
    columns = apply_unavailable_rule(context_columns([ctx]), unavailable_rule)
    ranks = dynamic_list.ranks(columns, space)[0]
    return [int(m) for m in np.argsort(ranks)]


# =============================================================================
# Genetic list search
# =============================================================================

@dataclass
class ListSearchResult:
    dynamic_list: DynamicList
    shape: CodeShape
    cost: float          # bits/IPM
    total_bits: int
    order: np.ndarray    # vocabulary 인덱스 순열
    history: List[float] = field(default_factory=list)

    def __iter__(self):
        return iter((self.dynamic_list, self.shape, self.cost))


class ListCostModel:
    """
    한 히스토그램 위에서 (라벨 순서, 코드) 비용.
    셀마다 해석된 순열의 인덱스 히스토그램을 만들고 코드 집합 중 최소 비트를 고릅니다.
    """

    def __init__(self, hist: ConditionalHistogram, vocabulary: Sequence[Label], codes: Sequence[CodeShape],
                 space: SymbolSpace, unavailable_rule: str = "keep"):
        if not codes:
            raise EmptyInputError("code set")
        for shape in codes:
            shape.validate(space.k)
        self.space = space
        self.vocabulary = tuple(vocabulary)
        self.codes = list(codes)
        columns = apply_unavailable_rule({n: hist.column(n) for n in CONTEXT_NAMES}, unavailable_rule)
        self.values = evaluate_labels(self.vocabulary, columns, space)
        self.counts = hist.counts
        self.total = hist.total
        self.lengths = np.stack([c.rank_lengths() for c in self.codes])  # (n_codes, k)
        self._probe = DynamicList(self.vocabulary, space)  # 완전성 검사 겸 위치 계산

    def cell_ranks(self, order: np.ndarray) -> np.ndarray:
        """(n_cells, k) 순서 order 로 해석한 모드 rank"""
        pos = self._probe.first_positions(self.values[:, order], self.space.k)
        return np.argsort(np.argsort(pos, axis=1, kind="stable"), axis=1, kind="stable")

    def index_histogram(self, order: np.ndarray) -> np.ndarray:
        ranks = self.cell_ranks(order)
        hist = np.zeros(self.space.k, dtype=np.int64)
        np.add.at(hist, ranks.ravel(), self.counts.ravel())
        return hist

    def code_bits(self, order: np.ndarray) -> np.ndarray:
        return self.lengths @ self.index_histogram(order)

    def bits(self, order: np.ndarray) -> int:
        return int(self.code_bits(order).min())

    def best_code(self, order: np.ndarray) -> Tuple[int, int]:
        bits = self.code_bits(order)
        ci = int(np.argmin(bits))
        return int(bits[ci]), ci


def _swap(order: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    i, j = rng.choice(len(order), size=2, replace=False)
    child = order.copy()
    child[i], child[j] = child[j], child[i]
    return child


def _move(order: np.ndarray, src: int, dst: int) -> np.ndarray:
    rest = np.delete(order, src)
    return np.insert(rest, dst, order[src])


def _insert(order: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    src, dst = rng.integers(len(order), size=2)
    return _move(order, int(src), int(dst))


class ListSearch:
    """[DYNLIST-GA] 라벨 순서의 유전 탐색 + 위치 이동 안전 점검"""

    def __init__(self, model: ListCostModel, params: GeneticParams, workers: int = 0):
        self.model = model
        self.params = params
        self.workers = workers or ConfigLoader.workers()
        self._prefix = "[Dynlist:Search]"

    def mutate(self, order: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        rounds = 1 + int(rng.binomial(len(order), self.params.mutation_rate))
        for _ in range(rounds):
            order = _swap(order, rng) if rng.random() < 0.5 else _insert(order, rng)
        return order

    def safety_check(self, order: np.ndarray, bits: int) -> Tuple[np.ndarray, int]:
        """라벨마다 모든 위치를 시도하여 비용이 줄면 유지 (한 바퀴)"""
        for label in list(order):
            src = int(np.nonzero(order == label)[0][0])
            best = (bits, src)
            for dst in range(len(order)):
                if dst == src:
                    continue
                cost = self.model.bits(_move(order, src, dst))
                if cost < best[0]:
                    best = (cost, dst)
            if best[1] != src:
                order, bits = _move(order, src, best[1]), best[0]
        return order, bits

    def run(self, warm_start: Optional[np.ndarray] = None) -> ListSearchResult:
        method_prefix = f"{self._prefix}:run"
        params = self.params
        rng = np.random.default_rng(params.seed)
        n = len(self.model.vocabulary)
        initial = [np.arange(n)]
        if warm_start is not None:
            initial.insert(0, np.asarray(warm_start, dtype=np.int64))
        while len(initial) < params.population:
            initial.append(rng.permutation(n))

        engine = GeneticEngine(params, lambda o: float(self.model.bits(o)), self.mutate,
                               lambda o: o.tobytes().hex(), self.workers, method_prefix)
        order, bits = engine.run(initial, rng)
        order, bits = self.safety_check(order, int(bits))
        bits, ci = self.model.best_code(order)
        vocab = self.model.vocabulary
        dynamic_list = DynamicList(tuple(vocab[i] for i in order), self.model.space)
        cost = bits / self.model.total if self.model.total else 0.0
        logger.info(f"{method_prefix} labels={n} code={self.model.codes[ci]} bits/IPM={cost:.4f}")
        return ListSearchResult(dynamic_list, self.model.codes[ci], cost, bits, order,
                                engine.history + [float(bits)])


def genetic_list_search(hist: ConditionalHistogram, vocabulary: Sequence[Label], code_set: Sequence[CodeShape],
                        params: GeneticParams, space: SymbolSpace, unavailable_rule: str = "keep",
                        warm_start: Optional[DynamicList] = None, workers: int = 0) -> ListSearchResult:
    model = ListCostModel(hist, vocabulary, code_set, space, unavailable_rule)
    start = None
    if warm_start is not None:
        index = {label: i for i, label in enumerate(model.vocabulary)}
        if set(warm_start.labels) != set(index):
            raise ValidationError("warm-start list must be a permutation of the vocabulary")
        start = np.array([index[l] for l in warm_start.labels], dtype=np.int64)
    return ListSearch(model, params, workers).run(start)


# =============================================================================
# Tree + dynamic lists
# =============================================================================

@dataclass
class DynlistConfig:
    test_set: Sequence[Test]
    vocabulary: Sequence[Label]
    code_set: Sequence[CodeShape]
    num_leaves: int = 4
    max_depth: int = 3
    genetic: GeneticParams = field(default_factory=GeneticParams)
    unavailable_rule: str = "keep"
    workers: int = 0

    def __post_init__(self):
        if not 1 <= self.num_leaves <= 8:
            raise ValidationError("num_leaves must lie in [1, 8]")
        if self.max_depth < 0:
            raise ValidationError("max_depth must be >= 0")


def _sub_histogram(hist: ConditionalHistogram, mask: np.ndarray) -> ConditionalHistogram:
    return ConditionalHistogram(hist.context_set, hist.k, hist.keys[mask], hist.counts[mask])


def _leaf_seed(seed: int, leaf_id: int) -> int:
    return int(np.random.SeedSequence([seed, leaf_id]).generate_state(1)[0])


class DynlistTreeBuilder:
    """
    [DYNLIST-TREE] L, U 테스트 트리 + leaf 별 동적 목록.
    1) 전체 데이터로 루트 목록을 탐색
    2) 루트 목록 순서 + leaf 별 최적 코드를 leaf 비용으로 트리 구조를 전수 탐색
    3) leaf 마다 루트 목록에서 출발하는 목록 탐색 (병렬, leaf 별 시드)
    """

    def __init__(self, hist: ConditionalHistogram, space: SymbolSpace, config: DynlistConfig):
        self.hist = hist
        self.space = space
        self.config = config
        self._prefix = "[Dynlist:Tree]"
        allowed = set(LIST_TEST_CONTEXTS) & set(hist.context_set)
        self.tests = [t for t in config.test_set if set(t.contexts) <= allowed]
        if len(self.tests) != len(config.test_set):
            logger.warning(f"{self._prefix} kept {len(self.tests)}/{len(config.test_set)} tests over L,U")
        columns = apply_unavailable_rule({n: hist.column(n) for n in CONTEXT_NAMES}, config.unavailable_rule)
        self.outcomes = (np.stack([t.evaluate_columns(columns) for t in self.tests], axis=1)
                         if self.tests else np.zeros((hist.num_cells, 0), dtype=bool))
        self._memo: Dict[Tuple[bytes, int, int], Tuple[int, str, object]] = {}

    def build(self, warm_start: Optional[DynamicList] = None) -> Scheme:
        method_prefix = f"{self._prefix}:build"
        cfg = self.config
        root = genetic_list_search(self.hist, cfg.vocabulary, cfg.code_set, cfg.genetic, self.space,
                                   cfg.unavailable_rule, warm_start, cfg.workers)
        if cfg.num_leaves == 1 or not self.tests:
            return Scheme(self.space, DynamicLeaf(root.dynamic_list, root.shape), cfg.unavailable_rule,
                          "dynlist-1")

        model = ListCostModel(self.hist, cfg.vocabulary, cfg.code_set, self.space, cfg.unavailable_rule)
        self._cell_index = self._cell_index_histograms(model, root.order)
        self._lengths = model.lengths
        bits, _, shape = self._dp(np.ones(self.hist.num_cells, dtype=bool), cfg.num_leaves, cfg.max_depth)
        masks = self._leaf_masks(shape)
        logger.info(f"{method_prefix} structure={self._describe(shape)} proxy_bits={bits}")

        def leaf_job(item):
            leaf_id, mask = item
            params = replace(cfg.genetic, seed=_leaf_seed(cfg.genetic.seed, leaf_id))
            return genetic_list_search(_sub_histogram(self.hist, mask), cfg.vocabulary, cfg.code_set, params,
                                       self.space, cfg.unavailable_rule, root.dynamic_list, workers=1)

        workers = cfg.workers or ConfigLoader.workers()
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(leaf_job, enumerate(masks)))
        leaves = iter(DynamicLeaf(r.dynamic_list, r.shape) for r in results)
        tree = self._realize(shape, leaves)
        return Scheme(self.space, tree, cfg.unavailable_rule, f"dynlist-{len(masks)}")

    def _cell_index_histograms(self, model: ListCostModel, order: np.ndarray) -> np.ndarray:
        """(n_cells, k) 루트 목록 인덱스 히스토그램"""
        ranks = model.cell_ranks(order)
        out = np.zeros_like(self.hist.counts)
        rows = np.arange(self.hist.num_cells)[:, None]
        out[rows, ranks] = self.hist.counts
        return out

    def _leaf_bits(self, mask: np.ndarray) -> int:
        return int((self._lengths @ self._cell_index[mask].sum(axis=0)).min())

    def _dp(self, mask: np.ndarray, leaves: int, depth: int):
        leaves = min(leaves, 2 ** depth)
        key = (np.packbits(mask).tobytes(), leaves, depth)
        if key in self._memo:
            return self._memo[key]
        best = (self._leaf_bits(mask), "*", None)
        if leaves >= 2 and depth >= 1:
            for t in range(len(self.tests)):
                outcome = self.outcomes[:, t]
                fm, tm = mask & ~outcome, mask & outcome
                if self.hist.counts[fm].sum() == 0 or self.hist.counts[tm].sum() == 0:
                    continue
                for n_false in range(1, leaves):
                    left = self._dp(fm, n_false, depth - 1)
                    right = self._dp(tm, leaves - n_false, depth - 1)
                    cand = (left[0] + right[0], f"({self.tests[t]}?{left[1]}:{right[1]})", (t, left[2], right[2]))
                    if cand[:2] < best[:2]:
                        best = cand
        self._memo[key] = best
        return best

    def _leaf_masks(self, shape) -> List[np.ndarray]:
        out = []

        def rec(node, mask):
            if node is None:
                out.append(mask)
                return
            outcome = self.outcomes[:, node[0]]
            rec(node[1], mask & ~outcome)
            rec(node[2], mask & outcome)

        rec(shape, np.ones(self.hist.num_cells, dtype=bool))
        return out

    def _realize(self, shape, leaves) -> Tree:
        if shape is None:
            return next(leaves)
        false = self._realize(shape[1], leaves)
        true = self._realize(shape[2], leaves)
        return Node(self.tests[shape[0]], true, false)

    def _describe(self, shape) -> str:
        if shape is None:
            return "*"
        return f"({self.tests[shape[0]]}?{self._describe(shape[1])}:{self._describe(shape[2])})"


def build_tree_dynlist(hist: ConditionalHistogram, space: SymbolSpace, config: DynlistConfig,
                       warm_start: Optional[DynamicList] = None) -> Scheme:
    return DynlistTreeBuilder(hist, space, config).build(warm_start)


def reoptimize_dynlist_scheme(scheme: Scheme, hist: ConditionalHistogram, config: DynlistConfig) -> Optional[Scheme]:
    """
    트리 구조를 고정하고 leaf 목록을 기존 목록에서 다시 탐색.
    DynamicList leaf 가 아니거나 어휘가 다르면 None.
    """
    leaves = iter_leaves(scheme.tree)
    vocab = set(config.vocabulary)
    if not all(isinstance(l, DynamicLeaf) and isinstance(l.ordering, DynamicList)
               and set(l.ordering.labels) == vocab for l in leaves):
        return None
    columns = {n: hist.column(n) for n in CONTEXT_NAMES}
    leaf_ids = route_columns(scheme.tree, scheme.prepare(columns))
    new_leaves = []
    for leaf_id, leaf in enumerate(leaves):
        mask = leaf_ids == leaf_id
        if hist.counts[mask].sum() == 0:
            new_leaves.append(leaf)
            continue
        params = replace(config.genetic, seed=_leaf_seed(config.genetic.seed, leaf_id))
        result = genetic_list_search(_sub_histogram(hist, mask), config.vocabulary, config.code_set, params,
                                     scheme.space, scheme.unavailable_rule, leaf.ordering, config.workers)
        new_leaves.append(DynamicLeaf(result.dynamic_list, result.shape, leaf.cabac_group))
    tree = map_leaves(scheme.tree, lambda leaf_id, _: new_leaves[leaf_id])
    return scheme.with_tree(tree, f"{scheme.name or 'scheme'}+reopt")


# =============================================================================
# Multipass training
# =============================================================================

class MultipassTrainer:
    """
    [DYNLIST-MULTIPASS] RD 재선택 + 스킴 재유도 반복.
    재선택: argmin over 후보 (distortion + lambda * bits(mode | 현재 스킴)), 동률은 작은 모드.
    """

    def __init__(self, space: SymbolSpace, config: DynlistConfig, lam: float = 0.1):
        if lam < 0:
            raise ValidationError("lambda must be >= 0")
        self.space = space
        self.config = config
        self.lam = lam
        self._prefix = "[Dynlist:Multipass]"

    def mode_bits(self, scheme: Scheme, samples: Sequence[Sample]) -> Tuple[np.ndarray, np.ndarray]:
        """(샘플 -> 고유 컨텍스트 인덱스, 고유 컨텍스트 x 모드 비트 표)"""
        _, ctx = samples_to_arrays(samples)
        uniq, inverse = np.unique(ctx, axis=0, return_inverse=True)
        columns = {name: uniq[:, i] for i, name in enumerate(CONTEXT_NAMES)}
        leaf_ids, ranks = scheme.rank_table(columns)
        lengths = np.stack([leaf.shape.rank_lengths() for leaf in scheme.leaves])
        table = np.take_along_axis(lengths[leaf_ids], ranks, axis=1)
        return inverse.reshape(-1), table

    def reselect(self, scheme: Scheme, samples: Sequence[Sample]) -> Tuple[List[Sample], int]:
        inverse, table = self.mode_bits(scheme, samples)
        out: List[Sample] = []
        flipped = 0
        for i, sample in enumerate(samples):
            row = table[inverse[i]]
            mode = min(sample.rd_candidates, key=lambda c: (c[1] + self.lam * row[c[0]], c[0]))[0]
            flipped += int(mode != sample.ipm)
            out.append(Sample(int(mode), sample.ctx, sample.rd_candidates))
        return out, flipped

    def train(self, samples: Sequence[Sample], initial: Scheme, passes: int,
              sample_provider: Optional[Callable[[int], Sequence[Sample]]] = None) -> List[PassReport]:
        method_prefix = f"{self._prefix}:train"
        if passes < 1:
            raise ValidationError("passes must be >= 1")
        current = initial
        reports: List[PassReport] = []
        for p in range(1, passes + 1):
            base = list(sample_provider(p)) if sample_provider is not None else list(samples)
            if not base:
                raise EmptyInputError("multipass samples")
            if any(s.rd_candidates is None for s in base):
                raise ValidationError("multipass training needs rd_candidates on every sample")
            try:
                data, flipped = self.reselect(current, base)
                hist = build_histogram(data, CONTEXT_NAMES, self.space)
                ref_cost = current.evaluate(hist).bits_per_ipm
                anchor_cost = initial.evaluate(hist).bits_per_ipm
                config = replace(self.config, genetic=replace(self.config.genetic,
                                                              seed=_leaf_seed(self.config.genetic.seed, 1000 + p)))
                candidates = [build_tree_dynlist(hist, self.space, config)]
                reopt = reoptimize_dynlist_scheme(current, hist, config)
                if reopt is not None:
                    candidates.append(reopt)
                scored = sorted(((c.evaluate(hist).bits_per_ipm, i, c) for i, c in enumerate(candidates)),
                                key=lambda x: x[:2])
                new_cost, _, new_scheme = scored[0]
                retained = new_cost >= ref_cost
                if retained:
                    new_cost, new_scheme = ref_cost, current
            except Exception as e:
                logger.error(f"{method_prefix} pass {p} failed: {e}")
                raise e
            delta = (new_cost - ref_cost) / ref_cost if ref_cost else 0.0
            reports.append(PassReport(p, ref_cost, new_cost, delta, anchor_cost, flipped, retained))
            logger.info(f"{method_prefix} pass={p} ref={ref_cost:.4f} new={new_cost:.4f} "
                        f"delta={delta * 100:+.2f}% flipped={flipped}")
            current = new_scheme
        self.final_scheme = current
        return reports


def multipass_train(samples: Sequence[Sample], initial: Scheme, passes: int, lam: float, config: DynlistConfig,
                    space: SymbolSpace,
                    sample_provider: Optional[Callable[[int], Sequence[Sample]]] = None) -> List[PassReport]:
    return MultipassTrainer(space, config, lam).train(samples, initial, passes, sample_provider)
