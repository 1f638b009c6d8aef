import sys
import asyncio
from dataclasses import dataclass, field
from typing import List, Dict, Optional, Any, Sequence, Tuple

import numpy as np

# 인프라
from infra.logging import LogAgent
from infra.exceptions import UsageError

# 도메인 모델
from domain.models import ExperimentSpec, SymbolSpace, GeneticParams, Sample, ContextTuple, CONTEXT_NAMES

# 소스 및 팩토리
from domain.sources import SourceFactory, SampleSource

# 도메인 서비스
from domain.dataset import build_histogram, save_samples, normalize_context_set
from domain.entropy import entropy, code_based_entropy, entropy_table, CONTEXT_LADDER
from domain.codes import enumerate_codes, code_set_preset, CodeShape
from domain.labels import label_preset, Label
from domain.scheme import Scheme, preset_tests, load_scheme, save_scheme, assign_cabac_groups
from domain.anchors import FIXTURES, builtin_scheme, anchor_for_profile
from domain.search import SearchConfig, derive_curve, genetic_cell_clustering
from domain.dynlist import DynlistConfig, build_tree_dynlist, MultipassTrainer
from domain.codec import SchemeCodec, save_blob, load_blob
from domain.report import write_result, read_result, build_report, report_rows, format_summary, REPORT_COLUMNS

PROFILE_DEFAULTS = {
    "hevc": {"tests": "hevc-extended", "labels": "hevc-extended", "rule": "dc"},
    "jem": {"tests": "jem", "labels": "jem-tree", "rule": "keep"},
    "custom": {"tests": "hevc-extended", "labels": "hevc-extended", "rule": "dc"},
}


@dataclass
class ActionResult:
    """액션 결과: 결과 CSV 행 + (선택) 사람이 읽는 요약"""
    columns: List[str]
    rows: List[Dict[str, Any]] = field(default_factory=list)
    summary: Optional[str] = None


class ExperimentOrchestrator:
    """
    [조율자] ExperimentSpec 을 받아 액션에 해당하는 도메인 연산을 실행하고 결과를 기록합니다.
    계산은 executor 에서 실행하여 이벤트 루프를 막지 않습니다.
    """

    ACTIONS = ("synth", "stats", "entropy", "codes", "derive-tree", "derive-dynlist", "multipass",
               "encode", "decode", "evaluate", "report", "cluster")

    async def execute(self, spec: ExperimentSpec) -> ActionResult:
        LogAgent.start_trace(spec.fingerprint())
        LogAgent.info("[ORCHESTRATOR]", "Experiment Started", {"action": spec.action, "profile": spec.profile})
        if spec.action not in self.ACTIONS:
            raise UsageError(f"unknown action '{spec.action}'")
        handler = getattr(self, "_" + spec.action.replace("-", "_"))
        try:
            loop = asyncio.get_running_loop()
            result = await loop.run_in_executor(None, handler, spec)
            if spec.action != "synth":
                write_result(spec.outputs.get("csv"), result.rows, result.columns, spec)
            if result.summary:
                stream = sys.stdout if spec.outputs.get("csv") not in (None, "-") else sys.stderr
                print(result.summary, file=stream)
            LogAgent.info("[ORCHESTRATOR]", "Experiment Finished", {"rows": len(result.rows)})
            return result
        except Exception as e:
            LogAgent.error("[ORCHESTRATOR]", "Experiment Failed", e)
            raise e

    # ====================================================
    # 공통 준비
    # ====================================================
    @staticmethod
    def space(spec: ExperimentSpec) -> SymbolSpace:
        try:
            return SymbolSpace.for_profile(spec.profile, spec.k)
        except ValueError as e:
            raise UsageError(str(e))

    @staticmethod
    def source(spec: ExperimentSpec) -> SampleSource:
        return SourceFactory.create(spec.dataset, spec.synth)

    def samples(self, spec: ExperimentSpec) -> List[Sample]:
        return self.source(spec).load(self.space(spec))

    @staticmethod
    def genetic(spec: ExperimentSpec) -> GeneticParams:
        opts = spec.options
        defaults = GeneticParams()
        try:
            return GeneticParams(
                population=int(opts.get("population", defaults.population)),
                children_per_parent=int(opts.get("children", defaults.children_per_parent)),
                mutation_rate=float(opts.get("mutation_rate", defaults.mutation_rate)),
                iterations=int(opts.get("iterations", defaults.iterations)),
                seed=spec.seed,
            )
        except ValueError as e:
            raise UsageError(str(e))

    def labels(self, spec: ExperimentSpec, space: SymbolSpace, default: Optional[str] = None) -> List[Label]:
        name = spec.options.get("labels") or default or PROFILE_DEFAULTS[spec.profile]["labels"]
        labels = label_preset(name, space)
        # 사용자 k 에서는 범위를 벗어난 숫자 라벨 제외
        return [l for l in labels if l.kind != "num" or l.value < space.k]

    @staticmethod
    def tests(spec: ExperimentSpec, default: Optional[str] = None):
        return preset_tests(spec.options.get("tests") or default or PROFILE_DEFAULTS[spec.profile]["tests"])

    @staticmethod
    def codes(spec: ExperimentSpec, space: SymbolSpace, purpose: str = "tree") -> List[CodeShape]:
        explicit = spec.options.get("codes")
        if explicit:
            shapes = [CodeShape.parse(c) for c in explicit]
            for shape in shapes:
                shape.validate(space.k)
            return shapes
        return code_set_preset(space, purpose)

    @staticmethod
    def rule(spec: ExperimentSpec) -> str:
        return spec.options.get("rule") or PROFILE_DEFAULTS[spec.profile]["rule"]

    def scheme(self, spec: ExperimentSpec) -> Scheme:
        ref = spec.options.get("scheme")
        if not ref:
            return anchor_for_profile(spec.profile)
        scheme = builtin_scheme(ref) if ref in FIXTURES else load_scheme(ref)
        if scheme.space.k != self.space(spec).k:
            raise UsageError(f"scheme k={scheme.space.k} does not match profile k={self.space(spec).k}")
        return scheme

    @staticmethod
    def _contexts_for(items: Sequence[Any]) -> Tuple[str, ...]:
        used = {c for item in items for c in item.contexts}
        return tuple(c for c in CONTEXT_NAMES if c in used)

    # ====================================================
    # Actions
    # ====================================================
    def _synth(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        if spec.synth is None:
            raise UsageError("synth needs synthetic parameters")
        samples = self.source(spec).load(space)
        path = spec.outputs.get("samples")
        if not path:
            raise UsageError("synth needs --out PATH")
        binary = bool(spec.options.get("binary"))
        save_samples(path, samples, space, binary=binary, header_comment=None if binary else "experiment: " + spec.to_json())
        return ActionResult(["k", "samples", "path"], [{"k": space.k, "samples": len(samples), "path": path}])

    def _stats(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        samples = self.samples(spec)
        hist = build_histogram(samples, CONTEXT_NAMES, space)
        ctx = np.array([s.ctx.values() for s in samples], dtype=np.int64)
        rows: List[Dict[str, Any]] = [{"k": space.k, "metric": "samples", "value": len(samples)}]
        for i, name in enumerate(CONTEXT_NAMES):
            rows.append({"k": space.k, "metric": f"available_{name}", "value": float((ctx[:, i] >= 0).mean())})
        rows.append({"k": space.k, "metric": "with_rd_candidates",
                     "value": sum(1 for s in samples if s.rd_candidates is not None)})
        if spec.profile in ("hevc", "jem"):
            anchor = anchor_for_profile(spec.profile)
            rows.append({"k": space.k, "metric": f"{anchor.name}_bits_per_ipm",
                         "value": anchor.evaluate(hist).bits_per_ipm})
        for mode, count in enumerate(hist.pooled()):
            rows.append({"k": space.k, "metric": f"mode_{mode}", "value": int(count)})
        return ActionResult(["k", "metric", "value"], rows)

    def _entropy(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        samples = self.samples(spec)
        codes = self.codes(spec, space) if spec.options.get("cbe") else None
        contexts = spec.options.get("contexts")
        columns = ["k", "contexts", "entropy", "mm", "nonzero_bins", "samples"]
        if codes:
            columns.append("code_based_entropy")
        if contexts is None:
            hist = build_histogram(samples, CONTEXT_NAMES, space)
            rows = entropy_table(hist, codes, CONTEXT_LADDER)
        else:
            names = normalize_context_set(contexts)
            hist = build_histogram(samples, names, space)
            report = entropy(hist)
            row = {"contexts": ",".join(names) or "-", "entropy": report.bits_per_symbol,
                   "mm": report.mm_correction, "nonzero_bins": report.nonzero_bins,
                   "samples": report.samples_used}
            if codes:
                row["code_based_entropy"] = code_based_entropy(hist, codes).bits_per_symbol
            rows = [row]
        for row in rows:
            row["k"] = space.k
        return ActionResult(columns, rows)

    def _codes(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        opts = spec.options
        mpm = opts.get("mpm") or ([3, 5, 7] if space.k <= 35 else [3, 5, 7, 9])
        max_len = int(opts.get("max_len") or (8 if space.k <= 35 else 9))
        shapes = enumerate_codes(space, mpm, max_len, int(opts.get("max_groups") or 1))
        rows = [{"k": space.k, "code": str(s), "mpm": s.num_mpm, "max_length": s.max_length,
                 "kraft": str(s.kraft())} for s in shapes]
        counts = {m: sum(1 for s in shapes if s.num_mpm == m) for m in mpm}
        summary = "  ".join(f"M={m}: {n}" for m, n in counts.items())
        return ActionResult(["k", "code", "mpm", "max_length", "kraft"], rows, summary)

    def _derive_tree(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        opts = spec.options
        tests = self.tests(spec)
        labels = self.labels(spec, space)
        config = SearchConfig(
            test_set=tests, label_set=labels, code_set=self.codes(spec, space),
            max_leaves=max(opts.get("leaves") or [5]), max_depth=int(opts.get("max_depth") or 4),
            multi_code=bool(opts.get("multi_code", True)), genetic=self.genetic(spec),
            unavailable_rule=self.rule(spec), workers=int(opts.get("workers") or 0),
        )
        samples = self.samples(spec)
        hist = build_histogram(samples, self._contexts_for(list(tests) + list(labels)), space)
        results = derive_curve(hist, space, config, opts.get("leaves") or [5], opts.get("method", "genetic"))
        series = "derived" if config.multi_code else "derived-single"
        rows = [{"k": space.k, "series": series, "leaves": len(r.scheme.leaves), "clusters": n,
                 "bits_per_ipm": r.report.bits_per_ipm, "total_bits": r.total_bits}
                for n, r in zip(sorted(set(opts.get("leaves") or [5])), results)]
        if spec.profile in ("hevc", "jem"):
            anchor = anchor_for_profile(spec.profile)
            full = build_histogram(samples, CONTEXT_NAMES, space)
            report = anchor.evaluate(full)
            rows.insert(0, {"k": space.k, "series": anchor.name, "leaves": anchor.num_leaves, "clusters": None,
                            "bits_per_ipm": report.bits_per_ipm, "total_bits": report.total_bits})
        if spec.outputs.get("scheme"):
            save_scheme(results[-1].scheme, spec.outputs["scheme"])
        return ActionResult(["k", "series", "clusters", "leaves", "bits_per_ipm", "total_bits"], rows)

    def _dynlist_config(self, spec: ExperimentSpec, space: SymbolSpace) -> DynlistConfig:
        opts = spec.options
        return DynlistConfig(
            test_set=self.tests(spec, "dynlist"), vocabulary=self.labels(spec, space, "dynamic"),
            code_set=self.codes(spec, space, "dynlist"), num_leaves=int(opts.get("leaves_count") or 4),
            max_depth=int(opts.get("max_depth") or 3), genetic=self.genetic(spec),
            unavailable_rule=self.rule(spec), workers=int(opts.get("workers") or 0),
        )

    def _derive_dynlist(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        config = self._dynlist_config(spec, space)
        hist = build_histogram(self.samples(spec), CONTEXT_NAMES, space)
        scheme = build_tree_dynlist(hist, space, config)
        report = scheme.evaluate(hist)
        if spec.outputs.get("scheme"):
            save_scheme(scheme, spec.outputs["scheme"])
        rows = [{"k": space.k, "series": "dynlist", "clusters": scheme.num_leaves,
                 "bits_per_ipm": report.bits_per_ipm, "total_bits": report.total_bits}]
        return ActionResult(["k", "series", "clusters", "bits_per_ipm", "total_bits"], rows, scheme.describe())

    def _multipass(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        config = self._dynlist_config(spec, space)
        source = self.source(spec)
        initial = self.scheme(spec)
        trainer = MultipassTrainer(space, config, float(spec.options.get("lam", 0.1)))
        rotate = bool(spec.options.get("rotate"))
        provider = (lambda p: source.rotated(p).load(space)) if rotate else None
        reports = trainer.train(source.load(space) if not rotate else [], initial,
                                int(spec.options.get("passes") or 3), provider)
        if spec.outputs.get("scheme"):
            save_scheme(trainer.final_scheme, spec.outputs["scheme"])
        rows = [{"k": space.k, "pass": r.pass_index, "ref": r.ref_cost, "new": r.new_cost, "delta": r.delta,
                 "anchor": r.anchor_cost, "flipped": r.flipped, "retained": int(r.retained_reference)}
                for r in reports]
        return ActionResult(["k", "pass", "ref", "new", "delta", "anchor", "flipped", "retained"], rows)

    def _encode(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        scheme = self.scheme(spec)
        samples = self.samples(spec)
        blob = SchemeCodec(scheme).encode(samples)
        path = spec.outputs.get("blob")
        if not path:
            raise UsageError("encode needs --out PATH")
        save_blob(blob, path)
        predicted = scheme.evaluate(build_histogram(samples, CONTEXT_NAMES, space)).total_bits if samples else 0
        row = {"k": space.k, "samples": blob.count, "payload_bits": blob.payload_bits,
               "predicted_bits": predicted, "scheme_hash": blob.scheme_hash.hex()}
        return ActionResult(["k", "samples", "payload_bits", "predicted_bits", "scheme_hash"], [row])

    def _decode(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        scheme = self.scheme(spec)
        blob_path = spec.options.get("blob")
        if not blob_path:
            raise UsageError("decode needs --blob PATH")
        blob = load_blob(blob_path)
        samples = self.samples(spec)
        contexts: List[ContextTuple] = [s.ctx for s in samples]
        modes = SchemeCodec(scheme).decode(blob, contexts)
        rows = [{"k": space.k, "index": i, "ipm": m} for i, m in enumerate(modes)]
        return ActionResult(["k", "index", "ipm"], rows)

    def _evaluate(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        scheme = self.scheme(spec)
        hist = build_histogram(self.samples(spec), CONTEXT_NAMES, space)
        groups = spec.options.get("cabac_groups")
        if groups:
            scheme = assign_cabac_groups(scheme, hist, int(groups))
        report = scheme.evaluate(hist)
        name = scheme.name or "scheme"
        rows: List[Dict[str, Any]] = [{"k": space.k, "series": name, "clusters": scheme.num_leaves,
                                       "bits_per_ipm": report.bits_per_ipm, "total_bits": report.total_bits}]
        for leaf in report.per_leaf:
            rows.append({"k": space.k, "series": name, "leaf": leaf.leaf_id, "hit_prob": leaf.hit_prob,
                         "leaf_bits_per_ipm": leaf.bits_per_ipm, "total_bits": leaf.total_bits,
                         "first_bit_prob": leaf.first_bit_prob, "cabac_group": leaf.cabac_group})
        columns = ["k", "series", "clusters", "bits_per_ipm", "total_bits", "leaf", "hit_prob",
                   "leaf_bits_per_ipm", "first_bit_prob", "cabac_group"]
        return ActionResult(columns, rows, scheme.describe())

    def _report(self, spec: ExperimentSpec) -> ActionResult:
        inputs = spec.options.get("inputs") or []
        if not inputs:
            raise UsageError("report needs at least one result file")
        entries = build_report([read_result(p) for p in inputs])
        return ActionResult(REPORT_COLUMNS, report_rows(entries), format_summary(entries))

    def _cluster(self, spec: ExperimentSpec) -> ActionResult:
        space = self.space(spec)
        opts = spec.options
        mode = opts.get("mode", "perfect_labels")
        labels = self.labels(spec, space) if mode == "label_set" else ()
        lu = [l for l in labels if set(l.contexts) <= {"L", "U"}]
        hist = build_histogram(self.samples(spec), ("L", "U"), space)
        clustering, cost = genetic_cell_clustering(hist, space, int(opts.get("clusters") or 5),
                                                   self.codes(spec, space), mode, self.genetic(spec), lu,
                                                   self.rule(spec))
        map_path = spec.outputs.get("map")
        if map_path:
            cells = [{"L": key[0], "U": key[1], "cluster": cid} for key, cid in sorted(clustering.assignment.items())]
            write_result(map_path, cells, ["L", "U", "cluster"], spec)
        rows = [{"k": space.k, "series": f"cluster-{mode}", "clusters": clustering.num_clusters,
                 "bits_per_ipm": cost}]
        return ActionResult(["k", "series", "clusters", "bits_per_ipm"], rows)
