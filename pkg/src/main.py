import sys
import asyncio
import argparse
from typing import List, Optional, Dict, Any

# 인프라
from infra.logging import LogAgent
from infra.config import ConfigLoader
from infra.exceptions import SchemeStudioError, UsageError

# 도메인 모델 (설정 객체들)
from domain.models import ExperimentSpec, SynthParams

# 오케스트레이터
from domain.orchestrator import ExperimentOrchestrator

EX_IOERR = 74


class _Parser(argparse.ArgumentParser):
    """argparse 오류를 종료 대신 UsageError 로 변환"""

    def error(self, message: str):
        raise UsageError(message)


def parse_leaves(text: str) -> List[int]:
    """'5' | '3..8' | '3,5,8'"""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            values = list(range(int(lo), int(hi) + 1))
        else:
            values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"bad leaf range '{text}'")
    if not values or min(values) < 1:
        raise UsageError(f"bad leaf range '{text}'")
    return values


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got '{text}'")


# =============================================================================
# Parser
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--profile", choices=("hevc", "jem", "custom"), default="hevc")
    common.add_argument("--k", type=int, default=None, help="custom 프로파일의 모드 수")
    common.add_argument("--in", dest="dataset", default=None, help="CSV 또는 IPMS 바이너리 샘플 파일")
    common.add_argument("--seed", type=int, default=None, help="기본값 IPM_DEFAULT_SEED")
    common.add_argument("--csv", default=None, help="결과 CSV 경로 (기본 stdout)")
    common.add_argument("--workers", type=int, default=None, help="기본값 IPM_WORKERS")
    common.add_argument("--log-level", default=None)

    synth = _Parser(add_help=False)
    synth.add_argument("--synth", action="store_true", help="파일 대신 합성 데이터 사용")
    synth.add_argument("--width", type=int, default=64)
    synth.add_argument("--height", type=int, default=64)
    synth.add_argument("--copy-prob", type=float, default=0.6)
    synth.add_argument("--jitter-prob", type=float, default=0.2)
    synth.add_argument("--nonangular-prob", type=float, default=0.1)
    synth.add_argument("--rd-alternates", type=int, default=0)
    synth.add_argument("--rd-gap", type=float, default=1.0)

    genetic = _Parser(add_help=False)
    genetic.add_argument("--population", type=int, default=32)
    genetic.add_argument("--children", type=int, default=4)
    genetic.add_argument("--mutation-rate", type=float, default=0.02)
    genetic.add_argument("--iterations", type=int, default=2000)

    presets = _Parser(add_help=False)
    presets.add_argument("--tests", default=None, help="테스트 프리셋")
    presets.add_argument("--labels", default=None, help="라벨 프리셋")
    presets.add_argument("--codes", default=None, help="';' 로 구분한 코드 모양, 예: 2+3+3+(6x32)")
    presets.add_argument("--rule", choices=("dc", "keep"), default=None)

    parser = _Parser(prog="ipm-studio", description="IPM coding scheme studio")
    sub = parser.add_subparsers(dest="action", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common, synth])
    p.add_argument("--out", required=True)
    p.add_argument("--binary", action="store_true")

    sub.add_parser("stats", parents=[common, synth])

    p = sub.add_parser("entropy", parents=[common, synth])
    p.add_argument("--contexts", default=None, help="예: L,U (생략하면 컨텍스트 사다리 전체)")
    p.add_argument("--cbe", action="store_true", help="code-based entropy 열 추가")
    p.add_argument("--codes", default=None)

    p = sub.add_parser("codes", parents=[common])
    p.add_argument("--mpm", default=None, help="예: 3 또는 3,5,7")
    p.add_argument("--max-len", type=int, default=None)
    p.add_argument("--max-groups", type=int, default=1)

    p = sub.add_parser("derive-tree", parents=[common, synth, genetic, presets])
    p.add_argument("--leaves", default="5", help="예: 5 또는 3..8")
    p.add_argument("--method", choices=("genetic", "exhaustive"), default="genetic")
    mc = p.add_mutually_exclusive_group()
    mc.add_argument("--multi-code", dest="multi_code", action="store_true", default=True)
    mc.add_argument("--single-code", dest="multi_code", action="store_false")
    p.add_argument("--max-depth", type=int, default=4)
    p.add_argument("--out", default=None, help="최종 스킴 JSON 경로")

    p = sub.add_parser("derive-dynlist", parents=[common, synth, genetic, presets])
    p.add_argument("--leaves", type=int, default=4)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--out", default=None)

    p = sub.add_parser("multipass", parents=[common, synth, genetic, presets])
    p.add_argument("--scheme", default=None, help="초기 스킴 (JSON 경로 또는 내장 이름)")
    p.add_argument("--passes", type=int, default=3)
    p.add_argument("--lam", type=float, default=0.1)
    p.add_argument("--rotate", action="store_true", help="pass 마다 새 합성 시드")
    p.add_argument("--leaves", type=int, default=4)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--out", default=None)

    p = sub.add_parser("encode", parents=[common, synth])
    p.add_argument("--scheme", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("decode", parents=[common, synth])
    p.add_argument("--scheme", default=None)
    p.add_argument("--blob", required=True)

    p = sub.add_parser("evaluate", parents=[common, synth])
    p.add_argument("--scheme", default=None)
    p.add_argument("--cabac-groups", type=int, default=None)

    p = sub.add_parser("report", parents=[common])
    p.add_argument("inputs", nargs="*")

    p = sub.add_parser("cluster", parents=[common, synth, genetic, presets])
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--mode", choices=("perfect_labels", "label_set"), default="perfect_labels")
    p.add_argument("--map", default=None, help="셀 -> 클러스터 CSV 경로")
    return parser


# =============================================================================
# argv -> ExperimentSpec
# =============================================================================

def build_spec(args: argparse.Namespace) -> ExperimentSpec:
    """
    [ENTRY-POINT] 명령행 인자를 직렬화 가능한 ExperimentSpec 으로 변환
    """
    action = args.action
    seed = args.seed if args.seed is not None else ConfigLoader.default_seed()
    synth = None
    if getattr(args, "synth", False) or action == "synth":
        synth = SynthParams(args.width, args.height, args.copy_prob, args.jitter_prob, args.nonangular_prob,
                            seed, args.rd_alternates, args.rd_gap)

    options: Dict[str, Any] = {}
    outputs: Dict[str, str] = {}
    if args.csv:
        outputs["csv"] = args.csv
    if args.workers is not None:
        options["workers"] = args.workers
    for key in ("population", "children", "mutation_rate", "iterations", "tests", "labels", "rule"):
        value = getattr(args, key, None)
        if value is not None:
            options[key] = value
    if getattr(args, "codes", None):
        options["codes"] = [c.strip() for c in args.codes.split(";") if c.strip()]

    if action == "synth":
        outputs["samples"] = args.out
        options["binary"] = args.binary
    elif action == "entropy":
        if args.contexts is not None:
            options["contexts"] = [c.strip() for c in args.contexts.split(",") if c.strip()]
        options["cbe"] = args.cbe
    elif action == "codes":
        if args.mpm:
            options["mpm"] = _int_list(args.mpm)
        options["max_len"] = args.max_len
        options["max_groups"] = args.max_groups
    elif action == "derive-tree":
        options.update(leaves=parse_leaves(args.leaves), method=args.method, multi_code=args.multi_code,
                       max_depth=args.max_depth)
        if args.out:
            outputs["scheme"] = args.out
    elif action in ("derive-dynlist", "multipass"):
        options.update(leaves_count=args.leaves, max_depth=args.max_depth)
        if args.out:
            outputs["scheme"] = args.out
        if action == "multipass":
            options.update(scheme=args.scheme, passes=args.passes, lam=args.lam, rotate=args.rotate)
    elif action in ("encode", "decode", "evaluate"):
        options["scheme"] = args.scheme
        if action == "encode":
            outputs["blob"] = args.out
        elif action == "decode":
            options["blob"] = args.blob
        elif args.cabac_groups:
            options["cabac_groups"] = args.cabac_groups
    elif action == "report":
        options["inputs"] = list(args.inputs)
    elif action == "cluster":
        options.update(clusters=args.clusters, mode=args.mode)
        if args.map:
            outputs["map"] = args.map

    return ExperimentSpec(action=action, profile=args.profile, k=args.k, dataset=args.dataset, synth=synth,
                          seed=seed, outputs=outputs, options=options)


def run(argv: Optional[List[str]] = None) -> int:
    """명령 실행 후 종료 코드 반환 (0 = 성공)"""
    try:
        args = build_parser().parse_args(argv)
        LogAgent.bridge(args.log_level or ConfigLoader.log_level())
        spec = build_spec(args)
        if sys.platform.startswith("win"):
            asyncio.set_event_loop_policy(asyncio.WindowsSelectorEventLoopPolicy())
        asyncio.run(ExperimentOrchestrator().execute(spec))
        return 0
    except SchemeStudioError as e:
        print(f"error: {e.message}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return EX_IOERR
    except KeyboardInterrupt:
        LogAgent.warn("[MAIN]", "Process interrupted by user.")
        return 130


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
