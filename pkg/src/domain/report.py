import csv
import io
import json
import sys
import logging
from dataclasses import dataclass, field
from typing import List, Dict, Optional, Sequence, TextIO, Any

from infra.exceptions import UsageError, ValidationError
from domain.models import ExperimentSpec

logger = logging.getLogger("System")

PROVENANCE_PREFIX = "# experiment: "
REPORT_COLUMNS = ["source", "series", "clusters", "bits_per_ipm", "delta_vs_anchor", "monotone"]


# =============================================================================
# Result files
# =============================================================================

@dataclass
class ResultFile:
    path: str
    experiment: Optional[Dict[str, Any]]
    rows: List[Dict[str, str]] = field(default_factory=list)


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return "" if value is None else str(value)


def write_rows(stream: TextIO, rows: Sequence[Dict[str, Any]], columns: Sequence[str],
               spec: Optional[ExperimentSpec] = None):
    """첫 줄은 실험 설정 JSON 주석, 이후 CSV"""
    if spec is not None:
        stream.write(PROVENANCE_PREFIX + spec.to_json() + "\n")
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])


def write_result(path: Optional[str], rows: Sequence[Dict[str, Any]], columns: Sequence[str],
                 spec: Optional[ExperimentSpec] = None):
    """path 가 없거나 '-' 이면 stdout"""
    if not path or path == "-":
        write_rows(sys.stdout, rows, columns, spec)
        sys.stdout.flush()
        return
    with open(path, "w", newline="") as fh:
        write_rows(fh, rows, columns, spec)
    logger.info(f"[Report:write] {len(rows)} rows -> {path}")


def parse_result(text: str, path: str = "<memory>") -> ResultFile:
    experiment = None
    body: List[str] = []
    for line in text.splitlines():
        if line.startswith(PROVENANCE_PREFIX):
            try:
                experiment = json.loads(line[len(PROVENANCE_PREFIX):])
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}: bad provenance header: {e}")
        elif line.startswith("#"):
            continue
        else:
            body.append(line)
    rows = list(csv.DictReader(io.StringIO("\n".join(body))))
    return ResultFile(path, experiment, rows)


def read_result(path: str) -> ResultFile:
    try:
        with open(path, newline="") as fh:
            return parse_result(fh.read(), path)
    except OSError as e:
        raise UsageError(f"{path}: {e.strerror or e}")


# =============================================================================
# Comparison report
# =============================================================================

@dataclass
class ReportEntry:
    source: str
    series: str
    clusters: Optional[int]
    bits_per_ipm: float
    delta_vs_anchor: Optional[float] = None
    monotone: str = ""


def _entries(result: ResultFile) -> List[ReportEntry]:
    out: List[ReportEntry] = []
    for row in result.rows:
        if row.get("bits_per_ipm"):
            clusters = row.get("clusters") or row.get("leaves") or ""
            out.append(ReportEntry(result.path, row.get("series") or "run",
                                   int(clusters) if clusters else None, float(row["bits_per_ipm"])))
        elif row.get("entropy"):
            ctx = row.get("contexts", "")
            out.append(ReportEntry(result.path, f"entropy[{ctx}]", None, float(row["entropy"])))
            if row.get("code_based_entropy"):
                out.append(ReportEntry(result.path, f"cbe[{ctx}]", None, float(row["code_based_entropy"])))
        elif row.get("pass"):
            out.append(ReportEntry(result.path, "multipass", int(row["pass"]), float(row["new"])))
    return out


def _check_k(results: Sequence[ResultFile]):
    ks = set()
    for result in results:
        for row in result.rows:
            if row.get("k"):
                ks.add(int(row["k"]))
        if result.experiment and result.experiment.get("k"):
            ks.add(int(result.experiment["k"]))
    if len(ks) > 1:
        raise UsageError(f"inputs mix symbol spaces k={sorted(ks)}")


def build_report(results: Sequence[ResultFile]) -> List[ReportEntry]:
    """
    실행 결과를 하나의 비교 표로 병합.
    delta_vs_anchor: 첫 anchor 계열 대비 상대 차이.
    monotone: 같은 계열에서 clusters 가 늘 때 비용이 늘면 violation.
    """
    if not results:
        raise UsageError("report needs at least one result file")
    _check_k(results)
    entries = [e for r in results for e in _entries(r)]
    if not entries:
        raise UsageError("result files contain no comparable rows")

    anchor = next((e.bits_per_ipm for e in entries if e.series.startswith("anchor")), None)
    if anchor:
        for e in entries:
            e.delta_vs_anchor = (e.bits_per_ipm - anchor) / anchor

    by_series: Dict[str, List[ReportEntry]] = {}
    for e in entries:
        if e.clusters is not None and e.series != "multipass":
            by_series.setdefault(e.series, []).append(e)
    for series, group in by_series.items():
        if len(group) < 2:
            continue
        group.sort(key=lambda e: e.clusters)
        prev = None
        for e in group:
            e.monotone = "violation" if prev is not None and e.bits_per_ipm > prev + 1e-12 else "ok"
            prev = e.bits_per_ipm if prev is None else min(prev, e.bits_per_ipm)
        if any(e.monotone == "violation" for e in group):
            logger.warning(f"[Report:build] series '{series}' is not nonincreasing in clusters")
    return entries


def report_rows(entries: Sequence[ReportEntry]) -> List[Dict[str, Any]]:
    return [{
        "source": e.source,
        "series": e.series,
        "clusters": e.clusters,
        "bits_per_ipm": e.bits_per_ipm,
        "delta_vs_anchor": e.delta_vs_anchor,
        "monotone": e.monotone,
    } for e in entries]


def format_summary(entries: Sequence[ReportEntry]) -> str:
    lines = [f"{'series':<24} {'clusters':>8} {'bits/IPM':>10} {'vs anchor':>10}  monotone"]
    for e in entries:
        clusters = "" if e.clusters is None else str(e.clusters)
        delta = "" if e.delta_vs_anchor is None else f"{e.delta_vs_anchor * 100:+.2f}%"
        lines.append(f"{e.series:<24} {clusters:>8} {e.bits_per_ipm:>10.4f} {delta:>10}  {e.monotone}")
    return "\n".join(lines)
