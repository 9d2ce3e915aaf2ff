"""Exchange with external analyzers.

Outbound: a CodeQL data-extension pack and Infer Pulse pattern flags built
from validated summaries.  Inbound: SARIF results from CodeQL and Infer's
report.json, normalized into :class:`LeakWarning` records.
"""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path as FsPath
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .extraction import SourceSpan
from .summaries import HintsFile

log = logging.getLogger(__name__)

REPORT_VERSION = 1
CODEQL_PACK = "codeql/cpp-all"
# matches nothing a C identifier could spell
NO_MATCH_PATTERN = "^$"
CODEQL_LEAK_RULES = (
    "cpp/memory-never-freed",
    "cpp/memory-may-not-be-freed",
    "cpp/memory-leak",
)
INFER_LEAK_TYPES = ("MEMORY_LEAK", "MEMORY_LEAK_C", "MEMORY_LEAK_CPP", "PULSE_MEMORY_LEAK", "PULSE_MEMORY_LEAK_C", "PULSE_MEMORY_LEAK_CPP")
LINE_TOLERANCE = 2


class ReportFormatError(ValueError):
    pass


class Source(str, Enum):
    INTERNAL = "Internal"
    CODEQL = "CodeQL"
    INFER = "Infer"


class Status(str, Enum):
    RAW = "Raw"
    RETAINED = "FeasibilityRetained"
    DISCARDED = "FeasibilityDiscarded"
    TRIAGED = "Triaged"
    UNTRIAGED = "Untriaged"


_STATUS_RANK = {Status.RAW: 0, Status.RETAINED: 1, Status.DISCARDED: 1, Status.TRIAGED: 2, Status.UNTRIAGED: 2}


@dataclass(frozen=True)
class TraceStep:
    span: SourceSpan
    text: str = ""


@dataclass
class LeakWarning:
    source: Source
    file: str
    function: str
    line: int
    message: str = ""
    category: str = "memory leak"
    allocation_site: Optional[SourceSpan] = None
    trace: List[TraceStep] = field(default_factory=list)
    status: Status = Status.RAW
    verdict: Optional[str] = None  # set with Status.TRIAGED
    rule: str = ""
    sources: Tuple[Source, ...] = ()
    tags: List[str] = field(default_factory=list)
    feasibility: Optional[str] = None
    witness: Tuple[str, ...] = ()
    notes: str = ""

    def __post_init__(self):
        if not self.sources:
            self.sources = (self.source,)

    @property
    def alloc_line(self) -> Optional[int]:
        return self.allocation_site.start_line if self.allocation_site else None

    def advance(self, status: Status, **changes) -> "LeakWarning":
        if _STATUS_RANK[status] < _STATUS_RANK[self.status]:
            raise ValueError(f"status cannot move from {self.status.value} to {status.value}")
        return replace(self, status=status, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["source"] = self.source.value
        d["sources"] = [s.value for s in self.sources]
        d["status"] = self.status.value
        d["allocation_site"] = self.allocation_site.to_dict() if self.allocation_site else None
        d["trace"] = [{"span": s.span.to_dict(), "text": s.text} for s in self.trace]
        d["witness"] = list(self.witness)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LeakWarning":
        d = dict(d)
        d["source"] = Source(d["source"])
        d["sources"] = tuple(Source(s) for s in d.get("sources", ()))
        d["status"] = Status(d["status"])
        if d.get("allocation_site"):
            d["allocation_site"] = SourceSpan.from_dict(d["allocation_site"])
        d["trace"] = [TraceStep(SourceSpan.from_dict(s["span"]), s.get("text", "")) for s in d.get("trace", [])]
        d["witness"] = tuple(d.get("witness", ()))
        return cls(**d)


# -- emission --------------------------------------------------------------


def emit_codeql_extension(hints: HintsFile) -> str:
    """Render the data-extension YAML; rows sorted by name (then argument)."""

    def block(extensible: str, rows: List[str]) -> List[str]:
        out = [
            "  - addsTo:",
            f"      pack: {CODEQL_PACK}",
            f"      extensible: {extensible}",
        ]
        if not rows:
            return out + ["    data: []"]
        return out + ["    data:"] + [f"      - {r}" for r in rows]

    alloc_rows = [f'["", "", false, {json.dumps(name)}, "", "", "", true]' for name in hints.allocators()]
    dealloc_rows = [
        f'["", "", false, {json.dumps(name)}, "{arg}"]'
        for name, args in sorted(hints.deallocators().items())
        for arg in sorted(args)
    ]
    lines = ["extensions:"]
    lines += block("allocationFunctionModel", alloc_rows)
    lines += block("deallocationFunctionModel", dealloc_rows)
    return "\n".join(lines) + "\n"


def emit_qlpack(name: str = "mmleak/validated-summaries", version: str = "0.0.1") -> str:
    return (
        f"name: {name}\n"
        f"version: {version}\n"
        "library: true\n"
        "extensionTargets:\n"
        f"  {CODEQL_PACK}: \"*\"\n"
        "dataExtensions:\n"
        "  - models/*.yml\n"
    )


def _alternation(names: Sequence[str]) -> str:
    if not names:
        return NO_MATCH_PATTERN
    return "^(" + "|".join(re.escape(n) for n in sorted(set(names))) + ")$"


def emit_infer_flags(hints: HintsFile) -> Tuple[str, str]:
    return _alternation(hints.allocators()), _alternation(list(hints.deallocators()))


def write_codeql_pack(hints: HintsFile, out_dir) -> FsPath:
    out = FsPath(out_dir)
    (out / "models").mkdir(parents=True, exist_ok=True)
    (out / "qlpack.yml").write_text(emit_qlpack(), encoding="utf-8")
    path = out / "models" / "memory.model.yml"
    path.write_text(emit_codeql_extension(hints), encoding="utf-8")
    return path


def write_infer_flags(hints: HintsFile, path) -> None:
    alloc, free = emit_infer_flags(hints)
    FsPath(path).write_text(f"alloc={alloc}\nfree={free}\n", encoding="utf-8")


# -- ingestion -------------------------------------------------------------


def _load_json(path) -> object:
    path = FsPath(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ReportFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc


def _need(cond: bool, where: str, what: str) -> None:
    if not cond:
        raise ReportFormatError(f"{where}: {what}")


def _sarif_location(loc: dict, where: str) -> Tuple[str, int]:
    phys = loc.get("physicalLocation") if isinstance(loc, dict) else None
    _need(isinstance(phys, dict), where, "missing physicalLocation")
    uri = (phys.get("artifactLocation") or {}).get("uri")
    line = (phys.get("region") or {}).get("startLine")
    _need(isinstance(uri, str) and isinstance(line, int), where, "location needs artifactLocation.uri and region.startLine")
    return uri, line


def ingest_codeql_results(path, rules: Sequence[str] = CODEQL_LEAK_RULES, diagnostics: Optional[List[str]] = None) -> List[LeakWarning]:
    doc = _load_json(path)
    _need(isinstance(doc, dict), str(path), "top level must be an object")
    runs = doc.get("runs", [])
    _need(isinstance(runs, list), f"{path}: runs", "must be a list")
    out: List[LeakWarning] = []
    skipped = Counter()
    for ri, run in enumerate(runs):
        results = run.get("results", []) if isinstance(run, dict) else None
        _need(isinstance(results, list), f"{path}: runs[{ri}].results", "must be a list")
        for k, res in enumerate(results):
            where = f"{path}: runs[{ri}].results[{k}]"
            _need(isinstance(res, dict), where, "must be an object")
            rule = res.get("ruleId") or (res.get("rule") or {}).get("id", "")
            if rule not in rules:
                skipped[rule] += 1
                continue
            locs = res.get("locations") or []
            _need(isinstance(locs, list) and locs, where, "missing locations")
            file, line = _sarif_location(locs[0], where + ".locations[0]")
            function = ""
            logical = locs[0].get("logicalLocations") or []
            if logical and isinstance(logical[0], dict):
                function = logical[0].get("name", "") or ""
            trace: List[TraceStep] = []
            for fi, flow in enumerate(res.get("codeFlows") or []):
                for ti, tflow in enumerate(flow.get("threadFlows") or []):
                    for si, step in enumerate(tflow.get("locations") or []):
                        swhere = f"{where}.codeFlows[{fi}].threadFlows[{ti}].locations[{si}]"
                        loc = step.get("location") if isinstance(step, dict) else None
                        sfile, sline = _sarif_location(loc, swhere)
                        text = ((loc.get("message") or {}).get("text")) or ""
                        trace.append(TraceStep(SourceSpan(sfile, sline, sline), text))
                    break
                break
            alloc = trace[0].span if trace else None
            out.append(
                LeakWarning(
                    Source.CODEQL,
                    file,
                    function,
                    line,
                    message=(res.get("message") or {}).get("text", ""),
                    allocation_site=alloc,
                    trace=trace,
                    rule=rule,
                )
            )
    _report_skips(skipped, "CodeQL", diagnostics)
    return out


def _report_skips(skipped: Counter, who: str, diagnostics: Optional[List[str]]) -> None:
    for rule, n in sorted(skipped.items()):
        msg = f"{who}: skipped {n} result(s) of non-leak category {rule!r}"
        log.info(msg)
        if diagnostics is not None:
            diagnostics.append(msg)


_ON_LINE = re.compile(r"(?:allocated|acquired)[^.]*?\bon line (\d+)")


def ingest_infer_results(path, bug_types: Sequence[str] = INFER_LEAK_TYPES, diagnostics: Optional[List[str]] = None) -> List[LeakWarning]:
    doc = _load_json(path)
    _need(isinstance(doc, list), str(path), "top level must be a list of issues")
    out: List[LeakWarning] = []
    skipped = Counter()
    for k, issue in enumerate(doc):
        where = f"{path}: [{k}]"
        _need(isinstance(issue, dict), where, "must be an object")
        bug = issue.get("bug_type", "")
        if bug not in bug_types:
            skipped[bug] += 1
            continue
        file, line = issue.get("file"), issue.get("line")
        _need(isinstance(file, str) and isinstance(line, int), where, "needs string 'file' and integer 'line'")
        qualifier = issue.get("qualifier", "") or ""
        trace = []
        for si, step in enumerate(issue.get("bug_trace") or []):
            _need(isinstance(step, dict) and isinstance(step.get("line_number"), int), f"{where}.bug_trace[{si}]", "needs integer 'line_number'")
            sfile = step.get("filename", file)
            trace.append(TraceStep(SourceSpan(sfile, step["line_number"], step["line_number"]), step.get("description", "")))
        m = _ON_LINE.search(qualifier)
        alloc = SourceSpan(file, int(m.group(1)), int(m.group(1))) if m else (trace[0].span if trace else None)
        out.append(
            LeakWarning(
                Source.INFER,
                file,
                issue.get("procedure", "") or "",
                line,
                message=qualifier,
                allocation_site=alloc,
                trace=trace,
                rule=bug,
            )
        )
    _report_skips(skipped, "Infer", diagnostics)
    return out


# -- merging and reporting -------------------------------------------------


def _same_leak(a: LeakWarning, b: LeakWarning) -> bool:
    if a.file != b.file or a.function != b.function:
        return False
    la, lb = a.alloc_line, b.alloc_line
    if la is None or lb is None:
        return la is None and lb is None and a.line == b.line
    return abs(la - lb) <= LINE_TOLERANCE


@dataclass
class MergeResult:
    warnings: List[LeakWarning]
    per_source: Dict[str, int]
    overlap: int
    # number of merged warnings per exact source combination
    combinations: Dict[Tuple[str, ...], int]


def merge_warnings(lists: Iterable[Sequence[LeakWarning]]) -> MergeResult:
    """Merge warnings that name the same file, function and allocation line (±2)."""
    merged: List[LeakWarning] = []
    for warnings in lists:
        for w in warnings:
            for i, m in enumerate(merged):
                if _same_leak(m, w):
                    srcs = tuple(sorted(set(m.sources) | set(w.sources), key=lambda s: s.value))
                    tags = sorted(set(m.tags) | set(w.tags) | ({"multi-source"} if len(srcs) > 1 else set()))
                    merged[i] = replace(m, sources=srcs, tags=tags, trace=m.trace or w.trace)
                    break
            else:
                merged.append(replace(w, tags=list(w.tags)))
    per_source = Counter(s.value for w in merged for s in w.sources)
    combos = Counter(tuple(s.value for s in w.sources) for w in merged)
    overlap = sum(1 for w in merged if len(w.sources) > 1)
    return MergeResult(merged, dict(sorted(per_source.items())), overlap, dict(sorted(combos.items())))


def write_report(warnings: Sequence[LeakWarning], path, counters: Optional[Dict[str, int]] = None) -> None:
    doc = {
        "version": REPORT_VERSION,
        "counters": dict(counters or {}),
        "warnings": [w.to_dict() for w in warnings],
    }
    FsPath(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_report(path) -> Tuple[List[LeakWarning], Dict[str, int]]:
    doc = _load_json(path)
    _need(isinstance(doc, dict) and doc.get("version") == REPORT_VERSION, str(path), f"expected report version {REPORT_VERSION}")
    return [LeakWarning.from_dict(w) for w in doc["warnings"]], doc.get("counters", {})


def render_table(warnings: Sequence[LeakWarning]) -> str:
    header = ("file", "line", "function", "alloc", "sources", "status", "verdict")
    rows = [header]
    for w in warnings:
        rows.append(
            (
                w.file,
                str(w.line),
                w.function,
                str(w.alloc_line or "-"),
                "+".join(s.value for s in w.sources),
                w.status.value,
                w.verdict or "-",
            )
        )
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(widths[i]) for i, c in enumerate(r)).rstrip() for r in rows) + "\n"
