"""Model review of retained warnings, one function per request."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from .analyzer_bridge import LeakWarning, Status
from .summaries import fill_template, extract_json_object, load_template

log = logging.getLogger(__name__)

MARKER = "// <-- reported bug"
VERDICT_KEYS = ("verdict", "confidence", "reason", "bug_indices")
BUG_TYPE_DESC = "memory leak (allocated memory that is not released or handed off on some path)"


class TriageParseError(ValueError):
    pass


@dataclass(frozen=True)
class TriageVerdict:
    verdict: bool
    confidence: float
    reason: str
    bug_indices: Tuple[int, ...] = ()


def _source_line(source_lines: Sequence[str], first_line: int, line: int) -> Optional[str]:
    idx = line - first_line
    if 0 <= idx < len(source_lines):
        return source_lines[idx].strip()
    return None


def format_issues(warnings: Sequence[LeakWarning], source_lines: Sequence[str], first_line: int) -> str:
    blocks = []
    for i, w in enumerate(warnings, 1):
        lines = [f"{i}. Line {w.line}: {w.message or w.category}"]
        if w.allocation_site is not None:
            lines.append(f"   Allocation site: {w.allocation_site}")
        if w.trace:
            lines.append("   Analysis path:")
            for step in w.trace:
                lines.append(f"     - {step.span}: {step.text}".rstrip())
                code = _source_line(source_lines, first_line, step.span.start_line) if step.span.file == w.file else None
                if code:
                    lines.append(f"       `{code}`")
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def mark_source(source: str, first_line: int, lines_to_mark, diagnostics: Optional[List[str]] = None) -> str:
    out = source.splitlines()
    for line in sorted(set(lines_to_mark)):
        idx = line - first_line
        if 0 <= idx < len(out):
            if not out[idx].endswith(MARKER):
                out[idx] = f"{out[idx]}  {MARKER}"
        elif diagnostics is not None:
            diagnostics.append(f"line {line} is outside the function source (lines {first_line}-{first_line + len(out) - 1}); no marker")
    return "\n".join(out)


def build_triage_prompt(
    warnings: Sequence[LeakWarning],
    function_source: str,
    project: str,
    first_line: int = 1,
    diagnostics: Optional[List[str]] = None,
) -> str:
    if not warnings:
        raise ValueError("at least one warning is required")
    functions = {(w.file, w.function) for w in warnings}
    if len(functions) != 1:
        raise ValueError("warnings must all belong to one function")
    w0 = warnings[0]
    src_lines = function_source.splitlines()
    return fill_template(
        load_template("triage"),
        {
            "project_name": project,
            "file": w0.file,
            "function": w0.function,
            "category": w0.category,
            "issues": format_issues(warnings, src_lines, first_line),
            "source": mark_source(function_source, first_line, [w.line for w in warnings], diagnostics),
            "bug_type_desc": BUG_TYPE_DESC,
        },
    )


def parse_triage_verdict(response: str, n_issues: Optional[int] = None) -> TriageVerdict:
    doc = extract_json_object(response or "", VERDICT_KEYS)
    if doc is None:
        raise TriageParseError("no JSON object with keys " + ", ".join(VERDICT_KEYS))
    verdict, confidence, reason, indices = (doc[k] for k in VERDICT_KEYS)
    if not isinstance(verdict, bool):
        raise TriageParseError("'verdict' must be a boolean")
    if isinstance(confidence, bool) or not isinstance(confidence, (int, float)) or not 0 <= confidence <= 1:
        raise TriageParseError("'confidence' must be a number in [0, 1]")
    if not isinstance(reason, str):
        raise TriageParseError("'reason' must be a string")
    if not isinstance(indices, list) or any(isinstance(i, bool) or not isinstance(i, int) for i in indices):
        raise TriageParseError("'bug_indices' must be a list of integers")
    if any(i < 1 or (n_issues is not None and i > n_issues) for i in indices):
        raise TriageParseError(f"'bug_indices' out of range: {indices}")
    if not verdict and indices:
        raise TriageParseError("'bug_indices' must be empty when verdict is false")
    return TriageVerdict(verdict, float(confidence), reason, tuple(indices))


def apply_verdict(warnings: Sequence[LeakWarning], verdict: TriageVerdict) -> List[LeakWarning]:
    keep = set(verdict.bug_indices) if verdict.verdict else set()
    return [
        w.advance(Status.TRIAGED, verdict="true" if i in keep else "false", notes=verdict.reason)
        for i, w in enumerate(warnings, 1)
    ]


def mark_untriaged(warnings: Sequence[LeakWarning], reason: str) -> List[LeakWarning]:
    return [w.advance(Status.UNTRIAGED, notes=reason) for w in warnings]


def triage_function(
    warnings: Sequence[LeakWarning],
    function_source: str,
    project: str,
    ask: Callable[[str], str],
    first_line: int = 1,
    diagnostics: Optional[List[str]] = None,
) -> List[LeakWarning]:
    """Review the warnings of one function; failures leave them Untriaged."""
    prompt = build_triage_prompt(warnings, function_source, project, first_line, diagnostics)
    try:
        response = ask(prompt)
    except Exception as exc:  # transport failures of any kind degrade to Untriaged
        log.info("triage request failed: %s", exc)
        return mark_untriaged(warnings, f"model request failed: {exc}")
    try:
        verdict = parse_triage_verdict(response, len(warnings))
    except TriageParseError as exc:
        return mark_untriaged(warnings, f"unparseable verdict: {exc}")
    return apply_verdict(warnings, verdict)


def group_by_function(warnings: Sequence[LeakWarning]) -> Dict[Tuple[str, str], List[LeakWarning]]:
    groups: Dict[Tuple[str, str], List[LeakWarning]] = {}
    for w in warnings:
        groups.setdefault((w.file, w.function), []).append(w)
    return groups
