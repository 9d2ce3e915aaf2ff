"""Leak feasibility over a CFG, warning filtering, and the internal scanner.

For one allocation site the pointer it produces is followed through three
per-node flags: ``alloc`` (allocated at or before the node), ``freed`` and
``escaped``.  A leak is feasible when some satisfiable Entry-to-Return path
ends with the allocation live, not freed and not escaped.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

from .analyzer_bridge import LeakWarning, Source, Status, TraceStep
from .cfg import Cfg, CfgError, CfgNode, NodeKind, Path, Polarity, Primitives, build_cfg
from .encoding import PathEncoding
from .extraction import Codebase, FunctionRecord, SourceSpan
from .solver import DEFAULT_CONFLICT_BUDGET, Formula, SolverUnknown
from .summaries import HintsFile
from .summary_validation import alias_closure

log = logging.getLogger(__name__)

LINE_TOLERANCE = 2
STATES = ("alloc", "freed", "escaped")
NOT_ANALYZABLE = "not analyzable"


class FeasibilityStatus(str, Enum):
    FEASIBLE = "Feasible"
    INFEASIBLE = "Infeasible"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class FeasibilityVerdict:
    status: FeasibilityStatus
    witness: Optional[Path] = None
    exit_node: Optional[int] = None
    reason: str = ""

    @property
    def retains(self) -> bool:
        return self.status is not FeasibilityStatus.INFEASIBLE


@dataclass
class LeakEncoding:
    site: int
    edge_vars: Dict[int, int]
    reach_vars: Dict[int, int]
    state_vars: Dict[int, Tuple[int, int, int]]  # node -> (alloc, freed, escaped)
    formula: Formula
    path_encoding: PathEncoding

    def query(self, r: int, conflict_budget: int = DEFAULT_CONFLICT_BUDGET):
        a, f, e = self.state_vars[r]
        return self.path_encoding.query([self.reach_vars[r], a, -f, -e], conflict_budget)


def tracked_aliases(cfg: Cfg, site: int) -> frozenset:
    target = cfg.nodes[site].target
    if not target:
        return frozenset()
    return alias_closure(cfg, [target]).self_aliases


def _check_site(cfg: Cfg, site: int) -> CfgNode:
    if not 0 <= site < len(cfg.nodes) or cfg.nodes[site].kind is not NodeKind.ALLOC:
        raise ValueError(f"{cfg.name}: node {site} is not an Alloc node")
    return cfg.nodes[site]


def edge_effects(cfg: Cfg, site: int, aliases, src: int, dst: int, polarity: Polarity, null_guard: bool = True) -> Dict[str, bool]:
    """Flags forced when control moves along ``src -> dst``; others carry over."""
    out: Dict[str, bool] = {}
    n = cfg.nodes[dst]
    if dst == site:
        out["alloc"] = True
        if n.returned:
            out["escaped"] = True
    elif null_guard and cfg.nodes[src].null_test is not None:
        expr, arm = cfg.nodes[src].null_test
        if expr in aliases and polarity is (Polarity.TRUE if arm else Polarity.FALSE):
            # on this arm the tracked pointer is NULL: nothing was allocated
            out["alloc"] = False
    if n.kind is NodeKind.FREE and n.value in aliases:
        out["freed"] = True
    elif n.kind is NodeKind.ESCAPE and (n.value in aliases or any(a in aliases for a in n.args)):
        out["escaped"] = True
    elif n.kind is NodeKind.RETURN and n.value in aliases:
        out["escaped"] = True
    return out


def encode_leak_feasibility(cfg: Cfg, allocation_site: int, null_guard: bool = True) -> LeakEncoding:
    _check_site(cfg, allocation_site)
    aliases = tracked_aliases(cfg, allocation_site)
    enc = PathEncoding(cfg)

    def transfer(i, dst):
        e = cfg.edges[i]
        forced = edge_effects(cfg, allocation_site, aliases, e.src, dst, e.polarity, null_guard)
        return {k: ("const", v) for k, v in forced.items()}

    enc.add_states(STATES, transfer)
    state_vars = {n: tuple(enc.state(s, n) for s in STATES) for n in range(len(cfg.nodes))}
    return LeakEncoding(allocation_site, enc.edge_vars, enc.reach_vars, state_vars, enc.formula, enc)


def check_leak_feasible(
    cfg: Cfg,
    allocation_site: int,
    null_guard: bool = True,
    conflict_budget: int = DEFAULT_CONFLICT_BUDGET,
) -> FeasibilityVerdict:
    enc = encode_leak_feasibility(cfg, allocation_site, null_guard)
    try:
        for r in cfg.returns():
            res = enc.query(r, conflict_budget)
            if res:
                return FeasibilityVerdict(FeasibilityStatus.FEASIBLE, enc.path_encoding.witness(res, r), r)
    except SolverUnknown as exc:
        return FeasibilityVerdict(FeasibilityStatus.UNKNOWN, reason=str(exc))
    return FeasibilityVerdict(FeasibilityStatus.INFEASIBLE)


def replay_path(cfg: Cfg, path: Path, allocation_site: int, null_guard: bool = True) -> Dict[str, bool]:
    """Run the node effects along ``path``; returns the flags at its last node."""
    aliases = tracked_aliases(cfg, allocation_site)
    state = dict.fromkeys(STATES, False)
    taken = dict(path.branch_literals)
    for u, v in zip(path.nodes, path.nodes[1:]):
        pol = Polarity.UNCONDITIONAL
        if u in taken:
            pol = Polarity.TRUE if taken[u] else Polarity.FALSE
        state.update(edge_effects(cfg, allocation_site, aliases, u, v, pol, null_guard))
    return state


def witness_literals(cfg: Cfg, path: Path) -> Tuple[str, ...]:
    return tuple(f"{cfg.nodes[b].cond}={'T' if t else 'F'}" for b, t in path.branch_literals)


# -- warning filter ----------------------------------------------------------


def _sites_near(cfg: Cfg, line: Optional[int]) -> List[int]:
    sites = cfg.of_kind(NodeKind.ALLOC)
    if line is None:
        return sites
    near = [i for i in sites if abs(cfg.nodes[i].line - line) <= LINE_TOLERANCE]
    return near or sites


def assess_warning(
    warning: LeakWarning,
    codebase: Codebase,
    hints: Optional[HintsFile],
    primitives: Optional[Primitives] = None,
    cfg_cache: Optional[Dict[str, Optional[Cfg]]] = None,
) -> LeakWarning:
    rec = codebase.lookup(warning.function, warning.file) if warning.function else None
    if rec is None and warning.function == "":
        rec = codebase.function_at(warning.file, warning.line)
    cfg = None
    if rec is not None:
        key = f"{rec.span.file}:{rec.name}"
        if cfg_cache is not None and key in cfg_cache:
            cfg = cfg_cache[key]
        else:
            try:
                cfg = build_cfg(rec, hints, primitives)
            except CfgError as exc:
                log.info("%s: %s", rec.name, exc)
            if cfg_cache is not None:
                cfg_cache[key] = cfg
    sites = _sites_near(cfg, warning.alloc_line) if cfg is not None else []
    if not sites:
        return warning.advance(Status.RETAINED, tags=sorted(set(warning.tags) | {NOT_ANALYZABLE}), feasibility=FeasibilityStatus.UNKNOWN.value)
    unknown = False
    for s in sites:
        v = check_leak_feasible(cfg, s)
        if v.status is FeasibilityStatus.FEASIBLE:
            return warning.advance(Status.RETAINED, feasibility=v.status.value, witness=witness_literals(cfg, v.witness))
        unknown = unknown or v.status is FeasibilityStatus.UNKNOWN
    if unknown:
        return warning.advance(Status.RETAINED, feasibility=FeasibilityStatus.UNKNOWN.value)
    return warning.advance(Status.DISCARDED, feasibility=FeasibilityStatus.INFEASIBLE.value)


def filter_warnings(
    warnings: Sequence[LeakWarning],
    codebase: Codebase,
    hints: Optional[HintsFile] = None,
    primitives: Optional[Primitives] = None,
) -> Tuple[List[LeakWarning], List[LeakWarning]]:
    retained, discarded = [], []
    cache: Dict[str, Optional[Cfg]] = {}
    for w in warnings:
        out = assess_warning(w, codebase, hints, primitives, cache)
        (retained if out.status is Status.RETAINED else discarded).append(out)
    return retained, discarded


# -- internal scanner --------------------------------------------------------

_LABEL = re.compile(r"^\s*[A-Za-z_]\w*\s*:(?!:)")


def exit_shape(record: FunctionRecord, cfg: Cfg, ret: int) -> str:
    """'goto-label exit', 'early return' or 'final return' for a Return node."""
    lines = record.body.splitlines()
    idx = cfg.nodes[ret].line - record.span.start_line
    if 0 <= idx < len(lines):
        if _LABEL.match(lines[idx]) and not lines[idx].lstrip().startswith(("case ", "default")):
            return "goto-label exit"
        j = idx - 1
        while j >= 0 and not lines[j].strip():
            j -= 1
        if j >= 0 and _LABEL.match(lines[j]) and lines[j].rstrip().endswith(":") and not lines[j].lstrip().startswith(("case ", "default")):
            return "goto-label exit"
    last = max((cfg.nodes[r].line for r in cfg.returns()), default=0)
    if cfg.nodes[ret].text != "implicit return" and cfg.nodes[ret].line < last:
        return "early return"
    return "final return"


def _tracks_local_pointer(node: CfgNode) -> bool:
    # allocations stored straight into a field or through a pointer belong to
    # the containing object; they are not tracked per site
    t = node.target
    return node.returned or t is None or re.fullmatch(r"[A-Za-z_]\w*", t) is not None


def scan_function(
    record: FunctionRecord,
    hints: Optional[HintsFile] = None,
    primitives: Optional[Primitives] = None,
    diagnostics: Optional[List[str]] = None,
) -> List[LeakWarning]:
    try:
        cfg = build_cfg(record, hints, primitives)
    except CfgError as exc:
        if diagnostics is not None:
            diagnostics.append(f"{record.span.file}:{record.span.start_line}: {exc}")
        return []
    out: List[LeakWarning] = []
    seen = set()
    file = record.span.file
    for site in cfg.of_kind(NodeKind.ALLOC):
        node = cfg.nodes[site]
        if not _tracks_local_pointer(node):
            continue
        v = check_leak_feasible(cfg, site)
        if v.status is not FeasibilityStatus.FEASIBLE:
            continue
        ret = cfg.nodes[v.exit_node]
        key = (file, record.name, node.line, ret.line)
        if key in seen:
            continue
        seen.add(key)
        shape = exit_shape(record, cfg, v.exit_node)
        what = node.target or "allocation"
        by = node.callee or "allocator"
        trace = [TraceStep(SourceSpan(file, cfg.nodes[i].line, cfg.nodes[i].line), cfg.nodes[i].label()) for i in v.witness.nodes[1:]]
        out.append(
            LeakWarning(
                Source.INTERNAL,
                file,
                record.name,
                ret.line,
                message=f"'{what}' allocated by {by}() at line {node.line} is not freed on the {shape} at line {ret.line}",
                allocation_site=SourceSpan(file, node.line, node.line),
                trace=trace,
                rule="mmleak/per-branch-leak",
                tags=[shape],
                feasibility=FeasibilityStatus.FEASIBLE.value,
                witness=witness_literals(cfg, v.witness),
            )
        )
    return out
