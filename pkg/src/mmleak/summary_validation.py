"""Path-sensitive validation of allocator/deallocator summaries.

A summary is kept only when the function's CFG has at least one feasible
path that demonstrates the claimed role:

* Allocator: an allocation (primitive, or a call to a validated allocator)
  whose value is still live when the path returns it.
* Deallocator ``argN``: a path that frees the parameter itself or one of its
  plain aliases, or forwards it to a validated deallocator.

Paths are enumerated up to a cap; past the cap the same question is asked of
the SAT encoding in one query.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Set, Tuple

from .cfg import (
    DEFAULT_PATH_CAP,
    CapExceeded,
    Cfg,
    CfgError,
    NodeKind,
    Path,
    Primitives,
    access_root,
    build_cfg,
    enumerate_paths,
)
from .encoding import PathEncoding, path_condition_satisfiable
from .extraction import Codebase, RecordKind
from .solver import DEFAULT_CONFLICT_BUDGET, SolverUnknown
from .summaries import FunctionSummary, HintsFile, Role, mark_validated

log = logging.getLogger(__name__)

MAX_DEPTH = 10


class Outcome(str, Enum):
    VALID = "Valid"
    REJECTED = "Rejected"
    UNKNOWN = "Unknown"


@dataclass(frozen=True)
class ValidationVerdict:
    summary: FunctionSummary
    outcome: Outcome
    witness: Optional[Path] = None
    reason: str = ""
    depth: int = 0

    @property
    def kept(self) -> bool:
        # Unknown means the solver gave up; such summaries are kept
        return self.outcome is not Outcome.REJECTED


@dataclass
class ValidationConfig:
    max_depth: int = MAX_DEPTH
    path_cap: int = DEFAULT_PATH_CAP
    conflict_budget: int = DEFAULT_CONFLICT_BUDGET
    # accept frees of fields derived from the parameter (off: the callee must
    # release the object itself)
    accept_field_frees: bool = False
    primitives: Primitives = field(default_factory=Primitives)


@dataclass(frozen=True)
class AliasSet:
    """Names aliasing a root: ``self_aliases`` hold the same pointer,
    ``field_aliases`` hold pointers derived from one of its fields."""

    self_aliases: FrozenSet[str]
    field_aliases: FrozenSet[str] = frozenset()

    def __contains__(self, expr: str) -> bool:
        return expr in self.self_aliases


def _field_of(expr: str, bases: Set[str]) -> bool:
    root = access_root(expr)
    if root is None or root == expr:
        return expr.startswith("*") and expr[1:] in bases
    # every proper prefix of an access path like a->b.c
    parts = expr.replace("->", ".").split(".")
    prefixes = set()
    acc = parts[0]
    for p in parts[1:]:
        prefixes.add(acc)
        acc = acc + "." + p
    norm_bases = {b.replace("->", ".") for b in bases}
    return bool(prefixes & norm_bases)


def alias_closure(cfg: Cfg, roots: Iterable[str]) -> AliasSet:
    """Flow-insensitive closure over ``v = w`` assignments."""
    self_set: Set[str] = set(roots)
    fields: Set[str] = set()
    assigns = [n for n in cfg.nodes if n.kind is NodeKind.ASSIGN and n.target and n.value]
    changed = True
    while changed:
        changed = False
        for n in assigns:
            v, w = n.target, n.value
            if w in self_set:
                if v not in self_set:
                    self_set.add(v)
                    fields.discard(v)
                    changed = True
            elif (w in fields or _field_of(w, self_set | fields)) and v not in self_set and v not in fields:
                fields.add(v)
                changed = True
    return AliasSet(frozenset(self_set), frozenset(fields))


def compute_alias_set(cfg: Cfg, param_index: int) -> AliasSet:
    if not 0 <= param_index < len(cfg.params):
        raise IndexError(f"{cfg.name} has no parameter {param_index}")
    return alias_closure(cfg, [cfg.params[param_index]])


def _frees_field(expr: str, aliases: AliasSet) -> bool:
    return expr in aliases.field_aliases or _field_of(expr, set(aliases.self_aliases | aliases.field_aliases))


class CallGraphView:
    """On-demand, memoized validation of callees reached through calls.

    ``known`` holds summaries trusted without a body (for example validated
    hints for library functions).  Results computed while a depth or cycle
    cutoff was in effect are not memoized, since they depend on the caller.
    """

    def __init__(self, codebase: Optional[Codebase], config: Optional[ValidationConfig] = None, known: Optional[HintsFile] = None):
        self.codebase = codebase
        self.config = config or ValidationConfig()
        self.known = known or HintsFile()
        self._memo: Dict[Tuple[str, Optional[int]], Tuple[bool, int]] = {}
        self._cfgs: Dict[str, Optional[Cfg]] = {}
        self._active: Set[Tuple[str, Optional[int]]] = set()
        self.truncated = False

    def cfg_for(self, name: str) -> Optional[Cfg]:
        if name not in self._cfgs:
            rec = self.codebase.lookup(name) if self.codebase is not None else None
            cfg = None
            if rec is not None:
                try:
                    cfg = build_cfg(rec, primitives=self.config.primitives)
                except CfgError as exc:
                    log.info("cannot build CFG for %s: %s", name, exc)
            self._cfgs[name] = cfg
        return self._cfgs[name]

    def allocator_depth(self, name: str, depth: int) -> Optional[int]:
        """Chain depth at which ``name`` is shown to allocate, else None."""
        if name in self.config.primitives.alloc or self.known.is_allocator(name):
            return 0
        return self._check(name, None, depth)

    def deallocator_depth(self, name: str, arg: int, depth: int) -> Optional[int]:
        if (name in self.config.primitives.free and arg == 0) or arg in self.known.freed_args(name):
            return 0
        return self._check(name, arg, depth)

    def _check(self, name: str, arg: Optional[int], depth: int) -> Optional[int]:
        key = (name, arg)
        if key in self._memo:
            ok, d = self._memo[key]
            return d if ok else None
        if depth > self.config.max_depth or key in self._active:
            self.truncated = True
            return None
        cfg = self.cfg_for(name)
        if cfg is None:
            self._memo[key] = (False, 0)
            return None
        outer = self.truncated
        self.truncated = False
        self._active.add(key)
        try:
            if arg is None:
                verdict = _validate_allocator(cfg, self, depth)
            else:
                verdict = _validate_deallocator(cfg, arg, self, depth)
        except SolverUnknown:
            verdict = None
            self.truncated = True
        finally:
            self._active.discard(key)
        ok = verdict is not None and verdict[0] is Outcome.VALID
        d = verdict[2] if ok else 0
        if ok or not self.truncated:
            self._memo[key] = (ok, d)
        self.truncated = self.truncated or outer
        return d if ok else None


# -- allocator -------------------------------------------------------------


def _alloc_sites(cfg: Cfg, calls: CallGraphView, depth: int) -> Dict[int, int]:
    """Nodes producing a fresh allocation, mapped to their chain depth."""
    sites = {}
    for i, n in enumerate(cfg.nodes):
        if n.kind is NodeKind.ALLOC:
            sites[i] = 1
        elif n.kind is NodeKind.CALL and n.callee and (n.target or n.returned):
            d = calls.allocator_depth(n.callee, depth + 1)
            if d is not None:
                sites[i] = d + 1
    return sites


def _returns_live(cfg: Cfg, path: Path, k: int) -> bool:
    """Follow the value allocated at ``path.nodes[k]`` to the path's return."""
    site = cfg.nodes[path.nodes[k]]
    if site.returned:
        return True
    if not site.target:
        return False
    live = {site.target}
    for idx in path.nodes[k + 1 :]:
        n = cfg.nodes[idx]
        if n.kind is NodeKind.ASSIGN and n.target:
            if n.value in live:
                live.add(n.target)
            else:
                live.discard(n.target)
        elif n.kind in (NodeKind.ALLOC, NodeKind.CALL) and n.target:
            live.discard(n.target)
        elif n.kind is NodeKind.FREE and n.value in live:
            return False
        elif n.kind is NodeKind.RETURN:
            return n.value in live
        if not live:
            return False
    return False


def _validate_allocator(cfg: Cfg, calls: CallGraphView, depth: int):
    sites = _alloc_sites(cfg, calls, depth)
    if not sites:
        return Outcome.REJECTED, None, 0, "no allocation reaches a return"
    budget = calls.config.conflict_budget
    try:
        paths = enumerate_paths(cfg, calls.config.path_cap)
    except CapExceeded:
        return _allocator_by_encoding(cfg, sites, budget)
    for path in paths:
        hits = [k for k, idx in enumerate(path.nodes) if idx in sites]
        for k in hits:
            if _returns_live(cfg, path, k) and path_condition_satisfiable(cfg, path, budget):
                return Outcome.VALID, path, sites[path.nodes[k]], ""
    return Outcome.REJECTED, None, 0, "no feasible path returns a live allocation"


def _allocator_by_encoding(cfg: Cfg, sites: Dict[int, int], budget: int):
    for site, d in sorted(sites.items()):
        node = cfg.nodes[site]
        enc = PathEncoding(cfg)
        if node.returned:
            ret = cfg.succ(site)[0].dst
            res = enc.query([enc.reach_vars[site]], budget)
            if res:
                return Outcome.VALID, enc.witness(res, ret), d, ""
            continue
        if not node.target:
            continue
        universe = sorted(alias_closure(cfg, [node.target]).self_aliases)
        names = [f"live:{v}" for v in universe]

        def transfer(_edge, dst, node=node, site=site, universe=universe):
            n = cfg.nodes[dst]
            if dst == site:
                return {f"live:{v}": ("const", v == node.target) for v in universe}
            if n.kind is NodeKind.ASSIGN and n.target in universe:
                rule = ("copy", f"live:{n.value}") if n.value in universe else ("const", False)
                return {f"live:{n.target}": rule}
            if n.kind in (NodeKind.ALLOC, NodeKind.CALL) and n.target in universe:
                return {f"live:{n.target}": ("const", False)}
            if n.kind is NodeKind.FREE and n.value in universe:
                return {f"live:{v}": ("andnot", f"live:{v}", f"live:{n.value}") for v in universe}
            return {}

        enc.add_states(names, transfer)
        for r in cfg.returns():
            value = cfg.nodes[r].value
            if value not in universe:
                continue
            res = enc.query([enc.reach_vars[r], enc.state(f"live:{value}", r)], budget)
            if res:
                return Outcome.VALID, enc.witness(res, r), d, ""
    return Outcome.REJECTED, None, 0, "no feasible path returns a live allocation"


# -- deallocator -----------------------------------------------------------


def _release_sites(cfg: Cfg, arg: int, calls: CallGraphView, depth: int) -> Dict[int, int]:
    aliases = compute_alias_set(cfg, arg)
    accept_fields = calls.config.accept_field_frees
    sites = {}
    for i, n in enumerate(cfg.nodes):
        if n.kind is NodeKind.FREE and n.value:
            if n.value in aliases or (accept_fields and _frees_field(n.value, aliases)):
                sites[i] = 1
        elif n.kind is NodeKind.CALL and n.callee:
            for j, a in enumerate(n.args):
                if a in aliases or (accept_fields and _frees_field(a, aliases)):
                    d = calls.deallocator_depth(n.callee, j, depth + 1)
                    if d is not None:
                        sites[i] = d + 1
                        break
    return sites


def _validate_deallocator(cfg: Cfg, arg: int, calls: CallGraphView, depth: int):
    if arg >= len(cfg.params):
        return Outcome.REJECTED, None, 0, f"function has {len(cfg.params)} parameters, no arg{arg}"
    sites = _release_sites(cfg, arg, calls, depth)
    if not sites:
        return Outcome.REJECTED, None, 0, f"arg{arg} is never released"
    budget = calls.config.conflict_budget
    try:
        paths = enumerate_paths(cfg, calls.config.path_cap)
    except CapExceeded:
        enc = PathEncoding(cfg)
        enc.add_states(["released"], lambda _e, dst: {"released": ("const", True)} if dst in sites else {})
        for r in cfg.returns():
            res = enc.query([enc.reach_vars[r], enc.state("released", r)], budget)
            if res:
                path = enc.witness(res, r)
                d = min(sites[i] for i in path.nodes if i in sites)
                return Outcome.VALID, path, d, ""
        return Outcome.REJECTED, None, 0, f"no feasible path releases arg{arg}"
    for path in paths:
        hit = [sites[i] for i in path.nodes if i in sites]
        if hit and path_condition_satisfiable(cfg, path, budget):
            return Outcome.VALID, path, min(hit), ""
    return Outcome.REJECTED, None, 0, f"no feasible path releases arg{arg}"


# -- public entry points ---------------------------------------------------


def _verdict(summary, result) -> ValidationVerdict:
    outcome, path, depth, reason = result
    return ValidationVerdict(summary, outcome, path, reason, depth)


def validate_allocator(summary: FunctionSummary, cfg: Cfg, calls: Optional[CallGraphView] = None) -> ValidationVerdict:
    calls = calls or CallGraphView(None)
    try:
        return _verdict(summary, _validate_allocator(cfg, calls, 1))
    except SolverUnknown as exc:
        return ValidationVerdict(summary, Outcome.UNKNOWN, reason=str(exc))


def validate_deallocator(summary: FunctionSummary, cfg: Cfg, calls: Optional[CallGraphView] = None) -> ValidationVerdict:
    calls = calls or CallGraphView(None)
    try:
        return _verdict(summary, _validate_deallocator(cfg, summary.arg, calls, 1))
    except SolverUnknown as exc:
        return ValidationVerdict(summary, Outcome.UNKNOWN, reason=str(exc))


def validate_summary(summary: FunctionSummary, calls: CallGraphView) -> ValidationVerdict:
    rec = calls.codebase.lookup(summary.name) if calls.codebase is not None else None
    if rec is None:
        return ValidationVerdict(summary, Outcome.REJECTED, reason="no definition in the codebase")
    cfg = calls.cfg_for(summary.name)
    if cfg is None:
        return ValidationVerdict(summary, Outcome.REJECTED, reason="function body could not be analyzed")
    if summary.role is Role.ALLOCATOR:
        return validate_allocator(summary, cfg, calls)
    return validate_deallocator(summary, cfg, calls)


def validate_summaries(
    summaries: Iterable[FunctionSummary],
    codebase: Codebase,
    config: Optional[ValidationConfig] = None,
    known: Optional[HintsFile] = None,
) -> List[ValidationVerdict]:
    """Validate every summary; deallocators go first, then allocators.

    Rejected summaries get one more round once everything else is settled,
    which picks up results that were cut off by a call cycle the first time.
    """
    summaries = list(summaries)
    calls = CallGraphView(codebase, config, known)
    order = sorted(range(len(summaries)), key=lambda i: summaries[i].role is Role.ALLOCATOR)
    verdicts: Dict[int, ValidationVerdict] = {}
    for i in order:
        verdicts[i] = validate_summary(summaries[i], calls)
    for i in order:
        if verdicts[i].outcome is Outcome.REJECTED and calls.codebase.lookup(summaries[i].name) is not None:
            verdicts[i] = validate_summary(summaries[i], calls)
    return [verdicts[i] for i in range(len(summaries))]


def validated_hints(verdicts: Sequence[ValidationVerdict]) -> HintsFile:
    return HintsFile.from_summaries(mark_validated(v.summary, v.outcome is Outcome.VALID) for v in verdicts if v.kept)


def rejection_report(verdicts: Sequence[ValidationVerdict]) -> str:
    """Tab-separated report of rejected and unknown summaries."""
    lines = ["name\trole\ttarget\toutcome\treason"]
    for v in verdicts:
        if v.outcome is Outcome.VALID:
            continue
        s = v.summary
        lines.append(f"{s.name}\t{s.role.value}\t{s.target}\t{v.outcome.value}\t{v.reason}")
    return "\n".join(lines) + "\n"
