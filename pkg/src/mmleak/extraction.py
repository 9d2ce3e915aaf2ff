"""Extract function records, function-like macros and pointer typedefs from C/C++ trees."""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import tree_sitter_c
import tree_sitter_cpp
from tree_sitter import Language, Node, Parser

logger = logging.getLogger(__name__)

C_LANGUAGE = Language(tree_sitter_c.language())
CPP_LANGUAGE = Language(tree_sitter_cpp.language())

DEFAULT_EXTENSIONS = (".c", ".h", ".cc", ".cpp", ".cxx", ".hpp")
C_EXTENSIONS = (".c", ".h")
ENTRY_POINTS = ("main", "wmain")

INDEX_VERSION = 1

_NAME_NODES = {
    "identifier",
    "field_identifier",
    "type_identifier",
    "qualified_identifier",
    "destructor_name",
    "operator_name",
    "template_function",
}
_CONDITIONAL_REGIONS = {"preproc_if", "preproc_ifdef", "preproc_else", "preproc_elif"}
_NOT_CALLS = {"if", "for", "while", "switch", "return", "sizeof", "defined", "do", "_Alignof", "alignof"}
_COMMENT_OR_STRING = re.compile(r'/\*.*?\*/|//[^\n]*|"(?:\\.|[^"\\])*"|\'(?:\\.|[^\'\\])*\'', re.S)
_IDENT = re.compile(r"[A-Za-z_]\w*")


class ExtractionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SourceSpan:
    file: str
    start_line: int
    end_line: int

    def __post_init__(self):
        if self.start_line < 1:
            raise ValueError(f"start_line must be >= 1, got {self.start_line}")
        if self.end_line < self.start_line:
            raise ValueError("end_line precedes start_line")

    def contains(self, line: int) -> bool:
        return self.start_line <= line <= self.end_line

    def to_dict(self) -> dict:
        return {"file": self.file, "start_line": self.start_line, "end_line": self.end_line}

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSpan":
        return cls(d["file"], int(d["start_line"]), int(d["end_line"]))

    def __str__(self) -> str:
        if self.start_line == self.end_line:
            return f"{self.file}:{self.start_line}"
        return f"{self.file}:{self.start_line}-{self.end_line}"


class RecordKind(str, Enum):
    FUNCTION = "Function"
    MACRO = "Macro"


@dataclass(frozen=True)
class FunctionRecord:
    """One function definition or function-like macro.

    ``callees`` holds unique direct callee names in order of first occurrence.
    ``body`` is the full definition text; for macros it is the ``#define`` line.
    """

    name: str
    return_type: str
    params: Tuple[Tuple[str, str], ...]
    body: str
    callees: Tuple[str, ...]
    kind: RecordKind
    span: SourceSpan
    language: str = "c"

    def __post_init__(self):
        if not self.name:
            raise ValueError("record name must be nonempty")

    @property
    def arity(self) -> int:
        return len(self.params)

    @property
    def param_names(self) -> List[str]:
        return [p for p, _ in self.params]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "return_type": self.return_type,
            "params": [[n, t] for n, t in self.params],
            "callees": list(self.callees),
            "span": self.span.to_dict(),
            "language": self.language,
            "body": self.body,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionRecord":
        return cls(
            name=d["name"],
            return_type=d["return_type"],
            params=tuple((n, t) for n, t in d["params"]),
            body=d["body"],
            callees=tuple(d["callees"]),
            kind=RecordKind(d["kind"]),
            span=SourceSpan.from_dict(d["span"]),
            language=d.get("language", "c"),
        )


@dataclass
class PointerAliasTable:
    """Typedef name -> underlying type text, with pointer-likeness resolved transitively."""

    aliases: Dict[str, str] = field(default_factory=dict)
    pointer_like: Dict[str, bool] = field(default_factory=dict)
    cycles: List[str] = field(default_factory=list)

    @classmethod
    def build(cls, typedefs: Dict[str, str]) -> "PointerAliasTable":
        table = cls(aliases=dict(sorted(typedefs.items())))
        state: Dict[str, int] = {}  # 1 = in progress, 2 = done

        def resolve(name: str) -> bool:
            if state.get(name) == 2:
                return table.pointer_like[name]
            if state.get(name) == 1:
                if name not in table.cycles:
                    table.cycles.append(name)
                return False
            state[name] = 1
            text = _strip_comments(table.aliases[name])
            result = "*" in text
            if not result:
                for ident in _IDENT.findall(text):
                    if ident != name and ident in table.aliases and resolve(ident):
                        result = True
                        break
            state[name] = 2
            table.pointer_like[name] = result
            return result

        for name in table.aliases:
            resolve(name)
        table.cycles.sort()
        return table

    def is_pointer_type(self, type_text: str) -> bool:
        text = _strip_comments(type_text)
        if "*" in text:
            return True
        return any(self.pointer_like.get(ident, False) for ident in _IDENT.findall(text))

    def to_dict(self) -> dict:
        return {
            name: {"type": self.aliases[name], "pointer": self.pointer_like.get(name, False)}
            for name in self.aliases
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PointerAliasTable":
        return cls.build({k: v["type"] for k, v in d.items()})


@dataclass(frozen=True)
class Codebase:
    root: str
    records: Tuple[FunctionRecord, ...]
    alias_table: PointerAliasTable
    call_graph_edges: Dict[str, frozenset]
    externals: frozenset = frozenset()
    diagnostics: Tuple[str, ...] = ()

    def lookup(self, name: str, file: Optional[str] = None) -> Optional[FunctionRecord]:
        """First Function-kind record named ``name``, preferring one in ``file``."""
        found = [r for r in self.records if r.name == name]
        if not found:
            return None
        if file is not None:
            for r in found:
                if r.span.file == file or file.endswith(r.span.file) or r.span.file.endswith(file):
                    return r
        functions = [r for r in found if r.kind is RecordKind.FUNCTION]
        return (functions or found)[0]

    def function_at(self, file: str, line: int) -> Optional[FunctionRecord]:
        for r in self.records:
            if r.kind is RecordKind.FUNCTION and r.span.contains(line):
                if r.span.file == file or file.endswith(r.span.file) or r.span.file.endswith(file):
                    return r
        return None

    def names(self) -> set:
        return {r.name for r in self.records}

    def to_dict(self) -> dict:
        return {
            "version": INDEX_VERSION,
            "root": self.root,
            "records": [r.to_dict() for r in self.records],
            "aliases": self.alias_table.to_dict(),
            "call_graph": {k: sorted(v) for k, v in sorted(self.call_graph_edges.items())},
            "externals": sorted(self.externals),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Codebase":
        if d.get("version") != INDEX_VERSION:
            raise ExtractionError(f"unsupported record dump version {d.get('version')!r}")
        return cls(
            root=d["root"],
            records=tuple(FunctionRecord.from_dict(r) for r in d["records"]),
            alias_table=PointerAliasTable.from_dict(d["aliases"]),
            call_graph_edges={k: frozenset(v) for k, v in d["call_graph"].items()},
            externals=frozenset(d["externals"]),
            diagnostics=tuple(d.get("diagnostics", ())),
        )


@dataclass
class ExtractionConfig:
    extensions: Tuple[str, ...] = DEFAULT_EXTENSIONS
    test_substring: str = "test"
    entry_points: Tuple[str, ...] = ENTRY_POINTS
    jobs: Optional[int] = None


def _strip_comments(text: str) -> str:
    return _COMMENT_OR_STRING.sub(" ", text)


def _text(node: Optional[Node]) -> str:
    if node is None:
        return ""
    return node.text.decode("utf-8", errors="replace")


def _norm_ws(text: str) -> str:
    return " ".join(text.split())


def make_parser(language: str) -> Parser:
    return Parser(CPP_LANGUAGE if language == "cpp" else C_LANGUAGE)


def language_for(path: str) -> str:
    return "c" if os.path.splitext(path)[1].lower() in C_EXTENSIONS else "cpp"


def declarator_parts(decl: Optional[Node]) -> Tuple[str, str]:
    """Split a declarator into ``(name, type suffix)``, e.g. ``*const p[]`` -> ``("p", "* const []")``."""
    if decl is None:
        return "", ""
    t = decl.type
    if t in _NAME_NODES:
        return _text(decl), ""
    if t in ("pointer_declarator", "abstract_pointer_declarator"):
        quals = " ".join(_text(c) for c in decl.children if c.type == "type_qualifier")
        name, suffix = declarator_parts(decl.child_by_field_name("declarator"))
        return name, _norm_ws("* " + quals + " " + suffix)
    if t in ("reference_declarator", "abstract_reference_declarator"):
        inner = next((c for c in decl.named_children), None)
        name, suffix = declarator_parts(inner)
        return name, _norm_ws("& " + suffix)
    if t in ("array_declarator", "abstract_array_declarator"):
        name, suffix = declarator_parts(decl.child_by_field_name("declarator"))
        return name, _norm_ws(suffix + " []")
    if t in ("function_declarator", "abstract_function_declarator"):
        name, suffix = declarator_parts(decl.child_by_field_name("declarator"))
        return name, _norm_ws(suffix + " ()")
    if t in ("parenthesized_declarator", "abstract_parenthesized_declarator"):
        inner = next((c for c in decl.named_children), None)
        return declarator_parts(inner)
    if t == "init_declarator":
        return declarator_parts(decl.child_by_field_name("declarator"))
    inner = decl.child_by_field_name("declarator")
    if inner is not None:
        return declarator_parts(inner)
    return _text(decl), ""


def _type_prefix(node: Node) -> str:
    """Qualifiers plus the type specifier of a declaration-like node."""
    parts = []
    for child in node.children:
        if child.type == "type_qualifier":
            parts.append(_text(child))
    parts.append(_text(node.child_by_field_name("type")))
    return _norm_ws(" ".join(parts))


def _find_function_declarator(decl: Optional[Node]) -> Tuple[Optional[Node], int]:
    """Locate the function declarator and count pointer levels wrapping it."""
    depth = 0
    while decl is not None:
        if decl.type == "function_declarator":
            inner = decl.child_by_field_name("declarator")
            # (*fp)(...) returning a function pointer: keep descending
            if inner is not None and inner.type == "parenthesized_declarator":
                decl = next((c for c in inner.named_children), None)
                continue
            return decl, depth
        if decl.type == "pointer_declarator":
            depth += 1
        elif decl.type == "reference_declarator":
            decl = next((c for c in decl.named_children), None)
            continue
        decl = decl.child_by_field_name("declarator")
    return None, depth


def _params(param_list: Optional[Node]) -> Tuple[Tuple[str, str], ...]:
    if param_list is None:
        return ()
    out = []
    for child in param_list.named_children:
        if child.type not in ("parameter_declaration", "optional_parameter_declaration"):
            continue
        name, suffix = declarator_parts(child.child_by_field_name("declarator"))
        type_text = _norm_ws(_type_prefix(child) + " " + suffix)
        if not name and type_text == "void":
            continue
        out.append((name, type_text))
    return tuple(out)


def call_names(node: Node) -> List[str]:
    """Direct callee names in first-occurrence order (calls through pointers are skipped)."""
    names: List[str] = []
    stack = [node]
    order = []
    while stack:
        n = stack.pop()
        if n.type == "call_expression":
            fn = n.child_by_field_name("function")
            if fn is not None and fn.type in ("identifier", "qualified_identifier"):
                order.append((n.start_byte, _text(fn)))
        stack.extend(reversed(n.children))
    for _, name in sorted(order):
        if name not in names:
            names.append(name)
    return names


def _macro_callees(value: str, params: Sequence[str]) -> Tuple[str, ...]:
    names: List[str] = []
    for m in re.finditer(r"\b([A-Za-z_]\w*)\s*\(", _strip_comments(value)):
        name = m.group(1)
        if name in _NOT_CALLS or name in params or name in names:
            continue
        names.append(name)
    return tuple(names)


def _in_conditional_region(node: Node) -> bool:
    p = node.parent
    while p is not None:
        if p.type in _CONDITIONAL_REGIONS:
            return True
        p = p.parent
    return False


def parse_source(text: str, path: str, language: Optional[str] = None):
    """Parse one translation unit.

    Returns ``(records, typedefs, diagnostics)``.  Syntax errors never raise;
    tree-sitter recovers and whatever definitions survive are recorded.
    """
    language = language or language_for(path)
    tree = make_parser(language).parse(text.encode("utf-8"))
    root = tree.root_node
    records: List[FunctionRecord] = []
    typedefs: Dict[str, str] = {}
    diagnostics: List[str] = []
    if root.has_error:
        diagnostics.append(f"{path}: syntax errors; extraction is partial")

    stack = [root]
    while stack:
        node = stack.pop()
        t = node.type
        if t == "function_definition":
            rec = _function_record(node, path, language)
            if rec is not None:
                records.append(rec)
                if _in_conditional_region(node):
                    diagnostics.append(
                        f"{path}:{rec.span.start_line}: {rec.name} defined inside a conditional-compilation region"
                    )
            continue
        if t == "preproc_function_def":
            records.append(_macro_record(node, path, language))
            continue
        if t == "type_definition":
            base = _type_prefix(node)
            for decl in node.children_by_field_name("declarator"):
                name, suffix = declarator_parts(decl)
                if name:
                    typedefs[name] = _norm_ws(base + " " + suffix)
        stack.extend(reversed(node.children))
    records.sort(key=lambda r: (r.span.start_line, r.name))
    return records, typedefs, diagnostics


def _function_record(node: Node, path: str, language: str) -> Optional[FunctionRecord]:
    fdecl, depth = _find_function_declarator(node.child_by_field_name("declarator"))
    if fdecl is None:
        return None
    name, _ = declarator_parts(fdecl.child_by_field_name("declarator"))
    if not name:
        return None
    ret = _type_prefix(node)
    if depth:
        ret = _norm_ws(ret + " " + "*" * depth)
    body = node.child_by_field_name("body")
    return FunctionRecord(
        name=name,
        return_type=ret,
        params=_params(fdecl.child_by_field_name("parameters")),
        body=_text(node),
        callees=tuple(call_names(body)) if body is not None else (),
        kind=RecordKind.FUNCTION,
        span=SourceSpan(path, node.start_point[0] + 1, node.end_point[0] + 1),
        language=language,
    )


def _macro_record(node: Node, path: str, language: str) -> FunctionRecord:
    name = _text(node.child_by_field_name("name"))
    params_node = node.child_by_field_name("parameters")
    params = tuple(
        (_text(c), "") for c in (params_node.named_children if params_node else []) if c.type == "identifier"
    )
    value = _text(node.child_by_field_name("value"))
    body = _text(node).rstrip("\n")
    # the node swallows the terminating newline
    end_line = node.end_point[0] + (1 if node.end_point[1] else 0)
    start = node.start_point[0] + 1
    return FunctionRecord(
        name=name,
        return_type="",
        params=params,
        body=body,
        callees=_macro_callees(value, [p for p, _ in params]),
        kind=RecordKind.MACRO,
        span=SourceSpan(path, start, max(start, end_line)),
        language=language,
    )


def _iter_sources(root: Path, extensions: Iterable[str]) -> List[Path]:
    exts = tuple(e.lower() for e in extensions)
    files = [p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in exts]
    return sorted(files, key=lambda p: p.relative_to(root).as_posix())


def _parse_file(root: Path, path: Path):
    rel = path.relative_to(root).as_posix()
    try:
        data = path.read_bytes()
    except OSError as exc:
        return rel, [], {}, [f"{rel}: skipped, unreadable ({exc})"]
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        text = data.decode("latin-1")
    if "\x00" in text:
        return rel, [], {}, [f"{rel}: skipped, binary content"]
    try:
        records, typedefs, diags = parse_source(text, rel)
    except Exception as exc:  # pragma: no cover - parser crash is not expected
        return rel, [], {}, [f"{rel}: skipped, parser failure ({exc})"]
    return rel, records, typedefs, diags


def parse_codebase(root, config: Optional[ExtractionConfig] = None) -> Codebase:
    config = config or ExtractionConfig()
    root_path = Path(root)
    if not root_path.is_dir():
        raise ExtractionError(f"source root {root} is not a readable directory")
    files = _iter_sources(root_path, config.extensions)
    if not files:
        raise ExtractionError(f"no files under {root} match {', '.join(config.extensions)}")

    with ThreadPoolExecutor(max_workers=config.jobs or os.cpu_count() or 1) as pool:
        results = list(pool.map(lambda p: _parse_file(root_path, p), files))

    records: List[FunctionRecord] = []
    typedefs: Dict[str, str] = {}
    diagnostics: List[str] = []
    for _, recs, tds, diags in results:
        records.extend(recs)
        for k, v in tds.items():
            typedefs.setdefault(k, v)
        diagnostics.extend(diags)

    names = {r.name for r in records}
    edges: Dict[str, frozenset] = {}
    externals = set()
    for r in records:
        edges[r.name] = edges.get(r.name, frozenset()) | frozenset(r.callees)
        externals.update(c for c in r.callees if c not in names)
    table = PointerAliasTable.build(typedefs)
    diagnostics.extend(f"typedef cycle broken at {name}" for name in table.cycles)
    for d in diagnostics:
        logger.info(d)
    return Codebase(
        root=str(root),
        records=tuple(records),
        alias_table=table,
        call_graph_edges=edges,
        externals=frozenset(externals),
        diagnostics=tuple(diagnostics),
    )


def is_test_name(name: str, substring: str = "test") -> bool:
    return bool(substring) and substring.lower() in name.lower()


def prefilter(codebase: Codebase, config: Optional[ExtractionConfig] = None) -> List[FunctionRecord]:
    """Candidates for summary generation: pointer-typed signatures and every macro."""
    config = config or ExtractionConfig()
    table = codebase.alias_table
    out = []
    for r in codebase.records:
        if r.name in config.entry_points or is_test_name(r.name, config.test_substring):
            continue
        if r.kind is RecordKind.MACRO:
            out.append(r)
            continue
        types = [r.return_type] + [t for _, t in r.params]
        if any(table.is_pointer_type(t) for t in types):
            out.append(r)
    return out


def write_index(codebase: Codebase, out_dir) -> List[Path]:
    """One JSON-lines document per translation unit under ``out_dir``."""
    out_dir = Path(out_dir)
    by_file: Dict[str, List[FunctionRecord]] = {}
    for r in codebase.records:
        by_file.setdefault(r.span.file, []).append(r)
    written = []
    for file, recs in sorted(by_file.items()):
        target = out_dir / (file + ".jsonl")
        target.parent.mkdir(parents=True, exist_ok=True)
        lines = [json.dumps({"file": file, "version": INDEX_VERSION, "records": len(recs)}, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in recs]
        target.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(target)
    return written


def dump_codebase(codebase: Codebase, path) -> None:
    Path(path).write_text(json.dumps(codebase.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_codebase(path) -> Codebase:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ExtractionError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return Codebase.from_dict(data)
