"""Acyclic intraprocedural control-flow graphs with memory-typed nodes.

Each statement of interest becomes one node.  Branches carry a literal over
condition variables; identical (normalized) condition text shares a variable,
and ``!(C)`` maps to the negated literal of ``C``.  Loops are cut to a
zero-or-one iteration branch so the graph stays acyclic.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

from tree_sitter import Node

from .extraction import FunctionRecord, RecordKind, make_parser

DEFAULT_PATH_CAP = 10_000
ALLOC_PRIMITIVES = ("malloc", "calloc", "realloc", "strdup", "aligned_alloc", "new")
FREE_PRIMITIVES = ("free", "delete")

_WORD = re.compile(r"\w")


class CfgError(ValueError):
    """Raised for bodies that cannot be turned into a well-formed graph."""


class CapExceeded(RuntimeError):
    def __init__(self, cap: int):
        super().__init__(f"more than {cap} entry-to-return paths")
        self.cap = cap


class NodeKind(str, Enum):
    ENTRY = "Entry"
    RETURN = "Return"
    ALLOC = "Alloc"
    FREE = "Free"
    BRANCH = "Branch"
    ASSIGN = "Assign"
    DEREF = "Deref"
    ESCAPE = "Escape"
    CALL = "Call"
    OTHER = "Other"


class EscapeMode(str, Enum):
    RETURNED_POINTER = "ReturnedPointer"
    GLOBAL_STORE = "GlobalStore"
    SINK_CALL = "SinkCall"


class Polarity(str, Enum):
    TRUE = "T"
    FALSE = "F"
    UNCONDITIONAL = "U"


@dataclass(frozen=True)
class CfgNode:
    """A typed CFG node.

    ``target`` is the written variable (Alloc/Assign/Call lhs, Escape store
    destination), ``value`` the read expression (Assign rhs, Free argument,
    Escape/Return expression), ``returned`` marks Alloc/Call results that are
    returned directly.  ``null_test`` on a Branch is ``(expr, arm)`` where
    ``arm`` is the polarity on which ``expr`` is NULL.
    """

    kind: NodeKind
    line: int = 0
    text: str = ""
    target: Optional[str] = None
    value: Optional[str] = None
    callee: Optional[str] = None
    args: Tuple[str, ...] = ()
    cond: Optional[str] = None
    mode: Optional[EscapeMode] = None
    null_test: Optional[Tuple[str, bool]] = None
    returned: bool = False

    def label(self) -> str:
        k = self.kind
        if k is NodeKind.ALLOC:
            return f"Alloc({self.target or 'return'})"
        if k is NodeKind.FREE:
            return f"Free({self.value})"
        if k is NodeKind.BRANCH:
            return f"Branch({self.cond})"
        if k is NodeKind.ASSIGN:
            return f"Assign({self.target} = {self.value})"
        if k is NodeKind.ESCAPE:
            return f"Escape({self.mode.value if self.mode else '?'}: {self.value or ', '.join(self.args)})"
        if k is NodeKind.CALL:
            return f"Call({self.callee})"
        if k is NodeKind.RETURN:
            return f"Return({self.value})" if self.value else "Return"
        if k is NodeKind.DEREF:
            return f"Deref({self.target})"
        return k.value if not self.text else f"{k.value}({self.text})"


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    polarity: Polarity = Polarity.UNCONDITIONAL


@dataclass
class Cfg:
    """Graph over ``nodes`` (index 0 is Entry).

    ``branch_lit`` maps each Branch node to a nonzero literal over the
    1-based condition variables named in ``cond_vars``.
    """

    name: str
    params: Tuple[str, ...]
    nodes: List[CfgNode]
    edges: List[Edge]
    branch_lit: Dict[int, int] = field(default_factory=dict)
    cond_vars: List[str] = field(default_factory=list)
    file: str = ""
    locals: frozenset = frozenset()

    def __post_init__(self):
        self._succ: Optional[List[List[Edge]]] = None
        self._pred: Optional[List[List[Edge]]] = None

    def _index(self):
        if self._succ is None:
            self._succ = [[] for _ in self.nodes]
            self._pred = [[] for _ in self.nodes]
            for e in self.edges:
                self._succ[e.src].append(e)
                self._pred[e.dst].append(e)

    def succ(self, n: int) -> List[Edge]:
        self._index()
        return self._succ[n]

    def pred(self, n: int) -> List[Edge]:
        self._index()
        return self._pred[n]

    @property
    def entry(self) -> int:
        return 0

    def returns(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind is NodeKind.RETURN]

    def of_kind(self, kind: NodeKind) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.kind is kind]

    @property
    def num_cond_vars(self) -> int:
        return len(self.cond_vars)

    def validate(self) -> None:
        check_cfg(self)

    def to_dot(self) -> str:
        lines = [f'digraph "{self.name}" {{', "  node [shape=box];"]
        for i, n in enumerate(self.nodes):
            label = f"{i}: {n.label()}\\n{self.file}:{n.line}".replace('"', '\\"')
            shape = ', shape=diamond' if n.kind is NodeKind.BRANCH else ""
            lines.append(f'  n{i} [label="{label}"{shape}];')
        for e in self.edges:
            lbl = "" if e.polarity is Polarity.UNCONDITIONAL else f' [label="{e.polarity.value}"]'
            lines.append(f"  n{e.src} -> n{e.dst}{lbl};")
        lines.append("}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Path:
    nodes: Tuple[int, ...]
    branch_literals: Tuple[Tuple[int, bool], ...]  # (branch node, polarity taken)

    def literals(self, cfg: Cfg) -> List[int]:
        return [cfg.branch_lit[b] if taken else -cfg.branch_lit[b] for b, taken in self.branch_literals]

    @property
    def exit(self) -> int:
        return self.nodes[-1]


@dataclass
class Primitives:
    alloc: Tuple[str, ...] = ALLOC_PRIMITIVES
    free: Tuple[str, ...] = FREE_PRIMITIVES
    sinks: Tuple[str, ...] = ()


def check_cfg(cfg: Cfg) -> None:
    nodes = cfg.nodes
    if not nodes or nodes[0].kind is not NodeKind.ENTRY:
        raise CfgError("node 0 must be Entry")
    if sum(n.kind is NodeKind.ENTRY for n in nodes) != 1:
        raise CfgError("exactly one Entry node required")
    if not cfg.returns():
        raise CfgError("at least one Return node required")
    for i, n in enumerate(nodes):
        out = cfg.succ(i)
        pols = sorted(e.polarity.value for e in out)
        if n.kind is NodeKind.RETURN:
            if out:
                raise CfgError(f"Return node {i} has successors")
        elif n.kind is NodeKind.BRANCH:
            if pols != ["F", "T"]:
                raise CfgError(f"Branch node {i} needs one True and one False successor, has {pols}")
            if i not in cfg.branch_lit:
                raise CfgError(f"Branch node {i} has no condition literal")
        elif pols != ["U"]:
            raise CfgError(f"node {i} ({n.kind.value}) needs exactly one successor, has {pols}")
        if i and not cfg.pred(i):
            raise CfgError(f"node {i} is unreachable from Entry")
    for lit in cfg.branch_lit.values():
        if lit == 0 or abs(lit) > len(cfg.cond_vars):
            raise CfgError(f"branch literal {lit} out of range")
    # acyclicity via Kahn's algorithm
    indeg = [len(cfg.pred(i)) for i in range(len(nodes))]
    ready = [i for i, d in enumerate(indeg) if d == 0]
    seen = 0
    while ready:
        u = ready.pop()
        seen += 1
        for e in cfg.succ(u):
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                ready.append(e.dst)
    if seen != len(nodes):
        raise CfgError("graph contains a cycle")
    reach = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for e in cfg.succ(u):
            if e.dst not in reach:
                reach.add(e.dst)
                stack.append(e.dst)
    if len(reach) != len(nodes):
        raise CfgError("some nodes are unreachable from Entry")


def enumerate_paths(cfg: Cfg, cap: int = DEFAULT_PATH_CAP) -> List[Path]:
    """All Entry->Return paths, successors visited in edge order.

    Raises CapExceeded once more than ``cap`` paths exist.
    """
    paths: List[Path] = []
    stack: List[Tuple[int, Tuple[int, ...], Tuple[Tuple[int, bool], ...]]] = [(0, (0,), ())]
    while stack:
        node, nodes, lits = stack.pop()
        if cfg.nodes[node].kind is NodeKind.RETURN:
            paths.append(Path(nodes, lits))
            if len(paths) > cap:
                raise CapExceeded(cap)
            continue
        for e in reversed(cfg.succ(node)):
            nl = lits
            if e.polarity is not Polarity.UNCONDITIONAL:
                nl = lits + ((node, e.polarity is Polarity.TRUE),)
            stack.append((e.dst, nodes + (e.dst,), nl))
    return paths


def count_paths(cfg: Cfg) -> int:
    """Entry->Return path count by dynamic programming over the DAG."""
    memo: Dict[int, int] = {}
    order = sorted(range(len(cfg.nodes)), reverse=True)
    for n in order:
        if cfg.nodes[n].kind is NodeKind.RETURN:
            memo[n] = 1
        else:
            memo[n] = sum(memo.get(e.dst, 0) for e in cfg.succ(n))
    # index order is topological for builder output; fall back to recursion otherwise
    if any(e.dst <= e.src for e in cfg.edges):
        memo = {}

        def rec(n):
            if n not in memo:
                memo[n] = 1 if cfg.nodes[n].kind is NodeKind.RETURN else sum(rec(e.dst) for e in cfg.succ(n))
            return memo[n]

        return rec(0)
    return memo[0]


# --------------------------------------------------------------------------
# condition text normalization


def squash(text: str) -> str:
    """Collapse whitespace, keeping a single space only between word characters."""
    text = " ".join(text.split())
    out = []
    for i, ch in enumerate(text):
        if ch == " ":
            prev, nxt = text[i - 1], text[i + 1] if i + 1 < len(text) else ""
            if not (_WORD.match(prev) and _WORD.match(nxt)):
                continue
        out.append(ch)
    return "".join(out)


def _outer_parens(s: str) -> bool:
    if not (s.startswith("(") and s.endswith(")")):
        return False
    depth = 0
    for i, ch in enumerate(s):
        depth += ch == "("
        depth -= ch == ")"
        if depth == 0 and i < len(s) - 1:
            return False
    return True


def _strip_parens(s: str) -> str:
    while _outer_parens(s):
        s = s[1:-1]
    return s


def _is_primary(s: str) -> bool:
    """True when ``s`` has no binary operator at nesting depth zero."""
    depth = 0
    i = 0
    while i < len(s):
        ch = s[i]
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        elif depth == 0:
            if s.startswith("->", i):
                i += 2
                continue
            if ch in "+-*/%<>=&|^?,:" and i > 0:
                return False
            if ch in "!~*&-+" and i == 0:
                pass
        i += 1
    return True


_NULLS = {"NULL", "0", "nullptr", "((void*)0)"}


def normalize_condition(text: str) -> Tuple[str, bool]:
    """Return ``(key, negated)``; ``!(C)``, ``C == NULL`` and ``C != NULL`` reduce to ``C``."""
    s = _strip_parens(squash(text))
    neg = False
    while True:
        if s.startswith("!") and not s.startswith("!=") and _is_primary(s[1:]):
            s = _strip_parens(s[1:])
            neg = not neg
            continue
        m = re.fullmatch(r"(.+?)(==|!=)(NULL|0|nullptr)", s) or re.fullmatch(r"(NULL|0|nullptr)(==|!=)(.+)", s)
        if m:
            lhs = m.group(1) if m.group(1) not in _NULLS else m.group(3)
            if _is_primary(lhs):
                s = _strip_parens(lhs)
                if m.group(2) == "==":
                    neg = not neg
                continue
        return s, neg


_ACCESS_PATH = re.compile(r"[A-Za-z_]\w*(?:(?:->|\.)[A-Za-z_]\w*)*")


def access_root(expr: str) -> Optional[str]:
    m = re.match(r"[\*&\(\s]*([A-Za-z_]\w*)", expr)
    return m.group(1) if m else None


def normalize_expr(text: str) -> str:
    """Strip casts, redundant parentheses and whitespace from an operand."""
    s = _strip_parens(squash(text))
    while True:
        m = re.match(r"\(([A-Za-z_][\w\s\*]*)\)(.+)", s)
        if m and not _outer_parens(s) and re.fullmatch(r"(const |struct |unsigned |signed )*[A-Za-z_]\w*\**", squash(m.group(1)).replace(" *", "*")):
            s = _strip_parens(m.group(2))
            continue
        return s


# --------------------------------------------------------------------------
# builder


_SKIP_WRAPPERS = {"parenthesized_expression"}


def _strip_node(node: Optional[Node]) -> Optional[Node]:
    while node is not None:
        if node.type in _SKIP_WRAPPERS:
            node = next((c for c in node.named_children if c.type != "comment"), None)
        elif node.type == "cast_expression":
            node = node.child_by_field_name("value")
        elif node.type == "condition_clause":
            node = node.child_by_field_name("value") or next(iter(node.named_children), None)
        else:
            return node
    return None


def _t(node: Optional[Node]) -> str:
    return "" if node is None else node.text.decode("utf-8", errors="replace")


Preds = List[Tuple[int, Polarity]]


class _Builder:
    def __init__(self, record: FunctionRecord, hints, primitives: Primitives, share_conditions: bool):
        self.record = record
        self.hints = hints
        self.prims = primitives
        self.share = share_conditions
        self.nodes: List[CfgNode] = [CfgNode(NodeKind.ENTRY, record.span.start_line, record.name)]
        self.edges: List[Edge] = []
        self.branch_lit: Dict[int, int] = {}
        self.cond_vars: List[str] = []
        self.labels: Dict[str, int] = {}
        self.gotos: List[Tuple[Preds, str]] = []
        self.break_stack: List[Preds] = []
        self.continue_stack: List[Preds] = []
        self.params = tuple(record.param_names)
        self.locals: Set[str] = set(self.params)
        self.line0 = record.span.start_line
        self.exit_node: Optional[int] = None

    # -- helpers ---------------------------------------------------------
    def line(self, node: Node) -> int:
        return self.line0 + node.start_point[0]

    def add(self, preds: Preds, node: CfgNode) -> Preds:
        idx = len(self.nodes)
        self.nodes.append(node)
        for src, pol in preds:
            self.edges.append(Edge(src, idx, pol))
        return [(idx, Polarity.UNCONDITIONAL)]

    def cond_literal(self, key: str, negated: bool, node_index: int) -> int:
        name = key if self.share else f"{key}@{node_index}"
        if name in self.cond_vars:
            var = self.cond_vars.index(name) + 1
        else:
            self.cond_vars.append(name)
            var = len(self.cond_vars)
        return -var if negated else var

    def is_local(self, name: Optional[str]) -> bool:
        return name is not None and name in self.locals

    # -- statements ------------------------------------------------------
    def stmts(self, children: Iterable[Node], preds: Preds) -> Preds:
        for child in children:
            preds = self.stmt(child, preds)
        return preds

    def stmt(self, node: Node, preds: Preds) -> Preds:
        t = node.type
        if t in ("comment", "{", "}", ";") or not node.is_named:
            return preds
        handler = getattr(self, "s_" + t, None)
        if handler is not None:
            return handler(node, preds)
        if t.startswith("preproc_") and t not in ("preproc_if", "preproc_ifdef"):
            return preds
        if t == "ERROR":
            return self.stmts(node.named_children, preds)
        return self.add(preds, CfgNode(NodeKind.OTHER, self.line(node), squash(_t(node))[:60]))

    def s_compound_statement(self, node, preds):
        return self.stmts(node.named_children, preds)

    s_translation_unit = s_compound_statement

    def s_declaration(self, node, preds):
        for decl in node.children_by_field_name("declarator"):
            name = self._declared_name(decl)
            if name:
                self.locals.add(name)
            if decl.type == "init_declarator":
                value = decl.child_by_field_name("value")
                if value is not None and value.type not in ("initializer_list", "argument_list"):
                    preds = self.assign(name, value, preds, self.line(decl))
        return preds

    def _declared_name(self, decl: Node) -> Optional[str]:
        while decl is not None and decl.type not in ("identifier", "field_identifier"):
            inner = decl.child_by_field_name("declarator")
            if inner is None:
                inner = next((c for c in decl.named_children if c.type.endswith("declarator") or c.type == "identifier"), None)
            decl = inner
        return _t(decl) if decl is not None else None

    def s_expression_statement(self, node, preds):
        expr = next((c for c in node.named_children if c.type != "comment"), None)
        if expr is None:
            return preds
        return self.expr(expr, preds)

    def s_return_statement(self, node, preds):
        expr = _strip_node(next((c for c in node.named_children if c.type != "comment"), None))
        line = self.line(node)
        if expr is None:
            return self._ret(preds, CfgNode(NodeKind.RETURN, line, "return"))
        text = normalize_expr(_t(expr))
        if expr.type in ("call_expression", "new_expression"):
            preds = self.expr(expr, preds, returned=True)
        elif expr.type == "assignment_expression":
            preds = self.expr(expr, preds)
            text = normalize_expr(_t(expr.child_by_field_name("left")))
        elif expr.type == "identifier" and self.is_local(text):
            preds = self.add(preds, CfgNode(NodeKind.ESCAPE, line, value=text, mode=EscapeMode.RETURNED_POINTER))
        return self._ret(preds, CfgNode(NodeKind.RETURN, line, "return", value=text))

    def _ret(self, preds, node):
        self.add(preds, node)
        return []

    def s_if_statement(self, node, preds):
        preds, b, sink_arm = self.branch(node.child_by_field_name("condition"), preds, node)
        t_preds = [(b, Polarity.TRUE)]
        f_preds = [(b, Polarity.FALSE)]
        if sink_arm is not None:
            t_preds, f_preds = self._sink_arm(sink_arm, t_preds, f_preds, node)
        out = self.stmt(node.child_by_field_name("consequence"), t_preds)
        alt = node.child_by_field_name("alternative")
        if alt is not None:
            inner = next((c for c in alt.named_children if c.type != "comment"), None) if alt.type == "else_clause" else alt
            f_preds = self.stmt(inner, f_preds) if inner is not None else f_preds
        return out + f_preds

    def _sink_arm(self, sink_arm, t_preds, f_preds, node):
        arm, callee, args = sink_arm
        esc = CfgNode(NodeKind.ESCAPE, self.line(node), callee=callee, args=args, mode=EscapeMode.SINK_CALL)
        if arm:
            return self.add(t_preds, esc), f_preds
        return t_preds, self.add(f_preds, esc)

    def branch(self, cond: Optional[Node], preds: Preds, stmt_node: Node, text: Optional[str] = None):
        """Emit condition side effects then a Branch node.

        Returns ``(preds, branch index, sink arm)``; the sink arm is set when
        the whole condition is (the negation of) a call to an ownership sink.
        """
        sink_arm = None
        if cond is not None:
            preds, text = self._condition_effects(cond, preds)
            inner = _strip_node(cond)
            negated = False
            while inner is not None and inner.type == "unary_expression" and _t(inner.child_by_field_name("operator")) == "!":
                negated = not negated
                inner = _strip_node(inner.child_by_field_name("argument"))
            if inner is not None and inner.type == "call_expression":
                callee = _t(inner.child_by_field_name("function"))
                if callee in self.prims.sinks:
                    sink_arm = (not negated, callee, self._args(inner))
        key, neg = normalize_condition(text or "1")
        idx = len(self.nodes)
        null_test = None
        if _ACCESS_PATH.fullmatch(key) and not key.isdigit():
            # `if (p)` is the non-null arm, `if (!p)` the null arm
            null_test = (key, neg)
        self.add(preds, CfgNode(NodeKind.BRANCH, self.line(stmt_node), cond=key if not neg else "!" + key, null_test=null_test))
        self.branch_lit[idx] = self.cond_literal(key, neg, idx)
        return [], idx, sink_arm

    def _condition_effects(self, cond: Node, preds: Preds):
        """Hoist assignments out of a condition, e.g. ``if (!(p = malloc(n)))``."""
        assigns: List[Node] = []
        stack = [cond]
        while stack:
            n = stack.pop()
            if n.type == "assignment_expression":
                assigns.append(n)
                continue
            stack.extend(n.children)
        assigns.sort(key=lambda n: n.start_byte)
        src = cond.text
        base = cond.start_byte
        pieces = []
        pos = 0
        for a in assigns:
            preds = self.expr(a, preds)
            pieces.append(src[pos : a.start_byte - base].decode("utf-8", "replace"))
            pieces.append(_t(a.child_by_field_name("left")))
            pos = a.end_byte - base
        pieces.append(src[pos:].decode("utf-8", "replace"))
        return preds, "".join(pieces)

    def _loop(self, node, preds, cond, body, update=None):
        if cond is None:
            return self._loop_body(node, preds, body, update)
        preds, b, _ = self.branch(cond, preds, node)
        out = self._loop_body(node, [(b, Polarity.TRUE)], body, update)
        return out + [(b, Polarity.FALSE)]

    def _loop_body(self, node, preds, body, update):
        self.break_stack.append([])
        self.continue_stack.append([])
        out = self.stmt(body, preds) if body is not None else preds
        out = out + self.continue_stack.pop()
        if update is not None:
            out = self.expr(update, out)
        return out + self.break_stack.pop()

    def s_while_statement(self, node, preds):
        return self._loop(node, preds, node.child_by_field_name("condition"), node.child_by_field_name("body"))

    def s_for_statement(self, node, preds):
        init = node.child_by_field_name("initializer")
        if init is not None:
            preds = self.stmt(init, preds) if init.type == "declaration" else self.expr(init, preds)
        return self._loop(
            node,
            preds,
            node.child_by_field_name("condition"),
            node.child_by_field_name("body"),
            node.child_by_field_name("update"),
        )

    def s_for_range_loop(self, node, preds):
        preds, b, _ = self.branch(None, preds, node, text="range:" + squash(_t(node.child_by_field_name("right"))))
        out = self._loop_body(node, [(b, Polarity.TRUE)], node.child_by_field_name("body"), None)
        return out + [(b, Polarity.FALSE)]

    def s_do_statement(self, node, preds):
        # the body runs at least once; the back edge is dropped
        return self._loop_body(node, preds, node.child_by_field_name("body"), None)

    def s_break_statement(self, node, preds):
        if self.break_stack:
            self.break_stack[-1].extend(preds)
            return []
        return preds

    def s_continue_statement(self, node, preds):
        if self.continue_stack:
            self.continue_stack[-1].extend(preds)
            return []
        return preds

    def s_goto_statement(self, node, preds):
        self.gotos.append((preds, _t(node.child_by_field_name("label"))))
        return []

    def s_labeled_statement(self, node, preds):
        label = _t(node.child_by_field_name("label"))
        preds = self.add(preds, CfgNode(NodeKind.OTHER, self.line(node), label + ":"))
        self.labels[label] = preds[0][0]
        return self.stmts([c for c in node.named_children if c.type != "statement_identifier"], preds)

    def s_switch_statement(self, node, preds):
        cond = node.child_by_field_name("condition")
        preds, text = self._condition_effects(cond, preds)
        subject = normalize_expr(text)
        body = node.child_by_field_name("body")
        cases: List[Tuple[Optional[str], List[Node]]] = []
        for child in body.named_children if body is not None else []:
            if child.type == "case_statement":
                value = child.child_by_field_name("value")
                stmts = [c for c in child.named_children if value is None or c != value]
                cases.append((squash(_t(value)) if value is not None else None, stmts))
            elif cases:
                cases[-1][1].append(child)
        valued = [c for c in cases if c[0] is not None]
        branches = []
        cur = preds
        for value, _ in valued:
            _, b, _ = self.branch(None, cur, node, text=f"{subject}=={value}")
            branches.append(b)
            cur = [(b, Polarity.FALSE)]
        self.break_stack.append([])
        fall: Preds = []
        default_seen = False
        bi = 0
        for value, stmts in cases:
            if value is None:
                entry = fall + cur
                default_seen = True
            else:
                entry = fall + [(branches[bi], Polarity.TRUE)]
                bi += 1
            fall = self.stmts(stmts, entry)
        out = fall + self.break_stack.pop()
        if not default_seen:
            out = out + cur
        return out

    def s_preproc_ifdef(self, node, preds):
        name = _t(node.child_by_field_name("name"))
        directive = _t(node.children[0]).strip()
        preds, b, _ = self.branch(None, preds, node, text=f"{directive} {name}")
        body = [c for c in node.named_children if c.type not in ("identifier", "preproc_else", "preproc_elif")]
        out = self.stmts(body, [(b, Polarity.TRUE)])
        alt = node.child_by_field_name("alternative")
        f = [(b, Polarity.FALSE)]
        if alt is not None:
            f = self.stmts([c for c in alt.named_children if c != alt.child_by_field_name("condition")], f)
        return out + f

    def s_preproc_if(self, node, preds):
        cond = node.child_by_field_name("condition")
        preds, b, _ = self.branch(None, preds, node, text="#if " + squash(_t(cond)))
        alt = node.child_by_field_name("alternative")
        body = [c for c in node.named_children if c != cond and c != alt]
        out = self.stmts(body, [(b, Polarity.TRUE)])
        f = [(b, Polarity.FALSE)]
        if alt is not None:
            f = self.stmts([c for c in alt.named_children if c != alt.child_by_field_name("condition")], f)
        return out + f

    def s_try_statement(self, node, preds):
        return self.stmt(node.child_by_field_name("body"), preds)

    # -- expressions -----------------------------------------------------
    def expr(self, node: Node, preds: Preds, returned: bool = False) -> Preds:
        node = _strip_node(node)
        if node is None:
            return preds
        t = node.type
        line = self.line(node)
        if t == "assignment_expression":
            lhs = node.child_by_field_name("left")
            op = _t(node.child_by_field_name("operator"))
            if op != "=":
                return self.add(preds, CfgNode(NodeKind.OTHER, line, squash(_t(node))[:60]))
            return self.assign(normalize_expr(_t(lhs)), node.child_by_field_name("right"), preds, line)
        if t == "call_expression":
            return self.call(node, None, preds, line, returned)
        if t == "new_expression":
            return self.add(preds, CfgNode(NodeKind.ALLOC, line, "new", callee="new", returned=returned))
        if t == "delete_expression":
            operand = next((c for c in node.named_children), None)
            return self.add(preds, CfgNode(NodeKind.FREE, line, "delete", value=normalize_expr(_t(operand)), callee="delete"))
        if t == "comma_expression":
            preds = self.expr(node.child_by_field_name("left"), preds)
            return self.expr(node.child_by_field_name("right"), preds)
        return self.add(preds, CfgNode(NodeKind.OTHER, line, squash(_t(node))[:60]))

    def assign(self, lhs: Optional[str], rhs: Node, preds: Preds, line: int) -> Preds:
        rhs_s = _strip_node(rhs)
        if lhs is None:
            return self.expr(rhs, preds)
        if rhs_s is not None and rhs_s.type == "assignment_expression":
            preds = self.expr(rhs_s, preds)
            inner = normalize_expr(_t(rhs_s.child_by_field_name("left")))
            return self._store(lhs, inner, preds, line)
        if rhs_s is not None and rhs_s.type == "call_expression":
            preds = self.call(rhs_s, lhs, preds, line, False)
            if self._escaping_store(lhs):
                preds = self._store(lhs, lhs, preds, line, escape_only=True)
            return preds
        if rhs_s is not None and rhs_s.type == "new_expression":
            preds = self.add(preds, CfgNode(NodeKind.ALLOC, line, "new", target=lhs, callee="new"))
            if self._escaping_store(lhs):
                preds = self._store(lhs, lhs, preds, line, escape_only=True)
            return preds
        return self._store(lhs, normalize_expr(_t(rhs)), preds, line)

    def _escaping_store(self, lhs: str) -> bool:
        root = access_root(lhs)
        if root is None:
            return False
        if lhs == root:
            return not self.is_local(root)
        return root in self.params or not self.is_local(root)

    def _store(self, lhs: str, value: str, preds: Preds, line: int, escape_only: bool = False) -> Preds:
        if self._escaping_store(lhs):
            return self.add(preds, CfgNode(NodeKind.ESCAPE, line, target=lhs, value=value, mode=EscapeMode.GLOBAL_STORE))
        if escape_only:
            return preds
        if lhs == access_root(lhs):
            return self.add(preds, CfgNode(NodeKind.ASSIGN, line, target=lhs, value=value))
        return self.add(preds, CfgNode(NodeKind.DEREF, line, target=lhs, value=value))

    def _args(self, call: Node) -> Tuple[str, ...]:
        args = call.child_by_field_name("arguments")
        if args is None:
            return ()
        return tuple(normalize_expr(_t(a)) for a in args.named_children if a.type != "comment")

    def call(self, node: Node, lhs: Optional[str], preds: Preds, line: int, returned: bool) -> Preds:
        fn = node.child_by_field_name("function")
        callee = _t(fn) if fn is not None and fn.type in ("identifier", "qualified_identifier") else None
        args = self._args(node)
        text = squash(_t(node))[:80]
        if callee is None:
            return self.add(preds, CfgNode(NodeKind.CALL, line, text, target=lhs, args=args, returned=returned))
        hints = self.hints
        if callee in self.prims.alloc or (hints is not None and hints.is_allocator(callee)):
            return self.add(preds, CfgNode(NodeKind.ALLOC, line, text, target=lhs, callee=callee, args=args, returned=returned))
        freed: List[int] = []
        if callee in self.prims.free:
            freed = [0]
        elif hints is not None:
            freed = hints.freed_args(callee)
        freed = [i for i in freed if i < len(args)]
        if freed:
            for i in freed:
                preds = self.add(preds, CfgNode(NodeKind.FREE, line, text, value=args[i], callee=callee, args=args))
            return preds
        if callee in self.prims.sinks:
            return self.add(preds, CfgNode(NodeKind.ESCAPE, line, text, callee=callee, args=args, mode=EscapeMode.SINK_CALL))
        return self.add(preds, CfgNode(NodeKind.CALL, line, text, target=lhs, callee=callee, args=args, returned=returned))

    # -- assembly --------------------------------------------------------
    def finish(self, preds: Preds) -> Cfg:
        backward: Preds = []
        for gpreds, label in self.gotos:
            target = self.labels.get(label)
            if target is None or any(src >= target for src, _ in gpreds):
                backward.extend(gpreds)
                continue
            for src, pol in gpreds:
                self.edges.append(Edge(src, target, pol))
        tail = preds + backward
        if tail or not any(n.kind is NodeKind.RETURN for n in self.nodes):
            line = self.line0 + self.record.body.count("\n")
            self.add(tail, CfgNode(NodeKind.RETURN, line, "implicit return"))
        return self._prune()

    def _prune(self) -> Cfg:
        succ: Dict[int, List[Edge]] = {}
        for e in self.edges:
            succ.setdefault(e.src, []).append(e)
        reach = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for e in succ.get(u, []):
                if e.dst not in reach:
                    reach.add(e.dst)
                    stack.append(e.dst)
        keep = sorted(reach)
        remap = {old: new for new, old in enumerate(keep)}
        nodes = [self.nodes[i] for i in keep]
        edges = sorted(
            (Edge(remap[e.src], remap[e.dst], e.polarity) for e in self.edges if e.src in reach),
            key=lambda e: (e.src, e.polarity is not Polarity.TRUE, e.polarity is not Polarity.FALSE, e.dst),
        )
        lits = {remap[b]: lit for b, lit in self.branch_lit.items() if b in reach}
        used = sorted({abs(l) for l in lits.values()})
        var_map = {old: new for new, old in enumerate(used, 1)}
        lits = {b: (var_map[abs(l)] if l > 0 else -var_map[abs(l)]) for b, l in lits.items()}
        cond_vars = [self.cond_vars[old - 1] for old in used]
        return Cfg(
            name=self.record.name,
            params=self.params,
            nodes=nodes,
            edges=edges,
            branch_lit=lits,
            cond_vars=cond_vars,
            file=self.record.span.file,
            locals=frozenset(self.locals),
        )


def _function_source(record: FunctionRecord) -> str:
    if record.kind is not RecordKind.MACRO:
        return record.body
    m = re.match(r"\s*#\s*define\s+\w+\s*\(([^)]*)\)(.*)", record.body, re.S)
    value = m.group(2) if m else ""
    value = value.replace("\\\n", " \n").strip()
    params = ", ".join(f"void *{p.strip()}" for p in m.group(1).split(",") if p.strip() and p.strip() != "...") if m else ""
    if re.match(r"(do\b|\{|if\b|while\b|for\b|switch\b)", value):
        body = value
    else:
        body = f"return ({value});" if value else ""
    return f"void *{record.name}({params or 'void'}) {{ {body} }}"


def build_cfg(
    record: FunctionRecord,
    summaries=None,
    primitives: Optional[Primitives] = None,
    share_conditions: bool = True,
) -> Cfg:
    """Build and validate the CFG of ``record``.

    ``summaries`` is a HintsFile whose allocators/deallocators become Alloc and
    Free nodes; pass only validated hints for downstream analyses.
    """
    primitives = primitives or Primitives()
    source = _function_source(record)
    tree = make_parser(record.language).parse(source.encode("utf-8"))
    fn = _first_function(tree.root_node)
    if fn is None or fn.child_by_field_name("body") is None:
        raise CfgError(f"{record.name}: no function body could be parsed")
    builder = _Builder(record, summaries, primitives, share_conditions)
    preds = builder.stmt(fn.child_by_field_name("body"), [(0, Polarity.UNCONDITIONAL)])
    cfg = builder.finish(preds)
    check_cfg(cfg)
    return cfg


def _first_function(root: Node) -> Optional[Node]:
    stack = [root]
    while stack:
        n = stack.pop()
        if n.type == "function_definition":
            return n
        stack.extend(reversed(n.children))
    return None


def cfg_from_spec(
    name: str,
    params: Sequence[str],
    nodes: Sequence[CfgNode],
    edges: Sequence[Tuple[int, int, str]],
    conditions: Optional[Dict[int, str]] = None,
    share_conditions: bool = True,
) -> Cfg:
    """Assemble a CFG by hand; ``conditions`` maps Branch nodes to condition text."""
    conditions = dict(conditions or {})
    cond_vars: List[str] = []
    lits: Dict[int, int] = {}
    fixed = list(nodes)
    for i, n in enumerate(fixed):
        if n.kind is not NodeKind.BRANCH:
            continue
        key, neg = normalize_condition(conditions.get(i, n.cond or f"b{i}"))
        name_key = key if share_conditions else f"{key}@{i}"
        if name_key not in cond_vars:
            cond_vars.append(name_key)
        var = cond_vars.index(name_key) + 1
        lits[i] = -var if neg else var
        if n.cond is None:
            fixed[i] = replace(n, cond=("!" if neg else "") + key)
    cfg = Cfg(
        name=name,
        params=tuple(params),
        nodes=fixed,
        edges=[Edge(s, d, Polarity(p)) for s, d, p in edges],
        branch_lit=lits,
        cond_vars=cond_vars,
    )
    check_cfg(cfg)
    return cfg
