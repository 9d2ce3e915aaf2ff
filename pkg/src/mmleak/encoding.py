"""Boolean path-selection encoding over an acyclic CFG.

One variable per edge selects a single concrete path: every node has at most
one active incoming edge, a node is reached iff one of its incoming edges is
active, and an active edge requires its source to be reached.  Branch edges
imply the condition literal of their polarity.  State variables are then
carried along the selected edge by per-edge transfer functions.
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

from .cfg import Cfg, Path, Polarity
from .solver import DEFAULT_CONFLICT_BUDGET, Formula, SatResult, solve

# transfer functions for one state along one edge
#   ("const", True|False)   state(v) := constant
#   ("copy", name)          state(v) := name(u)
#   ("andnot", a, b)        state(v) := a(u) and not b(u)
Transfer = Tuple


class PathEncoding:
    def __init__(self, cfg: Cfg):
        self.cfg = cfg
        self.formula = Formula(cfg.num_cond_vars)
        f = self.formula
        self.edge_vars: Dict[int, int] = {i: f.new_var() for i in range(len(cfg.edges))}
        self.reach_vars: Dict[int, int] = {n: f.new_var() for n in range(len(cfg.nodes))}
        self.states: Dict[str, Dict[int, int]] = {}
        self._edge_index = {id(e): i for i, e in enumerate(cfg.edges)}

        f.add_clause([self.reach_vars[cfg.entry]])
        for n in range(len(cfg.nodes)):
            incoming = [self.edge_vars[self._edge_index[id(e)]] for e in cfg.pred(n)]
            r = self.reach_vars[n]
            if n == cfg.entry:
                continue
            if incoming:
                f.add_at_most_one(incoming)
            f.add_clause([-r] + incoming)
            for ev in incoming:
                f.add_clause([-ev, r])
        for i, e in enumerate(cfg.edges):
            ev = self.edge_vars[i]
            f.add_clause([-ev, self.reach_vars[e.src]])
            if e.polarity is not Polarity.UNCONDITIONAL:
                lit = cfg.branch_lit[e.src]
                f.add_clause([-ev, lit if e.polarity is Polarity.TRUE else -lit])

    def add_states(self, names: Sequence[str], transfer: Callable[[int, int], Dict[str, Transfer]]) -> None:
        """Declare states and constrain them along every edge.

        ``transfer(edge_index, dst)`` returns the transfer per state name;
        states omitted from the result are copied from the source node.
        States at Entry are false, and a state can only hold at reached nodes.
        """
        f = self.formula
        for name in names:
            self.states[name] = {n: f.new_var() for n in range(len(self.cfg.nodes))}
        for name in names:
            f.add_clause([-self.states[name][self.cfg.entry]])
            for n, var in self.states[name].items():
                f.add_clause([-var, self.reach_vars[n]])
        for i, e in enumerate(self.cfg.edges):
            ev = self.edge_vars[i]
            rules = transfer(i, e.dst)
            for name in names:
                s_v = self.states[name][e.dst]
                rule = rules.get(name, ("copy", name))
                kind = rule[0]
                if kind == "const":
                    f.add_clause([-ev, s_v if rule[1] else -s_v])
                elif kind == "copy":
                    a = self.states[rule[1]][e.src]
                    f.add_clause([-ev, -a, s_v])
                    f.add_clause([-ev, a, -s_v])
                elif kind == "andnot":
                    a = self.states[rule[1]][e.src]
                    b = self.states[rule[2]][e.src]
                    f.add_clause([-ev, -s_v, a])
                    f.add_clause([-ev, -s_v, -b])
                    f.add_clause([-ev, -a, b, s_v])
                else:
                    raise ValueError(f"unknown transfer {rule!r}")

    def query(self, units: Iterable[int], conflict_budget: int = DEFAULT_CONFLICT_BUDGET) -> SatResult:
        f = self.formula.copy()
        for lit in units:
            f.add_clause([lit])
        return solve(f, conflict_budget)

    def state(self, name: str, node: int) -> int:
        return self.states[name][node]

    def witness(self, result: SatResult, exit_node: int) -> Path:
        """Walk active edges back from ``exit_node`` to Entry."""
        cfg = self.cfg
        nodes = [exit_node]
        lits: List[Tuple[int, bool]] = []
        n = exit_node
        while n != cfg.entry:
            active = [e for e in cfg.pred(n) if result.value(self.edge_vars[self._edge_index[id(e)]])]
            if len(active) != 1:
                raise AssertionError(f"model selects {len(active)} incoming edges at node {n}")
            e = active[0]
            if e.polarity is not Polarity.UNCONDITIONAL:
                lits.append((e.src, e.polarity is Polarity.TRUE))
            n = e.src
            nodes.append(n)
        return Path(tuple(reversed(nodes)), tuple(reversed(lits)))


def path_condition_satisfiable(cfg: Cfg, path: Path, conflict_budget: int = DEFAULT_CONFLICT_BUDGET) -> bool:
    """SAT check of the conjunction of branch literals taken along ``path``."""
    f = Formula(cfg.num_cond_vars)
    for lit in path.literals(cfg):
        f.add_clause([lit])
    return bool(solve(f, conflict_budget))
