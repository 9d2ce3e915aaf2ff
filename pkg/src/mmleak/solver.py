"""Small Boolean satisfiability backend.

Literals use the DIMACS convention: variable ``v`` (1-based) is the literal
``v`` and its negation is ``-v``.  Besides ordinary clauses a formula may carry
at-most-one groups, which are compiled to clauses before search (pairwise for
small groups, a sequential counter for larger ones).

The search is a conflict-driven clause-learning loop with two watched literals
and first-UIP learning.  Decisions always pick the lowest unassigned variable
and try ``False`` first, so models are reproducible.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

PAIRWISE_LIMIT = 6
DEFAULT_CONFLICT_BUDGET = 200_000


class SolverUnknown(RuntimeError):
    """Raised when the conflict budget runs out before a verdict."""


@dataclass
class Formula:
    num_vars: int = 0
    clauses: List[List[int]] = field(default_factory=list)
    at_most_one_groups: List[List[int]] = field(default_factory=list)

    def new_var(self) -> int:
        self.num_vars += 1
        return self.num_vars

    def add_clause(self, literals: Iterable[int]) -> None:
        lits = list(literals)
        self._check(lits)
        self.clauses.append(lits)

    def add_at_most_one(self, literals: Iterable[int]) -> None:
        lits = list(literals)
        if not lits:
            raise ValueError("at-most-one group must be nonempty")
        self._check(lits)
        self.at_most_one_groups.append(lits)

    def _check(self, lits: Sequence[int]) -> None:
        for lit in lits:
            if lit == 0 or abs(lit) > self.num_vars:
                raise ValueError(f"literal {lit} references an undeclared variable")

    def copy(self) -> "Formula":
        return Formula(
            self.num_vars,
            [list(c) for c in self.clauses],
            [list(g) for g in self.at_most_one_groups],
        )

    def satisfied_by(self, model: Dict[int, bool]) -> bool:
        def val(lit: int) -> bool:
            return model[abs(lit)] if lit > 0 else not model[abs(lit)]

        if not all(any(val(l) for l in c) for c in self.clauses):
            return False
        return all(sum(val(l) for l in g) <= 1 for g in self.at_most_one_groups)

    def to_dimacs(self) -> str:
        """Render as DIMACS CNF with the at-most-one groups compiled in."""
        num_vars, clauses = compile_clauses(self)
        lines = [f"p cnf {num_vars} {len(clauses)}"]
        lines += [" ".join(str(l) for l in c) + " 0" for c in clauses]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class SatResult:
    satisfiable: bool
    model: Optional[Dict[int, bool]] = None

    def __bool__(self) -> bool:
        return self.satisfiable

    def value(self, lit: int) -> bool:
        if self.model is None:
            raise ValueError("unsatisfiable result has no model")
        v = self.model[abs(lit)]
        return v if lit > 0 else not v


UNSAT = SatResult(False)


def compile_clauses(formula: Formula):
    """Return ``(num_vars, clauses)`` with every at-most-one group clausified."""
    num_vars = formula.num_vars
    clauses = [list(c) for c in formula.clauses]
    for group in formula.at_most_one_groups:
        if len(group) <= PAIRWISE_LIMIT:
            clauses.extend([-a, -b] for a, b in itertools.combinations(group, 2))
            continue
        # sequential counter: s_i <=> some of group[0..i] is true
        n = len(group)
        aux = list(range(num_vars + 1, num_vars + n))
        num_vars += n - 1
        clauses.append([-group[0], aux[0]])
        for i in range(1, n - 1):
            clauses.append([-group[i], aux[i]])
            clauses.append([-aux[i - 1], aux[i]])
            clauses.append([-group[i], -aux[i - 1]])
        clauses.append([-group[n - 1], -aux[n - 2]])
    return num_vars, clauses


def solve(formula: Formula, conflict_budget: int = DEFAULT_CONFLICT_BUDGET) -> SatResult:
    num_vars, clauses = compile_clauses(formula)
    model = _Cdcl(num_vars, clauses, conflict_budget).run()
    if model is None:
        return UNSAT
    return SatResult(True, {v: model[v] for v in range(1, formula.num_vars + 1)})


def brute_force_solve(formula: Formula) -> SatResult:
    """Truth-table enumeration; exponential, used as a reference oracle."""
    n = formula.num_vars
    for bits in itertools.product((False, True), repeat=n):
        model = {i + 1: b for i, b in enumerate(bits)}
        if formula.satisfied_by(model):
            return SatResult(True, model)
    return UNSAT


class _Cdcl:
    def __init__(self, num_vars: int, clauses: List[List[int]], budget: int):
        self.n = num_vars
        self.budget = budget
        self.assign: List[Optional[bool]] = [None] * (num_vars + 1)
        self.level = [0] * (num_vars + 1)
        self.reason: List[Optional[List[int]]] = [None] * (num_vars + 1)
        self.trail: List[int] = []
        self.trail_lim: List[int] = []
        self.watches: Dict[int, List[List[int]]] = {}
        self.units: List[int] = []
        self.empty = False
        for c in clauses:
            self._add(c)

    def _add(self, clause: List[int]) -> None:
        lits = list(dict.fromkeys(clause))
        if any(-l in lits for l in lits):
            return
        if not lits:
            self.empty = True
        elif len(lits) == 1:
            self.units.append(lits[0])
        else:
            self._watch(lits)

    def _watch(self, lits: List[int]) -> None:
        self.watches.setdefault(-lits[0], []).append(lits)
        self.watches.setdefault(-lits[1], []).append(lits)

    def _value(self, lit: int) -> Optional[bool]:
        v = self.assign[abs(lit)]
        if v is None:
            return None
        return v if lit > 0 else not v

    def _enqueue(self, lit: int, reason: Optional[List[int]]) -> bool:
        val = self._value(lit)
        if val is not None:
            return val
        var = abs(lit)
        self.assign[var] = lit > 0
        self.level[var] = len(self.trail_lim)
        self.reason[var] = reason
        self.trail.append(lit)
        return True

    def _propagate(self, start: int) -> Optional[List[int]]:
        qhead = start
        while qhead < len(self.trail):
            false_lit = -self.trail[qhead]
            qhead += 1
            watching = self.watches.get(-false_lit, [])
            i = 0
            while i < len(watching):
                clause = watching[i]
                if clause[0] == false_lit:
                    clause[0], clause[1] = clause[1], clause[0]
                if self._value(clause[0]) is True:
                    i += 1
                    continue
                for k in range(2, len(clause)):
                    if self._value(clause[k]) is not False:
                        clause[1], clause[k] = clause[k], clause[1]
                        self.watches.setdefault(-clause[1], []).append(clause)
                        watching[i] = watching[-1]
                        watching.pop()
                        break
                else:
                    if self._value(clause[0]) is False:
                        return clause
                    self._enqueue(clause[0], clause)
                    i += 1
        return None

    def _analyze(self, conflict: List[int]):
        current = len(self.trail_lim)
        seen = set()
        learnt: List[int] = []
        counter = 0
        idx = len(self.trail) - 1
        clause = conflict
        pivot = None
        while True:
            for lit in clause:
                if pivot is not None and lit == pivot:
                    continue
                var = abs(lit)
                if var in seen or self.level[var] == 0:
                    continue
                seen.add(var)
                if self.level[var] == current:
                    counter += 1
                else:
                    learnt.append(lit)
            while abs(self.trail[idx]) not in seen:
                idx -= 1
            pivot = self.trail[idx]
            idx -= 1
            seen.discard(abs(pivot))
            counter -= 1
            if counter == 0:
                break
            clause = self.reason[abs(pivot)] or []
        learnt.insert(0, -pivot)
        back = max((self.level[abs(l)] for l in learnt[1:]), default=0)
        if len(learnt) > 1:
            j = max(range(1, len(learnt)), key=lambda k: self.level[abs(learnt[k])])
            learnt[1], learnt[j] = learnt[j], learnt[1]
        return learnt, back

    def _backtrack(self, level: int) -> None:
        if len(self.trail_lim) <= level:
            return
        cut = self.trail_lim[level]
        for lit in self.trail[cut:]:
            var = abs(lit)
            self.assign[var] = None
            self.reason[var] = None
        del self.trail[cut:]
        del self.trail_lim[level:]

    def run(self) -> Optional[List[Optional[bool]]]:
        if self.empty:
            return None
        for lit in self.units:
            if not self._enqueue(lit, None):
                return None
        qhead = 0
        conflicts = 0
        next_var = 1
        while True:
            conflict = self._propagate(qhead)
            qhead = len(self.trail)
            if conflict is not None:
                conflicts += 1
                if conflicts > self.budget:
                    raise SolverUnknown(f"conflict budget {self.budget} exhausted")
                if not self.trail_lim:
                    return None
                learnt, back = self._analyze(conflict)
                self._backtrack(back)
                qhead = len(self.trail)
                if len(learnt) == 1:
                    self._enqueue(learnt[0], None)
                else:
                    self._watch(learnt)
                    self._enqueue(learnt[0], learnt)
                next_var = 1
                continue
            while next_var <= self.n and self.assign[next_var] is not None:
                next_var += 1
            if next_var > self.n:
                return self.assign
            self.trail_lim.append(len(self.trail))
            self._enqueue(-next_var, None)
