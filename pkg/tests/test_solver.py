import itertools
import random

import pytest

from mmleak.solver import PAIRWISE_LIMIT, Formula, SolverUnknown, brute_force_solve, compile_clauses, solve


def truth_table_sat(formula: Formula) -> bool:
    # independent of Formula.satisfied_by: evaluate the raw clauses and groups here
    n = formula.num_vars
    for bits in itertools.product((False, True), repeat=n):
        def val(l):
            return bits[abs(l) - 1] if l > 0 else not bits[abs(l) - 1]

        if all(any(val(l) for l in c) for c in formula.clauses) and all(
            sum(val(l) for l in g) <= 1 for g in formula.at_most_one_groups
        ):
            return True
    return False


def random_formula(rng, max_vars=16):
    n = rng.randint(1, max_vars)
    f = Formula(n)
    for _ in range(rng.randint(0, int(n * 4.5))):
        width = rng.randint(1, 3)
        f.add_clause([rng.choice((1, -1)) * rng.randint(1, n) for _ in range(width)])
    for _ in range(rng.randint(0, 2)):
        k = rng.randint(1, min(n, 9))
        f.add_at_most_one([rng.choice((1, -1)) * v for v in rng.sample(range(1, n + 1), k)])
    return f


def test_simple_sat_and_unsat():
    f = Formula(2)
    f.add_clause([1, 2])
    f.add_clause([-1])
    res = solve(f)
    assert res and res.model == {1: False, 2: True}
    f.add_clause([-2])
    assert not solve(f)


def test_empty_clause_is_unsat_and_empty_formula_sat():
    assert solve(Formula(3))
    f = Formula(1)
    f.add_clause([])
    assert not solve(f)


def test_decisions_prefer_false_for_reproducible_models():
    f = Formula(4)
    f.add_clause([1, 2, 3, 4])
    assert solve(f).model == {1: False, 2: False, 3: False, 4: True}


def test_undeclared_literal_rejected():
    f = Formula(2)
    with pytest.raises(ValueError):
        f.add_clause([3])
    with pytest.raises(ValueError):
        f.add_clause([0])
    with pytest.raises(ValueError):
        f.add_at_most_one([])


@pytest.mark.parametrize("size", [2, PAIRWISE_LIMIT, PAIRWISE_LIMIT + 1, 12])
def test_at_most_one_semantics(size):
    # at most one of `size` vars, and at least two forced -> unsat; exactly one forced -> sat
    f = Formula(size)
    f.add_at_most_one(range(1, size + 1))
    g = f.copy()
    g.add_clause([1])
    res = solve(g)
    assert res and [v for v in range(1, size + 1) if res.model[v]] == [1]
    g.add_clause([size])
    assert not solve(g)


def test_sequential_counter_introduces_aux_variables_only_for_large_groups():
    small = Formula(PAIRWISE_LIMIT)
    small.add_at_most_one(range(1, PAIRWISE_LIMIT + 1))
    assert compile_clauses(small)[0] == PAIRWISE_LIMIT
    big = Formula(10)
    big.add_at_most_one(range(1, 11))
    n, clauses = compile_clauses(big)
    assert n == 10 + 9
    # model restricted to the caller's variables
    assert set(solve(big).model) == set(range(1, 11))


def test_dimacs_rendering():
    f = Formula(2)
    f.add_clause([1, -2])
    f.add_at_most_one([1, 2])
    assert f.to_dimacs() == "p cnf 2 2\n1 -2 0\n-1 -2 0\n"


def pigeonhole(pigeons, holes):
    f = Formula(pigeons * holes)
    var = lambda p, h: p * holes + h + 1
    for p in range(pigeons):
        f.add_clause([var(p, h) for h in range(holes)])
    for h in range(holes):
        f.add_at_most_one([var(p, h) for p in range(pigeons)])
    return f


def test_pigeonhole_unsat_and_budget():
    assert not solve(pigeonhole(5, 4))
    with pytest.raises(SolverUnknown):
        solve(pigeonhole(7, 6), conflict_budget=5)


def test_models_satisfy_formula_on_random_instances():
    rng = random.Random(7)
    for _ in range(200):
        f = random_formula(rng, 12)
        res = solve(f)
        if res:
            assert f.satisfied_by(res.model)


def test_brute_force_solver_matches_independent_table():
    rng = random.Random(11)
    for _ in range(100):
        f = random_formula(rng, 8)
        assert bool(brute_force_solve(f)) == truth_table_sat(f)


def test_random_formulas_agree_with_truth_table():
    rng = random.Random(2024)
    disagreements = 0
    for _ in range(500):
        f = random_formula(rng, 16)
        if bool(solve(f)) != truth_table_sat(f):
            disagreements += 1
    assert disagreements == 0
