"""Library results on random acyclic CFGs versus brute-force reference semantics."""

import random

import pytest

from mmleak.cfg import NodeKind, count_paths, enumerate_paths
from mmleak.encoding import path_condition_satisfiable
from mmleak.feasibility import FeasibilityStatus, check_leak_feasible, replay_path
from mmleak.summaries import FunctionSummary
from mmleak.summary_validation import CallGraphView, Outcome, ValidationConfig, validate_allocator, validate_deallocator

from oracles import all_paths, feasible, oracle_allocator, oracle_deallocator, oracle_leak_feasible, random_cfg

N_CFGS = 250


def cfgs(seed):
    rng = random.Random(seed)
    return [random_cfg(rng) for _ in range(N_CFGS)]


def test_path_enumeration_matches_dfs():
    for cfg in cfgs(1):
        mine = sorted(tuple(p.nodes) for p in enumerate_paths(cfg))
        ref = sorted(tuple(n for n, _ in p) for p in all_paths(cfg))
        assert mine == ref
        assert count_paths(cfg) == len(ref)


def test_path_satisfiability_matches_assignment_search():
    for cfg in cfgs(2):
        # both arms of a branch may reach the same node, so key on the arms taken too
        ref = {(tuple(n for n, _ in p), tuple((n, b) for n, b in p if b is not None)): p for p in all_paths(cfg)}
        for path in enumerate_paths(cfg):
            key = (tuple(path.nodes), tuple(path.branch_literals))
            assert path_condition_satisfiable(cfg, path) == feasible(cfg, ref[key])


def test_leak_feasibility_matches_oracle():
    checked = 0
    feasible_count = 0
    for cfg in cfgs(3):
        for site in cfg.of_kind(NodeKind.ALLOC):
            v = check_leak_feasible(cfg, site)
            want = oracle_leak_feasible(cfg, site)
            assert (v.status is FeasibilityStatus.FEASIBLE) == want, (cfg.to_dot(), site)
            if want:
                feasible_count += 1
                # the witness is a real path that is satisfiable and ends in the leak state
                assert v.witness.nodes[0] == 0 and v.witness.exit == v.exit_node
                assert path_condition_satisfiable(cfg, v.witness)
                assert replay_path(cfg, v.witness, site) == {"alloc": True, "freed": False, "escaped": False}
            checked += 1
    assert checked > 100 and 0 < feasible_count < checked


@pytest.mark.parametrize("path_cap", [None, 0])
def test_allocator_validation_matches_oracle(path_cap):
    config = ValidationConfig() if path_cap is None else ValidationConfig(path_cap=path_cap)
    valid = 0
    for cfg in cfgs(4):
        v = validate_allocator(FunctionSummary.allocator("rand"), cfg, CallGraphView(None, config))
        want = oracle_allocator(cfg)
        assert (v.outcome is Outcome.VALID) == want, cfg.to_dot()
        valid += want
    assert 0 < valid < N_CFGS


@pytest.mark.parametrize("path_cap", [None, 0])
def test_deallocator_validation_matches_oracle(path_cap):
    config = ValidationConfig() if path_cap is None else ValidationConfig(path_cap=path_cap)
    valid = 0
    for cfg in cfgs(5):
        v = validate_deallocator(FunctionSummary.deallocator("rand", 0), cfg, CallGraphView(None, config))
        want = oracle_deallocator(cfg)
        assert (v.outcome is Outcome.VALID) == want, cfg.to_dot()
        valid += want
    assert 0 < valid < N_CFGS
