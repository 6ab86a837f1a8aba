"""hff and horizon tests against independent relaxed-reachability and
relaxed-BFS oracles."""

from collections import deque

import pytest

from genplan import domains, generators, pddl
from genplan.heuristics import (
    INFINITE,
    UnsolvableRelaxation,
    hff,
    horizon,
    relaxed_fact_layers,
)
from genplan.pddl import ground_task, parse_domain

from conftest import random_walk_states
from test_pddl import make_problem


def relaxed_reachable(task, state):
    """Oracle: saturate add-effects of applicable relaxed actions."""
    reached = set(state)
    changed = True
    while changed:
        changed = False
        for action in task.ground_actions:
            if action.pre <= reached and not action.add <= reached:
                reached |= action.add
                changed = True
    return task.goal <= reached


def relaxed_bfs_optimal(task, state, cap=30):
    """Oracle: breadth-first search over relaxed states (delete-free)."""
    start = frozenset(state)
    if task.goal <= start:
        return 0
    frontier = deque([(start, 0)])
    seen = {start}
    while frontier:
        current, depth = frontier.popleft()
        if depth >= cap:
            continue
        for action in task.ground_actions:
            if not action.pre <= current:
                continue
            nxt = current | action.add
            if task.goal <= nxt:
                return depth + 1
            if nxt not in seen:
                seen.add(nxt)
                frontier.append((nxt, depth + 1))
    return None


@pytest.fixture(scope="module")
def gripper1_task():
    problem = generators.generate(generators.SizeSpec.of("gripper", balls=1), seed=0)
    return ground_task(domains.load_domain("gripper"), problem)


class TestHff:
    def test_goal_satisfied_gives_zero(self, gripper3_task):
        state = gripper3_task.init | gripper3_task.goal
        result = hff(gripper3_task, state)
        assert result.length == 0
        assert result.plan == ()

    def test_gripper_one_ball_is_three(self, gripper1_task):
        # pick, move, drop: achievers are unique so extraction is exact
        result = hff(gripper1_task, gripper1_task.init)
        assert result.length == 3
        assert relaxed_bfs_optimal(gripper1_task, gripper1_task.init) == 3

    def test_unreachable_goal_infinite(self, blocksworld_domain):
        prob = make_problem(
            blocksworld_domain,
            [("b1", "block"), ("b2", "block")],
            [("on-table", ("b1",)), ("on-table", ("b2",))],  # no arm-empty, no clear
            [("on", ("b1", "b2"))],
        )
        task = ground_task(blocksworld_domain, prob)
        result = hff(task, task.init)
        assert result.length == INFINITE
        assert result.plan == ()
        assert not relaxed_reachable(task, task.init)

    def test_zero_iff_goal(self, gripper3_task, blocks3_task):
        for task in (gripper3_task, blocks3_task):
            for state in random_walk_states(task, 15, seed=5):
                assert (hff(task, state).length == 0) == pddl.is_goal(task, state)

    def test_finite_iff_relaxed_reachable_small_instances(self):
        # tiny instances; the oracle saturates add effects independently
        for seed in range(20):
            for name, sizes in (
                ("blocksworld", {"blocks": 2}),
                ("gripper", {"balls": 1}),
                ("ferry", {"cars": 1, "locations": 2}),
            ):
                problem = generators.generate(
                    generators.SizeSpec.of(name, **sizes), seed=seed
                )
                task = ground_task(domains.load_domain(name), problem)
                for state in random_walk_states(task, 4, seed=seed):
                    assert hff(task, state).finite == relaxed_reachable(task, state)

    def test_counting_lower_bound(self, gripper3_task, blocks3_task):
        for task in (gripper3_task, blocks3_task):
            max_add = max(len(a.add) for a in task.ground_actions)
            for state in random_walk_states(task, 15, seed=17):
                result = hff(task, state)
                if result.finite:
                    missing = len(task.goal - state)
                    assert result.length >= missing / max_add

    def test_plan_length_consistency(self, gripper3_task):
        for state in random_walk_states(gripper3_task, 10, seed=23):
            result = hff(gripper3_task, state)
            if result.finite:
                assert result.length == len(result.plan)

    def test_monotone_layers_under_larger_state(self, gripper3_task):
        task = gripper3_task
        base = task.init
        layers_base, _ = relaxed_fact_layers(task, base)
        extra = next(iter(task.goal - base))
        layers_more, _ = relaxed_fact_layers(task, base | {extra})
        for atom, layer in layers_more.items():
            assert layer <= layers_base.get(atom, INFINITE)

    def test_matches_relaxed_bfs_when_achievers_unique(self, gripper1_task):
        # single ball, both grippers: pick/move/drop chains stay optimal
        for state in random_walk_states(gripper1_task, 8, seed=3):
            result = hff(gripper1_task, state)
            optimal = relaxed_bfs_optimal(gripper1_task, state)
            if optimal is not None and result.finite:
                assert result.length >= optimal


class TestHorizon:
    def test_factor_five(self, gripper3_task):
        assert hff(gripper3_task, gripper3_task.init).length == 7
        assert horizon(gripper3_task) == 35

    def test_zero_when_goal_in_init(self, blocksworld_domain):
        prob = make_problem(
            blocksworld_domain,
            [("b1", "block")],
            [("on-table", ("b1",)), ("clear", ("b1",)), ("arm-empty", ())],
            [],
        )
        task = ground_task(blocksworld_domain, prob)
        assert horizon(task) == 0

    def test_unsolvable_raises(self, blocksworld_domain):
        prob = make_problem(
            blocksworld_domain,
            [("b1", "block"), ("b2", "block")],
            [("on-table", ("b1",)), ("on-table", ("b2",))],
            [("on", ("b1", "b2"))],
        )
        task = ground_task(blocksworld_domain, prob)
        with pytest.raises(UnsolvableRelaxation):
            horizon(task)
