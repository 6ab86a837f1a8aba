"""Delete-relaxation heuristic (hff) and the episode horizon derived from it.

The relaxed planning graph is built by forward chaining with unmet-
precondition counters; a relaxed plan is extracted by backward achiever
selection. Ties between achievers break on (first-appearance layer,
action id) so horizons are reproducible.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass

from genplan.pddl import GroundAction, State, Task

INFINITE = math.inf

HORIZON_FACTOR = 5


class UnsolvableRelaxation(Exception):
    """Goal unreachable even with delete effects ignored."""


@dataclass(frozen=True)
class RelaxedPlanResult:
    length: float  # non-negative int, or INFINITE
    plan: tuple[GroundAction, ...]

    @property
    def finite(self) -> bool:
        return self.length != INFINITE


class _RelaxationIndex:
    """Static per-task tables shared by every hff() call."""

    def __init__(self, task: Task):
        self.pre_of: list[tuple[int, ...]] = []
        self.add_of: list[tuple[int, ...]] = []
        self.consumers: dict[int, list[int]] = defaultdict(list)
        self.achievers: dict[int, list[int]] = defaultdict(list)
        self.no_pre: list[int] = []
        for act in task.ground_actions:
            aid = act.index
            self.pre_of.append(tuple(act.pre))
            self.add_of.append(tuple(act.add))
            for f in act.pre:
                self.consumers[f].append(aid)
            for f in act.add:
                self.achievers[f].append(aid)
            if not act.pre:
                self.no_pre.append(aid)


def _relaxation_index(task: Task) -> _RelaxationIndex:
    idx = getattr(task, "_relaxation_index", None)
    if idx is None:
        idx = _RelaxationIndex(task)
        task._relaxation_index = idx
    return idx


def relaxed_fact_layers(task: Task, state: State) -> tuple[dict[int, int], dict[int, int]]:
    """First-appearance layer per atom and per action when chaining forward
    with delete lists ignored. Atoms/actions never reached are absent."""
    idx = _relaxation_index(task)
    fact_layer: dict[int, int] = {f: 0 for f in state}
    action_layer: dict[int, int] = {}
    remaining = {aid: len(idx.pre_of[aid]) for aid in range(len(idx.pre_of))}

    goal_left = len(task.goal - state)
    frontier = list(state)
    triggered = list(idx.no_pre)
    layer = 0
    while True:
        for f in frontier:
            for aid in idx.consumers.get(f, ()):
                remaining[aid] -= 1
                if remaining[aid] == 0:
                    triggered.append(aid)
        if goal_left == 0 or not triggered:
            break
        next_frontier = []
        for aid in triggered:
            action_layer[aid] = layer
            for f in idx.add_of[aid]:
                if f not in fact_layer:
                    fact_layer[f] = layer + 1
                    next_frontier.append(f)
                    if f in task.goal:
                        goal_left -= 1
        triggered = []
        frontier = next_frontier
        layer += 1
        if not frontier:
            break
    return fact_layer, action_layer


def hff(task: Task, state: State) -> RelaxedPlanResult:
    """FF heuristic: length of a relaxed plan extracted from the relaxed
    planning graph, INFINITE if some goal atom is relaxed-unreachable."""
    missing = task.goal - state
    if not missing:
        return RelaxedPlanResult(0, ())

    fact_layer, action_layer = relaxed_fact_layers(task, state)
    if any(g not in fact_layer for g in task.goal):
        return RelaxedPlanResult(INFINITE, ())

    idx = _relaxation_index(task)
    goals_at: dict[int, set[int]] = defaultdict(set)
    for g in missing:
        goals_at[fact_layer[g]].add(g)
    max_layer = max(goals_at)

    marked: dict[int, set[int]] = defaultdict(set)
    chosen: list[int] = []
    for t in range(max_layer, 0, -1):
        for g in sorted(goals_at.get(t, ())):
            if g in marked[t]:
                continue
            best = min(
                (a for a in idx.achievers[g] if a in action_layer and action_layer[a] < t),
                key=lambda a: (action_layer[a], a),
            )
            chosen.append(best)
            for p in idx.pre_of[best]:
                lp = fact_layer[p]
                if lp > 0:
                    goals_at[lp].add(p)
            marked[t].update(idx.add_of[best])

    chosen.sort(key=lambda a: (action_layer[a], a))
    plan = tuple(task.ground_actions[a] for a in chosen)
    return RelaxedPlanResult(len(plan), plan)


def horizon(task: Task, state: State | None = None) -> int:
    """Episode step budget: HORIZON_FACTOR times the relaxed plan length
    from ``state`` (default: the initial state)."""
    result = hff(task, task.init if state is None else state)
    if not result.finite:
        raise UnsolvableRelaxation(
            f"goal of {task.problem.name!r} is relaxed-unreachable"
        )
    return HORIZON_FACTOR * int(result.length)
