"""Policy-guided greedy best-first search (GBFS-GNN), a classical GBFS+hff
baseline, and plan validation.

GBFS-GNN searches over state-action nodes scored by
pi(a|s) * V(s) / (1 + H(pi(.|s))). Expanding a node applies its action,
enqueues the successor's own state-action children, and runs one full
sampled policy rollout from the successor; rollout states never enter the
open list. A plan is the tree path plus, when a rollout reached the goal,
that rollout's action suffix.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np

from genplan.heuristics import HORIZON_FACTOR, hff
from genplan.pddl import (
    GroundAction,
    State,
    Task,
    applicable_actions,
    apply as apply_action,
    is_goal,
)
from genplan.policy import PolicyNetwork, PolicyValueOutput, TaskContext

VALUE_FLOOR = 1e-6


@dataclass(frozen=True)
class Budget:
    max_time: float = math.inf  # seconds
    max_expansions: float = math.inf


@dataclass
class SearchNode:
    state: State
    prev_state: State  # history snapshot for encoding successors
    action: GroundAction
    g: float
    parent: "SearchNode | None"
    depth: int


@dataclass
class SearchResult:
    plan: list[GroundAction] | None
    expanded_states: int
    generated_nodes: int
    rollout_steps: int
    wall_time: float

    @property
    def solved(self) -> bool:
        return self.plan is not None


def node_score(probs: np.ndarray, value: float, action_index: int) -> float:
    """pi(a|s) * max(V(s), floor) / (1 + entropy in nats)."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0]
    entropy = float(-(nz * np.log(nz)).sum()) if nz.size else 0.0
    return float(p[action_index]) * max(float(value), VALUE_FLOOR) / (1.0 + entropy)


class _OpenList:
    """Max-g priority queue with FIFO tie-breaking."""

    def __init__(self):
        self._heap: list[tuple[float, int, SearchNode]] = []
        self._counter = itertools.count()

    def push(self, node: SearchNode) -> None:
        heapq.heappush(self._heap, (-node.g, next(self._counter), node))

    def pop(self) -> SearchNode:
        return heapq.heappop(self._heap)[2]

    def __len__(self) -> int:
        return len(self._heap)


def _path(node: SearchNode) -> list[GroundAction]:
    actions: list[GroundAction] = []
    cur: SearchNode | None = node
    while cur is not None:
        actions.append(cur.action)
        cur = cur.parent
    actions.reverse()
    return actions


class _PolicyRollout:
    """Sampled (or greedy) policy rollout bounded by the hff horizon rule."""

    def __init__(self, policy: PolicyNetwork, ctx: TaskContext,
                 rng: np.random.Generator):
        self.policy = policy
        self.ctx = ctx
        self.rng = rng
        self.steps_taken = 0

    def run(self, state: State, prev_state: State, horizon: int,
            mode: str) -> list[GroundAction] | None:
        task = self.ctx.task
        actions: list[GroundAction] = []
        history = [prev_state]
        current = state
        for _ in range(horizon):
            ids = task.applicable_indices(current)
            if len(ids) == 0:
                return None
            out = self.policy.evaluate(self.ctx, history, current, ids)
            if mode == "greedy":
                choice = int(np.argmax(out.probs))
            else:
                cdf = np.cumsum(out.probs)
                u = self.rng.random() * cdf[-1]
                choice = int(np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1))
            action = task.ground_actions[int(ids[choice])]
            nxt = apply_action(current, action)
            actions.append(action)
            self.steps_taken += 1
            if is_goal(task, nxt):
                return actions
            history = [current]
            current = nxt
        return None


def gbfs_gnn(task: Task, policy: PolicyNetwork, budget: Budget,
             rng: np.random.Generator,
             ctx: TaskContext | None = None) -> SearchResult:
    """Policy-guided GBFS over state-action nodes with one full rollout per
    expansion. The returned plan always validates."""
    started = time.perf_counter()
    if ctx is None:
        ctx = TaskContext(task, policy.layout)
    roller = _PolicyRollout(policy, ctx, rng)

    def finish(plan):
        result = SearchResult(
            plan=plan,
            expanded_states=expanded,
            generated_nodes=generated,
            rollout_steps=roller.steps_taken,
            wall_time=time.perf_counter() - started,
        )
        if result.plan is not None and not validate_plan(task, result.plan):
            raise AssertionError("search produced an invalid plan")
        return result

    expanded = 0
    generated = 0

    if is_goal(task, task.init):
        return finish([])

    init_h = hff(task, task.init)
    if not init_h.finite:
        return finish(None)

    greedy_plan = roller.run(task.init, task.init, HORIZON_FACTOR * int(init_h.length),
                             mode="greedy")
    if greedy_plan is not None:
        return finish(greedy_plan)

    open_list = _OpenList()
    seen: set[State] = {task.init}

    def enqueue_children(state: State, prev_state: State,
                         parent: SearchNode | None, depth: int) -> bool:
        """Score and push (state, a) for each applicable a; returns True if
        a child's successor is the goal (caller finishes with its path)."""
        nonlocal generated
        ids = task.applicable_indices(state)
        if len(ids) == 0:
            return False
        out = policy.evaluate(ctx, [prev_state], state, ids)
        for pos, aid in enumerate(ids):
            node = SearchNode(
                state=state,
                prev_state=prev_state,
                action=task.ground_actions[int(aid)],
                g=node_score(out.probs, out.value, pos),
                parent=parent,
                depth=depth,
            )
            generated += 1
            open_list.push(node)
        return False

    enqueue_children(task.init, task.init, None, 0)

    while len(open_list):
        if expanded >= budget.max_expansions:
            return finish(None)
        if time.perf_counter() - started > budget.max_time:
            return finish(None)
        node = open_list.pop()
        expanded += 1
        successor = apply_action(node.state, node.action)
        if is_goal(task, successor):
            return finish(_path(node))
        if successor in seen:
            continue
        seen.add(successor)
        succ_h = hff(task, successor)
        if not succ_h.finite:
            continue  # relaxed-unreachable: prune
        enqueue_children(successor, node.state, node, node.depth + 1)
        rollout = roller.run(successor, node.state,
                             HORIZON_FACTOR * int(succ_h.length), mode="sample")
        if rollout is not None:
            return finish(_path(node) + rollout)
    return finish(None)


def gbfs_hff(task: Task, budget: Budget) -> SearchResult:
    """Classical greedy best-first search on states ordered by ascending hff,
    with duplicate detection; goal test at generation."""
    started = time.perf_counter()

    def finish(plan, expanded, generated):
        result = SearchResult(
            plan=plan,
            expanded_states=expanded,
            generated_nodes=generated,
            rollout_steps=0,
            wall_time=time.perf_counter() - started,
        )
        if result.plan is not None and not validate_plan(task, result.plan):
            raise AssertionError("search produced an invalid plan")
        return result

    if is_goal(task, task.init):
        return finish([], 0, 0)

    counter = itertools.count()
    init_h = hff(task, task.init)
    if not init_h.finite:
        return finish(None, 0, 0)
    heap: list[tuple[float, int, State, list[GroundAction]]] = [
        (float(init_h.length), next(counter), task.init, [])
    ]
    closed: set[State] = {task.init}
    expanded = 0
    generated = 0
    while heap:
        if expanded >= budget.max_expansions:
            return finish(None, expanded, generated)
        if time.perf_counter() - started > budget.max_time:
            return finish(None, expanded, generated)
        _, _, state, path = heapq.heappop(heap)
        expanded += 1
        for action in applicable_actions(task, state):
            nxt = apply_action(state, action)
            if nxt in closed:
                continue
            closed.add(nxt)
            generated += 1
            new_path = path + [action]
            if is_goal(task, nxt):
                return finish(new_path, expanded, generated)
            h = hff(task, nxt)
            if not h.finite:
                continue
            heapq.heappush(heap, (float(h.length), next(counter), nxt, new_path))
    return finish(None, expanded, generated)


def validate_plan(task: Task, plan: list[GroundAction]) -> bool:
    """Sequential applicability from the initial state, goal at the end."""
    state = task.init
    for action in plan:
        if not action.pre <= state:
            return False
        state = (state - action.delete) | action.add
    return is_goal(task, state)
