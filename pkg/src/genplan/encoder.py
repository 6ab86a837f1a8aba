"""State-goal graph encoding.

A task state becomes a complete directed graph over the instance objects:
global features hold the 0-arity predicates, node features the 1-arity
predicates, edge features the 2-arity predicates. Each feature vector is
split into (K + 2) equal blocks: K history snapshots (oldest first), the
current state, and the goal. All entries are binary.

Edges are stored destination-major: for each destination node j, the rows
for every source i != j appear consecutively. This makes "pool incoming
edges per node" a sorted contiguous segment reduction, which is what the
network layers and the batched trainer rely on.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from genplan.autodiff import GatherPlan, Segments
from genplan.pddl import DomainDef, GroundAction, State, Task


class ArityError(Exception):
    pass


@dataclass(frozen=True)
class FeatureLayout:
    """Predicate-to-slot assignment and derived feature dimensions."""

    p0: tuple[int, ...]  # predicate ids with arity 0
    p1: tuple[int, ...]
    p2: tuple[int, ...]
    history_length: int  # K

    @property
    def blocks(self) -> int:
        return self.history_length + 2

    @property
    def d_u(self) -> int:
        return self.blocks * len(self.p0)

    @property
    def d_v(self) -> int:
        return self.blocks * len(self.p1)

    @property
    def d_e(self) -> int:
        return self.blocks * len(self.p2)

    def slot_of(self, predicate: int) -> tuple[int, int]:
        """(arity, index within the arity class) for a predicate id."""
        for arity, group in enumerate((self.p0, self.p1, self.p2)):
            if predicate in group:
                return arity, group.index(predicate)
        raise KeyError(predicate)

    def current_block(self) -> int:
        return self.history_length

    def goal_block(self) -> int:
        return self.history_length + 1


@dataclass
class StateGoalGraph:
    n: int
    u: np.ndarray  # [d_u]
    v: np.ndarray  # [n, d_v]
    e: np.ndarray  # [n, n, d_e], diagonal unused
    object_order: tuple[int, ...]


def build_layout(domain: DomainDef, history_length: int = 1) -> FeatureLayout:
    """Partition the domain's predicates by arity."""
    groups: dict[int, list[int]] = {0: [], 1: [], 2: []}
    for pid, pred in enumerate(domain.predicates):
        if pred.arity > 2:
            raise ArityError(f"predicate {pred.name!r} has arity {pred.arity}")
        groups[pred.arity].append(pid)
    return FeatureLayout(
        tuple(groups[0]), tuple(groups[1]), tuple(groups[2]), history_length
    )


def edge_row(src: int, dst: int, n: int) -> int:
    """Flat index of directed edge src -> dst in destination-major order."""
    if src == dst:
        raise IndexError(f"self edge ({src}, {dst}) has no feature row")
    return dst * (n - 1) + (src if src < dst else src - 1)


@lru_cache(maxsize=256)
def edge_endpoints(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(src, dst) arrays for the destination-major complete-graph layout."""
    if n <= 1:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    dst = np.repeat(np.arange(n, dtype=np.int64), n - 1)
    grid = np.tile(np.arange(n, dtype=np.int64), (n, 1))
    src = grid[~np.eye(n, dtype=bool)].reshape(n, n - 1)
    # row j of src lists every source for destination j
    src = np.ascontiguousarray(src.reshape(-1))
    dst.setflags(write=False)
    src.setflags(write=False)
    return src, dst


class TaskEncoder:
    """Per-task cache mapping atoms to feature coordinates.

    Feature targets are independent of the snapshot block, so one table
    serves history, current, and goal blocks alike.
    """

    def __init__(self, task: Task, layout: FeatureLayout):
        self.task = task
        self.layout = layout
        self.n = len(task.objects)
        self.num_edges = self.n * (self.n - 1)
        slot_by_pred: dict[int, tuple[int, int]] = {}
        for arity, group in enumerate((layout.p0, layout.p1, layout.p2)):
            for idx, pid in enumerate(group):
                slot_by_pred[pid] = (arity, idx)
        # atom id -> (arity, flat position within one block of its class)
        self.targets: list[tuple[int, int]] = []
        n1 = len(layout.p1)
        n2 = len(layout.p2)
        for atom in task.atoms:
            arity, slot = slot_by_pred[atom.predicate]
            if arity == 0:
                self.targets.append((0, slot))
            elif arity == 1:
                self.targets.append((1, atom.args[0] * n1 + slot))
            else:
                src, dst = atom.args
                if src == dst:
                    self.targets.append((-1, 0))  # self edge: no feature row
                else:
                    self.targets.append((2, edge_row(src, dst, self.n) * n2 + slot))
        self._goal_cache: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def _fill(self, u, v_flat, e_flat, block: int, atoms) -> None:
        lay = self.layout
        n0, n1, n2 = len(lay.p0), len(lay.p1), len(lay.p2)
        blocks = lay.blocks
        for atom_id in atoms:
            arity, pos = self.targets[atom_id]
            if arity == 0:
                u[block * n0 + pos] = 1.0
            elif arity == 1:
                row, slot = divmod(pos, n1)
                v_flat[row * (blocks * n1) + block * n1 + slot] = 1.0
            elif arity == 2:
                row, slot = divmod(pos, n2)
                e_flat[row * (blocks * n2) + block * n2 + slot] = 1.0

    def encode_arrays(
        self, history: list[State], current: State, dtype=np.float32
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(u [d_u], v [n, d_v], e_flat [n(n-1), d_e]) for one state."""
        lay = self.layout
        u = np.zeros(lay.d_u, dtype=dtype)
        v = np.zeros(self.n * lay.d_v, dtype=dtype)
        e = np.zeros(self.num_edges * lay.d_e, dtype=dtype)
        K = lay.history_length
        snapshots = list(history)[-K:] if K else []
        while len(snapshots) < K:
            snapshots.insert(0, snapshots[0] if snapshots else current)
        for block, snap in enumerate(snapshots):
            self._fill(u, v, e, block, snap)
        self._fill(u, v, e, lay.current_block(), current)
        self._fill(u, v, e, lay.goal_block(), self.task.goal)
        return u, v.reshape(self.n, lay.d_v), e.reshape(self.num_edges, lay.d_e)


def encode(
    task: Task,
    history: list[State],
    current: State,
    layout: FeatureLayout,
    encoder: TaskEncoder | None = None,
) -> StateGoalGraph:
    """Full state-goal graph with dense [n, n, d_e] edge features."""
    if len(history) > layout.history_length:
        raise ValueError(
            f"history length {len(history)} exceeds K={layout.history_length}"
        )
    enc = encoder if encoder is not None else TaskEncoder(task, layout)
    u, v, e_flat = enc.encode_arrays(history, current, dtype=np.float64)
    n = enc.n
    e = np.zeros((n, n, layout.d_e), dtype=np.float64)
    if n > 1:
        src, dst = edge_endpoints(n)
        e[src, dst] = e_flat
    return StateGoalGraph(n, u, v, e, tuple(range(n)))


def dense_to_flat(e: np.ndarray) -> np.ndarray:
    """[n, n, d_e] -> [n(n-1), d_e] in destination-major order."""
    n = e.shape[0]
    if n <= 1:
        return np.zeros((0, e.shape[2]), dtype=e.dtype)
    src, dst = edge_endpoints(n)
    return e[src, dst]


def flat_to_dense(e_flat: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, n, e_flat.shape[1]), dtype=e_flat.dtype)
    if n > 1:
        src, dst = edge_endpoints(n)
        out[src, dst] = e_flat
    return out


class GraphBatch:
    """Structural index arrays for a block-diagonal batch of complete graphs.

    Holds everything the network layers need that depends only on the node
    counts: edge endpoints, gather plans, and segment layouts. Reused across
    every gradient step on the same batch.
    """

    def __init__(self, sizes: list[int]):
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.num_graphs = len(sizes)
        self.node_offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.total_nodes = int(self.node_offsets[-1])
        edge_counts = self.sizes * np.maximum(self.sizes - 1, 0)
        self.edge_offsets = np.concatenate([[0], np.cumsum(edge_counts)])
        self.total_edges = int(self.edge_offsets[-1])

        srcs, dsts = [], []
        for g, n in enumerate(sizes):
            if n > 1:
                s, d = edge_endpoints(n)
                srcs.append(s + self.node_offsets[g])
                dsts.append(d + self.node_offsets[g])
        if srcs:
            self.edge_src = np.concatenate(srcs)
            self.edge_dst = np.concatenate(dsts)
        else:
            self.edge_src = np.zeros(0, dtype=np.int64)
            self.edge_dst = np.zeros(0, dtype=np.int64)

        self.gather_src = GatherPlan(self.edge_src, self.total_nodes)
        self.gather_dst = GatherPlan(self.edge_dst, self.total_nodes)
        node_to_graph = np.repeat(np.arange(self.num_graphs, dtype=np.int64), self.sizes)
        self.gather_node_graph = GatherPlan(node_to_graph, self.num_graphs)
        # incoming edges per node: destination-major layout keeps them contiguous
        in_counts = np.repeat(np.maximum(self.sizes - 1, 0), self.sizes)
        self.edges_by_dst = Segments(in_counts)
        self.nodes_by_graph = Segments(self.sizes)


@lru_cache(maxsize=128)
def _cached_graph_batch(sizes: tuple[int, ...]) -> GraphBatch:
    return GraphBatch(list(sizes))


def graph_batch(sizes) -> GraphBatch:
    """GraphBatch for the given node counts, memoized on the size tuple."""
    return _cached_graph_batch(tuple(int(s) for s in sizes))
