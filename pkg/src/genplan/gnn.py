"""Graph network layers: the plain message-passing block (GN) and the
attention variant (GNAT), plus stacking.

Both blocks follow the same update order: edges from (edge, origin node),
nodes from incoming updated edges (max-pooled for GN, attention-weighted
sums for GNAT) together with the globals, and globals from the mean of the
updated nodes. All layers operate on block-diagonal batches; a single graph
is a batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from genplan import autodiff as ad
from genplan.autodiff import ParamStore, ShapeMismatch, Tensor
from genplan.encoder import (
    GraphBatch,
    StateGoalGraph,
    dense_to_flat,
    flat_to_dense,
    graph_batch,
)

ARCHITECTURES = ("gn-gn", "gnat-gn")


@dataclass(frozen=True)
class GraphDims:
    u: int
    v: int
    e: int


class GNBlock:
    """Eqs: edge update, per-edge node pre-update, incoming max-pool,
    node update from (pooled message, globals), global update from the
    node mean."""

    kind = "gn"

    def __init__(self, store: ParamStore, prefix: str, dims: GraphDims, width: int,
                 rng: np.random.Generator):
        self.dims = dims
        self.width = width
        p = prefix
        self.w_e = store.create(f"{p}.w_e", (dims.e + dims.v, width), rng)
        self.b_e = store.create(f"{p}.b_e", (width,), init="zeros")
        self.w_v1 = store.create(f"{p}.w_v1", (dims.v + width, width), rng)
        self.b_v1 = store.create(f"{p}.b_v1", (width,), init="zeros")
        self.w_v2 = store.create(f"{p}.w_v2", (width + dims.u, width), rng)
        self.b_v2 = store.create(f"{p}.b_v2", (width,), init="zeros")
        self.w_u = store.create(f"{p}.w_u", (width, width), rng)
        self.b_u = store.create(f"{p}.b_u", (width,), init="zeros")

    @property
    def out_dims(self) -> GraphDims:
        return GraphDims(self.width, self.width, self.width)

    def forward(self, bg: GraphBatch, u, v, e):
        _check_dims(self.dims, bg, u, v, e)
        v_src = ad.gather_rows(v, bg.gather_src)
        e2 = ad.linear_relu(ad.concat([e, v_src], axis=1), self.w_e, self.b_e)
        v_dst = ad.gather_rows(v, bg.gather_dst)
        h = ad.linear_relu(ad.concat([v_dst, e2], axis=1), self.w_v1, self.b_v1)
        m = ad.segment_max(h, bg.edges_by_dst)
        u_per_node = ad.gather_rows(u, bg.gather_node_graph)
        v2 = ad.linear_relu(ad.concat([m, u_per_node], axis=1), self.w_v2, self.b_v2)
        pooled = ad.segment_mean(v2, bg.nodes_by_graph)
        u2 = ad.linear_relu(pooled, self.w_u, self.b_u)
        return u2, v2, e2


class GNATBlock:
    """GN variant whose node update attends over incoming edges with
    key (from the receiving node) / query (from the updated edge) scores.

    The literal equations also define a per-node intermediate h that feeds
    nothing downstream; it is computed and dropped to keep the layer
    faithful to its published form.
    """

    kind = "gnat"

    def __init__(self, store: ParamStore, prefix: str, dims: GraphDims, width: int,
                 rng: np.random.Generator):
        self.dims = dims
        self.width = width
        p = prefix
        self.w_e = store.create(f"{p}.w_e", (dims.e + dims.v, width), rng)
        self.b_e = store.create(f"{p}.b_e", (width,), init="zeros")
        self.w_v1 = store.create(f"{p}.w_v1", (dims.v, width), rng)
        self.b_v1 = store.create(f"{p}.b_v1", (width,), init="zeros")
        self.w_k = store.create(f"{p}.w_k", (dims.v, width), rng)
        self.b_k = store.create(f"{p}.b_k", (width,), init="zeros")
        self.w_q = store.create(f"{p}.w_q", (width, width), rng)
        self.b_q = store.create(f"{p}.b_q", (width,), init="zeros")
        self.w_v = store.create(f"{p}.w_v", (dims.v + width + dims.u, width), rng)
        self.b_v = store.create(f"{p}.b_v", (width,), init="zeros")
        self.w_u = store.create(f"{p}.w_u", (width, width), rng)
        self.b_u = store.create(f"{p}.b_u", (width,), init="zeros")

    @property
    def out_dims(self) -> GraphDims:
        return GraphDims(self.width, self.width, self.width)

    def forward(self, bg: GraphBatch, u, v, e):
        _check_dims(self.dims, bg, u, v, e)
        v_src = ad.gather_rows(v, bg.gather_src)
        e2 = ad.linear_relu(ad.concat([e, v_src], axis=1), self.w_e, self.b_e)
        ad.linear_relu(v, self.w_v1, self.b_v1)  # dead intermediate, see class doc
        k = ad.linear_relu(v, self.w_k, self.b_k)
        q = ad.linear_relu(e2, self.w_q, self.b_q)
        k_dst = ad.gather_rows(k, bg.gather_dst)
        scores = ad.reduce_sum(ad.mul(k_dst, q), axis=1)
        alpha = ad.exp(ad.segment_log_softmax(scores, bg.edges_by_dst))
        weighted = ad.mul(ad.reshape(alpha, (-1, 1)), e2)
        m = ad.segment_sum(weighted, bg.edges_by_dst)
        u_per_node = ad.gather_rows(u, bg.gather_node_graph)
        v2 = ad.linear_relu(
            ad.concat([v, m, u_per_node], axis=1), self.w_v, self.b_v
        )
        pooled = ad.segment_mean(v2, bg.nodes_by_graph)
        u2 = ad.linear_relu(pooled, self.w_u, self.b_u)
        return u2, v2, e2

    def attention(self, bg: GraphBatch, u, v, e) -> np.ndarray:
        """Per-edge attention weights (diagnostic, no tape)."""
        with ad.no_grad():
            v_src = ad.gather_rows(v, bg.gather_src)
            e2 = ad.linear_relu(ad.concat([e, v_src], axis=1), self.w_e, self.b_e)
            k = ad.linear_relu(v, self.w_k, self.b_k)
            q = ad.linear_relu(e2, self.w_q, self.b_q)
            k_dst = ad.gather_rows(k, bg.gather_dst)
            scores = ad.reduce_sum(ad.mul(k_dst, q), axis=1)
            return np.exp(ad.segment_log_softmax(scores, bg.edges_by_dst).data)


def _check_dims(dims: GraphDims, bg: GraphBatch, u, v, e) -> None:
    u_shape = u.data.shape if isinstance(u, Tensor) else np.shape(u)
    v_shape = v.data.shape if isinstance(v, Tensor) else np.shape(v)
    e_shape = e.data.shape if isinstance(e, Tensor) else np.shape(e)
    expect = (
        (bg.num_graphs, dims.u),
        (bg.total_nodes, dims.v),
        (bg.total_edges, dims.e),
    )
    got = (u_shape, v_shape, e_shape)
    if got != expect:
        raise ShapeMismatch(f"block expects {expect}, got {got}")


class EncoderStack:
    """Sequential graph-network blocks; all blocks share one hidden width."""

    def __init__(self, store: ParamStore, input_dims: GraphDims, arch: str,
                 width: int, rng: np.random.Generator, prefix: str = "stack"):
        if arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {arch!r}; pick from {ARCHITECTURES}")
        self.arch = arch
        self.width = width
        self.input_dims = input_dims
        kinds = arch.split("-")
        self.blocks = []
        dims = input_dims
        for i, kind in enumerate(kinds):
            cls = GNBlock if kind == "gn" else GNATBlock
            block = cls(store, f"{prefix}.{i}", dims, width, rng)
            self.blocks.append(block)
            dims = block.out_dims

    def forward(self, bg: GraphBatch, u, v, e):
        for block in self.blocks:
            u, v, e = block.forward(bg, u, v, e)
        return u, v, e

    def forward_graph(self, g: StateGoalGraph):
        """Single-graph convenience: dense edges in, dense edges out."""
        bg = graph_batch([g.n])
        u = Tensor(np.asarray(g.u, dtype=np.float32).reshape(1, -1))
        v = Tensor(np.asarray(g.v, dtype=np.float32))
        e = Tensor(dense_to_flat(np.asarray(g.e, dtype=np.float32)))
        u2, v2, e2 = self.forward(bg, u, v, e)
        return u2.data[0], v2.data, flat_to_dense(e2.data, g.n)
