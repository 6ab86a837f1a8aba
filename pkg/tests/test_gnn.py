"""Graph-network block tests: literal-equation reference oracle,
permutation equivariance, attention properties, finiteness."""

import numpy as np
import pytest

from genplan import autodiff as ad
from genplan.autodiff import ParamStore, ShapeMismatch, Tensor
from genplan.encoder import StateGoalGraph, dense_to_flat, graph_batch
from genplan.gnn import EncoderStack, GNATBlock, GNBlock, GraphDims


def random_graph(n, dims, rng, binary=True):
    u = (rng.random(dims.u) < 0.3).astype(np.float64) if binary else rng.normal(size=dims.u)
    v = (rng.random((n, dims.v)) < 0.3).astype(np.float64)
    e = (rng.random((n, n, dims.e)) < 0.3).astype(np.float64)
    for i in range(n):
        e[i, i] = 0
    return StateGoalGraph(n, u, v, e, tuple(range(n)))


def reference_gn_forward(block, g):
    """Straight-line implementation of the block update for one graph:
    edge update from (edge, origin), per-edge pre-update from (destination,
    updated edge), max-pool over incoming, node update from (message,
    globals), global update from the node mean."""
    relu = lambda x: np.maximum(x, 0)
    n = g.n
    W_e, b_e = block.w_e.data, block.b_e.data
    W_v1, b_v1 = block.w_v1.data, block.b_v1.data
    W_v2, b_v2 = block.w_v2.data, block.b_v2.data
    W_u, b_u = block.w_u.data, block.b_u.data
    width = block.width

    e2 = np.zeros((n, n, width))
    h = np.zeros((n, n, width))
    for src in range(n):
        for dst in range(n):
            if src == dst:
                continue
            e2[src, dst] = relu(np.concatenate([g.e[src, dst], g.v[src]]) @ W_e + b_e)
            h[src, dst] = relu(np.concatenate([g.v[dst], e2[src, dst]]) @ W_v1 + b_v1)
    v2 = np.zeros((n, width))
    for dst in range(n):
        incoming = [h[src, dst] for src in range(n) if src != dst]
        m = np.max(incoming, axis=0) if incoming else np.zeros(width)
        v2[dst] = relu(np.concatenate([m, g.u]) @ W_v2 + b_v2)
    u2 = relu(v2.mean(axis=0) @ W_u + b_u)
    return u2, v2, e2


def reference_gnat_forward(block, g):
    relu = lambda x: np.maximum(x, 0)
    n = g.n
    width = block.width
    e2 = np.zeros((n, n, width))
    for src in range(n):
        for dst in range(n):
            if src == dst:
                continue
            e2[src, dst] = relu(
                np.concatenate([g.e[src, dst], g.v[src]]) @ block.w_e.data + block.b_e.data
            )
    k = relu(g.v @ block.w_k.data + block.b_k.data)
    v2 = np.zeros((n, width))
    for dst in range(n):
        sources = [s for s in range(n) if s != dst]
        if sources:
            q = np.array([relu(e2[s, dst] @ block.w_q.data + block.b_q.data) for s in sources])
            scores = q @ k[dst]
            alpha = np.exp(scores - scores.max())
            alpha /= alpha.sum()
            m = (alpha[:, None] * np.array([e2[s, dst] for s in sources])).sum(axis=0)
        else:
            m = np.zeros(width)
        v2[dst] = relu(
            np.concatenate([g.v[dst], m, g.u]) @ block.w_v.data + block.b_v.data
        )
    u2 = relu(v2.mean(axis=0) @ block.w_u.data + block.b_u.data)
    return u2, v2, e2


def run_block(block, g):
    bg = graph_batch([g.n])
    u = Tensor(np.asarray(g.u).reshape(1, -1))
    v = Tensor(np.asarray(g.v))
    e = Tensor(dense_to_flat(np.asarray(g.e)))
    with ad.no_grad():
        u2, v2, e2 = block.forward(bg, u, v, e)
    return u2.data[0], v2.data, e2.data


DIMS = GraphDims(3, 9, 3)


def make_block(cls, width=16, seed=0, dims=DIMS):
    store = ParamStore(dtype=np.float64)
    return cls(store, "b", dims, width, np.random.default_rng(seed))


class TestGNBlock:
    def test_matches_reference_equations(self):
        rng = np.random.default_rng(1)
        block = make_block(GNBlock)
        for n in (2, 3, 5):
            g = random_graph(n, DIMS, rng)
            u2, v2, e2 = run_block(block, g)
            ru, rv, re = reference_gn_forward(block, g)
            np.testing.assert_allclose(u2, ru, atol=1e-10)
            np.testing.assert_allclose(v2, rv, atol=1e-10)
            src = [i for j in range(n) for i in range(n) if i != j]
            dst = [j for j in range(n) for i in range(n) if i != j]
            np.testing.assert_allclose(e2, re[src, dst], atol=1e-10)

    def test_single_node_graph(self):
        block = make_block(GNBlock)
        g = random_graph(1, DIMS, np.random.default_rng(2))
        u2, v2, e2 = run_block(block, g)
        assert v2.shape == (1, 16)
        assert e2.shape == (0, 16)
        assert np.all(np.isfinite(u2))

    def test_zero_inputs_zero_biases_give_zeros(self):
        block = make_block(GNBlock)
        g = StateGoalGraph(3, np.zeros(3), np.zeros((3, 9)), np.zeros((3, 3, 3)),
                           (0, 1, 2))
        u2, v2, e2 = run_block(block, g)
        assert np.all(u2 == 0) and np.all(v2 == 0) and np.all(e2 == 0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        block = make_block(GNBlock)
        g = random_graph(4, DIMS, rng)
        perm = np.array([2, 0, 3, 1])
        gp = StateGoalGraph(
            4, g.u.copy(),
            g.v[np.argsort(perm)],
            g.e[np.ix_(np.argsort(perm), np.argsort(perm))],
            (0, 1, 2, 3),
        )
        u1, v1, _ = run_block(block, g)
        u2, v2, _ = run_block(block, gp)
        np.testing.assert_allclose(u1, u2, atol=1e-5)
        np.testing.assert_allclose(v2, v1[np.argsort(perm)], atol=1e-5)


class TestGNATBlock:
    def test_matches_reference_equations(self):
        rng = np.random.default_rng(4)
        block = make_block(GNATBlock)
        for n in (2, 4):
            g = random_graph(n, DIMS, rng)
            u2, v2, _ = run_block(block, g)
            ru, rv, _ = reference_gnat_forward(block, g)
            np.testing.assert_allclose(u2, ru, atol=1e-10)
            np.testing.assert_allclose(v2, rv, atol=1e-10)

    def test_identical_edges_uniform_attention(self):
        block = make_block(GNATBlock)
        n = 5
        g = StateGoalGraph(
            n,
            np.zeros(3),
            np.tile(np.array([1.0, 0, 1, 0, 0, 0, 1, 0, 0]), (n, 1)),
            np.ones((n, n, 3)),
            tuple(range(n)),
        )
        bg = graph_batch([n])
        alpha = block.attention(
            bg,
            Tensor(g.u.reshape(1, -1)),
            Tensor(g.v),
            Tensor(dense_to_flat(g.e)),
        )
        np.testing.assert_allclose(alpha, 1.0 / (n - 1), atol=1e-6)

    def test_attention_sums_to_one(self):
        rng = np.random.default_rng(5)
        block = make_block(GNATBlock)
        g = random_graph(6, DIMS, rng)
        bg = graph_batch([6])
        alpha = block.attention(
            bg, Tensor(g.u.reshape(1, -1)), Tensor(g.v),
            Tensor(dense_to_flat(g.e)),
        )
        sums = alpha.reshape(6, 5).sum(axis=1)
        np.testing.assert_allclose(sums, 1.0, atol=1e-6)

    def test_single_node_graph(self):
        block = make_block(GNATBlock)
        g = random_graph(1, DIMS, np.random.default_rng(6))
        u2, v2, e2 = run_block(block, g)
        assert e2.shape == (0, 16)
        assert np.all(np.isfinite(u2))


class TestStack:
    def test_default_width_shapes(self):
        store = ParamStore()
        stack = EncoderStack(store, DIMS, "gn-gn", 256, np.random.default_rng(0))
        g = random_graph(4, DIMS, np.random.default_rng(1))
        u, v, e = stack.forward_graph(g)
        assert u.shape == (256,)
        assert v.shape == (4, 256)
        assert e.shape == (4, 4, 256)

    def test_single_block_equals_block_forward(self):
        store = ParamStore(dtype=np.float64)
        rng = np.random.default_rng(2)
        stack = EncoderStack(store, DIMS, "gn-gn", 8, rng)
        g = random_graph(3, DIMS, np.random.default_rng(3))
        first = stack.blocks[0]
        u_direct, v_direct, e_direct = run_block(first, g)
        bg = graph_batch([3])
        with ad.no_grad():
            u_b, v_b, e_b = first.forward(
                bg, Tensor(g.u.reshape(1, -1)), Tensor(g.v),
                Tensor(dense_to_flat(g.e)),
            )
        np.testing.assert_array_equal(u_direct, u_b.data[0])
        np.testing.assert_array_equal(v_direct, v_b.data)

    @pytest.mark.parametrize("arch", ["gn-gn", "gnat-gn"])
    def test_stack_equivariance(self, arch):
        store = ParamStore(dtype=np.float64)
        stack = EncoderStack(store, DIMS, arch, 16, np.random.default_rng(7))
        g = random_graph(5, DIMS, np.random.default_rng(8))
        inv = np.array([3, 0, 4, 1, 2])  # old position of each new row
        gp = StateGoalGraph(5, g.u.copy(), g.v[inv], g.e[np.ix_(inv, inv)],
                            tuple(range(5)))
        u1, v1, e1 = stack.forward_graph(g)
        u2, v2, e2 = stack.forward_graph(gp)
        np.testing.assert_allclose(u1, u2, atol=1e-5)
        np.testing.assert_allclose(v2, v1[inv], atol=1e-5)
        np.testing.assert_allclose(e2, e1[np.ix_(inv, inv)], atol=1e-5)

    def test_unknown_arch_rejected(self):
        with pytest.raises(ValueError):
            EncoderStack(ParamStore(), DIMS, "gn-gn-gn-gn-bad", 8,
                         np.random.default_rng(0))

    def test_dim_mismatch_raises(self):
        store = ParamStore()
        stack = EncoderStack(store, DIMS, "gn-gn", 8, np.random.default_rng(0))
        bg = graph_batch([2])
        with pytest.raises(ShapeMismatch):
            with ad.no_grad():
                stack.forward(bg, Tensor(np.zeros((1, 99))),
                              Tensor(np.zeros((2, 9))), Tensor(np.zeros((2, 3))))

    def test_finite_outputs_on_random_binary_graphs(self):
        store = ParamStore()
        stack = EncoderStack(store, DIMS, "gnat-gn", 16, np.random.default_rng(9))
        rng = np.random.default_rng(10)
        for _ in range(200):
            n = int(rng.integers(1, 7))
            g = random_graph(n, DIMS, rng)
            u, v, e = stack.forward_graph(g)
            assert np.all(np.isfinite(u))
            assert np.all(np.isfinite(v))
            assert np.all(np.isfinite(e))
