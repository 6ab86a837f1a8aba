"""Effect-based action representation and the policy/value network.

Ground actions are described by their add (+1) and delete (-1) effects.
Each effect concatenates the final embedding of the graph component it
touches with a signed one-hot vector in that arity class's input feature
dimension (sign placed at the predicate's current-state slot), passes
through a kind-specific MLP, and the per-action effect sums give action
embeddings. A policy head scores each action (softmax over the applicable
set) and a value head reads the final global embedding.

Everything runs on block-diagonal batches; single-state evaluation is a
batch of one.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from genplan import autodiff as ad
from genplan.autodiff import GatherPlan, ParamStore, Segments, Tensor
from genplan.encoder import (
    FeatureLayout,
    GraphBatch,
    TaskEncoder,
    build_layout,
    dense_to_flat,
    edge_row,
    graph_batch,
)
from genplan.gnn import EncoderStack, GraphDims
from genplan.pddl import GroundAction, State, Task


class NoApplicableActions(Exception):
    pass


class LayoutMismatch(Exception):
    """Checkpoint metadata does not fit the requested domain."""


class EffectKind(IntEnum):
    GLOBAL = 0
    NODE = 1
    EDGE = 2


@dataclass(frozen=True)
class EffectDescriptor:
    kind: EffectKind
    sign: int  # +1 add, -1 delete
    predicate_slot: int  # index within the arity class
    target: tuple[int, ...]  # () | (node,) | (src, dst)
    action_index: int = 0


@dataclass
class PolicyValueOutput:
    probs: np.ndarray
    log_probs: np.ndarray
    value: float


def describe_effects(
    action: GroundAction, layout: FeatureLayout, task: Task, action_index: int = 0
) -> list[EffectDescriptor]:
    """One descriptor per add atom (+1) and delete atom (-1)."""
    slot_by_pred: dict[int, tuple[int, int]] = {}
    for arity, group in enumerate((layout.p0, layout.p1, layout.p2)):
        for idx, pid in enumerate(group):
            slot_by_pred[pid] = (arity, idx)
    out: list[EffectDescriptor] = []
    for sign, atom_ids in ((1, action.add), (-1, action.delete)):
        for atom_id in sorted(atom_ids):
            atom = task.atoms[atom_id]
            arity, slot = slot_by_pred[atom.predicate]
            out.append(
                EffectDescriptor(EffectKind(arity), sign, slot, atom.args, action_index)
            )
    return out


class TaskContext:
    """Per-task caches used by rollouts and search: the feature encoder and
    per-action effect arrays (built lazily; large instances only pay for
    actions that actually get scored)."""

    def __init__(self, task: Task, layout: FeatureLayout):
        self.task = task
        self.layout = layout
        self.encoder = TaskEncoder(task, layout)
        self.n = self.encoder.n
        self._effects: dict[int, tuple] = {}
        slot_by_pred: dict[int, tuple[int, int]] = {}
        for arity, group in enumerate((layout.p0, layout.p1, layout.p2)):
            for idx, pid in enumerate(group):
                slot_by_pred[pid] = (arity, idx)
        self._slot_by_pred = slot_by_pred

    def effect_arrays(self, action_index: int):
        """(per-kind target rows, slots, signs) for one ground action."""
        cached = self._effects.get(action_index)
        if cached is not None:
            return cached
        action = self.task.ground_actions[action_index]
        rows: list[list[int]] = [[], [], []]
        slots: list[list[int]] = [[], [], []]
        signs: list[list[float]] = [[], [], []]
        for sign, atom_ids in ((1.0, action.add), (-1.0, action.delete)):
            for atom_id in sorted(atom_ids):
                atom = self.task.atoms[atom_id]
                arity, slot = self._slot_by_pred[atom.predicate]
                if arity == 0:
                    rows[0].append(0)
                elif arity == 1:
                    rows[1].append(atom.args[0])
                else:
                    src, dst = atom.args
                    if src == dst:
                        raise IndexError(
                            f"effect of {action.name} targets self edge ({src}, {dst})"
                        )
                    rows[2].append(edge_row(src, dst, self.n))
                slots[arity].append(slot)
                signs[arity].append(sign)
        cached = tuple(
            (
                np.asarray(rows[k], dtype=np.int64),
                np.asarray(slots[k], dtype=np.int64),
                np.asarray(signs[k], dtype=np.float32),
            )
            for k in range(3)
        )
        self._effects[action_index] = cached
        return cached


@dataclass
class StepInput:
    """One decision point: a state (with history) and its applicable actions."""

    ctx: TaskContext
    history: list[State]
    state: State
    action_ids: np.ndarray  # indices into task.ground_actions, >= 1 entries


class PolicyBatch:
    """Featurized batch: input feature arrays plus every index plan the
    forward pass needs. Built once per batch and reused across update steps."""

    def __init__(self, items: list[StepInput], dtype=np.float32):
        if not items:
            raise ValueError("empty batch")
        layout = items[0].ctx.layout
        self.layout = layout
        self.num_graphs = len(items)
        sizes = [item.ctx.n for item in items]
        self.bg: GraphBatch = graph_batch(sizes)

        u_rows, v_rows, e_rows = [], [], []
        kind_rows = [[], [], []]  # gather target per effect row
        kind_slots = [[], [], []]
        kind_signs = [[], [], []]
        kind_action = [[], [], []]
        action_counts = []
        action_graph = []
        next_action = 0
        for g, item in enumerate(items):
            if len(item.action_ids) == 0:
                raise NoApplicableActions(f"batch item {g} has no actions")
            u, v, e = item.ctx.encoder.encode_arrays(item.history, item.state, dtype)
            u_rows.append(u)
            v_rows.append(v)
            e_rows.append(e)
            node_off = self.bg.node_offsets[g]
            edge_off = self.bg.edge_offsets[g]
            for aid in item.action_ids:
                arrays = item.ctx.effect_arrays(int(aid))
                total = 0
                for kind, (rows, slots, signs) in enumerate(arrays):
                    if rows.size == 0:
                        continue
                    offset = (0, node_off, edge_off)[kind]
                    kind_rows[kind].append(rows + (g if kind == 0 else offset))
                    kind_slots[kind].append(slots)
                    kind_signs[kind].append(signs)
                    kind_action[kind].append(
                        np.full(rows.size, next_action, dtype=np.int64)
                    )
                    total += rows.size
                action_counts.append(total)
                action_graph.append(g)
                next_action += 1

        self.u0 = np.stack(u_rows)
        self.v0 = np.concatenate(v_rows) if v_rows else np.zeros((0, layout.d_v), dtype)
        self.e0 = (
            np.concatenate(e_rows)
            if any(r.shape[0] for r in e_rows)
            else np.zeros((0, layout.d_e), dtype)
        )

        self.num_actions = next_action
        self.action_graph = np.asarray(action_graph, dtype=np.int64)
        self.actions_by_graph = Segments(
            np.bincount(self.action_graph, minlength=self.num_graphs)
        )

        dims = (layout.d_u, layout.d_v, layout.d_e)
        blocks_offset = (
            layout.current_block() * len(layout.p0),
            layout.current_block() * len(layout.p1),
            layout.current_block() * len(layout.p2),
        )
        self.kind_plans: list[GatherPlan | None] = [None, None, None]
        self.kind_sign_mats: list[np.ndarray | None] = [None, None, None]
        effect_action_chunks = []
        num_rows = (self.num_graphs, self.bg.total_nodes, self.bg.total_edges)
        for kind in range(3):
            if not kind_rows[kind]:
                continue
            rows = np.concatenate(kind_rows[kind])
            slots = np.concatenate(kind_slots[kind])
            signs = np.concatenate(kind_signs[kind])
            acts = np.concatenate(kind_action[kind])
            self.kind_plans[kind] = GatherPlan(rows, num_rows[kind])
            mat = np.zeros((rows.size, dims[kind]), dtype=dtype)
            mat[np.arange(rows.size), blocks_offset[kind] + slots] = signs
            self.kind_sign_mats[kind] = mat
            effect_action_chunks.append(acts)

        if effect_action_chunks:
            all_actions = np.concatenate(effect_action_chunks)
            self.effect_perm = GatherPlan(
                np.argsort(all_actions, kind="stable"), all_actions.size
            )
            counts = np.bincount(all_actions, minlength=self.num_actions)
        else:
            self.effect_perm = None
            counts = np.zeros(self.num_actions, dtype=np.int64)
        self.effects_by_action = Segments(counts)


class PolicyNetwork:
    """Encoder stack + effect MLPs + policy and value heads."""

    def __init__(self, layout: FeatureLayout, arch: str = "gn-gn", width: int = 256,
                 seed: int = 0, dtype=np.float32, meta: dict | None = None):
        self.layout = layout
        self.arch = arch
        self.width = width
        self.dtype = dtype
        self.meta = dict(meta or {})
        self.store = ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        dims = GraphDims(layout.d_u, layout.d_v, layout.d_e)
        self.stack = EncoderStack(self.store, dims, arch, width, rng)
        d = width
        kind_in = (d + layout.d_u, d + layout.d_v, d + layout.d_e)
        self._effect_mlps = []
        for kind, name in enumerate(("global", "node", "edge")):
            w1 = self.store.create(f"effect.{name}.w1", (kind_in[kind], d), rng)
            b1 = self.store.create(f"effect.{name}.b1", (d,), init="zeros")
            w2 = self.store.create(f"effect.{name}.w2", (d, d), rng)
            b2 = self.store.create(f"effect.{name}.b2", (d,), init="zeros")
            self._effect_mlps.append((w1, b1, w2, b2))
        self.pi_w1 = self.store.create("policy.w1", (d, d), rng)
        self.pi_b1 = self.store.create("policy.b1", (d,), init="zeros")
        self.pi_w2 = self.store.create("policy.w2", (d, 1), rng)
        self.pi_b2 = self.store.create("policy.b2", (1,), init="zeros")
        self.v_w1 = self.store.create("value.w1", (d, d), rng)
        self.v_b1 = self.store.create("value.b1", (d,), init="zeros")
        self.v_w2 = self.store.create("value.w2", (d, 1), rng)
        self.v_b2 = self.store.create("value.b2", (1,), init="zeros")

    # -- forward -------------------------------------------------------------

    def _embed_effects(self, pb: PolicyBatch, u_f, v_f, e_f) -> Tensor:
        parts = []
        components = (u_f, v_f, e_f)
        for kind in range(3):
            plan = pb.kind_plans[kind]
            if plan is None:
                continue
            comp = ad.gather_rows(components[kind], plan)
            x = ad.concat([comp, Tensor(pb.kind_sign_mats[kind])], axis=1)
            w1, b1, w2, b2 = self._effect_mlps[kind]
            parts.append(ad.linear(ad.linear_relu(x, w1, b1), w2, b2))
        if not parts:
            zeros = np.zeros((0, self.width), dtype=self.dtype)
            ordered = Tensor(zeros)
        else:
            stacked = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
            ordered = ad.gather_rows(stacked, pb.effect_perm)
        return ad.segment_sum(ordered, pb.effects_by_action)

    def forward_batch(self, pb: PolicyBatch):
        """Returns (log_probs [A] Tensor, value [B] Tensor, entropy [B] Tensor)."""
        u_f, v_f, e_f = self.stack.forward(
            pb.bg, Tensor(pb.u0), Tensor(pb.v0), Tensor(pb.e0)
        )
        act_emb = self._embed_effects(pb, u_f, v_f, e_f)
        logits = ad.reshape(
            ad.linear(ad.linear_relu(act_emb, self.pi_w1, self.pi_b1),
                      self.pi_w2, self.pi_b2),
            (-1,),
        )
        log_probs = ad.segment_log_softmax(logits, pb.actions_by_graph)
        probs = ad.exp(log_probs)
        entropy = ad.neg(
            ad.segment_sum(ad.mul(probs, log_probs), pb.actions_by_graph)
        )
        value = ad.reshape(
            ad.linear(ad.linear_relu(u_f, self.v_w1, self.v_b1),
                      self.v_w2, self.v_b2),
            (-1,),
        )
        return log_probs, value, entropy

    def evaluate(self, ctx: TaskContext, history: list[State], state: State,
                 action_ids: np.ndarray) -> PolicyValueOutput:
        """Score one state's applicable actions (no tape)."""
        if len(action_ids) == 0:
            raise NoApplicableActions("state has no applicable actions")
        with ad.no_grad():
            pb = PolicyBatch([StepInput(ctx, history, state, action_ids)], self.dtype)
            log_probs, value, _ = self.forward_batch(pb)
        lp = log_probs.data.astype(np.float64)
        return PolicyValueOutput(np.exp(lp), lp, float(value.data[0]))

    # -- spec-level single-state pieces ---------------------------------------

    def embed_actions(self, u_f, v_f, e_f, effects: list[EffectDescriptor],
                      n: int) -> np.ndarray:
        """Action embeddings from final single-graph embeddings and a flat
        effect list (kinds routed to their MLPs, summed per action)."""
        num_actions = max((eff.action_index for eff in effects), default=-1) + 1
        lay = self.layout
        dims = (lay.d_u, lay.d_v, lay.d_e)
        counts = (len(lay.p0), len(lay.p1), len(lay.p2))
        with ad.no_grad():
            out = np.zeros((num_actions, self.width), dtype=self.dtype)
            for eff in effects:
                kind = int(eff.kind)
                if kind == 0:
                    comp = np.asarray(u_f, dtype=self.dtype)
                elif kind == 1:
                    comp = np.asarray(v_f[eff.target[0]], dtype=self.dtype)
                else:
                    src, dst = eff.target
                    if src == dst:
                        raise IndexError(f"self edge {eff.target} has no embedding")
                    comp = np.asarray(e_f[src, dst], dtype=self.dtype)
                sign_vec = np.zeros(dims[kind], dtype=self.dtype)
                sign_vec[lay.current_block() * counts[kind] + eff.predicate_slot] = eff.sign
                x = Tensor(np.concatenate([comp, sign_vec]).reshape(1, -1))
                w1, b1, w2, b2 = self._effect_mlps[kind]
                t = ad.linear(ad.linear_relu(x, w1, b1), w2, b2)
                out[eff.action_index] += t.data[0]
        return out

    def policy_value(self, action_embeddings: np.ndarray, u_f: np.ndarray) -> PolicyValueOutput:
        """Softmax distribution over action embeddings plus the state value."""
        if action_embeddings.shape[0] == 0:
            raise NoApplicableActions("no action embeddings")
        with ad.no_grad():
            emb = Tensor(np.asarray(action_embeddings, dtype=self.dtype))
            logits = ad.reshape(
                ad.linear(ad.linear_relu(emb, self.pi_w1, self.pi_b1),
                          self.pi_w2, self.pi_b2),
                (-1,),
            )
            segs = Segments(np.array([action_embeddings.shape[0]]))
            lp = ad.segment_log_softmax(logits, segs).data.astype(np.float64)
            u = Tensor(np.asarray(u_f, dtype=self.dtype).reshape(1, -1))
            value = ad.linear(ad.linear_relu(u, self.v_w1, self.v_b1),
                              self.v_w2, self.v_b2)
        return PolicyValueOutput(np.exp(lp), lp, float(value.data[0, 0]))

    # -- persistence -----------------------------------------------------------

    def checkpoint_meta(self) -> dict:
        return {
            "arch": self.arch,
            "width": self.width,
            "history_length": self.layout.history_length,
            "p0": list(self.layout.p0),
            "p1": list(self.layout.p1),
            "p2": list(self.layout.p2),
            **self.meta,
        }

    def save(self, path) -> None:
        self.store.save(path, self.checkpoint_meta())

    @classmethod
    def load(cls, path, layout: FeatureLayout | None = None) -> "PolicyNetwork":
        try:
            store, meta = ParamStore.load(path)
        except ad.CheckpointError as exc:
            raise LayoutMismatch(str(exc)) from exc
        try:
            saved_layout = FeatureLayout(
                tuple(meta["p0"]), tuple(meta["p1"]), tuple(meta["p2"]),
                int(meta["history_length"]),
            )
            arch = meta["arch"]
            width = int(meta["width"])
        except (KeyError, TypeError, ValueError) as exc:
            raise LayoutMismatch(f"{path}: incomplete checkpoint metadata") from exc
        if layout is not None and (
            layout.p0 != saved_layout.p0
            or layout.p1 != saved_layout.p1
            or layout.p2 != saved_layout.p2
            or layout.history_length != saved_layout.history_length
        ):
            raise LayoutMismatch(
                f"checkpoint layout {saved_layout} does not match domain layout {layout}"
            )
        net = cls(saved_layout, arch=arch, width=width, meta=meta)
        for name, tensor in net.store.items():
            if name not in store:
                raise LayoutMismatch(f"checkpoint missing tensor {name!r}")
            saved = store[name]
            if saved.data.shape != tensor.data.shape:
                raise LayoutMismatch(
                    f"tensor {name!r} has shape {saved.data.shape}, "
                    f"expected {tensor.data.shape}"
                )
            tensor.data = saved.data.astype(net.dtype)
        return net


def policy_for_task(task: Task, arch: str = "gn-gn", width: int = 256,
                    history_length: int = 1, seed: int = 0) -> PolicyNetwork:
    layout = build_layout(task.domain, history_length)
    return PolicyNetwork(layout, arch=arch, width=width, seed=seed,
                         meta={"domain": task.domain.name})


def sample_action(out: PolicyValueOutput, rng: np.random.Generator) -> int:
    """Draw an action index from the distribution."""
    cdf = np.cumsum(out.probs)
    total = cdf[-1]
    u = rng.random() * total
    return int(np.searchsorted(cdf, u, side="right").clip(0, len(cdf) - 1))


def greedy_action(out: PolicyValueOutput) -> int:
    """Most probable action; ties break toward the lowest index."""
    return int(np.argmax(out.probs))
