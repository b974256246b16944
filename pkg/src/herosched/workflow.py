"""Agentic-RAG workflows as dynamically materializing DAGs of sub-stages.

A workflow is described by a template (stages, dependency edges, activation
probabilities, fanout distributions). At runtime only part of the DAG is
observable: nodes whose presence is certain a priori materialize up front,
everything else is revealed when upstream stages finish. All random choices
(activation coins, fanout counts, sampled workloads) are pre-drawn from the
graph seed, so the materialization trace depends only on
(template, params, seed) and never on scheduling order.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable

from .errors import (
    HeroschedError,
    InvalidParams,
    NotStreaming,
    ParseError,
    UnknownNode,
    UnknownTemplateNode,
    UnsupportedConfig,
)
from .perfmodel import ConfigKey, StageProfile


class StageKind(Enum):
    CHUNK = "chunk"
    EMBED = "embed"
    INDEX = "index"
    RETRIEVE = "retrieve"
    RERANK = "rerank"
    QUERY_REWRITE = "query_rewrite"
    CONTEXT_REFINE = "context_refine"
    SEARCH_PLAN = "search_plan"
    WEB_SEARCH = "web_search"
    GENERATE = "generate"


BATCHABLE_KINDS = frozenset({StageKind.EMBED, StageKind.INDEX, StageKind.RERANK})
STREAMING_KINDS = frozenset({StageKind.QUERY_REWRITE, StageKind.SEARCH_PLAN, StageKind.GENERATE})
# Decision stages may carry a fanout distribution that instantiates their
# template children multiple times when they complete.
DECISION_KINDS = frozenset({StageKind.QUERY_REWRITE, StageKind.SEARCH_PLAN})
NETWORK_KINDS = frozenset({StageKind.WEB_SEARCH})


def is_batchable(kind: StageKind) -> bool:
    return kind in BATCHABLE_KINDS


def is_streaming(kind: StageKind) -> bool:
    return kind in STREAMING_KINDS


class NodeState(Enum):
    UNMATERIALIZED = "unmaterialized"
    PENDING = "pending"
    READY = "ready"
    ACTIVE = "active"
    DONE = "done"


_STATE_ORDER = {
    NodeState.UNMATERIALIZED: 0,
    NodeState.PENDING: 1,
    NodeState.READY: 2,
    NodeState.ACTIVE: 3,
    NodeState.DONE: 4,
}


@dataclass(frozen=True)
class WorkloadSpec:
    """How a template node's workload is resolved at materialization."""

    kind: str  # "fixed" | "uniform"
    low: int
    high: int = 0

    @staticmethod
    def fixed(value: int) -> "WorkloadSpec":
        return WorkloadSpec("fixed", value, value)

    @staticmethod
    def uniform(low: int, high: int) -> "WorkloadSpec":
        return WorkloadSpec("uniform", low, high)

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise InvalidParams(f"unknown workload spec kind {self.kind!r}")
        if self.low < 1 or (self.kind == "uniform" and self.high < self.low):
            raise InvalidParams(f"workload spec bounds must be >= 1 and ordered: {self}")

    def resolve(self, rng: random.Random) -> int:
        if self.kind == "fixed":
            return self.low
        return rng.randint(self.low, self.high)

    @property
    def expectation(self) -> float:
        if self.kind == "fixed":
            return float(self.low)
        return (self.low + self.high) / 2.0


# Streaming stages default to varying output lengths in this range.
DEFAULT_STREAM_TOKENS = WorkloadSpec.uniform(16, 256)
DEFAULT_WEB_LATENCY_MS = 300.0


@dataclass(frozen=True)
class TemplateNode:
    """One stage of the predefined workflow."""

    name: str
    stage_kind: StageKind
    model_id: str
    workload: WorkloadSpec = WorkloadSpec.fixed(1)
    activation_probability: float = 1.0
    expected_workload: float | None = None
    fanout: dict[int, float] | None = None
    network_latency_ms: float = DEFAULT_WEB_LATENCY_MS

    def __post_init__(self):
        if not (0.0 <= self.activation_probability <= 1.0):
            raise InvalidParams(f"activation_probability out of [0,1] for {self.name!r}")
        if self.fanout is not None:
            if self.stage_kind not in DECISION_KINDS:
                raise InvalidParams(f"only decision stages may fan out: {self.name!r}")
            if not self.fanout or any(k < 0 for k in self.fanout):
                raise InvalidParams(f"fanout counts must be >= 0 for {self.name!r}")
            total = sum(self.fanout.values())
            if abs(total - 1.0) > 1e-9:
                raise InvalidParams(f"fanout distribution must sum to 1 for {self.name!r}")
        if self.expected_workload is None:
            object.__setattr__(self, "expected_workload", self.workload.expectation)

    @property
    def expected_fanout(self) -> float:
        if self.fanout is None:
            return 1.0
        return sum(k * p for k, p in self.fanout.items())


@dataclass(frozen=True)
class TemplateEdge:
    """Dependency between template stages.

    ``token_offset_fraction`` in (0, 1) makes the dependency releasable at
    a token-group boundary once the streaming producer has emitted that
    fraction of its output; None (or 1.0) binds it to producer completion.
    """

    src: str
    dst: str
    token_offset_fraction: float | None = None

    def __post_init__(self):
        if self.token_offset_fraction is not None and not (0 < self.token_offset_fraction <= 1):
            raise InvalidParams("token_offset_fraction must lie in (0, 1]")


class WorkflowTemplate:
    """Validated template DAG with derived parent/child maps."""

    def __init__(self, name: str, nodes: Iterable[TemplateNode], edges: Iterable[TemplateEdge]):
        self.name = name
        self.nodes: dict[str, TemplateNode] = {}
        for n in nodes:
            if n.name in self.nodes:
                raise InvalidParams(f"duplicate template node {n.name!r}")
            self.nodes[n.name] = n
        self.edges = tuple(edges)
        self.parents: dict[str, list[TemplateEdge]] = {n: [] for n in self.nodes}
        self.children: dict[str, list[TemplateEdge]] = {n: [] for n in self.nodes}
        for e in self.edges:
            for end in (e.src, e.dst):
                if end not in self.nodes:
                    raise UnknownTemplateNode(end)
            self.parents[e.dst].append(e)
            self.children[e.src].append(e)
        self.topo_order = self._toposort()
        # Producer whose fanout instantiates each node, if any.
        self.instanced_by: dict[str, str | None] = {n: None for n in self.nodes}
        for name, node in self.nodes.items():
            if node.fanout is not None:
                for e in self.children[name]:
                    child = self.nodes[e.dst]
                    if child.fanout is not None:
                        raise InvalidParams("nested fanout stages are not supported")
                    self.instanced_by[e.dst] = name

    def _toposort(self) -> tuple[str, ...]:
        indeg = {n: len(self.parents[n]) for n in self.nodes}
        queue = [n for n in self.nodes if indeg[n] == 0]
        order: list[str] = []
        while queue:
            n = queue.pop(0)
            order.append(n)
            for e in self.children[n]:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    queue.append(e.dst)
        if len(order) != len(self.nodes):
            raise InvalidParams(f"template {self.name!r} contains a cycle")
        return tuple(order)

    def node(self, name: str) -> TemplateNode:
        try:
            return self.nodes[name]
        except KeyError:
            raise UnknownTemplateNode(name)


@dataclass
class SubStageNode:
    """One schedulable sub-stage of the observed DAG."""

    node_id: str
    template_name: str
    stage_kind: StageKind
    model_id: str
    workload: int
    seq: int
    instance_index: int = 0
    state: NodeState = NodeState.PENDING
    chosen_config: ConfigKey | None = None
    start_time: float | None = None
    finish_time: float | None = None
    ready_time: float | None = None
    tokens_done: int = 0
    # Set at dispatch: number of serial batches/token groups and total
    # interference-free work under the chosen configuration.
    substage_count: int = 0
    base_work: float = 0.0
    network_latency_ms: float = DEFAULT_WEB_LATENCY_MS

    @property
    def is_streaming(self) -> bool:
        return self.stage_kind in STREAMING_KINDS

    @property
    def is_network(self) -> bool:
        return self.stage_kind in NETWORK_KINDS

    def _advance_state(self, new: NodeState) -> None:
        if _STATE_ORDER[new] < _STATE_ORDER[self.state]:
            raise HeroschedError(f"backward state transition {self.state} -> {new} on {self.node_id}")
        self.state = new


@dataclass(frozen=True)
class ObservedEdge:
    src: str
    dst: str
    token_offset: int | None = None


@dataclass
class MaterializationDelta:
    new_nodes: list[SubStageNode] = field(default_factory=list)
    new_edges: list[ObservedEdge] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return not (self.new_nodes or self.new_edges or self.skipped)


@dataclass(frozen=True)
class _Drawn:
    """Pre-drawn random choices for one template node."""

    activation: float
    fanout: int
    workloads: tuple[int, ...]


class WorkflowGraph:
    """Observed partial DAG plus the template it materializes from."""

    def __init__(self, template: WorkflowTemplate, seed: int):
        self.template = template
        self.rng_seed = seed
        self.nodes: dict[str, SubStageNode] = {}
        self.preds: dict[str, list[ObservedEdge]] = {}
        self.succs: dict[str, list[ObservedEdge]] = {}
        self.status: dict[str, str] = {n: "undetermined" for n in template.nodes}
        self.instances: dict[str, list[str]] = {n: [] for n in template.nodes}
        self._fanout_applied: set[str] = set()
        self._seq = 0
        self._topo_cache: tuple[str, ...] = ()
        self._predraw()
        self._materialize_certain_prefix()

    # -- pre-drawn randomness ------------------------------------------------

    def _predraw(self) -> None:
        rng = random.Random(self.rng_seed)
        self._drawn: dict[str, _Drawn] = {}
        for name in self.template.topo_order:
            node = self.template.node(name)
            activation = rng.random()
            fanout = 1
            if node.fanout is not None:
                roll = rng.random()
                acc = 0.0
                counts = sorted(node.fanout)
                fanout = counts[-1]
                for count in counts:
                    acc += node.fanout[count]
                    if roll < acc:
                        fanout = count
                        break
            producer = self.template.instanced_by[name]
            n_instances = self._drawn[producer].fanout if producer else 1
            workloads = tuple(node.workload.resolve(rng) for _ in range(max(n_instances, 0)))
            self._drawn[name] = _Drawn(activation, fanout, workloads)

    # -- materialization -----------------------------------------------------

    def _next_seq(self) -> int:
        self._seq += 1
        return self._seq

    def _certain(self, name: str) -> bool:
        if self.template.instanced_by[name] is not None:
            return False
        node = self.template.node(name)
        if node.activation_probability < 1.0:
            return False
        return all(self._certain(e.src) for e in self.template.parents[name])

    def _materialize_certain_prefix(self) -> None:
        delta = MaterializationDelta()
        for name in self.template.topo_order:
            if self._certain(name):
                self._materialize(name, delta)
        self._rebuild_topo()

    def _instantiate(self, tmpl: TemplateNode, index: int, workload: int) -> SubStageNode:
        node_id = tmpl.name if self.template.instanced_by[tmpl.name] is None else f"{tmpl.name}#{index}"
        node = SubStageNode(
            node_id=node_id,
            template_name=tmpl.name,
            stage_kind=tmpl.stage_kind,
            model_id=tmpl.model_id,
            workload=workload,
            seq=self._next_seq(),
            instance_index=index,
            network_latency_ms=tmpl.network_latency_ms,
        )
        self.nodes[node_id] = node
        self.preds[node_id] = []
        self.succs[node_id] = []
        self.instances[tmpl.name].append(node_id)
        return node

    def _add_edge(self, src_node: SubStageNode, dst_node: SubStageNode, tedge: TemplateEdge,
                  delta: MaterializationDelta) -> None:
        offset = None
        if (
            tedge.token_offset_fraction is not None
            and tedge.token_offset_fraction < 1.0
            and src_node.is_streaming
        ):
            offset = max(1, math.ceil(tedge.token_offset_fraction * src_node.workload))
        edge = ObservedEdge(src_node.node_id, dst_node.node_id, offset)
        self.preds[dst_node.node_id].append(edge)
        self.succs[src_node.node_id].append(edge)
        delta.new_edges.append(edge)

    def _wire(self, node: SubStageNode, delta: MaterializationDelta) -> None:
        """Connect a fresh node to already-materialized parents and children."""
        name = node.template_name
        for tedge in self.template.parents[name]:
            for pid in self.instances[tedge.src]:
                self._add_edge(self.nodes[pid], node, tedge, delta)
        for tedge in self.template.children[name]:
            for cid in self.instances[tedge.dst]:
                self._add_edge(node, self.nodes[cid], tedge, delta)

    def _materialize(self, name: str, delta: MaterializationDelta) -> None:
        tmpl = self.template.node(name)
        self.status[name] = "materialized"
        node = self._instantiate(tmpl, 0, self._drawn[name].workloads[0])
        self._wire(node, delta)
        delta.new_nodes.append(node)

    def _skip(self, name: str, delta: MaterializationDelta) -> None:
        self.status[name] = "skipped"
        delta.skipped.append(name)
        # A node all of whose parents were skipped can never activate.
        for tedge in self.template.children[name]:
            child = tedge.dst
            if self.status[child] == "undetermined" and all(
                self.status[e.src] == "skipped" for e in self.template.parents[child]
            ):
                self._skip(child, delta)

    def _flip(self, name: str, delta: MaterializationDelta) -> None:
        """Resolve an undetermined template node with its pre-drawn coin."""
        tmpl = self.template.node(name)
        if self._drawn[name].activation < tmpl.activation_probability:
            self._materialize(name, delta)
        else:
            self._skip(name, delta)

    def materialize_on_completion(self, finished: str, rng: random.Random | None = None) -> MaterializationDelta:
        """Reveal downstream structure after ``finished`` completed.

        Decision stages instantiate their pre-drawn fanout; other stages
        flip still-undetermined template children per their activation
        probability. The ``rng`` argument is accepted for interface
        stability but unused: all choices are pre-drawn from the graph
        seed so traces are reproducible regardless of scheduling order.
        """
        node = self.nodes.get(finished)
        if node is None:
            raise UnknownNode(finished)
        if node.state is not NodeState.DONE:
            raise InvalidParams(f"node {finished!r} is not done")
        delta = MaterializationDelta()
        name = node.template_name
        tmpl = self.template.node(name)
        if tmpl.fanout is not None and name not in self._fanout_applied:
            self._fanout_applied.add(name)
            count = self._drawn[name].fanout
            for tedge in self.template.children[name]:
                child_name = tedge.dst
                if count == 0:
                    self._skip(child_name, delta)
                    continue
                self.status[child_name] = "materialized"
                child_tmpl = self.template.node(child_name)
                for i in range(count):
                    child = self._instantiate(child_tmpl, i, self._drawn[child_name].workloads[i])
                    self._wire(child, delta)
                    delta.new_nodes.append(child)
        else:
            # Children are flipped in template topological order so that a
            # node materializing in the same event sees its co-materialized
            # parents. Fanout-instanced children are created only by their
            # producer's completion, never by another parent's.
            topo_pos = {n: i for i, n in enumerate(self.template.topo_order)}
            children = sorted({e.dst for e in self.template.children[name]}, key=topo_pos.__getitem__)
            for child in children:
                if self.status[child] == "undetermined" and self.template.instanced_by[child] is None:
                    self._flip(child, delta)
        if not delta.empty:
            self._rebuild_topo()
        return delta

    def _rebuild_topo(self) -> None:
        indeg = {n: len(self.preds[n]) for n in self.nodes}
        queue = sorted((n for n in self.nodes if indeg[n] == 0), key=lambda n: self.nodes[n].seq)
        order: list[str] = []
        while queue:
            n = queue.pop(0)
            order.append(n)
            for e in self.succs[n]:
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    queue.append(e.dst)
        if len(order) != len(self.nodes):
            raise HeroschedError("observed graph lost acyclicity")
        self._topo_cache = tuple(order)

    @property
    def topo_order(self) -> tuple[str, ...]:
        return self._topo_cache

    # -- readiness -----------------------------------------------------------

    def _edge_satisfied(self, edge: ObservedEdge) -> bool:
        src = self.nodes[edge.src]
        if src.state is NodeState.DONE:
            return True
        if edge.token_offset is not None and src.is_streaming:
            return src.tokens_done >= edge.token_offset
        return False

    def _blocked_by_template(self, node: SubStageNode) -> bool:
        # A dependency edge may still appear from a parent stage whose
        # activation is not yet decided; hold the node back until then.
        return any(
            self.status[e.src] == "undetermined"
            for e in self.template.parents[node.template_name]
        )

    def deps_satisfied(self, node_id: str) -> bool:
        node = self.nodes[node_id]
        if self._blocked_by_template(node):
            return False
        return all(self._edge_satisfied(e) for e in self.preds[node_id])

    def refresh_ready(self, now: float = 0.0) -> list[str]:
        """Promote pending nodes whose dependencies are all satisfied."""
        released = []
        for node in self.nodes.values():
            if node.state is NodeState.PENDING and self.deps_satisfied(node.node_id):
                node._advance_state(NodeState.READY)
                node.ready_time = now
                released.append(node.node_id)
        return released

    def ready_nodes(self) -> list[SubStageNode]:
        ready = [n for n in self.nodes.values() if n.state is NodeState.READY]
        ready.sort(key=lambda n: (n.ready_time, n.seq))
        return ready

    def unfinished(self) -> list[SubStageNode]:
        return [n for n in self.nodes.values() if n.state is not NodeState.DONE]

    def node(self, node_id: str) -> SubStageNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(node_id)

    # -- state transitions driven by the simulator ----------------------------

    def mark_active(self, node_id: str, config: ConfigKey | None, now: float,
                    substage_count: int, base_work: float) -> None:
        node = self.node(node_id)
        node._advance_state(NodeState.ACTIVE)
        node.chosen_config = config
        node.start_time = now
        node.substage_count = substage_count
        node.base_work = base_work

    def mark_done(self, node_id: str, now: float) -> None:
        node = self.node(node_id)
        node._advance_state(NodeState.DONE)
        node.finish_time = now
        if node.is_streaming:
            node.tokens_done = node.workload

    # -- streaming -------------------------------------------------------------

    def streaming_progress(self, node_id: str, tokens_done: int, now: float = 0.0) -> list[str]:
        """Record token progress of an active streaming node.

        Returns the ids of downstream nodes whose dependency on this
        producer became satisfied (released before the producer finishes).
        ``tokens_done`` must be group-aligned or equal to the workload.
        """
        node = self.node(node_id)
        if not node.is_streaming:
            raise NotStreaming(f"{node_id} ({node.stage_kind.value}) is not a streaming stage")
        if node.state is not NodeState.ACTIVE:
            raise InvalidParams(f"streaming progress on non-active node {node_id}")
        if tokens_done > node.workload:
            raise InvalidParams("tokens_done exceeds workload")
        before = node.tokens_done
        node.tokens_done = max(before, tokens_done)
        released = []
        for edge in self.succs[node_id]:
            if edge.token_offset is not None and before < edge.token_offset <= node.tokens_done:
                released.append(edge.dst)
        self.refresh_ready(now)
        return released

    # -- residual splitting (inter-PU migration support) ------------------------

    def split_node(self, node_id: str, head_items: int) -> SubStageNode:
        """Split an undispatched node into a head of ``head_items`` plus a residual.

        The residual inherits the node's outgoing dependencies and follows
        the head, so a policy may re-run the partitioner on the remaining
        workload (e.g. to migrate it to another PU between sub-stages).
        """
        node = self.node(node_id)
        if node.state not in (NodeState.PENDING, NodeState.READY):
            raise InvalidParams(f"can only split an undispatched node, {node_id} is {node.state}")
        if not (1 <= head_items < node.workload):
            raise InvalidParams("head_items must leave a non-empty residual")
        residual_id = f"{node_id}~rest"
        if residual_id in self.nodes:
            raise InvalidParams(f"{node_id} was already split")
        residual = SubStageNode(
            node_id=residual_id,
            template_name=node.template_name,
            stage_kind=node.stage_kind,
            model_id=node.model_id,
            workload=node.workload - head_items,
            seq=self._next_seq(),
            instance_index=node.instance_index,
            network_latency_ms=node.network_latency_ms,
        )
        self.nodes[residual_id] = residual
        self.instances[node.template_name].append(residual_id)
        node.workload = head_items
        # Out-edges move to the residual; the residual waits for the head.
        moved = self.succs[node_id]
        self.succs[node_id] = []
        self.preds[residual_id] = [ObservedEdge(node_id, residual_id)]
        self.succs[residual_id] = []
        for edge in moved:
            new_edge = ObservedEdge(residual_id, edge.dst, edge.token_offset)
            self.preds[edge.dst] = [new_edge if e is edge else e for e in self.preds[edge.dst]]
            self.succs[residual_id].append(new_edge)
        self.succs[node_id].append(self.preds[residual_id][0])
        self._rebuild_topo()
        return residual


# -- shape-aware partitioning ---------------------------------------------------


@dataclass(frozen=True)
class PartitionChoice:
    """Outcome of the shape search: batch size, serial batches, total latency."""

    shape: int
    substage_count: int
    total_latency: float


def partition_stage(profile: StageProfile, model_id: str, pu_id: str, workload: int) -> PartitionChoice:
    """Pick the profiled shape minimizing total serial latency for a workload.

    Evaluates every candidate shape (per-item efficiency is not monotone in
    batch size, so no search shortcut is valid); ties prefer the larger
    shape, which means fewer sub-stages and less dispatch overhead.
    """
    if workload < 1:
        raise InvalidParams(f"workload must be >= 1, got {workload}")
    candidates = profile.candidate_shapes(model_id, pu_id)
    best: PartitionChoice | None = None
    for shape in candidates:
        count = math.ceil(workload / shape)
        total = count * profile.base_latency(ConfigKey(model_id, pu_id, shape))
        if best is None or total < best.total_latency or (total == best.total_latency and shape > best.shape):
            best = PartitionChoice(shape, count, total)
    assert best is not None  # candidates are non-empty by profile invariant
    return best


# -- bundled workflow presets -----------------------------------------------------


@dataclass(frozen=True)
class WorkflowParams:
    """Workload sizing for the bundled workflow templates."""

    num_documents: int = 8
    doc_tokens: int = 512
    query_tokens: int = 64
    rerank_candidates: int = 16
    chunk_size: int = 128
    chunk_overlap: int = 10
    gen_tokens: WorkloadSpec = DEFAULT_STREAM_TOKENS
    rewrite_tokens: WorkloadSpec = WorkloadSpec.uniform(16, 128)
    plan_tokens: WorkloadSpec = WorkloadSpec.uniform(16, 64)
    rewrite_fanout: tuple[tuple[int, float], ...] = ((1, 0.25), (2, 0.5), (3, 0.25))
    plan_fanout: tuple[tuple[int, float], ...] = ((2, 0.4), (3, 0.4), (4, 0.2))
    refine_probability: float = 0.8
    web_latency_ms: float = DEFAULT_WEB_LATENCY_MS

    def __post_init__(self):
        if self.num_documents < 1 or self.doc_tokens < 1 or self.query_tokens < 1:
            raise InvalidParams("document count, document tokens and query length must be >= 1")
        if self.rerank_candidates < 1:
            raise InvalidParams("rerank_candidates must be >= 1")
        if self.chunk_size <= self.chunk_overlap:
            raise InvalidParams("chunk_size must exceed chunk_overlap")

    @property
    def chunk_count(self) -> int:
        per_doc = math.ceil(
            max(self.doc_tokens - self.chunk_overlap, 1) / (self.chunk_size - self.chunk_overlap)
        )
        return self.num_documents * per_doc


WORKFLOW_PRESETS = ("w1", "w2", "w3")


def _doc_pipeline(params: WorkflowParams) -> list[TemplateNode]:
    chunks = params.chunk_count
    return [
        TemplateNode("chunk", StageKind.CHUNK, "chunker"),
        TemplateNode("embed", StageKind.EMBED, "embedder", WorkloadSpec.fixed(chunks)),
        TemplateNode("index", StageKind.INDEX, "indexer", WorkloadSpec.fixed(chunks)),
    ]


def make_template(template_id: str, params: WorkflowParams) -> WorkflowTemplate:
    """Build one of the bundled workflow templates."""
    tid = template_id.lower()
    rerank = TemplateNode("rerank", StageKind.RERANK, "reranker", WorkloadSpec.fixed(params.rerank_candidates))
    generate = TemplateNode("generate", StageKind.GENERATE, "chatllm", params.gen_tokens)
    retrieve = TemplateNode("retrieve", StageKind.RETRIEVE, "vectordb")
    if tid == "w1":
        nodes = _doc_pipeline(params) + [retrieve, rerank, generate]
        edges = [
            TemplateEdge("chunk", "embed"),
            TemplateEdge("embed", "index"),
            TemplateEdge("index", "retrieve"),
            TemplateEdge("retrieve", "rerank"),
            TemplateEdge("rerank", "generate"),
        ]
        return WorkflowTemplate("w1", nodes, edges)

    rewrite = TemplateNode(
        "rewrite", StageKind.QUERY_REWRITE, "rewriter", params.rewrite_tokens,
        fanout=dict(params.rewrite_fanout),
    )
    refine = TemplateNode(
        "refine", StageKind.CONTEXT_REFINE, "refiner",
        activation_probability=params.refine_probability,
    )
    common = _doc_pipeline(params) + [rewrite, retrieve, rerank, refine, generate]
    common_edges = [
        TemplateEdge("chunk", "embed"),
        TemplateEdge("embed", "index"),
        TemplateEdge("rewrite", "retrieve"),
        TemplateEdge("index", "retrieve"),
        TemplateEdge("retrieve", "rerank"),
        TemplateEdge("rerank", "refine"),
        TemplateEdge("rerank", "generate"),
        TemplateEdge("refine", "generate"),
    ]
    if tid == "w2":
        return WorkflowTemplate("w2", common, common_edges)
    if tid == "w3":
        plan = TemplateNode(
            "plan", StageKind.SEARCH_PLAN, "planner", params.plan_tokens,
            fanout=dict(params.plan_fanout),
        )
        web = TemplateNode(
            "websearch", StageKind.WEB_SEARCH, "websearch",
            network_latency_ms=params.web_latency_ms,
        )
        nodes = common + [plan, web]
        edges = common_edges + [
            TemplateEdge("plan", "websearch"),
            TemplateEdge("websearch", "refine"),
            TemplateEdge("websearch", "generate"),
        ]
        return WorkflowTemplate("w3", nodes, edges)
    raise InvalidParams(f"unknown workflow template {template_id!r}; known: {WORKFLOW_PRESETS}")


def build_workflow(template_id: str, params: WorkflowParams | None = None, seed: int = 0) -> WorkflowGraph:
    """Instantiate a bundled workflow as an observed graph."""
    params = params or WorkflowParams()
    return WorkflowGraph(make_template(template_id, params), seed)


# -- template config files ----------------------------------------------------------


def _workload_from_json(obj) -> WorkloadSpec:
    if obj is None:
        return WorkloadSpec.fixed(1)
    if "fixed" in obj:
        return WorkloadSpec.fixed(int(obj["fixed"]))
    if "uniform" in obj:
        lo, hi = obj["uniform"]
        return WorkloadSpec.uniform(int(lo), int(hi))
    raise ParseError(f"bad workload spec {obj!r}")


def load_template(path: str | Path) -> WorkflowTemplate:
    """Load a workflow template from a JSON config file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    try:
        nodes = []
        for spec in raw["nodes"]:
            fanout = spec.get("fanout")
            nodes.append(
                TemplateNode(
                    name=spec["name"],
                    stage_kind=StageKind(spec["kind"]),
                    model_id=spec["model"],
                    workload=_workload_from_json(spec.get("workload")),
                    activation_probability=float(spec.get("activation_probability", 1.0)),
                    expected_workload=spec.get("expected_workload"),
                    fanout={int(k): float(v) for k, v in fanout.items()} if fanout else None,
                    network_latency_ms=float(spec.get("network_latency_ms", DEFAULT_WEB_LATENCY_MS)),
                )
            )
        edges = [
            TemplateEdge(e["src"], e["dst"], e.get("token_offset_fraction"))
            for e in raw.get("edges", [])
        ]
        return WorkflowTemplate(raw.get("name", path.stem), nodes, edges)
    except (KeyError, ValueError, TypeError, InvalidParams) as exc:
        raise ParseError(f"{path}: {exc}") from exc
