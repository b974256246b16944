"""Deterministic discrete-event simulation of the SoC.

Each processing unit runs at most one sub-stage; every active sub-stage
advances at rate 1/phi(B(t)) where B(t) is the aggregate DRAM demand of the
active set. B(t) is piecewise-constant between events (dispatches,
completions, token-group boundaries), so progress integration is exact and
the average slowdown of a node emerges as the work-weighted mean of the
factors it ran under.

Web-search stages occupy a synthetic "network" resource with unlimited
parallelism and zero bandwidth demand; they are started directly by the
simulator since no placement decision exists for them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Protocol, Sequence

from .errors import Deadlock, HeroschedError, InvalidParams, NoAdmissibleConfig
from .perfmodel import ConfigKey, Platform, SlowdownParams, StageProfile, slowdown
from .workflow import NodeState, StageKind, WorkflowGraph

NETWORK_PU = "net"

# Work conservation and Eq-consistency tolerance used by the engine.
WORK_TOL = 1e-6


class DispatchLike(Protocol):
    """What the simulator needs from a policy decision."""

    node_id: str
    pu_id: str
    config: ConfigKey
    substage_count: int
    base_work: float
    bandwidth: float
    budget_checked: bool
    extrapolated: bool


class SchedulerPolicy(Protocol):
    name: str

    def validate(self, graph: WorkflowGraph, profiles: StageProfile, platform: Platform) -> None: ...

    def step(self, state: "SimState", graph: WorkflowGraph, profiles: StageProfile,
             platform: Platform) -> Sequence[DispatchLike]: ...


@dataclass
class ActiveRun:
    """Execution bookkeeping for one dispatched sub-stage."""

    node_id: str
    pu_id: str | None
    config: ConfigKey | None
    base_work: float
    bandwidth: float
    slow: SlowdownParams
    start_time: float
    group_work: float = 0.0
    group_size: int = 0
    groups_total: int = 1
    groups_done: int = 0
    progress: float = 0.0
    weighted_slowdown: float = 0.0
    extrapolated: bool = False

    @property
    def is_network(self) -> bool:
        return self.pu_id is None

    def started(self, clock: float) -> bool:
        return self.start_time <= clock


@dataclass
class SimConfig:
    """Engine knobs; the per-decision overhead models the scheduler's own cost."""

    decision_overhead_ms: float = 0.0
    max_events: int = 10_000_000


@dataclass
class SimState:
    """Mutable simulation state handed to policies as a read-only snapshot."""

    platform: Platform
    clock: float = 0.0
    runs: dict[str, ActiveRun] = field(default_factory=dict)
    pu_busy: dict[str, str | None] = field(default_factory=dict)
    event_queue: list[tuple[float, str, str]] = field(default_factory=list)

    @property
    def aggregate_bandwidth(self) -> float:
        return sum(r.bandwidth for r in self.runs.values() if r.started(self.clock))

    @property
    def active(self) -> dict[str, ActiveRun]:
        return self.runs

    def idle_pus(self) -> list[str]:
        return [p for p in self.platform.pu_ids if self.pu_busy.get(p) is None]

    def phi(self, run: ActiveRun) -> float:
        return slowdown(run.slow, self.aggregate_bandwidth, self.platform.dram_peak_bandwidth)


@dataclass(frozen=True)
class NodeRecord:
    """Per-node outcome: timing, placement, and average slowdown."""

    node_id: str
    template_name: str
    stage_kind: str
    model_id: str
    pu_id: str
    shape: int
    substage_count: int
    workload: int
    start_time: float
    finish_time: float
    avg_slowdown: float
    base_work: float
    extrapolated_cost: bool

    @property
    def elapsed(self) -> float:
        return self.finish_time - self.start_time


@dataclass(frozen=True)
class DispatchRecord:
    """One admission event, kept for budget-safety auditing."""

    time: float
    node_id: str
    pu_id: str
    bandwidth: float
    bandwidth_before: float
    soft_budget: float
    budget_checked: bool


@dataclass
class SimResult:
    makespan: float
    node_records: list[NodeRecord]
    bandwidth_trace: list[tuple[float, float]]
    pu_utilization: dict[str, float]
    dispatches: list[DispatchRecord]
    policy_name: str
    graph: WorkflowGraph | None = None

    def record_for(self, node_id: str) -> NodeRecord:
        for rec in self.node_records:
            if rec.node_id == node_id:
                return rec
        raise KeyError(node_id)


def advance_rates(state: SimState, profiles: StageProfile | None = None) -> float:
    """Time of the next pending event given current rates.

    Considers completions, token-group boundaries of streaming runs and
    deferred starts; also refreshes ``state.event_queue``. Raises
    InvalidParams when nothing is active.
    """
    if not state.runs:
        raise InvalidParams("no active runs")
    queue: list[tuple[float, str, str]] = []
    for run in state.runs.values():
        if not run.started(state.clock):
            queue.append((run.start_time, "start", run.node_id))
            continue
        phi = state.phi(run)
        completion = state.clock + (run.base_work - run.progress) * phi
        queue.append((completion, "finish", run.node_id))
        if run.groups_done + 1 < run.groups_total:
            marker = (run.groups_done + 1) * run.group_work
            if marker > run.progress:
                queue.append((state.clock + (marker - run.progress) * phi, "group", run.node_id))
    queue.sort(key=lambda e: (e[0], e[1], e[2]))
    state.event_queue = queue
    return queue[0][0]


def _advance_to(state: SimState, t: float) -> None:
    dt = t - state.clock
    if dt < 0:
        raise HeroschedError("time cannot move backwards")
    if dt > 0:
        phis = {nid: state.phi(run) for nid, run in state.runs.items() if run.started(state.clock)}
        for nid, phi in phis.items():
            run = state.runs[nid]
            dp = dt / phi
            run.progress = min(run.progress + dp, run.base_work)
            run.weighted_slowdown += dp * phi
    state.clock = t


def _validate_admissibility(graph: WorkflowGraph, profiles: StageProfile, platform: Platform) -> None:
    for name, tmpl in graph.template.nodes.items():
        if tmpl.stage_kind in (StageKind.WEB_SEARCH,):
            continue
        if not profiles.admissible_pus(tmpl.model_id, platform):
            raise NoAdmissibleConfig(
                f"{name} ({tmpl.stage_kind.value})",
                detail=f"model {tmpl.model_id!r} has no profiled PU on this platform",
            )


def run(graph: WorkflowGraph, platform: Platform, profiles: StageProfile,
        policy: SchedulerPolicy, seed: int = 0, sim_config: SimConfig | None = None) -> SimResult:
    """Simulate one workflow under a scheduling policy.

    The input graph is deep-copied, so the caller's graph is untouched and
    repeated runs with identical arguments yield identical results. The
    ``seed`` parameter is reserved for interface stability; all stochastic
    choices live in the graph itself.
    """
    del seed  # reproducibility comes from the graph's own pre-drawn choices
    cfg = sim_config or SimConfig()
    graph = copy.deepcopy(graph)
    _validate_admissibility(graph, profiles, platform)
    policy.validate(graph, profiles, platform)

    state = SimState(platform=platform)
    state.pu_busy = {p: None for p in platform.pu_ids}
    records: list[NodeRecord] = []
    dispatches: list[DispatchRecord] = []
    trace: list[tuple[float, float]] = []

    def record_bandwidth() -> None:
        b = state.aggregate_bandwidth
        if trace and trace[-1][0] == state.clock:
            trace[-1] = (state.clock, b)
        elif not trace or trace[-1][1] != b:
            trace.append((state.clock, b))

    def start_network_nodes() -> None:
        for node in graph.ready_nodes():
            if node.is_network:
                graph.mark_active(
                    node.node_id,
                    ConfigKey(node.model_id, NETWORK_PU, 1),
                    state.clock,
                    substage_count=1,
                    base_work=node.network_latency_ms,
                )
                state.runs[node.node_id] = ActiveRun(
                    node_id=node.node_id,
                    pu_id=None,
                    config=node.chosen_config,
                    base_work=node.network_latency_ms,
                    bandwidth=0.0,
                    slow=SlowdownParams(sensitivity=0.0),
                    start_time=state.clock,
                )

    def apply_decisions(decisions: Sequence[DispatchLike]) -> None:
        for i, d in enumerate(decisions, start=1):
            node = graph.node(d.node_id)
            if node.state is not NodeState.READY:
                raise HeroschedError(f"policy dispatched non-ready node {d.node_id}")
            if state.pu_busy.get(d.pu_id) is not None:
                raise HeroschedError(f"policy dispatched {d.node_id} to busy PU {d.pu_id}")
            before = state.aggregate_bandwidth
            if d.budget_checked and before + d.bandwidth > platform.soft_bandwidth_budget * (1 + 1e-9):
                raise HeroschedError(
                    f"budget violation dispatching {d.node_id}: "
                    f"{before} + {d.bandwidth} > {platform.soft_bandwidth_budget}"
                )
            start = state.clock + i * cfg.decision_overhead_ms
            graph.mark_active(d.node_id, d.config, start, d.substage_count, d.base_work)
            group_work = d.base_work / d.substage_count if d.substage_count else d.base_work
            state.runs[d.node_id] = ActiveRun(
                node_id=d.node_id,
                pu_id=d.pu_id,
                config=d.config,
                base_work=d.base_work,
                bandwidth=d.bandwidth,
                slow=profiles.slowdown_params(d.config.model_id, d.config.pu_id),
                start_time=start,
                group_work=group_work if node.is_streaming else 0.0,
                group_size=d.config.shape if node.is_streaming else 0,
                groups_total=d.substage_count if node.is_streaming else 1,
                extrapolated=d.extrapolated,
            )
            state.pu_busy[d.pu_id] = d.node_id
            dispatches.append(
                DispatchRecord(
                    time=state.clock,
                    node_id=d.node_id,
                    pu_id=d.pu_id,
                    bandwidth=d.bandwidth,
                    bandwidth_before=before,
                    soft_budget=platform.soft_bandwidth_budget,
                    budget_checked=d.budget_checked,
                )
            )

    def finish_run(run: ActiveRun) -> None:
        node = graph.node(run.node_id)
        run.progress = run.base_work
        graph.mark_done(run.node_id, state.clock)
        if run.pu_id is not None:
            state.pu_busy[run.pu_id] = None
        avg = run.weighted_slowdown / run.base_work if run.weighted_slowdown > 0 else 1.0
        records.append(
            NodeRecord(
                node_id=run.node_id,
                template_name=node.template_name,
                stage_kind=node.stage_kind.value,
                model_id=node.model_id,
                pu_id=run.pu_id if run.pu_id is not None else NETWORK_PU,
                shape=run.config.shape if run.config else 1,
                substage_count=max(run.groups_total, 1),
                workload=node.workload,
                start_time=run.start_time,
                finish_time=state.clock,
                avg_slowdown=avg,
                base_work=run.base_work,
                extrapolated_cost=run.extrapolated,
            )
        )
        del state.runs[run.node_id]

    graph.refresh_ready(0.0)
    start_network_nodes()
    apply_decisions(policy.step(state, graph, profiles, platform))
    record_bandwidth()

    events = 0
    while True:
        if not state.runs:
            unfinished = graph.unfinished()
            if not unfinished:
                break
            ready = [n.node_id for n in graph.ready_nodes()]
            raise Deadlock(
                f"no active work at t={state.clock} with unfinished nodes "
                f"{sorted(n.node_id for n in unfinished)}; ready={ready}"
            )
        events += 1
        if events > cfg.max_events:
            raise HeroschedError("event budget exceeded; runaway simulation")

        t_next = advance_rates(state)
        due = [e for e in state.event_queue if e[0] == t_next]
        _advance_to(state, t_next)

        finished_ids: list[str] = []
        for _, kind, node_id in due:
            run_ = state.runs.get(node_id)
            if run_ is None:
                continue
            if kind == "finish":
                finish_run(run_)
                finished_ids.append(node_id)
            elif kind == "group":
                run_.groups_done += 1
                node = graph.node(node_id)
                tokens = min(run_.groups_done * run_.group_size, node.workload)
                graph.streaming_progress(node_id, tokens, now=state.clock)
            # "start" events need no action: started() flips with the clock.

        for node_id in finished_ids:
            graph.materialize_on_completion(node_id)
        graph.refresh_ready(state.clock)
        start_network_nodes()
        apply_decisions(policy.step(state, graph, profiles, platform))
        record_bandwidth()

    makespan = max((r.finish_time for r in records), default=0.0)
    records.sort(key=lambda r: (r.finish_time, r.start_time, r.node_id))
    result = SimResult(
        makespan=makespan,
        node_records=records,
        bandwidth_trace=trace,
        pu_utilization={},
        dispatches=dispatches,
        policy_name=policy.name,
        graph=graph,
    )
    result.pu_utilization = utilization(result, platform)
    return result


def utilization(result: SimResult, platform: Platform) -> dict[str, float]:
    """Busy fraction of each PU over the makespan (network excluded)."""
    busy: dict[str, float] = {p: 0.0 for p in platform.pu_ids}
    for rec in result.node_records:
        if rec.pu_id in busy:
            busy[rec.pu_id] += rec.elapsed
    if result.makespan <= 0:
        return {p: 0.0 for p in busy}
    return {p: busy[p] / result.makespan for p in busy}


# -- serialization -------------------------------------------------------------


def node_record_dict(rec: NodeRecord) -> dict:
    return {
        "type": "node",
        "id": rec.node_id,
        "kind": rec.stage_kind,
        "model": rec.model_id,
        "pu": rec.pu_id,
        "shape": rec.shape,
        "substages": rec.substage_count,
        "workload": rec.workload,
        "start_ms": rec.start_time,
        "finish_ms": rec.finish_time,
        "avg_slowdown": rec.avg_slowdown,
        "base_work_ms": rec.base_work,
        "extrapolated_cost": rec.extrapolated_cost,
    }


def write_records(result: SimResult, path: str | Path) -> None:
    """Line-delimited records: one line per node plus a summary line."""
    with open(path, "w") as fh:
        for rec in result.node_records:
            fh.write(json.dumps(node_record_dict(rec), sort_keys=True) + "\n")
        summary = {
            "type": "summary",
            "policy": result.policy_name,
            "makespan_ms": result.makespan,
            "pu_utilization": dict(sorted(result.pu_utilization.items())),
        }
        fh.write(json.dumps(summary, sort_keys=True) + "\n")


def write_bandwidth_trace(result: SimResult, path: str | Path) -> None:
    """Step-function bandwidth trace as (t_ms, bandwidth_gbps) rows."""
    with open(path, "w") as fh:
        fh.write("t_ms,bandwidth_gbps\n")
        for t, b in result.bandwidth_trace:
            fh.write(f"{t!r},{b!r}\n")
