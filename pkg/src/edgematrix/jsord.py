"""Joint service orchestration and request dispatch per channel.

Orchestration picks (service, cell) pairs greedily, each step adding the
pair whose dispatch LP optimum is largest; dispatch re-solves that LP
per slot with the current arrivals. A brute-force subset oracle validates
the greedy on small instances.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import lp as lpmod
from . import topology
from .cellspace import ResourceCell, ResourceChannel
from .domain import DemandTensor, ServiceClass, SlaCatalog

FEAS_TOL = 1e-9


class JsordError(ValueError):
    pass


class EmptyChannel(JsordError):
    pass


class TooLarge(JsordError):
    pass


@dataclass(frozen=True)
class OrchestrationSet:
    """Set of (service key, cell_id) pairs bound to one channel."""

    pairs: frozenset[tuple[tuple[int, int], int]]
    channel: int

    def sorted_pairs(self) -> list[tuple[tuple[int, int], int]]:
        return sorted(self.pairs)


@dataclass
class DispatchPlan:
    """Solved dispatch probabilities and the served-request total."""

    y: dict[tuple[int, int, int, int], float]  # (sla, service, node, cell) -> prob
    throughput_psi: float
    scope: str  # "frame_prediction" | "slot"
    channel: int = 0


@dataclass
class ChannelInstance:
    """One channel's dispatch problem: services, cells, demand, latencies."""

    channel_id: int
    services: list[ServiceClass]          # sorted by (sla_level, service_id)
    cells: list[ResourceCell]             # sorted by cell_id
    node_ids: list[int]                   # sorted
    lam: np.ndarray                       # (L, N) frame or slot demand
    latency: np.ndarray                   # (L, N, M) service/node -> cell ms

    def __post_init__(self):
        L, N, M = len(self.services), len(self.node_ids), len(self.cells)
        if self.lam.shape != (L, N) or self.latency.shape != (L, N, M):
            raise JsordError("instance array shapes inconsistent")
        # indicator[l, i, m]: pair is usable within the service lifecycle
        t = np.array([s.max_response_t - s.exec_time_o for s in self.services])
        self.indicator = t[:, None, None] - self.latency > 0.0

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.services), len(self.node_ids), len(self.cells)

    def with_demand(self, lam: np.ndarray) -> "ChannelInstance":
        return ChannelInstance(self.channel_id, self.services, self.cells,
                               self.node_ids, lam, self.latency)

    def pair_feasible_mask(self, S: OrchestrationSet) -> np.ndarray:
        """(L, M) bool mask of pairs present in S."""
        L, _, M = self.shape
        mask = np.zeros((L, M), dtype=bool)
        cell_pos = {c.cell_id: j for j, c in enumerate(self.cells)}
        svc_pos = {s.key: j for j, s in enumerate(self.services)}
        for key, cid in S.pairs:
            if key in svc_pos and cid in cell_pos:
                mask[svc_pos[key], cell_pos[cid]] = True
        return mask

    def check_set(self, S: OrchestrationSet) -> None:
        """Per-cell memory constraint (7b)."""
        mask = self.pair_feasible_mask(S)
        r = np.array([s.memory_r for s in self.services])
        used = r @ mask
        R = np.array([c.mem_Rpm for c in self.cells])
        bad = np.nonzero(used > R + FEAS_TOL)[0]
        if len(bad):
            raise JsordError(f"orchestration set violates cell memory at cells "
                             f"{[self.cells[j].cell_id for j in bad]}")


def build_instance(channel_id: int, services, cells, graph: topology.ClusterGraph,
                   demand: DemandTensor) -> ChannelInstance:
    """Assemble a solver-facing instance from domain objects."""
    services = sorted(services, key=lambda s: s.key)
    cells = sorted(cells, key=lambda c: c.cell_id)
    node_ids = graph.node_ids()
    L, N, M = len(services), len(node_ids), len(cells)
    lam = np.array([[demand.get(s.sla_level, s.service_id, i) for i in node_ids]
                    for s in services]).reshape(L, N)
    lat = np.zeros((L, N, M))
    for ll, s in enumerate(services):
        for ii, i in enumerate(node_ids):
            for jj, c in enumerate(cells):
                lat[ll, ii, jj] = topology.cell_access_latency(graph, i, c, s)
    return ChannelInstance(channel_id, services, cells, node_ids, lam, lat)


def build_channel_instance(channel: ResourceChannel, catalog: SlaCatalog,
                           graph: topology.ClusterGraph,
                           cells_by_id: dict[int, ResourceCell],
                           demand: DemandTensor) -> ChannelInstance:
    """Solver-facing view of one channel: its SLA level's services and cells."""
    if channel.service_levels is None:
        raise JsordError(f"channel {channel.channel_id} has no SLA level assigned")
    services = catalog.by_level(channel.service_levels)
    cells = [cells_by_id[m] for m in channel.member_cells]
    return build_instance(channel.channel_id, services, cells, graph, demand)


class _LpTemplate:
    """Cached row structure of Eq. (6) for one (instance, demand) pair.

    Variables are y[l, i, m] flattened in lexicographic (l, i, m) order.
    Rows: one per (l, i) (sum over cells <= 1), one per cell m
    (weighted served demand <= W_m).
    """

    def __init__(self, inst: ChannelInstance, lam: np.ndarray):
        L, N, M = inst.shape
        self.inst = inst
        self.lam = lam
        self.n_vars = L * N * M
        self.c = np.repeat(lam.ravel(), M)
        rows: list[tuple[np.ndarray, np.ndarray]] = []
        rhs: list[float] = []
        for l in range(L):
            for i in range(N):
                start = (l * N + i) * M
                rows.append((np.arange(start, start + M), np.ones(M)))
                rhs.append(1.0)
        w = np.array([s.compute_w for s in inst.services])
        for m in range(M):
            idx = np.array([(l * N + i) * M + m for l in range(L) for i in range(N)])
            vals = (w[:, None] * lam).ravel()
            rows.append((idx, vals))
            rhs.append(inst.cells[m].cpu_Wpm)
        self.rows = rows
        self.rhs = np.array(rhs)
        # demand-zero variables are pinned to 0 to keep solutions unique
        self.base_u = (np.repeat(lam.ravel(), M) > 0.0) & inst.indicator.ravel()

    def build(self, pair_mask: np.ndarray) -> lpmod.LinearProgram:
        L, N, M = self.inst.shape
        u = (self.base_u & np.repeat(pair_mask[:, None, :], N, axis=1).ravel()).astype(float)
        return lpmod.LinearProgram(objective_c=self.c, rows=self.rows,
                                   rhs_b=self.rhs, upper_bounds_u=u)


def build_dispatch_lp(inst: ChannelInstance, S: OrchestrationSet,
                      demand: np.ndarray | None = None) -> lpmod.LinearProgram:
    """Eq. (6) for a fixed orchestration set and demand."""
    lam = inst.lam if demand is None else demand
    tpl = _LpTemplate(inst, lam)
    return tpl.build(inst.pair_feasible_mask(S))


def _plan_from_solution(inst: ChannelInstance, sol: lpmod.LpSolution,
                        scope: str) -> DispatchPlan:
    L, N, M = inst.shape
    y = {}
    arr = sol.y_star.reshape(L, N, M)
    for l, i, m in zip(*np.nonzero(arr > 0.0)):
        s = inst.services[l]
        y[(s.sla_level, s.service_id, inst.node_ids[i], inst.cells[m].cell_id)] = float(arr[l, i, m])
    return DispatchPlan(y=y, throughput_psi=float(sol.objective_value),
                        scope=scope, channel=inst.channel_id)


def omega(inst: ChannelInstance, S: OrchestrationSet,
          template: _LpTemplate | None = None) -> float:
    """Optimal dispatch objective for a fixed orchestration set."""
    if not S.pairs:
        return 0.0
    tpl = template if template is not None else _LpTemplate(inst, inst.lam)
    sol = lpmod.solve_lp(tpl.build(inst.pair_feasible_mask(S)))
    if sol.status != "Optimal":
        raise JsordError(f"dispatch LP unexpectedly {sol.status}")
    return float(sol.objective_value)


def _feasible_extensions(inst: ChannelInstance, pairs: set, used_mem: dict[int, float]):
    """Pairs not in S whose addition keeps (7b); sorted lexicographically."""
    out = []
    for s in inst.services:
        for c in inst.cells:
            if (s.key, c.cell_id) in pairs:
                continue
            if used_mem[c.cell_id] + s.memory_r <= c.mem_Rpm + FEAS_TOL:
                out.append((s.key, c.cell_id))
    return out


def greedy_orchestrate(inst: ChannelInstance,
                       demand: np.ndarray | None = None
                       ) -> tuple[OrchestrationSet, DispatchPlan]:
    """Greedy set growth: repeatedly add the pair maximizing the LP optimum.

    Ties break on the smaller (service key, cell id) pair. The returned
    plan is the optimal dispatch for the final set, kept as the frame
    prediction; slot dispatch re-solves with live arrivals.
    """
    L, N, M = inst.shape
    if L == 0 or M == 0:
        raise EmptyChannel(f"channel {inst.channel_id} has no services or cells")
    lam = inst.lam if demand is None else demand
    tpl = _LpTemplate(inst, lam)
    svc_pos = {s.key: j for j, s in enumerate(inst.services)}
    cell_pos = {c.cell_id: j for j, c in enumerate(inst.cells)}
    pairs: set[tuple[tuple[int, int], int]] = set()
    used_mem = {c.cell_id: 0.0 for c in inst.cells}
    mask = np.zeros((L, M), dtype=bool)
    best_sol = None
    while True:
        T = _feasible_extensions(inst, pairs, used_mem)
        if not T:
            break
        best = None
        for e in T:
            mask[svc_pos[e[0]], cell_pos[e[1]]] = True
            sol = lpmod.solve_lp(tpl.build(mask))
            mask[svc_pos[e[0]], cell_pos[e[1]]] = False
            val = sol.objective_value
            if best is None or val > best[0]:  # first-seen wins ties: T is lexicographic
                best = (val, e, sol)
        _, e_star, best_sol = best
        pairs.add(e_star)
        mask[svc_pos[e_star[0]], cell_pos[e_star[1]]] = True
        used_mem[e_star[1]] += inst.services[svc_pos[e_star[0]]].memory_r
    S = OrchestrationSet(pairs=frozenset(pairs), channel=inst.channel_id)
    if best_sol is None:
        # no pair was ever feasible; the empty set dispatches nothing
        plan = DispatchPlan(y={}, throughput_psi=0.0, scope="frame_prediction",
                            channel=inst.channel_id)
        return S, plan
    return S, _plan_from_solution(inst, best_sol, "frame_prediction")


def dispatch_slot(inst: ChannelInstance, S: OrchestrationSet,
                  lam_slot: np.ndarray) -> DispatchPlan:
    """Re-solve Eq. (6) with this slot's arrivals under the frame's set."""
    if not S.pairs:
        return DispatchPlan(y={}, throughput_psi=0.0, scope="slot", channel=inst.channel_id)
    tpl = _LpTemplate(inst, lam_slot)
    sol = lpmod.solve_lp(tpl.build(inst.pair_feasible_mask(S)))
    if sol.status != "Optimal":
        raise JsordError(f"slot dispatch LP unexpectedly {sol.status}")
    return _plan_from_solution(inst.with_demand(lam_slot), sol, "slot")


def solve_all_channels(instances: list[ChannelInstance], mode: str = "sequential"
                       ) -> tuple[dict[int, tuple[OrchestrationSet, DispatchPlan]], float]:
    """Run greedy orchestration on every channel; plans are merged by
    channel id so parallel and sequential runs are bit-identical."""
    if mode not in ("parallel", "sequential"):
        raise JsordError(f"unknown mode {mode!r}")
    t0 = time.perf_counter()
    work = [inst for inst in instances]
    results: dict[int, tuple[OrchestrationSet, DispatchPlan]] = {}

    def solve(inst):
        if inst.shape[0] == 0 or inst.shape[2] == 0:
            S = OrchestrationSet(pairs=frozenset(), channel=inst.channel_id)
            return inst.channel_id, (S, DispatchPlan(y={}, throughput_psi=0.0,
                                                     scope="frame_prediction",
                                                     channel=inst.channel_id))
        return inst.channel_id, greedy_orchestrate(inst)

    if mode == "parallel" and len(work) > 1:
        with ThreadPoolExecutor(max_workers=len(work)) as pool:
            for cid, res in pool.map(solve, work):
                results[cid] = res
    else:
        for inst in work:
            cid, res = solve(inst)
            results[cid] = res
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return dict(sorted(results.items())), wall_ms


def merge_instances(instances: list[ChannelInstance], graph: topology.ClusterGraph,
                    demand: DemandTensor) -> ChannelInstance:
    """Union instance: all services and cells jointly, no channel walls.

    Cross-channel latency indicators are evaluated too, which is what
    makes the monolithic problem strictly larger than the channelized
    ones.
    """
    if not instances:
        raise JsordError("nothing to merge")
    services = [s for inst in instances for s in inst.services]
    cells = [c for inst in instances for c in inst.cells]
    return build_instance(0, services, cells, graph, demand)


def monolithic_jsord(merged: ChannelInstance
                     ) -> tuple[OrchestrationSet, DispatchPlan, float]:
    """Pure-JSORD baseline: one greedy run over the merged instance."""
    t0 = time.perf_counter()
    S, plan = greedy_orchestrate(merged)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return S, plan, wall_ms


def bruteforce_oracle(inst: ChannelInstance,
                      demand: np.ndarray | None = None
                      ) -> tuple[OrchestrationSet, float]:
    """Exhaustive optimum over all orchestration subsets (small instances).

    Ties resolve to the lexicographically smallest pair tuple, so the
    empty set wins when nothing improves on zero.
    """
    L, N, M = inst.shape
    n_pairs = L * M
    if n_pairs > 16:
        raise TooLarge(f"{n_pairs} pairs exceeds the brute-force cap of 16")
    lam = inst.lam if demand is None else demand
    tpl = _LpTemplate(inst, lam)
    all_pairs = sorted((s.key, c.cell_id) for s in inst.services for c in inst.cells)
    svc_pos = {s.key: j for j, s in enumerate(inst.services)}
    cell_pos = {c.cell_id: j for j, c in enumerate(inst.cells)}
    r = {s.key: s.memory_r for s in inst.services}
    R = {c.cell_id: c.mem_Rpm for c in inst.cells}
    best_val = 0.0
    best_pairs: tuple = ()
    for bits in range(1 << n_pairs):
        subset = [all_pairs[k] for k in range(n_pairs) if bits >> k & 1]
        used = {cid: 0.0 for cid in R}
        ok = True
        for key, cid in subset:
            used[cid] += r[key]
            if used[cid] > R[cid] + FEAS_TOL:
                ok = False
                break
        if not ok:
            continue
        if subset:
            mask = np.zeros((L, M), dtype=bool)
            for key, cid in subset:
                mask[svc_pos[key], cell_pos[cid]] = True
            val = lpmod.solve_lp(tpl.build(mask)).objective_value
        else:
            val = 0.0
        key_tuple = tuple(sorted(subset))
        if val > best_val + 1e-12 or (abs(val - best_val) <= 1e-12 and key_tuple < best_pairs):
            best_val = float(val)
            best_pairs = key_tuple
    return OrchestrationSet(pairs=frozenset(best_pairs), channel=inst.channel_id), best_val


def audit_plan(inst: ChannelInstance, S: OrchestrationSet, lam: np.ndarray,
               plan: DispatchPlan, tol: float = FEAS_TOL) -> list[str]:
    """Re-check constraints (1b)-(1f) on a returned plan, outside the solver."""
    L, N, M = inst.shape
    y = np.zeros((L, N, M))
    svc_pos = {s.key: j for j, s in enumerate(inst.services)}
    node_pos = {i: k for k, i in enumerate(inst.node_ids)}
    cell_pos = {c.cell_id: j for j, c in enumerate(inst.cells)}
    out = []
    for (p, l, i, m), v in plan.y.items():
        if (p, l) not in svc_pos or m not in cell_pos:
            out.append(f"plan entry for unknown pair (({p},{l}),{m})")
            continue
        y[svc_pos[(p, l)], node_pos[i], cell_pos[m]] = v
    if np.any(y < -tol) or np.any(y > 1.0 + tol):
        out.append("(1f) violated: y outside [0,1]")
    row_sums = y.sum(axis=2)
    if np.any(row_sums > 1.0 + tol):
        out.append("(1b) violated: per-(l,i) dispatch mass exceeds 1")
    mask = inst.pair_feasible_mask(S)
    r = np.array([s.memory_r for s in inst.services])
    R = np.array([c.mem_Rpm for c in inst.cells])
    if np.any(r @ mask > R + tol):
        out.append("(1c) violated: orchestrated memory exceeds cell memory")
    w = np.array([s.compute_w for s in inst.services])
    served_w = np.einsum("l,li,lim->m", w, lam, y)
    W = np.array([c.cpu_Wpm for c in inst.cells])
    if np.any(served_w > W + max(tol, 1e-7 * max(1.0, float(np.max(W, initial=0.0))))):
        out.append("(1d) violated: dispatched compute exceeds cell capacity")
    allowed = mask[:, None, :] & inst.indicator
    if np.any((y > tol) & ~allowed):
        out.append("(1e) violated: dispatch to a non-orchestrated or late pair")
    served = (lam[:, :, None] * y).sum(axis=2)
    if np.any(served - lam > tol * np.maximum(1.0, lam)):
        out.append("served exceeds offered for some (l,i)")
    return out
