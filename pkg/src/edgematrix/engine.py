"""Two-time-scale simulation engine.

Each frame: agents act, cells are retired/realized, cells are clustered
into channels, each channel is orchestrated greedily against the
predicted frame demand; each slot inside the frame re-solves dispatch
with the live arrivals. Cells, channels and orchestration sets change
only at frame boundaries; only dispatch changes per slot.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass, field, asdict

import numpy as np

from . import cellspace, jsord, nmac, topology, workload
from .domain import DemandTensor, ServiceClass, SlaCatalog, validate_catalog


class EngineError(RuntimeError):
    pass


class AuditFailure(EngineError):
    pass


# -- configuration ------------------------------------------------------------

@dataclass
class SimConfig:
    """Scenario parameters; defaults follow the reference setup."""

    node_count: int = 10
    degree_cap: int = 4
    cpu_range: tuple[float, float] = (2.0, 4.0)
    mem_range: tuple[float, float] = (102_400.0, 204_800.0)  # MB
    bandwidth_choices: tuple[float, ...] = (125.0, 12.5)     # Mbps
    cloud_delay: float = 10.0                                # ms
    channel_count_P: int = 6
    services_per_level: tuple[int, int] = (2, 4)
    slots_per_frame: int = 100
    frames_per_episode: int = 5
    cell_budget: int = 6
    epsilon: float = 1.5
    alpha: float = 2.0     # vCPU cell-size scalar
    beta: float = 500.0    # MB cell-size scalar
    seed: int = 1
    solver_mode: str = "parallel"
    stochastic_rounding: bool = False
    workload_shape: str = "sinusoid"
    workload_period: int = 100
    workload_amplitude_frac: float = 0.5
    workload_noise_std: float = 0.5
    rate_range: tuple[float, float] = (1.0, 8.0)  # requests/slot per (p,l,i)
    training: nmac.TrainSettings = field(default_factory=nmac.TrainSettings)
    catalog: dict | None = None      # explicit catalog dict; generated if None
    topology: dict | None = None     # explicit topology dict; generated if None

    def validate(self, for_training: bool = False) -> None:
        if self.epsilon < 0 or (for_training and self.epsilon <= 0):
            raise EngineError(f"epsilon {self.epsilon} invalid"
                              + (" for training" if for_training else ""))
        positives = {
            "node_count": self.node_count, "channel_count_P": self.channel_count_P,
            "slots_per_frame": self.slots_per_frame, "cell_budget": self.cell_budget,
            "alpha": self.alpha, "beta": self.beta,
            "frames_per_episode": self.frames_per_episode,
        }
        for name, v in positives.items():
            if v <= 0:
                raise EngineError(f"{name} must be positive, got {v}")
        if self.solver_mode not in ("parallel", "sequential"):
            raise EngineError(f"unknown solver_mode {self.solver_mode!r}")
        if self.node_count < self.channel_count_P:
            # frame 0 yields at most one cell per node, so fewer nodes
            # than channels can never cluster
            raise EngineError(f"node_count {self.node_count} < P {self.channel_count_P}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["training"] = asdict(self.training)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SimConfig":
        data = dict(data)
        tr = data.pop("training", None)
        cfg = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in data.items()})
        if tr:
            cfg.training = nmac.TrainSettings(**tr)
        return cfg


# lifecycle values per SLA level, strictest first; level 1 cannot tolerate
# the 10 ms WAN hop (t - o < cloud_delay), loose levels can
_LEVEL_LIFECYCLES = [12.0, 18.0, 30.0, 60.0, 120.0, 200.0, 320.0, 500.0]


def generate_catalog(P: int, services_per_level: tuple[int, int], seed: int) -> SlaCatalog:
    """Deterministic synthetic catalog with Alibaba-like value ranges."""
    rng = np.random.default_rng(seed)
    services = []
    for p in range(1, P + 1):
        t = _LEVEL_LIFECYCLES[(p - 1) % len(_LEVEL_LIFECYCLES)]
        count = int(rng.integers(services_per_level[0], services_per_level[1] + 1))
        for l in range(1, count + 1):
            services.append(ServiceClass(
                sla_level=p, service_id=l,
                packet_size_h=float(rng.uniform(0.1, 0.5)),
                memory_r=float(rng.uniform(100.0, 450.0)),
                compute_w=float(rng.uniform(0.01, 0.05)),
                max_response_t=t,
                exec_time_o=3.0,
            ))
    return validate_catalog(SlaCatalog(services=tuple(services), channel_count_P=P))


def build_pattern(cfg: SimConfig, catalog: SlaCatalog, node_ids: list[int],
                  episode: int = 0) -> workload.RatePattern:
    rng = np.random.default_rng(cfg.seed + 7919)
    base = {}
    for s in catalog.services:
        for i in node_ids:
            base[(s.sla_level, s.service_id, i)] = float(rng.uniform(*cfg.rate_range))
    amplitude = cfg.workload_amplitude_frac * min(v for v in base.values())
    return workload.RatePattern(
        base_rate=base, shape=cfg.workload_shape, period=cfg.workload_period,
        amplitude=amplitude if cfg.workload_shape == "sinusoid" else 0.0,
        noise_std=cfg.workload_noise_std, seed=cfg.seed * 1_000_003 + episode)


# -- frame/slot records -------------------------------------------------------

@dataclass
class SlotResult:
    slot: int
    psi_per_channel: dict[int, float]
    offered_total: float
    served_total: float
    plans: dict[int, jsord.DispatchPlan]
    lam_arrays: dict[int, np.ndarray]


@dataclass
class FrameResult:
    frame: int
    cells_created: list[int]
    cells_retired: list[int]
    channels: list[cellspace.ResourceChannel]
    channel_horizontal: dict[int, bool]
    orchestration: dict[int, jsord.OrchestrationSet]
    instances: dict[int, jsord.ChannelInstance]
    slot_results: list[SlotResult]
    rewards: dict[int, float]
    offered_mean: dict[tuple[int, int, int], float]
    served_mean: dict[tuple[int, int, int], float]
    solve_wall_ms: float
    audit: list[str]


# -- simulation state ---------------------------------------------------------

class SimulationState:
    """Mutable world state across frames within one episode."""

    def __init__(self, cfg: SimConfig, episode: int = 0):
        cfg.validate()
        self.cfg = cfg
        if cfg.topology is not None:
            self.graph = topology.graph_from_dict(cfg.topology)
        else:
            self.graph = topology.random_graph(
                cfg.node_count, cfg.degree_cap, cfg.cpu_range, cfg.mem_range,
                cfg.bandwidth_choices, cfg.cloud_delay, seed=cfg.seed)
        if cfg.catalog is not None:
            from .domain import catalog_from_dict
            self.catalog = catalog_from_dict(cfg.catalog)
        else:
            self.catalog = generate_catalog(cfg.channel_count_P,
                                            cfg.services_per_level, cfg.seed)
        self.node_ids = self.graph.node_ids()
        self.schema = nmac.StateSchema(list(self.catalog.services),
                                       cfg.cell_budget, cfg.degree_cap)
        self.reset(episode)

    def reset(self, episode: int = 0) -> None:
        cfg = self.cfg
        self.episode = episode
        self.pattern = build_pattern(cfg, self.catalog, self.node_ids, episode)
        self.ledger = cellspace.CapacityLedger(self.graph)
        self.cells_by_id: dict[int, cellspace.ResourceCell] = {}
        self.agent_cells: dict[int, list[int]] = {i: [] for i in self.node_ids}
        self.next_cell_id = 1
        self.frame = 0
        self.global_slot = 0
        self.prev_mean: DemandTensor | None = None

    # -- observation

    def predicted_demand(self) -> DemandTensor:
        """Frame demand predictor: last frame's realized mean, or the
        pattern's base rates before any frame has run."""
        if self.prev_mean is not None:
            return self.prev_mean
        return DemandTensor(counts=self.pattern.mean_rates(), scope="frame_average")

    def observe(self) -> np.ndarray:
        demand = self.predicted_demand()
        cfg = self.cfg
        states = []
        for i in self.node_ids:
            local = {s.key: demand.get(s.sla_level, s.service_id, i)
                     for s in self.catalog.services}
            chars = []
            for cid in self.agent_cells[i]:
                ch = cellspace.characteristics(self.cells_by_id[cid], cfg.epsilon,
                                               cfg.alpha, cfg.beta)
                chars.append((ch.w_norm, ch.r_norm, ch.u_edge))
            free = []
            for j in [i] + sorted(topology.neighborhood(self.graph, i) - {i}):
                cap = self.graph.node(j)
                f = self.ledger.free[j]
                free.append((f[0] / cap.cpu_W, f[1] / cap.mem_R))
            states.append(self.schema.encode(local, chars, free))
        return np.stack(states)

    def live_cells(self) -> list[cellspace.ResourceCell]:
        return sorted(self.cells_by_id.values(), key=lambda c: c.cell_id)


def _round_stochastic(tensor: DemandTensor, seed: int, slot: int) -> DemandTensor:
    """Optional integral-arrival mode: counter-based stochastic rounding."""
    counts = {}
    for (p, l, i), v in tensor.counts.items():
        lo = np.floor(v)
        frac = v - lo
        h = workload._key_hash(seed, slot, p, l, i, 2)
        u = (h >> 11) * 2.0 ** -53
        counts[(p, l, i)] = float(lo + (1.0 if u < frac else 0.0))
    return DemandTensor(counts=counts, scope="slot")


def _lam_array(inst: jsord.ChannelInstance, tensor: DemandTensor) -> np.ndarray:
    return np.array([[tensor.get(s.sla_level, s.service_id, i) for i in inst.node_ids]
                     for s in inst.services]).reshape(len(inst.services), len(inst.node_ids))


def run_frame(state: SimulationState, actions: np.ndarray) -> FrameResult:
    """One large-time-scale step; aborts on any invariant-audit failure."""
    cfg = state.cfg
    # floor keeps every realized cell non-degenerate so the frame always
    # has enough cells to cluster into P channels
    actions = np.clip(np.asarray(actions, dtype=float), 1e-3, 1.0)
    created, retired = [], []
    for idx, node in enumerate(state.node_ids):
        held = state.agent_cells[node]
        if len(held) >= cfg.cell_budget:
            oldest = held.pop(0)
            state.ledger.release(state.cells_by_id.pop(oldest))
            retired.append(oldest)
        try:
            cell = cellspace.realize_cell(state.graph, state.ledger, node,
                                          tuple(actions[idx]), state.next_cell_id,
                                          frame=state.frame, alpha=cfg.alpha,
                                          beta=cfg.beta)
        except cellspace.ZeroDemand:
            continue
        state.cells_by_id[cell.cell_id] = cell
        held.append(cell.cell_id)
        created.append(cell.cell_id)
        state.next_cell_id += 1

    cells = state.live_cells()
    chars = [cellspace.characteristics(c, cfg.epsilon, cfg.alpha, cfg.beta)
             for c in cells]
    channels = cellspace.cluster_channels(cells, chars, cfg.channel_count_P,
                                          seed=cfg.seed + 13)
    cellspace.assign_service_levels(channels, state.catalog)
    horizontal = {ch.channel_id: all(not state.cells_by_id[m].is_vertical
                                     for m in ch.member_cells)
                  for ch in channels}

    lam_tau = state.predicted_demand()
    instances = {}
    for ch in channels:
        instances[ch.channel_id] = jsord.build_channel_instance(
            ch, state.catalog, state.graph, state.cells_by_id, lam_tau)
    results, wall_ms = jsord.solve_all_channels(
        [instances[c] for c in sorted(instances)], mode=cfg.solver_mode)
    orchestration = {cid: S for cid, (S, _plan) in results.items()}

    audit: list[str] = []
    slot_results: list[SlotResult] = []
    slot_tensors: list[DemandTensor] = []
    offered_sum: dict = defaultdict(float)
    served_sum: dict = defaultdict(float)
    for t in range(cfg.slots_per_frame):
        slot_idx = state.global_slot
        state.global_slot += 1
        tensor = workload.slot_arrivals(state.pattern, slot_idx)
        if cfg.stochastic_rounding:
            tensor = _round_stochastic(tensor, state.pattern.seed, slot_idx)
        slot_tensors.append(tensor)
        psi = {}
        plans = {}
        lam_arrays = {}
        for cid in sorted(instances):
            inst = instances[cid]
            lam_t = _lam_array(inst, tensor)
            plan = jsord.dispatch_slot(inst, orchestration[cid], lam_t)
            psi[cid] = plan.throughput_psi
            plans[cid] = plan
            lam_arrays[cid] = lam_t
            bad = jsord.audit_plan(inst, orchestration[cid], lam_t, plan)
            audit.extend(f"frame {state.frame} slot {t} ch {cid}: {b}" for b in bad)
            served = (lam_t[:, :, None] * _plan_array(inst, plan)).sum(axis=2)
            for j, s in enumerate(inst.services):
                for k, i in enumerate(inst.node_ids):
                    key = (s.sla_level, s.service_id, i)
                    offered_sum[key] += lam_t[j, k]
                    served_sum[key] += served[j, k]
        slot_results.append(SlotResult(
            slot=t, psi_per_channel=psi,
            offered_total=tensor.total(),
            served_total=float(sum(psi.values())),
            plans=plans, lam_arrays=lam_arrays))

    n = cfg.slots_per_frame
    offered_mean = {k: v / n for k, v in offered_sum.items()}
    served_mean = {k: v / n for k, v in served_sum.items()}
    rewards = _rewards(state, channels, offered_mean, served_mean)
    audit.extend(state.ledger.conservation_violations(cells))
    frame = FrameResult(
        frame=state.frame, cells_created=created, cells_retired=retired,
        channels=channels, channel_horizontal=horizontal,
        orchestration=orchestration, instances=instances,
        slot_results=slot_results, rewards=rewards,
        offered_mean=offered_mean, served_mean=served_mean,
        solve_wall_ms=wall_ms, audit=audit)
    if audit:
        raise AuditFailure("; ".join(audit[:5]) + f" ({len(audit)} total)")
    state.prev_mean = workload.frame_average(slot_tensors)
    state.frame += 1
    return frame


def _plan_array(inst: jsord.ChannelInstance, plan: jsord.DispatchPlan) -> np.ndarray:
    L, N, M = inst.shape
    y = np.zeros((L, N, M))
    svc = {s.key: j for j, s in enumerate(inst.services)}
    node = {i: k for k, i in enumerate(inst.node_ids)}
    cell = {c.cell_id: j for j, c in enumerate(inst.cells)}
    for (p, l, i, m), v in plan.y.items():
        y[svc[(p, l)], node[i], cell[m]] = v
    return y


def _rewards(state: SimulationState, channels, offered_mean, served_mean) -> dict[int, float]:
    delta_by_level = {ch.service_levels: ch.priority_delta for ch in channels}
    rewards = {}
    for i in state.node_ids:
        total = 0.0
        for s in state.catalog.services:
            key = (s.sla_level, s.service_id, i)
            offered = offered_mean.get(key, 0.0)
            if offered > 0:
                rate = served_mean.get(key, 0.0) / offered
            else:
                rate = 0.0
            total += delta_by_level[s.sla_level] * rate
        rewards[i] = total
    return rewards


def compute_reward(frame: FrameResult, channels, node_ids, catalog) -> dict[int, float]:
    """Priority-weighted per-agent throughput rates (standalone recompute)."""
    delta_by_level = {ch.service_levels: ch.priority_delta for ch in channels}
    out = {}
    for i in node_ids:
        total = 0.0
        for s in catalog.services:
            key = (s.sla_level, s.service_id, i)
            offered = frame.offered_mean.get(key, 0.0)
            rate = frame.served_mean.get(key, 0.0) / offered if offered > 0 else 0.0
            total += delta_by_level[s.sla_level] * rate
        out[i] = total
    return out


def audit_invariants(state: SimulationState, frame: FrameResult) -> list[str]:
    """Re-check capacity conservation and every slot plan, outside the engine."""
    report = list(state.ledger.conservation_violations(state.live_cells()))
    for sr in frame.slot_results:
        for cid, plan in sr.plans.items():
            inst = frame.instances[cid]
            bad = jsord.audit_plan(inst, frame.orchestration[cid],
                                   sr.lam_arrays[cid], plan)
            report.extend(f"slot {sr.slot} ch {cid}: {b}" for b in bad)
    for key, served in frame.served_mean.items():
        offered = frame.offered_mean.get(key, 0.0)
        if served > offered + 1e-6 * max(1.0, offered):
            report.append(f"served exceeds offered for {key}")
    return report


# -- experiment driver --------------------------------------------------------

def metrics_header(P: int) -> list[str]:
    return (["episode", "frame", "reward_mean", "throughput_rate"]
            + [f"share_ch{p}" for p in range(1, P + 1)]
            + ["violations", "wall_ms"])


def frame_metrics(state: SimulationState, frame: FrameResult, episode: int,
                  wall_ms: float | None = None) -> dict:
    offered = sum(frame.offered_mean.values())
    served = sum(frame.served_mean.values())
    if offered > 0:
        rate = served / offered
        flagged = False
    else:
        rate = 1.0  # vacuous-service convention
        flagged = True
    total_served = sum(sum(sr.psi_per_channel.values()) for sr in frame.slot_results)
    shares = {}
    horizontal_share = 0.0
    for ch in sorted(frame.channels, key=lambda c: c.channel_id):
        ch_served = sum(sr.psi_per_channel.get(ch.channel_id, 0.0)
                        for sr in frame.slot_results)
        share = ch_served / max(total_served, 1e-12) if total_served > 0 else 0.0
        shares[ch.channel_id] = share
        if frame.channel_horizontal[ch.channel_id]:
            horizontal_share += share
    dropped = max(0.0, offered - served) * state.cfg.slots_per_frame
    row = {"episode": episode, "frame": frame.frame,
           "reward_mean": float(np.mean(list(frame.rewards.values()))),
           "throughput_rate": rate}
    for p, share in sorted(shares.items()):
        row[f"share_ch{p}"] = share
    row["horizontal_share"] = horizontal_share
    row["violations"] = dropped
    row["wall_ms"] = frame.solve_wall_ms if wall_ms is None else wall_ms
    row["offered_zero_flag"] = flagged
    return row


def aggregate_episodes(rows: list[dict], P: int) -> list[dict]:
    """Collapse per-frame metric rows to one row per episode.

    Means for rates and shares, sums for violations and wall time; the
    frame column reports how many frames were aggregated.
    """
    by_ep: dict[int, list[dict]] = {}
    for row in rows:
        by_ep.setdefault(row["episode"], []).append(row)
    out = []
    for ep in sorted(by_ep):
        group = by_ep[ep]
        agg = {"episode": ep, "frame": len(group),
               "reward_mean": float(np.mean([r["reward_mean"] for r in group])),
               "throughput_rate": float(np.mean([r["throughput_rate"] for r in group]))}
        for p in range(1, P + 1):
            agg[f"share_ch{p}"] = float(np.mean([r.get(f"share_ch{p}", 0.0)
                                                 for r in group]))
        agg["horizontal_share"] = float(np.mean([r.get("horizontal_share", 0.0)
                                                 for r in group]))
        agg["violations"] = float(sum(r["violations"] for r in group))
        agg["wall_ms"] = float(sum(r["wall_ms"] for r in group))
        agg["offered_zero_flag"] = any(r.get("offered_zero_flag") for r in group)
        out.append(agg)
    return out


class SimEnvironment:
    """Adapter between the frame engine and the offline trainer."""

    def __init__(self, cfg: SimConfig, record_metrics: bool = False):
        self.state = SimulationState(cfg)
        self.record_metrics = record_metrics
        self.metrics: list[dict] = []
        self._episode = -1

    def reset(self) -> np.ndarray:
        self._episode += 1
        self.state.reset(self._episode)
        return self.state.observe()

    def step(self, actions: np.ndarray):
        frame = run_frame(self.state, actions)
        if self.record_metrics:
            self.metrics.append(frame_metrics(self.state, frame, self._episode))
        rewards = np.array([frame.rewards[i] for i in self.state.node_ids])
        return self.state.observe(), rewards


def run_experiment(cfg: SimConfig, mode: str, episodes: int, policy=None,
                   centralized: bool = True):
    """Run training or frozen-policy evaluation.

    Returns (per-frame metrics rows, trainer or None, per-episode mean
    reward log).
    """
    cfg.validate(for_training=(mode == "train"))
    if mode == "train":
        env = SimEnvironment(cfg, record_metrics=True)
        trainer, reward_log = nmac.train_offline(
            env, episodes, cfg.frames_per_episode, cfg.seed,
            settings=cfg.training, centralized=centralized)
        return env.metrics, trainer, reward_log
    if mode != "eval":
        raise EngineError(f"unknown mode {mode!r}")
    if policy is None:
        raise EngineError("eval mode needs a policy")
    env = SimEnvironment(cfg, record_metrics=True)
    reward_log = []
    for ep in range(episodes):
        states = env.reset()
        ep_rewards = []
        for _ in range(cfg.frames_per_episode):
            actions = np.stack([policy.act(k, states[k]) for k in range(len(states))])
            states, rewards = env.step(actions)
            ep_rewards.append(float(np.mean(rewards)))
        reward_log.append(float(np.mean(ep_rewards)))
    return env.metrics, None, reward_log


def reference_config(seed: int = 1) -> SimConfig:
    """Shipped small training scenario: 3 nodes, 2 channels.

    Sized so that cell usefulness depends strongly on the action: small
    cells cannot host the heavier services at all, so policies that grow
    cells beat random sizing.
    """
    cfg = SimConfig(
        node_count=3, degree_cap=2, cpu_range=(2.0, 3.0),
        mem_range=(1200.0, 1600.0), channel_count_P=2,
        services_per_level=(2, 2), slots_per_frame=8, frames_per_episode=5,
        cell_budget=2, seed=seed, solver_mode="sequential",
        workload_shape="constant", workload_noise_std=0.2,
        rate_range=(20.0, 40.0),
    )
    services = []
    for p, t in ((1, 12.0), (2, 60.0)):
        for l, (r, w) in enumerate(((350.0, 0.02), (450.0, 0.03)), start=1):
            services.append({"sla_level": p, "service_id": l, "packet_size_h": 0.1,
                             "memory_r": r, "compute_w": w, "max_response_t": t,
                             "exec_time_o": 3.0})
    cfg.catalog = {"channel_count_P": 2, "services": services}
    return cfg
