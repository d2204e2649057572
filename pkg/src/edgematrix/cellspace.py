"""Resource cells, the free-capacity ledger, and channel clustering.

A cell is a logically isolated (cpu, mem) bundle backed by the anchor
node's neighborhood (horizontal part) and, for any shortfall, the cloud
(vertical part). Cells with similar characteristic vectors are grouped
into channels; a channel's priority is the norm of its centroid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import topology
from .domain import SlaCatalog


class CellError(ValueError):
    pass


class ZeroDemand(CellError):
    pass


class TooFewCells(CellError):
    pass


class CountMismatch(CellError):
    pass


@dataclass(frozen=True)
class ResourceCell:
    cell_id: int
    anchor_node: int
    cpu_Wpm: float
    mem_Rpm: float
    edge_backing: dict[int, tuple[float, float]]  # node -> (cpu, mem)
    cloud_backing: tuple[float, float]
    created_frame: int = 0

    @property
    def is_vertical(self) -> bool:
        return self.cloud_backing[0] > 0 or self.cloud_backing[1] > 0

    @property
    def edge_totals(self) -> tuple[float, float]:
        cpu = sum(c for c, _ in self.edge_backing.values())
        mem = sum(m for _, m in self.edge_backing.values())
        return cpu, mem


@dataclass(frozen=True)
class CellCharacteristics:
    w_norm: float
    r_norm: float
    u_edge: float
    epsilon: float

    @property
    def vector(self) -> np.ndarray:
        return np.array([self.w_norm, self.r_norm, self.epsilon * self.u_edge])


@dataclass
class ResourceChannel:
    channel_id: int  # 1 = highest priority
    priority_delta: float
    centroid: np.ndarray
    member_cells: list[int]
    service_levels: int | None = None  # the sla_level this channel serves


class CapacityLedger:
    """Mutable free-capacity accounting per node; cells debit it at creation."""

    def __init__(self, graph: topology.ClusterGraph):
        self.initial = {i: (n.cpu_W, n.mem_R) for i, n in graph.nodes.items()}
        self.free = {i: [n.cpu_W, n.mem_R] for i, n in graph.nodes.items()}

    def debit(self, node: int, cpu: float, mem: float) -> None:
        f = self.free[node]
        if cpu > f[0] + 1e-9 or mem > f[1] + 1e-9:
            raise CellError(f"node {node}: debit ({cpu},{mem}) exceeds free ({f[0]},{f[1]})")
        f[0] = max(0.0, f[0] - cpu)
        f[1] = max(0.0, f[1] - mem)

    def credit(self, node: int, cpu: float, mem: float) -> None:
        f = self.free[node]
        f[0] += cpu
        f[1] += mem

    def release(self, cell: ResourceCell) -> None:
        for node, (cpu, mem) in cell.edge_backing.items():
            self.credit(node, cpu, mem)

    def conservation_violations(self, live_cells: list[ResourceCell], tol: float = 1e-6) -> list[str]:
        """initial - sum(backing of live cells) must equal current free, per node."""
        used = {i: [0.0, 0.0] for i in self.initial}
        for cell in live_cells:
            for node, (cpu, mem) in cell.edge_backing.items():
                used[node][0] += cpu
                used[node][1] += mem
        out = []
        for i, (w0, r0) in sorted(self.initial.items()):
            exp_cpu = w0 - used[i][0]
            exp_mem = r0 - used[i][1]
            got = self.free[i]
            if abs(exp_cpu - got[0]) > tol or abs(exp_mem - got[1]) > tol:
                out.append(f"node {i}: expected free ({exp_cpu:.6f},{exp_mem:.6f}) "
                           f"got ({got[0]:.6f},{got[1]:.6f})")
        return out


def realize_cell(graph: topology.ClusterGraph, ledger: CapacityLedger, anchor: int,
                 action: tuple[float, float], cell_id: int, frame: int = 0,
                 alpha: float = 2.0, beta: float = 500.0) -> ResourceCell:
    """Turn an agent action in [0,1]^2 into a backed cell and debit the ledger.

    Supply order: anchor node first, then neighbors by descending free CPU
    (ties by smaller node id), each resource drawn independently; whatever
    is left comes from the cloud.
    """
    a_w, a_r = action
    if not (0.0 <= a_w <= 1.0 and 0.0 <= a_r <= 1.0):
        raise CellError(f"action {action} outside [0,1]^2")
    need_cpu = alpha * a_w
    need_mem = beta * a_r
    if need_cpu == 0.0 or need_mem == 0.0:
        raise ZeroDemand(f"cell with demand ({need_cpu},{need_mem}) rejected")
    nbrs = topology.neighborhood(graph, anchor) - {anchor}
    order = [anchor] + sorted(nbrs, key=lambda j: (-ledger.free[j][0], j))
    edge_backing: dict[int, tuple[float, float]] = {}
    rem_cpu, rem_mem = need_cpu, need_mem
    debits = []
    for node in order:
        if rem_cpu <= 0 and rem_mem <= 0:
            break
        free_cpu, free_mem = ledger.free[node]
        take_cpu = min(rem_cpu, free_cpu)
        take_mem = min(rem_mem, free_mem)
        if take_cpu > 0 or take_mem > 0:
            edge_backing[node] = (take_cpu, take_mem)
            debits.append((node, take_cpu, take_mem))
            rem_cpu -= take_cpu
            rem_mem -= take_mem
    cloud = (max(0.0, rem_cpu), max(0.0, rem_mem))
    if cloud[0] < 1e-12 and cloud[1] < 1e-12:
        cloud = (0.0, 0.0)
    for node, cpu, mem in debits:
        ledger.debit(node, cpu, mem)
    return ResourceCell(cell_id=cell_id, anchor_node=anchor, cpu_Wpm=need_cpu,
                        mem_Rpm=need_mem, edge_backing=edge_backing,
                        cloud_backing=cloud, created_frame=frame)


def characteristics(cell: ResourceCell, epsilon: float,
                    alpha: float = 2.0, beta: float = 500.0) -> CellCharacteristics:
    """phi vector of a cell: normalized size plus weighted edge proportion."""
    edge_cpu, edge_mem = cell.edge_totals
    u_edge = 0.5 * (edge_cpu / cell.cpu_Wpm + edge_mem / cell.mem_Rpm)
    return CellCharacteristics(w_norm=cell.cpu_Wpm / alpha, r_norm=cell.mem_Rpm / beta,
                               u_edge=u_edge, epsilon=epsilon)


def _kmeans(points: np.ndarray, k: int, seed: int,
            max_iter: int = 100, tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic Lloyd k-means with seeded farthest-point init."""
    n = len(points)
    rng = np.random.default_rng(seed)
    centroids = np.empty((k, points.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        idx = int(np.argmax(d2))  # argmax takes the smallest index on ties
        centroids[c] = points[idx]
        d2 = np.minimum(d2, np.sum((points - centroids[c]) ** 2, axis=1))
    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        labels = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for c in range(k):
            members = np.nonzero(labels == c)[0]
            if len(members) == 0:
                steal = _steal_for(c, labels, dists, k)
                labels[steal] = c
                members = np.array([steal])
                dists[steal, :] = 0.0
            new_centroids[c] = points[members].mean(axis=0)
        shift = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if shift < tol:
            break
    dists = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    labels = np.argmin(dists, axis=1)
    for c in range(k):
        if not np.any(labels == c):
            labels[_steal_for(c, labels, dists, k)] = c
    return labels, centroids


def _steal_for(c: int, labels: np.ndarray, dists: np.ndarray, k: int) -> int:
    """Pick the point farthest from its own centroid to donate to empty cluster c.

    Points that are the sole member of their cluster are never stolen, so
    repairing one cluster cannot empty another.
    """
    own = dists[np.arange(len(labels)), labels].copy()
    counts = np.bincount(labels, minlength=k)
    own[counts[labels] <= 1] = -1.0
    return int(np.argmax(own))


def cluster_channels(cells: list[ResourceCell], chars: list[CellCharacteristics],
                     P: int, seed: int = 0) -> list[ResourceChannel]:
    """Group cells into P channels by phi and rank channels by delta descending."""
    if len(cells) < P:
        raise TooFewCells(f"{len(cells)} cells < P={P}")
    points = np.array([c.vector for c in chars])
    labels, centroids = _kmeans(points, P, seed)
    deltas = [float(np.linalg.norm(centroids[c])) for c in range(P)]
    # channel 1 = largest delta; ties broken by cluster index for determinism
    ranked = sorted(range(P), key=lambda c: (-deltas[c], c))
    channels = []
    for rank, c in enumerate(ranked, start=1):
        members = [cells[i].cell_id for i in range(len(cells)) if labels[i] == c]
        channels.append(ResourceChannel(channel_id=rank, priority_delta=deltas[c],
                                        centroid=centroids[c], member_cells=sorted(members)))
    return channels


def assign_service_levels(channels: list[ResourceChannel], catalog: SlaCatalog) -> list[ResourceChannel]:
    """Pair SLA levels with channels: strictest deadline onto largest delta.

    A level's strictness is the minimum max_response_t over its services.
    """
    if catalog.channel_count_P != len(channels):
        raise CountMismatch(f"catalog has P={catalog.channel_count_P}, got {len(channels)} channels")
    strictness = []
    for p in range(1, catalog.channel_count_P + 1):
        services = catalog.by_level(p)
        strictness.append((min(s.max_response_t for s in services), p))
    levels = [p for _, p in sorted(strictness)]
    by_delta = sorted(channels, key=lambda ch: ch.channel_id)  # id order == delta desc
    for ch, level in zip(by_delta, levels):
        ch.service_levels = level
    return channels


def channels_snapshot(channels: list[ResourceChannel], cells_by_id: dict[int, ResourceCell]) -> dict:
    """JSON-friendly dump of the channel structure for debugging/plots."""
    out = []
    for ch in sorted(channels, key=lambda c: c.channel_id):
        out.append({
            "channel_id": ch.channel_id,
            "priority_delta": ch.priority_delta,
            "centroid": [float(v) for v in ch.centroid],
            "sla_level": ch.service_levels,
            "cells": [
                {"cell_id": m, "anchor": cells_by_id[m].anchor_node,
                 "cpu": cells_by_id[m].cpu_Wpm, "mem": cells_by_id[m].mem_Rpm,
                 "vertical": cells_by_id[m].is_vertical}
                for m in ch.member_cells
            ],
        })
    return {"channels": out}
