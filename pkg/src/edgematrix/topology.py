"""Edge cluster graph, node/cloud resources, and transmission latency.

The graph is read-only after construction. Link bandwidth is the min of
the two endpoint node bandwidths (the model attributes bandwidth to
nodes, not links), and a cloud-backed cell pays the full WAN delay once.
"""

from __future__ import annotations

import heapq
import json
from dataclasses import dataclass

import numpy as np


class TopologyError(ValueError):
    pass


class UnknownNode(TopologyError):
    pass


class NotAdjacent(TopologyError):
    pass


@dataclass(frozen=True)
class EdgeNode:
    node_id: int
    cpu_W: float       # vCPU
    mem_R: float       # MB
    bandwidth_B: float # Mbps

    def validate(self) -> None:
        if self.cpu_W <= 0 or self.mem_R <= 0 or self.bandwidth_B <= 0:
            raise TopologyError(f"node {self.node_id}: W, R, B must all be > 0")


@dataclass(frozen=True)
class CloudCenter:
    unlimited_cpu: bool = True
    unlimited_mem: bool = True


class ClusterGraph:
    """Connected undirected graph of edge nodes plus a single cloud uplink."""

    def __init__(self, nodes, edges, cloud_delay: float = 10.0,
                 degree_cap: int | None = None, cloud: CloudCenter = CloudCenter()):
        self.nodes: dict[int, EdgeNode] = {}
        for n in nodes:
            n.validate()
            if n.node_id in self.nodes:
                raise TopologyError(f"duplicate node id {n.node_id}")
            self.nodes[n.node_id] = n
        if cloud_delay < 0:
            raise TopologyError("cloud_delay must be >= 0")
        self.cloud_delay = float(cloud_delay)
        self.cloud = cloud
        self.adj: dict[int, set[int]] = {i: set() for i in self.nodes}
        for i, j in edges:
            if i == j:
                raise TopologyError(f"self-loop at node {i}")
            if i not in self.nodes or j not in self.nodes:
                raise UnknownNode(f"edge ({i},{j}) references unknown node")
            self.adj[i].add(j)
            self.adj[j].add(i)
        if degree_cap is not None:
            for i, nbrs in self.adj.items():
                if len(nbrs) > degree_cap:
                    raise TopologyError(f"node {i} degree {len(nbrs)} exceeds cap {degree_cap}")
        self.degree_cap = degree_cap
        self._check_connected()

    def _check_connected(self) -> None:
        ids = sorted(self.nodes)
        if not ids:
            raise TopologyError("empty graph")
        seen = {ids[0]}
        stack = [ids[0]]
        while stack:
            i = stack.pop()
            for j in self.adj[i]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        if len(seen) != len(ids):
            raise TopologyError("graph is not connected")

    def node_ids(self) -> list[int]:
        return sorted(self.nodes)

    def node(self, i: int) -> EdgeNode:
        try:
            return self.nodes[i]
        except KeyError:
            raise UnknownNode(f"unknown node {i}") from None


def neighborhood(graph: ClusterGraph, i: int) -> set[int]:
    """The node i together with its adjacent nodes."""
    if i not in graph.nodes:
        raise UnknownNode(f"unknown node {i}")
    return {i} | graph.adj[i]


def link_latency(graph: ClusterGraph, i: int, j: int, packet_h: float) -> float:
    """One-hop transmission time in ms; 0 for i == j."""
    if i not in graph.nodes or j not in graph.nodes:
        raise UnknownNode(f"unknown node in ({i},{j})")
    if i == j:
        return 0.0
    if j not in graph.adj[i]:
        raise NotAdjacent(f"nodes {i} and {j} are not adjacent")
    bw = min(graph.node(i).bandwidth_B, graph.node(j).bandwidth_B)
    return packet_h / bw * 1000.0


def shortest_path_latency(graph: ClusterGraph, src: int, dst: int, packet_h: float) -> float:
    """Dijkstra over link_latency edge weights. Deterministic: the heap is
    keyed by (distance, node_id) so ties resolve to the smaller id first."""
    if src not in graph.nodes or dst not in graph.nodes:
        raise UnknownNode(f"unknown node in ({src},{dst})")
    if src == dst:
        return 0.0
    dist = {src: 0.0}
    heap = [(0.0, src)]
    done: set[int] = set()
    while heap:
        d, i = heapq.heappop(heap)
        if i in done:
            continue
        done.add(i)
        if i == dst:
            return d
        for j in sorted(graph.adj[i]):
            nd = d + link_latency(graph, i, j, packet_h)
            if j not in dist or nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    raise TopologyError(f"no path {src} -> {dst}")  # connectivity rules this out


def inverse_bandwidth_distance(graph: ClusterGraph, src: int, dst: int) -> float:
    """Shortest-path sum of 1/min(B_i, B_j) over hops, cached on the graph.

    Link latency is packet_h / min(B) * 1000, so the shortest path is the
    same for every positive packet size and scales linearly with it.
    """
    cache = getattr(graph, "_invbw_cache", None)
    if cache is None:
        cache = {}
        graph._invbw_cache = cache
    key = (src, dst)
    if key not in cache:
        cache[key] = shortest_path_latency(graph, src, dst, 1.0) / 1000.0
    return cache[key]


def cell_access_latency(graph: ClusterGraph, i: int, cell, service) -> float:
    """Transmission latency from node i to a realized cell, in ms.

    Edge part: shortest path to the cell's anchor node. Cloud part: the
    full WAN delay, added iff the cell has any cloud backing.
    """
    lat = service.packet_size_h * 1000.0 * inverse_bandwidth_distance(graph, i, cell.anchor_node)
    if cell.is_vertical:
        lat += graph.cloud_delay
    return lat


# -- construction helpers -----------------------------------------------------

def random_graph(node_count: int, degree_cap: int, cpu_range=(2.0, 4.0),
                 mem_range=(1000.0, 2000.0), bandwidth_choices=(125.0, 12.5),
                 cloud_delay: float = 10.0, seed: int = 0) -> ClusterGraph:
    """Seeded random connected graph under a degree cap.

    Starts from a path (guarantees connectivity) and adds random extra
    edges while both endpoints stay under the cap.
    """
    if node_count < 1:
        raise TopologyError("node_count must be >= 1")
    if degree_cap < 2 and node_count > 2:
        raise TopologyError("degree_cap < 2 cannot keep the graph connected")
    rng = np.random.default_rng(seed)
    nodes = []
    for i in range(1, node_count + 1):
        nodes.append(EdgeNode(
            node_id=i,
            cpu_W=float(rng.uniform(*cpu_range)),
            mem_R=float(rng.uniform(*mem_range)),
            bandwidth_B=float(rng.choice(bandwidth_choices)),
        ))
    edges = [(i, i + 1) for i in range(1, node_count)]
    deg = {i: 0 for i in range(1, node_count + 1)}
    for a, b in edges:
        deg[a] += 1
        deg[b] += 1
    extra = node_count  # attempt budget for shortcut edges
    for _ in range(extra):
        a, b = sorted(int(x) for x in rng.integers(1, node_count + 1, size=2))
        if a == b or (a, b) in edges:
            continue
        if deg[a] >= degree_cap or deg[b] >= degree_cap:
            continue
        edges.append((a, b))
        deg[a] += 1
        deg[b] += 1
    return ClusterGraph(nodes, edges, cloud_delay=cloud_delay, degree_cap=degree_cap)


def graph_to_dict(graph: ClusterGraph) -> dict:
    return {
        "nodes": [{"node_id": n.node_id, "cpu_W": n.cpu_W, "mem_R": n.mem_R,
                   "bandwidth_B": n.bandwidth_B} for _, n in sorted(graph.nodes.items())],
        "edges": sorted((min(i, j), max(i, j))
                        for i in graph.adj for j in graph.adj[i] if i < j),
        "cloud_delay": graph.cloud_delay,
        "degree_cap": graph.degree_cap,
    }


def graph_from_dict(data: dict) -> ClusterGraph:
    nodes = [EdgeNode(**row) for row in data["nodes"]]
    edges = [tuple(e) for e in data["edges"]]
    return ClusterGraph(nodes, edges, cloud_delay=data.get("cloud_delay", 10.0),
                        degree_cap=data.get("degree_cap"))


def save_graph(graph: ClusterGraph, path) -> None:
    with open(path, "w") as fh:
        json.dump(graph_to_dict(graph), fh, indent=2, sort_keys=True)


def load_graph(path) -> ClusterGraph:
    with open(path) as fh:
        return graph_from_dict(json.load(fh))
