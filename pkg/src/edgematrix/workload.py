"""Per-slot arrival tensors and frame averages.

Randomness is counter-based: every noise draw is a pure hash of
(seed, slot, sla, service, node), so slot tensors can be generated in any
order, in parallel, and replay identically across runs and platforms.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .domain import DemandTensor, SlaCatalog

_MASK = (1 << 64) - 1


class WorkloadError(ValueError):
    pass


class EmptyFrame(WorkloadError):
    pass


class SchemaError(WorkloadError):
    pass


class UnknownId(WorkloadError):
    pass


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK
    x ^= x >> 31
    return x


def _key_hash(*parts: int) -> int:
    h = 0x243F6A8885A308D3
    for p in parts:
        h = _splitmix(h ^ (p & _MASK))
    return h


def _gaussian(seed: int, slot: int, p: int, l: int, i: int) -> float:
    """Standard normal draw as a pure function of the coordinates."""
    h1 = _key_hash(seed, slot, p, l, i, 0)
    h2 = _key_hash(seed, slot, p, l, i, 1)
    u1 = ((h1 >> 11) + 1) * 2.0 ** -53  # in (0, 1]
    u2 = (h2 >> 11) * 2.0 ** -53
    return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


@dataclass(frozen=True)
class RatePattern:
    """Arrival-rate process for every (sla_level, service_id, node_id) key.

    shape is one of:
      - "constant": rate = base
      - "sinusoid": rate = base + amplitude * sin(2*pi*slot/period)
      - "trace":    rate replays trace_counts, wrapping past the end
    """

    base_rate: dict[tuple[int, int, int], float]
    shape: str = "constant"
    period: int = 100
    amplitude: float = 0.0
    noise_std: float = 0.0
    seed: int = 0
    trace_counts: tuple[dict[tuple[int, int, int], float], ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.shape not in ("constant", "sinusoid", "trace"):
            raise WorkloadError(f"unknown shape {self.shape!r}")
        if any(v < 0 for v in self.base_rate.values()):
            raise WorkloadError("base rates must be >= 0")
        if self.noise_std < 0:
            raise WorkloadError("noise_std must be >= 0")
        if self.shape == "sinusoid":
            if self.period < 2:
                raise WorkloadError("period must be >= 2 slots")
            positive = [v for v in self.base_rate.values() if v > 0]
            if positive and self.amplitude > min(positive):
                raise WorkloadError("amplitude must not exceed any positive base rate")
        if self.shape == "trace" and not self.trace_counts:
            raise WorkloadError("trace shape needs trace_counts")

    def keys(self):
        return sorted(self.base_rate)

    def mean_rates(self) -> dict[tuple[int, int, int], float]:
        """Long-run average rate per key (the noise has zero mean)."""
        if self.shape == "trace":
            n = len(self.trace_counts)
            out = {k: 0.0 for k in self.base_rate}
            for slot_counts in self.trace_counts:
                for k, v in slot_counts.items():
                    out[k] += v / n
            return out
        return dict(self.base_rate)


def slot_arrivals(pattern: RatePattern, slot: int) -> DemandTensor:
    """Arrival counts for one slot; deterministic in (pattern, slot)."""
    if slot < 0:
        raise WorkloadError("slot must be >= 0")
    counts: dict[tuple[int, int, int], float] = {}
    if pattern.shape == "trace":
        row = pattern.trace_counts[slot % len(pattern.trace_counts)]
        base = {k: row.get(k, 0.0) for k in pattern.base_rate}
    elif pattern.shape == "sinusoid":
        wave = pattern.amplitude * math.sin(2.0 * math.pi * slot / pattern.period)
        base = {k: v + wave if v > 0 else v for k, v in pattern.base_rate.items()}
    else:
        base = dict(pattern.base_rate)
    for (p, l, i), b in base.items():
        v = b
        if pattern.noise_std > 0:
            v += pattern.noise_std * _gaussian(pattern.seed, slot, p, l, i)
        counts[(p, l, i)] = max(0.0, v)
    return DemandTensor(counts=counts, scope="slot")


def frame_average(slots: list[DemandTensor]) -> DemandTensor:
    """Entrywise mean of slot tensors, tagged as a frame average."""
    if not slots:
        raise EmptyFrame("frame_average over an empty slot list")
    for t in slots:
        if t.scope != "slot":
            raise WorkloadError("frame_average inputs must have scope=slot")
    keys = set()
    for t in slots:
        keys.update(t.counts)
    n = len(slots)
    counts = {k: sum(t.counts.get(k, 0.0) for t in slots) / n for k in keys}
    return DemandTensor(counts=counts, scope="frame_average")


TRACE_HEADER = ["slot", "node", "sla", "service", "count"]


def load_trace(path, catalog: SlaCatalog | None = None,
               node_ids: set[int] | None = None) -> RatePattern:
    """Load a CSV trace (`slot,node,sla,service,count`) into a replay pattern.

    Slots must be contiguous from 0. Queries past the last slot wrap
    around to slot 0.
    """
    per_slot: dict[int, dict[tuple[int, int, int], float]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != TRACE_HEADER:
            raise SchemaError(f"bad header {header!r}, expected {TRACE_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise SchemaError(f"row {lineno}: expected 5 columns")
            try:
                slot, node, sla, service = (int(row[0]), int(row[1]), int(row[2]), int(row[3]))
                count = float(row[4])
            except ValueError as exc:
                raise SchemaError(f"row {lineno}: {exc}") from exc
            if slot < 0 or count < 0 or count != count:
                raise SchemaError(f"row {lineno}: negative slot or count")
            if catalog is not None:
                try:
                    catalog.get(sla, service)
                except KeyError:
                    raise UnknownId(f"row {lineno}: unknown service ({sla},{service})") from None
            if node_ids is not None and node not in node_ids:
                raise UnknownId(f"row {lineno}: unknown node {node}")
            per_slot.setdefault(slot, {})[(sla, service, node)] = count
    if not per_slot:
        raise SchemaError("trace has no data rows")
    n = max(per_slot) + 1
    if sorted(per_slot) != list(range(n)):
        raise SchemaError("trace slots must be contiguous from 0")
    keys = set()
    for row in per_slot.values():
        keys.update(row)
    base = {k: 0.0 for k in keys}
    trace = tuple(per_slot[s] for s in range(n))
    for k in base:
        base[k] = sum(row.get(k, 0.0) for row in trace) / n
    return RatePattern(base_rate=base, shape="trace", trace_counts=trace)
