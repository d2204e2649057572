"""Core value types: service catalog and demand tensors.

Units are fixed globally: vCPU for compute, MB for memory, megabits for
packet sizes, milliseconds for time. Everything here is immutable after
validation and safe to share between solver workers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field


class DomainError(ValueError):
    pass


class DuplicateService(DomainError):
    pass


class NonPositiveResource(DomainError):
    pass


class LifecycleShorterThanExecution(DomainError):
    pass


@dataclass(frozen=True)
class ServiceClass:
    """One service: SLA level, id within the level, and its resource profile."""

    sla_level: int
    service_id: int
    packet_size_h: float  # megabits per request
    memory_r: float       # MB needed to host a replica
    compute_w: float      # vCPU consumed per request/slot
    max_response_t: float # ms, request lifecycle
    exec_time_o: float    # ms

    @property
    def key(self) -> tuple[int, int]:
        return (self.sla_level, self.service_id)

    def validate(self) -> None:
        if self.sla_level < 1 or self.service_id < 1:
            raise DomainError(f"service ({self.sla_level},{self.service_id}): ids must be >= 1")
        if self.packet_size_h < 0 or self.exec_time_o < 0:
            raise NonPositiveResource(
                f"service ({self.sla_level},{self.service_id}): negative packet size or exec time")
        if self.memory_r <= 0 or self.compute_w <= 0 or self.max_response_t <= 0:
            raise NonPositiveResource(
                f"service ({self.sla_level},{self.service_id}): memory, compute and lifecycle must be > 0")
        if self.max_response_t <= self.exec_time_o:
            # boundary t == o makes the dispatch-latency indicator always false
            raise LifecycleShorterThanExecution(
                f"service ({self.sla_level},{self.service_id}): "
                f"lifecycle {self.max_response_t} ms <= execution {self.exec_time_o} ms")


@dataclass(frozen=True)
class SlaCatalog:
    """All services, grouped by SLA level 1..channel_count_P."""

    services: tuple[ServiceClass, ...]
    channel_count_P: int

    def by_level(self, level: int) -> list[ServiceClass]:
        return [s for s in self.services if s.sla_level == level]

    def get(self, level: int, service_id: int) -> ServiceClass:
        for s in self.services:
            if s.sla_level == level and s.service_id == service_id:
                return s
        raise KeyError((level, service_id))


def validate_catalog(catalog: SlaCatalog) -> SlaCatalog:
    """Validate every service and return the catalog in canonical order.

    Canonical order is (sla_level, service_id); it is total and does not
    depend on input order or hashing.
    """
    if catalog.channel_count_P < 1:
        raise DomainError("channel_count_P must be >= 1")
    errors: list[str] = []
    seen: set[tuple[int, int]] = set()
    for s in catalog.services:
        s.validate()
        if s.key in seen:
            raise DuplicateService(f"duplicate service {s.key}")
        seen.add(s.key)
        if s.sla_level > catalog.channel_count_P:
            raise DomainError(f"service {s.key}: sla_level exceeds channel_count_P")
    for p in range(1, catalog.channel_count_P + 1):
        if not any(s.sla_level == p for s in catalog.services):
            errors.append(f"sla_level {p} has no services")
    if errors:
        raise DomainError("; ".join(errors))
    ordered = tuple(sorted(catalog.services, key=lambda s: s.key))
    return SlaCatalog(services=ordered, channel_count_P=catalog.channel_count_P)


@dataclass(frozen=True)
class DemandTensor:
    """Request counts per (sla_level, service_id, node_id).

    Counts are non-negative reals, not integers: the dispatch LP treats
    demand fractionally. ``scope`` distinguishes a single slot from a
    per-frame average.
    """

    counts: dict[tuple[int, int, int], float] = field(default_factory=dict)
    scope: str = "slot"  # "slot" | "frame_average"

    def __post_init__(self):
        if self.scope not in ("slot", "frame_average"):
            raise DomainError(f"unknown scope {self.scope!r}")
        for k, v in self.counts.items():
            if not (v >= 0.0) or v != v or v == float("inf"):
                raise DomainError(f"demand {k} = {v} is not a finite non-negative real")

    def get(self, level: int, service_id: int, node_id: int) -> float:
        return self.counts.get((level, service_id, node_id), 0.0)

    def total(self) -> float:
        return sum(self.counts.values())


# -- catalog file I/O ---------------------------------------------------------

CATALOG_SCHEMA = {
    "channel_count_P": "int >= 1",
    "services": [
        {
            "sla_level": "int in 1..P",
            "service_id": "int >= 1, unique within level",
            "packet_size_h": "megabits >= 0",
            "memory_r": "MB > 0",
            "compute_w": "vCPU per request > 0",
            "max_response_t": "ms > 0, strictly > exec_time_o",
            "exec_time_o": "ms >= 0",
        }
    ],
}

_SERVICE_FIELDS = ("sla_level", "service_id", "packet_size_h", "memory_r",
                   "compute_w", "max_response_t", "exec_time_o")


def catalog_to_dict(catalog: SlaCatalog) -> dict:
    return {
        "channel_count_P": catalog.channel_count_P,
        "services": [{f: getattr(s, f) for f in _SERVICE_FIELDS} for s in catalog.services],
    }


def catalog_from_dict(data: dict) -> SlaCatalog:
    try:
        services = tuple(ServiceClass(**{f: row[f] for f in _SERVICE_FIELDS})
                         for row in data["services"])
        catalog = SlaCatalog(services=services, channel_count_P=int(data["channel_count_P"]))
    except (KeyError, TypeError) as exc:
        raise DomainError(f"malformed catalog: {exc}") from exc
    return validate_catalog(catalog)


def save_catalog(catalog: SlaCatalog, path) -> None:
    with open(path, "w") as fh:
        json.dump(catalog_to_dict(catalog), fh, indent=2, sort_keys=True)


def load_catalog(path) -> SlaCatalog:
    with open(path) as fh:
        return catalog_from_dict(json.load(fh))
