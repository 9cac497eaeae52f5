"""FLOP and byte accounting and the synchronous round-latency model.

Only dense products are costed: ``2 * rows * d_in * d_out`` per product in
the forward pass, twice that for the backward pass (input gradient plus
weight gradient). An adapter adds its two bottleneck products. Attention
score products, nonlinearities and the embedding lookup are ignored.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

from .errors import AccountingError, ParameterError
from .lora import AdapterSet, count_trainable

WIRE_BYTES_PER_ELEMENT = 4
HEADER_BYTES = 64


@dataclass(frozen=True)
class ComputeSpec:
    client_flops: float = 35.6e12
    server_flops: float = 284.8e12
    aggregator_flops: float = 35.6e12

    def __post_init__(self):
        if min(self.client_flops, self.server_flops, self.aggregator_flops) <= 0:
            raise ParameterError("compute rates must be positive")


@dataclass(frozen=True)
class LinkSpec:
    client_server_bps: float = 600e6
    client_aggregator_bps: float = 300e6

    def __post_init__(self):
        if min(self.client_server_bps, self.client_aggregator_bps) <= 0:
            raise ParameterError("link rates must be positive")


def flops_of_pass(layers, batch_rows: int, direction: str = "forward",
                  adapters: AdapterSet | None = None) -> int:
    if direction not in ("forward", "backward"):
        raise ParameterError(f"direction must be 'forward' or 'backward', got {direction!r}")
    total = 0
    for layer in layers:
        for name, d_in, d_out in layer.dense_products():
            total += 2 * batch_rows * d_in * d_out
        if adapters is not None:
            for site_id, _, d, m in layer.sites():
                a = adapters.get(site_id)
                if a is None:
                    continue
                # embedding adapters are a row lookup of A, so only (hA)B is costed
                total += 2 * batch_rows * a.rank * (m if layer.kind == "embedding" else d + m)
    return total if direction == "forward" else 2 * total


def element_count(payload) -> int:
    if payload is None:
        return 0
    if isinstance(payload, AdapterSet):
        return count_trainable(payload)
    return int(getattr(payload, "size", 0))


def payload_bytes(message, bytes_per_element: int = WIRE_BYTES_PER_ELEMENT,
                  header_bytes: int = HEADER_BYTES) -> int:
    """Wire size: every payload element (labels included) at ``bytes_per_element`` plus a header."""
    return sum(element_count(p) for p in message.payloads()) * bytes_per_element + header_bytes


@dataclass
class CostLedger:
    flops: dict[str, int] = field(default_factory=dict)
    bytes: dict[str, int] = field(default_factory=dict)
    sim_time_s: float = 0.0

    def add_flops(self, entity: str, n: int) -> None:
        if n < 0:
            raise AccountingError(f"negative FLOP count {n} for {entity}")
        self.flops[entity] = self.flops.get(entity, 0) + int(n)

    def add_bytes(self, link: str, n: int) -> None:
        if n < 0:
            raise AccountingError(f"negative byte count {n} on {link}")
        self.bytes[link] = self.bytes.get(link, 0) + int(n)

    def advance(self, seconds: float) -> None:
        if not seconds >= 0:
            raise AccountingError(f"simulated time cannot move by {seconds}")
        self.sim_time_s += seconds

    def snapshot(self) -> "CostLedger":
        return copy.deepcopy(self)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes.values())


@dataclass
class RoundTrace:
    """Per-phase work of one round; per-client lists are indexed by client position.

    a1 client forward FLOPs, a2 uplink activation bytes, a3 server FLOPs,
    a4 downlink gradient bytes, a5 client backward FLOPs; on aggregation
    rounds b1 upload bytes, b2 aggregator FLOPs, b3 broadcast bytes.
    """
    a1: Sequence[int] | None = None
    a2: Sequence[int] | None = None
    a3: int | None = None
    a4: Sequence[int] | None = None
    a5: Sequence[int] | None = None
    b1: Sequence[int] | None = None
    b2: int | None = None
    b3: Sequence[int] | None = None

    @property
    def has_aggregation(self) -> bool:
        return any(v is not None for v in (self.b1, self.b2, self.b3))


def round_latency(trace: RoundTrace, compute: ComputeSpec, links: LinkSpec) -> float:
    """Seconds for one synchronous round: each parallel phase waits for its slowest client."""
    for name in ("a1", "a2", "a3", "a4", "a5"):
        if getattr(trace, name) is None:
            raise AccountingError(f"round trace is missing phase {name}")
    n = len(trace.a1)
    if n == 0 or any(len(getattr(trace, p)) != n for p in ("a2", "a4", "a5")):
        raise AccountingError("per-client phases must list every client")
    fc, fs = compute.client_flops, compute.server_flops
    cs = links.client_server_bps
    t = max(a1 / fc + a2 * 8 / cs for a1, a2 in zip(trace.a1, trace.a2))
    t += trace.a3 / fs
    t += max(a4 * 8 / cs for a4 in trace.a4)
    t += max(a5 / fc for a5 in trace.a5)
    if trace.has_aggregation:
        if trace.b1 is None or trace.b2 is None or trace.b3 is None:
            raise AccountingError("aggregation trace needs phases b1, b2 and b3")
        ca = links.client_aggregator_bps
        t += max(b * 8 / ca for b in trace.b1)
        t += trace.b2 / compute.aggregator_flops
        t += max(b * 8 / ca for b in trace.b3)
    return t
