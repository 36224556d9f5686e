"""Hardware description and alpha-beta communication cost model.

Collectives are costed with the usual latency/bandwidth split: each of the
P-1 hops pays the per-message latency alpha, and the wire time is the data
that actually crosses links divided by the bottleneck bandwidth. A group
confined to one node sees the intra-node link; any group that spans nodes
is throttled to the inter-node link for the whole operation (min-edge
assumption).

Per-device byte conventions (b = bytes_per_device):
  all-gather      every device ends with P*b; wire time (P-1)*b / bw
  reduce-scatter  symmetric to all-gather, same cost
  all-to-all      every device keeps 1/P of its data; (P-1)/P * b / bw
  ring            steps * (alpha + b/bw), for pipelined neighbor exchange

All costs are zero for a single-device group.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass


@dataclass(frozen=True)
class ClusterSpec:
    """Static description of the machine being modeled (SI units: B, B/s, FLOP/s)."""

    nodes: int = 1
    devices_per_node: int = 8
    intra_bw: float = 300e9
    inter_bw: float = 15e9
    h2d_bw: float = 25e9
    offload_exposed_bw: float = 0.9e9
    device_mem: float = 80e9
    host_mem: float = 256e9
    compute_rate: float = 312e12
    alpha: float = 5e-6
    attention_heads: int = 24

    def __post_init__(self):
        if self.attention_heads < 1:
            raise ValueError(f"attention_heads must be >= 1, got {self.attention_heads}")
        if self.nodes < 1 or self.devices_per_node < 1:
            raise ValueError(
                f"need at least one node and one device per node, "
                f"got {self.nodes} x {self.devices_per_node}"
            )
        for name in ("intra_bw", "inter_bw", "h2d_bw", "offload_exposed_bw",
                     "device_mem", "host_mem", "compute_rate"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.inter_bw > self.intra_bw:
            warnings.warn(
                "inter-node bandwidth exceeds intra-node bandwidth; "
                "placement-aware costs will prefer spanning nodes",
                stacklevel=2,
            )

    @property
    def total_devices(self) -> int:
        return self.nodes * self.devices_per_node

    def node_of(self, rank: int) -> int:
        if not 0 <= rank < self.total_devices:
            raise ValueError(f"rank {rank} outside 0..{self.total_devices - 1}")
        return rank // self.devices_per_node


@dataclass(frozen=True)
class DeviceGroup:
    """An ordered set of global ranks participating in collectives together."""

    ranks: tuple

    def __post_init__(self):
        if len(self.ranks) == 0:
            raise ValueError("a device group cannot be empty")
        if len(set(self.ranks)) != len(self.ranks):
            raise ValueError(f"duplicate ranks in group: {self.ranks}")

    @property
    def size(self) -> int:
        return len(self.ranks)

    def spans_nodes(self, spec: ClusterSpec) -> bool:
        return len({spec.node_of(r) for r in self.ranks}) > 1

    def effective_bw(self, spec: ClusterSpec) -> float:
        return spec.inter_bw if self.spans_nodes(spec) else spec.intra_bw


def contiguous_group(start: int, size: int) -> DeviceGroup:
    return DeviceGroup(tuple(range(start, start + size)))


def allgather_time(p: int, bytes_per_device: float, bw: float, alpha: float) -> float:
    """Each device contributes b and ends with P*b."""
    if p < 1:
        raise ValueError(f"group size must be >= 1, got {p}")
    if p == 1:
        return 0.0
    return alpha * (p - 1) + (p - 1) * bytes_per_device / bw


def reduce_scatter_time(p: int, bytes_per_device: float, bw: float, alpha: float) -> float:
    """Mirror image of all-gather; identical wire traffic."""
    return allgather_time(p, bytes_per_device, bw, alpha)


def alltoall_time(p: int, bytes_per_device: float, bw: float, alpha: float) -> float:
    """Each device re-deals its b bytes; 1/P of them stay local."""
    if p < 1:
        raise ValueError(f"group size must be >= 1, got {p}")
    if p == 1:
        return 0.0
    return alpha * (p - 1) + (p - 1) / p * bytes_per_device / bw


def ring_time(steps: int, bytes_per_hop: float, bw: float, alpha: float) -> float:
    """Pipelined neighbor exchange: each step moves b over one link."""
    if steps < 0:
        raise ValueError("steps must be >= 0")
    return steps * (alpha + bytes_per_hop / bw)


_COLLECTIVES = {
    "allgather": allgather_time,
    "reduce_scatter": reduce_scatter_time,
    "alltoall": alltoall_time,
}


def collective_time(kind: str, p: int, bytes_per_device: float, bw: float, alpha: float) -> float:
    """Dispatch by collective name; used when replaying logged comm events."""
    try:
        fn = _COLLECTIVES[kind]
    except KeyError:
        raise ValueError(f"unknown collective {kind!r}") from None
    return fn(p, bytes_per_device, bw, alpha)


def allgather_cost(bytes_per_device: float, group: DeviceGroup, spec: ClusterSpec) -> float:
    """All-gather over a concrete device group at its bottleneck bandwidth."""
    return allgather_time(group.size, bytes_per_device, group.effective_bw(spec), spec.alpha)


def reduce_scatter_cost(bytes_per_device: float, group: DeviceGroup, spec: ClusterSpec) -> float:
    return reduce_scatter_time(group.size, bytes_per_device, group.effective_bw(spec), spec.alpha)


def alltoall_cost(bytes_per_device: float, group: DeviceGroup, spec: ClusterSpec) -> float:
    return alltoall_time(group.size, bytes_per_device, group.effective_bw(spec), spec.alpha)


def ring_p2p_cost(bytes_per_hop: float, steps: int, group: DeviceGroup, spec: ClusterSpec) -> float:
    return ring_time(steps, bytes_per_hop, group.effective_bw(spec), spec.alpha)
