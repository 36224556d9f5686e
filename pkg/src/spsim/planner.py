"""Analytic memory and iteration-time model for sharded training strategies.

Everything here is closed-form arithmetic over the same collective schedule
the executor actually runs (via ``executor.comm_plan``), so the planner and
the simulator cannot drift apart: a strategy's communication time is the
priced replay of the events the executor would log.

Conventions baked into the model:

* Activations are counted per retained tensor: ``c_act`` tensors of shape
  [tokens, dim] per layer, of which exactly one (the layer input) survives
  any amount of recomputation or offloading.  Recompute ratio ``r`` and
  offload ratio ``o`` each release their share of the other ``c_act - 1``.
* Parameter state is 2 bytes of weights, 2 of gradients, 8 of optimizer
  state and 2 of EMA shadow per parameter.  Stage sharding is node-local:
  partitions never span the slow inter-node links.
* Compute runs at ``compute_rate * efficiency``; a backward pass costs twice
  the forward, so one optimizer step is 3x the forward flops.  Footprints
  past ``thrash_threshold`` dilate compute linearly (allocator pressure).
* Offloaded bytes ride the host link for free while compute runs, up to
  ``overlap_cap`` of the step; the spill drains at the much lower effective
  bandwidth a saturated, contended link sustains.
"""

import math
from dataclasses import dataclass, field, replace

from scipy import optimize

from .cluster import (
    ClusterSpec,
    allgather_cost,
    contiguous_group,
    reduce_scatter_cost,
)
from .executor import ShardingPlan, comm_plan, comm_plan_time
from .model import PatchSpec, seq_len

SP_PLACEMENTS = ("intra", "cross")
ZERO_STAGES = (0, 1, 2, 3)
_STRATEGY_KINDS = ("baseline", "recompute", "offload", "combination")


@dataclass(frozen=True)
class ModelDims:
    """Transformer shape the cost model prices."""

    layers: int = 40
    dim: int = 1584
    heads: int = 24
    mlp_ratio: float = 2.0
    text_tokens: int = 256
    patch: PatchSpec = field(default_factory=PatchSpec)

    def __post_init__(self):
        if self.layers < 1 or self.dim < 1 or self.heads < 1:
            raise ValueError(
                f"degenerate model dims: layers={self.layers} dim={self.dim} "
                f"heads={self.heads}"
            )
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def param_count(self) -> int:
        # three attention branches (q,k,v,o each) plus gated mlp and the
        # embedding/modulation tables, all ~dim^2 per layer
        per_layer = (16 + 2 * self.mlp_ratio) * self.dim * self.dim
        return int(round(self.layers * per_layer))


@dataclass(frozen=True)
class Workload:
    """One training shape: a batch of videos at fixed size."""

    frames: int
    height: int
    width: int
    global_batch: int = 1

    def __post_init__(self):
        if min(self.frames, self.height, self.width, self.global_batch) < 1:
            raise ValueError(f"workload fields must be positive: {self}")

    def tokens(self, patch: PatchSpec) -> int:
        return seq_len(self.frames, self.height, self.width, patch)

    def tokens_per_frame(self, patch: PatchSpec) -> int:
        return seq_len(1, self.height, self.width, patch)


@dataclass(frozen=True)
class CostParams:
    """Calibration constants; shipped configs carry the fitted values."""

    efficiency: float = 0.15
    c_act: int = 24  # retained [tokens, dim] tensors per layer, incl. input
    bytes_per_element: int = 2
    weights_bytes: float = 2.0
    grads_bytes: float = 2.0
    optimizer_bytes: float = 8.0
    ema_bytes: float = 2.0
    vae_flops_per_pixel: float = 4096.0
    vae_mem_factor: float = 16.0
    vae_frames_per_pass: int = 1
    overlap_cap: float = 0.2
    thrash_threshold: float = 36e9
    thrash_coef: float = 1.0
    breakdown_transfer_ratio: float = 5.0

    def __post_init__(self):
        if not 0.0 < self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in (0, 1], got {self.efficiency}")
        if self.c_act < 2:
            raise ValueError(f"c_act must be >= 2, got {self.c_act}")
        if not 0.0 <= self.overlap_cap < 1.0:
            raise ValueError(f"overlap_cap must be in [0, 1), got {self.overlap_cap}")


@dataclass(frozen=True)
class TrainStrategy:
    """A point in the parallelism/memory design space."""

    sp_size: int = 1
    sp_placement: str = "intra"
    dp_size: int = 1
    zero_stage: int = 3
    recompute_ratio: float = 0.0
    offload_ratio: float = 0.0
    global_batch: int = 1
    grad_accum: int = 1

    def __post_init__(self):
        if self.sp_placement not in SP_PLACEMENTS:
            raise ValueError(
                f"sp_placement must be one of {SP_PLACEMENTS}, got {self.sp_placement!r}"
            )
        if self.zero_stage not in ZERO_STAGES:
            raise ValueError(f"zero_stage must be 0..3, got {self.zero_stage}")
        if min(self.sp_size, self.dp_size, self.global_batch, self.grad_accum) < 1:
            raise ValueError(f"sizes must be >= 1: {self}")
        r, o = self.recompute_ratio, self.offload_ratio
        if not (0.0 <= r <= 1.0 and 0.0 <= o <= 1.0):
            raise ValueError(f"ratios must lie in [0, 1], got r={r} o={o}")
        if r + o > 1.0 + 1e-9:
            raise ValueError(f"recompute + offload ratios exceed 1: {r} + {o}")

    def key(self):
        """Deterministic total order for tie-breaking."""
        return (self.sp_size, self.sp_placement, self.zero_stage,
                self.recompute_ratio, self.offload_ratio)

    def describe(self) -> str:
        return (f"sp={self.sp_size}({self.sp_placement}) dp={self.dp_size} "
                f"zero{self.zero_stage} r={self.recompute_ratio:g} "
                f"o={self.offload_ratio:g}")


@dataclass(frozen=True)
class MemoryBreakdown:
    """Projected bytes per device (host_pinned lives off-device)."""

    params: float
    grads: float
    optimizer_states: float
    ema_states: float
    stored_activations: float
    vae_peak: float
    host_pinned: float

    @property
    def device_total(self) -> float:
        return (self.params + self.grads + self.optimizer_states
                + self.ema_states + self.stored_activations + self.vae_peak)


@dataclass(frozen=True)
class CostEstimate:
    """Per-iteration seconds, split by cause, plus feasibility."""

    compute_time: float
    exposed_comm_time: float
    recompute_time: float
    exposed_offload_time: float
    vae_time: float
    feasible: bool
    status: str  # "ok" | "oom" | "break_down"
    violated: str
    breakdown: MemoryBreakdown

    @property
    def total(self) -> float:
        return (self.compute_time + self.exposed_comm_time + self.recompute_time
                + self.exposed_offload_time + self.vae_time)


def tokens_per_device(workload: Workload, patch: PatchSpec, sp_size: int) -> int:
    """Widest shard under per-frame splitting: frames * ceil(frame_tokens/P)."""
    if sp_size < 1:
        raise ValueError(f"sp_size must be >= 1, got {sp_size}")
    per_frame = workload.tokens_per_frame(patch)
    return workload.frames * math.ceil(per_frame / sp_size)


def bulk_activation_bytes(tokens_dev: int, dims: ModelDims, cp: CostParams) -> float:
    """Bytes of releasable activations (everything except the layer inputs)."""
    return float((cp.c_act - 1) * tokens_dev * dims.dim * dims.layers
                 * cp.bytes_per_element)


def activation_footprint(tokens_dev: int, dims: ModelDims, cp: CostParams,
                         recompute_ratio: float, offload_ratio: float) -> float:
    """Resident activation bytes after recompute/offload take their share.

    The layer inputs always stay: at recompute + offload == 1 only
    layers * tokens * dim * bytes_per_element survives.
    """
    keep = 1.0 - recompute_ratio - offload_ratio
    if keep < -1e-9:
        raise ValueError(
            f"recompute {recompute_ratio} + offload {offload_ratio} exceed 1"
        )
    keep = max(keep, 0.0)
    anchors = float(tokens_dev * dims.dim * dims.layers * cp.bytes_per_element)
    return keep * bulk_activation_bytes(tokens_dev, dims, cp) + anchors


def zero_group_size(strategy: TrainStrategy, cluster: ClusterSpec) -> int:
    """State sharding stays inside a node to avoid the slow links."""
    return min(cluster.devices_per_node, strategy.sp_size * strategy.dp_size)


def parameter_memory(dims: ModelDims, strategy: TrainStrategy,
                     cluster: ClusterSpec, cp: CostParams):
    """(weights, grads, optimizer, ema) bytes per device under stage sharding."""
    n = dims.param_count
    z = zero_group_size(strategy, cluster)
    weights = cp.weights_bytes * n
    grads = cp.grads_bytes * n
    opt = cp.optimizer_bytes * n
    ema = cp.ema_bytes * n
    if strategy.zero_stage >= 1:
        opt /= z
    if strategy.zero_stage >= 2:
        grads /= z
    if strategy.zero_stage >= 3:
        weights /= z
        ema /= z
    return weights, grads, opt, ema


def vae_peak_bytes(workload: Workload, cp: CostParams) -> float:
    """Encoder transient: a few frames of pixels times the network blow-up."""
    pixels = workload.height * workload.width * 3
    return float(cp.vae_frames_per_pass * pixels * 2 * cp.vae_mem_factor)


def memory_breakdown(strategy: TrainStrategy, cluster: ClusterSpec,
                     dims: ModelDims, workload: Workload,
                     cp: CostParams) -> MemoryBreakdown:
    tokens_dev = tokens_per_device(workload, dims.patch, strategy.sp_size)
    weights, grads, opt, ema = parameter_memory(dims, strategy, cluster, cp)
    stored = activation_footprint(tokens_dev, dims, cp,
                                  strategy.recompute_ratio, strategy.offload_ratio)
    pinned = strategy.offload_ratio * bulk_activation_bytes(tokens_dev, dims, cp)
    return MemoryBreakdown(
        params=weights, grads=grads, optimizer_states=opt, ema_states=ema,
        stored_activations=stored, vae_peak=vae_peak_bytes(workload, cp),
        host_pinned=pinned,
    )


def forward_flops(dims: ModelDims, workload: Workload, tokens_dev: int) -> float:
    """One microbatch forward on one device.

    Dense projections dominate (2 flops per weight per token); attention adds
    4 * dim per scored pair.  Per-frame attention scores frame_tokens keys,
    temporal attention scores frames, and the full-sequence branch reads the
    bounded text context.
    """
    per_frame = workload.tokens_per_frame(dims.patch)
    pairs = per_frame + workload.frames + dims.text_tokens
    dense = 2.0 * dims.param_count * tokens_dev
    attn = 4.0 * dims.dim * dims.layers * tokens_dev * pairs
    return dense + attn


def vae_stage_time(workload: Workload, sp_size: int, cluster: ClusterSpec,
                   cp: CostParams) -> float:
    """Pixel-space encode of one sample, frames dealt across the group."""
    if sp_size < 1:
        raise ValueError(f"sp_size must be >= 1, got {sp_size}")
    frames_dev = math.ceil(workload.frames / sp_size)
    flops = (frames_dev * workload.height * workload.width * 3
             * cp.vae_flops_per_pixel)
    return flops / (cluster.compute_rate * cp.efficiency)


def zero_comm_time(strategy: TrainStrategy, cluster: ClusterSpec,
                   dims: ModelDims, cp: CostParams) -> float:
    """Optimizer-state sharding traffic, node-local, fully exposed.

    Stage 3 regathers every layer's weights for forward and backward and
    scatters gradients, per microbatch; lower stages only pay the once-per-
    step gradient reduction.
    """
    z = zero_group_size(strategy, cluster)
    if z <= 1:
        return 0.0
    group = contiguous_group(0, z)
    shard = dims.param_count / dims.layers * cp.weights_bytes / z
    ag = allgather_cost(shard, group, cluster)
    rs = reduce_scatter_cost(shard, group, cluster)
    if strategy.zero_stage == 3:
        per_layer = 2.0 * ag + rs
        return strategy.grad_accum * dims.layers * per_layer
    return dims.layers * (ag + rs)


def sp_comm_time(strategy: TrainStrategy, cluster: ClusterSpec,
                 dims: ModelDims, workload: Workload, cp: CostParams) -> float:
    """Priced replay of the sequence-parallel collective schedule."""
    if strategy.sp_size <= 1:
        return 0.0
    plan = ShardingPlan(sp_size=strategy.sp_size)
    events = comm_plan(plan, workload.frames, dims.text_tokens,
                       workload.tokens_per_frame(dims.patch), dims.dim,
                       dims.heads, dims.layers, cluster,
                       bytes_per_element=cp.bytes_per_element)
    return strategy.grad_accum * comm_plan_time(events, cluster)


def iteration_time(strategy: TrainStrategy, cluster: ClusterSpec,
                   dims: ModelDims, workload: Workload,
                   cp: CostParams) -> CostEstimate:
    """Price one optimizer step of the strategy on the cluster."""
    total_dev = cluster.total_devices
    if strategy.sp_size * strategy.dp_size > total_dev:
        raise ValueError(
            f"sp {strategy.sp_size} x dp {strategy.dp_size} exceeds "
            f"{total_dev} devices"
        )
    if dims.heads % strategy.sp_size != 0:
        raise ValueError(
            f"sp_size {strategy.sp_size} does not divide {dims.heads} heads"
        )
    derived = "intra" if strategy.sp_size <= cluster.devices_per_node else "cross"
    if strategy.sp_placement != derived:
        raise ValueError(
            f"sp_size {strategy.sp_size} on {cluster.devices_per_node}-wide "
            f"nodes is {derived!r}, strategy says {strategy.sp_placement!r}"
        )

    mb = memory_breakdown(strategy, cluster, dims, workload, cp)
    tokens_dev = tokens_per_device(workload, dims.patch, strategy.sp_size)
    g = strategy.grad_accum

    footprint = mb.device_total
    pressure = max(0.0, footprint - cp.thrash_threshold) / cp.thrash_threshold
    penalty = 1.0 + cp.thrash_coef * pressure

    rate = cluster.compute_rate * cp.efficiency
    fwd = forward_flops(dims, workload, tokens_dev)
    compute = 3.0 * fwd * g * penalty / rate
    recompute = strategy.recompute_ratio * compute / 3.0

    vae = g * vae_stage_time(workload, strategy.sp_size, cluster, cp)

    comm = (zero_comm_time(strategy, cluster, dims, cp)
            + sp_comm_time(strategy, cluster, dims, workload, cp))

    o = strategy.offload_ratio
    bulk = bulk_activation_bytes(tokens_dev, dims, cp)
    transfer = 2.0 * o * bulk * g
    hideable = cp.overlap_cap * compute * cluster.h2d_bw
    offload = max(0.0, transfer - hideable) / cluster.offload_exposed_bw

    status, violated = "ok", ""
    if footprint > cluster.device_mem:
        status = "oom"
        violated = (f"device memory: {footprint / 1e9:.1f} GB resident > "
                    f"{cluster.device_mem / 1e9:.0f} GB capacity")
    elif o > 0.0:
        raw_exposed = transfer / cluster.h2d_bw - cp.overlap_cap * compute
        if mb.host_pinned > cluster.host_mem:
            status = "break_down"
            violated = (f"host memory: {mb.host_pinned / 1e9:.1f} GB pinned > "
                        f"{cluster.host_mem / 1e9:.0f} GB capacity")
        elif raw_exposed > cp.breakdown_transfer_ratio * compute:
            status = "break_down"
            violated = (f"offload transfer: {raw_exposed:.1f} s exposed > "
                        f"{cp.breakdown_transfer_ratio:g}x compute "
                        f"({compute:.1f} s)")

    return CostEstimate(
        compute_time=compute, exposed_comm_time=comm, recompute_time=recompute,
        exposed_offload_time=offload, vae_time=vae,
        feasible=status == "ok", status=status, violated=violated, breakdown=mb,
    )


def memory_saving_strategy(kind: str, ratio: float, *, dp_size: int,
                           global_batch: int, sp_size: int = 1,
                           zero_stage: int = 3) -> TrainStrategy:
    """The four canonical single-knob strategies at a given saving ratio.

    ``combination`` splits the ratio into a fixed 0.2 offload share with the
    remainder recomputed.
    """
    if kind not in _STRATEGY_KINDS:
        raise ValueError(f"unknown strategy kind {kind!r}")
    r = o = 0.0
    if kind == "recompute":
        r = ratio
    elif kind == "offload":
        o = ratio
    elif kind == "combination":
        o = min(0.2, ratio)
        r = ratio - o
    grad_accum = math.ceil(global_batch / dp_size)
    return TrainStrategy(sp_size=sp_size, sp_placement="intra", dp_size=dp_size,
                         zero_stage=zero_stage, recompute_ratio=round(r, 10),
                         offload_ratio=round(o, 10), global_batch=global_batch,
                         grad_accum=grad_accum)


def _divisors(n: int):
    return [d for d in range(1, n + 1) if n % d == 0]


def candidate_sp_sizes(cluster: ClusterSpec, dims: ModelDims):
    """(sp_size, placement) pairs worth trying on this cluster.

    Intra-node sizes divide both the head count and the node width; crossing
    nodes only makes sense in whole-node multiples, up to the head count.
    """
    sizes = []
    for sp in _divisors(cluster.devices_per_node):
        if dims.heads % sp == 0:
            sizes.append((sp, "intra"))
    for k in range(2, cluster.nodes + 1):
        sp = k * cluster.devices_per_node
        if sp > min(dims.heads, cluster.attention_heads):
            break
        if dims.heads % sp == 0:
            sizes.append((sp, "cross"))
    return sizes


@dataclass(frozen=True)
class PlanSearchResult:
    ranked: tuple  # (TrainStrategy, CostEstimate), fastest first
    rejected: tuple  # infeasible (TrainStrategy, CostEstimate)
    grid_size: int
    binding_constraint: str = ""

    @property
    def best(self):
        if not self.ranked:
            raise ValueError("no feasible strategy; " + self.binding_constraint)
        return self.ranked[0]


def plan_search(cluster: ClusterSpec, dims: ModelDims, workload: Workload,
                cp: CostParams, recompute_grid=None,
                offload_grid=(0.0, 0.2)) -> PlanSearchResult:
    """Exhaustively price the strategy grid and rank what fits.

    Deterministic: ties on total time break toward the smaller combined
    footprint (device-resident plus host-pinned, so parking activations on
    the host buys no rank), then toward the plainer strategy tuple — a
    workload with no memory pressure ranks the do-nothing baseline first.
    """
    if recompute_grid is None:
        recompute_grid = [round(0.1 * i, 10) for i in range(11)]
    feasible, rejected = [], []
    grid = 0
    for sp, placement in candidate_sp_sizes(cluster, dims):
        if cluster.total_devices % sp != 0:
            continue
        dp = cluster.total_devices // sp
        g = math.ceil(workload.global_batch / dp)
        for stage in ZERO_STAGES:
            for r in recompute_grid:
                for o in offload_grid:
                    if r + o > 1.0 + 1e-9:
                        continue
                    grid += 1
                    strat = TrainStrategy(
                        sp_size=sp, sp_placement=placement, dp_size=dp,
                        zero_stage=stage, recompute_ratio=r, offload_ratio=o,
                        global_batch=workload.global_batch, grad_accum=g,
                    )
                    est = iteration_time(strat, cluster, dims, workload, cp)
                    (feasible if est.feasible else rejected).append((strat, est))

    feasible.sort(key=lambda se: (
        se[1].total,
        se[1].breakdown.device_total + se[1].breakdown.host_pinned,
        se[0].key(),
    ))
    rejected.sort(key=lambda se: (se[1].breakdown.device_total, se[0].key()))
    binding = ""
    if not feasible and rejected:
        binding = rejected[0][1].violated  # closest miss is the binding wall
    return PlanSearchResult(ranked=tuple(feasible), rejected=tuple(rejected),
                            grid_size=grid, binding_constraint=binding)


@dataclass(frozen=True)
class CalibrationRow:
    workload: Workload
    strategy: TrainStrategy
    target_s: float
    predicted_s: float

    @property
    def residual(self) -> float:
        return (self.predicted_s - self.target_s) / self.target_s


@dataclass(frozen=True)
class CalibrationResult:
    params: CostParams
    rows: tuple

    @property
    def max_abs_residual(self) -> float:
        return max(abs(r.residual) for r in self.rows)


def calibrate(anchors, cluster: ClusterSpec, dims: ModelDims,
              base: CostParams) -> CalibrationResult:
    """Fit the efficiency constant to measured iteration times.

    ``anchors`` is a list of (Workload, TrainStrategy, seconds).  A single
    anchor pins efficiency exactly; several are reconciled by least squares.
    Anchors that are all copies of one measurement can't constrain anything
    and are rejected.
    """
    anchors = list(anchors)
    if not anchors:
        raise ValueError("calibration needs at least one anchor")
    keys = {(w, s.key(), round(t, 12)) for w, s, t in anchors}
    if len(anchors) > 1 and len(keys) == 1:
        raise ValueError("degenerate calibration: all anchors are one point")
    for _, _, seconds in anchors:
        if seconds <= 0:
            raise ValueError(f"anchor times must be positive, got {seconds}")

    def predict_all(eff: float):
        cp = replace(base, efficiency=eff)
        return [iteration_time(s, cluster, dims, w, cp).total
                for w, s, _ in anchors]

    offload_free = all(s.offload_ratio == 0.0 for _, s, _ in anchors)
    if offload_free:
        # total = const + k/eff exactly; relative least squares stays linear
        # in 1/eff, so solve the normal equation directly
        cp_ref = replace(base, efficiency=1.0)
        num = den = 0.0
        for w, s, target in anchors:
            est = iteration_time(s, cluster, dims, w, cp_ref)
            const = est.exposed_comm_time
            k = est.total - const  # compute + recompute + vae, all ~ 1/eff
            num += (k / target) * (k / target)
            den += (k / target) * ((target - const) / target)
        if num == 0.0:
            raise ValueError("degenerate calibration: anchors carry no compute")
        eff = num / den if den > 0 else base.efficiency
    else:
        result = optimize.minimize_scalar(
            lambda e: sum(((p - t) / t) ** 2 for p, (_, _, t)
                          in zip(predict_all(e), anchors)),
            bounds=(1e-4, 1.0), method="bounded",
            options={"xatol": 1e-12},
        )
        eff = float(result.x)
    eff = min(max(eff, 1e-4), 1.0)

    fitted = replace(base, efficiency=eff)
    rows = tuple(
        CalibrationRow(w, s, t,
                       iteration_time(s, cluster, dims, w, fitted).total)
        for w, s, t in anchors
    )
    return CalibrationResult(params=fitted, rows=rows)
