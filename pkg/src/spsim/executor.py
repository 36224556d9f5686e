"""Deterministic simulation of sequence-parallel training on logical devices.

One training iteration is executed twice over the same seeded batch: once
on a single logical device (`reference_iteration`) and once sharded over P
logical devices (`run_sp_iteration`). The sharded path runs the real
pipeline shape:

  frames dealt round-robin -> per-frame encode / noise / embed (no comm)
  -> all-to-all reshard onto the plan's sequence axis
  -> transformer blocks with distributed attention where the branch's
     sequence crosses devices (head-parallel or gather-based)
  -> final all-gather -> replicated output head and loss.

Noise is keyed per frame off the batch seed, so any device can regenerate
the exact stream for a frame it owns; that is what makes the result
independent of the device count. Every collective is appended to a CommLog
with the byte counts a real transport would see, and `comm_plan` builds
the identical event schedule analytically so cost models and the executor
can never drift apart.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import ClusterSpec, collective_time
from .diffusion import NoiseSchedule, q_sample, sample_timestep
from .model import (
    ToyDenoiser,
    anchor_text,
    branch_attention,
    branch_qkv,
    output_head,
    parallel_block_forward,
    toy_vae_encode,
)
from .numerics import SeededRng, softmax_rows

BPE = 8  # bytes per element actually simulated (float64)

# Retained-tensor accounting per transformer block, per visual token:
# each of the 3 branches keeps 6 intermediates for the backward pass
# (normed input, q, k, v, attention output, branch output) plus the block
# keeps its input for the residual. Text rows are anchored context that
# any device can regenerate, so they are not counted as stored state.
ACTIVATION_TENSORS_PER_BLOCK = 3 * 6 + 1

_TAG_FRAME_NOISE = 1 << 40
_TAG_VIDEO = 1 << 41
_TAG_PROMPT = 1 << 42
_TAG_TIMESTEP = 1 << 43

SHARD_AXES = ("spatial", "temporal")
ATTENTION_MODES = ("head_parallel", "gather")
TEXT_PLACEMENTS = ("separate", "fused")


@dataclass(frozen=True)
class ShardingPlan:
    """How one iteration is laid out across sp_size logical devices."""

    sp_size: int = 1
    shard_axis: str = "spatial"
    attention: str = "head_parallel"
    text_placement: str = "separate"
    vae_microbatch: int = 1

    def __post_init__(self):
        if self.sp_size < 1:
            raise ValueError(f"sp_size must be >= 1, got {self.sp_size}")
        if self.shard_axis not in SHARD_AXES:
            raise ValueError(f"shard_axis must be one of {SHARD_AXES}")
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.text_placement not in TEXT_PLACEMENTS:
            raise ValueError(f"text_placement must be one of {TEXT_PLACEMENTS}")
        if self.text_placement == "fused" and self.shard_axis != "spatial":
            raise ValueError("fused text placement requires the spatial shard axis")
        if self.vae_microbatch < 1:
            raise ValueError("vae_microbatch must be >= 1")

    def describe(self) -> str:
        return (
            f"sp={self.sp_size} axis={self.shard_axis} "
            f"attn={self.attention} text={self.text_placement}"
        )


@dataclass(frozen=True)
class CommEvent:
    stage: str
    collective: str
    group_size: int
    placement: str
    bytes_per_device: float
    total_sent: float = 0.0

    def key(self) -> tuple:
        """The externally visible identity of the event (CSV columns)."""
        return (
            self.stage,
            self.collective,
            self.group_size,
            self.placement,
            self.bytes_per_device,
        )


@dataclass
class CommLog:
    """Ordered record of every collective one iteration issued."""

    events: list = field(default_factory=list)
    _seq: int = 0

    def record(self, stage, collective, group_size, placement, bytes_per_device,
               total_sent=0.0) -> None:
        self._seq += 1
        self.events.append(CommEvent(
            stage, collective, group_size, placement,
            float(bytes_per_device), float(total_sent),
        ))

    def total_bytes_sent(self, stage_prefix: str = "") -> float:
        return sum(e.total_sent for e in self.events if e.stage.startswith(stage_prefix))

    def replay_time(self, cluster: ClusterSpec) -> float:
        """Alpha-beta cost of the logged schedule on a given cluster."""
        total = 0.0
        for e in self.events:
            bw = cluster.intra_bw if e.placement == "intra" else cluster.inter_bw
            total += collective_time(
                e.collective, e.group_size, e.bytes_per_device, bw, cluster.alpha
            )
        return total

    def rows(self) -> list:
        return [e.key() for e in self.events]


@dataclass
class Batch:
    """One seeded training example: pixels plus an embedded prompt."""

    video: np.ndarray  # [frames, height, width, 3]
    prompt: np.ndarray  # [text_len, dim]
    seed: int


@dataclass
class IterationResult:
    loss: float
    predicted_noise: np.ndarray
    grad_out: np.ndarray
    timestep: int
    log: CommLog
    resident_tokens: list  # visual tokens resident per device after reshard
    owned_text: list  # text rows owned per device (per frame)
    vae_frames: list  # frames encoded per device
    retained_bytes: list  # modeled stored-activation bytes per device


def make_batch(seed: int, frames: int, height: int, width: int,
               text_len: int, dim: int) -> Batch:
    """Deterministic synthetic batch keyed entirely by one seed."""
    base = SeededRng(seed)
    video = base.split(_TAG_VIDEO).uniform((frames, height, width, 3))
    prompt = base.split(_TAG_PROMPT).normal((text_len, dim))
    return Batch(video=video, prompt=prompt, seed=seed)


def frame_noise(seed: int, frame: int, shape) -> np.ndarray:
    """The per-frame noise stream: regenerable anywhere from (seed, frame)."""
    return SeededRng(seed).split(_TAG_FRAME_NOISE | frame).normal(shape)


def draw_timestep(seed: int, steps: int) -> int:
    return sample_timestep(SeededRng(seed).split(_TAG_TIMESTEP), steps)


# ---------------------------------------------------------------------------
# Work division helpers
# ---------------------------------------------------------------------------

def contiguous_bounds(n: int, p: int) -> list:
    """p+1 split points dividing n items into near-equal contiguous runs."""
    if p < 1:
        raise ValueError(f"cannot split into {p} parts")
    return [i * n // p for i in range(p + 1)]


def round_robin_frames(frames: int, p: int) -> list:
    """Deal frame indices to devices the way a data loader would."""
    return [[f for f in range(frames) if f % p == d] for d in range(p)]


def fused_equal_division(text_len: int, visual_len: int, p: int) -> list:
    """Split the concatenated [text | visual] row range into p equal runs.

    Returns per-device (text_rows, visual_rows) counts. Totals are balanced
    to within one row, but the per-modality counts are whatever the cut
    points dictate - early devices soak up the text.
    """
    total = text_len + visual_len
    bounds = contiguous_bounds(total, p)
    out = []
    for d in range(p):
        lo, hi = bounds[d], bounds[d + 1]
        t = max(0, min(text_len, hi) - min(text_len, lo))
        out.append((t, (hi - lo) - t))
    return out


def placement_division(text_len: int, visual_len: int, p: int, placement: str):
    """Per-device (text_counts, visual_counts) for a text placement mode."""
    if placement == "separate":
        tb = contiguous_bounds(text_len, p)
        vb = contiguous_bounds(visual_len, p)
        tcounts = [tb[d + 1] - tb[d] for d in range(p)]
        vcounts = [vb[d + 1] - vb[d] for d in range(p)]
    elif placement == "fused":
        parts = fused_equal_division(text_len, visual_len, p)
        tcounts = [t for t, _ in parts]
        vcounts = [v for _, v in parts]
    else:
        raise ValueError(f"unknown text placement {placement!r}")
    return tcounts, vcounts


def modality_spread(tcounts, vcounts) -> int:
    """Load-balance metric: per-modality (max - min), summed over modalities."""
    return (max(tcounts) - min(tcounts)) + (max(vcounts) - min(vcounts))


def placement_spread(text_len: int, visual_len: int, p: int, placement: str) -> int:
    return modality_spread(*placement_division(text_len, visual_len, p, placement))


def _prefix_bounds(counts) -> list:
    out = [0]
    for c in counts:
        out.append(out[-1] + c)
    return out


# ---------------------------------------------------------------------------
# Resharding between the frame-wise pipeline stage and the sequence axis
# ---------------------------------------------------------------------------

def alltoall_reshard(local_tokens, axis, vbounds, fbounds, frames, p,
                     visual_len, dim):
    """Move frame-sharded token arrays onto the target sequence axis.

    local_tokens: per device, dict {frame -> [visual_len, dim]}.
    Returns (resident, sent_bytes): the per-device resident arrays for the
    target axis, and the exact bytes that crossed devices. Each device only
    sends the slice each peer needs, so the wire volume is ~1/p of what a
    full gather would move.
    """
    resident = []
    sent = 0
    for dst in range(p):
        if axis == "spatial":
            lo, hi = vbounds[dst], vbounds[dst + 1]
            rows = []
            for f in range(frames):
                src = f % p
                chunk = local_tokens[src][f][lo:hi]
                if src != dst:
                    sent += chunk.nbytes
                rows.append(chunk)
            resident.append(np.stack(rows) if rows
                            else np.zeros((0, hi - lo, dim)))
        else:
            lo, hi = fbounds[dst], fbounds[dst + 1]
            rows = []
            for f in range(lo, hi):
                src = f % p
                chunk = local_tokens[src][f]
                if src != dst:
                    sent += chunk.nbytes
                rows.append(chunk)
            resident.append(np.stack(rows) if rows
                            else np.zeros((0, visual_len, dim)))
    return resident, sent


def allgather_then_shard(local_tokens, axis, vbounds, fbounds, frames, p,
                         visual_len, dim):
    """Oracle for the reshard: gather everything everywhere, then slice.

    Mathematically identical residents, but every device ships its whole
    payload to every peer, so the wire volume is (p-1) * total bytes.
    """
    sent = 0
    for src in range(p):
        local = sum(t.nbytes for t in local_tokens[src].values())
        sent += (p - 1) * local
    full = np.stack([local_tokens[f % p][f] for f in range(frames)])
    resident = []
    for dst in range(p):
        if axis == "spatial":
            resident.append(full[:, vbounds[dst]:vbounds[dst + 1], :].copy())
        else:
            resident.append(full[fbounds[dst]:fbounds[dst + 1]].copy())
    return resident, sent


# ---------------------------------------------------------------------------
# Distributed attention cores
# ---------------------------------------------------------------------------

@dataclass
class _Chunk:
    """One device's resident rows of one logical attention sequence.

    A distributed branch call takes, per device, a list of these; it
    returns per device a dict {(seq, chunk_list_index) -> output rows}
    aligned with idx[need_out]. Rows whose need_out is False are static
    context (anchored text): they attend as keys/values but no output is
    transported back for them.
    """

    seq: int
    idx: np.ndarray  # [r] global ordering keys within the sequence
    rows: np.ndarray  # [r, dim] pre-norm inputs
    need_out: np.ndarray  # [r] bool, False for static context rows


def _branch_head_parallel(params, heads, p, chunks_by_dev, stage, log, placement):
    """All-to-all to head shards, attend on full-length sequences, deal back."""
    dim = params.wq.shape[0]
    dh = dim // heads
    hp = heads // p
    col_width = hp * dh  # == dim // p

    # Local, row-parallel half: normalize and project each chunk.
    qkv_by_dev = []
    for chunks in chunks_by_dev:
        qkv_by_dev.append([branch_qkv(params, c.rows) for c in chunks])

    # First exchange: every device re-deals its q/k/v columns by head group.
    payload = [sum(3 * c.rows.nbytes for c in chunks) for chunks in chunks_by_dev]
    sent = sum(b * (p - 1) / p for b in payload)
    log.record(stage, "alltoall", p, placement, max(payload), sent)

    seq_ids = sorted({c.seq for chunks in chunks_by_dev for c in chunks})
    # Assemble, per head group, every sequence in global row order.
    out_cols = {}  # (group, seq) -> [S, col_width]
    gathered = {}  # seq -> (order keys, owners, positions, need)
    for seq in seq_ids:
        idx_parts, own_parts, pos_parts, need_parts = [], [], [], []
        for dev, chunks in enumerate(chunks_by_dev):
            for ci, c in enumerate(chunks):
                if c.seq != seq:
                    continue
                idx_parts.append(c.idx)
                own_parts.append(np.full(c.idx.size, dev))
                pos_parts.append(np.full(c.idx.size, ci))
                need_parts.append(c.need_out)
        idx = np.concatenate(idx_parts)
        order = np.argsort(idx, kind="stable")
        gathered[seq] = (
            order,
            np.concatenate(own_parts)[order],
            np.concatenate(pos_parts)[order],
            np.concatenate(need_parts)[order],
        )

    for g in range(p):
        cols = slice(g * col_width, (g + 1) * col_width)
        for seq in seq_ids:
            order = gathered[seq][0]
            q_parts, k_parts, v_parts = [], [], []
            for dev, chunks in enumerate(chunks_by_dev):
                for ci, c in enumerate(chunks):
                    if c.seq != seq:
                        continue
                    q, k, v = qkv_by_dev[dev][ci]
                    q_parts.append(q[:, cols])
                    k_parts.append(k[:, cols])
                    v_parts.append(v[:, cols])
            Q = np.concatenate(q_parts)[order]
            K = np.concatenate(k_parts)[order]
            V = np.concatenate(v_parts)[order]
            out = np.empty_like(Q)
            for h in range(hp):
                sl = slice(h * dh, (h + 1) * dh)
                scores = (Q[:, sl] @ K[:, sl].T) / np.sqrt(dh)
                out[:, sl] = softmax_rows(scores) @ V[:, sl]
            out_cols[(g, seq)] = out

    # Second exchange: ship output columns of needed rows back to owners.
    rows_needed = sum(int(gathered[seq][3].sum()) for seq in seq_ids)
    resident_out = rows_needed * col_width * BPE
    sent2 = 0.0
    results = [dict() for _ in range(p)]
    for seq in seq_ids:
        order, owners, positions, need = gathered[seq]
        for dev in range(p):
            mask = (owners == dev) & need
            if not mask.any():
                continue
            blocks = [out_cols[(g, seq)][mask] for g in range(p)]
            sent2 += sum(b.nbytes for g, b in enumerate(blocks) if g != dev)
            full_rows = np.concatenate(blocks, axis=1)
            for ci in np.unique(positions[mask]):
                sub = positions[mask] == ci
                results[dev][(seq, int(ci))] = full_rows[sub] @ params.wo
    log.record(stage, "alltoall", p, placement, resident_out, sent2)
    return results


def _branch_gather(params, heads, p, chunks_by_dev, stage, log, placement):
    """All-gather k/v everywhere; each device attends for its own rows."""
    qkv_by_dev = []
    for chunks in chunks_by_dev:
        qkv_by_dev.append([branch_qkv(params, c.rows) for c in chunks])

    payload = [sum(2 * c.rows.nbytes for c in chunks) for chunks in chunks_by_dev]
    log.record(stage, "allgather", p, placement, max(payload),
               (p - 1) * sum(payload))

    seq_ids = sorted({c.seq for chunks in chunks_by_dev for c in chunks})
    full_kv = {}
    for seq in seq_ids:
        idx_parts, k_parts, v_parts = [], [], []
        for dev, chunks in enumerate(chunks_by_dev):
            for ci, c in enumerate(chunks):
                if c.seq != seq:
                    continue
                _, k, v = qkv_by_dev[dev][ci]
                idx_parts.append(c.idx)
                k_parts.append(k)
                v_parts.append(v)
        order = np.argsort(np.concatenate(idx_parts), kind="stable")
        full_kv[seq] = (
            np.concatenate(k_parts)[order],
            np.concatenate(v_parts)[order],
        )

    dim = params.wq.shape[0]
    dh = dim // heads
    results = [dict() for _ in range(p)]
    for dev, chunks in enumerate(chunks_by_dev):
        for ci, c in enumerate(chunks):
            if not c.need_out.any():
                continue
            q = qkv_by_dev[dev][ci][0][c.need_out]
            K, V = full_kv[c.seq]
            out = np.empty_like(q)
            for h in range(heads):
                sl = slice(h * dh, (h + 1) * dh)
                scores = (q[:, sl] @ K[:, sl].T) / np.sqrt(dh)
                out[:, sl] = softmax_rows(scores) @ V[:, sl]
            results[dev][(c.seq, ci)] = out @ params.wo
    return results


def _run_branch(plan, params, heads, chunks_by_dev, stage, log, placement):
    p = plan.sp_size
    if plan.attention == "head_parallel":
        return _branch_head_parallel(params, heads, p, chunks_by_dev, stage, log, placement)
    return _branch_gather(params, heads, p, chunks_by_dev, stage, log, placement)


# ---------------------------------------------------------------------------
# Whole iterations
# ---------------------------------------------------------------------------

def reference_iteration(model: ToyDenoiser, schedule: NoiseSchedule,
                        batch: Batch, t: int | None = None) -> IterationResult:
    """Single-device ground truth for one training iteration."""
    frames, height, width, _ = batch.video.shape
    if t is None:
        t = draw_timestep(batch.seed, schedule.steps)
    latents = np.stack([toy_vae_encode(batch.video[f], model.spec)
                        for f in range(frames)])
    noise = np.stack([frame_noise(batch.seed, f, latents[f].shape)
                      for f in range(frames)])
    noisy = np.stack([q_sample(schedule, latents[f], t, noise[f])
                      for f in range(frames)])
    states = model.head_states(noisy, t, batch.prompt)
    h, w, c = latents.shape[1:]
    loss, grad, pred = output_head(states, model.w_out, h, w, c,
                                   model.spec.patch, noise)
    total_tokens = frames * model.spec.tokens_per_frame(height, width)
    retained = [ACTIVATION_TENSORS_PER_BLOCK * total_tokens * model.dim
                * BPE * model.depth]
    return IterationResult(
        loss=loss, predicted_noise=pred, grad_out=grad, timestep=t,
        log=CommLog(), resident_tokens=[total_tokens],
        owned_text=[batch.prompt.shape[0]], vae_frames=[frames],
        retained_bytes=retained,
    )


def _sp_placement(p: int, cluster: ClusterSpec) -> str:
    """Sequence-parallel groups are packed onto nodes from rank 0 up."""
    return "intra" if p <= cluster.devices_per_node else "inter"


def run_sp_iteration(model: ToyDenoiser, schedule: NoiseSchedule, batch: Batch,
                     plan: ShardingPlan, cluster: ClusterSpec | None = None,
                     t: int | None = None) -> IterationResult:
    """Execute one iteration sharded over plan.sp_size logical devices."""
    if cluster is None:
        cluster = ClusterSpec()
    p = plan.sp_size
    frames, height, width, _ = batch.video.shape
    spec = model.spec
    visual_len = spec.tokens_per_frame(height, width)
    text_len = batch.prompt.shape[0]
    dim = model.dim
    if p > cluster.total_devices:
        raise ValueError(
            f"plan wants {p} devices but the cluster has {cluster.total_devices}"
        )
    if p > visual_len:
        raise ValueError(
            f"cannot spread {visual_len} visual tokens per frame over {p} devices"
        )
    if plan.attention == "head_parallel" and p > 1 and model.heads % p != 0:
        raise ValueError(
            f"head-parallel attention needs sp_size to divide "
            f"{model.heads} heads, got {p}"
        )
    if t is None:
        t = draw_timestep(batch.seed, schedule.steps)
    placement = _sp_placement(p, cluster)
    log = CommLog()

    # Stage 1: frame-wise encode, noise, and embed, no communication.
    deal = round_robin_frames(frames, p)
    local_tokens = [dict() for _ in range(p)]
    for dev in range(p):
        fs = deal[dev]
        for start in range(0, len(fs), plan.vae_microbatch):
            for f in fs[start:start + plan.vae_microbatch]:
                lat = toy_vae_encode(batch.video[f], spec)
                noisy = q_sample(schedule, lat, t,
                                 frame_noise(batch.seed, f, lat.shape))
                local_tokens[dev][f] = model.embed_frame(noisy, f, t)

    # Stage 2: reshard onto the sequence axis.
    tcounts, vcounts = placement_division(text_len, visual_len, p, plan.text_placement)
    vbounds = _prefix_bounds(vcounts)
    fbounds = contiguous_bounds(frames, p)
    if p == 1:
        resident = [np.stack([local_tokens[0][f] for f in range(frames)])]
    else:
        resident, sent = alltoall_reshard(
            local_tokens, plan.shard_axis, vbounds, fbounds, frames, p,
            visual_len, dim)
        max_resident = max(sum(tok.nbytes for tok in local_tokens[d].values())
                           for d in range(p))
        log.record("reshard", "alltoall", p, placement, max_resident, sent)

    # Stage 3: transformer blocks.
    stride = text_len + visual_len
    for bi, block in enumerate(model.blocks):
        if p == 1:
            text = anchor_text(batch.prompt, frames)
            resident[0] = resident[0] + parallel_block_forward(
                block, resident[0], text, model.heads)
            continue

        updates = [np.zeros_like(r) for r in resident]
        if plan.shard_axis == "spatial":
            # Spatial branch: per-frame sequences, split by position.
            chunks_by_dev = []
            for dev in range(p):
                lo = vbounds[dev]
                chunks = [
                    _Chunk(seq=f, idx=np.arange(lo, lo + vcounts[dev]),
                           rows=resident[dev][f],
                           need_out=np.ones(vcounts[dev], dtype=bool))
                    for f in range(frames)
                ]
                chunks_by_dev.append(chunks)
            outs = _run_branch(plan, block.spatial, model.heads, chunks_by_dev,
                               f"block{bi}.spatial", log, placement)
            for dev in range(p):
                if vcounts[dev] == 0:
                    continue
                for f in range(frames):
                    # chunk list index == frame index by construction
                    updates[dev][f] += outs[dev][(f, f)]

            # Temporal branch: fully local, each device has all frames.
            for dev in range(p):
                for j in range(vcounts[dev]):
                    updates[dev][:, j, :] += branch_attention(
                        block.temporal, resident[dev][:, j, :], model.heads)

            # Full-sequence branch: one interleaved text+visual sequence.
            tbounds = _prefix_bounds(tcounts)
            chunks_by_dev = []
            for dev in range(p):
                chunks = []
                tlo, thi = tbounds[dev], tbounds[dev + 1]
                vlo = vbounds[dev]
                for f in range(frames):
                    base = f * stride
                    if thi > tlo:
                        chunks.append(_Chunk(
                            seq=0, idx=np.arange(base + tlo, base + thi),
                            rows=batch.prompt[tlo:thi],
                            need_out=np.zeros(thi - tlo, dtype=bool)))
                    chunks.append(_Chunk(
                        seq=0,
                        idx=np.arange(base + text_len + vlo,
                                      base + text_len + vlo + vcounts[dev]),
                        rows=resident[dev][f],
                        need_out=np.ones(vcounts[dev], dtype=bool)))
                chunks_by_dev.append(chunks)
            outs = _run_branch(plan, block.fullseq, model.heads, chunks_by_dev,
                               f"block{bi}.fullseq", log, placement)
            for dev in range(p):
                for ci, c in enumerate(chunks_by_dev[dev]):
                    if not c.need_out.any():
                        continue
                    f = int(c.idx[0]) // stride
                    updates[dev][f] += outs[dev][(0, ci)]
        else:
            # Temporal axis: whole frames resident per device.
            nloc = [fbounds[d + 1] - fbounds[d] for d in range(p)]

            # Spatial branch: local, frame sequences are intact.
            for dev in range(p):
                for i in range(nloc[dev]):
                    updates[dev][i] += branch_attention(
                        block.spatial, resident[dev][i], model.heads)

            # Temporal branch: one sequence per position, split over frames.
            chunks_by_dev = []
            for dev in range(p):
                lo = fbounds[dev]
                chunks = [
                    _Chunk(seq=j, idx=np.arange(lo, lo + nloc[dev]),
                           rows=resident[dev][:, j, :],
                           need_out=np.ones(nloc[dev], dtype=bool))
                    for j in range(visual_len)
                ]
                chunks_by_dev.append(chunks)
            outs = _run_branch(plan, block.temporal, model.heads, chunks_by_dev,
                               f"block{bi}.temporal", log, placement)
            for dev in range(p):
                for j in range(visual_len):
                    if nloc[dev]:
                        updates[dev][:, j, :] += outs[dev][(j, j)]

            # Full-sequence branch: contiguous interleaved runs per device.
            chunks_by_dev = []
            for dev in range(p):
                chunks = []
                for i in range(nloc[dev]):
                    f = fbounds[dev] + i
                    base = f * stride
                    chunks.append(_Chunk(
                        seq=0, idx=np.arange(base, base + text_len),
                        rows=batch.prompt,
                        need_out=np.zeros(text_len, dtype=bool)))
                    chunks.append(_Chunk(
                        seq=0, idx=np.arange(base + text_len, base + stride),
                        rows=resident[dev][i],
                        need_out=np.ones(visual_len, dtype=bool)))
                chunks_by_dev.append(chunks)
            outs = _run_branch(plan, block.fullseq, model.heads, chunks_by_dev,
                               f"block{bi}.fullseq", log, placement)
            for dev in range(p):
                for ci, c in enumerate(chunks_by_dev[dev]):
                    if not c.need_out.any():
                        continue
                    i = int(c.idx[0]) // stride - fbounds[dev]
                    updates[dev][i] += outs[dev][(0, ci)]

        for dev in range(p):
            resident[dev] = resident[dev] + updates[dev]

    # Stage 4: all-gather the full sequence back onto every device.
    if p == 1:
        states = resident[0]
    else:
        payloads = [r.nbytes for r in resident]
        log.record("gather", "allgather", p, placement, max(payloads),
                   (p - 1) * sum(payloads))
        if plan.shard_axis == "spatial":
            states = np.concatenate(resident, axis=1)
        else:
            states = np.concatenate([r for r in resident if r.shape[0]], axis=0)

    # Stage 5: replicated output head and loss.
    lat_shape = toy_vae_encode(batch.video[0], spec).shape
    noise = np.stack([frame_noise(batch.seed, f, lat_shape)
                      for f in range(frames)])
    h, w, c = lat_shape
    loss, grad, pred = output_head(states, model.w_out, h, w, c, spec.patch, noise)

    resident_tokens = ([frames * v for v in vcounts]
                       if plan.shard_axis == "spatial"
                       else [(fbounds[d + 1] - fbounds[d]) * visual_len
                             for d in range(p)])
    retained = [ACTIVATION_TENSORS_PER_BLOCK * rt * dim * BPE * model.depth
                for rt in resident_tokens]
    return IterationResult(
        loss=loss, predicted_noise=pred, grad_out=grad, timestep=t, log=log,
        resident_tokens=resident_tokens,
        owned_text=list(tcounts) if p > 1 else [text_len],
        vae_frames=[len(fs) for fs in deal],
        retained_bytes=retained,
    )


# ---------------------------------------------------------------------------
# Analytic event schedule (shared with the planner)
# ---------------------------------------------------------------------------

def comm_plan(plan: ShardingPlan, frames: int, text_len: int, visual_len: int,
              dim: int, heads: int, depth: int, cluster: ClusterSpec,
              bytes_per_element: int = BPE) -> list:
    """The exact collective schedule run_sp_iteration will log.

    Built without executing anything, from the same division helpers, so a
    cost model priced on these events is priced on what the executor does.
    """
    p = plan.sp_size
    if p <= 1:
        return []
    bpe = bytes_per_element
    placement = _sp_placement(p, cluster)
    tcounts, vcounts = placement_division(text_len, visual_len, p, plan.text_placement)
    fsizes = [len(fs) for fs in round_robin_frames(frames, p)]
    fbounds = contiguous_bounds(frames, p)
    nloc = [fbounds[d + 1] - fbounds[d] for d in range(p)]
    col_width = dim // p if plan.attention == "head_parallel" else dim

    events = []

    def add(stage, collective, b):
        events.append(CommEvent(stage, collective, p, placement, float(b)))

    add("reshard", "alltoall", max(fsizes) * visual_len * dim * bpe)

    def branch_events(stage, rows_per_dev, needed_rows):
        if plan.attention == "head_parallel":
            add(stage, "alltoall", 3 * max(rows_per_dev) * dim * bpe)
            add(stage, "alltoall", needed_rows * col_width * bpe)
        else:
            add(stage, "allgather", 2 * max(rows_per_dev) * dim * bpe)

    for bi in range(depth):
        if plan.shard_axis == "spatial":
            branch_events(f"block{bi}.spatial",
                          [frames * v for v in vcounts], frames * visual_len)
            branch_events(f"block{bi}.fullseq",
                          [frames * (t + v) for t, v in zip(tcounts, vcounts)],
                          frames * visual_len)
        else:
            branch_events(f"block{bi}.temporal",
                          [n * visual_len for n in nloc], frames * visual_len)
            branch_events(f"block{bi}.fullseq",
                          [n * (text_len + visual_len) for n in nloc],
                          frames * visual_len)

    if plan.shard_axis == "spatial":
        final = max(frames * v for v in vcounts) * dim * bpe
    else:
        final = max(nloc) * visual_len * dim * bpe
    add("gather", "allgather", final)
    return events


def comm_plan_time(events, cluster: ClusterSpec) -> float:
    """Alpha-beta cost of an analytic schedule (same math as CommLog.replay)."""
    total = 0.0
    for e in events:
        bw = cluster.intra_bw if e.placement == "intra" else cluster.inter_bw
        total += collective_time(e.collective, e.group_size,
                                 e.bytes_per_device, bw, cluster.alpha)
    return total
