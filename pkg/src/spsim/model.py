"""Toy multimodal denoiser acting on videos of latent frame grids.

The network is deliberately tiny but structurally faithful to the systems
being modeled: frames are encoded to latents, patchified into visual
tokens, and pushed through transformer blocks that run three attention
branches in parallel and sum them:

  * spatial   - attention within each frame's tokens
  * temporal  - attention across frames at a fixed spatial position
  * full sequence - attention over text and visual tokens of all frames,
    interleaved per frame, with every frame's text slots anchored to the
    frame-0 text (a single prompt shared by the whole clip)

Text rows are static context: blocks read them but only visual tokens are
updated. That, plus the anchoring, is what lets a sequence-sharded
executor regenerate any text row locally instead of communicating it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, attention


@dataclass(frozen=True)
class PatchSpec:
    """Geometry linking pixel frames to visual tokens."""

    vae_downsample: int = 8
    patch: int = 2
    latent_channels: int = 4

    def latent_hw(self, height: int, width: int) -> tuple[int, int]:
        d = self.vae_downsample
        return (math.ceil(height / d), math.ceil(width / d))

    def tokens_per_frame(self, height: int, width: int) -> int:
        h, w = self.latent_hw(height, width)
        p = self.patch
        return math.ceil(h / p) * math.ceil(w / p)


def seq_len(frames: int, height: int, width: int, spec: PatchSpec = PatchSpec()) -> int:
    """Visual sequence length for a clip: frames x patch-grid tokens."""
    if frames < 1 or height < 1 or width < 1:
        raise ValueError(f"bad clip shape ({frames}, {height}, {width})")
    return frames * spec.tokens_per_frame(height, width)


def patchify(latent: np.ndarray, patch: int) -> np.ndarray:
    """[h, w, c] -> [tokens, patch*patch*c], zero-padding ragged edges.

    Tokens are ordered row-major over the patch grid.
    """
    h, w, c = latent.shape
    gh, gw = math.ceil(h / patch), math.ceil(w / patch)
    padded = np.zeros((gh * patch, gw * patch, c))
    padded[:h, :w] = latent
    # [gh, patch, gw, patch, c] -> [gh, gw, patch, patch, c]
    tiles = padded.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * gw, patch * patch * c)


def unpatchify(tokens: np.ndarray, h: int, w: int, c: int, patch: int) -> np.ndarray:
    """Invert patchify, cropping any zero padding back off."""
    gh, gw = math.ceil(h / patch), math.ceil(w / patch)
    if tokens.shape != (gh * gw, patch * patch * c):
        raise ValueError(
            f"token array {tokens.shape} does not match a "
            f"({h}, {w}, {c}) grid at patch {patch}"
        )
    tiles = tokens.reshape(gh, gw, patch, patch, c).transpose(0, 2, 1, 3, 4)
    return tiles.reshape(gh * patch, gw * patch, c)[:h, :w]


def sinusoidal_embedding(position: float, dim: int) -> np.ndarray:
    """Classic sin/cos embedding of a scalar position."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = position * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def layer_norm(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    var = np.var(x, axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


@dataclass
class MultimodalSequence:
    """Per-frame text and visual token arrays, [frames, len, dim] each."""

    text: np.ndarray
    visual: np.ndarray

    def __post_init__(self):
        if self.text.ndim != 3 or self.visual.ndim != 3:
            raise ValueError("text and visual must be [frames, len, dim]")
        if self.text.shape[0] != self.visual.shape[0]:
            raise ValueError(
                f"frame counts disagree: text {self.text.shape[0]} "
                f"vs visual {self.visual.shape[0]}"
            )
        if self.text.shape[2] != self.visual.shape[2]:
            raise ValueError("text and visual feature dims disagree")

    @property
    def frames(self) -> int:
        return self.visual.shape[0]

    @property
    def text_len(self) -> int:
        return self.text.shape[1]

    @property
    def visual_len(self) -> int:
        return self.visual.shape[1]


def anchor_text(prompt: np.ndarray, frames: int) -> np.ndarray:
    """Broadcast one prompt [len, dim] into every frame's text slots."""
    if prompt.ndim != 2:
        raise ValueError("prompt must be [len, dim]")
    return np.broadcast_to(prompt, (frames,) + prompt.shape).copy()


def interleave_checkerboard(text: np.ndarray, visual: np.ndarray) -> np.ndarray:
    """Lay out [t_0 v_0 t_1 v_1 ...] as one flat [S, dim] sequence."""
    f = text.shape[0]
    rows = []
    for i in range(f):
        rows.append(text[i])
        rows.append(visual[i])
    return np.concatenate(rows, axis=0)


def deinterleave_visual(seq: np.ndarray, frames: int, text_len: int, visual_len: int) -> np.ndarray:
    """Pull the visual rows back out of an interleaved sequence."""
    stride = text_len + visual_len
    if seq.shape[0] != frames * stride:
        raise ValueError(
            f"sequence of {seq.shape[0]} rows does not tile as "
            f"{frames} x ({text_len} + {visual_len})"
        )
    out = np.empty((frames, visual_len, seq.shape[1]))
    for i in range(frames):
        out[i] = seq[i * stride + text_len:(i + 1) * stride]
    return out


@dataclass
class BranchParams:
    """One attention branch: layernorm affine + q/k/v/out projections."""

    gamma: np.ndarray
    beta: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @staticmethod
    def init(rng: SeededRng, dim: int) -> "BranchParams":
        s = 1.0 / math.sqrt(dim)
        return BranchParams(
            gamma=1.0 + 0.02 * rng.normal(dim),
            beta=0.02 * rng.normal(dim),
            wq=s * rng.normal((dim, dim)),
            wk=s * rng.normal((dim, dim)),
            wv=s * rng.normal((dim, dim)),
            wo=s * rng.normal((dim, dim)),
        )


def branch_qkv(params: BranchParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-local half of a branch: normalize then project to q/k/v."""
    normed = layer_norm(x) * params.gamma + params.beta
    return normed @ params.wq, normed @ params.wk, normed @ params.wv


def branch_attention(params: BranchParams, x: np.ndarray, heads: int) -> np.ndarray:
    """Full branch on a resident [s, dim] sequence."""
    q, k, v = branch_qkv(params, x)
    return attention(q, k, v, heads) @ params.wo


@dataclass
class BlockParams:
    spatial: BranchParams
    temporal: BranchParams
    fullseq: BranchParams

    @staticmethod
    def init(rng: SeededRng, dim: int) -> "BlockParams":
        return BlockParams(
            spatial=BranchParams.init(rng.split(101), dim),
            temporal=BranchParams.init(rng.split(202), dim),
            fullseq=BranchParams.init(rng.split(303), dim),
        )


def reshape_spatial(x: np.ndarray) -> np.ndarray:
    """[B, F, L, D] -> [B*F, L, D]: one attention row-block per frame.

    Pure relabeling: element (b, f, l, d) lands at (b*F + f, l, d).
    """
    if x.ndim != 4:
        raise ValueError(f"expected [B, F, L, D], got {x.shape}")
    b, f, l, d = x.shape
    return x.reshape(b * f, l, d)


def reshape_temporal(x: np.ndarray) -> np.ndarray:
    """[B, F, L, D] -> [B*L, F, D]: one attention row-block per position.

    Element (b, f, l, d) lands at (b*L + l, f, d).
    """
    if x.ndim != 4:
        raise ValueError(f"expected [B, F, L, D], got {x.shape}")
    b, f, l, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b * l, f, d)


def spatial_branch(params: BranchParams, visual: np.ndarray, heads: int) -> np.ndarray:
    """Attention over each frame's tokens independently."""
    seqs = reshape_spatial(visual[None])
    return np.stack(
        [branch_attention(params, seqs[f], heads) for f in range(seqs.shape[0])]
    )


def temporal_branch(params: BranchParams, visual: np.ndarray, heads: int) -> np.ndarray:
    """Attention across frames at each spatial position independently."""
    per_pos = reshape_temporal(visual[None])  # [visual_len, frames, dim]
    out = np.stack(
        [branch_attention(params, per_pos[i], heads) for i in range(per_pos.shape[0])]
    )
    return out.transpose(1, 0, 2)


def full_sequence_attention(
    params: BranchParams, text: np.ndarray, visual: np.ndarray, heads: int
) -> np.ndarray:
    """Joint attention over the interleaved text+visual sequence.

    Text slots are anchored: every frame attends to the frame-0 text,
    whatever the caller put in later frames. Only the visual rows of the
    result are returned; text is context, not state.
    """
    frames = visual.shape[0]
    anchored = anchor_text(text[0], frames)
    seq = interleave_checkerboard(anchored, visual)
    out = branch_attention(params, seq, heads)
    return deinterleave_visual(out, frames, text.shape[1], visual.shape[1])


def parallel_block_forward(
    block: BlockParams, visual: np.ndarray, text: np.ndarray, heads: int
) -> np.ndarray:
    """Sum of the three branches. The caller adds the residual."""
    return (
        spatial_branch(block.spatial, visual, heads)
        + temporal_branch(block.temporal, visual, heads)
        + full_sequence_attention(block.fullseq, text, visual, heads)
    )


@dataclass
class ToyDenoiser:
    """Patch-in / blocks / patch-out noise predictor over latent videos."""

    spec: PatchSpec
    dim: int
    heads: int
    w_in: np.ndarray
    w_out: np.ndarray
    blocks: list[BlockParams] = field(default_factory=list)

    @staticmethod
    def init(rng: SeededRng, spec: PatchSpec, dim: int, heads: int, depth: int) -> "ToyDenoiser":
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        pd = spec.patch * spec.patch * spec.latent_channels
        return ToyDenoiser(
            spec=spec,
            dim=dim,
            heads=heads,
            w_in=rng.split(1).normal((pd, dim)) / math.sqrt(pd),
            w_out=rng.split(2).normal((dim, pd)) / math.sqrt(dim),
            blocks=[BlockParams.init(rng.split(1000 + i), dim) for i in range(depth)],
        )

    @property
    def depth(self) -> int:
        return len(self.blocks)

    def embed_frame(self, latent: np.ndarray, frame_index: int, t: int) -> np.ndarray:
        """Patchify one latent frame and add positional + time signals.

        Positions are global over the clip (frame offset + token index), so
        a device holding an arbitrary subset of frames computes the exact
        embeddings the single-device path would.
        """
        tokens = patchify(latent, self.spec.patch) @ self.w_in
        n = tokens.shape[0]
        for i in range(n):
            tokens[i] += sinusoidal_embedding(frame_index * n + i, self.dim)
        return tokens + sinusoidal_embedding(float(t), self.dim)

    def head_states(self, latents: np.ndarray, t: int, prompt: np.ndarray) -> np.ndarray:
        """Run embedding + all blocks; return pre-output states [F, Lv, dim]."""
        frames = latents.shape[0]
        x = np.stack(
            [self.embed_frame(latents[f], f, t) for f in range(frames)]
        )
        text = anchor_text(prompt, frames)
        for block in self.blocks:
            x = x + parallel_block_forward(block, x, text, self.heads)
        return x

    def forward(self, latents: np.ndarray, t: int, prompt: np.ndarray) -> np.ndarray:
        """Predict the noise in a latent video [F, h, w, c]."""
        _, h, w, c = latents.shape
        x = self.head_states(latents, t, prompt)
        return np.stack(
            [unpatchify(x[f] @ self.w_out, h, w, c, self.spec.patch) for f in range(x.shape[0])]
        )

    def loss_and_output_grad(
        self,
        latents: np.ndarray,
        t: int,
        prompt: np.ndarray,
        true_noise: np.ndarray,
    ) -> tuple[float, np.ndarray]:
        """Training loss plus the exact gradient of it w.r.t. w_out."""
        states = self.head_states(latents, t, prompt)
        h, w, c = latents.shape[1:]
        loss, grad, _ = output_head(
            states, self.w_out, h, w, c, self.spec.patch, true_noise
        )
        return loss, grad


def output_head(
    states: np.ndarray,
    w_out: np.ndarray,
    h: int,
    w: int,
    c: int,
    patch: int,
    true_noise: np.ndarray,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Project token states to noise predictions; return loss, grad, pred.

    d(mse)/d(w_out) = sum_f h_f^T (2/N (pred_f - true_f)), with the
    residual patchified so padded token slots contribute zero, matching
    the crop in unpatchify.
    """
    frames = states.shape[0]
    n_elems = true_noise.size
    loss_acc = 0.0
    grad = np.zeros_like(w_out)
    preds = []
    for f in range(frames):
        pred = unpatchify(states[f] @ w_out, h, w, c, patch)
        preds.append(pred)
        resid = pred - true_noise[f]
        loss_acc += float(np.sum(resid * resid))
        dY = patchify(2.0 * resid / n_elems, patch)
        grad += states[f].T @ dY
    return loss_acc / n_elems, grad, np.stack(preds)


def toy_vae_encode(frame: np.ndarray, spec: PatchSpec = PatchSpec()) -> np.ndarray:
    """Deterministic stand-in encoder: 8x block-average + fixed channel mix.

    [h, w, 3] pixels -> [ceil(h/8), ceil(w/8), latent_channels]. Ragged
    edges are zero-padded before pooling; the channel mix is a fixed
    cosine basis so every caller gets the same latents with no state.
    """
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ValueError(f"expected [h, w, 3] pixels, got {frame.shape}")
    d = spec.vae_downsample
    h, w, _ = frame.shape
    gh, gw = math.ceil(h / d), math.ceil(w / d)
    padded = np.zeros((gh * d, gw * d, 3))
    padded[:h, :w] = frame
    pooled = padded.reshape(gh, d, gw, d, 3).mean(axis=(1, 3))
    return pooled @ _channel_mix(spec.latent_channels)


def _channel_mix(channels: int) -> np.ndarray:
    """Fixed [3, channels] cosine projection; no learned state anywhere."""
    j = np.arange(3)[:, None]
    i = np.arange(channels)[None, :]
    return math.sqrt(2.0 / 3.0) * np.cos(math.pi * (2 * j + 1) * i / 6.0)
