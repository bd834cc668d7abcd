"""Spatio-temporal context extraction over aligned video feature grids.

A video is a time-major feature grid (t, ..., C, D): t frames, C channel
positions per frame, D features per position, with interior axes acting as
batch dimensions. One frame index is designated current. Three arrangements
turn a video into a context map aligned with the current frame's C x D grid:

  * temporal-only: mean-pool positions per frame, scan the t pooled tokens,
    read the current step, broadcast it to every position;
  * divided space-time: scan each position's own t-step history, take the
    current frame of that stage, then scan across its positions in raster
    order;
  * joint space-time: flatten all t*C tokens frame-major, add a learned
    per-frame embedding, scan once, slice the current frame's tokens back
    out.

Each arrangement runs on a high-rate branch (every frame) and a low-rate
branch (frames subsampled by a stride anchored at the current frame), with
independent parameters per branch. Every scan block sits in the usual
pre-norm residual arrangement, x + block(rms_norm(x)): the gated blocks
are not scale-stable on their own, and without the identity path a fresh
block buries its input under an arbitrary mixing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from hmba.tensor import Tensor, rms_norm
from hmba.ssm import BiMambaBlock, init_bi_mamba_block

__all__ = [
    "VideoFeatures", "TemporalEmbedding", "ContextFeature",
    "temporal_resample", "TMamba", "DstMamba", "JstMamba",
    "ContextExtractor", "init_context_extractor",
    "GRANULARITIES", "BRANCHES",
]

GRANULARITIES = ("t", "dst", "jst")
BRANCHES = ("high", "low")


@dataclass
class VideoFeatures:
    """Aligned per-frame features plus the index of the current frame."""
    frames: Tensor          # (t, ..., C, D)
    current_index: int

    def __post_init__(self) -> None:
        if self.frames.ndim < 3:
            raise ValueError(
                f"video features need shape (t, ..., C, D), got {self.frames.shape}")
        t = self.frames.shape[0]
        if t < 1:
            raise ValueError("video needs at least one frame")
        if not 0 <= self.current_index < t:
            raise ValueError(
                f"current_index {self.current_index} outside [0, {t})")

    @property
    def t(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[-2]

    @property
    def d(self) -> int:
        return self.frames.shape[-1]


@dataclass
class TemporalEmbedding:
    """Learned additive per-frame token, one row per supported frame index."""
    table: Tensor           # (t_max, d)

    @property
    def t_max(self) -> int:
        return self.table.shape[0]


@dataclass
class ContextFeature:
    """A context map aligned to the current frame grid, labeled with the
    branch and granularity that produced it."""
    map: Tensor             # (..., C, D)
    granularity: str
    branch: str


def temporal_resample(video: VideoFeatures, stride: int) -> VideoFeatures:
    """Keep every stride-th frame walking backward from the current frame.

    The current frame always survives; kept indices are re-sorted ascending
    and current_index is remapped. stride larger than t degenerates to a
    single-frame video.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    kept = sorted(range(video.current_index, -1, -stride))
    frames = video.frames.index_rows(np.array(kept, dtype=np.intp))
    return VideoFeatures(frames, kept.index(video.current_index))


def _current_slice(seq: Tensor, index: int) -> Tensor:
    """Drop axis 0 at a single index: (T, ...) -> (...)."""
    return seq.narrow(0, index, 1).reshape(seq.shape[1:])


@dataclass
class TMamba:
    """Temporal-only context: one pooled token per frame."""
    block: BiMambaBlock

    def __call__(self, video: VideoFeatures, scan: str = "parallel") -> Tensor:
        pooled = video.frames.mean(axis=-2)              # (t, ..., D)
        # static content survives position pooling and buries what changes
        # under a ~1/C-amplitude floor; centering over the clip removes the
        # pedestal so the entry norm rescales the change signal itself to
        # the unit working scale the block's gates expect. The current-frame
        # content the pedestal carried is already the fusion residual.
        centered = pooled - pooled.mean(axis=0, keepdims=True)
        normed = rms_norm(centered)
        out = normed + self.block(normed, scan=scan)
        cur = _current_slice(out, video.current_index)  # (..., D)
        wide = cur.reshape(*cur.shape[:-1], 1, cur.shape[-1])
        return wide.broadcast_to((*cur.shape[:-1], video.channels, cur.shape[-1]))

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.block.named_params(prefix + "block.")


@dataclass
class DstMamba:
    """Divided space-time context: per-position history scan, then a raster
    scan across positions of the current frame's stage output."""
    temporal_block: BiMambaBlock
    spatial_block: BiMambaBlock

    def temporal_stage(self, video: VideoFeatures,
                       scan: str = "parallel") -> Tensor:
        # positions are independent here: the C axis rides along as batch.
        # Per-position clip centering strips each position's static content
        # so the history scan works on what actually changes; the residual
        # carries the centered stream too, handing the spatial stage a
        # change-saliency map rather than appearance it already gets from
        # the fusion residual.
        # eps well above the default: a position that never changes centers
        # to an exactly-zero row, and the norm's gradient there scales like
        # eps**-0.5
        centered = rms_norm(video.frames
                            - video.frames.mean(axis=0, keepdims=True),
                            eps=1e-2)
        return centered + self.temporal_block(centered, scan=scan)

    def __call__(self, video: VideoFeatures, scan: str = "parallel") -> Tensor:
        stage = self.temporal_stage(video, scan=scan)
        cur = _current_slice(stage, video.current_index)   # (..., C, D)
        seq = cur.moveaxis(-2, 0)                           # (C, ..., D)
        out = seq + self.spatial_block(rms_norm(seq), scan=scan)
        return out.moveaxis(0, -2)

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return (self.temporal_block.named_params(prefix + "temporal.")
                + self.spatial_block.named_params(prefix + "spatial."))


@dataclass
class JstMamba:
    """Joint space-time context: one scan over all t*C tokens, frame-major."""
    block: BiMambaBlock

    def __call__(self, video: VideoFeatures, te: TemporalEmbedding,
                 scan: str = "parallel") -> Tensor:
        t, c, d = video.t, video.channels, video.d
        if t > te.t_max:
            raise ValueError(
                f"video has {t} frames but temporal embedding supports {te.t_max}")
        rows = te.table.narrow(0, 0, t)
        rows = rows.reshape(t, *([1] * (video.frames.ndim - 2)), d)
        # same clip centering as the other arrangements; the frame embedding
        # goes on after so the scan keeps its sense of frame identity
        centered = video.frames - video.frames.mean(axis=0, keepdims=True)
        tokens = centered + rows
        n = tokens.ndim
        if n > 3:  # move the position axis next to time before flattening
            tokens = tokens.permute((0, n - 2, *range(1, n - 2), n - 1))
        flat = tokens.reshape(t * c, *tokens.shape[2:])
        out = flat + self.block(rms_norm(flat), scan=scan)
        cur = out.narrow(0, video.current_index * c, c)      # (C, ..., D)
        return cur.moveaxis(0, -2) if cur.ndim > 2 else cur

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return self.block.named_params(prefix + "block.")


@dataclass
class ContextExtractor:
    """Runs every enabled (branch, granularity) pair on a video.

    Branch order high-then-low, granularity order (t, dst, jst) within a
    branch; the resulting feature order is part of the contract because
    concat-style fusion depends on it. Parameters are fully independent
    across pairs; each branch owns its own temporal embedding.
    """
    granularities: tuple[str, ...]
    branch_strides: dict[str, int]
    modules: dict[tuple[str, str], TMamba | DstMamba | JstMamba]
    embeddings: dict[str, TemporalEmbedding]
    scan: str = "parallel"

    def __post_init__(self) -> None:
        if not self.granularities or not self.branch_strides:
            raise ValueError("context extractor needs at least one granularity "
                             "and one branch")
        for g in self.granularities:
            if g not in GRANULARITIES:
                raise ValueError(f"unknown granularity '{g}'")
        for br in self.branch_strides:
            if br not in BRANCHES:
                raise ValueError(f"unknown branch '{br}'")

    def extract(self, video: VideoFeatures) -> list[ContextFeature]:
        feats = []
        for branch in BRANCHES:
            if branch not in self.branch_strides:
                continue
            stride = self.branch_strides[branch]
            view = video if stride == 1 else temporal_resample(video, stride)
            for g in self.granularities:
                module = self.modules[(branch, g)]
                if isinstance(module, JstMamba):
                    out = module(view, self.embeddings[branch], scan=self.scan)
                else:
                    out = module(view, scan=self.scan)
                feats.append(ContextFeature(out, g, branch))
        return feats

    @property
    def n_features(self) -> int:
        return len(self.branch_strides) * len(self.granularities)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        for branch in BRANCHES:
            if branch not in self.branch_strides:
                continue
            for g in self.granularities:
                out += self.modules[(branch, g)].named_params(f"{branch}.{g}.")
            if "jst" in self.granularities:
                out.append((f"{branch}.te.table", self.embeddings[branch].table))
        return out


def init_context_extractor(rng: np.random.Generator, d_model: int,
                           t_max: int,
                           granularities=GRANULARITIES,
                           branch_strides: dict[str, int] | None = None,
                           n_state: int = 16, d_conv: int = 4, expand: int = 2,
                           dt_rank: int | None = None,
                           scan: str = "parallel",
                           tokens_per_frame: int | None = None) -> ContextExtractor:
    """tokens_per_frame, when known, aims the joint-scan conv stencil at
    the same position one frame back; the divided scans difference their
    immediate predecessor. The pooled scan skips the negative tap: after
    spatial pooling the change component sits at 1/tokens amplitude, and
    an explicit differencer would discard the dominant content it rides
    on."""
    if branch_strides is None:
        branch_strides = {"high": 1, "low": 2}
    make = lambda tap=1: init_bi_mamba_block(rng, d_model, n_state, d_conv,
                                             expand, dt_rank, diff_tap=tap)
    modules: dict[tuple[str, str], TMamba | DstMamba | JstMamba] = {}
    embeddings: dict[str, TemporalEmbedding] = {}
    for branch in BRANCHES:
        if branch not in branch_strides:
            continue
        for g in granularities:
            if g == "t":
                modules[(branch, g)] = TMamba(make(0))
            elif g == "dst":
                modules[(branch, g)] = DstMamba(make(), make())
            elif g == "jst":
                modules[(branch, g)] = JstMamba(make(tokens_per_frame or 1))
            else:
                raise ValueError(f"unknown granularity '{g}'")
        if "jst" in granularities:
            embeddings[branch] = TemporalEmbedding(
                Tensor(rng.normal(0.0, d_model ** -0.5, (t_max, d_model)),
                       requires_grad=True))
    return ContextExtractor(tuple(granularities), dict(branch_strides),
                            modules, embeddings, scan)
