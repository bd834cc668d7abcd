"""Full adapter model over a frozen feature backbone, plus training loop.

The model wires together: a frozen deterministic stub standing in for a
large vision backbone, the context extractor (up to three granularities
times two temporal branches), one fusion adapter, and a linear task head.
The fused (..., C, D) map is mean-pooled over positions and projected to
one logit per channel; cross-entropy against the target's current channel
trains everything except the stub.

Forward accepts a single video (t, C, D) or a batch folded into the
interior axes (t, B, C, D); the whole batch shares one compute graph.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from hmba.tensor import Tensor, no_grad, log_softmax, matmul, backward
from hmba.config import RunConfig
from hmba.context import (
    VideoFeatures, ContextExtractor, init_context_extractor,
)
from hmba.fusion import (
    DaAdapter, IcAdapter, QMambaAdapter, fuse,
    init_da_adapter, init_ic_adapter, init_q_mamba_adapter,
)
from hmba import serialize

__all__ = [
    "FrozenBackboneStub", "HmbaModel", "init_model", "cross_entropy",
    "train_step", "evaluate", "train_loop", "save_model", "load_model",
]

_STUB_STREAM = 0x48ADBA  # fixed tag keeping stub features stable across runs


class FrozenBackboneStub:
    """Deterministic lift from activation grids to feature grids.

    Each channel position owns a fixed +/-1 signature direction in feature
    space; a frame's activation value scales that direction. The mapping is
    a pure function of (channels, d): no randomness at call time, no
    gradient, bitwise-identical features for identical inputs.
    """

    def __init__(self, channels: int, d: int):
        ss = np.random.SeedSequence([_STUB_STREAM, channels, d])
        rng = np.random.default_rng(ss)
        self.directions = np.where(rng.random((channels, d)) < 0.5, -1.0, 1.0)
        self.channels = channels
        self.d = d

    def encode(self, acts: np.ndarray) -> np.ndarray:
        """(..., t, C) activations -> (..., t, C, D) features."""
        acts = np.asarray(acts, dtype=np.float64)
        if acts.shape[-1] != self.channels:
            raise ValueError(
                f"stub built for {self.channels} channels, got {acts.shape}")
        return acts[..., None] * self.directions

    def checksum(self) -> str:
        import hashlib
        return hashlib.sha256(
            np.ascontiguousarray(self.directions, dtype="<f8").tobytes()
        ).hexdigest()


@dataclass
class HmbaModel:
    """Context extractor + fusion adapter + linear head; extractor may be
    None for the frame-only baseline (the head sees the base map alone)."""
    extractor: ContextExtractor | None
    adapter: DaAdapter | IcAdapter | QMambaAdapter | None
    head: Tensor                       # (D, n_classes)
    mode: str = "current_frame"
    kv_scope: str = "channel"

    def base_map(self, video: VideoFeatures) -> Tensor:
        if self.mode == "pooled_frames":
            return video.frames.mean(axis=0)
        cur = video.frames.narrow(0, video.current_index, 1)
        return cur.reshape(video.frames.shape[1:])

    def forward(self, video: VideoFeatures) -> Tensor:
        base = self.base_map(video)
        if self.extractor is None:
            return base
        feats = self.extractor.extract(video)
        kw = {"kv_scope": self.kv_scope} if isinstance(self.adapter,
                                                       QMambaAdapter) else {}
        return fuse(self.adapter, base, feats, **kw)

    def logits(self, video: VideoFeatures) -> Tensor:
        fused = self.forward(video)
        # sum/sqrt(C) readout pooling: a plain mean would shrink the head
        # input by sqrt(C) and with it the logit scale the head trains at
        pooled = fused.mean(axis=-2) * (video.channels ** 0.5)
        flat = pooled if pooled.ndim >= 2 else pooled.reshape(1, pooled.shape[-1])
        return matmul(flat, self.head)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.extractor is not None:
            out += [(f"ctx.{n}", p) for n, p in self.extractor.named_params()]
        if self.adapter is not None:
            out += self.adapter.named_params("adapter.")
        out.append(("head", self.head))
        return out

    def zero_grad(self) -> None:
        for _, p in self.named_params():
            p.grad = None


def init_model(rng: np.random.Generator, cfg: RunConfig) -> HmbaModel:
    head = Tensor(rng.normal(0.0, cfg.d_model ** -0.5,
                             (cfg.d_model, cfg.channels)), requires_grad=True)
    if not cfg.granularities or not cfg.branches:
        return HmbaModel(None, None, head, cfg.mode, cfg.kv_scope)
    strides = {}
    for br in ("high", "low"):
        if br in cfg.branches:
            strides[br] = 1 if br == "high" else cfg.low_stride
    extractor = init_context_extractor(
        rng, cfg.d_model, cfg.t_max, cfg.granularities, strides,
        cfg.d_state, cfg.d_conv, cfg.expand, cfg.dt_rank, cfg.scan,
        tokens_per_frame=cfg.channels)
    n = extractor.n_features
    if cfg.adapter == "da":
        adapter = init_da_adapter(n)
    elif cfg.adapter == "ic":
        adapter = init_ic_adapter(rng, n, cfg.d_model)
    else:
        adapter = init_q_mamba_adapter(rng, n, cfg.d_model, cfg.d_state,
                                       cfg.d_conv, cfg.expand, cfg.dt_rank)
    return HmbaModel(extractor, adapter, head, cfg.mode, cfg.kv_scope)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood; labels are integer class ids."""
    labels = np.asarray(labels, dtype=np.intp)
    n, k = logits.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    return -(log_softmax(logits, axis=-1) * Tensor(onehot)).sum() / n


def _batch_video(features: np.ndarray) -> VideoFeatures:
    # (B, t, C, D) -> time-major (t, B, C, D); current frame is the last
    frames = Tensor(np.moveaxis(features, 0, 1).copy())
    return VideoFeatures(frames, frames.shape[0] - 1)


def train_step(model: HmbaModel, features: np.ndarray, labels: np.ndarray,
               lr: float) -> float:
    """One plain SGD step on a batch; returns the batch loss.

    Raises with a diagnostic if the loss or any intermediate goes
    non-finite; parameters keep their pre-step values in that case.
    """
    try:
        loss = cross_entropy(model.logits(_batch_video(features)), labels)
    except ArithmeticError as exc:
        raise RuntimeError(f"non-finite value during forward pass: {exc}") from exc
    if not np.isfinite(loss.data):
        raise RuntimeError(f"non-finite loss {loss.data!r}; aborting step")
    backward(loss)
    for _, p in model.named_params():
        if p.grad is not None:
            p.data = p.data - lr * p.grad
    model.zero_grad()
    return loss.item()


def evaluate(model: HmbaModel, features: np.ndarray, labels: np.ndarray,
             batch: int = 128) -> float:
    """Top-1 accuracy over a dataset split, evaluated without autodiff."""
    hits = 0
    with no_grad():
        for at in range(0, features.shape[0], batch):
            chunk = features[at : at + batch]
            logits = model.logits(_batch_video(chunk))
            hits += int((logits.data.argmax(axis=-1)
                         == labels[at : at + batch]).sum())
    return hits / features.shape[0]


def lr_at(cfg: RunConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * step / max(1, cfg.steps)))
    return cfg.lr


def train_loop(model: HmbaModel, cfg: RunConfig, train, test,
               log=None) -> tuple[list[tuple[int, float, float | None]], float]:
    """Run cfg.steps SGD steps; returns (history, final test accuracy).

    History rows are (step, batch loss, eval accuracy or None); accuracy is
    filled every cfg.eval_every steps and on the last step.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5EED]))
    history: list[tuple[int, float, float | None]] = []
    # any steps at all guarantees a last-step eval, so only a zero-step
    # run needs the up-front measurement
    final_acc = (evaluate(model, test.features, test.labels)
                 if cfg.steps == 0 else float("nan"))
    for step, idx in enumerate(
            batch_indices_for(rng, len(train), cfg.batch, cfg.steps), 1):
        loss = train_step(model, train.features[idx], train.labels[idx],
                          lr_at(cfg, step - 1))
        acc = None
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = evaluate(model, test.features, test.labels)
            final_acc = acc
        history.append((step, loss, acc))
        if log is not None:
            log(step, loss, acc)
    return history, final_acc


def batch_indices_for(rng, n, batch, steps):
    from hmba.data import batch_indices
    return batch_indices(rng, n, batch, steps)


def save_model(directory: str | Path, model: HmbaModel, cfg: RunConfig) -> None:
    serialize.save_params(directory, model.named_params(), cfg.to_text())


def load_model(directory: str | Path) -> tuple[HmbaModel, RunConfig]:
    from hmba.config import parse_config
    text = serialize.load_config_text(directory)
    if text is None:
        raise serialize.FormatError(f"{directory}: missing config.txt")
    cfg = parse_config(text)
    model = init_model(np.random.default_rng(0), cfg)
    serialize.restore_params(model.named_params(), serialize.load_params(directory))
    return model, cfg
