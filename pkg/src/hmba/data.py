"""Synthetic moving-target videos for the localization task.

Each sample is a t-frame activation grid over C channel positions: one
bright target walks the grid (constant signed velocity, wrapping), a fixed
set of static distractor channels glows slightly dimmer, and white noise
covers everything. The label is the target's channel at the current (last)
frame. Distractor channels never sit on the labeled channel, so a single
frame shows distractors + 1 near-identical bright spots and the margin
between target and distractor brightness is far below the noise floor:
identifying which bright spot is moving takes at least two frames. With
moving=false the target holds still; paired with a wide margin and low
noise that variant is solvable from the current frame alone and serves as
the control condition.

Activation grids are lifted to (t, C, D) features by the frozen backbone
stub; generation is fully determined by (config, seed), and train/test
splits draw from disjoint child streams of the seed.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from hmba.config import RunConfig
from hmba.model import FrozenBackboneStub

__all__ = ["SyntheticDataset", "generate_dataset", "batch_indices"]


@dataclass
class SyntheticDataset:
    features: np.ndarray     # (n, t, C, D) float64, frozen-stub outputs
    labels: np.ndarray       # (n,) int64, target channel at current frame
    motions: np.ndarray      # (n, t) int64, target channel per frame

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def current_index(self) -> int:
        return self.features.shape[1] - 1

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        digest.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        digest.update(np.ascontiguousarray(self.motions, dtype="<i8").tobytes())
        return digest.hexdigest()


def _make_split(cfg: RunConfig, rng: np.random.Generator, size: int,
                stub: FrozenBackboneStub) -> SyntheticDataset:
    t, c = cfg.frames, cfg.channels
    acts = np.zeros((size, t, c))
    motions = np.zeros((size, t), dtype=np.int64)
    labels = np.zeros(size, dtype=np.int64)
    frame_idx = np.arange(t)
    for i in range(size):
        start = int(rng.integers(c))
        if cfg.moving:
            speed = int(rng.choice(cfg.velocities))
            sign = 1 if rng.random() < 0.5 else -1
            velocity = sign * speed
        else:
            velocity = 0
        trace = (start + velocity * frame_idx) % c
        motions[i] = trace
        labels[i] = trace[-1]
        acts[i, frame_idx, trace] += cfg.target_amp
        # static distractors, kept off the labeled channel
        candidates = np.delete(np.arange(c), labels[i])
        chosen = rng.choice(candidates, size=cfg.distractors, replace=False)
        acts[i][:, chosen] += cfg.distractor_amp
        acts[i] += rng.normal(0.0, cfg.noise, (t, c))
    features = stub.encode(acts)
    return SyntheticDataset(features, labels, motions)


def generate_dataset(cfg: RunConfig,
                     seed: int) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Build (train, test) splits from disjoint child streams of `seed`."""
    stub = FrozenBackboneStub(cfg.channels, cfg.d_model)
    train_ss, test_ss = np.random.SeedSequence(seed).spawn(2)
    train = _make_split(cfg, np.random.default_rng(train_ss), cfg.train_size, stub)
    test = _make_split(cfg, np.random.default_rng(test_ss), cfg.test_size, stub)
    return train, test


def batch_indices(rng: np.random.Generator, n: int, batch: int, steps: int):
    """Yield `steps` index batches, reshuffling after each full pass."""
    order = rng.permutation(n)
    at = 0
    for _ in range(steps):
        if at + batch > n:
            order = rng.permutation(n)
            at = 0
        yield order[at : at + batch]
        at += batch
