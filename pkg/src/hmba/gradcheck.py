"""Finite-difference verification of every trainable path.

Each check builds a small module from a seed, runs a deterministic scalar
loss, and compares analytic gradients against central differences on a
sample of coordinates.  Errors are relative: |a - n| / (|a| + |n| + eps).
The suite is sized so twenty seeds finish in well under five minutes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmba.tensor import Tensor, backward, no_grad
from hmba.ssm import (
    init_ssm_params, init_bi_mamba_block, selective_scan_parallel,
    selective_scan_seq,
)
from hmba.context import ContextFeature, VideoFeatures, init_context_extractor
from hmba.fusion import (
    fuse, init_da_adapter, init_ic_adapter, init_q_mamba_adapter,
)
from hmba.model import init_model, cross_entropy, _batch_video
from hmba.config import RunConfig

__all__ = ["CheckResult", "CHECKS", "run_check", "run_suite"]

_STEP = 1e-5


@dataclass(frozen=True)
class CheckResult:
    name: str
    seed: int
    max_err: float
    n_coords: int

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_err <= tol


def _sampled_fd(loss_fn, params, rng, per_param: int,
                step: float = _STEP, floor: float = 1e-6) -> tuple[float, int]:
    """Max relative FD error over sampled coordinates of each named param.

    loss_fn must be deterministic and read param .data at call time, so an
    in-place poke changes the next forward.  floor joins the denominator so
    coordinates whose gradient sits below central-difference noise are held
    to an absolute bound instead of a meaningless relative one.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    backward(loss)

    coords = []
    for _, p in params:
        ana = np.zeros_like(p.data) if p.grad is None else p.grad
        n = p.data.size
        if n <= per_param:
            idxs = np.arange(n)
        else:
            idxs = rng.choice(n, size=per_param, replace=False)
        for i in idxs:
            coords.append((p, int(i), float(ana.reshape(-1)[i])))

    worst = 0.0
    with no_grad():
        for p, i, analytic in coords:
            orig = p.data.flat[i]
            p.data.flat[i] = orig + step
            hi = loss_fn().item()
            p.data.flat[i] = orig - step
            lo = loss_fn().item()
            p.data.flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            worst = max(worst, abs(analytic - numeric)
                        / (abs(analytic) + abs(numeric) + floor))
    for _, p in params:
        p.grad = None
    return worst, len(coords)


def _weights(rng, shape) -> Tensor:
    # fixed projection onto a scalar; drawn once so pokes cannot shift it
    return Tensor(rng.standard_normal(shape))


def _check_scan(seed: int, simplified: bool, route) -> tuple[float, int]:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    d_inner, n_state, dt_rank, t, b = 6, 3, 2, 4, 2
    params = init_ssm_params(rng, d_inner, n_state, dt_rank)
    x = Tensor(0.5 * rng.standard_normal((t, b, d_inner)), requires_grad=True)
    w = _weights(rng, (t, b, d_inner))
    named = params.named_params() + [("x", x)]

    def loss():
        return (route(x, params, simplified=simplified) * w).sum()

    return _sampled_fd(loss, named, rng, per_param=4)


def check_scan_exact(seed: int):
    return _check_scan(seed, False, selective_scan_parallel)


def check_scan_simplified(seed: int):
    return _check_scan(seed, True, selective_scan_parallel)


def check_scan_seq(seed: int):
    return _check_scan(seed, False, selective_scan_seq)


def check_bi_block(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    block = init_bi_mamba_block(rng, d_model=8, n_state=4, d_conv=3,
                                expand=2, dt_rank=2)
    x = Tensor(0.5 * rng.standard_normal((5, 2, 8)), requires_grad=True)
    w = _weights(rng, (5, 2, 8))
    named = block.named_params() + [("x", x)]

    def loss():
        return (block(x) * w).sum()

    return _sampled_fd(loss, named, rng, per_param=3)


def _granularity_fixture(seed: int, which: str):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    t, c, d = 4, 5, 8
    ext = init_context_extractor(
        rng, d_model=d, t_max=8, granularities=(which,),
        branch_strides={"high": 1}, n_state=4, d_conv=3, expand=2, dt_rank=2)
    frames = Tensor(0.5 * rng.standard_normal((t, c, d)), requires_grad=True)
    video = VideoFeatures(frames, t - 1)
    w = _weights(rng, (c, d))
    named = ext.named_params() + [("frames", frames)]

    def loss():
        return (ext.extract(video)[0].map * w).sum()

    return _sampled_fd(loss, named, rng, per_param=3)


def check_granularity_t(seed: int):
    return _granularity_fixture(seed, "t")


def check_granularity_dst(seed: int):
    return _granularity_fixture(seed, "dst")


def check_granularity_jst(seed: int):
    return _granularity_fixture(seed, "jst")


def _adapter_fixture(seed: int, kind: str):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 14]))
    n, c, d = 3, 4, 6
    if kind == "da":
        adapter = init_da_adapter(n)
    elif kind == "ic":
        adapter = init_ic_adapter(rng, n, d)
    else:
        adapter = init_q_mamba_adapter(rng, n, d, n_state=4, d_conv=3,
                                       expand=2, dt_rank=2)
        # passthrough init zeroes the gate's gradient signal; open it
        adapter.out_gain.data += 0.3 * rng.standard_normal(d)
    base = Tensor(0.5 * rng.standard_normal((c, d)), requires_grad=True)
    maps = [Tensor(0.5 * rng.standard_normal((c, d)), requires_grad=True)
            for _ in range(n)]
    kinds = ("t", "dst", "jst")
    w = _weights(rng, (c, d))
    named = adapter.named_params() + [("base", base)] + [
        (f"map{i}", m) for i, m in enumerate(maps)]

    def loss():
        feats = [ContextFeature(m, kinds[i], "high")
                 for i, m in enumerate(maps)]
        return (fuse(adapter, base, feats) * w).sum()

    return _sampled_fd(loss, named, rng, per_param=3)


def check_adapter_da(seed: int):
    return _adapter_fixture(seed, "da")


def check_adapter_ic(seed: int):
    return _adapter_fixture(seed, "ic")


def check_adapter_qmamba(seed: int):
    return _adapter_fixture(seed, "qmamba")


def check_full_model(seed: int):
    rng = np.random.default_rng(np.random.SeedSequence([seed, 15]))
    cfg = RunConfig(frames=3, channels=3, d_model=8, d_state=4, d_conv=3,
                    expand=2, dt_rank=2, t_max=4, low_stride=2,
                    train_size=4, test_size=4, batch=2, steps=1, seed=seed)
    model = init_model(rng, cfg)
    # the fusion gate starts at zero, which silences every context path;
    # open it so the check exercises the extractor gradients too
    model.adapter.out_gain.data += 0.3 * rng.standard_normal(
        model.adapter.out_gain.shape)
    feats = 0.5 * rng.standard_normal((2, cfg.frames, cfg.channels,
                                       cfg.d_model))
    labels = rng.integers(0, cfg.channels, size=2)
    video = _batch_video(feats)
    named = model.named_params()

    def loss():
        return cross_entropy(model.logits(video), labels)

    return _sampled_fd(loss, named, rng, per_param=2)


CHECKS = {
    "scan_exact": check_scan_exact,
    "scan_simplified": check_scan_simplified,
    "scan_seq": check_scan_seq,
    "bi_block": check_bi_block,
    "granularity_t": check_granularity_t,
    "granularity_dst": check_granularity_dst,
    "granularity_jst": check_granularity_jst,
    "adapter_da": check_adapter_da,
    "adapter_ic": check_adapter_ic,
    "adapter_qmamba": check_adapter_qmamba,
    "full_model": check_full_model,
}


def run_check(name: str, seed: int) -> CheckResult:
    err, n = CHECKS[name](seed)
    return CheckResult(name, seed, err, n)


def run_suite(seeds, tol: float = 1e-4, names=None) -> list[CheckResult]:
    """Run the named checks (all by default) for each seed."""
    picked = tuple(CHECKS) if names is None else tuple(names)
    for name in picked:
        if name not in CHECKS:
            raise KeyError(f"unknown gradcheck '{name}'")
    return [run_check(name, seed) for seed in seeds for name in picked]
