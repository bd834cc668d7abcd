"""Fusion adapters: combine n context maps with the base frame feature.

All three adapters consume maps aligned to the same (..., C, D) grid:

  * weighted-sum: base + sum_i w_i * f_i, scalar weights initialized 1/n;
  * concat-project: per position, concatenate the n maps into (n*D) and
    project back to D with one bias-free matrix (no residual inside; the
    caller adds the base);
  * query-attention: per position, a query built from the base attends to
    each context's token at that position (a single key/value under the
    aligned interface, so the attention weight degenerates to 1 and the
    value/output projections carry the learning), the n attended maps are
    summed and the pooled result is scanned across positions by one shared
    latent bidirectional block, passed through a zero-initialized output
    gain, and added residually to the base. With q/k/v/output projections
    at identity and the gain at zero the adapter is an exact passthrough.

A `kv_scope="all_channels"` variant lets each query attend over every
position's token of a context map with a real softmax; the default scope
is the aligned single-token form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from hmba.tensor import (Tensor, ShapeMismatchError, matmul, softmax, concat,
                         rms_norm)
from hmba.ssm import BiMambaBlock, init_bi_mamba_block
from hmba.context import ContextFeature

__all__ = [
    "DaAdapter", "IcAdapter", "QMambaAdapter", "fuse",
    "da_fuse", "ic_fuse", "q_mamba_fuse",
    "init_da_adapter", "init_ic_adapter", "init_q_mamba_adapter",
]


def _maps(features: list[ContextFeature] | list[Tensor]) -> list[Tensor]:
    return [f.map if isinstance(f, ContextFeature) else f for f in features]


def _check_n(features, n: int, who: str) -> list[Tensor]:
    maps = _maps(features)
    if len(maps) != n:
        raise ShapeMismatchError(
            f"{who} built for {n} features, got {len(maps)}")
    return maps


@dataclass
class DaAdapter:
    """Scalar mixing weights over context maps, residual on the base."""
    weights: Tensor          # (n,)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "weights", self.weights)]


def da_fuse(base: Tensor, features, adapter: DaAdapter) -> Tensor:
    maps = _check_n(features, adapter.n, "weighted-sum adapter")
    out = base
    for i, m in enumerate(maps):
        if m.shape != base.shape:
            raise ShapeMismatchError(
                f"feature {i} shape {m.shape} does not match base {base.shape}")
        w = adapter.weights.narrow(0, i, 1).reshape(())
        out = out + w * m
    return out


@dataclass
class IcAdapter:
    """Per-position concat of n maps projected back to D, bias-free."""
    fc: Tensor               # (n * D, D)
    n: int

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        return [(prefix + "fc", self.fc)]


def ic_fuse(features, adapter: IcAdapter) -> Tensor:
    maps = _check_n(features, adapter.n, "concat-project adapter")
    d = maps[0].shape[-1]
    if adapter.fc.shape[0] != adapter.n * d:
        raise ShapeMismatchError(
            f"concat-project fc expects width {adapter.fc.shape[0]}, "
            f"features give {adapter.n * d}")
    wide = concat(maps, axis=-1)                # (..., C, n*D)
    return matmul(wide, adapter.fc)             # (..., C, D)


@dataclass
class QMambaAdapter:
    """Query-attention fusion with one shared latent scan across positions."""
    q_proj: Tensor                      # (D, D)
    k_projs: list[Tensor]               # n x (D, D)
    v_projs: list[Tensor]               # n x (D, D)
    o_projs: list[Tensor]               # n x (D, D)
    latent: BiMambaBlock                # shared across features and positions
    out_mix: Tensor                     # (D, D)
    out_gain: Tensor                    # (D,), zero-initialized gate

    @property
    def n(self) -> int:
        return len(self.k_projs)

    def named_params(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(prefix + "q_proj", self.q_proj)]
        for i in range(self.n):
            out += [(f"{prefix}k_proj{i}", self.k_projs[i]),
                    (f"{prefix}v_proj{i}", self.v_projs[i]),
                    (f"{prefix}o_proj{i}", self.o_projs[i])]
        out += self.latent.named_params(prefix + "latent.")
        out += [(prefix + "out_mix", self.out_mix),
                (prefix + "out_gain", self.out_gain)]
        return out


def q_mamba_fuse(current: Tensor, features, adapter: QMambaAdapter,
                 kv_scope: str = "channel", scan: str = "parallel") -> Tensor:
    """current: (..., C, D) base map; returns base plus gated fused update."""
    maps = _check_n(features, adapter.n, "query-attention adapter")
    d = current.shape[-1]
    scale = 1.0 / np.sqrt(d)
    q = matmul(current, adapter.q_proj)                   # (..., C, D)
    acc = None
    for i, m in enumerate(maps):
        if m.shape != current.shape:
            raise ShapeMismatchError(
                f"feature {i} shape {m.shape} does not match base {current.shape}")
        k = matmul(m, adapter.k_projs[i])
        v = matmul(m, adapter.v_projs[i])
        if kv_scope == "channel":
            # one key/value per position: the softmax over a single logit
            # is exactly 1, so the attended row is the value row itself
            logits = (q * k).sum(axis=-1, keepdims=True) * scale
            weights = softmax(logits, axis=-1)            # == 1
            attended = weights * v
        elif kv_scope == "all_channels":
            logits = matmul(q, k.moveaxis(-1, -2)) * scale  # (..., C, C)
            weights = softmax(logits, axis=-1)
            attended = matmul(weights, v)
        else:
            raise ValueError(f"unknown kv_scope '{kv_scope}'")
        attended = matmul(attended, adapter.o_projs[i])
        acc = attended if acc is None else acc + attended
    # plain sum: averaging would dilute any one context n-fold, and the
    # per-feature value/output projections already own the relative scaling
    # one channel-axis mixing pass over the pooled attended context, in the
    # pre-norm residual arrangement; the channel axis plays the sequence
    # role, and the identity path hands the attended content to the gate
    # before the latent block has learned anything
    seq = acc.moveaxis(-2, 0)                             # (C, ..., D)
    mixed = seq + adapter.latent(rms_norm(seq), scan=scan)
    mixed = mixed.moveaxis(0, -2)
    # the zero gate makes the whole adapter an exact passthrough at init;
    # a per-channel vector opens much faster than a zero matrix would
    return current + matmul(mixed, adapter.out_mix) * adapter.out_gain


def fuse(adapter, base: Tensor, features, **kw) -> Tensor:
    """Uniform entry point; residual semantics follow the adapter kind."""
    if isinstance(adapter, DaAdapter):
        return da_fuse(base, features, adapter)
    if isinstance(adapter, IcAdapter):
        return ic_fuse(features, adapter) + base
    if isinstance(adapter, QMambaAdapter):
        return q_mamba_fuse(base, features, adapter, **kw)
    raise TypeError(f"unknown adapter type {type(adapter).__name__}")


def init_da_adapter(n: int) -> DaAdapter:
    if n < 1:
        raise ValueError("adapter needs at least one feature")
    return DaAdapter(Tensor(np.full(n, 1.0 / n), requires_grad=True))


def init_ic_adapter(rng: np.random.Generator, n: int, d: int) -> IcAdapter:
    if n < 1:
        raise ValueError("adapter needs at least one feature")
    fc = rng.normal(0.0, (n * d) ** -0.5, (n * d, d))
    return IcAdapter(Tensor(fc, requires_grad=True), n)


def init_q_mamba_adapter(rng: np.random.Generator, n: int, d: int,
                         n_state: int = 16, d_conv: int = 4, expand: int = 2,
                         dt_rank: int | None = None) -> QMambaAdapter:
    """Identity q/k/v/output projections, zero output gain: the adapter
    starts as an exact passthrough of the base and learns its way open."""
    if n < 1:
        raise ValueError("adapter needs at least one feature")
    eye = lambda: Tensor(np.eye(d), requires_grad=True)
    return QMambaAdapter(
        q_proj=eye(),
        k_projs=[eye() for _ in range(n)],
        v_projs=[eye() for _ in range(n)],
        o_projs=[eye() for _ in range(n)],
        latent=init_bi_mamba_block(rng, d, n_state, d_conv, expand, dt_rank),
        out_mix=Tensor(rng.normal(0.0, d ** -0.5, (d, d)), requires_grad=True),
        out_gain=Tensor(np.zeros(d), requires_grad=True),
    )
