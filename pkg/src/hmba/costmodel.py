"""Closed-form parameter and arithmetic cost accounting.

Every formula here mirrors the live op sequence of the corresponding module
under the engine's counting convention, term for term:

  * matmul of (..., m, k) @ (k, n): batch * m * k * n multiply-adds;
  * elementwise arithmetic, transcendentals, and activations: one per
    output element;
  * reductions (sum / mean / softmax normalization): one per input element;
  * data movement (reshape, slice, transpose, concat, broadcast): zero.

FLOPs are reported as 2x multiply-adds. Because the formulas track the op
stream exactly, the instrumented counter and the closed forms must agree
to well under a percent; the tests pin exact equality at small dims.

Attention comparators follow the same convention (projections, attention
matmuls, softmax, feed-forward, activations, residual adds; normalization
layers are omitted as sub-0.1% noise). The reference video transformer is
modeled at its common published scale: 12 layers, width 768, 16x16 patches
on a 224px frame (196 tokens), 8 frames, with per-layer attention split
into a temporal pass and a spatial pass plus one feed-forward.
"""

from __future__ import annotations

from dataclasses import dataclass

from hmba.config import RunConfig
from hmba.context import BRANCHES
from hmba.ssm import default_dt_rank

__all__ = [
    "ModuleCost", "CostReport",
    "scan_params", "block_params", "bi_block_params",
    "temporal_context_params", "divided_context_params", "joint_context_params",
    "scan_mas", "block_mas", "bi_block_mas", "norm_mas", "residual_block_mas",
    "temporal_context_mas", "divided_context_mas", "joint_context_mas",
    "adapter_params", "adapter_mas",
    "temporal_attention_cost", "joint_attention_cost",
    "video_transformer_cost", "model_cost", "resampled_length",
    "sweep_rows",
]


@dataclass(frozen=True)
class ModuleCost:
    """Parameters and forward multiply-adds for one named component."""
    name: str
    params: int
    mas: int

    @property
    def flops(self) -> int:
        return 2 * self.mas


@dataclass(frozen=True)
class CostReport:
    """Per-component costs plus totals for one model configuration."""
    modules: tuple[ModuleCost, ...]

    @property
    def params(self) -> int:
        return sum(m.params for m in self.modules)

    @property
    def mas(self) -> int:
        return sum(m.mas for m in self.modules)

    @property
    def flops(self) -> int:
        return 2 * self.mas


# --------------------------------------------------------------------------
# parameters

def scan_params(d_inner: int, n_state: int, dt_rank: int) -> int:
    # decay log-magnitudes, low-rank step projection pair plus its bias,
    # input/readout mixing, passthrough gain
    return 3 * d_inner * n_state + 2 * d_inner * dt_rank + 2 * d_inner


def block_params(d_model: int, n_state: int, d_conv: int, expand: int,
                 dt_rank: int) -> int:
    d_inner = expand * d_model
    return (d_model * 2 * d_inner + d_inner * d_conv
            + scan_params(d_inner, n_state, dt_rank) + d_inner * d_model)


def bi_block_params(d_model: int, n_state: int, d_conv: int, expand: int,
                    dt_rank: int) -> int:
    d_inner = expand * d_model
    return (d_model * 2 * d_inner + 2 * d_inner * d_conv
            + 2 * scan_params(d_inner, n_state, dt_rank)
            + d_inner * d_model)


def temporal_context_params(d_model, n_state, d_conv, expand, dt_rank) -> int:
    return bi_block_params(d_model, n_state, d_conv, expand, dt_rank)


def divided_context_params(d_model, n_state, d_conv, expand, dt_rank) -> int:
    return 2 * bi_block_params(d_model, n_state, d_conv, expand, dt_rank)


def joint_context_params(d_model, n_state, d_conv, expand, dt_rank) -> int:
    # the per-frame embedding table belongs to the branch, not the module
    return bi_block_params(d_model, n_state, d_conv, expand, dt_rank)


def adapter_params(kind: str, n: int, d_model: int, n_state: int,
                   d_conv: int, expand: int, dt_rank: int) -> int:
    if kind == "da":
        return n
    if kind == "ic":
        return n * d_model * d_model
    if kind == "qmamba":
        return ((1 + 3 * n) * d_model * d_model
                + bi_block_params(d_model, n_state, d_conv, expand, dt_rank)
                + d_model * d_model + d_model)
    raise ValueError(f"unknown adapter kind '{kind}'")


# --------------------------------------------------------------------------
# forward multiply-adds

def scan_mas(positions: int, d_inner: int, n_state: int, dt_rank: int,
             simplified: bool = False) -> int:
    mas = 2 * positions * d_inner * dt_rank          # step-size projection pair
    mas += 2 * positions * d_inner                   # step-size bias + softplus
    mas += 2 * positions * d_inner * n_state         # input/readout mixing rows
    mas += 2 * d_inner * n_state                     # decay matrix from its log
    core = 8 if simplified else 10                   # discretize, scan, readout
    mas += core * positions * d_inner * n_state
    mas += 2 * positions * d_inner                   # passthrough + final add
    return mas


def _conv_gate_mas(positions: int, d_inner: int, d_conv: int) -> int:
    # causal depthwise conv taps plus the activation after it
    return (2 * d_conv - 1) * positions * d_inner + positions * d_inner


def block_mas(positions: int, d_model: int, n_state: int, d_conv: int,
              expand: int, dt_rank: int, simplified: bool = False) -> int:
    d_inner = expand * d_model
    mas = positions * d_model * 2 * d_inner          # entry projection
    mas += _conv_gate_mas(positions, d_inner, d_conv)
    mas += scan_mas(positions, d_inner, n_state, dt_rank, simplified)
    mas += 2 * positions * d_inner                   # gate activation + product
    mas += positions * d_inner * d_model             # exit projection
    return mas


def bi_block_mas(positions: int, d_model: int, n_state: int, d_conv: int,
                 expand: int, dt_rank: int, simplified: bool = False) -> int:
    d_inner = expand * d_model
    mas = positions * d_model * 2 * d_inner          # shared entry projection
    for _ in range(2):                               # one pass per direction
        mas += _conv_gate_mas(positions, d_inner, d_conv)
        mas += scan_mas(positions, d_inner, n_state, dt_rank, simplified)
    mas += positions * d_inner                       # direction sum
    mas += 2 * positions * d_inner                   # gate activation + product
    mas += positions * d_inner * d_model             # shared exit projection
    return mas


def norm_mas(rows: int, d: int) -> int:
    # square, row mean, eps/log/scale/exp on the row statistic, rescale
    return rows * (3 * d + 4)


def residual_block_mas(positions: int, d_model: int, n_state: int,
                       d_conv: int, expand: int, dt_rank: int,
                       simplified: bool = False) -> int:
    # pre-norm residual arrangement: entry norm, block, identity add
    return (norm_mas(positions, d_model)
            + bi_block_mas(positions, d_model, n_state, d_conv, expand,
                           dt_rank, simplified)
            + positions * d_model)


def temporal_context_mas(t, channels, d_model, n_state, d_conv, expand,
                         dt_rank, batch: int = 1,
                         simplified: bool = False) -> int:
    mas = t * batch * channels * d_model             # position pooling
    mas += 2 * t * batch * d_model                   # clip-mean centering
    mas += norm_mas(t * batch, d_model)              # centered-token norm
    mas += bi_block_mas(t * batch, d_model, n_state, d_conv, expand,
                        dt_rank, simplified)
    mas += t * batch * d_model                       # residual add
    return mas                                       # broadcast back is free


def divided_context_mas(t, channels, d_model, n_state, d_conv, expand,
                        dt_rank, batch: int = 1,
                        simplified: bool = False) -> int:
    mas = 2 * t * batch * channels * d_model         # per-position centering
    mas += residual_block_mas(t * batch * channels, d_model, n_state, d_conv,
                              expand, dt_rank, simplified)  # history stage
    mas += residual_block_mas(batch * channels, d_model, n_state, d_conv,
                              expand, dt_rank, simplified)  # raster stage
    return mas


def joint_context_mas(t, channels, d_model, n_state, d_conv, expand,
                      dt_rank, batch: int = 1,
                      simplified: bool = False) -> int:
    mas = 2 * t * batch * channels * d_model         # per-position centering
    mas += t * batch * channels * d_model            # per-frame embedding add
    mas += residual_block_mas(t * channels * batch, d_model, n_state, d_conv,
                              expand, dt_rank, simplified)
    return mas


_CONTEXT_MAS = {"t": temporal_context_mas, "dst": divided_context_mas,
                "jst": joint_context_mas}
_CONTEXT_PARAMS = {"t": temporal_context_params, "dst": divided_context_params,
                   "jst": joint_context_params}


def adapter_mas(kind: str, n: int, channels: int, d_model: int, n_state: int,
                d_conv: int, expand: int, dt_rank: int, batch: int = 1,
                kv_scope: str = "channel", simplified: bool = False) -> int:
    bcd = batch * channels * d_model
    if kind == "da":
        return n * 2 * bcd                           # scale + accumulate each
    if kind == "ic":
        return batch * channels * (n * d_model) * d_model + bcd
    if kind != "qmamba":
        raise ValueError(f"unknown adapter kind '{kind}'")
    dd = batch * channels * d_model * d_model
    mas = dd                                         # query projection
    for _ in range(n):
        mas += 2 * dd                                # key and value
        if kv_scope == "channel":
            mas += 2 * bcd                           # score product + reduce
            mas += batch * channels                  # scale
            mas += 4 * batch * channels              # degenerate softmax
            mas += bcd                               # weight * value
        else:                                        # all_channels
            cc = batch * channels * channels
            mas += cc * d_model                      # query x key scores
            mas += cc                                # scale
            mas += 4 * cc                            # softmax
            mas += cc * d_model                      # weights x values
        mas += dd                                    # per-feature output mix
    mas += (n - 1) * bcd                             # sum over attended maps
    mas += residual_block_mas(batch * channels, d_model, n_state, d_conv,
                              expand, dt_rank, simplified)  # latent scan
    mas += dd                                        # output mixing matrix
    mas += bcd                                       # zero-initialized gate
    mas += bcd                                       # residual add
    return mas


# --------------------------------------------------------------------------
# attention comparators

def _attention_layer_mas(tokens: int, d: int, score_pairs: int) -> int:
    """One pre-norm attention block: projections, scores over score_pairs
    query-key pairs, softmax, feed-forward at 4x width, residual adds."""
    mas = 3 * tokens * d * d                         # q, k, v
    mas += score_pairs * d                           # scores
    mas += score_pairs                               # scale
    mas += 4 * score_pairs                           # softmax
    mas += score_pairs * d                           # mix values
    mas += tokens * d * d                            # output projection
    mas += 8 * tokens * d * d                        # feed-forward pair
    mas += tokens * 4 * d                            # activation
    mas += 2 * tokens * d                            # residual adds
    return mas


def _attention_layer_params(d: int) -> int:
    return 4 * d * d + 8 * d * d


def temporal_attention_cost(t: int, d_model: int) -> ModuleCost:
    """Single self-attention layer over the t frame tokens."""
    return ModuleCost("temporal_attention",
                      _attention_layer_params(d_model),
                      _attention_layer_mas(t, d_model, t * t))


def joint_attention_cost(t: int, channels: int, d_model: int) -> ModuleCost:
    """Single self-attention layer over all t*channels tokens jointly."""
    tokens = t * channels
    return ModuleCost("joint_attention",
                      _attention_layer_params(d_model),
                      _attention_layer_mas(tokens, d_model, tokens * tokens))


VIDEO_TRANSFORMER_LAYERS = 12
VIDEO_TRANSFORMER_WIDTH = 768
VIDEO_TRANSFORMER_TOKENS = 196    # 16x16 patches on a 224px frame
VIDEO_TRANSFORMER_FRAMES = 5      # matches the five-frame video setting


def video_transformer_cost(t: int | None = None,
                           channels: int | None = None,
                           d: int | None = None,
                           layers: int | None = None) -> ModuleCost:
    """Divided space-time attention video transformer at published scale.

    Per layer: a temporal attention pass (each spatial token attends over
    frames), a spatial attention pass (each frame attends over its own
    tokens), and one feed-forward. Defaults model the common 12-layer,
    width-768, 196-token, 8-frame configuration.
    """
    t = VIDEO_TRANSFORMER_FRAMES if t is None else t
    channels = VIDEO_TRANSFORMER_TOKENS if channels is None else channels
    d = VIDEO_TRANSFORMER_WIDTH if d is None else d
    layers = VIDEO_TRANSFORMER_LAYERS if layers is None else layers
    tokens = t * channels
    per_layer = 0
    for score_pairs in (t * t * channels, channels * channels * t):
        per_layer += 4 * tokens * d * d              # q, k, v, out
        per_layer += 2 * score_pairs * d             # scores + value mix
        per_layer += 5 * score_pairs                 # scale + softmax
        per_layer += tokens * d                      # residual add
    per_layer += 8 * tokens * d * d                  # feed-forward pair
    per_layer += tokens * 4 * d                      # activation
    per_layer += tokens * d                          # residual add
    params = layers * (2 * 4 * d * d + 8 * d * d)
    return ModuleCost("video_transformer", params, layers * per_layer)


# --------------------------------------------------------------------------
# whole-model accounting

def resampled_length(t: int, stride: int) -> int:
    """Frames surviving the back-anchored subsampling of a t-frame video."""
    return len(range(t - 1, -1, -stride))


def model_cost(cfg: RunConfig, batch: int = 1) -> CostReport:
    """Cost of one forward pass under cfg, per component, batch videos."""
    dims = (cfg.d_state, cfg.d_conv, cfg.expand, cfg.dt_rank)
    modules: list[ModuleCost] = []
    base_mas = (cfg.frames * batch * cfg.channels * cfg.d_model
                if cfg.mode == "pooled_frames" else 0)
    modules.append(ModuleCost("base_map", 0, base_mas))
    n_features = 0
    if cfg.granularities and cfg.branches:
        for branch in BRANCHES:
            if branch not in cfg.branches:
                continue
            stride = 1 if branch == "high" else cfg.low_stride
            t_br = resampled_length(cfg.frames, stride)
            for g in cfg.granularities:
                n_features += 1
                mas = _CONTEXT_MAS[g](t_br, cfg.channels, cfg.d_model, *dims,
                                      batch=batch)
                params = _CONTEXT_PARAMS[g](cfg.d_model, *dims)
                modules.append(ModuleCost(f"{branch}.{g}", params, mas))
            if "jst" in cfg.granularities:
                modules.append(ModuleCost(f"{branch}.embedding",
                                          cfg.t_max * cfg.d_model, 0))
        modules.append(ModuleCost(
            f"adapter.{cfg.adapter}",
            adapter_params(cfg.adapter, n_features, cfg.d_model, *dims),
            adapter_mas(cfg.adapter, n_features, cfg.channels, cfg.d_model,
                        *dims, batch=batch, kv_scope=cfg.kv_scope)))
    head_mas = (batch * cfg.channels * cfg.d_model    # readout pooling
                + batch * cfg.d_model                 # variance-preserving scale
                + batch * cfg.d_model * cfg.channels)
    modules.append(ModuleCost("head", cfg.d_model * cfg.channels, head_mas))
    return CostReport(tuple(modules))


def sweep_rows(ts, channels: int, d_model: int, n_state: int, d_conv: int,
               expand: int, dt_rank: int | None = None) -> list[dict]:
    """Cost of each context arrangement and the attention comparators
    across frame counts, one dict per (module, length) pair with keys
    module, length, flops, params."""
    if dt_rank is None:
        dt_rank = default_dt_rank(d_model)
    dims = (n_state, d_conv, expand, dt_rank)
    rows = []
    for t in ts:
        entries = [
            ("temporal_scan",
             temporal_context_params(d_model, *dims),
             2 * temporal_context_mas(t, channels, d_model, *dims)),
            ("divided_scan",
             divided_context_params(d_model, *dims),
             2 * divided_context_mas(t, channels, d_model, *dims)),
            ("joint_scan",
             joint_context_params(d_model, *dims),
             2 * joint_context_mas(t, channels, d_model, *dims)),
        ]
        for name, cost in (
            ("temporal_attention", temporal_attention_cost(t, d_model)),
            ("joint_attention", joint_attention_cost(t, channels, d_model)),
        ):
            entries.append((name, cost.params, cost.flops))
        for name, params, flops in entries:
            rows.append({"module": name, "length": t,
                         "flops": flops, "params": params})
    return rows
