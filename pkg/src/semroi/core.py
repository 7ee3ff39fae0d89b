"""Semantic-mask RoI feature extraction.

A RoI is pooled to a small grid, summarized by a whole-RoI descriptor and a
per-position semantic feature map, and a bank of N mask regressors turns
those (plus optional positional channels) into N spatial attention masks.
The output feature is the mask-weighted sum of the pooled grid: N rows of C
channels, one per mask.

Every stage has a recorded variant so ``sra_backward`` can produce exact
reverse-mode gradients for all parameters and the input feature map.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Callable, NamedTuple

import numpy as np

from .embeddings import area_embedding_raw, position_embedding_raw
from .numerics import (
    Array,
    ConfigError,
    LayerNormParams,
    LinearParams,
    ShapeError,
    VjpRecord,
    conv1x1_vjp,
    init_layer_norm,
    init_linear,
    layer_norm_vjp,
    linear_vjp,
    relu_vjp,
    softmax_spatial_vjp,
)
from .sampler import GridSize, RoIBox, block_average_pool_vjp, dynamic_grid_size

DESCRIPTOR_MODES = ("concatenation", "maximum", "average")
EMBEDDING_MODES = ("none", "position", "area")


@dataclass
class SraConfig:
    """Hyperparameters of the extractor.

    Defaults follow the reference operating point: 49 masks, sampling budget
    128, descriptor dim 256, amplification 50.  ``fixed_grid`` bypasses the
    dynamic sampler (required for the concatenation descriptor, whose input
    size must be static).  ``independent_heads`` switches the mask regressors
    from one shared trunk with an N-way output to N disjoint two-block MLPs.
    """

    n_masks: int = 49
    budget: int = 128
    descriptor_dim: int = 256
    embed_channels: int = 32
    gamma: float = 50.0
    hidden: int = 128
    descriptor_mode: str = "average"
    embedding_mode: str = "area"
    fixed_grid: tuple[int, int] | None = None
    independent_heads: bool = False

    def __post_init__(self):
        if min(self.n_masks, self.descriptor_dim, self.hidden) < 1:
            raise ConfigError("n_masks, descriptor_dim and hidden must be >= 1")
        if self.budget < 1:
            raise ConfigError(f"budget must be >= 1, got {self.budget}")
        if self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.descriptor_mode not in DESCRIPTOR_MODES:
            raise ConfigError(f"unknown descriptor_mode {self.descriptor_mode!r}")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise ConfigError(f"unknown embedding_mode {self.embedding_mode!r}")
        if self.embedding_mode != "none" and self.embed_channels < 1:
            raise ConfigError("embed_channels must be >= 1 when an embedding is used")
        if self.descriptor_mode == "concatenation" and self.fixed_grid is None:
            raise ConfigError(
                "concatenation descriptor needs fixed_grid: its input size "
                "cannot follow a dynamic grid"
            )
        if self.fixed_grid is not None:
            self.fixed_grid = (int(self.fixed_grid[0]), int(self.fixed_grid[1]))

    @property
    def embed_raw_dim(self) -> int:
        if self.embedding_mode == "position":
            return 2
        if self.embedding_mode == "area":
            return 2 * self.budget
        return 0

    @property
    def trunk_in_dim(self) -> int:
        p = self.embed_channels if self.embedding_mode != "none" else 0
        return 2 * self.descriptor_dim + p


@dataclass
class MaskMlpParams:
    """One two-block (Norm-ReLU-Linear twice) mask regressor."""

    trunk_norm: LayerNormParams
    trunk_linear: LinearParams
    head_norm: LayerNormParams
    head_linear: LinearParams


@dataclass
class SraParams:
    """All learnable tensors of the extractor.

    In shared-trunk mode the four trunk/head fields realize the N mask
    regressors as output channels of ``head_linear``; in independent-heads
    mode they are None and ``mask_mlps`` holds N disjoint regressors.
    """

    psi: LinearParams
    semantic_conv: LinearParams
    embed_proj: LinearParams | None
    trunk_norm: LayerNormParams | None
    trunk_linear: LinearParams | None
    head_norm: LayerNormParams | None
    head_linear: LinearParams | None
    mask_mlps: list[MaskMlpParams] | None = None


class ExtractResult(NamedTuple):
    feature: Array  # (N, C)
    masks: Array  # (N, h, w)
    grid: GridSize


class SraTape(NamedTuple):
    """Saved forward state consumed by ``sra_backward``."""

    backward: Callable[[Array], tuple["SraParams", Array]]


def descriptor_in_dim(config: SraConfig, channels: int) -> int:
    if config.descriptor_mode == "concatenation":
        gh, gw = config.fixed_grid
        return channels * gh * gw
    return channels


def init_params(
    config: SraConfig, channels: int, rng: np.random.Generator
) -> SraParams:
    """Fan-in uniform weights, zero biases, unit norm gains."""
    k = config.descriptor_dim
    psi = init_linear(rng, descriptor_in_dim(config, channels), k)
    semantic_conv = init_linear(rng, channels, k)
    embed_proj = None
    if config.embedding_mode != "none":
        embed_proj = init_linear(rng, config.embed_raw_dim, config.embed_channels)
    d_in = config.trunk_in_dim

    def one_mlp(out_dim: int) -> MaskMlpParams:
        return MaskMlpParams(
            trunk_norm=init_layer_norm(d_in),
            trunk_linear=init_linear(rng, d_in, config.hidden),
            head_norm=init_layer_norm(config.hidden),
            head_linear=init_linear(rng, config.hidden, out_dim),
        )

    if config.independent_heads:
        return SraParams(
            psi=psi,
            semantic_conv=semantic_conv,
            embed_proj=embed_proj,
            trunk_norm=None,
            trunk_linear=None,
            head_norm=None,
            head_linear=None,
            mask_mlps=[one_mlp(1) for _ in range(config.n_masks)],
        )
    shared = one_mlp(config.n_masks)
    return SraParams(
        psi=psi,
        semantic_conv=semantic_conv,
        embed_proj=embed_proj,
        trunk_norm=shared.trunk_norm,
        trunk_linear=shared.trunk_linear,
        head_norm=shared.head_norm,
        head_linear=shared.head_linear,
    )


# ---------------------------------------------------------------------------
# parameter bookkeeping


def param_leaves(obj, prefix: str = "") -> list[tuple[str, Array]]:
    """Named learnable arrays of a parameter structure, in a stable order."""
    if obj is None:
        return []
    if isinstance(obj, np.ndarray):
        return [(prefix, obj)]
    if isinstance(obj, LinearParams):
        return [(f"{prefix}.weight", obj.weight), (f"{prefix}.bias", obj.bias)]
    if isinstance(obj, LayerNormParams):
        return [(f"{prefix}.gain", obj.gain), (f"{prefix}.shift", obj.shift)]
    if isinstance(obj, (list, tuple)):
        out = []
        for i, item in enumerate(obj):
            out.extend(param_leaves(item, f"{prefix}[{i}]"))
        return out
    if hasattr(obj, "__dataclass_fields__"):
        out = []
        for f in fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.extend(param_leaves(getattr(obj, f.name), name))
        return out
    raise TypeError(f"not a parameter structure: {type(obj)!r}")


def parameter_count(config: SraConfig, channels: int) -> int:
    """Closed-form learnable-scalar count.

    With K = descriptor_dim, P = embed_channels (0 if no embedding),
    D = 2K + P, H = hidden, N = n_masks, C_d = descriptor input dim:

        psi:            K * C_d + K
        semantic_conv:  K * C + K
        embed_proj:     P * D_raw + P          (if an embedding is used)
        per regressor:  2D + (H*D + H) + 2H + (out*H + out)

    where the shared trunk has one regressor with out = N and the
    independent variant has N regressors with out = 1.
    """
    k = config.descriptor_dim
    c_d = descriptor_in_dim(config, channels)
    total = k * c_d + k  # psi
    total += k * channels + k  # semantic_conv
    p = 0
    if config.embedding_mode != "none":
        p = config.embed_channels
        total += p * config.embed_raw_dim + p
    d_in = 2 * k + p
    hid = config.hidden

    def mlp(out_dim: int) -> int:
        return 2 * d_in + (hid * d_in + hid) + 2 * hid + (out_dim * hid + out_dim)

    if config.independent_heads:
        total += config.n_masks * mlp(1)
    else:
        total += mlp(config.n_masks)
    return total


# ---------------------------------------------------------------------------
# forward stages (each with a recorded variant)


def roi_descriptor_vjp(
    f: Array, mode: str, psi: LinearParams
) -> tuple[Array, VjpRecord]:
    """Whole-RoI summary vector: psi applied to a flatten/max/mean of f."""
    if mode not in DESCRIPTOR_MODES:
        raise ConfigError(f"unknown descriptor mode {mode!r}")
    c, h, w = f.shape
    if mode == "average":
        x = f.mean(axis=(1, 2))
    elif mode == "maximum":
        flat = f.reshape(c, h * w)
        arg = flat.argmax(axis=1)
        x = flat[np.arange(c), arg]
    else:
        x = f.ravel()
    d, rec = linear_vjp(x, psi)

    def backward(gd: Array) -> tuple[Array, Array, Array]:
        gx, gw, gb = rec.backward(gd)
        if mode == "average":
            gf = np.broadcast_to(gx[:, None, None] / (h * w), f.shape).copy()
        elif mode == "maximum":
            gf = np.zeros((c, h * w))
            gf[np.arange(c), arg] = gx
            gf = gf.reshape(c, h, w)
        else:
            gf = gx.reshape(f.shape)
        return gf, gw, gb

    return d, VjpRecord("roi_descriptor", backward)


def roi_descriptor(f: Array, mode: str, psi: LinearParams) -> Array:
    return roi_descriptor_vjp(f, mode, psi)[0]


def semantic_feature_map_vjp(f: Array, conv: LinearParams) -> tuple[Array, VjpRecord]:
    """Per-position projection of the pooled grid to descriptor space."""
    return conv1x1_vjp(f, conv)


def semantic_feature_map(f: Array, conv: LinearParams) -> Array:
    return conv1x1_vjp(f, conv)[0]


def _mlp_chain_vjp(
    z: Array, mlp: MaskMlpParams
) -> tuple[Array, Callable[[Array], tuple]]:
    """Norm-ReLU-Linear twice over row batch z; backward yields
    (gz, MaskMlpParams-shaped grads)."""
    a1, r1 = layer_norm_vjp(z, mlp.trunk_norm)
    a2, r2 = relu_vjp(a1)
    a3, r3 = linear_vjp(a2, mlp.trunk_linear)
    a4, r4 = layer_norm_vjp(a3, mlp.head_norm)
    a5, r5 = relu_vjp(a4)
    out, r6 = linear_vjp(a5, mlp.head_linear)

    def backward(gout: Array) -> tuple[Array, MaskMlpParams]:
        g5, g_hl_w, g_hl_b = r6.backward(gout)
        g4 = r5.backward(g5)[0]
        g3, g_hn_g, g_hn_s = r4.backward(g4)
        g2, g_tl_w, g_tl_b = r3.backward(g3)
        g1 = r2.backward(g2)[0]
        gz, g_tn_g, g_tn_s = r1.backward(g1)
        grads = MaskMlpParams(
            trunk_norm=LayerNormParams(g_tn_g, g_tn_s, mlp.trunk_norm.epsilon),
            trunk_linear=LinearParams(g_tl_w, g_tl_b),
            head_norm=LayerNormParams(g_hn_g, g_hn_s, mlp.head_norm.epsilon),
            head_linear=LinearParams(g_hl_w, g_hl_b),
        )
        return gz, grads

    return out, backward


def mask_logits_vjp(
    d: Array, s: Array, p: Array | None, params: SraParams
) -> tuple[Array, VjpRecord]:
    """Pre-softmax mask scores (N, h, w).

    Every position (j, k) feeds the same regressor(s) with
    [d, s(:,j,k), p(:,j,k)]; positions are batched as rows.  Backward returns
    (gd, gs, gp, mlp_grads) where mlp_grads mirrors the trunk/head fields (a
    MaskMlpParams for the shared trunk, a list of them per independent head).
    """
    k, h, w = s.shape
    if d.shape[0] != k:
        raise ShapeError(
            f"mask_logits: descriptor dim {d.shape[0]} != semantic dim {k}"
        )
    hw = h * w
    cols = [np.broadcast_to(d, (hw, k)), s.reshape(k, hw).T]
    p_dim = 0
    if p is not None:
        p_dim = p.shape[0]
        cols.append(p.reshape(p_dim, hw).T)
    z = np.concatenate(cols, axis=1)

    if params.mask_mlps is None:
        out, chain_back = _mlp_chain_vjp(z, _shared_mlp(params))
        n = out.shape[1]
        logits = out.T.reshape(n, h, w)

        def backward(gy: Array):
            gz, grads = chain_back(gy.reshape(n, hw).T)
            return _split_z_grad(gz, k, p_dim, h, w) + (grads,)

        return logits, VjpRecord("mask_logits", backward)

    outs = []
    backs = []
    for mlp in params.mask_mlps:
        o, b = _mlp_chain_vjp(z, mlp)
        outs.append(o[:, 0])
        backs.append(b)
    logits = np.stack(outs).reshape(len(outs), h, w)

    def backward_ind(gy: Array):
        gz = np.zeros_like(z)
        grads = []
        for i, b in enumerate(backs):
            gz_i, g_i = b(gy[i].reshape(hw, 1))
            gz += gz_i
            grads.append(g_i)
        return _split_z_grad(gz, k, p_dim, h, w) + (grads,)

    return logits, VjpRecord("mask_logits", backward_ind)


def _shared_mlp(params: SraParams) -> MaskMlpParams:
    return MaskMlpParams(
        trunk_norm=params.trunk_norm,
        trunk_linear=params.trunk_linear,
        head_norm=params.head_norm,
        head_linear=params.head_linear,
    )


def _split_z_grad(gz: Array, k: int, p_dim: int, h: int, w: int):
    gd = gz[:, :k].sum(axis=0)
    gs = gz[:, k : 2 * k].T.reshape(k, h, w)
    gp = gz[:, 2 * k :].T.reshape(p_dim, h, w) if p_dim else None
    return gd, gs, gp


def mask_logits(d: Array, s: Array, p: Array | None, params: SraParams) -> Array:
    return mask_logits_vjp(d, s, p, params)[0]


def masks_from_logits_vjp(logits: Array, gamma: float) -> tuple[Array, VjpRecord]:
    """Amplified spatial softmax: each mask slice is nonnegative, sums to 1."""
    return softmax_spatial_vjp(logits, gamma)


def masks_from_logits(logits: Array, gamma: float) -> Array:
    return softmax_spatial_vjp(logits, gamma)[0]


def sample_roi_feature_vjp(f: Array, masks: Array) -> tuple[Array, VjpRecord]:
    """Mask-weighted sums of the pooled grid: y[n, c] = sum_jk f[c]·m[n]."""
    c, h, w = f.shape
    n, mh, mw = masks.shape
    if (mh, mw) != (h, w):
        raise ShapeError(
            f"sample_roi_feature: mask grid {mh}x{mw} != feature grid {h}x{w}"
        )
    f_flat = f.reshape(c, h * w)
    m_flat = masks.reshape(n, h * w)
    y = m_flat @ f_flat.T

    def backward(gy: Array) -> tuple[Array, Array]:
        gf = (gy.T @ m_flat).reshape(c, h, w)
        gm = (gy @ f_flat).reshape(n, h, w)
        return gf, gm

    return y, VjpRecord("sample_roi_feature", backward)


def sample_roi_feature(f: Array, masks: Array) -> Array:
    return sample_roi_feature_vjp(f, masks)[0]


def embedding_raw(config: SraConfig, grid: GridSize) -> Array | None:
    if config.embedding_mode == "none":
        return None
    if config.embedding_mode == "position":
        return position_embedding_raw(grid)
    return area_embedding_raw(grid, config.budget)


# ---------------------------------------------------------------------------
# full pipeline


def choose_grid(box: RoIBox, config: SraConfig) -> GridSize:
    if config.fixed_grid is not None:
        return GridSize(*config.fixed_grid)
    return dynamic_grid_size(box, config.budget)


def extract_on_grid_recorded(
    f: Array, params: SraParams, config: SraConfig
) -> tuple[Array, Array, Callable[[Array], tuple[SraParams, Array]]]:
    """Post-pooling pipeline on an already-sampled (C, h, w) grid.

    Returns (feature, masks, backward) with backward mapping a feature
    cotangent to (parameter grads, grad wrt f).
    """
    _, h, w = f.shape
    d, rec_desc = roi_descriptor_vjp(f, config.descriptor_mode, params.psi)
    s, rec_sem = conv1x1_vjp(f, params.semantic_conv)
    p = None
    rec_embed = None
    raw = embedding_raw(config, GridSize(h, w))
    if raw is not None:
        p, rec_embed = conv1x1_vjp(raw, params.embed_proj)
    logits, rec_mlp = mask_logits_vjp(d, s, p, params)
    masks, rec_soft = softmax_spatial_vjp(logits, config.gamma)
    y, rec_samp = sample_roi_feature_vjp(f, masks)

    def backward(gy: Array) -> tuple[SraParams, Array]:
        gf_samp, gm = rec_samp.backward(gy)
        (glogits,) = rec_soft.backward(gm)
        gd, gs, gp, mlp_grads = rec_mlp.backward(glogits)
        gf_sem, g_sem_w, g_sem_b = rec_sem.backward(gs)
        gf_desc, g_psi_w, g_psi_b = rec_desc.backward(gd)
        g_embed = None
        if rec_embed is not None:
            _, g_emb_w, g_emb_b = rec_embed.backward(gp)
            g_embed = LinearParams(g_emb_w, g_emb_b)
        if isinstance(mlp_grads, list):
            grads = SraParams(
                psi=LinearParams(g_psi_w, g_psi_b),
                semantic_conv=LinearParams(g_sem_w, g_sem_b),
                embed_proj=g_embed,
                trunk_norm=None,
                trunk_linear=None,
                head_norm=None,
                head_linear=None,
                mask_mlps=mlp_grads,
            )
        else:
            grads = SraParams(
                psi=LinearParams(g_psi_w, g_psi_b),
                semantic_conv=LinearParams(g_sem_w, g_sem_b),
                embed_proj=g_embed,
                trunk_norm=mlp_grads.trunk_norm,
                trunk_linear=mlp_grads.trunk_linear,
                head_norm=mlp_grads.head_norm,
                head_linear=mlp_grads.head_linear,
            )
        gf = gf_samp + gf_sem + gf_desc
        return grads, gf

    return y, masks, backward


def extract_on_grid(f: Array, params: SraParams, config: SraConfig) -> tuple[Array, Array]:
    y, masks, _ = extract_on_grid_recorded(f, params, config)
    return y, masks


def sra_extract_recorded(
    fmap: Array, box: RoIBox, params: SraParams, config: SraConfig
) -> tuple[ExtractResult, SraTape]:
    """Forward pass with gradient recording; pair with ``sra_backward``."""
    grid = choose_grid(box, config)
    if config.descriptor_mode == "concatenation" and config.fixed_grid is None:
        raise ConfigError("concatenation descriptor requires a fixed grid")
    f, rec_pool = block_average_pool_vjp(fmap, box, grid)
    y, masks, grid_backward = extract_on_grid_recorded(f, params, config)

    def backward(gy: Array) -> tuple[SraParams, Array]:
        grads, gf = grid_backward(gy)
        (gmap,) = rec_pool.backward(gf)
        return grads, gmap

    return ExtractResult(y, masks, grid), SraTape(backward)


def sra_extract(
    fmap: Array, box: RoIBox, params: SraParams, config: SraConfig
) -> ExtractResult:
    result, _ = sra_extract_recorded(fmap, box, params, config)
    return result


def sra_backward(cotangent: Array, tape: SraTape | None) -> tuple[SraParams, Array]:
    """Gradients of a scalar with given feature cotangent: (param grads, dF)."""
    if tape is None:
        raise ValueError("sra_backward: no saved forward state (run the recorded forward first)")
    return tape.backward(cotangent)


def scaled_config(config: SraConfig, **overrides) -> SraConfig:
    """Convenience: a copy of ``config`` with fields replaced."""
    return replace(config, **overrides)
