"""Independent reference implementations and the checks that compare the
fast paths against them.

Each oracle recomputes an operation the dumb way (exhaustive enumeration,
position loops, finite differences) so the optimized implementations have
something to be wrong against.  ``run_all`` powers the CLI ``oracles``
subcommand; the unit tests call the same checks and additionally pin
hand-derived literals.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .baselines import roi_align, roi_pool
from .core import (
    SraConfig,
    init_params,
    mask_logits,
    param_leaves,
    parameter_count,
    roi_descriptor,
    sample_roi_feature,
    semantic_feature_map,
    sra_extract,
    sra_extract_recorded,
)
from .embeddings import area_embedding_raw, project_embedding
from .evaluate import flops_estimate
from .numerics import (
    Array,
    LayerNormParams,
    LinearParams,
    check_vjp,
    layer_norm,
    linear,
    softmax_spatial,
)
from .sampler import GridSize, RoIBox, block_average_pool, dynamic_grid_size


@dataclass
class OracleResult:
    name: str
    passed: bool
    max_err: float
    detail: str = ""


# ---------------------------------------------------------------------------
# reference implementations


def grid_size_exhaustive(box: RoIBox, budget: int) -> GridSize:
    """Enumerate every feasible (h, w) pair; same objective and tie-breaks."""
    ratio = box.height / box.width
    hs, ws = [], []
    for h in range(1, budget + 1):
        for w in range(1, budget // h + 1):
            hs.append(h)
            ws.append(w)
    hs = np.array(hs)
    ws = np.array(ws)
    diffs = np.abs(hs / ws - ratio)
    order = np.lexsort((-hs, -(hs * ws), diffs))
    return GridSize(int(hs[order[0]]), int(ws[order[0]]))


def conv1x1_loop(x: Array, weight: Array, bias: Array) -> Array:
    c_out = weight.shape[0]
    _, h, w = x.shape
    out = np.empty((c_out, h, w))
    for j in range(h):
        for k in range(w):
            out[:, j, k] = weight @ x[:, j, k] + bias
    return out


def mask_logits_loop(d: Array, s: Array, p: Array | None, params) -> Array:
    """Position-by-position two-block MLP, no batching."""
    _, h, w = s.shape
    mlps = params.mask_mlps
    if mlps is None:
        from .core import _shared_mlp

        mlps = [_shared_mlp(params)]
    outs = []
    for mlp in mlps:
        n_out = mlp.head_linear.out_dim
        block = np.empty((n_out, h, w))
        for j in range(h):
            for k in range(w):
                z = [d, s[:, j, k]]
                if p is not None:
                    z.append(p[:, j, k])
                z = np.concatenate(z)
                a = np.maximum(layer_norm(z, mlp.trunk_norm), 0.0)
                a = linear(a, mlp.trunk_linear)
                a = np.maximum(layer_norm(a, mlp.head_norm), 0.0)
                block[:, j, k] = linear(a, mlp.head_linear)
        outs.append(block)
    return np.concatenate(outs, axis=0)


def sample_roi_feature_loop(f: Array, masks: Array) -> Array:
    c, h, w = f.shape
    n = masks.shape[0]
    y = np.zeros((n, c))
    for i in range(n):
        for ch in range(c):
            for j in range(h):
                for k in range(w):
                    y[i, ch] += f[ch, j, k] * masks[i, j, k]
    return y


def roi_pool_loop(fmap: Array, box: RoIBox, out: tuple[int, int]) -> Array:
    """Membership-tested max: every pixel checked against every bin."""
    c, height, width = fmap.shape
    oh, ow = out
    bh = box.height / oh
    bw = box.width / ow
    result = np.empty((oh, ow, c))
    for bj in range(oh):
        for bk in range(ow):
            y_lo, y_hi = box.y0 + bj * bh, box.y0 + (bj + 1) * bh
            x_lo, x_hi = box.x0 + bk * bw, box.x0 + (bk + 1) * bw
            members = [
                (py, px)
                for py in range(height)
                for px in range(width)
                if y_lo <= py < y_hi and x_lo <= px < x_hi
            ]
            if members:
                result[bj, bk] = np.max([fmap[:, py, px] for py, px in members], axis=0)
            else:
                py = int(np.clip(round(box.y0 + (bj + 0.5) * bh), 0, height - 1))
                px = int(np.clip(round(box.x0 + (bk + 0.5) * bw), 0, width - 1))
                result[bj, bk] = fmap[:, py, px]
    return result


def full_pipeline_gradcheck(seed: int, config: SraConfig | None = None, channels: int = 4):
    """Finite-difference check across the input map and every parameter."""
    if config is None:
        config = SraConfig(
            n_masks=3,
            budget=9,
            descriptor_dim=8,
            embed_channels=4,
            hidden=8,
            fixed_grid=(3, 3),
        )
    rng = np.random.default_rng(seed)
    params = init_params(config, channels, rng)
    fmap = rng.standard_normal((channels, 8, 8))
    box = RoIBox(1.3, 2.1, 6.2, 6.9)

    def safe(name: str) -> str:
        return name.replace(".", "_").replace("[", "_").replace("]", "")

    names = [n for n, _ in param_leaves(params)]

    def fn(fmap, **leafed):
        p = copy.deepcopy(params)
        for name, arr in param_leaves(p):
            arr[...] = leafed[safe(name)]
        result, tape = sra_extract_recorded(fmap, box, p, config)

        def vjp(cot):
            grads, gmap = tape.backward(cot)
            out = {"fmap": gmap}
            for name, arr in param_leaves(grads):
                out[safe(name)] = arr
            return out

        return result.feature, vjp

    args = {"fmap": fmap}
    for name, arr in param_leaves(params):
        args[safe(name)] = arr
    assert len(set(safe(n) for n in names)) == len(names)
    return check_vjp(fn, args, seed=seed)


# ---------------------------------------------------------------------------
# checks


def _result(name: str, err: float, tol: float, detail: str = "") -> OracleResult:
    return OracleResult(name=name, passed=err < tol, max_err=float(err), detail=detail)


def check_grid_vs_exhaustive(seed: int = 0, n_boxes: int = 60) -> OracleResult:
    rng = np.random.default_rng(seed)
    mismatches = 0
    for budget in (1, 32, 64, 128, 256):
        for _ in range(n_boxes):
            x0, y0 = rng.uniform(0, 40, 2)
            bw, bh = rng.uniform(0.5, 80, 2)
            box = RoIBox(x0, y0, x0 + bw, y0 + bh)
            if tuple(dynamic_grid_size(box, budget)) != tuple(grid_size_exhaustive(box, budget)):
                mismatches += 1
    return _result("grid_vs_exhaustive", float(mismatches), 0.5, f"{mismatches} mismatches")


def check_pool_bilinear_hand(seed: int = 0) -> OracleResult:
    # single-channel 2x2 map [[0,1],[2,3]] is the bilinear field x + 2y;
    # the four quarter-point samples of box (0,0)-(1,1) average to the
    # center value 1.5
    fmap = np.array([[[0.0, 1.0], [2.0, 3.0]]])
    got = block_average_pool(fmap, RoIBox(0, 0, 1, 1), GridSize(1, 1))
    return _result("pool_bilinear_hand", abs(float(got[0, 0, 0]) - 1.5), 1e-12)


def check_area_embedding_hand(seed: int = 0) -> OracleResult:
    emb = area_embedding_raw(GridSize(2, 2), 4)
    want = np.array([1.0, 0.75, 0.25, 0.0])
    err = float(np.abs(emb[:4, 0, 0] - want).max())
    ident = area_embedding_raw(GridSize(4, 4), 4)
    err = max(err, float(np.abs(ident[:4, :, 0] - np.eye(4)).max()))
    return _result("area_embedding_hand", err, 1e-12)


def check_conv1x1_vs_loop(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((5, 3, 4))
    p = LinearParams(rng.standard_normal((6, 5)), rng.standard_normal(6))
    err = float(np.abs(semantic_feature_map(x, p) - conv1x1_loop(x, p.weight, p.bias)).max())
    raw = rng.standard_normal((4, 3, 4))
    proj = LinearParams(rng.standard_normal((2, 4)), rng.standard_normal(2))
    err = max(err, float(np.abs(project_embedding(raw, proj) - conv1x1_loop(raw, proj.weight, proj.bias)).max()))
    return _result("conv1x1_vs_loop", err, 1e-12)


def check_descriptor_vs_loop(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((5, 3, 4))
    psi = LinearParams(rng.standard_normal((7, 5)), rng.standard_normal(7))
    mean = np.zeros(5)
    for j in range(3):
        for k in range(4):
            mean += f[:, j, k]
    mean /= 12.0
    want = psi.weight @ mean + psi.bias
    err = float(np.abs(roi_descriptor(f, "average", psi) - want).max())
    return _result("descriptor_vs_loop", err, 1e-12)


def check_mask_logits_vs_loop(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    config = SraConfig(
        n_masks=3, budget=16, descriptor_dim=4, embed_channels=3, hidden=6, fixed_grid=(3, 3)
    )
    params = init_params(config, 5, rng)
    d = rng.standard_normal(4)
    s = rng.standard_normal((4, 3, 3))
    p = rng.standard_normal((3, 3, 3))
    err = float(np.abs(mask_logits(d, s, p, params) - mask_logits_loop(d, s, p, params)).max())
    return _result("mask_logits_vs_loop", err, 1e-10)


def check_sampling_vs_loop(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((6, 4, 5))
    masks = rng.random((3, 4, 5))
    masks /= masks.sum(axis=(1, 2), keepdims=True)
    err = float(np.abs(sample_roi_feature(f, masks) - sample_roi_feature_loop(f, masks)).max())
    return _result("sampling_vs_loop", err, 1e-12)


def check_extract_vs_recomposition(seed: int = 0) -> OracleResult:
    """End-to-end extraction equals gluing the individually tested stages."""
    rng = np.random.default_rng(seed)
    config = SraConfig(n_masks=4, budget=16, descriptor_dim=6, embed_channels=3, hidden=5)
    params = init_params(config, 5, rng)
    fmap = rng.standard_normal((5, 10, 10))
    box = RoIBox(1.2, 0.7, 8.4, 7.3)
    result = sra_extract(fmap, box, params, config)
    grid = dynamic_grid_size(box, config.budget)
    f = block_average_pool(fmap, box, grid)
    d = roi_descriptor(f, config.descriptor_mode, params.psi)
    s = semantic_feature_map(f, params.semantic_conv)
    p = project_embedding(area_embedding_raw(grid, config.budget), params.embed_proj)
    logits = mask_logits(d, s, p, params)
    masks = softmax_spatial(logits, config.gamma)
    y = sample_roi_feature(f, masks)
    err = float(np.abs(result.feature - y).max())
    err = max(err, float(np.abs(result.masks - masks).max()))
    return _result("extract_vs_recomposition", err, 1e-10)


def check_gradients(seed: int = 0, n_seeds: int = 3) -> OracleResult:
    worst = 0.0
    for s in range(n_seeds):
        report = full_pipeline_gradcheck(seed + s)
        worst = max(worst, report.max_rel_err)
    return _result("pipeline_gradcheck", worst, 1e-4, f"{n_seeds} seeds")


def check_roi_pool_vs_loop(seed: int = 0) -> OracleResult:
    rng = np.random.default_rng(seed)
    fmap = rng.standard_normal((3, 8, 8))
    box = RoIBox(0.7, 1.1, 6.9, 7.4)
    err = float(np.abs(roi_pool(fmap, box, (2, 2)) - roi_pool_loop(fmap, box, (2, 2))).max())
    return _result("roi_pool_vs_loop", err, 0.0 + 1e-30, "exact")


def check_roi_align_ramp(seed: int = 0) -> OracleResult:
    # field value x + 2y: every bin average equals the field at the bin center
    yy, xx = np.mgrid[0:12, 0:12]
    fmap = (xx + 2 * yy).astype(float)[None]
    box = RoIBox(1.5, 2.25, 9.5, 8.75)
    out = roi_align(fmap, box, (3, 4))
    bh, bw = box.height / 3, box.width / 4
    want = np.empty((3, 4))
    for j in range(3):
        for k in range(4):
            cy = box.y0 + (j + 0.5) * bh
            cx = box.x0 + (k + 0.5) * bw
            want[j, k] = cx + 2 * cy
    return _result("roi_align_ramp", float(np.abs(out[:, :, 0] - want).max()), 1e-10)


def check_parameter_count_golden(seed: int = 0) -> OracleResult:
    # hand sum at K=1, P=0 (no embedding), hidden=1, N=1, C=1:
    #   psi 1*1+1=2; semantic 1*1+1=2; trunk_norm 2*2=4;
    #   trunk_linear 1*2+1=3; head_norm 2; head_linear 1*1+1=2  -> 15
    config = SraConfig(
        n_masks=1, budget=1, descriptor_dim=1, embed_channels=1, hidden=1, embedding_mode="none"
    )
    got = parameter_count(config, 1)
    return _result("parameter_count_golden", abs(got - 15), 0.5, f"got {got}")


def check_flops_golden(seed: int = 0) -> OracleResult:
    # hand sum at N=K=C=hidden=1, no embedding, 1x1 grid:
    #   pool 20; reduce 1; psi 2; semantic 2; trunk_norm 10; relu 2;
    #   trunk_linear 3; head_norm 5; relu 1; head_linear 2; softmax 4;
    #   weighted sum 1  -> 53
    config = SraConfig(
        n_masks=1, budget=1, descriptor_dim=1, embed_channels=1, hidden=1, embedding_mode="none"
    )
    got = flops_estimate(config, 1, (1, 1)).per_roi
    return _result("flops_golden", abs(got - 53), 0.5, f"got {got}")


ALL_CHECKS: list[Callable[[int], OracleResult]] = [
    check_grid_vs_exhaustive,
    check_pool_bilinear_hand,
    check_area_embedding_hand,
    check_conv1x1_vs_loop,
    check_descriptor_vs_loop,
    check_mask_logits_vs_loop,
    check_sampling_vs_loop,
    check_extract_vs_recomposition,
    check_gradients,
    check_roi_pool_vs_loop,
    check_roi_align_ramp,
    check_parameter_count_golden,
    check_flops_golden,
]


def run_all(seed: int = 0) -> list[OracleResult]:
    return [check(seed) for check in ALL_CHECKS]
