"""Coordinate guided aggregation: masked cross-attention from phrase kernels to
visual features, followed by a 1x1 "kernel convolution" that yields masks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import NEG_INF, Tensor
from .encoders import uniform_init


@dataclass(frozen=True)
class CGAConfig:
    layers: int = 3
    heads: int = 4
    tau: float = 0.5
    hidden: int = 128  # 4 x channels
    # residual around the FFN; False gives the single-FFN block with no second shortcut
    ffn_residual: bool = True
    ln_eps: float = 1e-5
    # False disables the mask-derived attention bias (plain cross-attention)
    use_mask_bias: bool = True

    def validate(self, channels: int):
        if self.layers < 1:
            raise ValueError(f"layers must be >= 1, got {self.layers}")
        if self.heads < 1 or channels % self.heads:
            raise ValueError(f"channels {channels} not divisible by heads {self.heads}")
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")


@dataclass
class AttentionParams:
    """Columns j*d:(j+1)*d of wq/wk/wv are head j's C x C/h projection."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class KernelState:
    kernels: Tensor  # N x C
    layer: int = 0


@dataclass
class MaskSet:
    masks: Tensor  # N x H x W, post-sigmoid
    logits: Tensor | None = None


def init_attention_params(rng, channels: int, hidden: int) -> AttentionParams:
    C = channels
    return AttentionParams(
        dc.parameter(uniform_init(rng, (C, C), C)),
        dc.parameter(uniform_init(rng, (C, C), C)),
        dc.parameter(uniform_init(rng, (C, C), C)),
        dc.parameter(uniform_init(rng, (C, C), C)),
        dc.parameter(np.ones(C)),
        dc.parameter(np.zeros(C)),
        dc.parameter(uniform_init(rng, (C, hidden), C)),
        dc.parameter(np.zeros(hidden)),
        dc.parameter(uniform_init(rng, (hidden, C), hidden)),
        dc.parameter(np.zeros(C)),
    )


def kernel_masks(kernels: Tensor, fv: Tensor) -> MaskSet:
    """sigmoid(K * F_v) where * is a per-position dot product (1x1 convolution)."""
    H, W, C = fv.shape
    if kernels.shape[-1] != C:
        raise ValueError(f"kernel dim {kernels.shape[-1]} does not match feature channels {C}")
    logits = (kernels @ fv.reshape(H * W, C).T).reshape(kernels.shape[0], H, W)
    return MaskSet(dc.sigmoid(logits), logits)


def init_masks(kernels: KernelState, fv: Tensor) -> MaskSet:
    return kernel_masks(kernels.kernels, fv)


def attention_bias(masks, tau: float) -> np.ndarray:
    """N x HW additive bias: 0 where mask >= tau, -inf elsewhere; all -inf rows become 0."""
    m = masks.masks.data if isinstance(masks, MaskSet) else np.asarray(getattr(masks, "data", masks))
    m = m.reshape(m.shape[0], -1)
    bias = np.where(m >= tau, 0.0, NEG_INF)
    dead = ~np.any(m >= tau, axis=1)
    bias[dead] = 0.0
    return bias


def attention_weights(kernels: Tensor, fv: Tensor, bias, params: AttentionParams, heads: int) -> Tensor:
    """h x N x HW attention maps."""
    N, C = kernels.shape
    HW = fv.shape[0] * fv.shape[1]
    d = C // heads
    f = fv.reshape(HW, C)
    q = (kernels @ params.wq).reshape(N, heads, d)
    k = (f @ params.wk).reshape(HW, heads, d)
    logits = dc.matmul(dc.transpose(q, (1, 0, 2)), dc.transpose(k, (1, 2, 0))) * (1.0 / np.sqrt(d))
    return dc.masked_softmax(logits, bias[None])


def cga_layer(state: KernelState, fv: Tensor, masks_prev: MaskSet, params: AttentionParams,
              cfg: CGAConfig) -> tuple:
    K = state.kernels
    N, C = K.shape
    if N == 0:
        return KernelState(K, state.layer + 1), MaskSet(Tensor(np.zeros((0,) + fv.shape[:2])))
    H, W, _ = fv.shape
    h = cfg.heads
    d = C // h
    if cfg.use_mask_bias:
        bias = attention_bias(masks_prev, cfg.tau)
    else:
        bias = np.zeros((N, H * W))
    attn = attention_weights(K, fv, bias, params, h)  # h x N x HW
    v = dc.transpose((fv.reshape(H * W, C) @ params.wv).reshape(H * W, h, d), (1, 0, 2))  # h x HW x d
    heads = dc.matmul(attn, v)  # h x N x d
    merged = dc.transpose(heads, (1, 0, 2)).reshape(N, C)
    x = dc.layer_norm(merged @ params.wo, params.ln_gamma, params.ln_beta, cfg.ln_eps) + K
    ffn = dc.silu(x @ params.ffn_w1 + params.ffn_b1) @ params.ffn_w2 + params.ffn_b2
    K_new = x + ffn if cfg.ffn_residual else ffn
    return KernelState(K_new, state.layer + 1), kernel_masks(K_new, fv)


def run_cga(kernels0: KernelState, fv: Tensor, layer_params, cfg: CGAConfig) -> list:
    """[(K^l, M^l) for l = 1..L], starting from M^0 = sigmoid(K^0 * F_v)."""
    if len(layer_params) != cfg.layers:
        raise ValueError(f"expected {cfg.layers} layer parameter sets, got {len(layer_params)}")
    state = kernels0
    masks = init_masks(kernels0, fv) if kernels0.kernels.shape[0] else None
    out = []
    for params in layer_params:
        state, masks = cga_layer(state, fv, masks, params, cfg)
        out.append((state, masks))
    return out
