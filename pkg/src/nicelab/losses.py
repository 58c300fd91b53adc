"""Training objectives: BCE and Dice on masks, Smooth-L1 and gIoU on boxes."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

BCE_CLIP = 1e-7
MIN_EXTENT = 1e-6


@dataclass(frozen=True)
class LossWeights:
    bce: float = 1.0
    dice: float = 1.0
    smooth_l1: float = 1.0
    giou: float = 1.0

    def __post_init__(self):
        for k, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be non-negative, got {v}")


@dataclass(frozen=True)
class LossConfig:
    xi: float = 0.5
    dice_eps: float = 1.0
    # True uses the discontinuous variant: 0.5 x^2 below xi, |x| - 0.5 above
    printed_smooth_l1: bool = False

    def __post_init__(self):
        if self.xi <= 0 or self.dice_eps <= 0:
            raise ValueError("xi and dice_eps must be positive")


@dataclass
class GIoUTerms:
    intersection: np.ndarray
    union: np.ndarray
    enclosure: np.ndarray


@dataclass
class LossBreakdown:
    total: Tensor
    terms: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {k: float(v) for k, v in self.terms.items()} | {"total": float(self.total.data)}


def _check_shapes(a, b, what):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"{what}: prediction shape {tuple(a.shape)} != target shape {tuple(b.shape)}")


def bce_loss(M, Y) -> Tensor:
    M = M.masks if hasattr(M, "masks") else dc.as_tensor(M)
    Y = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    _check_shapes(M, Y, "bce_loss")
    p = dc.clip(M, BCE_CLIP, 1.0 - BCE_CLIP)
    ll = dc.log(p) * Y + dc.log(1.0 - p) * (1.0 - Y)
    return -dc.mean(ll)


def dice_loss(M, Y, eps: float = 1.0) -> Tensor:
    M = M.masks if hasattr(M, "masks") else dc.as_tensor(M)
    Y = np.asarray(getattr(Y, "data", Y), dtype=np.float64)
    _check_shapes(M, Y, "dice_loss")
    axes = tuple(range(1, M.ndim))
    inter = (M * Y).sum(axis=axes)
    denom = M.sum(axis=axes) + Y.sum(axis=axes) + eps
    return dc.mean(1.0 - (inter * 2.0 + eps) / denom)


def xyxy_to_cxcywh(boxes, W: float, H: float):
    b = dc.as_tensor(boxes)
    cx = (b[:, 0] + b[:, 2]) * (0.5 / W)
    cy = (b[:, 1] + b[:, 3]) * (0.5 / H)
    w = (b[:, 2] - b[:, 0]) * (1.0 / W)
    h = (b[:, 3] - b[:, 1]) * (1.0 / H)
    return dc.stack([cx, cy, w, h], axis=1)


def smooth_l1(x, xi: float = 0.5, printed: bool = False) -> Tensor:
    """Elementwise Smooth-L1 of a residual."""
    x = dc.as_tensor(x)
    a = dc.abs_(x)
    small = a.data < xi
    if printed:
        return dc.where(small, (x * x) * 0.5, a - 0.5)
    return dc.where(small, (x * x) * (0.5 / xi), a - 0.5 * xi)


def smooth_l1_loss(B, G, W: float, H: float, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean over phrases and the four normalized (cx, cy, w, h) components."""
    B = dc.as_tensor(B)
    G = np.asarray(getattr(G, "data", G), dtype=np.float64)
    _check_shapes(B, G, "smooth_l1_loss")
    r = xyxy_to_cxcywh(B, W, H) - xyxy_to_cxcywh(G, W, H).data
    return dc.mean(smooth_l1(r, cfg.xi, cfg.printed_smooth_l1))


def giou_terms(B: np.ndarray, G: np.ndarray) -> GIoUTerms:
    B = np.asarray(B, dtype=np.float64).reshape(-1, 4)
    G = np.asarray(G, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(B[:, 2], G[:, 2]) - np.maximum(B[:, 0], G[:, 0]), 0, None)
    ih = np.clip(np.minimum(B[:, 3], G[:, 3]) - np.maximum(B[:, 1], G[:, 1]), 0, None)
    inter = iw * ih
    union = (B[:, 2] - B[:, 0]) * (B[:, 3] - B[:, 1]) + (G[:, 2] - G[:, 0]) * (G[:, 3] - G[:, 1]) - inter
    cw = np.maximum(B[:, 2], G[:, 2]) - np.minimum(B[:, 0], G[:, 0])
    ch = np.maximum(B[:, 3], G[:, 3]) - np.minimum(B[:, 1], G[:, 1])
    return GIoUTerms(inter, union, cw * ch)


def giou_loss(B, G) -> Tensor:
    """Mean of 1 - IoU + (A_c - union) / A_c; predicted extents are floored at 1e-6."""
    B = dc.as_tensor(B)
    G = np.asarray(getattr(G, "data", G), dtype=np.float64)
    _check_shapes(B, G, "giou_loss")
    x1, y1 = B[:, 0], B[:, 1]
    x2 = dc.maximum(B[:, 2], x1 + MIN_EXTENT)
    y2 = dc.maximum(B[:, 3], y1 + MIN_EXTENT)
    gx1, gy1, gx2, gy2 = G[:, 0], G[:, 1], G[:, 2], G[:, 3]
    iw = dc.maximum(dc.minimum(x2, gx2) - dc.maximum(x1, gx1), 0.0)
    ih = dc.maximum(dc.minimum(y2, gy2) - dc.maximum(y1, gy1), 0.0)
    inter = iw * ih
    area_b = (x2 - x1) * (y2 - y1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_b + area_g - inter
    enclose = (dc.maximum(x2, gx2) - dc.minimum(x1, gx1)) * (dc.maximum(y2, gy2) - dc.minimum(y1, gy1))
    return dc.mean(1.0 - inter / union + (enclose - union) / enclose)


def total_loss(layer_masks, boxes, Y, G, W: float, H: float, weights: LossWeights = LossWeights(),
               cfg: LossConfig = LossConfig()) -> LossBreakdown:
    """Weighted sum of mask terms averaged over all layers and box terms on the given boxes.

    A zero weight skips its term entirely (its breakdown entry is 0), so
    single-task modes never touch the other branch.
    """
    if len(layer_masks) == 0:
        raise ValueError("total_loss needs at least one layer of masks")
    zero = Tensor(np.zeros(()))
    terms = {"bce": zero, "dice": zero, "smooth_l1": zero, "giou": zero}
    L = len(layer_masks)
    if weights.bce:
        terms["bce"] = sum((bce_loss(M, Y) for M in layer_masks), zero) * (1.0 / L)
    if weights.dice:
        terms["dice"] = sum((dice_loss(M, Y, cfg.dice_eps) for M in layer_masks), zero) * (1.0 / L)
    if boxes is not None and weights.smooth_l1:
        terms["smooth_l1"] = smooth_l1_loss(boxes, G, W, H, cfg)
    if boxes is not None and weights.giou:
        terms["giou"] = giou_loss(boxes, G)
    total = (terms["bce"] * weights.bce + terms["dice"] * weights.dice
             + terms["smooth_l1"] * weights.smooth_l1 + terms["giou"] * weights.giou)
    return LossBreakdown(total, {k: float(v.data) for k, v in terms.items()})
