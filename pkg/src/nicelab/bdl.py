"""Barycenter driven localization.

One offset field is predicted from the visual features and shared by every
phrase. A phrase's box is read off that field at its mask barycenter:
``x1 = Dx - l*W, y1 = Dy - t*H, x2 = Dx + r*W, y2 = Dy + b*H``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .encoders import uniform_init

log = logging.getLogger(__name__)

EMPTY_MASS = 1e-8


@dataclass
class BottleneckParams:
    w1: Tensor  # 3 x 3 x C x C/4
    b1: Tensor
    w2: Tensor  # 3 x 3 x C/4 x 4
    b2: Tensor


@dataclass
class BoxHeadParams:
    w: Tensor  # C x 4
    b: Tensor  # 4


def init_bottleneck_params(rng, channels: int) -> BottleneckParams:
    mid = max(channels // 4, 1)
    return BottleneckParams(
        dc.parameter(uniform_init(rng, (3, 3, channels, mid), 9 * channels)),
        dc.parameter(np.zeros(mid)),
        dc.parameter(uniform_init(rng, (3, 3, mid, 4), 9 * mid)),
        dc.parameter(np.zeros(4)),
    )


def init_box_head_params(rng, channels: int) -> BoxHeadParams:
    return BoxHeadParams(dc.parameter(uniform_init(rng, (channels, 4), channels)), dc.parameter(np.zeros(4)))


def offset_map(fv: Tensor, params: BottleneckParams) -> Tensor:
    """H x W x 4 field of normalized (l, t, r, b) distances in [0, 1]."""
    if fv.shape[2] != params.w1.shape[2]:
        raise ValueError(f"feature channels {fv.shape[2]} do not match bottleneck input {params.w1.shape[2]}")
    x = dc.relu(dc.conv2d(fv, params.w1, params.b1))
    return dc.sigmoid(dc.conv2d(x, params.w2, params.b2))


def _mask_tensor(masks) -> Tensor:
    return masks.masks if hasattr(masks, "masks") else dc.as_tensor(masks)


def barycenter_mean(masks) -> Tensor:
    """N x 2 mask-weighted centroids (Dx, Dy) in grid coordinates.

    A mask whose total mass is below 1e-8 falls back to the grid centre.
    """
    M = _mask_tensor(masks)
    N, H, W = M.shape
    xs = np.arange(W, dtype=np.float64)[None, None, :]
    ys = np.arange(H, dtype=np.float64)[None, :, None]
    mass = M.sum(axis=(1, 2))
    empty = mass.data < EMPTY_MASS
    if empty.any():
        log.info("barycenter fallback to grid centre for %d empty mask(s)", int(empty.sum()))
    safe = dc.where(empty, 1.0, mass)
    dx = (M * xs).sum(axis=(1, 2)) / safe
    dy = (M * ys).sum(axis=(1, 2)) / safe
    D = dc.stack([dx, dy], axis=1)
    if empty.any():
        centre = np.array([(W - 1) / 2.0, (H - 1) / 2.0])
        D = dc.where(empty[:, None], np.broadcast_to(centre, (N, 2)), D)
    return D


def barycenter_topk(masks, k: int) -> list:
    """Per phrase, the k highest-valued grid points as (x, y, confidence), descending.

    Ties go to the earlier point in row-major order.
    """
    M = _mask_tensor(masks).data
    N, H, W = M.shape
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > H * W:
        raise ValueError(f"k={k} exceeds the {H * W} grid points")
    out = []
    for n in range(N):
        flat = M[n].reshape(-1)
        order = np.argsort(-flat, kind="stable")[:k]
        out.append([(int(i % W), int(i // W), float(flat[i])) for i in order])
    return out


def topk_points(masks, k: int) -> np.ndarray:
    """N x 2 chosen anchor per phrase: the top-k candidate with the highest confidence."""
    cands = barycenter_topk(masks, k)
    pts = []
    for c in cands:
        best = max(range(len(c)), key=lambda i: (c[i][2], -i))
        pts.append(c[best][:2])
    return np.asarray(pts, dtype=np.float64).reshape(-1, 2)


_EDGE_SIGN = np.array([-1.0, -1.0, 1.0, 1.0])


def assemble_boxes(D, O, W: int, H: int) -> Tensor:
    """N x 4 raw (unclamped) boxes from barycenters and the offset field."""
    D = dc.as_tensor(D)
    ltrb = dc.bilinear_sample(O, D)
    scale = np.array([W, H, W, H], dtype=np.float64)
    anchor = dc.concat([D, D], axis=1)
    return anchor + ltrb * (_EDGE_SIGN * scale)


def clamp_boxes(boxes, W: float, H: float) -> np.ndarray:
    b = np.array(getattr(boxes, "data", boxes), dtype=np.float64).reshape(-1, 4)
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, W)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, H)
    return b


def degenerate_boxes(boxes) -> np.ndarray:
    """Boolean mask of boxes with non-positive width or height."""
    b = np.asarray(getattr(boxes, "data", boxes)).reshape(-1, 4)
    return (b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])


def mask_to_tight_box(mask, thresh: float = 0.5):
    """Smallest half-open box around the mask support; ``(box, found)``.

    An empty support gives the sentinel box (0, 0, 0, 0) with ``found=False``.
    """
    m = np.asarray(getattr(mask, "data", mask)) >= thresh
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return (0.0, 0.0, 0.0, 0.0), False
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)), True


def tight_boxes(masks, thresh: float = 0.5):
    M = _mask_tensor(masks).data
    boxes, found = zip(*(mask_to_tight_box(m, thresh) for m in M)) if len(M) else ((), ())
    return np.asarray(boxes, dtype=np.float64).reshape(-1, 4), np.asarray(found, dtype=bool)


def direct_box_head(kernels, params: BoxHeadParams, W: int, H: int) -> Tensor:
    """Boxes regressed from kernels alone: sigmoid gives normalized (cx, cy, w, h)."""
    K = kernels.kernels if hasattr(kernels, "kernels") else dc.as_tensor(kernels)
    s = dc.sigmoid(K @ params.w + params.b)
    scale = np.array([W, H, W, H], dtype=np.float64)
    cxcywh = s * scale
    centre = cxcywh[:, 0:2]
    half = cxcywh[:, 2:4] * 0.5
    return dc.concat([centre - half, centre + half], axis=1)
