"""Toy visual and phrase encoders.

The visual path average-pools the image by the stride, applies two 3x3
convolutions with a ReLU between them and adds a fixed sinusoidal position
table. The phrase path averages token embeddings per phrase and projects them
to the visual channel count.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor


class EncoderInputError(ValueError):
    pass


@dataclass
class VisualEncoderParams:
    conv1_w: Tensor  # 3 x 3 x 3 x C
    conv1_b: Tensor
    conv2_w: Tensor  # 3 x 3 x C x C
    conv2_b: Tensor
    stride: int = 2

    @property
    def channels(self) -> int:
        return self.conv2_w.shape[3]


@dataclass
class PhraseEncoderParams:
    embedding: Tensor  # V x E
    proj_w: Tensor  # E x C
    proj_b: Tensor  # C


def uniform_init(rng, shape, fan_in, scale=1.0) -> np.ndarray:
    limit = np.sqrt(3.0 * scale / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def init_visual_params(rng, channels=32, stride=2) -> VisualEncoderParams:
    if stride not in (1, 2, 4):
        raise EncoderInputError(f"stride must be 1, 2 or 4, got {stride}")
    C = channels
    return VisualEncoderParams(
        dc.parameter(uniform_init(rng, (3, 3, 3, C), 27)),
        dc.parameter(np.zeros(C)),
        dc.parameter(uniform_init(rng, (3, 3, C, C), 9 * C)),
        dc.parameter(np.zeros(C)),
        stride,
    )


def init_phrase_params(rng, vocab_size=16, embed_dim=32, channels=32) -> PhraseEncoderParams:
    return PhraseEncoderParams(
        dc.parameter(rng.normal(0.0, 1.0, size=(vocab_size, embed_dim))),
        dc.parameter(uniform_init(rng, (embed_dim, channels), embed_dim)),
        dc.parameter(np.zeros(channels)),
    )


@lru_cache(maxsize=16)
def _position_table(H: int, W: int, C: int) -> np.ndarray:
    pe = np.zeros((H, W, C))
    half = C // 2
    n_freq = max(half // 2, 1)
    freqs = 1.0 / (10000.0 ** (np.arange(n_freq) / n_freq))
    ys = np.arange(H)[:, None] * freqs
    xs = np.arange(W)[:, None] * freqs
    y_enc = np.concatenate([np.sin(ys), np.cos(ys)], axis=1)[:, :half]
    x_enc = np.concatenate([np.sin(xs), np.cos(xs)], axis=1)[:, :C - half]
    pe[:, :, :y_enc.shape[1]] = y_enc[:, None, :]
    pe[:, :, half:half + x_enc.shape[1]] = x_enc[None, :, :]
    pe.setflags(write=False)
    return pe


def position_encoding(H: int, W: int, C: int) -> np.ndarray:
    """Fixed 2D sinusoidal table; first half of the channels encode rows, second half columns."""
    return _position_table(H, W, C)


def encode_image(image, params: VisualEncoderParams) -> Tensor:
    img = dc.as_tensor(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise EncoderInputError(f"image must be H x W x 3, got {img.shape}")
    s = params.stride
    H0, W0, _ = img.shape
    if H0 % s or W0 % s:
        raise EncoderInputError(f"image extents {H0}x{W0} not divisible by stride {s}")
    x = dc.avg_pool(img, s)
    x = dc.relu(dc.conv2d(x, params.conv1_w, params.conv1_b))
    x = dc.conv2d(x, params.conv2_w, params.conv2_b)
    H, W, C = x.shape
    return x + position_encoding(H, W, C)


def encode_phrases(token_lists, params: PhraseEncoderParams) -> Tensor:
    """Row n is the projected mean embedding of phrase n's tokens."""
    V = params.embedding.shape[0]
    for n, toks in enumerate(token_lists):
        if len(toks) == 0:
            raise EncoderInputError(f"phrase {n} has no tokens")
        if any(not 0 <= t < V for t in toks):
            raise EncoderInputError(f"phrase {n} has a token id outside [0, {V})")
    if not token_lists:
        return Tensor(np.zeros((0, params.proj_w.shape[1])))
    # averaging matrix turns the gather into one matmul
    flat = [t for toks in token_lists for t in toks]
    avg = np.zeros((len(token_lists), len(flat)))
    col = 0
    for n, toks in enumerate(token_lists):
        avg[n, col:col + len(toks)] = 1.0 / len(toks)
        col += len(toks)
    emb = dc.take(params.embedding, np.asarray(flat))
    pooled = dc.matmul(Tensor(avg), emb)
    return pooled @ params.proj_w + params.proj_b
