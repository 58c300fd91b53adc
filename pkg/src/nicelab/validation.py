"""Input checks shared by the estimator and the CLI."""
from __future__ import annotations

import numpy as np

from .scene import Scene


def check_scenes(X, stride: int | None = None, vocab_size: int | None = None, allow_empty: bool = False) -> list:
    """Validate a sequence of scenes and return it as a list."""
    if isinstance(X, Scene):
        raise TypeError("expected a sequence of Scene objects, got a single Scene")
    try:
        scenes = list(X)
    except TypeError:
        raise TypeError(f"expected a sequence of Scene objects, got {type(X).__name__}") from None
    if not scenes and not allow_empty:
        raise ValueError("at least one scene is required")
    for i, s in enumerate(scenes):
        if not isinstance(s, Scene):
            raise TypeError(f"item {i} is {type(s).__name__}, not Scene")
        img = np.asarray(s.image)
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"scene {i}: image must be H x W x 3, got {img.shape}")
        if not np.all(np.isfinite(img)) or img.min() < 0 or img.max() > 1:
            raise ValueError(f"scene {i}: image values must be finite and in [0, 1]")
        if stride and (img.shape[0] % stride or img.shape[1] % stride):
            raise ValueError(f"scene {i}: extents {img.shape[:2]} not divisible by stride {stride}")
        for j, p in enumerate(s.phrases):
            if len(p.tokens) == 0:
                raise ValueError(f"scene {i} phrase {j}: empty token list")
            if vocab_size is not None and max(p.tokens) >= vocab_size:
                raise ValueError(f"scene {i} phrase {j}: token id {max(p.tokens)} >= vocab_size {vocab_size}")
            if p.mask.shape != img.shape[:2]:
                raise ValueError(f"scene {i} phrase {j}: mask shape {p.mask.shape} != image {img.shape[:2]}")
    return scenes
