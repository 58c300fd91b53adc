"""Parameter container and the full forward pass for one scene."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from .bdl import (BottleneckParams, BoxHeadParams, assemble_boxes, barycenter_mean, clamp_boxes,
                  direct_box_head, init_box_head_params, init_bottleneck_params, offset_map, tight_boxes,
                  topk_points)
from .cga import CGAConfig, KernelState, init_attention_params, run_cga
from .encoders import (PhraseEncoderParams, VisualEncoderParams, encode_image, encode_phrases,
                       init_phrase_params, init_visual_params)

MODES = ("joint", "mask_only", "box_only", "two_branch")
BOX_SOURCES = ("model", "tight")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32
    stride: int = 2
    embed_dim: int = 32
    vocab_size: int = 16
    layers: int = 3
    heads: int = 4
    tau: float = 0.5
    hidden: int = 128  # 4 x channels
    ffn_residual: bool = True
    mode: str = "joint"
    barycenter: str = "average"  # "average", "top1" or "topK" for any K >= 1

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        parse_barycenter(self.barycenter)
        self.cga().validate(self.channels)
        if self.stride not in (1, 2, 4):
            raise ValueError(f"stride must be 1, 2 or 4, got {self.stride}")

    def cga(self) -> CGAConfig:
        return CGAConfig(self.layers, self.heads, self.tau, self.hidden, self.ffn_residual)

    def digest(self) -> str:
        """Hash over the fields that determine parameter shapes and the forward graph."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parse_barycenter(spec: str):
    """'average' -> None; 'top1' / 'top50' -> k."""
    if spec == "average":
        return None
    if spec.startswith("top") and spec[3:].isdigit() and int(spec[3:]) >= 1:
        return int(spec[3:])
    raise ValueError(f"barycenter must be 'average' or 'topK', got {spec!r}")


@dataclass
class NICEParams:
    visual: VisualEncoderParams
    phrase: PhraseEncoderParams
    layers: list
    bottleneck: BottleneckParams
    box_head: BoxHeadParams

    def named_parameters(self):
        for prefix, obj in (("visual", self.visual), ("phrase", self.phrase),
                            ("bottleneck", self.bottleneck), ("box_head", self.box_head)):
            for f in fields(obj):
                v = getattr(obj, f.name)
                if isinstance(v, dc.Tensor):
                    yield f"{prefix}.{f.name}", v
        for i, lp in enumerate(self.layers):
            for f in fields(lp):
                yield f"cga.{i}.{f.name}", getattr(lp, f.name)

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state mismatch: missing={missing} unexpected={extra}")
        for k, t in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != t.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != expected {t.shape}")
            t.data = arr.copy()

    def zero_grad(self):
        for _, t in self.named_parameters():
            t.grad = None


def init_params(cfg: ModelConfig, seed: int) -> NICEParams:
    cfg.validate()
    rng = np.random.default_rng(seed)
    C = cfg.channels
    return NICEParams(
        init_visual_params(rng, C, cfg.stride),
        init_phrase_params(rng, cfg.vocab_size, cfg.embed_dim, C),
        [init_attention_params(rng, C, cfg.hidden) for _ in range(cfg.layers)],
        init_bottleneck_params(rng, C),
        init_box_head_params(rng, C),
    )


@dataclass
class SceneTargets:
    masks: np.ndarray  # N x H x W binary, feature grid
    boxes: np.ndarray  # N x 4, feature-grid units
    is_thing: np.ndarray
    is_plural: np.ndarray


def scene_targets(scene, stride: int) -> SceneTargets:
    """Ground truth moved to the feature grid: masks by majority pooling, boxes by division."""
    H0, W0 = scene.height, scene.width
    N = len(scene.phrases)
    s = stride
    if N:
        m = np.stack([p.mask for p in scene.phrases]).astype(np.float64)
        pooled = m.reshape(N, H0 // s, s, W0 // s, s).mean(axis=(2, 4))
        masks = (pooled >= 0.5).astype(np.float64)
        boxes = np.array([p.box for p in scene.phrases], dtype=np.float64) / s
    else:
        masks = np.zeros((0, H0 // s, W0 // s))
        boxes = np.zeros((0, 4))
    return SceneTargets(masks, boxes,
                        np.array([p.is_thing for p in scene.phrases], dtype=bool),
                        np.array([p.is_plural for p in scene.phrases], dtype=bool))


@dataclass
class ForwardOutput:
    layer_masks: list  # MaskSet per layer
    kernels: dc.Tensor
    boxes: dc.Tensor | None  # raw, last layer
    features: dc.Tensor
    offsets: dc.Tensor | None = None
    barycenters: dc.Tensor | None = None


def forward(params: NICEParams, cfg: ModelConfig, image, token_lists, need_boxes: bool = True) -> ForwardOutput:
    fv = encode_image(image, params.visual)
    fp = encode_phrases(token_lists, params.phrase)
    H, W, _ = fv.shape
    stack = run_cga(KernelState(fp, 0), fv, params.layers, cfg.cga())
    state, masks = stack[-1]
    out = ForwardOutput([m for _, m in stack], state.kernels, None, fv)
    if not need_boxes or fp.shape[0] == 0:
        return out
    if cfg.mode in ("joint", "mask_only"):
        O = offset_map(fv, params.bottleneck)
        k = parse_barycenter(cfg.barycenter)
        D = barycenter_mean(masks) if k is None else dc.Tensor(topk_points(masks, min(k, H * W)))
        out.offsets, out.barycenters = O, D
        out.boxes = assemble_boxes(D, O, W, H)
    else:
        out.boxes = direct_box_head(state.kernels, params.box_head, W, H)
    return out


def predict_scene(params: NICEParams, cfg: ModelConfig, scene, box_source: str = "model"):
    """(masks N x H x W in [0, 1], clamped boxes N x 4) on the feature grid."""
    if box_source not in BOX_SOURCES:
        raise ValueError(f"box_source must be one of {BOX_SOURCES}")
    out = forward(params, cfg, scene.image, [p.tokens for p in scene.phrases], need_boxes=box_source == "model")
    masks = out.layer_masks[-1].masks.data
    H, W = masks.shape[1:]
    if box_source == "tight":
        boxes, _ = tight_boxes(masks)
    elif out.boxes is None:
        boxes = np.zeros((0, 4))
    else:
        boxes = clamp_boxes(out.boxes, W, H)
    return masks, boxes
